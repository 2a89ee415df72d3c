//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::time::Instant;

use expotwist::benchmarks::{GaussianQuadratic, PoissonLinear};
use expotwist::checks::{
    carre_du_champ, integrability_probe, martingale_residual, pde_residual, surface_pde_residual,
    MartingaleOptions,
};
use expotwist::cli::config::parse_config;
use expotwist::cli::runner::run_experiment;
use expotwist::control::{compare_controls, optimal_control, ControlPolicy};
use expotwist::feynman_kac::{build_value_surface, SpaceBox, SurfaceSettings};
use expotwist::girsanov::{reference_ensemble, variational_report, weighted_expectation};
use expotwist::meanfield::{fixed_point_solve, MeanFieldProblem};
use expotwist::model::{Coordinate, CostSpec, FnTest, GeneratorOptions, ModelSpec, TimeGrid};
use expotwist::path::{collect_bundle, sample_paths, simulate_map, SeedSpec};
use expotwist::stats::{mean_stderr, Estimate};
use expotwist::twist::{TwistedDynamics, TwistedModel};
use expotwist::value::{UnitValue, ValueSource};
use expotwist::Result;

type Outcome = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

const N: usize = 100_000;

fn within(e: Estimate, target: f64, k: f64) -> bool {
    (e.value - target).abs() <= k * e.stderr
}

fn gaussian() -> (GaussianQuadratic, TwistedModel, TimeGrid) {
    let g = GaussianQuadratic::default();
    let tw = TwistedModel::new(g.model(), g.value());
    (g, tw, TimeGrid::new(1.0, 1000).unwrap())
}

fn null_twist() -> Outcome {
    let model = ModelSpec::ornstein_uhlenbeck(1.0, vec![0.5], 0.8, vec![0.2]);
    let grid = TimeGrid::new(1.0, 200)?;
    let tw = TwistedModel::new(
        model.clone(),
        ValueSource::analytic(UnitValue { horizon: 1.0 }),
    );
    let seed = SeedSpec::new(17, 0);
    let twisted = collect_bundle(&TwistedDynamics::new(&tw), &grid, 2000, seed)?;
    let reference = sample_paths(&model, &grid, 2000, seed, None)?;
    let identical = twisted.content_bytes() == reference.content_bytes();

    let (ens, _) = reference_ensemble(&model, &CostSpec::zero(), &grid, 2000, seed, |_| ())?;
    let r = variational_report(&ens)?;
    let mut corr = [0.0];
    let mut max_gamma: f64 = 0.0;
    let mut max_u: f64 = 0.0;
    for &(t, x) in &[(0.0, -1.0), (0.3, 0.0), (0.7, 2.5)] {
        tw.drift_correction_into(t, &[x], &mut corr)?;
        max_gamma = max_gamma.max(corr[0].abs());
        max_u = max_u.max(optimal_control(&tw, t, &[x])?[0].abs());
    }
    let exact = r.entropy.value == 0.0 && r.gap == 0.0 && r.minus_log_z.value == 0.0;
    Ok((
        identical && exact && max_gamma == 0.0 && max_u == 0.0,
        format!(
            "bytes identical={identical} H={} gap={} |Γ(v)|={max_gamma} |u*|={max_u}",
            r.entropy.value, r.gap
        ),
    ))
}

fn gaussian_benchmark() -> Outcome {
    let (g, _, grid) = gaussian();
    let (ens, _) =
        reference_ensemble(&g.model(), &g.cost(), &grid, N, SeedSpec::new(2, 0), |_| ())?;
    let r = variational_report(&ens)?;
    let half_ln2 = 0.5 * 2f64.ln();
    let pass = within(r.minus_log_z, half_ln2, 3.0)
        && within(r.mean_phi, 0.25, 3.0)
        && within(r.entropy, half_ln2 - 0.25, 3.0);
    Ok((
        pass,
        format!(
            "-logZ={:.5}±{:.5} E[φ]={:.5}±{:.5} H={:.5}±{:.5}",
            r.minus_log_z.value,
            r.minus_log_z.stderr,
            r.mean_phi.value,
            r.mean_phi.stderr,
            r.entropy.value,
            r.entropy.stderr
        ),
    ))
}

fn variational_identity() -> Outcome {
    let grid = TimeGrid::new(1.0, 100)?;
    let cases: Vec<(ModelSpec, CostSpec)> = vec![
        (
            ModelSpec::brownian(1.0, vec![0.0]),
            CostSpec::quadratic_terminal(0.5),
        ),
        (
            ModelSpec::brownian(1.0, vec![3.0]),
            CostSpec::quadratic_terminal(20.0),
        ),
        (
            ModelSpec::poisson_unit(2.0, 0.0),
            CostSpec::linear_terminal(2f64.ln()),
        ),
        (
            ModelSpec::ornstein_uhlenbeck(2.0, vec![1.0, -1.0], 0.7, vec![0.0, 0.0]),
            CostSpec::quadratic_terminal(1.5),
        ),
        (
            ModelSpec::compound_poisson_gaussian(
                vec![0.1],
                0.5,
                3.0,
                vec![0.2],
                vec![0.4],
                vec![0.0],
            ),
            CostSpec::linear_terminal(-1.2),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (i, (model, cost)) in cases.iter().enumerate() {
        for n in [1, 10, 5000] {
            let (ens, _) =
                reference_ensemble(model, cost, &grid, n, SeedSpec::new(i as u64, 9), |_| ())?;
            worst = worst.max(variational_report(&ens)?.gap.abs());
        }
    }
    Ok((
        worst < 1e-10,
        format!("max |gap| = {worst:.3e} over 15 ensembles"),
    ))
}

fn twist_vs_reweight() -> Outcome {
    let (g, tw, grid) = gaussian();
    let xt = simulate_map(
        &TwistedDynamics::new(&tw),
        &grid,
        N,
        SeedSpec::new(4, 1),
        |_, p| p.terminal()[0],
    )?;
    let (ens, ref_xt) =
        reference_ensemble(&g.model(), &g.cost(), &grid, N, SeedSpec::new(4, 2), |p| {
            p.terminal()[0]
        })?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, pow) in [("E[X_T]", 1), ("E[X_T^2]", 2)] {
        let sim = mean_stderr(&xt.iter().map(|x| x.powi(pow)).collect::<Vec<_>>());
        let rw = weighted_expectation(
            &ens,
            &ref_xt.iter().map(|x| x.powi(pow)).collect::<Vec<_>>(),
        )?;
        let z = (sim.value - rw.value).abs() / (sim.stderr.powi(2) + rw.stderr.powi(2)).sqrt();
        pass &= z <= 3.0;
        parts.push(format!(
            "{name}: {:.5} vs {:.5} (z={z:.2})",
            sim.value, rw.value
        ));
    }
    let m = mean_stderr(&xt);
    let centered: Vec<f64> = xt.iter().map(|x| (x - m.value).powi(2)).collect();
    let var = mean_stderr(&centered);
    pass &= within(var, g.twisted_terminal_variance(), 3.0);
    parts.push(format!("Var={:.5}±{:.5}", var.value, var.stderr));
    Ok((pass, parts.join("; ")))
}

fn poisson_benchmark() -> Outcome {
    let p = PoissonLinear::default();
    let tw = TwistedModel::new(p.model(), p.value());
    let grid = TimeGrid::new(1.0, 100)?;
    let jumps = simulate_map(
        &TwistedDynamics::new(&tw),
        &grid,
        N,
        SeedSpec::new(5, 1),
        |_, path| path.jump_count() as f64,
    )?;
    let mean_jumps = mean_stderr(&jumps);
    let (ens, _) =
        reference_ensemble(&p.model(), &p.cost(), &grid, N, SeedSpec::new(5, 2), |_| ())?;
    let r = variational_report(&ens)?;
    Ok((
        within(mean_jumps, 1.0, 3.0) && within(r.minus_log_z, 1.0, 3.0),
        format!(
            "mean jumps={:.4}±{:.4} -logZ={:.4}±{:.4}",
            mean_jumps.value, mean_jumps.stderr, r.minus_log_z.value, r.minus_log_z.stderr
        ),
    ))
}

fn control_optimality() -> Outcome {
    let (g, tw, _) = gaussian();
    let grid = TimeGrid::new(1.0, 200)?;
    let policies = [ControlPolicy::optimal(&tw), ControlPolicy::zero()];
    let r = compare_controls(
        &g.model(),
        &g.cost(),
        &policies,
        &grid,
        N,
        SeedSpec::new(6, 0),
    )?;
    let opt = r.get("optimal").unwrap();
    let zero = r.get("zero").unwrap();
    let diff = zero.vs_optimal.unwrap();
    let pass = within(opt.j, g.minus_log_z(), 3.0)
        && within(zero.j, g.zero_control_cost(), 3.0)
        && diff.value > 3.0 * diff.stderr
        && r.red_flags().count() == 0;
    Ok((
        pass,
        format!(
            "J(u*)={:.5}±{:.5} J(0)={:.5}±{:.5} J(0)-J(u*)={:.5}±{:.5}",
            opt.j.value, opt.j.stderr, zero.j.value, zero.j.stderr, diff.value, diff.stderr
        ),
    ))
}

fn martingale() -> Outcome {
    let (_, tw, _) = gaussian();
    let grid = TimeGrid::new(1.0, 100)?;
    let good = martingale_residual(
        &tw,
        &Coordinate(0),
        &grid,
        N,
        SeedSpec::new(7, 0),
        &MartingaleOptions::default(),
    )?;
    let wrong_opts = MartingaleOptions {
        uncorrected_drift: true,
        ..MartingaleOptions::default()
    };
    let bad = martingale_residual(
        &tw,
        &Coordinate(0),
        &grid,
        N,
        SeedSpec::new(7, 0),
        &wrong_opts,
    )?;
    Ok((
        good.pass && !bad.pass,
        format!("max z correct={:.2} injected={:.2}", good.max_z, bad.max_z),
    ))
}

fn carre_du_champ_check() -> Outcome {
    let opts = GeneratorOptions::with_fd_step(1e-4);
    let phi = FnTest(|_: f64, x: &[f64]| x[0] * x[0] * x[1] + 2.0 * x[1]);
    let psi = FnTest(|_: f64, x: &[f64]| x[0].powi(3) - x[0] * x[1]);
    let grad_phi = |x: &[f64]| [2.0 * x[0] * x[1], x[0] * x[0] + 2.0];
    let grad_psi = |x: &[f64]| [3.0 * x[0] * x[0] - x[1], -x[0]];
    let sigma = 0.7;
    let model = ModelSpec::linear_drift(vec![0.3, -0.2], 0.5, sigma, vec![0.0, 0.0]);
    let mut diffusion_err: f64 = 0.0;
    for x in [[0.5, -1.0], [1.2, 0.3], [-0.8, 2.0]] {
        let gamma = carre_du_champ(&model, &phi, &psi, 0.4, &x, &opts)?;
        let (a, b) = (grad_phi(&x), grad_psi(&x));
        let exact = sigma * sigma * (a[0] * b[0] + a[1] * b[1]);
        diffusion_err = diffusion_err.max((gamma - exact).abs());
    }

    let rate = 2.0;
    let poisson = ModelSpec::poisson_unit(rate, 0.0);
    let f = FnTest(|_: f64, x: &[f64]| x[0] * x[0]);
    let h = FnTest(|_: f64, x: &[f64]| x[0].powi(3) + x[0]);
    let mut jump_err: f64 = 0.0;
    for x in [0.0, 1.0, 3.0] {
        let gamma = carre_du_champ(&poisson, &f, &h, 0.5, &[x], &opts)?;
        let df = (x + 1.0).powi(2) - x * x;
        let dh = (x + 1.0).powi(3) + (x + 1.0) - x.powi(3) - x;
        jump_err = jump_err.max((gamma - rate * df * dh).abs());
    }
    Ok((
        diffusion_err < 1e-6 && jump_err < 1e-8,
        format!("diffusion err={diffusion_err:.2e} jump err={jump_err:.2e}"),
    ))
}

fn pde_residuals() -> Outcome {
    let opts = GeneratorOptions::default();
    let (g, _, _) = gaussian();
    let nodes: Vec<(f64, Vec<f64>)> = (1..10)
        .flat_map(|i| [-2.0, -0.5, 0.0, 1.0, 2.5].map(|x| (i as f64 / 10.0, vec![x])))
        .collect();
    let gauss = pde_residual(&g.value(), &g.model(), &g.cost(), &nodes, &opts, 1e-6)?;
    let p = PoissonLinear::default();
    let pnodes: Vec<(f64, Vec<f64>)> = (1..10)
        .flat_map(|i| [0.0, 1.0, 4.0].map(|x| (i as f64 / 10.0, vec![x])))
        .collect();
    let pois = pde_residual(&p.value(), &p.model(), &p.cost(), &pnodes, &opts, 1e-8)?;

    let grid = TimeGrid::new(1.0, 50)?;
    let settings = SurfaceSettings {
        space: SpaceBox::new(vec![-3.0], vec![3.0], vec![25])?,
        time_nodes: 11,
        n_sub: 4000,
    };
    let surface =
        build_value_surface(&g.model(), &g.cost(), &grid, &settings, SeedSpec::new(9, 0))?;
    let mc = surface_pde_residual(&surface, &g.model(), &g.cost(), 1.0, &opts)?;
    let band = mc.fraction_within_band();
    Ok((
        gauss.max_abs < 1e-6 && pois.max_abs < 1e-8 && band == 1.0,
        format!(
            "gaussian max={:.2e} poisson max={:.2e} surface within band={:.3} ({} nodes)",
            gauss.max_abs,
            pois.max_abs,
            band,
            mc.nodes.len()
        ),
    ))
}

fn mean_field() -> Outcome {
    let g = GaussianQuadratic::default();
    let mut problem = MeanFieldProblem::half_square(g.cost());
    problem.max_iter = 30;
    let grid = TimeGrid::new(1.0, 100)?;
    let s = fixed_point_solve(&problem, &g.model(), &grid, N, SeedSpec::new(10, 0))?;
    let target = (3f64.sqrt() - 1.0) / 2.0;
    let tol = (3.0 * s.c_stderr.unwrap_or(0.0)).max(1e-3);
    let iterations = s.trace.len();
    Ok((
        (s.c_star - target).abs() <= tol && iterations <= 30,
        format!(
            "c*={:.5} target={target:.5} tol={tol:.2e} iterations={iterations}",
            s.c_star
        ),
    ))
}

/// `E|Z|^p` for a standard normal, by Simpson's rule on `[0, 12]`.
fn abs_normal_moment(p: f64) -> f64 {
    let n = 200_000;
    let h = 12.0 / n as f64;
    let f = |z: f64| 2.0 * z.powf(p) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner: f64 = (1..n)
        .map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(0.0) + inner + f(12.0)) * h / 3.0
}

fn integrability() -> Outcome {
    let (g, tw, grid) = gaussian();
    let p = 1.5;
    let r = integrability_probe(&tw, &grid, N, p, SeedSpec::new(11, 0))?;
    // Under the twist X_t ~ N(0, V(t)) and Γ(v)/v = −a x / (1 + a τ), a = 2γσ².
    let a = 2.0 * g.gamma * g.sigma * g.sigma;
    let mp = abs_normal_moment(p);
    let oracle: f64 = (0..grid.n_steps())
        .map(|k| {
            let t = grid.time(k);
            let scale = a / (1.0 + a * (g.horizon - t));
            scale.powf(p) * g.twisted_variance_at(t).powf(p / 2.0) * mp * grid.dt()
        })
        .sum();
    Ok((
        within(r.at_n, oracle, 3.0) && r.relative_drift < 0.1,
        format!(
            "estimate={:.5}±{:.5} oracle={oracle:.5} drift={:.2e}",
            r.at_n.value, r.at_n.stderr, r.relative_drift
        ),
    ))
}

fn reproducibility() -> Outcome {
    let text = r#"
[model]
family = "cpg"
mu = [0.1]
sigma = 0.6
rate = 1.5
jump_mean = [0.2]
jump_std = [0.3]

[cost]
terminal = "quadratic"
gamma = 0.4

[grid]
T = 1.0
n_steps = 40

[surface]
time_nodes = 5
space_nodes = 9
n_sub = 200

[run]
n_paths = 2000
seed = 12
pipelines = ["value", "reweight", "twist", "checks", "meanfield"]
value_source = "surface"
write_paths = true
"#;
    let cfg = parse_config(text)?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, d.path())?;
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).ok();
        if b.as_deref() != Some(a.as_slice()) {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    Ok((
        differing.is_empty() && names.len() > 5,
        format!("{} files compared, differing: {differing:?}", names.len()),
    ))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("null-twist exactness", null_twist),
        ("gaussian quadratic benchmark", gaussian_benchmark),
        ("plug-in variational identity", variational_identity),
        ("twist vs reweighting agreement", twist_vs_reweight),
        ("poisson benchmark", poisson_benchmark),
        ("control optimality", control_optimality),
        ("martingale residual test", martingale),
        ("carre du champ", carre_du_champ_check),
        ("pde residual", pde_residuals),
        ("mean-field fixed point", mean_field),
        ("integrability probe", integrability),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "{:>2} {} {name}: {detail} [{:.1}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
