//! Pipeline orchestration and artifact writing.

use std::path::{Path, PathBuf};

use crate::benchmarks::{GaussianQuadratic, PoissonLinear};
use crate::checks::{
    carre_du_champ, integrability_probe, martingale_residual, pde_residual, surface_pde_residual,
    MartingaleOptions,
};
use crate::control::{compare_controls, ControlPolicy};
use crate::error::{Error, Result};
use crate::feynman_kac::{build_value_surface, ValueSurface};
use crate::girsanov::{
    reference_ensemble, variational_report, weighted_expectation, WeightedEnsemble,
};
use crate::meanfield::{fixed_point_solve, trace_table, MeanFieldProblem};
use crate::model::{Coordinate, CostSpec, FnTest, GeneratorOptions, ModelSpec, TimeGrid};
use crate::path::{collect_bundle, sample_paths, simulate_map, SeedSpec};
use crate::report::{content_hash, fmt_f64, write_file, write_report, Table};
use crate::stats::{mean_stderr, Estimate};
use crate::twist::{simulate_twisted, write_drift_field, TwistedDynamics, TwistedModel};
use crate::value::ValueSource;

use super::config::{
    Family, Objective, Pipeline, RunConfig, RunningKind, TerminalKind, ValueSourceKind,
};

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub check: String,
    pub value: f64,
    pub expected: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

impl SummaryRow {
    fn flag(check: &str, value: f64, pass: bool) -> Self {
        Self {
            check: check.into(),
            value,
            expected: None,
            tolerance: None,
            pass,
        }
    }

    fn near(check: &str, value: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            value,
            expected: Some(expected),
            tolerance: Some(tolerance),
            pass: (value - expected).abs() <= tolerance,
        }
    }

    fn below(check: &str, value: f64, bound: f64) -> Self {
        Self {
            check: check.into(),
            value,
            expected: None,
            tolerance: Some(bound),
            pass: value < bound,
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub rows: Vec<SummaryRow>,
    /// Output files with their content hashes, in write order.
    pub files: Vec<(String, String)>,
    /// Pipelines that failed, with the error text.
    pub errors: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// 0 on success, 1 if a check failed, 3 if a pipeline errored.
    pub fn exit_code(&self) -> i32 {
        if !self.errors.is_empty() {
            3
        } else if !self.all_pass() {
            1
        } else {
            0
        }
    }

    pub fn row(&self, check: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.check == check)
    }
}

/// Named function of `(X_T[0], jump count)`.
type Statistic = (&'static str, fn(&(f64, f64)) -> f64);

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: ModelSpec,
    cost: CostSpec,
    grid: TimeGrid,
    seed: SeedSpec,
    n_paths: usize,
    out_dir: PathBuf,
    value: Option<ValueSource>,
    surface: Option<std::sync::Arc<ValueSurface>>,
    outcome: RunOutcome,
}

/// Seed streams of the pipelines.
mod stream {
    pub const SURFACE: u64 = 1;
    pub const REFERENCE: u64 = 2;
    pub const TWISTED: u64 = 3;
    pub const CONTROL: u64 = 4;
    pub const MARTINGALE: u64 = 5;
    pub const INTEGRABILITY: u64 = 6;
    pub const MEANFIELD: u64 = 7;
}

/// Runs the configured pipelines, writing every artifact into `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    run_pipelines(cfg, &cfg.run.pipelines, out_dir)
}

/// Runs the invariant suites (reweighting, twist agreement, generator checks).
pub fn run_checks(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    run_pipelines(
        cfg,
        &[Pipeline::Reweight, Pipeline::Twist, Pipeline::Checks],
        out_dir,
    )
}

fn run_pipelines(cfg: &RunConfig, pipelines: &[Pipeline], out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut ctx = Ctx {
        cfg,
        model: cfg.model_spec()?,
        cost: cfg.cost_spec()?,
        grid: cfg.grid()?,
        seed: SeedSpec::new(cfg.seed(), 0),
        n_paths: cfg.n_paths(),
        out_dir: out_dir.to_path_buf(),
        value: None,
        surface: None,
        outcome: RunOutcome::default(),
    };
    let mut order: Vec<Pipeline> = pipelines.to_vec();
    order.sort();
    order.dedup();
    for p in order {
        let r = match p {
            Pipeline::Value => ctx.value_pipeline(),
            Pipeline::Twist => ctx.twist_pipeline(),
            Pipeline::Reweight => ctx.reweight_pipeline(),
            Pipeline::Control => ctx.control_pipeline(),
            Pipeline::Checks => ctx.checks_pipeline(),
            Pipeline::Meanfield => ctx.meanfield_pipeline(),
        };
        if let Err(e) = r {
            if matches!(e, Error::Io { .. }) {
                return Err(e);
            }
            ctx.outcome.errors.push((p.name().into(), e.to_string()));
            ctx.outcome.rows.push(SummaryRow::flag(
                &format!("{}_completed", p.name()),
                0.0,
                false,
            ));
        }
    }
    ctx.finish()?;
    Ok(ctx.outcome)
}

impl Ctx<'_> {
    fn seed(&self, tag: u64) -> SeedSpec {
        self.seed.child(tag)
    }

    fn write(&mut self, name: &str, table: &Table) -> Result<()> {
        let hash = write_report(table, &self.out_dir.join(name))?;
        self.record(name, hash);
        Ok(())
    }

    fn write_bytes(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        write_file(&self.out_dir.join(name), &bytes)?;
        self.record(name, content_hash(&bytes));
        Ok(())
    }

    fn record(&mut self, name: &str, hash: String) {
        match self.outcome.files.iter_mut().find(|f| f.0 == name) {
            Some(f) => f.1 = hash,
            None => self.outcome.files.push((name.into(), hash)),
        }
    }

    fn push(&mut self, row: SummaryRow) {
        self.outcome.rows.push(row);
    }

    fn build_surface(&mut self) -> Result<std::sync::Arc<ValueSurface>> {
        if let Some(s) = &self.surface {
            return Ok(s.clone());
        }
        let settings = self.cfg.surface_settings(&self.model, &self.grid)?;
        let s = build_value_surface(
            &self.model,
            &self.cost,
            &self.grid,
            &settings,
            self.seed(stream::SURFACE),
        )?;
        let mut bytes = Vec::new();
        s.write_csv(&mut bytes).map_err(|source| Error::Io {
            path: "value_surface.csv".into(),
            source,
        })?;
        self.write_bytes("value_surface.csv", bytes)?;
        let s = std::sync::Arc::new(s);
        self.surface = Some(s.clone());
        Ok(s)
    }

    fn value_source(&mut self) -> Result<ValueSource> {
        if let Some(v) = &self.value {
            return Ok(v.clone());
        }
        let v = match self.cfg.run.value_source {
            ValueSourceKind::Analytic => self.cfg.analytic_value().ok_or_else(|| {
                Error::Config("no closed-form value function for this model and cost".into())
            })?,
            ValueSourceKind::Auto => match self.cfg.analytic_value() {
                Some(v) => v,
                None => ValueSource::Surface(self.build_surface()?),
            },
            ValueSourceKind::Surface => ValueSource::Surface(self.build_surface()?),
        };
        self.value = Some(v.clone());
        Ok(v)
    }

    fn twisted(&mut self) -> Result<TwistedModel> {
        let mut tw = TwistedModel::new(self.model.clone(), self.value_source()?);
        tw.fd_step = self.cfg.checks.fd_step;
        Ok(tw)
    }

    fn x0_is_origin(&self) -> bool {
        self.model
            .initial
            .point()
            .is_some_and(|x| x.iter().all(|v| *v == 0.0))
    }

    fn gaussian_benchmark(&self) -> Option<GaussianQuadratic> {
        let c = &self.cfg.cost;
        let quad = self.cfg.model.family == Family::Bm
            && c.terminal == TerminalKind::Quadratic
            && (c.running == RunningKind::Zero || c.running_coeff == 0.0)
            && self.x0_is_origin();
        quad.then(|| GaussianQuadratic {
            gamma: c.gamma,
            sigma: self.cfg.model.sigma,
            horizon: self.grid.horizon(),
            dim: self.model.dim,
        })
    }

    fn poisson_benchmark(&self) -> Option<PoissonLinear> {
        let c = &self.cfg.cost;
        let lin = self.cfg.model.family == Family::Poisson
            && c.terminal == TerminalKind::Linear
            && (c.running == RunningKind::Zero || c.running_coeff == 0.0)
            && self.x0_is_origin();
        lin.then(|| PoissonLinear {
            rate: self.cfg.model.rate,
            coeff: c.coeff,
            horizon: self.grid.horizon(),
        })
    }

    fn value_pipeline(&mut self) -> Result<()> {
        let s = self.build_surface()?;
        let in_range = s.values.iter().all(|v| *v >= s.eps_v && *v <= 1.0);
        self.push(SummaryRow::flag(
            "value_surface_in_range",
            s.values.len() as f64,
            in_range,
        ));
        if let Some(exact) = self.cfg.analytic_value() {
            let np = s.n_points();
            let mut worst: f64 = 0.0;
            for (ti, t) in s.time_nodes.iter().enumerate() {
                for j in 0..np {
                    let se = s.stderr_at_node(ti, j);
                    // Rare-event nodes have unreliable standard errors.
                    if se > 0.0 && se <= 0.1 * s.value_at_node(ti, j) {
                        let z = (s.value_at_node(ti, j) - exact.value(*t, &s.space.point(j))).abs()
                            / se;
                        worst = worst.max(z);
                    }
                }
            }
            self.push(SummaryRow::below(
                "value_surface_max_z_vs_closed_form",
                worst,
                5.0,
            ));
        }
        Ok(())
    }

    fn reference(&self) -> Result<(WeightedEnsemble, Vec<(f64, f64)>)> {
        reference_ensemble(
            &self.model,
            &self.cost,
            &self.grid,
            self.n_paths,
            self.seed(stream::REFERENCE),
            |p| (p.terminal()[0], p.jump_count() as f64),
        )
    }

    fn reweight_pipeline(&mut self) -> Result<()> {
        let (ensemble, _) = self.reference()?;
        let r = variational_report(&ensemble)?;
        self.write("entropy_report.csv", &r.table())?;
        let n = r.n_paths as f64;
        self.push(SummaryRow::below(
            "gap",
            r.gap.abs(),
            crate::girsanov::GAP_TOLERANCE,
        ));
        self.push(SummaryRow::flag(
            "entropy_nonnegative",
            r.entropy.value,
            r.entropy.value >= -1e-12,
        ));
        self.push(SummaryRow::flag(
            "ess_bounds",
            r.ess,
            r.ess >= 1.0 - 1e-9 && r.ess <= n + 1e-9,
        ));
        self.push(SummaryRow::flag("excluded_paths", r.excluded as f64, true));
        let oracle = if self.cost.is_null() {
            Some((0.0, 0.0, 0.0))
        } else if let Some(g) = self.gaussian_benchmark() {
            Some((g.minus_log_z(), g.mean_phi(), g.entropy()))
        } else {
            self.poisson_benchmark()
                .map(|p| (p.minus_log_z(), f64::NAN, f64::NAN))
        };
        let est = [
            ("minus_log_Z", r.minus_log_z),
            ("mean_phi", r.mean_phi),
            ("entropy", r.entropy),
        ];
        let targets = oracle.map(|o| [o.0, o.1, o.2]);
        for (i, (name, e)) in est.iter().enumerate() {
            match targets.map(|t| t[i]).filter(|t| t.is_finite()) {
                Some(t) => self.push(SummaryRow::near(name, e.value, t, 3.0 * e.stderr)),
                None => self.push(SummaryRow::flag(name, e.value, e.value.is_finite())),
            }
        }
        Ok(())
    }

    fn twist_pipeline(&mut self) -> Result<()> {
        let tw = self.twisted()?;
        let seed = self.seed(stream::TWISTED);
        let dynamics = TwistedDynamics::new(&tw);
        let obs = simulate_map(&dynamics, &self.grid, self.n_paths, seed, |_, p| {
            (!p.diverged).then(|| (p.terminal()[0], p.jump_count() as f64))
        })?;
        let obs: Vec<(f64, f64)> = obs.into_iter().flatten().collect();
        if obs.is_empty() {
            return Err(Error::DegenerateEnsemble(
                "every twisted path diverged".into(),
            ));
        }
        let (ensemble, ref_obs) = self.reference()?;

        let stats: [Statistic; 3] = [
            ("X_T", |o| o.0),
            ("X_T^2", |o| o.0 * o.0),
            ("jump_count", |o| o.1),
        ];
        let mut table = Table::new([
            "statistic",
            "twisted",
            "twisted_stderr",
            "reweighted",
            "reweighted_stderr",
            "z",
        ]);
        let mut twisted_est = Vec::new();
        let has_jumps = self.model.jump.is_some();
        for (name, h) in stats
            .into_iter()
            .filter(|(n, _)| has_jumps || *n != "jump_count")
        {
            let sim = mean_stderr(&obs.iter().map(h).collect::<Vec<_>>());
            let rw = weighted_expectation(&ensemble, &ref_obs.iter().map(h).collect::<Vec<_>>())?;
            let combined = (sim.stderr.powi(2) + rw.stderr.powi(2)).sqrt();
            let z = if combined > 0.0 {
                (sim.value - rw.value).abs() / combined
            } else if sim.value == rw.value {
                0.0
            } else {
                f64::INFINITY
            };
            table.push(vec![
                name.into(),
                fmt_f64(sim.value),
                fmt_f64(sim.stderr),
                fmt_f64(rw.value),
                fmt_f64(rw.stderr),
                fmt_f64(z),
            ]);
            self.push(SummaryRow::below(
                &format!("twist_vs_reweight_{name}"),
                z,
                3.0,
            ));
            twisted_est.push(sim);
        }
        self.write("twist_moments.csv", &table)?;

        if let Some(g) = self.gaussian_benchmark() {
            let var = variance_estimate(&obs.iter().map(|o| o.0).collect::<Vec<_>>());
            self.push(SummaryRow::near(
                "twisted_var_X_T",
                var.value,
                g.twisted_terminal_variance(),
                3.0 * var.stderr,
            ));
        }
        if let Some(p) = self.poisson_benchmark() {
            let e = twisted_est[twisted_est.len() - 1];
            self.push(SummaryRow::near(
                "twisted_mean_jumps",
                e.value,
                p.twisted_mean_jumps(),
                3.0 * e.stderr,
            ));
        }
        if self.cost.is_null() {
            let n = self.n_paths.min(1000);
            let a = collect_bundle(&TwistedDynamics::new(&tw), &self.grid, n, seed)?;
            let b = sample_paths(&self.model, &self.grid, n, seed, None)?;
            let same = a.content_bytes() == b.content_bytes();
            self.push(SummaryRow::flag("null_twist_bit_identical", n as f64, same));
        }

        let (times, points) = self.field_points();
        let mut bytes = Vec::new();
        write_drift_field(&tw, &times, &points, &mut bytes)?;
        self.write_bytes("drift_field.csv", bytes)?;

        if self.cfg.run.write_paths {
            let bundle = simulate_twisted(&tw, &self.grid, self.n_paths, seed)?;
            let mut bytes = Vec::new();
            bundle.write_csv(&mut bytes).map_err(|source| Error::Io {
                path: "twisted_paths.csv".into(),
                source,
            })?;
            self.write_bytes("twisted_paths.csv", bytes)?;
        }
        Ok(())
    }

    /// Times and states at which fields are dumped: eleven times in `[0, T)`
    /// and the default surface box (one-dimensional) or its centre.
    fn field_points(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let horizon = self.grid.horizon();
        let times: Vec<f64> = (0..11).map(|i| horizon * i as f64 / 11.0).collect();
        let space = crate::feynman_kac::SpaceBox::default_for(&self.model, &self.grid);
        let points = if self.model.dim == 1 {
            (0..space.n_points()).map(|j| space.point(j)).collect()
        } else {
            vec![self.model.initial.center(self.model.dim)]
        };
        (times, points)
    }

    fn control_pipeline(&mut self) -> Result<()> {
        let tw = self.twisted()?;
        let policies = [ControlPolicy::optimal(&tw), ControlPolicy::zero()];
        let r = compare_controls(
            &self.model,
            &self.cost,
            &policies,
            &self.grid,
            self.n_paths,
            self.seed(stream::CONTROL),
        )?;
        self.write("control_ranking.csv", &r.table())?;
        let flags = r.red_flags().count();
        self.push(SummaryRow::flag(
            "control_red_flags",
            flags as f64,
            flags == 0,
        ));
        let opt = r.get("optimal").expect("optimal policy ranked");
        let zero = r.get("zero").expect("zero policy ranked");
        let combined = (opt.j.stderr.powi(2) + r.minus_log_z.stderr.powi(2)).sqrt();
        self.push(SummaryRow::near(
            "J_optimal",
            opt.j.value,
            r.minus_log_z.value,
            3.0 * combined,
        ));
        let ordered = opt.j.value <= zero.j.value + 3.0 * zero.vs_optimal.map_or(0.0, |e| e.stderr);
        self.push(SummaryRow::flag(
            "J_optimal_le_J_zero",
            zero.j.value - opt.j.value,
            ordered,
        ));
        if let Some(g) = self.gaussian_benchmark() {
            self.push(SummaryRow::near(
                "J_zero",
                zero.j.value,
                g.zero_control_cost(),
                3.0 * zero.j.stderr,
            ));
        }
        Ok(())
    }

    fn checks_pipeline(&mut self) -> Result<()> {
        let tw = self.twisted()?;
        let c = &self.cfg.checks;
        let gen = GeneratorOptions::with_fd_step(c.fd_step);
        let opts = MartingaleOptions {
            n_bins: c.n_bins,
            uncorrected_drift: self.cfg.run.inject_uncorrected_drift,
            bias_constant: c.bias_constant,
            generator: gen,
        };
        let m = martingale_residual(
            &tw,
            &Coordinate(0),
            &self.grid,
            self.n_paths,
            self.seed(stream::MARTINGALE),
            &opts,
        )?;
        self.write("martingale_residual.csv", &m.table())?;
        self.push(SummaryRow::below(
            "martingale_max_z",
            m.max_z,
            crate::checks::Z_THRESHOLD,
        ));

        match &tw.value {
            ValueSource::Surface(s) => {
                let pde = surface_pde_residual(s, &self.model, &self.cost, c.pde_constant, &gen)?;
                self.write("pde_residual.csv", &pde.table())?;
                self.push(SummaryRow::below(
                    "pde_max_z",
                    pde.max_z,
                    crate::checks::Z_THRESHOLD,
                ));
                self.push(SummaryRow::flag(
                    "pde_fraction_within_band",
                    pde.fraction_within_band(),
                    true,
                ));
            }
            analytic => {
                let nodes = self.probe_nodes();
                let pde = pde_residual(
                    analytic,
                    &self.model,
                    &self.cost,
                    &nodes,
                    &gen,
                    c.pde_tolerance,
                )?;
                self.write("pde_residual.csv", &pde.table())?;
                self.push(SummaryRow::below(
                    "pde_max_abs_residual",
                    pde.max_abs,
                    c.pde_tolerance,
                ));
            }
        }

        let x: Vec<f64> = self.model.initial.center(self.model.dim);
        let square = FnTest(|_: f64, y: &[f64]| y[0] * y[0]);
        let t = 0.5 * self.grid.horizon();
        let g1 = carre_du_champ(&self.model, &square, &Coordinate(0), t, &x, &gen)?;
        let g2 = carre_du_champ(&self.model, &Coordinate(0), &square, t, &x, &gen)?;
        self.push(SummaryRow::below(
            "carre_du_champ_asymmetry",
            (g1 - g2).abs(),
            1e-10,
        ));

        if self.model.jump.is_none() {
            let r = integrability_probe(
                &tw,
                &self.grid,
                self.n_paths,
                c.p,
                self.seed(stream::INTEGRABILITY),
            )?;
            let mut t = Table::new(["n_paths", "estimate", "stderr"]);
            t.push(vec![
                self.n_paths.to_string(),
                fmt_f64(r.at_n.value),
                fmt_f64(r.at_n.stderr),
            ]);
            t.push(vec![
                (2 * self.n_paths).to_string(),
                fmt_f64(r.at_2n.value),
                fmt_f64(r.at_2n.stderr),
            ]);
            self.write("integrability.csv", &t)?;
            self.push(SummaryRow::below(
                "integrability_relative_drift",
                r.relative_drift,
                0.1,
            ));
        }
        Ok(())
    }

    /// Interior nodes for pointwise residuals.
    fn probe_nodes(&self) -> Vec<(f64, Vec<f64>)> {
        let horizon = self.grid.horizon();
        let center = self.model.initial.center(self.model.dim);
        let mut nodes = Vec::new();
        for i in 1..10 {
            let t = horizon * i as f64 / 10.0;
            for shift in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                nodes.push((t, center.iter().map(|c| c + shift).collect()));
            }
        }
        nodes
    }

    fn meanfield_pipeline(&mut self) -> Result<()> {
        let mc = &self.cfg.meanfield;
        let mut problem = match mc.objective {
            Objective::HalfSquare => MeanFieldProblem::half_square(self.cost.clone()),
            Objective::Linear => MeanFieldProblem::linear(mc.slope, self.cost.clone()),
        };
        problem.damping = mc.damping;
        problem.tol = mc.tol;
        problem.max_iter = mc.max_iter;
        let s = match fixed_point_solve(
            &problem,
            &self.model,
            &self.grid,
            self.n_paths,
            self.seed(stream::MEANFIELD),
        ) {
            Ok(s) => s,
            Err(Error::NotConverged { trace, .. }) => {
                self.write("meanfield_trace.csv", &trace_table(&trace))?;
                self.push(SummaryRow::flag(
                    "meanfield_converged",
                    trace.len() as f64,
                    false,
                ));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        self.write("meanfield_trace.csv", &trace_table(&s.trace))?;
        self.push(SummaryRow::flag(
            "meanfield_converged",
            s.trace.len() as f64,
            true,
        ));
        let residual = (s.c_star - (problem.f_prime)(s.m_star.value)).abs();
        let c_se = s.c_stderr.unwrap_or(0.0);
        self.push(SummaryRow::below(
            "meanfield_fixed_point_residual",
            residual,
            problem.tol / problem.damping + 3.0 * c_se + f64::EPSILON,
        ));
        self.push(SummaryRow::below(
            "meanfield_linearized_gap",
            s.report.gap.abs(),
            crate::girsanov::GAP_TOLERANCE,
        ));
        if mc.objective == Objective::HalfSquare {
            if let Some(g) = self.gaussian_benchmark() {
                let tol = (3.0 * c_se).max(1e-3);
                self.push(SummaryRow::near(
                    "c_star",
                    s.c_star,
                    g.half_square_multiplier(),
                    tol,
                ));
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let mut summary = Table::new(["check", "value", "expected", "tolerance", "pass"]);
        for r in &self.outcome.rows {
            summary.push(vec![
                r.check.clone(),
                fmt_f64(r.value),
                r.expected.map(fmt_f64).unwrap_or_default(),
                r.tolerance.map(fmt_f64).unwrap_or_default(),
                r.pass.to_string(),
            ]);
        }
        self.write("summary.csv", &summary)?;

        let mut manifest = Table::new(["kind", "name", "value"]);
        manifest.push(vec![
            "version".into(),
            "expotwist".into(),
            env!("CARGO_PKG_VERSION").into(),
        ]);
        manifest.push(vec![
            "seed".into(),
            "master".into(),
            self.cfg.seed().to_string(),
        ]);
        for (k, v) in self.cfg.echo() {
            manifest.push(vec!["config".into(), k, v]);
        }
        for (name, hash) in &self.outcome.files {
            manifest.push(vec!["file".into(), name.clone(), hash.clone()]);
        }
        for (pipeline, msg) in &self.outcome.errors {
            manifest.push(vec!["error".into(), pipeline.clone(), msg.clone()]);
        }
        write_file(
            &self.out_dir.join("manifest.csv"),
            manifest.to_csv().as_bytes(),
        )
    }
}

/// Sample variance with the standard error `sqrt((m4 − s⁴)/n)`.
fn variance_estimate(xs: &[f64]) -> Estimate {
    let m = mean_stderr(xs).value;
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let e = mean_stderr(&sq);
    let n = xs.len() as f64;
    Estimate::new(e.value * n / (n - 1.0).max(1.0), e.stderr)
}
