//! Generator-level checks of a twist: carré du champ, the twisted generator,
//! binned martingale residuals under `Q*`, the backward equation
//! `a(v) = f v`, and the integrability of the drift correction.

use crate::error::{Error, Result};
use crate::feynman_kac::ValueSurface;
use crate::model::{
    apply_generator, eval_generator, with_scratch, CostSpec, GeneratorOptions, JumpWeight,
    ModelSpec, Product, TestFunction, TimeGrid,
};
use crate::path::{simulate_map, SeedSpec};
use crate::report::{fmt_f64, Table};
use crate::stats::{Estimate, KahanSum, Moments};
use crate::twist::{TwistedDynamics, TwistedModel};
use crate::value::ValueSource;

/// `|mean|/SE` above which a residual is significant.
pub const Z_THRESHOLD: f64 = 4.0;

/// Paths of the pilot run that fixes the bin edges.
const PILOT_PATHS: usize = 1000;

/// `Γ(φ,ψ) = a(φψ) − ψ a(φ) − φ a(ψ)`.
pub fn carre_du_champ(
    model: &ModelSpec,
    phi: &dyn TestFunction,
    psi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    opts: &GeneratorOptions,
) -> Result<f64> {
    let prod = Product(phi, psi);
    let a_prod = eval_generator(model, &prod, t, x, opts)?;
    let a_phi = eval_generator(model, phi, t, x, opts)?;
    let a_psi = eval_generator(model, psi, t, x, opts)?;
    Ok(a_prod - psi.value(t, x) * a_phi - phi.value(t, x) * a_psi)
}

/// `a^{Q*}(φ)`: drift `b + Γ(v)/v` and jump kernel reweighted by
/// `v(t,x+q)/v(t,x)`.
pub fn twisted_generator_apply(
    twisted: &TwistedModel,
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    opts: &GeneratorOptions,
) -> Result<f64> {
    if t.is_nan() || t > twisted.value.horizon() {
        return Err(Error::invalid(format!("t={t} beyond the value horizon")));
    }
    let d = twisted.model.dim;
    let mut drift = vec![0.0; d];
    twisted.twisted_drift_into(t, x, &mut drift)?;
    let v = twisted.value.floored(t, x);
    let ratio = |q: &[f64]| -> f64 {
        with_scratch(x.len(), |y| {
            for ((yi, a), b) in y.iter_mut().zip(x).zip(q) {
                *yi = a + b;
            }
            twisted.value.value(t, y) / v
        })
    };
    let weight: Option<JumpWeight<'_>> = match twisted.model.jump {
        Some(_) => Some(&ratio),
        None => None,
    };
    apply_generator(&twisted.model, phi, t, x, &drift, weight, opts)
}

/// One bin of a martingale residual test.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub mean: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub bins: Vec<ResidualBin>,
    pub max_z: f64,
    /// Per-increment bias allowed for the time discretization.
    pub allowance: f64,
    pub pass: bool,
    /// Empty bins folded into a neighbour.
    pub merged: usize,
    /// Paths left out because they diverged.
    pub excluded: usize,
}

impl ResidualReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["bin_lo", "bin_hi", "mean", "stderr", "z"]);
        for b in &self.bins {
            t.push_numbers(&[b.lo, b.hi, b.mean, b.stderr, b.z]);
        }
        t
    }
}

/// Settings of [`martingale_residual`].
#[derive(Debug, Clone, Copy)]
pub struct MartingaleOptions {
    pub n_bins: usize,
    /// Simulate with the reference drift while compensating with `a^{Q*}`.
    pub uncorrected_drift: bool,
    /// Constant `C` of the per-increment allowance `C dt²`.
    pub bias_constant: f64,
    pub generator: GeneratorOptions,
}

impl Default for MartingaleOptions {
    fn default() -> Self {
        Self {
            n_bins: 10,
            uncorrected_drift: false,
            bias_constant: 1.0,
            generator: GeneratorOptions::default(),
        }
    }
}

fn significance(mean: f64, stderr: f64, allowance: f64) -> f64 {
    let excess = (mean.abs() - allowance).max(0.0);
    if excess == 0.0 {
        0.0
    } else if stderr > 0.0 {
        excess / stderr
    } else {
        f64::INFINITY
    }
}

/// Bins increments `φ(t_{k+1},X_{k+1}) − φ(t_k,X_k) − a^{Q*}(φ)(t_k,X_k) dt`
/// of paths simulated under `Q*` by quantiles of the first coordinate of
/// `X_{t_k}` and tests each bin mean against zero.
pub fn martingale_residual(
    twisted: &TwistedModel,
    phi: &dyn TestFunction,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
    opts: &MartingaleOptions,
) -> Result<ResidualReport> {
    if opts.n_bins < 3 {
        return Err(Error::invalid("n_bins must be >= 3"));
    }
    let dynamics = TwistedDynamics {
        twisted,
        uncorrected_drift: opts.uncorrected_drift,
    };
    let n = grid.n_steps();

    let pilot = simulate_map(
        &dynamics,
        grid,
        n_paths.min(PILOT_PATHS),
        seed.child(0x9170),
        |_, p| (0..n).map(|k| p.state(k)[0]).collect::<Vec<f64>>(),
    )?;
    let mut pooled: Vec<f64> = pilot
        .into_iter()
        .flatten()
        .filter(|v| v.is_finite())
        .collect();
    if pooled.is_empty() {
        return Err(Error::DegenerateEnsemble(
            "pilot run produced no finite states".into(),
        ));
    }
    pooled.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..opts.n_bins)
        .map(|i| pooled[(i * pooled.len() / opts.n_bins).min(pooled.len() - 1)])
        .collect();
    edges.dedup();
    let n_bins = edges.len() + 1;

    let dt = grid.dt();
    let per_path = simulate_map(
        &dynamics,
        grid,
        n_paths,
        seed,
        |_, p| -> Result<Option<Vec<Moments>>> {
            if p.diverged {
                return Ok(None);
            }
            let mut bins = vec![Moments::default(); n_bins];
            let mut prev = phi.value(grid.time(0), p.state(0));
            for k in 0..n {
                let t = grid.time(k);
                let x = p.state(k);
                let next = phi.value(grid.time(k + 1), p.state(k + 1));
                let comp = twisted_generator_apply(twisted, phi, t, x, &opts.generator)?;
                let inc = next - prev - comp * dt;
                let b = edges.partition_point(|e| *e <= x[0]);
                bins[b].push(inc);
                prev = next;
            }
            Ok(Some(bins))
        },
    )?;

    let mut totals = vec![Moments::default(); n_bins];
    let mut excluded = 0;
    for r in per_path {
        match r? {
            Some(bins) => {
                for (t, b) in totals.iter_mut().zip(&bins) {
                    t.merge(b);
                }
            }
            None => excluded += 1,
        }
    }

    let mut kept: Vec<(Moments, f64, f64)> = Vec::with_capacity(n_bins);
    let mut carry: Option<(Moments, f64)> = None;
    let mut merged = 0;
    for (b, mut m) in totals.into_iter().enumerate() {
        let mut lo = if b == 0 {
            f64::NEG_INFINITY
        } else {
            edges[b - 1]
        };
        let hi = if b + 1 == n_bins {
            f64::INFINITY
        } else {
            edges[b]
        };
        if let Some((c, clo)) = carry.take() {
            m.merge(&c);
            lo = clo;
        }
        if m.count >= 2 {
            kept.push((m, lo, hi));
            continue;
        }
        merged += 1;
        match kept.last_mut() {
            Some(last) => {
                last.0.merge(&m);
                last.2 = hi;
            }
            None => carry = Some((m, lo)),
        }
    }
    if let Some((c, lo)) = carry {
        kept.push((c, lo, f64::INFINITY));
    }

    let allowance = opts.bias_constant * dt * dt;
    let bins: Vec<ResidualBin> = kept
        .iter()
        .map(|(m, lo, hi)| {
            let e = m.estimate();
            ResidualBin {
                lo: *lo,
                hi: *hi,
                count: m.count,
                mean: e.value,
                stderr: e.stderr,
                z: significance(e.value, e.stderr, allowance),
            }
        })
        .collect();
    let max_z = bins.iter().map(|b| b.z).fold(0.0, f64::max);
    Ok(ResidualReport {
        pass: max_z < Z_THRESHOLD,
        bins,
        max_z,
        allowance,
        merged,
        excluded,
    })
}

/// Backward-equation residual `a(v) − f v` at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeResidual {
    pub t: f64,
    pub x: Vec<f64>,
    pub residual: f64,
    /// Propagated Monte Carlo standard error (zero for analytic values).
    pub stderr: f64,
    /// Discretization allowance at this node.
    pub allowance: f64,
}

impl NodeResidual {
    pub fn z(&self) -> f64 {
        significance(self.residual, self.stderr, self.allowance)
    }

    /// `|residual| ≤ allowance + 3·stderr`.
    pub fn within_band(&self) -> bool {
        self.residual.abs() <= self.allowance + 3.0 * self.stderr
    }
}

#[derive(Debug, Clone)]
pub struct PdeReport {
    pub nodes: Vec<NodeResidual>,
    pub max_abs: f64,
    pub max_z: f64,
    /// Nodes whose stencil leaves the surface.
    pub skipped: usize,
    pub pass: bool,
}

impl PdeReport {
    fn from_nodes(nodes: Vec<NodeResidual>, skipped: usize) -> Self {
        let max_abs = nodes.iter().map(|n| n.residual.abs()).fold(0.0, f64::max);
        let max_z = nodes.iter().map(NodeResidual::z).fold(0.0, f64::max);
        Self {
            pass: !nodes.is_empty() && max_z < Z_THRESHOLD,
            nodes,
            max_abs,
            max_z,
            skipped,
        }
    }

    /// Share of nodes inside their `allowance + 3·stderr` band.
    pub fn fraction_within_band(&self) -> f64 {
        if self.nodes.is_empty() {
            return f64::NAN;
        }
        self.nodes.iter().filter(|n| n.within_band()).count() as f64 / self.nodes.len() as f64
    }

    pub fn table(&self) -> Table {
        let d = self.nodes.first().map_or(1, |n| n.x.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| {
            if d == 1 {
                "x".to_string()
            } else {
                format!("x_{i}")
            }
        }));
        header.push("residual".into());
        let mut t = Table::new(header);
        for n in &self.nodes {
            let mut row = vec![fmt_f64(n.t)];
            row.extend(n.x.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(n.residual));
            t.push(row);
        }
        t
    }
}

/// Pointwise residual `a(v)(t,x) − f(t,x) v(t,x)` by finite differences of
/// `value` with the steps of `opts`. A node passes when the residual is
/// within `tolerance`.
pub fn pde_residual(
    value: &ValueSource,
    model: &ModelSpec,
    cost: &CostSpec,
    nodes: &[(f64, Vec<f64>)],
    opts: &GeneratorOptions,
    tolerance: f64,
) -> Result<PdeReport> {
    let horizon = value.horizon();
    let mut out = Vec::with_capacity(nodes.len());
    let mut skipped = 0;
    for (t, x) in nodes {
        if !(*t >= 0.0 && *t < horizon) || x.len() != model.dim {
            return Err(Error::invalid(format!("node ({t}, {x:?}) is not interior")));
        }
        if let ValueSource::Surface(s) = value {
            let h = opts.space_step(x).max(max_cell(s));
            if x.iter()
                .enumerate()
                .any(|(a, xi)| xi - h < s.space.lo[a] || xi + h > s.space.hi[a])
            {
                skipped += 1;
                continue;
            }
        }
        let av = eval_generator(model, value, *t, x, opts)?;
        let residual = av - cost.running_at(*t, x) * value.value(*t, x);
        out.push(NodeResidual {
            t: *t,
            x: x.clone(),
            residual,
            stderr: 0.0,
            allowance: tolerance,
        });
    }
    Ok(PdeReport::from_nodes(out, skipped))
}

fn max_cell(s: &ValueSurface) -> f64 {
    (0..s.space.dim())
        .map(|a| s.space.cell(a))
        .fold(0.0, f64::max)
}

/// Residual on the interior nodes of an estimated surface, with stencils at
/// the node spacing and standard errors propagated from the node estimates.
/// The allowance at a node is `C (Δt + h²)` for the local spacings.
pub fn surface_pde_residual(
    surface: &ValueSurface,
    model: &ModelSpec,
    cost: &CostSpec,
    constant: f64,
    opts: &GeneratorOptions,
) -> Result<PdeReport> {
    let space = &surface.space;
    let nt = surface.time_nodes.len();
    let np = space.n_points();
    let mut out = Vec::new();
    let mut skipped = 0;
    for ti in 0..nt.saturating_sub(1) {
        for j in 0..np {
            let idx = space.multi_index(j);
            if ti == 0
                || idx
                    .iter()
                    .zip(&space.nodes)
                    .any(|(i, n)| *i == 0 || *i + 1 == *n)
            {
                skipped += 1;
                continue;
            }
            out.push(surface_node(surface, model, cost, ti, j, constant, opts)?);
        }
    }
    Ok(PdeReport::from_nodes(out, skipped))
}

/// Linear stencil `Σ c_k v_k` with its propagated standard error.
struct Stencil {
    value: KahanSum,
    var: f64,
}

impl Stencil {
    fn new() -> Self {
        Self {
            value: KahanSum::new(),
            var: 0.0,
        }
    }

    fn add(&mut self, s: &ValueSurface, ti: usize, j: usize, c: f64) {
        self.value.add(c * s.value_at_node(ti, j));
        self.var += (c * s.stderr_at_node(ti, j)).powi(2);
    }
}

fn surface_node(
    s: &ValueSurface,
    model: &ModelSpec,
    cost: &CostSpec,
    ti: usize,
    j: usize,
    constant: f64,
    opts: &GeneratorOptions,
) -> Result<NodeResidual> {
    let space = &s.space;
    let d = space.dim();
    let t = s.time_nodes[ti];
    let x = space.point(j);
    let idx = space.multi_index(j);
    let at = |shift: &[(usize, isize)]| {
        let mut k = idx.clone();
        for (axis, delta) in shift {
            k[*axis] = (k[*axis] as isize + delta) as usize;
        }
        space.flat_index(&k)
    };

    let mut st = Stencil::new();
    let (tp, tm) = (s.time_nodes[ti + 1], s.time_nodes[ti - 1]);
    st.add(s, ti + 1, j, 1.0 / (tp - tm));
    st.add(s, ti - 1, j, -1.0 / (tp - tm));

    let mut b = vec![0.0; d];
    model.drift_at(t, &x, &mut b);
    let a = model.covariance_at(t, &x);
    for i in 0..d {
        let h = space.cell(i);
        st.add(s, ti, at(&[(i, 1)]), b[i] / (2.0 * h));
        st.add(s, ti, at(&[(i, -1)]), -b[i] / (2.0 * h));
        let c = 0.5 * a[i * d + i] / (h * h);
        st.add(s, ti, at(&[(i, 1)]), c);
        st.add(s, ti, at(&[(i, -1)]), c);
        st.add(s, ti, j, -2.0 * c);
        for k in (i + 1)..d {
            let hk = space.cell(k);
            // ½(a_ik + a_ki) ∂_ik v with the four-corner stencil.
            let c = 0.5 * (a[i * d + k] + a[k * d + i]) / (4.0 * h * hk);
            st.add(s, ti, at(&[(i, 1), (k, 1)]), c);
            st.add(s, ti, at(&[(i, -1), (k, -1)]), c);
            st.add(s, ti, at(&[(i, 1), (k, -1)]), -c);
            st.add(s, ti, at(&[(i, -1), (k, 1)]), -c);
        }
    }
    let f = cost.running_at(t, &x);
    st.add(s, ti, j, -f);

    let mut jump_var = 0.0;
    if let Some(jump) = &model.jump {
        let rate = (jump.intensity)(t, &x);
        if rate != 0.0 {
            let mut y = vec![0.0; d];
            let v0 = s.value_at_node(ti, j);
            let e = jump.law.expectation(t, &x, opts, |q| {
                for i in 0..d {
                    y[i] = x[i] + q[i];
                }
                s.interpolate(t, &y) - v0
            });
            let e_se = jump.law.expectation(t, &x, opts, |q| {
                for i in 0..d {
                    y[i] = x[i] + q[i];
                }
                s.interpolate_stderr(t, &y)
            });
            st.value.add(rate * e);
            jump_var = (rate * e_se).powi(2) + (rate * s.stderr_at_node(ti, j)).powi(2);
        }
    }

    let dt = 0.5 * (tp - tm);
    let h2 = (0..d).map(|i| space.cell(i).powi(2)).fold(0.0, f64::max);
    Ok(NodeResidual {
        t,
        x,
        residual: st.value.total(),
        stderr: (st.var + jump_var).sqrt(),
        allowance: constant * (dt + h2),
    })
}

/// Outcome of [`integrability_probe`].
#[derive(Debug, Clone)]
pub struct IntegrabilityReport {
    pub p: f64,
    /// Estimate on the first `n_paths` paths.
    pub at_n: Estimate,
    /// Estimate on `2 n_paths` paths (a superset of the first run).
    pub at_2n: Estimate,
    pub relative_drift: f64,
    pub excluded: usize,
}

impl IntegrabilityReport {
    pub fn stable(&self, max_drift: f64) -> bool {
        self.at_2n.value.is_finite() && self.relative_drift < max_drift
    }
}

/// `E_{Q*}[∫ |Γ(v)/v|^p dt]` with left-endpoint quadrature, at `N` and `2N` paths.
pub fn integrability_probe(
    twisted: &TwistedModel,
    grid: &TimeGrid,
    n_paths: usize,
    p: f64,
    seed: SeedSpec,
) -> Result<IntegrabilityReport> {
    if !(p > 1.0 && p < 2.0) {
        return Err(Error::invalid(format!("exponent p={p} outside (1,2)")));
    }
    let d = twisted.model.dim;
    let dt = grid.dt();
    let dynamics = TwistedDynamics::new(twisted);
    let values = simulate_map(
        &dynamics,
        grid,
        2 * n_paths,
        seed,
        |_, path| -> Result<Option<f64>> {
            if path.diverged {
                return Ok(None);
            }
            let mut corr = vec![0.0; d];
            let mut acc = KahanSum::new();
            for k in 0..grid.n_steps() {
                twisted.drift_correction_into(grid.time(k), path.state(k), &mut corr)?;
                let norm = corr.iter().map(|c| c * c).sum::<f64>().sqrt();
                acc.add(norm.powf(p) * dt);
            }
            Ok(Some(acc.total()))
        },
    )?;
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let first: Vec<f64> = values[..n_paths].iter().flatten().copied().collect();
    let all: Vec<f64> = values.iter().flatten().copied().collect();
    let at_n = crate::stats::mean_stderr(&first);
    let at_2n = crate::stats::mean_stderr(&all);
    let relative_drift = if at_2n.value == 0.0 && at_n.value == 0.0 {
        0.0
    } else {
        ((at_2n.value - at_n.value) / at_2n.value).abs()
    };
    Ok(IntegrabilityReport {
        p,
        at_n,
        at_2n,
        relative_drift,
        excluded: 2 * n_paths - all.len(),
    })
}
