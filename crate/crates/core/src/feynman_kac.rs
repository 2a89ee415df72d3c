//! Nested Monte Carlo estimates of the value function
//!
//! ```text
//! v(t, x) = E^{t,x}[ exp(−∫_t^T f(r, X_r) dr − g(X_T)) ]
//! ```
//!
//! on a space-time grid, with multilinear interpolation between nodes.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CostSpec, CustomJumpLaw, InitialLaw, JumpLaw, JumpSpec, ModelSpec, TimeGrid};
use crate::path::{simulate_map, Path, PathBundle, ReferenceDynamics, SeedSpec};
use crate::report::fmt_f64;
use crate::stats::Estimate;

/// Floor applied to `v` before any division.
pub const EPS_V: f64 = 1e-12;

impl ModelSpec {
    /// The same dynamics with every coefficient evaluated at `t + offset`.
    pub fn shifted(&self, offset: f64) -> ModelSpec {
        if offset == 0.0 {
            return self.clone();
        }
        let drift = self.drift.clone();
        let diffusion = self.diffusion.clone();
        let jump = self.jump.as_ref().map(|j| {
            let intensity = j.intensity.clone();
            let law = match &j.law {
                JumpLaw::Custom(inner) => JumpLaw::Custom(Arc::new(ShiftedLaw {
                    inner: inner.clone(),
                    offset,
                })),
                other => other.clone(),
            };
            JumpSpec::new(Arc::new(move |t, x| intensity(t + offset, x)), law)
        });
        ModelSpec {
            name: self.name.clone(),
            dim: self.dim,
            drift: Arc::new(move |t, x, out| drift(t + offset, x, out)),
            diffusion: Arc::new(move |t, x, out| diffusion(t + offset, x, out)),
            jump,
            initial: self.initial.clone(),
        }
    }
}

struct ShiftedLaw {
    inner: Arc<dyn CustomJumpLaw>,
    offset: f64,
}

impl CustomJumpLaw for ShiftedLaw {
    fn sample(&self, t: f64, x: &[f64], rng: &mut dyn rand::RngCore, out: &mut [f64]) {
        self.inner.sample(t + self.offset, x, rng, out)
    }
    fn density(&self, t: f64, x: &[f64], q: &[f64]) -> f64 {
        self.inner.density(t + self.offset, x, q)
    }
}

/// `Σ_{k<n} f(t0 + t_k, X_k) dt + g(X_T)` along a path whose grid starts at `t0`.
pub(crate) fn path_cost_from(path: &Path, cost: &CostSpec, t0: f64) -> f64 {
    let g = cost.terminal_at(path.terminal());
    if cost.running_is_zero {
        return g;
    }
    let dt = path.grid.dt();
    let mut acc = crate::stats::KahanSum::new();
    for k in 0..path.grid.n_steps() {
        acc.add(cost.running_at(t0 + path.grid.time(k), path.state(k)) * dt);
    }
    acc.total() + g
}

/// Remaining sub-grid from `t` with the step of `grid`.
fn remaining_grid(grid: &TimeGrid, t: f64) -> Result<TimeGrid> {
    let tau = grid.horizon() - t;
    let n = ((tau / grid.dt()).round() as usize).max(1);
    TimeGrid::new(tau, n)
}

/// Monte Carlo estimate of `v(t, x)` from `n_sub` reference sub-paths.
pub fn estimate_value_point(
    model: &ModelSpec,
    cost: &CostSpec,
    t: f64,
    x: &[f64],
    n_sub: usize,
    grid: &TimeGrid,
    seed: SeedSpec,
) -> Result<Estimate> {
    let horizon = grid.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::invalid(format!("t={t} outside [0, {horizon}]")));
    }
    if n_sub < 2 {
        return Err(Error::invalid("n_sub must be >= 2"));
    }
    if x.len() != model.dim {
        return Err(Error::invalid("state dimension mismatch"));
    }
    if horizon - t <= 1e-12 * horizon.max(1.0) {
        return Ok(Estimate::new((-cost.terminal_at(x)).exp().max(EPS_V), 0.0));
    }
    let sub_grid = remaining_grid(grid, t)?;
    let sub_model = model.shifted(t).with_initial(InitialLaw::Point(x.to_vec()));
    let dynamics = ReferenceDynamics::new(&sub_model);
    let samples: Vec<Option<f64>> = simulate_map(&dynamics, &sub_grid, n_sub, seed, |_, p| {
        if p.diverged {
            return None;
        }
        let w = (-path_cost_from(&p, cost, t)).exp();
        w.is_finite().then_some(w)
    })?;
    let kept: Vec<f64> = samples.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::EstimationFailure {
            t,
            x: x.to_vec(),
            reason: "all sub-paths diverged".into(),
        });
    }
    let n = kept.len() as f64;
    let mean = crate::stats::mean(&kept);
    let stderr = if kept.len() > 1 {
        let var = crate::stats::sum(kept.iter().map(|w| (w - mean) * (w - mean))) / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(Estimate::new(mean.clamp(EPS_V, 1.0), stderr))
}

/// Spatial box `[lo, hi]` with `nodes` points per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl SpaceBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != nodes.len() || lo.is_empty() {
            return Err(Error::invalid(
                "box bounds and node counts must share the dimension",
            ));
        }
        for a in 0..lo.len() {
            if nodes[a] == 0 || !(hi[a] >= lo[a]) || (nodes[a] > 1 && hi[a] == lo[a]) {
                return Err(Error::invalid(format!("degenerate box axis {a}")));
            }
        }
        Ok(Self { lo, hi, nodes })
    }

    /// `x0 ± 6·(|σ|√T + |b|T)` per axis, widened by the jump scale when present.
    pub fn default_for(model: &ModelSpec, grid: &TimeGrid) -> Self {
        let d = model.dim;
        let center = model.initial.center(d);
        let horizon = grid.horizon();
        let a = model.covariance_at(0.0, &center);
        let mut b = vec![0.0; d];
        model.drift_at(0.0, &center, &mut b);
        let rate = model.intensity_at(0.0, &center);
        let jump_scale: Vec<f64> = match model.jump.as_ref().map(|j| &j.law) {
            Some(JumpLaw::Atoms(atoms)) => (0..d)
                .map(|i| {
                    let m1: f64 = atoms.iter().map(|(q, p)| p * q[i].abs()).sum();
                    let m2: f64 = atoms.iter().map(|(q, p)| p * q[i] * q[i]).sum();
                    rate * horizon * m1 + (rate * horizon * m2).sqrt()
                })
                .collect(),
            Some(JumpLaw::Gaussian { mean, std }) => (0..d)
                .map(|i| {
                    rate * horizon * mean[i].abs()
                        + (rate * horizon * (mean[i] * mean[i] + std[i] * std[i])).sqrt()
                })
                .collect(),
            _ => vec![0.0; d],
        };
        let initial_spread: Vec<f64> = match &model.initial {
            InitialLaw::Gaussian { std, .. } => std.clone(),
            _ => vec![0.0; d],
        };
        let nodes = if d <= 2 { 41 } else { 9 };
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for i in 0..d {
            let mut w = 6.0
                * ((a[i * d + i] * horizon).sqrt()
                    + b[i].abs() * horizon
                    + jump_scale[i]
                    + initial_spread[i]);
            if !(w > 0.0) {
                w = 1.0;
            }
            lo[i] = center[i] - w;
            hi[i] = center[i] + w;
        }
        Self {
            lo,
            hi,
            nodes: vec![nodes; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn cell(&self, axis: usize) -> f64 {
        if self.nodes[axis] <= 1 {
            0.0
        } else {
            (self.hi[axis] - self.lo[axis]) / (self.nodes[axis] - 1) as f64
        }
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if i + 1 >= self.nodes[axis] && self.nodes[axis] > 1 {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.cell(axis)
        }
    }

    pub fn n_points(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Multi-index of flat point `j` (last axis fastest).
    pub fn multi_index(&self, mut j: usize) -> Vec<usize> {
        let d = self.dim();
        let mut idx = vec![0; d];
        for a in (0..d).rev() {
            idx[a] = j % self.nodes[a];
            j /= self.nodes[a];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.nodes)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn point(&self, j: usize) -> Vec<f64> {
        self.multi_index(j)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.coordinate(a, i))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, v)| *v >= self.lo[a] && *v <= self.hi[a])
    }
}

/// Gridded estimate of `v` with per-node standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub time_nodes: Vec<f64>,
    pub space: SpaceBox,
    /// `values[i * n_points + j]` at time node `i`, space point `j`.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub eps_v: f64,
}

/// Per-axis bracketing: lower node index and fractional offset.
fn bracket(lo: f64, cell: f64, n: usize, x: f64) -> (usize, f64) {
    if n <= 1 || cell == 0.0 {
        return (0, 0.0);
    }
    let hi = lo + cell * (n - 1) as f64;
    let xc = x.clamp(lo, hi);
    let mut u = (xc - lo) / cell;
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        u = r;
    }
    let i = (u.floor() as usize).min(n - 2);
    (i, (u - i as f64).clamp(0.0, 1.0))
}

impl ValueSurface {
    pub fn horizon(&self) -> f64 {
        *self.time_nodes.last().unwrap()
    }

    pub fn n_points(&self) -> usize {
        self.space.n_points()
    }

    pub fn value_at_node(&self, ti: usize, j: usize) -> f64 {
        self.values[ti * self.n_points() + j]
    }

    pub fn stderr_at_node(&self, ti: usize, j: usize) -> f64 {
        self.stderr[ti * self.n_points() + j]
    }

    fn time_bracket(&self, t: f64) -> (usize, f64) {
        let nodes = &self.time_nodes;
        if nodes.len() == 1 || t <= nodes[0] {
            return (0, 0.0);
        }
        let last = nodes.len() - 1;
        if t >= nodes[last] {
            return (last - 1, 1.0);
        }
        let i = nodes.partition_point(|&s| s <= t) - 1;
        let i = i.min(last - 1);
        let w = (t - nodes[i]) / (nodes[i + 1] - nodes[i]);
        (i, w)
    }

    fn interpolate_field(&self, field: &[f64], t: f64, x: &[f64]) -> f64 {
        let d = self.space.dim();
        let (ti, tw) = self.time_bracket(t);
        let brackets: Vec<(usize, f64)> = (0..d)
            .map(|a| {
                bracket(
                    self.space.lo[a],
                    self.space.cell(a),
                    self.space.nodes[a],
                    x[a],
                )
            })
            .collect();
        let np = self.n_points();
        let mut total = 0.0;
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for (a, &(i, f)) in brackets.iter().enumerate() {
                let up = (corner >> a) & 1 == 1;
                if up {
                    w *= f;
                    idx[a] = (i + 1).min(self.space.nodes[a] - 1);
                } else {
                    w *= 1.0 - f;
                    idx[a] = i;
                }
            }
            if w == 0.0 {
                continue;
            }
            let j = self.space.flat_index(&idx);
            let lower = field[ti * np + j];
            let v = if tw == 0.0 {
                lower
            } else if tw == 1.0 {
                field[(ti + 1) * np + j]
            } else {
                (1.0 - tw) * lower + tw * field[(ti + 1) * np + j]
            };
            total += w * v;
        }
        total
    }

    /// Multilinear interpolation; `x` is clamped to the box, result `≥ eps_v`.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> f64 {
        self.interpolate_field(&self.values, t, x).max(self.eps_v)
    }

    /// Interpolated nodal standard error.
    pub fn interpolate_stderr(&self, t: f64, x: &[f64]) -> f64 {
        self.interpolate_field(&self.stderr, t, x)
    }

    /// Central-difference `∇_x v` with per-axis step `max(fd_step, cell)`.
    pub fn gradient(&self, t: f64, x: &[f64], fd_step: f64, out: &mut [f64]) -> Result<()> {
        let d = self.space.dim();
        let mut y = x.to_vec();
        for a in 0..d {
            let h = fd_step.max(self.space.cell(a));
            if h == 0.0 {
                out[a] = 0.0;
                continue;
            }
            y[a] = x[a] + h;
            let vp = self.interpolate(t, &y);
            y[a] = x[a] - h;
            let vm = self.interpolate(t, &y);
            y[a] = x[a];
            let g = (vp - vm) / (2.0 * h);
            if !g.is_finite() {
                return Err(Error::NumericalFailure {
                    what: "surface gradient".into(),
                    t,
                    x: x.to_vec(),
                    stencil: vec![vm, vp],
                });
            }
            out[a] = g;
        }
        Ok(())
    }

    /// CSV with header `t,x_1..x_d,v,stderr`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "t")?;
        for a in 1..=self.space.dim() {
            write!(w, ",x_{a}")?;
        }
        writeln!(w, ",v,stderr")?;
        let np = self.n_points();
        for (ti, t) in self.time_nodes.iter().enumerate() {
            for j in 0..np {
                write!(w, "{}", fmt_f64(*t))?;
                for c in self.space.point(j) {
                    write!(w, ",{}", fmt_f64(c))?;
                }
                writeln!(
                    w,
                    ",{},{}",
                    fmt_f64(self.values[ti * np + j]),
                    fmt_f64(self.stderr[ti * np + j])
                )?;
            }
        }
        Ok(())
    }

    /// Inverse of [`ValueSurface::write_csv`].
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("surface csv: {m}"));
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "t" || cols[cols.len() - 2] != "v" {
            return Err(bad(format!("unexpected header {header}")));
        }
        let d = cols.len() - 3;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            if row.len() != d + 3 {
                return Err(bad(format!("line {}: expected {} fields", n + 2, d + 3)));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(bad("no data rows".into()));
        }
        let mut time_nodes: Vec<f64> = Vec::new();
        for r in &rows {
            if time_nodes.last() != Some(&r[0]) {
                time_nodes.push(r[0]);
            }
        }
        let np = rows.len() / time_nodes.len();
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        let mut nodes = vec![0usize; d];
        for a in 0..d {
            let mut seen: Vec<f64> = rows[..np].iter().map(|r| r[1 + a]).collect();
            seen.sort_by(f64::total_cmp);
            seen.dedup();
            lo[a] = seen[0];
            hi[a] = *seen.last().unwrap();
            nodes[a] = seen.len();
        }
        let space = SpaceBox::new(lo, hi, nodes)?;
        if space.n_points() * time_nodes.len() != rows.len() {
            return Err(bad("rows do not form a full grid".into()));
        }
        Ok(ValueSurface {
            time_nodes,
            space,
            values: rows.iter().map(|r| r[d + 1]).collect(),
            stderr: rows.iter().map(|r| r[d + 2]).collect(),
            eps_v: EPS_V,
        })
    }
}

/// Surface resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSettings {
    pub space: SpaceBox,
    pub time_nodes: usize,
    pub n_sub: usize,
}

impl SurfaceSettings {
    pub fn default_for(model: &ModelSpec, grid: &TimeGrid, n_sub: usize) -> Self {
        Self {
            space: SpaceBox::default_for(model, grid),
            time_nodes: 21,
            n_sub,
        }
    }
}

/// Grid indices of the surface time nodes.
fn time_node_indices(grid: &TimeGrid, count: usize) -> Vec<usize> {
    let n = grid.n_steps();
    let count = count.max(2);
    let mut idx: Vec<usize> = (0..count)
        .map(|i| ((i as f64) * n as f64 / (count - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

/// Nested Monte Carlo at every node; the terminal row is `exp(−g)`.
pub fn build_value_surface(
    model: &ModelSpec,
    cost: &CostSpec,
    grid: &TimeGrid,
    settings: &SurfaceSettings,
    seed: SeedSpec,
) -> Result<ValueSurface> {
    let space = settings.space.clone();
    if space.dim() != model.dim {
        return Err(Error::invalid("surface box dimension mismatch"));
    }
    let steps = time_node_indices(grid, settings.time_nodes);
    let time_nodes: Vec<f64> = steps.iter().map(|&k| grid.time(k)).collect();
    let np = space.n_points();
    let last = time_nodes.len() - 1;
    let jobs: Vec<(usize, usize)> = (0..time_nodes.len())
        .flat_map(|ti| (0..np).map(move |j| (ti, j)))
        .collect();
    let estimates: Vec<Estimate> = jobs
        .par_iter()
        .map(|&(ti, j)| {
            let x = space.point(j);
            if ti == last {
                return Ok(Estimate::new((-cost.terminal_at(&x)).exp().max(EPS_V), 0.0));
            }
            let node_seed = seed.child((ti * np + j) as u64);
            estimate_value_point(
                model,
                cost,
                time_nodes[ti],
                &x,
                settings.n_sub,
                grid,
                node_seed,
            )
        })
        .collect::<Result<_>>()?;
    Ok(ValueSurface {
        time_nodes,
        space,
        values: estimates.iter().map(|e| e.value).collect(),
        stderr: estimates.iter().map(|e| e.stderr).collect(),
        eps_v: EPS_V,
    })
}

/// Value at `(t, x)`: multilinear in time and space, clamped to the box.
pub fn interpolate_value(surface: &ValueSurface, t: f64, x: &[f64]) -> f64 {
    surface.interpolate(t, x)
}

/// Fraction of path states (all times) outside the surface box.
pub fn excursion_fraction(surface: &ValueSurface, bundle: &PathBundle) -> f64 {
    let mut outside = 0usize;
    let mut total = 0usize;
    for p in &bundle.paths {
        for k in 0..p.n_nodes() {
            total += 1;
            if !surface.space.contains(p.state(k)) {
                outside += 1;
            }
        }
    }
    outside as f64 / total.max(1) as f64
}
