//! Euler–Maruyama path simulation with thinned jumps and per-path seeding.
//!
//! Each interval `[t_k, t_{k+1}]` is advanced as
//!
//! ```text
//! X' = X_k + b(t_k, X_k) dt + σ(t_k, X_k) √dt ξ
//! X_{k+1} = X' + Σ accepted jumps
//! ```
//!
//! Jump proposals are Poisson with the envelope rate frozen at the left
//! endpoint; each proposal `q ~ ρ(t_k, X_k, ·)` is kept with the acceptance
//! probability supplied by the [`Dynamics`]. For the reference measure the
//! envelope is `λ(t_k, X_k)` and every proposal is kept.
//!
//! The random stream of path `i` depends only on `(master, stream, i)`, so
//! bundles are identical for any thread count.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, TimeGrid, VectorField};

/// States with a coordinate beyond this magnitude are flagged as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Hard cap on jump proposals in a single step.
const MAX_PROPOSALS_PER_STEP: u64 = 10_000_000;

/// RNG handed to each path.
pub type PathRng = ChaCha8Rng;

/// Seed of a family of random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master: u64,
    pub stream: u64,
}

impl SeedSpec {
    pub fn new(master: u64, stream: u64) -> Self {
        Self { master, stream }
    }

    /// A derived stream for an independent sub-computation tagged `tag`.
    pub fn child(&self, tag: u64) -> SeedSpec {
        SeedSpec {
            master: self.master,
            stream: splitmix64(splitmix64(self.stream) ^ tag.wrapping_mul(0xd1b5_4a32_d192_ed03)),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG of path `path_index`: the ChaCha key is the concatenation of
/// `(master, stream, path_index)`, which makes the derivation injective.
pub fn derive_path_seed(seed: SeedSpec, path_index: u64) -> PathRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.master.to_le_bytes());
    key[8..16].copy_from_slice(&seed.stream.to_le_bytes());
    key[16..24].copy_from_slice(&path_index.to_le_bytes());
    key[24..].copy_from_slice(b"xtwist\0\x01");
    ChaCha8Rng::from_seed(key)
}

/// Accepted jumps within one step, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMark {
    /// Index `k` of the step `[t_k, t_{k+1}]`; the jump lands at `t_{k+1}`.
    pub step: usize,
    pub size: Vec<f64>,
    /// Number of accepted jumps in that step.
    pub count: u32,
}

/// One simulated path on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub grid: TimeGrid,
    pub dim: usize,
    /// Row-major `(n_steps + 1) × dim` states.
    pub states: Vec<f64>,
    pub jump_marks: Vec<JumpMark>,
    pub diverged: bool,
}

impl Path {
    pub fn n_nodes(&self) -> usize {
        self.grid.n_steps() + 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.n_steps())
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    pub fn jump_count(&self) -> u64 {
        self.jump_marks.iter().map(|m| m.count as u64).sum()
    }
}

/// Simulated paths plus divergence bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dim: usize,
    pub paths: Vec<Path>,
}

impl PathBundle {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn diverged_count(&self) -> usize {
        self.paths.iter().filter(|p| p.diverged).count()
    }

    /// Exact binary content (states and jump marks), for identity checks.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.paths {
            out.push(p.diverged as u8);
            for v in &p.states {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            for m in &p.jump_marks {
                out.extend_from_slice(&(m.step as u64).to_le_bytes());
                out.extend_from_slice(&m.count.to_le_bytes());
                for v in &m.size {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        out
    }

    /// One row per `(path, time)`: `path_id,t,x_1..x_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path_id,t")?;
        for i in 1..=self.dim {
            write!(w, ",x_{i}")?;
        }
        writeln!(w)?;
        let times = self.grid.times();
        for (id, p) in self.paths.iter().enumerate() {
            for (k, t) in times.iter().enumerate() {
                write!(w, "{id},{}", crate::report::fmt_f64(*t))?;
                for v in p.state(k) {
                    write!(w, ",{}", crate::report::fmt_f64(*v))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// The law being simulated: drift, initial law and jump thinning rule.
pub trait Dynamics: Sync {
    fn model(&self) -> &ModelSpec;

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.model().drift_at(t, x, out);
        Ok(())
    }

    fn initial_state(&self, rng: &mut PathRng, out: &mut [f64]) -> Result<()> {
        self.model().initial.sample(rng, out);
        Ok(())
    }

    /// Proposal rate for jumps leaving `(t, x)`.
    fn jump_envelope(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.model().intensity_at(t, x))
    }

    /// Probability of keeping the proposed jump `q` from `(t, x)`.
    fn jump_acceptance(&self, _t: f64, _x: &[f64], _q: &[f64]) -> Result<f64> {
        Ok(1.0)
    }
}

/// The reference measure, optionally with a replaced drift.
pub struct ReferenceDynamics<'a> {
    pub model: &'a ModelSpec,
    pub drift_override: Option<VectorField>,
}

impl<'a> ReferenceDynamics<'a> {
    pub fn new(model: &'a ModelSpec) -> Self {
        Self {
            model,
            drift_override: None,
        }
    }
}

impl Dynamics for ReferenceDynamics<'_> {
    fn model(&self) -> &ModelSpec {
        self.model
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.drift_override {
            Some(f) => f(t, x, out),
            None => self.model.drift_at(t, x, out),
        }
        Ok(())
    }
}

/// Simulates path `index` of the family `seed`.
pub fn simulate_path<D: Dynamics + ?Sized>(
    dynamics: &D,
    grid: &TimeGrid,
    seed: SeedSpec,
    index: u64,
) -> Result<Path> {
    let model = dynamics.model();
    let d = model.dim;
    let n = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut rng = derive_path_seed(seed, index);

    let mut states = vec![0.0; (n + 1) * d];
    dynamics.initial_state(&mut rng, &mut states[..d])?;
    let mut cur = states[..d].to_vec();
    let mut next = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    let mut xi = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut marks = Vec::new();
    let mut diverged = cur
        .iter()
        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD);

    for k in 0..n {
        if diverged {
            states[(k + 1) * d..(k + 2) * d].copy_from_slice(&cur);
            continue;
        }
        let t = grid.time(k);
        dynamics.drift(t, &cur, &mut b)?;
        model.diffusion_at(t, &cur, &mut s);
        let noisy = s.iter().any(|v| *v != 0.0);
        if noisy {
            for z in xi.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
        }
        for i in 0..d {
            let mut v = cur[i] + b[i] * dt;
            if noisy {
                let mut dw = 0.0;
                for j in 0..d {
                    dw += s[i * d + j] * xi[j];
                }
                v += dw * sqrt_dt;
            }
            next[i] = v;
        }

        if let Some(jump) = &model.jump {
            let envelope = dynamics.jump_envelope(t, &cur)?;
            if !(envelope.is_finite() && envelope >= 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "jump envelope {envelope} at t={t}, x={cur:?}"
                )));
            }
            let mean = envelope * dt;
            if mean > 0.0 {
                let proposals = Poisson::new(mean)
                    .map_err(|e| Error::InvariantViolation(format!("poisson rate {mean}: {e}")))?
                    .sample(&mut rng) as u64;
                if proposals > MAX_PROPOSALS_PER_STEP {
                    return Err(Error::InvariantViolation(format!(
                        "{proposals} jump proposals in one step at t={t}"
                    )));
                }
                let mut size = vec![0.0; d];
                let mut accepted = 0u32;
                for _ in 0..proposals {
                    jump.law.sample(t, &cur, &mut rng, &mut q);
                    let p = dynamics.jump_acceptance(t, &cur, &q)?;
                    let keep = if p >= 1.0 {
                        true
                    } else {
                        rng.random::<f64>() < p
                    };
                    if keep {
                        accepted += 1;
                        for i in 0..d {
                            size[i] += q[i];
                        }
                    }
                }
                if accepted > 0 {
                    for i in 0..d {
                        next[i] += size[i];
                    }
                    marks.push(JumpMark {
                        step: k,
                        size,
                        count: accepted,
                    });
                }
            }
        }

        if next
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD)
        {
            diverged = true;
        }
        states[(k + 1) * d..(k + 2) * d].copy_from_slice(&next);
        std::mem::swap(&mut cur, &mut next);
    }

    Ok(Path {
        grid: *grid,
        dim: d,
        states,
        jump_marks: marks,
        diverged,
    })
}

/// Simulates `n_paths` paths in parallel and maps each through `observe`.
/// Results are in path-index order.
pub fn simulate_map<D, T, F>(
    dynamics: &D,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
    observe: F,
) -> Result<Vec<T>>
where
    D: Dynamics + ?Sized,
    T: Send,
    F: Fn(u64, Path) -> T + Sync + Send,
{
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be >= 1"));
    }
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| simulate_path(dynamics, grid, seed, i).map(|p| observe(i, p)))
        .collect()
}

/// Simulates paths under the reference measure.
pub fn sample_paths(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
    drift_override: Option<VectorField>,
) -> Result<PathBundle> {
    let dynamics = ReferenceDynamics {
        model,
        drift_override,
    };
    collect_bundle(&dynamics, grid, n_paths, seed)
}

pub fn collect_bundle<D: Dynamics + ?Sized>(
    dynamics: &D,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<PathBundle> {
    let paths = simulate_map(dynamics, grid, n_paths, seed, |_, p| p)?;
    Ok(PathBundle {
        grid: *grid,
        dim: dynamics.model().dim,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;
    use std::sync::Arc;

    #[test]
    fn seed_derivation_is_deterministic_and_separated() {
        let s = SeedSpec::new(7, 0);
        assert_eq!(derive_path_seed(s, 3), derive_path_seed(s, 3));
        assert_ne!(derive_path_seed(s, 0), derive_path_seed(s, 1));
        assert_ne!(
            derive_path_seed(s, 0),
            derive_path_seed(SeedSpec::new(7, 1), 0)
        );
        let mut a = derive_path_seed(s, 0);
        let mut b = derive_path_seed(s, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn child_streams_differ() {
        let s = SeedSpec::new(1, 2);
        assert_ne!(s.child(0), s.child(1));
        assert_eq!(s.child(5), s.child(5));
    }

    #[test]
    fn deterministic_ode_paths() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let m = ModelSpec::constant_drift(vec![0.0], 0.0, vec![3.0]);
        let b = sample_paths(&m, &grid, 10, SeedSpec::new(1, 0), None).unwrap();
        assert!(b.paths.iter().all(|p| p.states.iter().all(|v| *v == 3.0)));

        let m = ModelSpec::constant_drift(vec![1.0], 0.0, vec![0.0]);
        let b = sample_paths(&m, &grid, 4, SeedSpec::new(1, 0), None).unwrap();
        for p in &b.paths {
            assert!((p.terminal()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_override_replaces_drift() {
        let grid = TimeGrid::new(2.0, 20).unwrap();
        let m = ModelSpec::constant_drift(vec![1.0], 0.0, vec![0.0]);
        let f: VectorField = Arc::new(|_, _, out: &mut [f64]| out[0] = -0.5);
        let b = sample_paths(&m, &grid, 2, SeedSpec::new(1, 0), Some(f)).unwrap();
        assert!((b.paths[0].terminal()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let m = ModelSpec::linear_drift(vec![0.0], 400.0, 0.0, vec![1.0]);
        let b = sample_paths(&m, &grid, 3, SeedSpec::new(1, 0), None).unwrap();
        assert_eq!(b.diverged_count(), 3);
    }

    #[test]
    fn jump_marks_strictly_increasing() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let m = ModelSpec::poisson_unit(30.0, 0.0);
        let b = sample_paths(&m, &grid, 20, SeedSpec::new(3, 0), None).unwrap();
        for p in &b.paths {
            assert!(p.jump_marks.windows(2).all(|w| w[0].step < w[1].step));
            assert_eq!(p.jump_count() as f64, p.terminal()[0]);
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let m = ModelSpec::brownian(1.0, vec![0.0, 1.0]);
        let b = sample_paths(&m, &grid, 2, SeedSpec::new(3, 0), None).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,x_1,x_2");
        assert_eq!(lines.len(), 1 + 2 * 3);
    }
}
