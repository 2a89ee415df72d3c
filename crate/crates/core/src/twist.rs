//! The twisted model `Q* ∝ e^{−φ} dP`.
//!
//! Under `Q*` the canonical process solves the martingale problem with
//!
//! ```text
//! drift        b*(t,x) = b(t,x) + Γ(v)(t,x) / v(t,x),   Γ(v) = σσᵀ ∇_x v
//! jump kernel  (v(t,x+q) / v(t,x)) λ(t,x) ρ(t,x,dq)
//! initial law  ν(dx) ∝ v(0,x) μ(dx)
//! ```
//!
//! Twisted jumps are simulated by thinning: proposals arrive at rate
//! `λ / v(t,x)` and a proposal `q` is kept with probability `v(t,x+q) ≤ 1`.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{with_scratch, GeneratorOptions, ModelSpec, TimeGrid};
use crate::path::{collect_bundle, Dynamics, PathBundle, PathRng, SeedSpec};
use crate::report::fmt_f64;
use crate::value::ValueSource;

/// Default finite-difference step for `∇_x v`.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Proposals tried per initial draw before the twist is declared degenerate.
const MAX_INITIAL_PROPOSALS: u64 = 10_000_000;

/// Reference model together with the value function that twists it.
#[derive(Clone, Debug)]
pub struct TwistedModel {
    pub model: ModelSpec,
    pub value: ValueSource,
    pub fd_step: f64,
}

impl TwistedModel {
    pub fn new(model: ModelSpec, value: ValueSource) -> Self {
        Self {
            model,
            value,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn eps_v(&self) -> f64 {
        self.value.eps_v()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t.is_nan() || t > self.value.horizon() {
            return Err(Error::invalid(format!("t={t} beyond the value horizon")));
        }
        Ok(())
    }

    /// `Γ(v)/v` written into `out`.
    pub fn drift_correction_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.dim;
        with_scratch(d + d * d, |buf| {
            let (grad, cov) = buf.split_at_mut(d);
            self.model.covariance_into(t, x, cov);
            if cov.iter().all(|c| *c == 0.0) {
                out.fill(0.0);
                return Ok(());
            }
            let v = self.value.floored_with_gradient(t, x, self.fd_step, grad)?;
            for i in 0..d {
                let gi: f64 = (0..d).map(|j| cov[i * d + j] * grad[j]).sum();
                out[i] = gi / v;
            }
            if out.iter().any(|c| !c.is_finite()) {
                return Err(Error::NumericalFailure {
                    what: "drift correction".into(),
                    t,
                    x: x.to_vec(),
                    stencil: grad.to_vec(),
                });
            }
            Ok(())
        })
    }

    pub(crate) fn twisted_drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        with_scratch(self.model.dim, |corr| {
            self.drift_correction_into(t, x, corr)?;
            self.model.drift_at(t, x, out);
            for (o, c) in out.iter_mut().zip(corr.iter()) {
                *o += c;
            }
            Ok(())
        })
    }

    /// Proposal rate `λ(t,x) / max(v(t,x), eps_v)`.
    pub fn twisted_envelope(&self, t: f64, x: &[f64]) -> f64 {
        let rate = self.model.intensity_at(t, x);
        if rate == 0.0 {
            return 0.0;
        }
        rate / self.value.floored(t, x)
    }

    /// Probability `v(t, x+q)` of keeping a proposed jump.
    pub fn jump_acceptance(&self, t: f64, x: &[f64], q: &[f64]) -> Result<f64> {
        let p = with_scratch(x.len(), |y| {
            for ((yi, a), b) in y.iter_mut().zip(x).zip(q) {
                *yi = a + b;
            }
            self.value.value(t, y)
        });
        if !(0.0..=1.0 + 1e-12).contains(&p) {
            return Err(Error::InvariantViolation(format!(
                "jump acceptance probability {p} outside [0,1] at t={t}, x={x:?}, q={q:?}"
            )));
        }
        Ok(p.min(1.0))
    }

    /// Intensity of accepted twisted jumps, `λ ∫ v(t,x+q)/v(t,x) ρ(dq)`.
    pub fn twisted_jump_rate(&self, t: f64, x: &[f64], opts: &GeneratorOptions) -> f64 {
        let Some(jump) = &self.model.jump else {
            return 0.0;
        };
        let rate = (jump.intensity)(t, x);
        let v = self.value.floored(t, x);
        let mut y = vec![0.0; x.len()];
        rate * jump.law.expectation(t, x, opts, |q| {
            for i in 0..y.len() {
                y[i] = x[i] + q[i];
            }
            self.value.value(t, &y) / v
        })
    }
}

/// `Γ(v)(t,x) = σσᵀ(t,x) ∇_x v(t,x)`.
pub fn generalized_gradient(
    value: &ValueSource,
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    fd_step: f64,
) -> Result<Vec<f64>> {
    if t.is_nan() || t > value.horizon() {
        return Err(Error::invalid(format!("t={t} beyond the value horizon")));
    }
    let d = model.dim;
    let cov = model.covariance_at(t, x);
    if cov.iter().all(|c| *c == 0.0) {
        return Ok(vec![0.0; d]);
    }
    let mut grad = vec![0.0; d];
    value.gradient(t, x, fd_step, &mut grad)?;
    Ok((0..d)
        .map(|i| (0..d).map(|j| cov[i * d + j] * grad[j]).sum())
        .collect())
}

/// `b*(t,x) = b(t,x) + Γ(v)(t,x) / max(v(t,x), eps_v)`.
pub fn twisted_drift(twisted: &TwistedModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    twisted.check_time(t)?;
    let mut out = vec![0.0; twisted.model.dim];
    twisted.twisted_drift_into(t, x, &mut out)?;
    Ok(out)
}

/// One twisted jump proposal from `(t, x)`: draws `q ~ ρ` and keeps it with
/// probability `v(t, x+q)`. Proposals arrive at [`TwistedModel::twisted_envelope`].
pub fn twisted_jump_proposal<R: Rng + ?Sized>(
    twisted: &TwistedModel,
    t: f64,
    x: &[f64],
    rng: &mut R,
) -> Result<Option<Vec<f64>>> {
    twisted.check_time(t)?;
    let jump = twisted
        .model
        .jump
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no jumps"))?;
    let mut q = vec![0.0; twisted.model.dim];
    jump.law.sample(t, x, rng, &mut q);
    let p = twisted.jump_acceptance(t, x, &q)?;
    let keep = p >= 1.0 || rng.random::<f64>() < p;
    Ok(keep.then_some(q))
}

/// Draw from `ν(dx) ∝ v(0,x) μ(dx)` by rejection from `μ`.
pub fn sample_initial_twisted<R: Rng + ?Sized>(
    twisted: &TwistedModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = vec![0.0; twisted.model.dim];
    sample_initial_into(twisted, rng, &mut x)?;
    Ok(x)
}

fn sample_initial_into<R: Rng + ?Sized>(
    twisted: &TwistedModel,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    if let Some(x0) = twisted.model.initial.point() {
        out.copy_from_slice(x0);
        return Ok(());
    }
    for _ in 0..MAX_INITIAL_PROPOSALS {
        twisted.model.initial.sample(rng, out);
        let p = twisted.value.value(0.0, out);
        if !(0.0..=1.0 + 1e-12).contains(&p) {
            return Err(Error::InvariantViolation(format!(
                "initial acceptance probability {p} outside [0,1] at x={out:?}"
            )));
        }
        if p >= 1.0 || rng.random::<f64>() < p {
            return Ok(());
        }
    }
    Err(Error::DegenerateTwist(format!(
        "no initial state accepted in {MAX_INITIAL_PROPOSALS} proposals"
    )))
}

/// The law `Q*` as simulation dynamics. `uncorrected_drift` keeps the
/// reference drift `b` (a deliberately wrong sampler used to test detection).
pub struct TwistedDynamics<'a> {
    pub twisted: &'a TwistedModel,
    pub uncorrected_drift: bool,
}

impl<'a> TwistedDynamics<'a> {
    pub fn new(twisted: &'a TwistedModel) -> Self {
        Self {
            twisted,
            uncorrected_drift: false,
        }
    }
}

impl Dynamics for TwistedDynamics<'_> {
    fn model(&self) -> &ModelSpec {
        &self.twisted.model
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if self.uncorrected_drift {
            self.twisted.model.drift_at(t, x, out);
            Ok(())
        } else {
            self.twisted.twisted_drift_into(t, x, out)
        }
    }

    fn initial_state(&self, rng: &mut PathRng, out: &mut [f64]) -> Result<()> {
        sample_initial_into(self.twisted, rng, out)
    }

    fn jump_envelope(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.twisted.twisted_envelope(t, x))
    }

    fn jump_acceptance(&self, t: f64, x: &[f64], q: &[f64]) -> Result<f64> {
        self.twisted.jump_acceptance(t, x, q)
    }
}

/// Simulates paths directly under `Q*`.
pub fn simulate_twisted(
    twisted: &TwistedModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<PathBundle> {
    collect_bundle(&TwistedDynamics::new(twisted), grid, n_paths, seed)
}

/// CSV `t,x_1..x_d,bstar_1..bstar_d` of the twisted drift on the given points.
pub fn write_drift_field<W: Write>(
    twisted: &TwistedModel,
    times: &[f64],
    points: &[Vec<f64>],
    mut w: W,
) -> Result<()> {
    let d = twisted.model.dim;
    let io = |e: std::io::Error| Error::Io {
        path: "drift field".into(),
        source: e,
    };
    let mut header = String::from("t");
    for i in 1..=d {
        header.push_str(&format!(",x_{i}"));
    }
    for i in 1..=d {
        header.push_str(&format!(",bstar_{i}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for &t in times {
        for x in points {
            let b = twisted_drift(twisted, t, x)?;
            let mut row = fmt_f64(t);
            for v in x.iter().chain(&b) {
                row.push(',');
                row.push_str(&fmt_f64(*v));
            }
            writeln!(w, "{row}").map_err(io)?;
        }
    }
    Ok(())
}
