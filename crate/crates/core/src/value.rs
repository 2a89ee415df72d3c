//! Sources of the value function used by the twist: an estimated surface or
//! a closed form with an analytic gradient.

use std::sync::Arc;

use crate::error::Result;
use crate::feynman_kac::{ValueSurface, EPS_V};
use crate::model::TestFunction;

/// Closed-form value function.
pub trait AnalyticValue: Send + Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn horizon(&self) -> f64;

    /// `v(t,x)` with `∇v` written into `out`.
    fn value_and_gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> f64 {
        self.gradient(t, x, out);
        self.value(t, x)
    }
}

#[derive(Clone)]
pub enum ValueSource {
    Surface(Arc<ValueSurface>),
    Analytic(Arc<dyn AnalyticValue>),
}

impl std::fmt::Debug for ValueSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValueSource::Surface(s) => write!(f, "Surface({} time nodes)", s.time_nodes.len()),
            ValueSource::Analytic(_) => f.write_str("Analytic(..)"),
        }
    }
}

impl From<ValueSurface> for ValueSource {
    fn from(s: ValueSurface) -> Self {
        ValueSource::Surface(Arc::new(s))
    }
}

impl ValueSource {
    pub fn analytic(v: impl AnalyticValue + 'static) -> Self {
        ValueSource::Analytic(Arc::new(v))
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ValueSource::Surface(s) => s.interpolate(t, x),
            ValueSource::Analytic(a) => a.value(t, x),
        }
    }

    /// `max(v, eps_v)`.
    pub fn floored(&self, t: f64, x: &[f64]) -> f64 {
        self.value(t, x).max(self.eps_v())
    }

    pub fn eps_v(&self) -> f64 {
        match self {
            ValueSource::Surface(s) => s.eps_v,
            ValueSource::Analytic(_) => EPS_V,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ValueSource::Surface(s) => s.horizon(),
            ValueSource::Analytic(a) => a.horizon(),
        }
    }

    /// `∇_x v`: analytic, or central differences on the surface.
    pub fn gradient(&self, t: f64, x: &[f64], fd_step: f64, out: &mut [f64]) -> Result<()> {
        self.floored_with_gradient(t, x, fd_step, out).map(|_| ())
    }

    /// `max(v, eps_v)` together with `∇_x v`.
    pub fn floored_with_gradient(
        &self,
        t: f64,
        x: &[f64],
        fd_step: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        match self {
            ValueSource::Surface(s) => {
                s.gradient(t, x, fd_step, out)?;
                Ok(self.floored(t, x))
            }
            ValueSource::Analytic(a) => {
                let v = a.value_and_gradient(t, x, out);
                if out.iter().all(|g| g.is_finite()) {
                    Ok(v.max(EPS_V))
                } else {
                    Err(crate::error::Error::NumericalFailure {
                        what: "analytic gradient".into(),
                        t,
                        x: x.to_vec(),
                        stencil: out.to_vec(),
                    })
                }
            }
        }
    }

    pub fn is_surface(&self) -> bool {
        matches!(self, ValueSource::Surface(_))
    }
}

impl TestFunction for ValueSource {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        ValueSource::value(self, t, x)
    }

    fn time_domain(&self) -> Option<(f64, f64)> {
        Some((0.0, self.horizon()))
    }
}

/// `v ≡ 1` (no cost).
#[derive(Debug, Clone, Copy)]
pub struct UnitValue {
    pub horizon: f64,
}

impl AnalyticValue for UnitValue {
    fn value(&self, _t: f64, _x: &[f64]) -> f64 {
        1.0
    }
    fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0)
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Brownian motion `σW` with `g(x) = γ|x|²`, `f = 0`:
/// `v(t,x) = (1+2γσ²τ)^{-d/2} exp(−γ|x|²/(1+2γσ²τ))`, `τ = T − t`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianQuadraticValue {
    pub gamma: f64,
    pub sigma: f64,
    pub horizon: f64,
}

impl GaussianQuadraticValue {
    fn scale(&self, t: f64) -> f64 {
        1.0 + 2.0 * self.gamma * self.sigma * self.sigma * (self.horizon - t)
    }
}

impl AnalyticValue for GaussianQuadraticValue {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        let s = self.scale(t);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        s.sqrt().powi(-(x.len() as i32)) * (-self.gamma * r2 / s).exp()
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.value_and_gradient(t, x, out);
    }
    fn value_and_gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> f64 {
        let s = self.scale(t);
        let v = self.value(t, x);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -2.0 * self.gamma * xi / s * v;
        }
        v
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Poisson process with rate `λ` and unit jumps, `g(x) = c x`, `f = 0`:
/// `v(t,x) = exp(−c x − λτ(1 − e^{−c}))`.
#[derive(Debug, Clone, Copy)]
pub struct PoissonLinearValue {
    pub rate: f64,
    pub coeff: f64,
    pub horizon: f64,
}

impl AnalyticValue for PoissonLinearValue {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        let tau = self.horizon - t;
        (-self.coeff * x[0] - self.rate * tau * (1.0 - (-self.coeff).exp())).exp()
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = -self.coeff * self.value(t, x);
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
}
