//! Closed-form benchmark problems and their oracle values.

use crate::model::{CostSpec, ModelSpec};
use crate::value::{GaussianQuadraticValue, PoissonLinearValue, ValueSource};

/// Brownian motion `σW` from `x0 = 0` with terminal cost `γ|x|²`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianQuadratic {
    pub gamma: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub dim: usize,
}

impl Default for GaussianQuadratic {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            sigma: 1.0,
            horizon: 1.0,
            dim: 1,
        }
    }
}

impl GaussianQuadratic {
    pub fn model(&self) -> ModelSpec {
        ModelSpec::brownian(self.sigma, vec![0.0; self.dim])
    }

    pub fn cost(&self) -> CostSpec {
        CostSpec::quadratic_terminal(self.gamma)
    }

    pub fn value(&self) -> ValueSource {
        ValueSource::analytic(GaussianQuadraticValue {
            gamma: self.gamma,
            sigma: self.sigma,
            horizon: self.horizon,
        })
    }

    fn s(&self) -> f64 {
        self.sigma * self.sigma * self.horizon
    }

    fn k(&self) -> f64 {
        1.0 + 2.0 * self.gamma * self.s()
    }

    /// `Ẑ = E[e^{−γ|X_T|²}] = (1 + 2γσ²T)^{−d/2}`.
    pub fn z(&self) -> f64 {
        self.k().powf(-(self.dim as f64) / 2.0)
    }

    pub fn minus_log_z(&self) -> f64 {
        0.5 * self.dim as f64 * self.k().ln()
    }

    /// Per-coordinate variance of `X_T` under the twist.
    pub fn twisted_terminal_variance(&self) -> f64 {
        self.s() / self.k()
    }

    /// Per-coordinate variance of `X_t` under the twist.
    pub fn twisted_variance_at(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        let tau = self.horizon - t;
        let a = 2.0 * self.gamma * s2;
        // V(t) = σ²t (1 + aτ) / (1 + aT)
        s2 * t * (1.0 + a * tau) / (1.0 + a * self.horizon)
    }

    pub fn mean_phi(&self) -> f64 {
        self.gamma * self.dim as f64 * self.twisted_terminal_variance()
    }

    pub fn entropy(&self) -> f64 {
        self.minus_log_z() - self.mean_phi()
    }

    /// `J(0) = E_P[γ|X_T|²]`.
    pub fn zero_control_cost(&self) -> f64 {
        self.gamma * self.dim as f64 * self.s()
    }

    /// Multiplier solving `c = F′(E_{Q*_c}[φ])` for `F(m) = ½m²`.
    pub fn half_square_multiplier(&self) -> f64 {
        // E_{Q*_c}[φ] = dγs/(1 + 2cγs) with s = σ²T.
        let gs = self.gamma * self.s();
        let d = self.dim as f64;
        (-1.0 + (1.0 + 8.0 * d * gs * gs).sqrt()) / (4.0 * gs)
    }
}

/// Poisson process of rate `λ` with unit jumps and terminal cost `c x`.
#[derive(Debug, Clone, Copy)]
pub struct PoissonLinear {
    pub rate: f64,
    pub coeff: f64,
    pub horizon: f64,
}

impl Default for PoissonLinear {
    fn default() -> Self {
        Self {
            rate: 2.0,
            coeff: 2f64.ln(),
            horizon: 1.0,
        }
    }
}

impl PoissonLinear {
    pub fn model(&self) -> ModelSpec {
        ModelSpec::poisson_unit(self.rate, 0.0)
    }

    pub fn cost(&self) -> CostSpec {
        CostSpec::linear_terminal(self.coeff)
    }

    pub fn value(&self) -> ValueSource {
        ValueSource::analytic(PoissonLinearValue {
            rate: self.rate,
            coeff: self.coeff,
            horizon: self.horizon,
        })
    }

    /// `λ e^{−c}`.
    pub fn twisted_rate(&self) -> f64 {
        self.rate * (-self.coeff).exp()
    }

    pub fn twisted_mean_jumps(&self) -> f64 {
        self.twisted_rate() * self.horizon
    }

    /// `λT(1 − e^{−c})`.
    pub fn minus_log_z(&self) -> f64 {
        self.rate * self.horizon * (1.0 - (-self.coeff).exp())
    }
}

/// Oracle values of a named benchmark, as `(quantity, value)` pairs.
pub fn oracle(name: &str) -> Option<Vec<(&'static str, f64)>> {
    match name {
        "gaussian-quadratic" => {
            let g = GaussianQuadratic::default();
            let v = g.value();
            let v01 = v.value(0.0, &[1.0]);
            Some(vec![
                ("Z_hat", g.z()),
                ("minus_log_Z", g.minus_log_z()),
                ("mean_phi", g.mean_phi()),
                ("entropy", g.entropy()),
                ("twisted_var_XT", g.twisted_terminal_variance()),
                ("v(0,1)", v01),
                ("Gamma_v(0,1)", -0.5 * v01),
                ("bstar(0,1)", -0.5),
                ("J_optimal", g.minus_log_z()),
                ("J_zero", g.zero_control_cost()),
            ])
        }
        "poisson-linear" => {
            let p = PoissonLinear::default();
            Some(vec![
                ("twisted_rate", p.twisted_rate()),
                ("twisted_mean_jumps", p.twisted_mean_jumps()),
                ("minus_log_Z", p.minus_log_z()),
            ])
        }
        "meanfield-quadratic" => {
            let g = GaussianQuadratic::default();
            Some(vec![("c_star", g.half_square_multiplier())])
        }
        _ => None,
    }
}

pub const ORACLE_NAMES: [&str; 3] = [
    "gaussian-quadratic",
    "poisson-linear",
    "meanfield-quadratic",
];
