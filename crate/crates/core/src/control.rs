//! Feedback controls and the control cost
//!
//! ```text
//! J(u) = E[ ∫ f dt + ½ ∫ |u|² dt + g(X_T) ],   dX = (b + σu) dt + σ dW,
//! ```
//!
//! whose minimum `−log E_P[e^{−φ}]` is attained by `u*` with `σ u* = Γ(v)/v`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::girsanov::{reference_ensemble, variational_report};
use crate::model::{with_scratch, CostSpec, ModelSpec, TimeGrid, VectorField};
use crate::path::{simulate_map, ReferenceDynamics, SeedSpec};
use crate::report::{fmt_f64, Table};
use crate::stats::{mean_stderr, Estimate, KahanSum};
use crate::twist::TwistedModel;

/// Condition number beyond which `σ` is treated as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// Tolerated residual of `σ u* = Γ(v)/v`.
const SOLVE_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ValueSurface,
    Analytic,
    UserSupplied,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::ValueSurface => "from-value-surface",
            Provenance::Analytic => "analytic",
            Provenance::UserSupplied => "user-supplied",
        }
    }
}

/// A feedback `u(t, x) ∈ R^d`.
#[derive(Clone)]
pub struct ControlPolicy {
    pub name: String,
    pub feedback: VectorField,
    pub provenance: Provenance,
    /// Marks the policy built from the value function.
    pub optimal: bool,
}

impl std::fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPolicy")
            .field("name", &self.name)
            .field("provenance", &self.provenance)
            .field("optimal", &self.optimal)
            .finish_non_exhaustive()
    }
}

impl ControlPolicy {
    pub fn user(name: impl Into<String>, feedback: VectorField) -> Self {
        Self {
            name: name.into(),
            feedback,
            provenance: Provenance::UserSupplied,
            optimal: false,
        }
    }

    /// `u ≡ 0`.
    pub fn zero() -> Self {
        Self::user("zero", Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)))
    }

    /// `u*` of `twisted`. Points where it cannot be evaluated yield NaN, which
    /// makes the controlled path diverge and be excluded.
    pub fn optimal(twisted: &TwistedModel) -> Self {
        let tw = twisted.clone();
        Self {
            name: "optimal".into(),
            feedback: Arc::new(
                move |t, x, out: &mut [f64]| match optimal_control(&tw, t, x) {
                    Ok(u) => out.copy_from_slice(&u),
                    Err(_) => out.fill(f64::NAN),
                },
            ),
            provenance: if twisted.value.is_surface() {
                Provenance::ValueSurface
            } else {
                Provenance::Analytic
            },
            optimal: true,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; x.len()];
        (self.feedback)(t, x, &mut u);
        u
    }
}

/// Solves `σ(t,x) u = Γ(v)(t,x)/v(t,x)`.
pub fn optimal_control(twisted: &TwistedModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let model = &twisted.model;
    let d = model.dim;
    if t.is_nan() || t > twisted.value.horizon() {
        return Err(Error::invalid(format!("t={t} beyond the value horizon")));
    }
    let mut rhs = vec![0.0; d];
    twisted.drift_correction_into(t, x, &mut rhs)?;
    let mut sigma = vec![0.0; d * d];
    model.diffusion_at(t, x, &mut sigma);

    if let Some(u) = solve_nonsingular(&sigma, &rhs, d) {
        let residual = (0..d)
            .map(|i| ((0..d).map(|j| sigma[i * d + j] * u[j]).sum::<f64>() - rhs[i]).abs())
            .fold(0.0, f64::max);
        let scale = 1.0 + rhs.iter().map(|r| r.abs()).fold(0.0, f64::max);
        if residual > SOLVE_RESIDUAL * scale {
            return Err(Error::InternalConsistency(format!(
                "control solve residual {residual:e} at t={t}, x={x:?}"
            )));
        }
        return Ok(u);
    }
    if twisted.value.is_surface() {
        return Err(Error::UnsupportedModel(format!(
            "diffusion matrix is singular at t={t}, x={x:?} and no analytic gradient is available"
        )));
    }
    // u = σᵀ ∇log v solves the system for any σ.
    let mut grad = vec![0.0; d];
    twisted.value.gradient(t, x, twisted.fd_step, &mut grad)?;
    let v = twisted.value.floored(t, x);
    Ok((0..d)
        .map(|i| (0..d).map(|j| sigma[j * d + i] * grad[j]).sum::<f64>() / v)
        .collect())
}

fn solve_nonsingular(sigma: &[f64], rhs: &[f64], d: usize) -> Option<Vec<f64>> {
    if d == 1 {
        return (sigma[0] != 0.0).then(|| vec![rhs[0] / sigma[0]]);
    }
    let m = DMatrix::from_row_slice(d, d, sigma);
    let sv = m.clone().singular_values();
    let (max, min) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), s| (a.max(*s), b.min(*s)));
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return None;
    }
    m.full_piv_lu()
        .solve(&DVector::from_column_slice(rhs))
        .map(|u| u.iter().copied().collect())
}

/// Control cost of one policy.
#[derive(Debug, Clone)]
pub struct ControlCost {
    pub j: Estimate,
    /// Per-path costs; `None` for excluded paths.
    pub per_path: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Monte Carlo estimate of `J(u)` on a Brownian-driven model.
pub fn cost_functional(
    model: &ModelSpec,
    cost: &CostSpec,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<ControlCost> {
    if model.jump.is_some() {
        return Err(Error::UnsupportedModel(
            "control costs are defined for diffusions without jumps".into(),
        ));
    }
    let d = model.dim;
    let base = model.clone();
    let feedback = policy.feedback.clone();
    let drift: VectorField = Arc::new(move |t, x, out: &mut [f64]| {
        with_scratch(d + d * d, |buf| {
            let (u, s) = buf.split_at_mut(d);
            feedback(t, x, u);
            base.diffusion_at(t, x, s);
            base.drift_at(t, x, out);
            for i in 0..d {
                out[i] += (0..d).map(|j| s[i * d + j] * u[j]).sum::<f64>();
            }
        })
    });
    let dynamics = ReferenceDynamics {
        model,
        drift_override: Some(drift),
    };
    let dt = grid.dt();
    let per_path: Vec<Option<f64>> = simulate_map(&dynamics, grid, n_paths, seed, |_, p| {
        if p.diverged {
            return None;
        }
        let mut acc = KahanSum::new();
        let mut u = vec![0.0; d];
        for k in 0..grid.n_steps() {
            let t = grid.time(k);
            let x = p.state(k);
            (policy.feedback)(t, x, &mut u);
            let energy: f64 = u.iter().map(|c| c * c).sum();
            acc.add((cost.running_at(t, x) + 0.5 * energy) * dt);
        }
        let j = acc.total() + cost.terminal_at(p.terminal());
        j.is_finite().then_some(j)
    })?;
    let kept: Vec<f64> = per_path.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::DegenerateEnsemble(format!(
            "every controlled path of policy {} was excluded",
            policy.name
        )));
    }
    Ok(ControlCost {
        j: mean_stderr(&kept),
        excluded: n_paths - kept.len(),
        per_path,
    })
}

/// One line of a control comparison.
#[derive(Debug, Clone)]
pub struct RankedPolicy {
    pub name: String,
    pub j: Estimate,
    pub excluded: usize,
    pub gap_to_minus_log_z: f64,
    /// Paired difference `J(u) − J(u*)` under common random numbers.
    pub vs_optimal: Option<Estimate>,
    /// Lower bound `J(u) + 3 SE ≥ −log Ẑ` violated.
    pub below_bound: bool,
    /// Beats `u*` by more than three paired standard errors.
    pub red_flag: bool,
}

#[derive(Debug, Clone)]
pub struct ControlRanking {
    pub minus_log_z: Estimate,
    /// Sorted by increasing `J`.
    pub policies: Vec<RankedPolicy>,
}

impl ControlRanking {
    pub fn red_flags(&self) -> impl Iterator<Item = &RankedPolicy> {
        self.policies.iter().filter(|p| p.red_flag || p.below_bound)
    }

    pub fn get(&self, name: &str) -> Option<&RankedPolicy> {
        self.policies.iter().find(|p| p.name == name)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["policy_name", "J", "stderr", "gap_to_minus_logZ"]);
        for p in &self.policies {
            t.push(vec![
                p.name.clone(),
                fmt_f64(p.j.value),
                fmt_f64(p.j.stderr),
                fmt_f64(p.gap_to_minus_log_z),
            ]);
        }
        t
    }
}

/// Evaluates every policy on the same random numbers and ranks them.
pub fn compare_controls(
    model: &ModelSpec,
    cost: &CostSpec,
    policies: &[ControlPolicy],
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<ControlRanking> {
    if policies.is_empty() {
        return Err(Error::invalid("no policies to compare"));
    }
    let (ensemble, _) = reference_ensemble(model, cost, grid, n_paths, seed, |_| ())?;
    let minus_log_z = variational_report(&ensemble)?.minus_log_z;
    let costs = policies
        .iter()
        .map(|p| cost_functional(model, cost, p, grid, n_paths, seed))
        .collect::<Result<Vec<_>>>()?;
    let optimal = policies.iter().position(|p| p.optimal);

    let mut ranked: Vec<RankedPolicy> = policies
        .iter()
        .zip(&costs)
        .enumerate()
        .map(|(i, (p, c))| {
            let vs_optimal = optimal
                .filter(|&o| o != i)
                .and_then(|o| paired_difference(&c.per_path, &costs[o].per_path));
            let red_flag = vs_optimal.is_some_and(|e| e.value < -3.0 * e.stderr);
            let combined = (c.j.stderr.powi(2) + minus_log_z.stderr.powi(2)).sqrt();
            RankedPolicy {
                name: p.name.clone(),
                j: c.j,
                excluded: c.excluded,
                gap_to_minus_log_z: c.j.value - minus_log_z.value,
                vs_optimal,
                below_bound: c.j.value + 3.0 * combined < minus_log_z.value,
                red_flag,
            }
        })
        .collect();
    ranked.sort_by(|a, b| a.j.value.total_cmp(&b.j.value));
    Ok(ControlRanking {
        minus_log_z,
        policies: ranked,
    })
}

fn paired_difference(a: &[Option<f64>], b: &[Option<f64>]) -> Option<Estimate> {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some((*x)? - (*y)?))
        .collect();
    (diffs.len() >= 2).then(|| mean_stderr(&diffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{GaussianQuadraticValue, UnitValue, ValueSource};

    fn gaussian(sigma: f64) -> TwistedModel {
        TwistedModel::new(
            ModelSpec::brownian(sigma, vec![0.0]),
            ValueSource::analytic(GaussianQuadraticValue {
                gamma: 0.5,
                sigma: 1.0,
                horizon: 1.0,
            }),
        )
    }

    #[test]
    fn null_twist_control_is_zero() {
        let tw = TwistedModel::new(
            ModelSpec::brownian(1.0, vec![0.0, 0.0]),
            ValueSource::analytic(UnitValue { horizon: 1.0 }),
        );
        assert_eq!(
            optimal_control(&tw, 0.3, &[1.0, -2.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn gaussian_control_at_one() {
        let u = optimal_control(&gaussian(1.0), 0.0, &[1.0]).unwrap();
        assert!((u[0] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn scaled_diffusion_scales_control() {
        // σ = 2: σ u = σσᵀ∇v/v  ⇒  u = σ ∇log v.
        let u = optimal_control(&gaussian(2.0), 0.0, &[1.0]).unwrap();
        assert!((u[0] - 2.0 * -0.5).abs() < 1e-14);
    }

    #[test]
    fn two_dimensional_solve() {
        let model = ModelSpec::brownian(2.0, vec![0.0, 0.0]);
        let tw = TwistedModel::new(
            model,
            ValueSource::analytic(GaussianQuadraticValue {
                gamma: 0.5,
                sigma: 2.0,
                horizon: 1.0,
            }),
        );
        let x = [0.5, -1.0];
        let u = optimal_control(&tw, 0.2, &x).unwrap();
        // ∇log v = −2γx/(1+2γσ²τ)
        let s = 1.0 + 4.0 * 0.8;
        for i in 0..2 {
            assert!((u[i] - 2.0 * (-x[i] / s)).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_diffusion_with_analytic_gradient() {
        let model = ModelSpec::brownian(0.0, vec![0.0]);
        let tw = TwistedModel::new(
            model,
            ValueSource::analytic(GaussianQuadraticValue {
                gamma: 0.5,
                sigma: 1.0,
                horizon: 1.0,
            }),
        );
        assert_eq!(optimal_control(&tw, 0.0, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn jump_models_are_rejected() {
        let model = ModelSpec::poisson_unit(1.0, 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let r = cost_functional(
            &model,
            &CostSpec::zero(),
            &ControlPolicy::zero(),
            &grid,
            10,
            SeedSpec::new(1, 0),
        );
        assert!(matches!(r, Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn null_cost_zero_control_is_zero() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let c = cost_functional(
            &model,
            &CostSpec::zero(),
            &ControlPolicy::zero(),
            &grid,
            50,
            SeedSpec::new(1, 0),
        )
        .unwrap();
        assert_eq!(c.j.value, 0.0);
    }

    #[test]
    fn nan_feedback_excludes_paths() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bad = ControlPolicy::user(
            "bad",
            Arc::new(|_, x: &[f64], out: &mut [f64]| {
                out[0] = if x[0] > 0.5 { f64::NAN } else { 0.0 }
            }),
        );
        let c = cost_functional(
            &model,
            &CostSpec::quadratic_terminal(0.5),
            &bad,
            &grid,
            400,
            SeedSpec::new(2, 0),
        )
        .unwrap();
        assert!(c.excluded > 0 && c.excluded < 400);
    }

    #[test]
    fn identical_policies_tie_under_common_seeds() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let mut other = ControlPolicy::zero();
        other.name = "zero_again".into();
        let r = compare_controls(
            &model,
            &CostSpec::quadratic_terminal(0.5),
            &[ControlPolicy::zero(), other],
            &grid,
            500,
            SeedSpec::new(4, 0),
        )
        .unwrap();
        assert_eq!(r.policies[0].j, r.policies[1].j);
    }

    #[test]
    fn optimal_beats_zero_on_gaussian() {
        let tw = gaussian(1.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let r = compare_controls(
            &tw.model,
            &CostSpec::quadratic_terminal(0.5),
            &[ControlPolicy::optimal(&tw), ControlPolicy::zero()],
            &grid,
            4_000,
            SeedSpec::new(5, 0),
        )
        .unwrap();
        assert_eq!(r.policies[0].name, "optimal");
        assert!(r.red_flags().next().is_none());
        let csv = r.table().to_csv();
        assert!(csv.starts_with("policy_name,J,stderr,gap_to_minus_logZ\n"));
    }

    #[test]
    fn singleton_ranking() {
        let tw = gaussian(1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let r = compare_controls(
            &tw.model,
            &CostSpec::quadratic_terminal(0.5),
            &[ControlPolicy::optimal(&tw)],
            &grid,
            200,
            SeedSpec::new(6, 0),
        )
        .unwrap();
        assert_eq!(r.policies.len(), 1);
    }
}
