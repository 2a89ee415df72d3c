//! Entropic problems `inf_Q F(E_Q[φ]) + H(Q|P)` with convex `F`, solved by
//! the damped fixed point `c ← (1−θ)c + θ F′(E_{Q*_c}[φ])` where `Q*_c` is
//! the exponential twist with cost `c φ`.
//!
//! The reference ensemble is simulated once and reweighted at every
//! iteration, so the map `c ↦ E_{Q*_c}[φ]` is deterministic given the seed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::girsanov::{
    normalize_weights, reference_ensemble, variational_report, weighted_expectation, EntropyReport,
    WeightedEnsemble,
};
use crate::model::{CostSpec, ModelSpec, TimeGrid};
use crate::path::SeedSpec;
use crate::report::{fmt_f64, Table};
use crate::stats::Estimate;

pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct MeanFieldProblem {
    pub f: RealFn,
    pub f_prime: RealFn,
    /// `F″`, used only to bound the fixed-point residual.
    pub f_second: Option<RealFn>,
    pub cost: CostSpec,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Starting multiplier.
    pub c0: f64,
}

impl std::fmt::Debug for MeanFieldProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeanFieldProblem")
            .field("damping", &self.damping)
            .field("tol", &self.tol)
            .field("max_iter", &self.max_iter)
            .field("c0", &self.c0)
            .finish_non_exhaustive()
    }
}

impl MeanFieldProblem {
    pub fn new(f: RealFn, f_prime: RealFn, cost: CostSpec) -> Self {
        Self {
            f,
            f_prime,
            f_second: None,
            cost,
            damping: 0.5,
            tol: 1e-3,
            max_iter: 100,
            c0: 0.0,
        }
    }

    /// `F(m) = ½ m²`.
    pub fn half_square(cost: CostSpec) -> Self {
        let mut p = Self::new(Arc::new(|m| 0.5 * m * m), Arc::new(|m| m), cost);
        p.f_second = Some(Arc::new(|_| 1.0));
        p
    }

    /// `F(m) = a m`.
    pub fn linear(a: f64, cost: CostSpec) -> Self {
        let mut p = Self::new(Arc::new(move |m| a * m), Arc::new(move |_| a), cost);
        p.f_second = Some(Arc::new(|_| 0.0));
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid(format!(
                "damping {} outside (0,1]",
                self.damping
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if !(self.c0 >= 0.0) {
            return Err(Error::invalid("starting multiplier must be >= 0"));
        }
        Ok(())
    }
}

/// One row of the iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub c: f64,
    pub m: Estimate,
    /// Plug-in `F(m) + H`.
    pub objective: f64,
    pub entropy: f64,
}

/// The twist at multiplier `c` applied to precomputed path costs `phi`.
#[derive(Debug, Clone)]
pub struct LinearizedTwist {
    pub c: f64,
    pub ensemble: WeightedEnsemble,
    pub m: Estimate,
    pub report: EntropyReport,
}

/// Reweights the costs `phi` by `e^{−cφ}`.
pub fn twist_costs(phi: &[f64], c: f64) -> Result<LinearizedTwist> {
    if !(c >= 0.0) {
        return Err(Error::invalid(format!("multiplier c={c} must be >= 0")));
    }
    let scaled: Vec<f64> = phi.iter().map(|p| c * p).collect();
    let ensemble = normalize_weights(&scaled)
        .map_err(|e| Error::DegenerateEnsemble(format!("at c={c}: {e}")))?;
    let m = weighted_expectation(&ensemble, phi)?;
    let report = variational_report(&ensemble)?;
    Ok(LinearizedTwist {
        c,
        ensemble,
        m,
        report,
    })
}

/// Simulates reference costs and twists them at multiplier `c`.
pub fn linearized_twist(
    problem: &MeanFieldProblem,
    c: f64,
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<LinearizedTwist> {
    let phi = reference_costs(problem, model, grid, n_paths, seed)?;
    twist_costs(&phi, c)
}

fn reference_costs(
    problem: &MeanFieldProblem,
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<Vec<f64>> {
    let (ensemble, _) = reference_ensemble(model, &problem.cost, grid, n_paths, seed, |_| ())?;
    Ok(ensemble.costs)
}

/// Outcome of [`fixed_point_solve`].
#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    pub c_star: f64,
    pub m_star: Estimate,
    /// `SE(m*) · sup|F″|` over the trace, when `F″` is known.
    pub c_stderr: Option<f64>,
    pub report: EntropyReport,
    pub trace: Vec<TraceEntry>,
}

/// Damped fixed-point iteration on common reference paths.
pub fn fixed_point_solve(
    problem: &MeanFieldProblem,
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
) -> Result<MeanFieldSolution> {
    problem.validate()?;
    let phi = reference_costs(problem, model, grid, n_paths, seed)?;
    solve_on_costs(problem, &phi)
}

/// [`fixed_point_solve`] on given reference costs.
pub fn solve_on_costs(problem: &MeanFieldProblem, phi: &[f64]) -> Result<MeanFieldSolution> {
    problem.validate()?;
    let theta = problem.damping;
    let mut c = problem.c0;
    let mut trace = Vec::new();
    let mut last_step = f64::INFINITY;
    for iter in 0..problem.max_iter {
        let tw = twist_costs(phi, c)?;
        let entropy = tw.report.entropy.value;
        trace.push(TraceEntry {
            iter,
            c,
            m: tw.m,
            objective: (problem.f)(tw.m.value) + entropy,
            entropy,
        });
        let target = (problem.f_prime)(tw.m.value);
        if !target.is_finite() {
            return Err(Error::invalid(format!("F'({}) is not finite", tw.m.value)));
        }
        let next = (1.0 - theta) * c + theta * target;
        if next < 0.0 {
            return Err(Error::invalid(format!(
                "iteration {iter} produced a negative multiplier {next}"
            )));
        }
        last_step = (next - c).abs();
        c = next;
        if last_step < problem.tol {
            let tw = twist_costs(phi, c)?;
            let c_stderr = problem.f_second.as_ref().map(|f2| {
                let curvature = trace
                    .iter()
                    .map(|e| f2(e.m.value).abs())
                    .chain(std::iter::once(f2(tw.m.value).abs()))
                    .fold(0.0, f64::max);
                curvature * tw.m.stderr
            });
            trace.push(TraceEntry {
                iter: iter + 1,
                c,
                m: tw.m,
                objective: (problem.f)(tw.m.value) + tw.report.entropy.value,
                entropy: tw.report.entropy.value,
            });
            return Ok(MeanFieldSolution {
                c_star: c,
                m_star: tw.m,
                c_stderr,
                report: tw.report,
                trace,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: problem.max_iter,
        last_step,
        trace,
    })
}

pub fn trace_table(trace: &[TraceEntry]) -> Table {
    let mut t = Table::new(["iter", "c", "m", "objective", "entropy"]);
    for e in trace {
        t.push(vec![
            e.iter.to_string(),
            fmt_f64(e.c),
            fmt_f64(e.m.value),
            fmt_f64(e.objective),
            fmt_f64(e.entropy),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_phi(n: usize) -> Vec<f64> {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let (e, _) = reference_ensemble(
            &model,
            &CostSpec::quadratic_terminal(0.5),
            &grid,
            n,
            SeedSpec::new(11, 0),
            |_| (),
        )
        .unwrap();
        e.costs
    }

    #[test]
    fn zero_multiplier_is_reference_mean() {
        let phi = gaussian_phi(1000);
        let tw = twist_costs(&phi, 0.0).unwrap();
        assert_eq!(tw.m.value, crate::stats::mean(&phi));
        assert_eq!(tw.report.entropy.value, 0.0);
    }

    #[test]
    fn negative_multiplier_rejected() {
        assert!(twist_costs(&[1.0], -0.1).is_err());
    }

    #[test]
    fn linear_objective_converges_immediately() {
        let phi = gaussian_phi(1000);
        let mut p = MeanFieldProblem::linear(1.0, CostSpec::quadratic_terminal(0.5));
        p.damping = 1.0;
        let s = solve_on_costs(&p, &phi).unwrap();
        assert_eq!(s.c_star, 1.0);
        assert_eq!(s.trace.len(), 3);
    }

    #[test]
    fn flat_objective_keeps_reference() {
        let phi = gaussian_phi(500);
        let p = MeanFieldProblem::linear(0.0, CostSpec::quadratic_terminal(0.5));
        let s = solve_on_costs(&p, &phi).unwrap();
        assert_eq!(s.c_star, 0.0);
        assert_eq!(s.report.entropy.value, 0.0);
    }

    #[test]
    fn half_square_root() {
        let phi = gaussian_phi(40_000);
        let p = MeanFieldProblem::half_square(CostSpec::quadratic_terminal(0.5));
        let s = solve_on_costs(&p, &phi).unwrap();
        let oracle = (3f64.sqrt() - 1.0) / 2.0;
        let se = s.c_stderr.unwrap();
        assert!(
            (s.c_star - oracle).abs() < (3.0 * se).max(1e-3) + 2.0 * p.tol,
            "{} {}",
            s.c_star,
            se
        );
        assert!(s.trace.len() <= 30);
        // The linearized objective matches −log Ẑ(c*).
        let r = &s.report;
        assert!((r.minus_log_z.value - (r.mean_phi.value + r.entropy.value)).abs() < 1e-10);
    }

    #[test]
    fn non_convergence_keeps_trace() {
        let phi = gaussian_phi(200);
        let mut p = MeanFieldProblem::half_square(CostSpec::quadratic_terminal(0.5));
        p.max_iter = 2;
        p.tol = 1e-12;
        match solve_on_costs(&p, &phi) {
            Err(Error::NotConverged {
                iterations, trace, ..
            }) => {
                assert_eq!(iterations, 2);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trace_csv_columns() {
        let csv = trace_table(&[]).to_csv();
        assert_eq!(csv, "iter,c,m,objective,entropy\n");
    }
}
