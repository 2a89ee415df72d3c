//! Path costs, self-normalized Girsanov weights and the entropy report.
//!
//! With raw weights `w_i = e^{−φ_i}` and `Ẑ = mean(w)`, the normalized weights
//! `D_i = w_i / Ẑ` turn reference paths into `Q*`-expectations. All weights are
//! formed in log space, `log D_i = −φ_i − log Ẑ`, so that
//!
//! ```text
//! −log Ẑ = mean(D φ) + mean(D log D)
//! ```
//!
//! holds as an algebraic identity on every ensemble.

use crate::error::{Error, Result};
use crate::feynman_kac::path_cost_from;
use crate::model::{CostSpec, ModelSpec, TimeGrid};
use crate::path::{simulate_map, Path, ReferenceDynamics, SeedSpec};
use crate::report::{fmt_f64, Table};
use crate::stats::{Estimate, KahanSum};

/// Largest admissible plug-in gap.
pub const GAP_TOLERANCE: f64 = 1e-10;

/// `φ = Σ_k f(t_k, X_k) dt + g(X_T)` with left-endpoint quadrature.
pub fn path_cost(path: &Path, cost: &CostSpec) -> f64 {
    path_cost_from(path, cost, 0.0)
}

/// Normalized weights of a set of path costs.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    /// Costs of retained paths.
    pub costs: Vec<f64>,
    /// `log D_i`.
    pub log_weights: Vec<f64>,
    /// `D_i`, with mean one.
    pub weights: Vec<f64>,
    pub log_z: f64,
    /// Smallest retained cost.
    pub floor: f64,
    /// Positions of retained paths in the original sample.
    pub retained: Vec<usize>,
    /// Paths dropped for a non-finite cost or a diverged trajectory.
    pub excluded: usize,
}

/// Builds the ensemble of finite `costs`.
pub fn normalize_weights(costs: &[f64]) -> Result<WeightedEnsemble> {
    if costs.is_empty() {
        return Err(Error::invalid("no path costs"));
    }
    if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::invalid(format!(
            "cost {} of path {i} is not finite",
            costs[i]
        )));
    }
    build(costs.to_vec(), (0..costs.len()).collect(), 0)
}

impl WeightedEnsemble {
    /// Ensemble of the finite entries of `costs` (`None` marks a diverged path).
    pub fn from_costs(costs: &[Option<f64>]) -> Result<Self> {
        let mut kept = Vec::with_capacity(costs.len());
        let mut retained = Vec::with_capacity(costs.len());
        for (i, c) in costs.iter().enumerate() {
            if let Some(c) = c.filter(|c| c.is_finite()) {
                kept.push(c);
                retained.push(i);
            }
        }
        let excluded = costs.len() - kept.len();
        if kept.is_empty() {
            return Err(Error::DegenerateEnsemble(format!(
                "all {} paths were excluded",
                costs.len()
            )));
        }
        build(kept, retained, excluded)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn z_hat(&self) -> f64 {
        self.log_z.exp()
    }

    /// Restriction of per-path `values` (indexed like the original sample) to
    /// retained paths.
    pub fn select<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.retained.iter().map(|&i| values[i]).collect()
    }
}

fn build(costs: Vec<f64>, retained: Vec<usize>, excluded: usize) -> Result<WeightedEnsemble> {
    let n = costs.len() as f64;
    let floor = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let scaled: KahanSum = costs.iter().map(|c| (floor - c).exp()).collect();
    // log Ẑ = shift − floor; keeping the two apart preserves precision when
    // costs are large.
    let shift = (scaled.total() / n).ln();
    let log_z = shift - floor;
    if !log_z.is_finite() {
        return Err(Error::DegenerateEnsemble(format!(
            "normalizer is not finite (log Z = {log_z})"
        )));
    }
    let log_weights: Vec<f64> = costs.iter().map(|c| (floor - c) - shift).collect();
    let weights: Vec<f64> = log_weights.iter().map(|l| l.exp()).collect();
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::DegenerateEnsemble("all weights underflow".into()));
    }
    Ok(WeightedEnsemble {
        costs,
        log_weights,
        weights,
        log_z,
        floor,
        retained,
        excluded,
    })
}

/// `(Σw)² / Σw²`.
pub fn effective_sample_size(ensemble: &WeightedEnsemble) -> f64 {
    ess_of(&ensemble.weights)
}

/// `(Σw)² / Σw²` of arbitrary nonnegative weights.
pub fn ess_of(weights: &[f64]) -> f64 {
    let s: f64 = crate::stats::sum(weights.iter().copied());
    let s2: f64 = crate::stats::sum(weights.iter().map(|w| w * w));
    s * s / s2
}

/// `sqrt(Σ ψ_i²) / N` for influence values `ψ_i`.
fn influence_stderr(n: usize, influence: impl Iterator<Item = f64>) -> f64 {
    crate::stats::sum(influence.map(|v| v * v)).sqrt() / n as f64
}

/// `E_{Q*}[h] ≈ mean(D h)` with the delta-method standard error of the
/// self-normalized ratio. `values` are aligned with retained paths.
pub fn weighted_expectation(ensemble: &WeightedEnsemble, values: &[f64]) -> Result<Estimate> {
    let n = ensemble.len();
    if values.len() != n {
        return Err(Error::invalid(format!(
            "{} values for an ensemble of {n} paths",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "statistic is not finite on retained path {i}"
        )));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok(Estimate::new(values[0], 0.0));
    }
    let d = &ensemble.weights;
    let est = crate::stats::sum(d.iter().zip(values).map(|(d, h)| d * h)) / n as f64;
    let se = influence_stderr(n, d.iter().zip(values).map(|(d, h)| d * (h - est)));
    Ok(Estimate::new(est, se))
}

/// Plug-in `H(Q*|P) ≈ mean(D log D)`, with `0 log 0 = 0`.
pub fn entropy_estimate(ensemble: &WeightedEnsemble) -> f64 {
    entropy_parts(ensemble).value
}

fn entropy_parts(ensemble: &WeightedEnsemble) -> Estimate {
    let n = ensemble.len();
    let terms = ensemble
        .weights
        .iter()
        .zip(&ensemble.log_weights)
        .map(|(d, l)| if *d == 0.0 { 0.0 } else { d * l });
    let h = crate::stats::sum(terms) / n as f64;
    let se = influence_stderr(
        n,
        ensemble
            .weights
            .iter()
            .zip(&ensemble.log_weights)
            .map(|(d, l)| {
                if *d == 0.0 {
                    1.0
                } else {
                    d * (l - h) - (d - 1.0)
                }
            }),
    );
    Estimate::new(h, se)
}

/// Terms of the variational formula on one ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub n_paths: usize,
    pub excluded: usize,
    pub z_hat: f64,
    pub minus_log_z: Estimate,
    pub mean_phi: Estimate,
    pub entropy: Estimate,
    /// `minus_log_z − (mean_phi + entropy)`.
    pub gap: f64,
    pub ess: f64,
}

impl EntropyReport {
    pub const HEADER: [&'static str; 7] = [
        "n_paths",
        "Z_hat",
        "minus_log_Z",
        "mean_phi",
        "entropy",
        "gap",
        "ess",
    ];

    pub fn table(&self) -> Table {
        let mut t = Table::new(Self::HEADER);
        t.push(vec![
            self.n_paths.to_string(),
            fmt_f64(self.z_hat),
            fmt_f64(self.minus_log_z.value),
            fmt_f64(self.mean_phi.value),
            fmt_f64(self.entropy.value),
            fmt_f64(self.gap),
            fmt_f64(self.ess),
        ]);
        t
    }
}

/// Fills an [`EntropyReport`]; fails if the plug-in identity is violated.
pub fn variational_report(ensemble: &WeightedEnsemble) -> Result<EntropyReport> {
    let n = ensemble.len();
    let d = &ensemble.weights;
    let excess: Vec<f64> = ensemble.costs.iter().map(|c| c - ensemble.floor).collect();
    let excess = weighted_expectation(ensemble, &excess)?;
    let mean_phi = Estimate::new(ensemble.floor + excess.value, excess.stderr);
    let entropy = entropy_parts(ensemble);
    let minus_log_z = Estimate::new(
        0.0 - ensemble.log_z,
        influence_stderr(n, d.iter().map(|d| d - 1.0)),
    );
    let gap = minus_log_z.value - (mean_phi.value + entropy.value);
    if !(gap.abs() <= GAP_TOLERANCE) {
        return Err(Error::InternalConsistency(format!(
            "plug-in variational gap {gap:e} exceeds {GAP_TOLERANCE:e}"
        )));
    }
    Ok(EntropyReport {
        n_paths: n,
        excluded: ensemble.excluded,
        z_hat: ensemble.z_hat(),
        minus_log_z,
        mean_phi,
        entropy,
        gap,
        ess: effective_sample_size(ensemble),
    })
}

/// `mean(D'(φ + log D'))` for alternative weights `D'` with mean one.
pub fn variational_objective(costs: &[f64], weights: &[f64]) -> f64 {
    let n = costs.len() as f64;
    crate::stats::sum(costs.iter().zip(weights).map(
        |(c, d)| {
            if *d == 0.0 {
                0.0
            } else {
                d * (c + d.ln())
            }
        },
    )) / n
}

/// Weights `∝ e^{−βφ}` normalized to mean one.
pub fn tempered_weights(costs: &[f64], beta: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = costs.iter().map(|c| beta * c).collect();
    Ok(normalize_weights(&scaled)?.weights)
}

/// Reference paths reduced to their costs and an observation `observe(path)`.
/// Returns the ensemble and the observations of retained paths.
pub fn reference_ensemble<T, F>(
    model: &ModelSpec,
    cost: &CostSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: SeedSpec,
    observe: F,
) -> Result<(WeightedEnsemble, Vec<T>)>
where
    T: Send,
    F: Fn(&Path) -> T + Sync + Send,
{
    let dynamics = ReferenceDynamics::new(model);
    let rows = simulate_map(&dynamics, grid, n_paths, seed, |_, p| {
        let c = (!p.diverged).then(|| path_cost(&p, cost));
        (c, observe(&p))
    })?;
    let costs: Vec<Option<f64>> = rows.iter().map(|r| r.0).collect();
    let ensemble = WeightedEnsemble::from_costs(&costs)?;
    let mut obs: Vec<Option<T>> = rows.into_iter().map(|r| Some(r.1)).collect();
    let kept = ensemble
        .retained
        .iter()
        .map(|&i| obs[i].take().expect("retained index used once"))
        .collect();
    Ok((ensemble, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialLaw, ModelSpec};
    use std::sync::Arc;

    fn constant_path(value: f64, horizon: f64, n: usize) -> Path {
        let model = ModelSpec::constant_drift(vec![0.0], 0.0, vec![value]);
        let grid = TimeGrid::new(horizon, n).unwrap();
        crate::path::simulate_path(
            &ReferenceDynamics::new(&model),
            &grid,
            SeedSpec::new(1, 0),
            0,
        )
        .unwrap()
    }

    #[test]
    fn path_cost_examples() {
        let p = constant_path(0.0, 1.0, 10);
        let unit = CostSpec::zero().with_running(Arc::new(|_, _| 1.0));
        assert!((path_cost(&p, &unit) - 1.0).abs() < 1e-15);
        let p = constant_path(2.0, 1.0, 10);
        assert_eq!(path_cost(&p, &CostSpec::quadratic_terminal(1.0)), 4.0);
        let p = constant_path(3.0, 2.0, 8);
        let lin = CostSpec::zero().with_running(Arc::new(|_, x| x[0]));
        assert!((path_cost(&p, &lin) - 6.0).abs() < 1e-14);
    }

    #[test]
    fn zero_costs_give_unit_weights() {
        let e = normalize_weights(&[0.0; 5]).unwrap();
        assert!(e.weights.iter().all(|d| *d == 1.0));
        assert_eq!(e.z_hat(), 1.0);
        assert_eq!(entropy_estimate(&e), 0.0);
    }

    #[test]
    fn two_point_ensemble() {
        let e = normalize_weights(&[0.0, 2f64.ln()]).unwrap();
        assert!((e.z_hat() - 0.75).abs() < 1e-15);
        assert!((e.weights[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((e.weights[1] - 2.0 / 3.0).abs() < 1e-15);
        let h = (4.0 / 3.0 * (4.0f64 / 3.0).ln() + 2.0 / 3.0 * (2.0f64 / 3.0).ln()) / 2.0;
        assert!((entropy_estimate(&e) - h).abs() < 1e-15);
    }

    #[test]
    fn ess_examples() {
        assert!((ess_of(&[1.0; 100]) - 100.0).abs() < 1e-12);
        assert_eq!(ess_of(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert!((ess_of(&[1.0, 1.0, 2.0]) - 16.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_statistic_is_exact() {
        let e = normalize_weights(&[0.3, 1.2, 5.0]).unwrap();
        let r = weighted_expectation(&e, &[2.5; 3]).unwrap();
        assert_eq!(r.value, 2.5);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn null_cost_matches_plain_mean() {
        let e = normalize_weights(&[0.0; 4]).unwrap();
        let h = [1.0, 2.0, 4.0, 8.5];
        let r = weighted_expectation(&e, &h).unwrap();
        assert_eq!(r.value, crate::stats::mean(&h));
    }

    #[test]
    fn huge_costs_do_not_underflow() {
        let e = normalize_weights(&[1e4, 1e4 + 1.0, 1e4 + 2.0]).unwrap();
        let r = variational_report(&e).unwrap();
        assert!(r.gap.abs() < 1e-10);
        assert!(
            (r.minus_log_z.value - (1e4 - ((1.0 + (-1f64).exp() + (-2f64).exp()) / 3.0).ln()))
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn all_excluded_is_degenerate() {
        assert!(matches!(
            WeightedEnsemble::from_costs(&[None, Some(f64::NAN)]),
            Err(Error::DegenerateEnsemble(_))
        ));
        let e = WeightedEnsemble::from_costs(&[None, Some(1.0), Some(f64::INFINITY), Some(0.5)])
            .unwrap();
        assert_eq!(e.excluded, 2);
        assert_eq!(e.retained, vec![1, 3]);
    }

    #[test]
    fn null_report_is_zero() {
        let e = normalize_weights(&[0.0; 10]).unwrap();
        let r = variational_report(&e).unwrap();
        assert_eq!(
            (
                r.minus_log_z.value,
                r.mean_phi.value,
                r.entropy.value,
                r.gap
            ),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(r.ess, 10.0);
    }

    #[test]
    fn report_csv_has_fixed_columns() {
        let e = normalize_weights(&[0.0, 1.0]).unwrap();
        let csv = variational_report(&e).unwrap().table().to_csv();
        assert!(csv.starts_with("n_paths,Z_hat,minus_log_Z,mean_phi,entropy,gap,ess\n2,"));
    }

    #[test]
    fn gaussian_normalizer_at_moderate_n() {
        let model = ModelSpec::brownian(1.0, vec![0.0]).with_initial(InitialLaw::Point(vec![0.0]));
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let (e, _) = reference_ensemble(
            &model,
            &CostSpec::quadratic_terminal(0.5),
            &grid,
            20_000,
            SeedSpec::new(3, 0),
            |_| (),
        )
        .unwrap();
        let r = variational_report(&e).unwrap();
        assert!(
            r.minus_log_z.within(0.5 * 2f64.ln(), 4.0),
            "{:?}",
            r.minus_log_z
        );
    }
}
