//! Reference dynamics, costs and the reference generator.
//!
//! A reference model is a jump diffusion on `R^d`
//!
//! ```text
//! dX = b(t,X) dt + σ(t,X) dW + jumps with Lévy kernel λ(t,x)·ρ(t,x,dq)
//! ```
//!
//! with finite-activity jumps, so the drift `b` is the full drift (no
//! truncation/compensation term). Its generator acting on a test function is
//!
//! ```text
//! a(φ) = ∂_t φ + ⟨∇φ, b⟩ + ½ Tr[σσᵀ ∇²φ] + λ E_{q~ρ}[φ(t,x+q) − φ(t,x)].
//! ```

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite_standard, GAUSS_HERMITE_NODES};

/// `(t, x) ↦ R`.
pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x, out)`: writes a vector of length `d` into `out`.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)`: writes a row-major `d×d` matrix into `out`.
pub type MatrixField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Terminal cost `x ↦ g(x)`.
pub type TerminalField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Uniform grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be >= 1"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of node `k`; the last node is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// Jump-size law supplied by the user.
pub trait CustomJumpLaw: Send + Sync {
    fn sample(&self, t: f64, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]);
    fn density(&self, t: f64, x: &[f64], q: &[f64]) -> f64;
}

/// Jump-size law `ρ(t, x, dq)`.
#[derive(Clone)]
pub enum JumpLaw {
    /// Discrete law: `(size, probability)` atoms.
    Atoms(Vec<(Vec<f64>, f64)>),
    /// Independent Gaussian coordinates.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Custom(Arc<dyn CustomJumpLaw>),
}

impl std::fmt::Debug for JumpLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JumpLaw::Atoms(a) => f.debug_tuple("Atoms").field(a).finish(),
            JumpLaw::Gaussian { mean, std } => f
                .debug_struct("Gaussian")
                .field("mean", mean)
                .field("std", std)
                .finish(),
            JumpLaw::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

fn gauss_hermite_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite_standard(GAUSS_HERMITE_NODES))
}

impl JumpLaw {
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, x: &[f64], rng: &mut R, out: &mut [f64]) {
        match self {
            JumpLaw::Atoms(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = &atoms[atoms.len() - 1].0;
                for (q, p) in atoms {
                    acc += p;
                    if u < acc {
                        chosen = q;
                        break;
                    }
                }
                out.copy_from_slice(chosen);
            }
            JumpLaw::Gaussian { mean, std } => {
                for i in 0..out.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i] = mean[i] + std[i] * z;
                }
            }
            JumpLaw::Custom(law) => {
                let mut adapter = DynRng(rng);
                law.sample(t, x, &mut adapter, out)
            }
        }
    }

    /// `E_{q~ρ}[h(q)]`: exact for atoms, Gauss-Hermite for one-dimensional
    /// Gaussians, fixed-seed sampling otherwise.
    pub fn expectation(
        &self,
        t: f64,
        x: &[f64],
        opts: &GeneratorOptions,
        mut h: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        match self {
            JumpLaw::Atoms(atoms) => atoms.iter().map(|(q, p)| p * h(q)).sum(),
            JumpLaw::Gaussian { mean, std } if mean.len() == 1 => gauss_hermite_rule()
                .iter()
                .map(|(z, w)| w * h(&[mean[0] + std[0] * z]))
                .sum(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.jump_seed);
                let mut q = vec![0.0; x.len()];
                let n = opts.jump_samples.max(1);
                let mut acc = crate::stats::KahanSum::new();
                for _ in 0..n {
                    self.sample(t, x, &mut rng, &mut q);
                    acc.add(h(&q));
                }
                acc.total() / n as f64
            }
        }
    }
}

struct DynRng<'a, R: ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for DynRng<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Finite-activity Lévy kernel `L(t,x,dq) = λ(t,x) ρ(t,x,dq)`.
#[derive(Clone)]
pub struct JumpSpec {
    pub intensity: ScalarField,
    pub law: JumpLaw,
}

impl JumpSpec {
    pub fn new(intensity: ScalarField, law: JumpLaw) -> Self {
        Self { intensity, law }
    }

    pub fn constant(rate: f64, law: JumpLaw) -> Self {
        Self::new(Arc::new(move |_, _| rate), law)
    }
}

/// Initial law supplied by the user.
pub trait CustomInitialLaw: Send + Sync {
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]);
    fn density(&self, x: &[f64]) -> f64;
}

/// Law `μ` of `X_0`.
#[derive(Clone)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent Gaussian coordinates.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Custom(Arc<dyn CustomInitialLaw>),
}

impl InitialLaw {
    pub fn point(&self) -> Option<&[f64]> {
        match self {
            InitialLaw::Point(x0) => Some(x0),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x0) => out.copy_from_slice(x0),
            InitialLaw::Gaussian { mean, std } => {
                for i in 0..out.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i] = mean[i] + std[i] * z;
                }
            }
            InitialLaw::Custom(law) => law.sample(&mut DynRng(rng), out),
        }
    }

    /// A representative point (the mean for Gaussian laws).
    pub fn center(&self, dim: usize) -> Vec<f64> {
        match self {
            InitialLaw::Point(x0) => x0.clone(),
            InitialLaw::Gaussian { mean, .. } => mean.clone(),
            InitialLaw::Custom(_) => vec![0.0; dim],
        }
    }
}

/// Reference dynamics.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub drift: VectorField,
    pub diffusion: MatrixField,
    pub jump: Option<JumpSpec>,
    pub initial: InitialLaw,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("has_jumps", &self.jump.is_some())
            .finish()
    }
}

fn scalar_identity(dim: usize, sigma: f64) -> MatrixField {
    Arc::new(move |_, _, out: &mut [f64]| {
        for (k, o) in out.iter_mut().enumerate() {
            *o = if k % (dim + 1) == 0 { sigma } else { 0.0 };
        }
    })
}

/// Runs `f` on a zeroed buffer of length `n`, on the stack when small.
pub(crate) fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if n <= 4 {
        f(&mut [0.0; 4][..n])
    } else if n <= 32 {
        f(&mut [0.0; 32][..n])
    } else {
        f(&mut vec![0.0; n])
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: VectorField,
        diffusion: MatrixField,
        initial: InitialLaw,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            drift,
            diffusion,
            jump: None,
            initial,
        }
    }

    pub fn with_jumps(mut self, jump: JumpSpec) -> Self {
        self.jump = Some(jump);
        self
    }

    pub fn with_initial(mut self, initial: InitialLaw) -> Self {
        self.initial = initial;
        self
    }

    /// `dX = μ dt + σ dW` with scalar `σ` (times the identity).
    pub fn constant_drift(mu: Vec<f64>, sigma: f64, x0: Vec<f64>) -> Self {
        let dim = mu.len();
        Self::new(
            "constant_drift",
            dim,
            Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&mu)),
            scalar_identity(dim, sigma),
            InitialLaw::Point(x0),
        )
    }

    /// Brownian motion `σ W` started at `x0`.
    pub fn brownian(sigma: f64, x0: Vec<f64>) -> Self {
        let dim = x0.len();
        let mut m = Self::constant_drift(vec![0.0; dim], sigma, x0);
        m.name = "bm".into();
        m
    }

    /// `dX = (μ + κ X) dt + σ dW`, componentwise.
    pub fn linear_drift(mu: Vec<f64>, kappa: f64, sigma: f64, x0: Vec<f64>) -> Self {
        let dim = mu.len();
        Self::new(
            "linear_drift",
            dim,
            Arc::new(move |_, x: &[f64], out: &mut [f64]| {
                for i in 0..out.len() {
                    out[i] = mu[i] + kappa * x[i];
                }
            }),
            scalar_identity(dim, sigma),
            InitialLaw::Point(x0),
        )
    }

    /// `dX = θ (m − X) dt + σ dW`.
    pub fn ornstein_uhlenbeck(theta: f64, mean: Vec<f64>, sigma: f64, x0: Vec<f64>) -> Self {
        let dim = mean.len();
        Self::new(
            "ou",
            dim,
            Arc::new(move |_, x: &[f64], out: &mut [f64]| {
                for i in 0..out.len() {
                    out[i] = theta * (mean[i] - x[i]);
                }
            }),
            scalar_identity(dim, sigma),
            InitialLaw::Point(x0),
        )
    }

    /// Pure-jump Poisson counting process with unit jumps, one dimension.
    pub fn poisson_unit(rate: f64, x0: f64) -> Self {
        Self::new(
            "poisson",
            1,
            Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            scalar_identity(1, 0.0),
            InitialLaw::Point(vec![x0]),
        )
        .with_jumps(JumpSpec::constant(
            rate,
            JumpLaw::Atoms(vec![(vec![1.0], 1.0)]),
        ))
    }

    /// Drift `μ`, scalar diffusion and compound-Poisson Gaussian jumps.
    pub fn compound_poisson_gaussian(
        mu: Vec<f64>,
        sigma: f64,
        rate: f64,
        jump_mean: Vec<f64>,
        jump_std: Vec<f64>,
        x0: Vec<f64>,
    ) -> Self {
        let mut m = Self::constant_drift(mu, sigma, x0).with_jumps(JumpSpec::constant(
            rate,
            JumpLaw::Gaussian {
                mean: jump_mean,
                std: jump_std,
            },
        ));
        m.name = "cpg".into();
        m
    }

    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// `σσᵀ(t,x)`, row-major.
    pub fn covariance_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.dim * self.dim];
        self.covariance_into(t, x, &mut a);
        a
    }

    pub fn covariance_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        with_scratch(d * d, |s| {
            self.diffusion_at(t, x, s);
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
                }
            }
        })
    }

    /// True when `σ(t,x)` is identically zero at this point.
    pub fn is_pure_jump_at(&self, t: f64, x: &[f64]) -> bool {
        let d = self.dim;
        let mut s = vec![0.0; d * d];
        self.diffusion_at(t, x, &mut s);
        s.iter().all(|v| *v == 0.0)
    }

    pub fn intensity_at(&self, t: f64, x: &[f64]) -> f64 {
        self.jump.as_ref().map_or(0.0, |j| (j.intensity)(t, x))
    }
}

/// Running and terminal costs `φ = ∫ f dt + g(X_T)`.
#[derive(Clone)]
pub struct CostSpec {
    pub running: ScalarField,
    pub terminal: TerminalField,
    /// `f ≡ 0` is known in closed form.
    pub running_is_zero: bool,
    /// `g ≡ 0` is known in closed form.
    pub terminal_is_zero: bool,
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostSpec")
            .field("running_is_zero", &self.running_is_zero)
            .field("terminal_is_zero", &self.terminal_is_zero)
            .finish()
    }
}

impl CostSpec {
    pub fn new(running: ScalarField, terminal: TerminalField) -> Self {
        Self {
            running,
            terminal,
            running_is_zero: false,
            terminal_is_zero: false,
        }
    }

    pub fn zero() -> Self {
        Self {
            running: Arc::new(|_, _| 0.0),
            terminal: Arc::new(|_| 0.0),
            running_is_zero: true,
            terminal_is_zero: true,
        }
    }

    pub fn terminal_only(terminal: TerminalField) -> Self {
        Self {
            running: Arc::new(|_, _| 0.0),
            terminal,
            running_is_zero: true,
            terminal_is_zero: false,
        }
    }

    /// `g(x) = γ |x|²`, `f = 0`.
    pub fn quadratic_terminal(gamma: f64) -> Self {
        Self::terminal_only(Arc::new(move |x| {
            gamma * x.iter().map(|v| v * v).sum::<f64>()
        }))
    }

    /// `g(x) = c · Σ x_i`, `f = 0`.
    pub fn linear_terminal(coeff: f64) -> Self {
        Self::terminal_only(Arc::new(move |x| coeff * x.iter().sum::<f64>()))
    }

    pub fn with_running(mut self, running: ScalarField) -> Self {
        self.running = running;
        self.running_is_zero = false;
        self
    }

    pub fn is_null(&self) -> bool {
        self.running_is_zero && self.terminal_is_zero
    }

    #[inline]
    pub fn running_at(&self, t: f64, x: &[f64]) -> f64 {
        if self.running_is_zero {
            0.0
        } else {
            (self.running)(t, x)
        }
    }

    #[inline]
    pub fn terminal_at(&self, x: &[f64]) -> f64 {
        if self.terminal_is_zero {
            0.0
        } else {
            (self.terminal)(x)
        }
    }
}

/// One violated invariant at a probe point.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub t: f64,
    pub x: Vec<f64>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

fn guarded<T>(f: impl FnOnce() -> T) -> std::result::Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| e.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "evaluator panicked".to_string())
    })
}

/// Checks the model and cost invariants at every probe.
pub fn validate_model(
    model: &ModelSpec,
    cost: &CostSpec,
    grid: &TimeGrid,
    probes: &[(f64, Vec<f64>)],
) -> Result<ValidationReport> {
    if probes.is_empty() {
        return Err(Error::invalid("validate_model needs at least one probe"));
    }
    let d = model.dim;
    let mut report = ValidationReport::default();
    let mut violate = |t: f64, x: &[f64], message: String| {
        report.violations.push(Violation {
            t,
            x: x.to_vec(),
            message,
        })
    };

    if let Some(jump) = &model.jump {
        if let JumpLaw::Atoms(atoms) = &jump.law {
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            if (total - 1.0).abs() > 1e-12 {
                violate(
                    0.0,
                    &[],
                    format!("jump probabilities sum to {total}, expected 1"),
                );
            }
            if atoms
                .iter()
                .any(|(q, p)| *p > 0.0 && q.iter().all(|v| *v == 0.0))
            {
                violate(0.0, &[], "jump law has an atom at 0".into());
            }
            if atoms.iter().any(|(_, p)| *p < 0.0) {
                violate(0.0, &[], "negative jump probability".into());
            }
            if atoms.iter().any(|(q, _)| q.len() != d) {
                violate(0.0, &[], "jump size dimension mismatch".into());
            }
        }
        if let JumpLaw::Gaussian { mean, std } = &jump.law {
            if mean.len() != d || std.len() != d {
                violate(0.0, &[], "jump size dimension mismatch".into());
            }
            if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                violate(0.0, &[], "gaussian jump std must be > 0".into());
            }
        }
    }

    for (t, x) in probes {
        let (t, x) = (*t, x.as_slice());
        if !(0.0..=grid.horizon()).contains(&t) {
            return Err(Error::invalid(format!(
                "probe time {t} outside [0, {}]",
                grid.horizon()
            )));
        }
        if x.len() != d {
            violate(
                t,
                x,
                format!("probe dimension {} != model dimension {d}", x.len()),
            );
            continue;
        }
        let mut b = vec![0.0; d];
        match guarded(|| model.drift_at(t, x, &mut b)) {
            Err(e) => violate(t, x, format!("drift evaluation failed: {e}")),
            Ok(()) if b.iter().any(|v| !v.is_finite()) => violate(t, x, "non-finite drift".into()),
            Ok(()) => {}
        }
        match guarded(|| model.covariance_at(t, x)) {
            Err(e) => violate(t, x, format!("diffusion evaluation failed: {e}")),
            Ok(a) if a.iter().any(|v| !v.is_finite()) => {
                violate(t, x, "non-finite diffusion".into())
            }
            Ok(a) => {
                let m = nalgebra::DMatrix::from_row_slice(d, d, &a);
                let scale = m.amax().max(1.0);
                let eig = nalgebra::SymmetricEigen::new(m);
                if eig.eigenvalues.iter().any(|l| *l < -1e-12 * scale) {
                    violate(t, x, "sigma sigma^T not positive semidefinite".into());
                }
            }
        }
        match guarded(|| cost.running_at(t, x)) {
            Err(e) => violate(t, x, format!("running cost evaluation failed: {e}")),
            Ok(f) if !f.is_finite() => violate(t, x, "non-finite f".into()),
            Ok(f) if f < 0.0 => violate(t, x, "f < 0".into()),
            Ok(_) => {}
        }
        match guarded(|| cost.terminal_at(x)) {
            Err(e) => violate(t, x, format!("terminal cost evaluation failed: {e}")),
            Ok(g) if !g.is_finite() => violate(t, x, "non-finite g".into()),
            Ok(g) if g < 0.0 => violate(t, x, "g < 0".into()),
            Ok(_) => {}
        }
        if let Some(jump) = &model.jump {
            match guarded(|| (jump.intensity)(t, x)) {
                Err(e) => violate(t, x, format!("intensity evaluation failed: {e}")),
                Ok(l) if !l.is_finite() => violate(t, x, "non-finite intensity".into()),
                Ok(l) if l < 0.0 => violate(t, x, "intensity negative".into()),
                Ok(_) => {}
            }
        }
    }
    Ok(report)
}

/// Time derivative, gradient and row-major Hessian of a test function.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub time: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

/// A scalar space-time test function.
pub trait TestFunction: Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;

    /// Analytic derivatives, when known. `None` selects finite differences.
    fn derivatives(&self, _t: f64, _x: &[f64]) -> Option<Derivatives> {
        None
    }

    /// Time interval on which `value` is meaningful; stencils stay inside it.
    fn time_domain(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Closure test function without analytic derivatives.
pub struct FnTest<F>(pub F);

impl<F: Fn(f64, &[f64]) -> f64 + Sync> TestFunction for FnTest<F> {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.0)(t, x)
    }
}

/// `(t, x) ↦ x_i`.
#[derive(Debug, Clone, Copy)]
pub struct Coordinate(pub usize);

impl TestFunction for Coordinate {
    fn value(&self, _t: f64, x: &[f64]) -> f64 {
        x[self.0]
    }

    fn derivatives(&self, _t: f64, x: &[f64]) -> Option<Derivatives> {
        let d = x.len();
        let mut gradient = vec![0.0; d];
        gradient[self.0] = 1.0;
        Some(Derivatives {
            time: 0.0,
            gradient,
            hessian: vec![0.0; d * d],
        })
    }
}

/// Pointwise product of two test functions.
pub struct Product<'a>(pub &'a dyn TestFunction, pub &'a dyn TestFunction);

impl TestFunction for Product<'_> {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.0.value(t, x) * self.1.value(t, x)
    }

    fn derivatives(&self, t: f64, x: &[f64]) -> Option<Derivatives> {
        let (a, b) = (self.0.derivatives(t, x)?, self.1.derivatives(t, x)?);
        let (fa, fb) = (self.0.value(t, x), self.1.value(t, x));
        let d = x.len();
        let gradient = (0..d)
            .map(|i| fa * b.gradient[i] + fb * a.gradient[i])
            .collect();
        let mut hessian = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hessian[i * d + j] = fa * b.hessian[i * d + j]
                    + fb * a.hessian[i * d + j]
                    + a.gradient[i] * b.gradient[j]
                    + a.gradient[j] * b.gradient[i];
            }
        }
        Some(Derivatives {
            time: fa * b.time + fb * a.time,
            gradient,
            hessian,
        })
    }

    fn time_domain(&self) -> Option<(f64, f64)> {
        match (self.0.time_domain(), self.1.time_domain()) {
            (Some(a), Some(b)) => Some((a.0.max(b.0), a.1.min(b.1))),
            (a, b) => a.or(b),
        }
    }
}

/// Knobs for generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorOptions {
    /// Finite-difference step; `None` selects `1e-4·(1+|x|)` in space and
    /// `1e-4·(1+|t|)` in time.
    pub fd_step: Option<f64>,
    /// Draws used for jump expectations without a quadrature rule.
    pub jump_samples: usize,
    pub jump_seed: u64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            fd_step: None,
            jump_samples: 10_000,
            jump_seed: 0x5eed_0fa1,
        }
    }
}

impl GeneratorOptions {
    pub fn with_fd_step(fd_step: f64) -> Self {
        Self {
            fd_step: Some(fd_step),
            ..Self::default()
        }
    }

    pub(crate) fn space_step(&self, x: &[f64]) -> f64 {
        self.fd_step
            .unwrap_or_else(|| 1e-4 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()))
    }

    pub(crate) fn time_step(&self, t: f64) -> f64 {
        self.fd_step.unwrap_or(1e-4 * (1.0 + t.abs()))
    }
}

fn check_finite(what: &str, t: f64, x: &[f64], stencil: &[f64]) -> Result<()> {
    if stencil.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure {
            what: what.to_string(),
            t,
            x: x.to_vec(),
            stencil: stencil.to_vec(),
        })
    }
}

/// Central-difference derivatives (one-sided second order near the ends of
/// the test function's time domain).
pub fn fd_derivatives(
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    space_step: f64,
    time_step: f64,
) -> Result<Derivatives> {
    let d = x.len();
    let h = space_step;
    let f0 = phi.value(t, x);
    check_finite("test function value", t, x, &[f0])?;

    let ht = time_step;
    let (lo, hi) = phi
        .time_domain()
        .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let time = if t - ht >= lo && t + ht <= hi {
        let s = [phi.value(t + ht, x), phi.value(t - ht, x)];
        check_finite("time derivative", t, x, &s)?;
        (s[0] - s[1]) / (2.0 * ht)
    } else if t + 2.0 * ht <= hi {
        let s = [f0, phi.value(t + ht, x), phi.value(t + 2.0 * ht, x)];
        check_finite("time derivative", t, x, &s)?;
        (-3.0 * s[0] + 4.0 * s[1] - s[2]) / (2.0 * ht)
    } else {
        let s = [f0, phi.value(t - ht, x), phi.value(t - 2.0 * ht, x)];
        check_finite("time derivative", t, x, &s)?;
        (3.0 * s[0] - 4.0 * s[1] + s[2]) / (2.0 * ht)
    };

    let mut y = x.to_vec();
    let mut gradient = vec![0.0; d];
    let mut hessian = vec![0.0; d * d];
    for i in 0..d {
        y[i] = x[i] + h;
        let fp = phi.value(t, &y);
        y[i] = x[i] - h;
        let fm = phi.value(t, &y);
        y[i] = x[i];
        check_finite("space derivative", t, x, &[fm, f0, fp])?;
        gradient[i] = (fp - fm) / (2.0 * h);
        hessian[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let mut corner = |si: f64, sj: f64| {
                y[i] = x[i] + si * h;
                y[j] = x[j] + sj * h;
                let v = phi.value(t, &y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let s = [
                corner(1.0, 1.0),
                corner(1.0, -1.0),
                corner(-1.0, 1.0),
                corner(-1.0, -1.0),
            ];
            check_finite("mixed derivative", t, x, &s)?;
            let v = (s[0] - s[1] - s[2] + s[3]) / (4.0 * h * h);
            hessian[i * d + j] = v;
            hessian[j * d + i] = v;
        }
    }
    Ok(Derivatives {
        time,
        gradient,
        hessian,
    })
}

pub(crate) fn derivatives_of(
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    opts: &GeneratorOptions,
) -> Result<Derivatives> {
    match phi.derivatives(t, x) {
        Some(d) => Ok(d),
        None => fd_derivatives(phi, t, x, opts.space_step(x), opts.time_step(t)),
    }
}

/// Multiplier applied to the jump kernel, `q ↦ w(q)`.
pub(crate) type JumpWeight<'a> = &'a dyn Fn(&[f64]) -> f64;

/// Generator with an explicit drift and an optional reweighting of the jump
/// kernel by `weight(q)`.
pub(crate) fn apply_generator(
    model: &ModelSpec,
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    drift: &[f64],
    jump_weight: Option<JumpWeight<'_>>,
    opts: &GeneratorOptions,
) -> Result<f64> {
    let d = model.dim;
    let der = derivatives_of(phi, t, x, opts)?;
    let mut value = der.time;
    value += (0..d).map(|i| der.gradient[i] * drift[i]).sum::<f64>();
    let a = model.covariance_at(t, x);
    let trace: f64 = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| a[i * d + j] * der.hessian[j * d + i])
        .sum();
    value += 0.5 * trace;

    if let Some(jump) = &model.jump {
        let rate = (jump.intensity)(t, x);
        if rate != 0.0 {
            let base = phi.value(t, x);
            let mut y = vec![0.0; d];
            let expectation = jump.law.expectation(t, x, opts, |q| {
                for i in 0..d {
                    y[i] = x[i] + q[i];
                }
                let w = jump_weight.map_or(1.0, |w| w(q));
                w * (phi.value(t, &y) - base)
            });
            check_finite("jump expectation", t, x, &[expectation])?;
            value += rate * expectation;
        }
    }
    check_finite("generator value", t, x, &[value])?;
    Ok(value)
}

/// Reference generator `a(φ)(t,x)`.
pub fn eval_generator(
    model: &ModelSpec,
    phi: &dyn TestFunction,
    t: f64,
    x: &[f64],
    opts: &GeneratorOptions,
) -> Result<f64> {
    let mut b = vec![0.0; model.dim];
    model.drift_at(t, x, &mut b);
    apply_generator(model, phi, t, x, &b, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 100).unwrap()
    }

    #[test]
    fn time_grid_rejects_bad_input() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.time(7), 0.3);
        assert!((g.dt() * 7.0 - 0.3).abs() <= f64::EPSILON * 0.3);
    }

    #[test]
    fn validate_accepts_brownian_quadratic() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let cost = CostSpec::quadratic_terminal(1.0);
        let r = validate_model(
            &model,
            &cost,
            &grid(),
            &[(0.0, vec![0.0]), (1.0, vec![1.0])],
        )
        .unwrap();
        assert!(r.is_valid(), "{r:?}");
    }

    #[test]
    fn validate_flags_negative_terminal_cost() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let cost = CostSpec::terminal_only(Arc::new(|_| -1.0));
        let r = validate_model(&model, &cost, &grid(), &[(0.5, vec![0.3])]).unwrap();
        assert!(r.mentions("g < 0"));
    }

    #[test]
    fn validate_flags_negative_intensity() {
        let model = ModelSpec::brownian(1.0, vec![0.0]).with_jumps(JumpSpec::constant(
            -2.0,
            JumpLaw::Atoms(vec![(vec![1.0], 1.0)]),
        ));
        let r = validate_model(&model, &CostSpec::zero(), &grid(), &[(0.0, vec![0.0])]).unwrap();
        assert!(r.mentions("intensity negative"));
    }

    #[test]
    fn validate_flags_nan_and_panics() {
        let model = ModelSpec::new(
            "broken",
            1,
            Arc::new(|_, x: &[f64], out: &mut [f64]| {
                if x[0] > 5.0 {
                    panic!("drift blew up");
                }
                out[0] = f64::NAN;
            }),
            Arc::new(|_, _, out: &mut [f64]| out[0] = 1.0),
            InitialLaw::Point(vec![0.0]),
        );
        let r = validate_model(
            &model,
            &CostSpec::zero(),
            &grid(),
            &[(0.0, vec![0.0]), (0.0, vec![6.0])],
        )
        .unwrap();
        assert!(r.mentions("non-finite drift"));
        assert!(r.mentions("drift evaluation failed"));
        assert_eq!(r.violations[1].x, vec![6.0]);
    }

    #[test]
    fn validate_flags_atom_at_zero_and_bad_mass() {
        let model = ModelSpec::brownian(1.0, vec![0.0]).with_jumps(JumpSpec::constant(
            1.0,
            JumpLaw::Atoms(vec![(vec![0.0], 0.5), (vec![1.0], 0.4)]),
        ));
        let r = validate_model(&model, &CostSpec::zero(), &grid(), &[(0.0, vec![0.0])]).unwrap();
        assert!(r.mentions("atom at 0"));
        assert!(r.mentions("sum to"));
    }

    #[test]
    fn validate_requires_probes_in_horizon() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        assert!(validate_model(&model, &CostSpec::zero(), &grid(), &[]).is_err());
        assert!(validate_model(&model, &CostSpec::zero(), &grid(), &[(2.0, vec![0.0])]).is_err());
    }

    #[test]
    fn generator_of_square_under_brownian_is_one() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let phi = FnTest(|_t: f64, x: &[f64]| x[0] * x[0]);
        let v = eval_generator(&model, &phi, 0.3, &[0.7], &GeneratorOptions::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn generator_of_identity_is_drift() {
        let model = ModelSpec::constant_drift(vec![0.37], 1.0, vec![0.0]);
        let phi = FnTest(|_t: f64, x: &[f64]| x[0]);
        let v = eval_generator(&model, &phi, 0.0, &[2.0], &GeneratorOptions::default()).unwrap();
        assert!((v - 0.37).abs() < 1e-7, "{v}");
    }

    #[test]
    fn generator_of_unit_jumps() {
        // a(id) = λ·(x+1 − x) with b = σ = 0.
        let model = ModelSpec::poisson_unit(2.0, 0.0);
        let v = eval_generator(
            &model,
            &Coordinate(0),
            0.5,
            &[3.0],
            &GeneratorOptions::default(),
        )
        .unwrap();
        assert_eq!(v, 2.0);
        let phi = FnTest(|_t: f64, x: &[f64]| x[0]);
        let v = eval_generator(&model, &phi, 0.5, &[3.0], &GeneratorOptions::default()).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_jump_expectation_uses_quadrature() {
        // E[(x+q)² − x²] = 2x m + m² + s²
        let model = ModelSpec::compound_poisson_gaussian(
            vec![0.0],
            0.0,
            1.5,
            vec![0.2],
            vec![0.5],
            vec![0.0],
        );
        let phi = FnTest(|_t: f64, x: &[f64]| x[0] * x[0]);
        let x = 1.3;
        let v = eval_generator(&model, &phi, 0.1, &[x], &GeneratorOptions::default()).unwrap();
        let expected = 1.5 * (2.0 * x * 0.2 + 0.04 + 0.25);
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }

    #[test]
    fn constant_function_is_killed() {
        let model = ModelSpec::compound_poisson_gaussian(
            vec![0.4, -1.0],
            0.7,
            2.0,
            vec![0.1, 0.0],
            vec![0.3, 0.4],
            vec![0.0, 0.0],
        );
        let phi = FnTest(|_t: f64, _x: &[f64]| 3.25);
        let v = eval_generator(
            &model,
            &phi,
            0.2,
            &[0.5, -0.5],
            &GeneratorOptions::default(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn non_finite_stencil_reports_values() {
        let model = ModelSpec::brownian(1.0, vec![0.0]);
        let phi = FnTest(|_t: f64, x: &[f64]| if x[0] > 1.0 { f64::INFINITY } else { x[0] });
        let err = eval_generator(
            &model,
            &phi,
            0.1,
            &[1.0],
            &GeneratorOptions::with_fd_step(1e-3),
        )
        .unwrap_err();
        match err {
            Error::NumericalFailure { stencil, .. } => {
                assert!(stencil.iter().any(|v| v.is_infinite()))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn second_order_convergence_on_quartic() {
        // φ = x⁴ + t x², b = 0.5, σ = 1.2; a(φ) = x² + 0.5(4x³ + 2tx) + 0.72(12x² + 2t)
        let model = ModelSpec::constant_drift(vec![0.5], 1.2, vec![0.0]);
        let phi = FnTest(|t: f64, x: &[f64]| x[0].powi(4) + t * x[0] * x[0]);
        let (t, x): (f64, f64) = (0.4, 0.9);
        let exact = x * x + 0.5 * (4.0 * x.powi(3) + 2.0 * t * x) + 0.72 * (12.0 * x * x + 2.0 * t);
        let err = |h: f64| {
            (eval_generator(&model, &phi, t, &[x], &GeneratorOptions::with_fd_step(h)).unwrap()
                - exact)
                .abs()
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn product_derivatives_match_fd() {
        let p = Product(&Coordinate(0), &Coordinate(1));
        let x = [0.3, -1.1];
        let a = p.derivatives(0.0, &x).unwrap();
        let b = fd_derivatives(&p, 0.0, &x, 1e-4, 1e-4).unwrap();
        for i in 0..4 {
            assert!((a.hessian[i] - b.hessian[i]).abs() < 1e-6);
        }
        assert!((a.gradient[0] - b.gradient[0]).abs() < 1e-8);
    }
}
