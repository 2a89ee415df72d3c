//! Run configuration: a TOML document with one level of sections.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::benchmarks::{GaussianQuadratic, PoissonLinear};
use crate::error::{Error, Result};
use crate::feynman_kac::{SpaceBox, SurfaceSettings};
use crate::model::{CostSpec, ModelSpec, TimeGrid};
use crate::value::{UnitValue, ValueSource};

/// Environment variable supplying the seed when the config has none.
pub const SEED_ENV: &str = "EXPOTWIST_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Brownian motion `σW`.
    Bm,
    /// Constant drift `μ`.
    Drift,
    /// Drift `μ + κx`.
    Linear,
    Ou,
    /// Poisson process with unit jumps.
    Poisson,
    /// Constant drift plus compound Poisson Gaussian jumps.
    Cpg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "one_f")]
    pub sigma: f64,
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "one_f")]
    pub theta: f64,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default = "one_f")]
    pub rate: f64,
    #[serde(default)]
    pub jump_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub jump_std: Option<Vec<f64>>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalKind {
    Zero,
    /// `γ|x|²`.
    Quadratic,
    /// `c Σ x_i`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunningKind {
    Zero,
    /// `a`.
    Constant,
    /// `a|x|²`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default = "terminal_zero")]
    pub terminal: TerminalKind,
    #[serde(default = "half")]
    pub gamma: f64,
    #[serde(default)]
    pub coeff: f64,
    #[serde(default = "running_zero")]
    pub running: RunningKind,
    #[serde(default)]
    pub running_coeff: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            terminal: TerminalKind::Zero,
            gamma: 0.5,
            coeff: 0.0,
            running: RunningKind::Zero,
            running_coeff: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: f64,
    #[serde(default = "hundred")]
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub time_nodes: Option<usize>,
    pub space_nodes: Option<usize>,
    pub n_sub: Option<usize>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Value,
    Twist,
    Reweight,
    Control,
    Checks,
    Meanfield,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Value => "value",
            Pipeline::Twist => "twist",
            Pipeline::Reweight => "reweight",
            Pipeline::Control => "control",
            Pipeline::Checks => "checks",
            Pipeline::Meanfield => "meanfield",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSourceKind {
    /// Closed form when one is known, otherwise an estimated surface.
    Auto,
    Analytic,
    Surface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_paths: i64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_pipelines")]
    pub pipelines: Vec<Pipeline>,
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default = "auto")]
    pub value_source: ValueSourceKind,
    #[serde(default)]
    pub inject_uncorrected_drift: bool,
    /// Also dump the full twisted paths.
    #[serde(default)]
    pub write_paths: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default = "ten")]
    pub n_bins: usize,
    #[serde(default = "fd")]
    pub fd_step: f64,
    #[serde(default = "p_default")]
    pub p: f64,
    #[serde(default = "one_f")]
    pub bias_constant: f64,
    #[serde(default = "one_f")]
    pub pde_constant: f64,
    /// Tolerance of the pointwise residual with an analytic value.
    #[serde(default = "pde_tol")]
    pub pde_tolerance: f64,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            n_bins: 10,
            fd_step: 1e-4,
            p: 1.5,
            bias_constant: 1.0,
            pde_constant: 1.0,
            pde_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `F(m) = ½ m²`.
    HalfSquare,
    /// `F(m) = slope · m`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanfieldConfig {
    #[serde(default = "half_square")]
    pub objective: Objective,
    #[serde(default = "one_f")]
    pub slope: f64,
    #[serde(default = "half")]
    pub damping: f64,
    #[serde(default = "tol")]
    pub tol: f64,
    #[serde(default = "thirty")]
    pub max_iter: usize,
}

impl Default for MeanfieldConfig {
    fn default() -> Self {
        Self {
            objective: Objective::HalfSquare,
            slope: 1.0,
            damping: 0.5,
            tol: 1e-3,
            max_iter: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub cost: CostConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub surface: SurfaceConfig,
    pub run: RunSection,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub meanfield: MeanfieldConfig,
}

fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn thirty() -> usize {
    30
}
fn hundred() -> usize {
    100
}
fn one_f() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn fd() -> f64 {
    1e-4
}
fn tol() -> f64 {
    1e-3
}
fn pde_tol() -> f64 {
    1e-6
}
fn p_default() -> f64 {
    1.5
}
fn terminal_zero() -> TerminalKind {
    TerminalKind::Zero
}
fn running_zero() -> RunningKind {
    RunningKind::Zero
}
fn half_square() -> Objective {
    Objective::HalfSquare
}
fn auto() -> ValueSourceKind {
    ValueSourceKind::Auto
}
fn default_pipelines() -> Vec<Pipeline> {
    vec![Pipeline::Reweight, Pipeline::Twist, Pipeline::Checks]
}
fn default_output() -> String {
    "expotwist-out".into()
}

/// Parses and validates a config. The seed is resolved from the document,
/// then from [`SEED_ENV`], then defaults to 0.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.run.seed.is_none() {
        cfg.run.seed = Some(match std::env::var(SEED_ENV) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?,
            Err(_) => 0,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(0)
    }

    pub fn n_paths(&self) -> usize {
        self.run.n_paths as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.n_paths <= 0 {
            return Err(cfg_err(format!(
                "run.n_paths must be positive, got {}",
                self.run.n_paths
            )));
        }
        if self.run.pipelines.is_empty() {
            return Err(cfg_err("run.pipelines is empty"));
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(cfg_err("grid.T must be positive"));
        }
        if self.grid.n_steps == 0 {
            return Err(cfg_err("grid.n_steps must be >= 1"));
        }
        if self.model.dim == 0 {
            return Err(cfg_err("model.dim must be >= 1"));
        }
        if matches!(self.model.family, Family::Poisson) && self.model.dim != 1 {
            return Err(cfg_err("the poisson family is one-dimensional"));
        }
        if self.checks.n_bins < 3 {
            return Err(cfg_err("checks.n_bins must be >= 3"));
        }
        if !(self.checks.p > 1.0 && self.checks.p < 2.0) {
            return Err(cfg_err("checks.p must lie in (1, 2)"));
        }
        if !(self.checks.fd_step > 0.0) {
            return Err(cfg_err("checks.fd_step must be positive"));
        }
        if !(self.meanfield.damping > 0.0 && self.meanfield.damping <= 1.0) {
            return Err(cfg_err("meanfield.damping must lie in (0, 1]"));
        }
        self.grid()?;
        self.model_spec()?;
        self.cost_spec()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps).map_err(|e| cfg_err(e.to_string()))
    }

    fn vector(&self, name: &str, v: &Option<Vec<f64>>, default: f64) -> Result<Vec<f64>> {
        let d = self.model.dim;
        match v {
            None => Ok(vec![default; d]),
            Some(v) if v.len() == d => Ok(v.clone()),
            Some(v) => Err(cfg_err(format!(
                "model.{name} has {} entries, expected {d}",
                v.len()
            ))),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let x0 = self.vector("x0", &m.x0, 0.0)?;
        Ok(match m.family {
            Family::Bm => ModelSpec::brownian(m.sigma, x0),
            Family::Drift => ModelSpec::constant_drift(self.vector("mu", &m.mu, 0.0)?, m.sigma, x0),
            Family::Linear => {
                ModelSpec::linear_drift(self.vector("mu", &m.mu, 0.0)?, m.kappa, m.sigma, x0)
            }
            Family::Ou => ModelSpec::ornstein_uhlenbeck(
                m.theta,
                self.vector("mean", &m.mean, 0.0)?,
                m.sigma,
                x0,
            ),
            Family::Poisson => {
                if m.rate < 0.0 {
                    return Err(cfg_err("model.rate must be >= 0"));
                }
                ModelSpec::poisson_unit(m.rate, x0[0])
            }
            Family::Cpg => {
                if m.rate < 0.0 {
                    return Err(cfg_err("model.rate must be >= 0"));
                }
                ModelSpec::compound_poisson_gaussian(
                    self.vector("mu", &m.mu, 0.0)?,
                    m.sigma,
                    m.rate,
                    self.vector("jump_mean", &m.jump_mean, 0.0)?,
                    self.vector("jump_std", &m.jump_std, 1.0)?,
                    x0,
                )
            }
        })
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let c = &self.cost;
        let mut spec = match c.terminal {
            TerminalKind::Zero => CostSpec::zero(),
            TerminalKind::Quadratic => {
                if c.gamma < 0.0 {
                    return Err(cfg_err("cost.gamma must be >= 0"));
                }
                CostSpec::quadratic_terminal(c.gamma)
            }
            TerminalKind::Linear => CostSpec::linear_terminal(c.coeff),
        };
        let a = c.running_coeff;
        match c.running {
            RunningKind::Zero => {}
            RunningKind::Constant => spec = spec.with_running(Arc::new(move |_, _| a)),
            RunningKind::Quadratic => {
                spec = spec.with_running(Arc::new(move |_, x: &[f64]| {
                    a * x.iter().map(|v| v * v).sum::<f64>()
                }))
            }
        }
        Ok(spec)
    }

    /// Closed-form value function of the configured problem, if one is known.
    pub fn analytic_value(&self) -> Option<ValueSource> {
        let (m, c) = (&self.model, &self.cost);
        let horizon = self.grid.horizon;
        let running_zero = c.running == RunningKind::Zero || c.running_coeff == 0.0;
        let terminal_zero = c.terminal == TerminalKind::Zero
            || (c.terminal == TerminalKind::Quadratic && c.gamma == 0.0)
            || (c.terminal == TerminalKind::Linear && c.coeff == 0.0);
        if running_zero && terminal_zero {
            return Some(ValueSource::analytic(UnitValue { horizon }));
        }
        if !running_zero {
            return None;
        }
        match (m.family, c.terminal) {
            (Family::Bm, TerminalKind::Quadratic) => Some(
                GaussianQuadratic {
                    gamma: c.gamma,
                    sigma: m.sigma,
                    horizon,
                    dim: m.dim,
                }
                .value(),
            ),
            (Family::Poisson, TerminalKind::Linear) => Some(
                PoissonLinear {
                    rate: m.rate,
                    coeff: c.coeff,
                    horizon,
                }
                .value(),
            ),
            _ => None,
        }
    }

    pub fn surface_settings(&self, model: &ModelSpec, grid: &TimeGrid) -> Result<SurfaceSettings> {
        let sc = &self.surface;
        let mut s = SurfaceSettings::default_for(model, grid, sc.n_sub.unwrap_or(1000));
        if let Some(n) = sc.time_nodes {
            s.time_nodes = n;
        }
        if sc.space_nodes.is_some() || sc.lo.is_some() || sc.hi.is_some() {
            let d = model.dim;
            let lo = sc.lo.clone().unwrap_or_else(|| s.space.lo.clone());
            let hi = sc.hi.clone().unwrap_or_else(|| s.space.hi.clone());
            let nodes = sc
                .space_nodes
                .map_or_else(|| s.space.nodes.clone(), |n| vec![n; d]);
            s.space = SpaceBox::new(lo, hi, nodes).map_err(|e| cfg_err(format!("surface: {e}")))?;
        }
        Ok(s)
    }

    /// Resolved configuration as `(key, value)` pairs, one per leaf.
    pub fn echo(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
