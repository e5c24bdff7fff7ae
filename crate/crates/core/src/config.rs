//! Run configuration: one TOML file with nested sections. Unknown keys are
//! errors.
//!
//! Top-level `epsilons`, `t_end`, `batch` and `h` override the matching
//! fields of whichever section a command uses. [`RunConfig::resolve`] folds
//! them in and returns a self-contained config holding only what the
//! command reads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::amplitude::{simulate_amplitude, AmplitudeOptions, IncrementSource};
use crate::analysis::{
    self, run_replicas, AveragingConfig, CoupledConfig, QvConfig, RunContext, StabilizationConfig,
    WeakConfig, SIMULATE,
};
use crate::burgers::{self, NoiseProfile};
use crate::coeffs::{compute_coefficients, lyapunov_exponent};
use crate::error::{Error, Result};
use crate::report::{annotate_csv, CoefficientReport, ExperimentReport, VERSION};
use crate::spde::{simulate_full, SpdeConfig, DEFAULT_KAPPA, DEFAULT_TAU_SCALE};
use crate::spectral::{require_valid, ModelSpec, SpectralField};
use crate::tensor::{BilinearTensor, MAX_MODES};

pub const DEFAULT_SEED: u64 = 20240501;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Coupled,
    Weak,
    Qv,
    Stabilization,
    Averaging,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Coupled,
        Experiment::Weak,
        Experiment::Qv,
        Experiment::Stabilization,
        Experiment::Averaging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Coupled => "coupled",
            Experiment::Weak => "weak",
            Experiment::Qv => "qv",
            Experiment::Stabilization => "stabilization",
            Experiment::Averaging => "averaging",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid("experiment", format!("unknown experiment `{s}`")))
    }
}

/// What a command is about to do with a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Coeffs,
    Simulate,
    Experiment(Experiment),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Burgers,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    /// Burgers only: orthonormal sine basis instead of plain `sin(kx)`.
    #[serde(default)]
    pub normalized: bool,
    pub n: usize,
    #[serde(default)]
    pub alpha: f64,
    pub nu: f64,
    /// Triple-list tensor file, custom models only. Relative paths are
    /// resolved against the config file's directory when loading from disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_scales: Option<Vec<f64>>,
    pub noise: NoiseProfile,
}

impl ModelConfig {
    pub fn burgers(n: usize, nu: f64, noise: NoiseProfile, normalized: bool) -> Self {
        Self {
            kind: ModelKind::Burgers,
            normalized,
            n,
            alpha: 0.0,
            nu,
            tensor: None,
            eigenvalues: None,
            basis_scales: None,
            noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_MODES).contains(&self.n) {
            return Err(Error::invalid(
                "model.n",
                format!("{} not in 2..={MAX_MODES}", self.n),
            ));
        }
        if !(0.0..2.0).contains(&self.alpha) {
            return Err(Error::invalid(
                "model.alpha",
                format!("{} not in [0, 2)", self.alpha),
            ));
        }
        if !self.nu.is_finite() {
            return Err(Error::invalid("model.nu", "must be finite"));
        }
        match &self.noise {
            NoiseProfile::None => {}
            NoiseProfile::SingleMode { index, sigma } => {
                if !(1..=self.n).contains(index) {
                    return Err(Error::invalid(
                        "model.noise.index",
                        format!("{index} not in 1..={}", self.n),
                    ));
                }
                finite("model.noise.sigma", *sigma)?;
            }
            NoiseProfile::White { sigma } => finite("model.noise.sigma", *sigma)?,
            NoiseProfile::Custom { q } => {
                if q.len() != self.n {
                    return Err(Error::invalid(
                        "model.noise.q",
                        format!("{} values for n = {}", q.len(), self.n),
                    ));
                }
                if q.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("model.noise.q", "values must be finite"));
                }
            }
        }
        match self.kind {
            ModelKind::Burgers => {
                if self.tensor.is_some() {
                    return Err(Error::invalid("model.tensor", "only for kind = \"custom\""));
                }
                if self.eigenvalues.is_some() {
                    return Err(Error::invalid(
                        "model.eigenvalues",
                        "only for kind = \"custom\"",
                    ));
                }
                if self.basis_scales.is_some() {
                    return Err(Error::invalid(
                        "model.basis_scales",
                        "only for kind = \"custom\"",
                    ));
                }
            }
            ModelKind::Custom => {
                if self.tensor.is_none() {
                    return Err(Error::invalid(
                        "model.tensor",
                        "required for kind = \"custom\"",
                    ));
                }
                match &self.eigenvalues {
                    None => {
                        return Err(Error::invalid(
                            "model.eigenvalues",
                            "required for kind = \"custom\"",
                        ))
                    }
                    Some(ev) if ev.len() != self.n => {
                        return Err(Error::invalid(
                            "model.eigenvalues",
                            format!("{} values for n = {}", ev.len(), self.n),
                        ))
                    }
                    Some(_) => {}
                }
                if let Some(c) = &self.basis_scales {
                    if c.len() != self.n {
                        return Err(Error::invalid(
                            "model.basis_scales",
                            format!("{} values for n = {}", c.len(), self.n),
                        ));
                    }
                }
                if matches!(
                    self.noise,
                    NoiseProfile::SingleMode { .. } | NoiseProfile::White { .. }
                ) {
                    return Err(Error::invalid(
                        "model.noise",
                        "custom models take `none` or `custom` noise",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the model, reading the tensor file for custom models.
    pub fn build(&self) -> Result<(ModelSpec, BilinearTensor)> {
        self.validate()?;
        match self.kind {
            ModelKind::Burgers => {
                let (spec, tensor) =
                    burgers::model(self.n, self.nu, self.noise.clone(), self.normalized)?;
                let spec = spec.with_alpha(self.alpha);
                require_valid(&spec)?;
                Ok((spec, tensor))
            }
            ModelKind::Custom => {
                let path = self.tensor.as_ref().expect("validated");
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("model.tensor: {}: {e}", path.display())))?;
                let tensor = BilinearTensor::parse_text(&text, Some(self.n))?;
                self.build_with_tensor(tensor)
            }
        }
    }

    /// Builds a custom model around an already parsed tensor.
    pub fn build_with_tensor(&self, tensor: BilinearTensor) -> Result<(ModelSpec, BilinearTensor)> {
        let eigenvalues = self
            .eigenvalues
            .clone()
            .ok_or_else(|| Error::invalid("model.eigenvalues", "required for kind = \"custom\""))?;
        if tensor.n() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                found: tensor.n(),
            });
        }
        let q = match &self.noise {
            NoiseProfile::Custom { q } => q.clone(),
            _ => vec![0.0; self.n],
        };
        let mut spec = ModelSpec::new(eigenvalues, q, self.nu)?.with_alpha(self.alpha);
        if let Some(c) = &self.basis_scales {
            spec = spec.with_basis_scales(c.clone())?;
        }
        require_valid(&spec)?;
        Ok((spec, tensor))
    }
}

/// Step size per cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", deny_unknown_fields)]
pub enum StepRule {
    /// `h = eps^2 / 8`.
    #[default]
    #[serde(rename = "eps2_over_8")]
    Eps2Over8,
    /// `h = factor * eps^2`.
    #[serde(rename = "relative")]
    Relative { factor: f64 },
    #[serde(rename = "absolute")]
    Absolute { value: f64 },
}

impl StepRule {
    pub fn resolve(&self, epsilon: f64) -> f64 {
        match *self {
            StepRule::Eps2Over8 => epsilon * epsilon / 8.0,
            StepRule::Relative { factor } => factor * epsilon * epsilon,
            StepRule::Absolute { value } => value,
        }
    }

    pub fn relative_factor(&self) -> Option<f64> {
        match *self {
            StepRule::Eps2Over8 => Some(0.125),
            StepRule::Relative { factor } => Some(factor),
            StepRule::Absolute { .. } => None,
        }
    }

    fn validate(&self, name: &'static str, epsilons: &[f64]) -> Result<()> {
        let raw = match *self {
            StepRule::Eps2Over8 => 0.125,
            StepRule::Relative { factor } => factor,
            StepRule::Absolute { value } => value,
        };
        if !(raw > 0.0 && raw.is_finite()) {
            return Err(Error::invalid(name, format!("{raw} must be positive")));
        }
        for &eps in epsilons {
            let h = self.resolve(eps);
            if h > eps * eps / 4.0 * (1.0 + 1e-12) {
                return Err(Error::invalid(
                    name,
                    format!(
                        "step {h} exceeds eps^2/4 = {} at eps = {eps}",
                        eps * eps / 4.0
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Plain path output: SPDE paths and, optionally, amplitude paths driven by
/// independent noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub epsilons: Vec<f64>,
    pub t_end: f64,
    pub h: StepRule,
    pub paths: usize,
    pub x0: f64,
    pub record_every: usize,
    pub kappa: f64,
    pub tau_scale: f64,
    pub amplitude: bool,
    pub snapshots: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1],
            t_end: 1.0,
            h: StepRule::Eps2Over8,
            paths: 1,
            x0: 1.0,
            record_every: 10,
            kappa: DEFAULT_KAPPA,
            tau_scale: DEFAULT_TAU_SCALE,
            amplitude: true,
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<StepRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupled: Option<CoupledConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<WeakConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qv: Option<QvConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilization: Option<StabilizationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<AveragingConfig>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: DEFAULT_SEED,
            workers: 1,
            out: default_out(),
            epsilons: None,
            t_end: None,
            batch: None,
            h: None,
            model: None,
            simulate: None,
            coupled: None,
            weak: None,
            qv: None,
            stabilization: None,
            averaging: None,
        }
    }
}

fn finite(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} is not finite")))
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} must be positive")))
    }
}

fn at_least(name: &'static str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} < {min}")))
    }
}

fn ladder(name: &'static str, eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::invalid(name, "empty ladder"));
    }
    for (i, &e) in eps.iter().enumerate() {
        positive(name, e)?;
        if eps[..i].contains(&e) {
            return Err(Error::invalid(name, format!("{e} repeated")));
        }
    }
    Ok(())
}

fn relative_step(name: &'static str, factor: f64) -> Result<()> {
    positive(name, factor)?;
    if factor > 0.25 * (1.0 + 1e-12) {
        return Err(Error::invalid(name, format!("{factor} exceeds 1/4")));
    }
    Ok(())
}

fn stopping(
    kappa_name: &'static str,
    kappa: f64,
    scale_name: &'static str,
    scale: f64,
) -> Result<()> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(
            kappa_name,
            format!("{kappa} must be nonnegative"),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid(
            scale_name,
            format!("{scale} must be positive"),
        ));
    }
    Ok(())
}

fn validate_simulate(c: &SimulateConfig) -> Result<()> {
    ladder("simulate.epsilons", &c.epsilons)?;
    positive("simulate.t_end", c.t_end)?;
    c.h.validate("simulate.h", &c.epsilons)?;
    at_least("simulate.paths", c.paths, 1)?;
    finite("simulate.x0", c.x0)?;
    at_least("simulate.record_every", c.record_every, 1)?;
    stopping("simulate.kappa", c.kappa, "simulate.tau_scale", c.tau_scale)
}

fn validate_coupled(c: &CoupledConfig) -> Result<()> {
    ladder("coupled.epsilons", &c.epsilons)?;
    finite("coupled.sigma", c.sigma)?;
    finite("coupled.nu", c.nu)?;
    if !(3..=MAX_MODES).contains(&c.n) {
        return Err(Error::invalid(
            "coupled.n",
            format!("{} not in 3..={MAX_MODES}", c.n),
        ));
    }
    positive("coupled.t_end", c.t_end)?;
    at_least("coupled.batch", c.batch, 1)?;
    relative_step("coupled.h_over_eps2", c.h_over_eps2)?;
    finite("coupled.x0", c.x0)?;
    stopping("coupled.kappa", c.kappa, "coupled.tau_scale", c.tau_scale)?;
    at_least("coupled.record_every", c.record_every, 1)?;
    finite("coupled.slope_threshold", c.slope_threshold)?;
    positive("coupled.max_censoring", c.max_censoring)
}

fn validate_weak(c: &WeakConfig) -> Result<()> {
    ladder("weak.epsilons", &c.epsilons)?;
    positive("weak.t_end", c.t_end)?;
    at_least("weak.batch", c.batch, 2)?;
    at_least("weak.amplitude_batch", c.amplitude_batch, 2)?;
    relative_step("weak.h_over_eps2", c.h_over_eps2)?;
    positive("weak.amplitude_h", c.amplitude_h)?;
    if c.probes.iter().any(|&p| !(0.0..=c.t_end).contains(&p)) {
        return Err(Error::invalid(
            "weak.probes",
            format!("probes must lie in [0, {}]", c.t_end),
        ));
    }
    finite("weak.x0", c.x0)?;
    stopping("weak.kappa", c.kappa, "weak.tau_scale", c.tau_scale)?;
    positive("weak.max_censoring", c.max_censoring)
}

fn validate_qv(c: &QvConfig) -> Result<()> {
    ladder("qv.epsilons", &c.epsilons)?;
    positive("qv.t_end", c.t_end)?;
    at_least("qv.batch", c.batch, 2)?;
    relative_step("qv.h_over_eps2", c.h_over_eps2)?;
    finite("qv.x0", c.x0)?;
    at_least("qv.record_every", c.record_every, 1)?;
    stopping("qv.kappa", c.kappa, "qv.tau_scale", c.tau_scale)?;
    finite("qv.slope_threshold", c.slope_threshold)?;
    positive("qv.max_censoring", c.max_censoring)
}

fn validate_stabilization(c: &StabilizationConfig) -> Result<()> {
    if c.sigma_squared.is_empty()
        || c.sigma_squared
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
    {
        return Err(Error::invalid(
            "stabilization.sigma_squared",
            "needs nonnegative finite values",
        ));
    }
    finite("stabilization.nu", c.nu)?;
    if !(3..=MAX_MODES).contains(&c.n) {
        return Err(Error::invalid(
            "stabilization.n",
            format!("{} not in 3..={MAX_MODES}", c.n),
        ));
    }
    positive("stabilization.amplitude_t_end", c.amplitude_t_end)?;
    positive("stabilization.amplitude_h", c.amplitude_h)?;
    at_least("stabilization.amplitude_batch", c.amplitude_batch, 2)?;
    if !(0.0..1.0).contains(&c.burn_in_fraction) {
        return Err(Error::invalid(
            "stabilization.burn_in_fraction",
            "must lie in [0, 1)",
        ));
    }
    positive("stabilization.tolerance", c.tolerance)?;
    if c.full_sigma_squared
        .iter()
        .any(|s| !(*s >= 0.0 && s.is_finite()))
    {
        return Err(Error::invalid(
            "stabilization.full_sigma_squared",
            "needs nonnegative finite values",
        ));
    }
    positive("stabilization.full_epsilon", c.full_epsilon)?;
    positive("stabilization.full_t_end", c.full_t_end)?;
    if !c.full_sigma_squared.is_empty() {
        at_least("stabilization.full_batch", c.full_batch, 1)?;
    }
    positive("stabilization.full_x0", c.full_x0)?;
    relative_step("stabilization.full_h_over_eps2", c.full_h_over_eps2)
}

fn validate_averaging(c: &AveragingConfig) -> Result<()> {
    ladder("averaging.epsilons", &c.epsilons)?;
    positive("averaging.t_end", c.t_end)?;
    at_least("averaging.batch", c.batch, 100)?;
    relative_step("averaging.h_over_eps2", c.h_over_eps2)?;
    if c.monomials.is_empty() || c.monomials.iter().any(|m| m.is_empty() || m.len() > 4) {
        return Err(Error::invalid(
            "averaging.monomials",
            "each monomial needs 1 to 4 modes",
        ));
    }
    finite("averaging.slope_target", c.slope_target)?;
    positive("averaging.slope_tolerance", c.slope_tolerance)
}

/// Default model per task when the config has no `[model]` section.
pub fn default_model(task: Task) -> Option<ModelConfig> {
    let white = |n| ModelConfig::burgers(n, 1.0, NoiseProfile::White { sigma: 1.0 }, true);
    match task {
        Task::Coeffs | Task::Simulate => Some(ModelConfig::burgers(
            32,
            1.0,
            NoiseProfile::SingleMode {
                index: 2,
                sigma: 1.0,
            },
            false,
        )),
        Task::Experiment(Experiment::Weak | Experiment::Qv) => Some(white(32)),
        Task::Experiment(Experiment::Averaging) => Some(white(8)),
        Task::Experiment(Experiment::Coupled | Experiment::Stabilization) => None,
    }
}

/// Top-level overrides for a ladder section.
struct Ladder<'a> {
    epsilons: &'a mut Vec<f64>,
    t_end: &'a mut f64,
    batch: &'a mut usize,
    h_over_eps2: &'a mut f64,
}

impl RunConfig {
    /// Parses and validates TOML text. Relative tensor paths are kept as
    /// written.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `model.tensor` is taken relative to
    /// the file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(t) = cfg.model.as_mut().and_then(|m| m.tensor.as_mut()) {
            if t.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                *t = base.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The config as embedded in output files. `workers` and `out` are
    /// left out: they do not affect results, and reports must not depend on
    /// them.
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or(serde_json::Value::Null);
        if let Some(map) = v.as_object_mut() {
            map.remove("workers");
            map.remove("out");
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.workers > 1024 {
            return Err(Error::invalid(
                "workers",
                format!("{} not in 1..=1024", self.workers),
            ));
        }
        if let Some(eps) = &self.epsilons {
            ladder("epsilons", eps)?;
        }
        if let Some(t) = self.t_end {
            positive("t_end", t)?;
        }
        if let Some(b) = self.batch {
            at_least("batch", b, 1)?;
        }
        if let Some(h) = &self.h {
            h.validate("h", self.epsilons.as_deref().unwrap_or(&[]))?;
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(c) = &self.simulate {
            validate_simulate(c)?;
        }
        if let Some(c) = &self.coupled {
            validate_coupled(c)?;
        }
        if let Some(c) = &self.weak {
            validate_weak(c)?;
        }
        if let Some(c) = &self.qv {
            validate_qv(c)?;
        }
        if let Some(c) = &self.stabilization {
            validate_stabilization(c)?;
        }
        if let Some(c) = &self.averaging {
            validate_averaging(c)?;
        }
        Ok(())
    }

    fn fold_ladder(&self, target: Ladder<'_>) -> Result<()> {
        if let Some(eps) = &self.epsilons {
            *target.epsilons = eps.clone();
        }
        if let Some(t) = self.t_end {
            *target.t_end = t;
        }
        if let Some(b) = self.batch {
            *target.batch = b;
        }
        if let Some(h) = &self.h {
            *target.h_over_eps2 = h.relative_factor().ok_or_else(|| {
                Error::invalid(
                    "h",
                    "experiments step at a fixed multiple of eps^2; use rule = \"relative\"",
                )
            })?;
        }
        Ok(())
    }

    /// Returns the config a command runs with: the relevant section filled
    /// from defaults and top-level overrides, the model made explicit, and
    /// everything else dropped. Resolving twice gives the same result.
    pub fn resolve(&self, task: Task) -> Result<Self> {
        self.validate()?;
        let mut out = RunConfig {
            experiment: None,
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
            ..RunConfig::default()
        };
        let model = self.model.clone().or_else(|| default_model(task));
        match task {
            Task::Coeffs => {
                out.model = model;
            }
            Task::Simulate => {
                let mut c = self.simulate.clone().unwrap_or_default();
                if let Some(eps) = &self.epsilons {
                    c.epsilons = eps.clone();
                }
                if let Some(t) = self.t_end {
                    c.t_end = t;
                }
                if let Some(b) = self.batch {
                    c.paths = b;
                }
                if let Some(h) = self.h {
                    c.h = h;
                }
                validate_simulate(&c)?;
                out.model = model;
                out.simulate = Some(c);
            }
            Task::Experiment(exp) => {
                out.experiment = Some(exp);
                match exp {
                    Experiment::Coupled | Experiment::Stabilization if self.model.is_some() => {
                        return Err(Error::invalid(
                            "model",
                            format!("the {exp} experiment builds its own Burgers model; set its parameters under [{exp}]"),
                        ));
                    }
                    _ => {}
                }
                match exp {
                    Experiment::Coupled => {
                        let mut c = self.coupled.clone().unwrap_or_default();
                        self.fold_ladder(Ladder {
                            epsilons: &mut c.epsilons,
                            t_end: &mut c.t_end,
                            batch: &mut c.batch,
                            h_over_eps2: &mut c.h_over_eps2,
                        })?;
                        validate_coupled(&c)?;
                        out.coupled = Some(c);
                    }
                    Experiment::Weak => {
                        let mut c = self.weak.clone().unwrap_or_default();
                        self.fold_ladder(Ladder {
                            epsilons: &mut c.epsilons,
                            t_end: &mut c.t_end,
                            batch: &mut c.batch,
                            h_over_eps2: &mut c.h_over_eps2,
                        })?;
                        validate_weak(&c)?;
                        out.weak = Some(c);
                        out.model = model;
                    }
                    Experiment::Qv => {
                        let mut c = self.qv.clone().unwrap_or_default();
                        self.fold_ladder(Ladder {
                            epsilons: &mut c.epsilons,
                            t_end: &mut c.t_end,
                            batch: &mut c.batch,
                            h_over_eps2: &mut c.h_over_eps2,
                        })?;
                        validate_qv(&c)?;
                        out.qv = Some(c);
                        out.model = model;
                    }
                    Experiment::Averaging => {
                        let mut c = self.averaging.clone().unwrap_or_default();
                        self.fold_ladder(Ladder {
                            epsilons: &mut c.epsilons,
                            t_end: &mut c.t_end,
                            batch: &mut c.batch,
                            h_over_eps2: &mut c.h_over_eps2,
                        })?;
                        validate_averaging(&c)?;
                        out.averaging = Some(c);
                        out.model = model;
                    }
                    Experiment::Stabilization => {
                        let mut c = self.stabilization.clone().unwrap_or_default();
                        if let Some(eps) = &self.epsilons {
                            if eps.len() != 1 {
                                return Err(Error::invalid(
                                    "epsilons",
                                    "stabilization takes a single eps (its full-system scale)",
                                ));
                            }
                            c.full_epsilon = eps[0];
                        }
                        if self.t_end.is_some() {
                            return Err(Error::invalid(
                                "t_end",
                                "ambiguous for stabilization; set amplitude_t_end or full_t_end",
                            ));
                        }
                        if self.batch.is_some() {
                            return Err(Error::invalid(
                                "batch",
                                "ambiguous for stabilization; set amplitude_batch or full_batch",
                            ));
                        }
                        if let Some(h) = &self.h {
                            c.full_h_over_eps2 = h.relative_factor().ok_or_else(|| {
                                Error::invalid("h", "experiments step at a fixed multiple of eps^2; use rule = \"relative\"")
                            })?;
                        }
                        validate_stabilization(&c)?;
                        out.stabilization = Some(c);
                    }
                }
            }
        }
        Ok(out)
    }

    fn context(&self) -> RunContext {
        RunContext::new(self.seed, self.workers)
    }

    fn resolved_model(&self) -> Result<(ModelSpec, BilinearTensor)> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::invalid("model", "missing; resolve the config first"))?
            .build()
    }
}

fn section<T>(s: &Option<T>, exp: Experiment) -> Result<&T> {
    s.as_ref()
        .ok_or_else(|| Error::Config(format!("section [{exp}] missing; resolve the config first")))
}

/// Runs the experiment selected by a resolved config and embeds the config
/// in the report.
pub fn run_experiment(resolved: &RunConfig) -> Result<ExperimentReport> {
    let exp = resolved
        .experiment
        .ok_or_else(|| Error::invalid("experiment", "no experiment selected"))?;
    let ctx = resolved.context();
    let mut report = match exp {
        Experiment::Coupled => {
            analysis::coupled_error_experiment(section(&resolved.coupled, exp)?, &ctx)?
        }
        Experiment::Stabilization => {
            analysis::stabilization_experiment(section(&resolved.stabilization, exp)?, &ctx)?
        }
        Experiment::Weak => {
            let (spec, tensor) = resolved.resolved_model()?;
            analysis::weak_error_experiment(&spec, &tensor, section(&resolved.weak, exp)?, &ctx)?
        }
        Experiment::Qv => {
            let (spec, tensor) = resolved.resolved_model()?;
            analysis::qv_discrepancy_experiment(&spec, &tensor, section(&resolved.qv, exp)?, &ctx)?
        }
        Experiment::Averaging => {
            let (spec, _) = resolved.resolved_model()?;
            analysis::averaging_statistics(&spec, section(&resolved.averaging, exp)?, &ctx)?
        }
    };
    report.config = Some(resolved.to_json_value());
    Ok(report)
}

/// Coefficients of the resolved model.
pub fn coefficient_report(resolved: &RunConfig) -> Result<CoefficientReport> {
    let (spec, tensor) = resolved.resolved_model()?;
    let coefficients = compute_coefficients(&spec, &tensor)?;
    Ok(CoefficientReport {
        version: VERSION.to_string(),
        coefficients,
        lyapunov_exponent: lyapunov_exponent(&coefficients).ok(),
        config: resolved.to_json_value(),
    })
}

/// A file to be written under the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

/// Simulated paths as CSV files, one per eps and replica.
pub fn simulate_outputs(resolved: &RunConfig) -> Result<Vec<OutputFile>> {
    let sim = resolved.simulate.as_ref().ok_or_else(|| {
        Error::Config("section [simulate] missing; resolve the config first".into())
    })?;
    let (spec, tensor) = resolved.resolved_model()?;
    let coeffs = compute_coefficients(&spec, &tensor)?;
    let ctx = resolved.context();
    let config = resolved.to_json_value();
    let v0 = SpectralField::from_vec({
        let mut v = vec![0.0; spec.n()];
        v[0] = sim.x0;
        v
    });
    let mut files = Vec::new();
    for (cell, &eps) in sim.epsilons.iter().enumerate() {
        let mut spde = SpdeConfig::new(eps, sim.t_end).with_h(sim.h.resolve(eps));
        spde.kappa = sim.kappa;
        spde.tau_scale = sim.tau_scale;
        spde.record_every = sim.record_every;
        spde.record_snapshots = sim.snapshots;
        spde.validate()?;
        let (_, h) = spde.resolved_steps();
        let per_path = run_replicas(ctx.workers, sim.paths, |r| -> Result<Vec<OutputFile>> {
            let mut out = Vec::new();
            let mut stream = ctx.stream(SIMULATE, cell, 0, r);
            let rec = simulate_full(&spec, &tensor, &spde, &v0, &mut stream)?;
            out.push(OutputFile {
                name: format!("path_eps{eps}_r{r}.csv"),
                contents: annotate_csv(&rec.to_csv(), &config),
            });
            if let Some(snap) = rec.snapshots_csv() {
                out.push(OutputFile {
                    name: format!("snapshots_eps{eps}_r{r}.csv"),
                    contents: annotate_csv(&snap, &config),
                });
            }
            if sim.amplitude {
                let mut stream = ctx.stream(SIMULATE, cell, 1, r);
                let path = simulate_amplitude(
                    &coeffs,
                    sim.x0,
                    sim.t_end,
                    h,
                    IncrementSource::Stream(&mut stream),
                    AmplitudeOptions::default(),
                    sim.record_every,
                )?;
                out.push(OutputFile {
                    name: format!("amplitude_eps{eps}_r{r}.csv"),
                    contents: annotate_csv(&path.to_csv(), &config),
                });
            }
            Ok(out)
        })?;
        for batch in per_path {
            files.extend(batch?);
        }
    }
    Ok(files)
}
