use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite::{EmVariant, StopRule};
use crate::kernel::DensityKernel;
use crate::quadrature::QuadratureSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Moments,
    #[default]
    Population,
    Bounds,
    Dynamics,
    Finite,
    Sweep,
    Lowsnr,
    DumpMoments,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Moments => "moments",
            Experiment::Population => "population",
            Experiment::Bounds => "bounds",
            Experiment::Dynamics => "dynamics",
            Experiment::Finite => "finite",
            Experiment::Sweep => "sweep",
            Experiment::Lowsnr => "lowsnr",
            Experiment::DumpMoments => "dump-moments",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub d: usize,
    pub sigma: f64,
    /// `(pi*(1), pi*(2))`; only matters when `eta > 0`.
    pub pi_star: (f64, f64),
    pub eta: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            d: 4,
            sigma: 1.0,
            pi_star: (0.5, 0.5),
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialState {
    pub alpha0: f64,
    /// `tanh(nu0) = pi0(1) - pi0(2)`.
    pub nu0: f64,
    pub rho0: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            alpha0: 0.1,
            nu0: 0.0,
            rho0: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    #[serde(rename = "T")]
    pub steps: usize,
    pub n: usize,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub epsilon: f64,
    pub samples: usize,
    pub resample: bool,
    /// Freeze the mixing weights at `nu0` in finite-sample runs.
    pub fixed_weights: bool,
    pub variant: EmVariant,
    pub stop_rule: StopRule,
    pub safety: f64,
    pub window: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 200,
            n: 1 << 14,
            n_grid: (10..=16).map(|k| 1usize << k).collect(),
            trials: 50,
            epsilon: 0.01,
            samples: 1_000_000,
            resample: true,
            fixed_weights: true,
            variant: EmVariant::Standard,
            stop_rule: StopRule::Budget,
            safety: 8.0,
            window: 20,
        }
    }
}

/// Grids for table-style experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    pub alphas: Vec<f64>,
    pub nus: Vec<f64>,
    pub betas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub etas: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.1, 0.2],
            nus: vec![0.0, 0.25, 0.5, 1.0],
            betas: vec![0.1, 0.3, 0.5],
            rhos: vec![0.2, 0.5, 0.8],
            etas: vec![0.0, 0.01, 0.02, 0.04],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: Experiment,
    pub kernel: DensityKernel,
    pub model: ModelParams,
    pub initial: InitialState,
    pub schedule: Schedule,
    pub grids: Grids,
    pub quad: QuadratureSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            experiment: Experiment::default(),
            kernel: DensityKernel::default(),
            model: ModelParams::default(),
            initial: InitialState::default(),
            schedule: Schedule::default(),
            grids: Grids::default(),
            quad: QuadratureSpec::default(),
            seed: 0,
            output_dir: PathBuf::from("em2mlr-out"),
        }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(super::manifest::sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(bad("version", format!("unsupported config version {}", self.version)));
        }
        self.quad.validate().map_err(|e| bad("quad", e))?;
        let m = &self.model;
        if m.d == 0 {
            return Err(bad("model.d", "must be at least 1"));
        }
        if !(m.sigma > 0.0) || !m.sigma.is_finite() {
            return Err(bad("model.sigma", "must be positive"));
        }
        let (p1, p2) = m.pi_star;
        if !(p1 > 0.0 && p2 > 0.0) || (p1 + p2 - 1.0).abs() > 1e-12 {
            return Err(bad("model.pi_star", "entries must be positive and sum to 1"));
        }
        if !(m.eta >= 0.0) || !m.eta.is_finite() {
            return Err(bad("model.eta", "must be finite and >= 0"));
        }
        let i = &self.initial;
        if !(i.alpha0 >= 0.0) || !i.alpha0.is_finite() {
            return Err(bad("initial.alpha0", "must be finite and >= 0"));
        }
        if !i.nu0.is_finite() {
            return Err(bad("initial.nu0", "must be finite"));
        }
        if !(i.rho0.abs() <= 1.0) {
            return Err(bad("initial.rho0", "must lie in [-1, 1]"));
        }
        let s = &self.schedule;
        if s.steps == 0 {
            return Err(bad("schedule.T", "must be at least 1"));
        }
        if s.n == 0 || s.trials == 0 || s.window == 0 {
            return Err(bad("schedule", "n, trials and window must be positive"));
        }
        if !(s.epsilon > 0.0 && s.epsilon <= std::f64::consts::FRAC_2_PI) {
            return Err(bad("schedule.epsilon", "must lie in (0, 2/pi]"));
        }
        if !(s.safety > 0.0) {
            return Err(bad("schedule.safety", "must be positive"));
        }
        let g = &self.grids;
        if g.alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(bad("grids.alphas", "entries must be finite and >= 0"));
        }
        if g.nus.iter().any(|v| !v.is_finite()) {
            return Err(bad("grids.nus", "entries must be finite"));
        }
        if g.betas.iter().any(|b| !(b.abs() < 1.0)) {
            return Err(bad("grids.betas", "entries must lie in (-1, 1)"));
        }
        if g.rhos.iter().any(|r| !(r.abs() <= 1.0)) {
            return Err(bad("grids.rhos", "entries must lie in [-1, 1]"));
        }
        if g.etas.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(bad("grids.etas", "entries must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn beta0(&self) -> f64 {
        self.initial.nu0.tanh()
    }

    pub fn beta_star(&self) -> f64 {
        self.model.pi_star.0 - self.model.pi_star.1
    }
}

/// Parse `2^10..2^16` (powers of two, inclusive) or a comma-separated list.
pub fn parse_n_grid(text: &str) -> Result<Vec<usize>> {
    let err = || {
        Error::Config(format!(
            "n grid `{text}`: expected `2^a..2^b` or a comma-separated list"
        ))
    };
    if let Some((lo, hi)) = text.split_once("..") {
        let exp = |s: &str| -> Result<u32> { s.trim().strip_prefix("2^").ok_or_else(err)?.parse().map_err(|_| err()) };
        let (a, b) = (exp(lo)?, exp(hi)?);
        if a > b || b > 40 {
            return Err(err());
        }
        return Ok((a..=b).map(|k| 1usize << k).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| err())).collect()
}

pub fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{what}: `{s}` is not a number")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"version": 1, "bogus": 3}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_json("{\n \"model\": {\"dd\": 3}}").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let c = ExperimentConfig::from_json(r#"{"experiment": "sweep", "schedule": {"T": 5}}"#).unwrap();
        assert_eq!(c.experiment, Experiment::Sweep);
        assert_eq!(c.schedule.steps, 5);
        assert_eq!(c.schedule.trials, 50);
    }

    #[test]
    fn validation_names_fields() {
        let mut c = ExperimentConfig::default();
        c.model.pi_star = (0.6, 0.6);
        assert!(c.validate().unwrap_err().to_string().contains("model.pi_star"));
        let c = ExperimentConfig {
            version: 7,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn n_grids() {
        assert_eq!(parse_n_grid("2^10..2^12").unwrap(), vec![1024, 2048, 4096]);
        assert_eq!(parse_n_grid("100, 200").unwrap(), vec![100, 200]);
        assert!(parse_n_grid("2^12..2^10").is_err());
        assert!(parse_n_grid("x").is_err());
    }
}
