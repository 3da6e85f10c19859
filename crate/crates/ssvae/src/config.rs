//! JSON configuration records for each subcommand.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use ssvae_core::estimation::{CorollaryConfig, FitConfig, GradientMode, ScalingConfig};
use ssvae_core::optim::OptimOptions;
use ssvae_core::ssm::{build_finite_ssm, FiniteSSM, FunctionalARModel, ModelShape};
use ssvae_core::variational::{ContextMode, VariationalFamily};
use ssvae_core::DEFAULT_ENUM_CAP;

/// A model given by its chart parameter, by explicit tables, or as the
/// functional autoregressive generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Theta {
        #[serde(rename = "K")]
        states: usize,
        #[serde(rename = "V")]
        symbols: usize,
        theta: Vec<f64>,
    },
    Tables {
        #[serde(rename = "K")]
        states: usize,
        #[serde(rename = "V")]
        symbols: usize,
        transition: Vec<f64>,
        emission: Vec<f64>,
        initial: Vec<f64>,
    },
    Autoregressive {
        autoregressive: FunctionalARModel,
    },
}

impl ModelSpec {
    pub fn finite(&self) -> Result<FiniteSSM> {
        match self {
            ModelSpec::Theta {
                states,
                symbols,
                theta,
            } => Ok(build_finite_ssm(theta, *states, *symbols)?),
            ModelSpec::Tables {
                states,
                symbols,
                transition,
                emission,
                initial,
            } => Ok(FiniteSSM::from_tables(
                *states,
                *symbols,
                transition.clone(),
                emission.clone(),
                initial.clone(),
            )?),
            ModelSpec::Autoregressive { .. } => {
                bail!("a finite model is required here, got an autoregressive one")
            }
        }
    }
}

/// `{"context_mode": "window", "w": 1, "K": 2, "phi": [...]}`. `phi` is an
/// optional starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalSpec {
    pub context_mode: String,
    #[serde(default)]
    pub w: Option<usize>,
    #[serde(rename = "K")]
    pub states: usize,
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub floor: f64,
}

fn default_radius() -> f64 {
    6.0
}

impl VariationalSpec {
    pub fn mode(&self) -> Result<ContextMode> {
        Ok(match self.context_mode.as_str() {
            "full-prefix" => ContextMode::FullPrefix,
            "window" => ContextMode::Window(
                self.w
                    .context("context_mode \"window\" needs a window length \"w\"")?,
            ),
            "shared" => ContextMode::Shared,
            "model-backward" => ContextMode::ModelBackward,
            other => bail!("unknown context_mode {other:?}"),
        })
    }

    pub fn family(&self, symbols: usize, horizon: usize, cap: usize) -> Result<VariationalFamily> {
        let fam = VariationalFamily::new(
            self.states,
            symbols,
            horizon,
            self.mode()?,
            self.floor,
            self.radius,
            cap,
        )?;
        if let Some(phi) = &self.phi {
            if phi.len() != fam.dim() {
                bail!("phi has length {}, the family needs {}", phi.len(), fam.dim());
            }
        }
        Ok(fam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub model: ModelSpec,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Model to certify; its constants are reported with `family` and `y`.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub family: Option<VariationalSpec>,
    #[serde(default)]
    pub y: Option<Vec<usize>>,
    /// Half-width of the box around the model's parameter for the Lipschitz
    /// constants; zero freezes it.
    #[serde(default)]
    pub model_radius: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_gaussian_trials")]
    pub gaussian_trials: usize,
    #[serde(default = "default_integral_trials")]
    pub integral_trials: usize,
    #[serde(default = "default_pairs")]
    pub integral_pairs: usize,
    #[serde(default = "default_levels")]
    pub epsilon_levels: Vec<f64>,
    #[serde(default = "default_trend_instances")]
    pub trend_instances: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub enum_cap: usize,
}

fn default_trials() -> usize {
    500
}
fn default_gaussian_trials() -> usize {
    10_000
}
fn default_integral_trials() -> usize {
    200
}
fn default_pairs() -> usize {
    20
}
fn default_levels() -> Vec<f64> {
    vec![2.0, 1.0, 0.5, 0.25, 0.1]
}
fn default_trend_instances() -> usize {
    20
}
fn default_cap() -> usize {
    DEFAULT_ENUM_CAP
}

impl Default for VerifyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Where `fit` gets its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    File { dataset: String },
    Generate { generate: GenConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCmdConfig {
    pub data: DataSource,
    /// Center of the model box; defaults to the origin of the chart.
    #[serde(default)]
    pub theta_center: Option<Vec<f64>>,
    #[serde(rename = "K")]
    pub states: usize,
    #[serde(default = "default_radius")]
    pub model_radius: f64,
    pub family: VariationalSpec,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub options: OptimOptions,
    #[serde(default)]
    pub central_difference: bool,
    /// Data-generating model for exact risk, when known.
    #[serde(default)]
    pub data_model: Option<ModelSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub enum_cap: usize,
}

fn default_starts() -> usize {
    8
}

impl FitCmdConfig {
    /// A `phi` in the family spec becomes a warm start next to `center`.
    pub fn fit_config(&self, center: &[f64]) -> FitConfig {
        let warm_starts = match &self.family.phi {
            Some(phi) => vec![[center, phi.as_slice()].concat()],
            None => Vec::new(),
        };
        FitConfig {
            starts: self.starts,
            options: self.options,
            seed: self.seed,
            gradient: if self.central_difference {
                GradientMode::CentralDifference
            } else {
                GradientMode::Analytic
            },
            fd_step: 1e-6,
            warm_starts,
        }
    }

    pub fn center(&self, shape: ModelShape) -> Result<Vec<f64>> {
        match &self.theta_center {
            Some(c) if c.len() == shape.param_dim() => Ok(c.clone()),
            Some(c) => bail!(
                "theta_center has length {}, expected {}",
                c.len(),
                shape.param_dim()
            ),
            None => Ok(vec![0.0; shape.param_dim()]),
        }
    }
}

/// `report` reads artifacts from this directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(default)]
    pub input: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
    fn set_cap(&mut self, _cap: usize) {}
}

impl Seeded for GenConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Seeded for VerifyConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_cap(&mut self, cap: usize) {
        self.enum_cap = cap;
    }
}

impl Seeded for FitCmdConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_cap(&mut self, cap: usize) {
        self.enum_cap = cap;
    }
}

impl Seeded for ScalingConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_cap(&mut self, cap: usize) {
        self.enum_cap = cap;
    }
}

impl Seeded for CorollaryConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_cap(&mut self, cap: usize) {
        self.enum_cap = cap;
    }
}

impl Seeded for ReportConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_specs_parse() {
        let m: ModelSpec =
            serde_json::from_str(r#"{"K":2,"V":2,"theta":[0.1,0.2,0.3,0.4,0.5]}"#).unwrap();
        assert_eq!(m.finite().unwrap().states(), 2);
        let t: ModelSpec = serde_json::from_str(
            r#"{"K":2,"V":2,"transition":[0.9,0.1,0.2,0.8],"emission":[0.7,0.3,0.4,0.6],"initial":[0.5,0.5]}"#,
        )
        .unwrap();
        assert!(matches!(t, ModelSpec::Tables { .. }));
        assert!((t.finite().unwrap().trans(1, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn variational_spec_modes() {
        let v: VariationalSpec =
            serde_json::from_str(r#"{"context_mode":"window","w":1,"K":2}"#).unwrap();
        assert_eq!(v.mode().unwrap(), ContextMode::Window(1));
        let bad: VariationalSpec =
            serde_json::from_str(r#"{"context_mode":"window","K":2}"#).unwrap();
        assert!(bad.mode().is_err());
        let fam = v.family(2, 3, 1000).unwrap();
        assert_eq!(fam.horizon, 3);
    }

    #[test]
    fn verify_defaults() {
        let c = VerifyConfig::default();
        assert_eq!(c.trials, 500);
        assert_eq!(c.gaussian_trials, 10_000);
    }
}
