//! Experiment configuration: one flat record that fully determines a run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{System, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{build_layers, HiddenLayer, Layer};
use crate::ode::{Method, SolverConfig};
use crate::penalty::{LossRegime, Regime, DEFAULT_FEASIBILITY_TOL};

/// Published iteration budget.
pub const PUBLISHED_K_MAX: usize = 10_000;
/// Default budget for desk-scale runs.
pub const DESK_K_MAX: usize = 2_000;
/// Published Adam learning rate.
pub const PUBLISHED_LR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Vanilla,
    Quadratic,
    SelfAdaptive,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Vanilla => "vanilla",
            MethodKind::Quadratic => "quadratic",
            MethodKind::SelfAdaptive => "self-adaptive",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(MethodKind::Vanilla),
            "quadratic" => Ok(MethodKind::Quadratic),
            "self-adaptive" => Ok(MethodKind::SelfAdaptive),
            other => Err(Error::config(format!(
                "unknown method `{other}` (valid: vanilla, quadratic, self-adaptive)"
            ))),
        }
    }
}

/// `preset` (the system's shipped network), a system name, or a comma list
/// of hidden layers such as `linear:50,tanh,linear:50,elu`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    Preset(Option<System>),
    Hidden(Vec<HiddenLayer>),
}

impl Architecture {
    pub fn layers(&self, system: System) -> Result<Vec<Layer>> {
        let hidden = match self {
            Architecture::Preset(None) => system.preset_hidden(),
            Architecture::Preset(Some(other)) => {
                if other.dim() != system.dim() {
                    return Err(Error::config(format!(
                        "{other} network has {} inputs but {system} has {} states",
                        other.dim(),
                        system.dim()
                    )));
                }
                other.preset_hidden()
            }
            Architecture::Hidden(h) => h.clone(),
        };
        build_layers(system.dim(), &hidden)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Preset(None) => f.write_str("preset"),
            Architecture::Preset(Some(s)) => f.write_str(s.name()),
            Architecture::Hidden(layers) => {
                let parts: Vec<String> = layers.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "preset" {
            return Ok(Architecture::Preset(None));
        }
        if let Ok(system) = s.parse::<System>() {
            return Ok(Architecture::Preset(Some(system)));
        }
        if s.is_empty() {
            return Ok(Architecture::Hidden(Vec::new()));
        }
        s.split(',')
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(Architecture::Hidden)
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_architecture() -> Architecture {
    Architecture::Preset(None)
}
fn default_k_max() -> usize {
    DESK_K_MAX
}
fn default_lr() -> f64 {
    PUBLISHED_LR
}
fn default_substeps() -> usize {
    1
}
fn default_tol() -> f64 {
    DEFAULT_FEASIBILITY_TOL
}

/// Everything that determines a run. Serialised flat, field names matching CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: System,
    pub task: TaskKind,
    pub method: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default)]
    pub solver: Method,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_tol")]
    pub feasibility_tol: f64,
    #[serde(default)]
    pub zero_threshold: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl ExperimentConfig {
    pub fn new(system: System, task: TaskKind, method: MethodKind) -> Self {
        Self {
            system,
            task,
            method,
            mu: None,
            seed: 0,
            k_max: DESK_K_MAX,
            lr: PUBLISHED_LR,
            architecture: Architecture::Preset(None),
            solver: Method::Rk4,
            substeps: 1,
            feasibility_tol: DEFAULT_FEASIBILITY_TOL,
            zero_threshold: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_k_max(mut self, k_max: usize) -> Self {
        self.k_max = k_max;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn regime(&self) -> Result<LossRegime> {
        let regime = match (self.method, self.mu) {
            (MethodKind::Quadratic, Some(mu)) => Regime::Quadratic { mu },
            (MethodKind::Quadratic, None) => {
                return Err(Error::config("method quadratic requires --mu"))
            }
            (_, Some(_)) => {
                return Err(Error::config(format!(
                    "--mu only applies to method quadratic, not {}",
                    self.method
                )))
            }
            (MethodKind::Vanilla, None) => Regime::Vanilla,
            (MethodKind::SelfAdaptive, None) => Regime::SelfAdaptive,
        };
        let r = LossRegime {
            regime,
            feasibility_tol: self.feasibility_tol,
            zero_threshold: self.zero_threshold,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            method: self.solver,
            substeps: self.substeps,
        }
    }

    /// Label used to group runs: `vanilla`, `quadratic(mu=10)` or `self-adaptive`.
    pub fn method_label(&self) -> String {
        match (self.method, self.mu) {
            (MethodKind::Quadratic, Some(mu)) => format!("quadratic(mu={mu})"),
            (m, _) => m.name().to_string(),
        }
    }

    /// Directory name for this run under an output root.
    pub fn run_name(&self) -> String {
        let method = match (self.method, self.mu) {
            (MethodKind::Quadratic, Some(mu)) => format!("quadratic-mu{mu}"),
            (m, _) => m.name().to_string(),
        };
        format!("{}_{}_{}_seed{}", self.system, self.task, method, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.regime()?;
        if self.k_max == 0 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.substeps == 0 {
            return Err(Error::config("substeps must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        self.architecture.layers(self.system)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
