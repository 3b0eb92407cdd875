//! Run configuration. Every section has defaults; unknown keys are rejected so
//! a typo in a config file fails loudly instead of silently using a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::optim::AdamConfig;
use crate::synth_world::{PretrainConfig, WorldConfig};
use crate::uncertainty::ExplorationSettings;
use crate::visual_noise::ScheduleInterpretation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dpo,
    Uedpo,
    UedpoPrefOnly,
    UedpoDisprefOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Dpo,
        Method::Uedpo,
        Method::UedpoPrefOnly,
        Method::UedpoDisprefOnly,
    ];

    /// Whether the preferred branch carries exploration factors.
    pub fn weights_preferred(self) -> bool {
        matches!(self, Method::Uedpo | Method::UedpoPrefOnly)
    }

    /// Whether the dispreferred branch carries exploration factors.
    pub fn weights_dispreferred(self) -> bool {
        matches!(self, Method::Uedpo | Method::UedpoDisprefOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Uedpo => "uedpo",
            Method::UedpoPrefOnly => "uedpo_pref_only",
            Method::UedpoDisprefOnly => "uedpo_dispref_only",
        }
    }
}

/// Over which tokens the delta quantile and the `u` statistics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileScope {
    #[default]
    PerSequence,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub num_steps: usize,
    pub k: usize,
    pub interpretation: ScheduleInterpretation,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            k: 500,
            interpretation: ScheduleInterpretation::OneMinus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Pairs written by `gen-data`.
    pub num_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_pairs: 8192 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out scenes decoded greedily after every epoch.
    pub n_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_scenes: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub beta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub mu_quantile: f64,
    pub quantile_scope: QuantileScope,
    pub noise: NoiseConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub world: WorldConfig,
    pub reference: PretrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Uedpo,
            beta: 0.1,
            alpha: 0.3,
            tau: 0.4,
            mu_quantile: 0.25,
            quantile_scope: QuantileScope::PerSequence,
            noise: NoiseConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 2,
            batch_size: 16,
            world: WorldConfig::default(),
            reference: PretrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive_finite(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LabError::invalid(format!(
            "{name} = {v} must be positive and finite"
        )))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        positive_finite("beta", self.beta)?;
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(LabError::invalid(format!(
                "alpha = {} must lie in [0, 1)",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(LabError::invalid(format!(
                "tau = {} must lie in (0, 1)",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.mu_quantile) {
            return Err(LabError::invalid(format!(
                "mu_quantile = {} must lie in [0, 1]",
                self.mu_quantile
            )));
        }
        if self.noise.num_steps == 0 || self.noise.k >= self.noise.num_steps {
            return Err(LabError::invalid(format!(
                "noise step k = {} must index a schedule of {} steps",
                self.noise.k, self.noise.num_steps
            )));
        }
        positive_finite("optimizer.lr", self.optimizer.lr)?;
        let a = &self.optimizer;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(LabError::invalid("adam moments must lie in [0, 1)"));
        }
        positive_finite("optimizer.eps", a.eps)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LabError::invalid(
                "epochs and batch_size must be at least 1",
            ));
        }
        if self.data.num_pairs == 0 || self.eval.n_scenes == 0 {
            return Err(LabError::invalid(
                "data.num_pairs and eval.n_scenes must be at least 1",
            ));
        }
        self.world.validate()?;
        self.reference.validate()
    }

    pub fn exploration(&self) -> ExplorationSettings {
        ExplorationSettings {
            alpha: self.alpha,
            tau: self.tau,
            mu_quantile: self.mu_quantile,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LabError::Format {
            what: "run config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::Format { detail, .. } => LabError::Format {
                what: format!("config {}", path.display()),
                detail,
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
