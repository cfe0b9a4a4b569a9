use hat_core::hat::HatConfig;
use hat_core::motion::MotionModelKind;
use hat_core::sim::{FilterConfig, NoiseConfig, SceneConfig, TrainOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// The published JSON schema for [`ExperimentConfig`].
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// query width `C`
    pub channels: usize,
    /// the motion model library, in hypothesis order
    pub models: Vec<MotionModelKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 16, models: MotionModelKind::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// single-model explicit alignment, one per listed kind
    pub single: Vec<MotionModelKind>,
    /// HAT trained with only the CV hypothesis
    pub hat_single: bool,
    pub implicit: bool,
    pub imm: bool,
    pub filter: FilterConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            single: MotionModelKind::ALL.to_vec(),
            hat_single: true,
            implicit: true,
            imm: true,
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// master seed for scene generation and observation noise
    pub seed: u64,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub model: ModelConfig,
    pub training: TrainOptions,
    pub baselines: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scene: SceneConfig::default(),
            noise: NoiseConfig::default(),
            train_scenes: 10,
            eval_scenes: 10,
            model: ModelConfig::default(),
            training: TrainOptions { epochs: 80, batch_size: 64, learning_rate: 2e-3, seed: 0 },
            baselines: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.scene.validate().map_err(|e| v(e.to_string()))?;
        self.noise.validate().map_err(|e| v(e.to_string()))?;
        self.training.validate().map_err(|e| v(e.to_string()))?;
        self.hat_config()?;
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(v("train_scenes and eval_scenes must be at least 1".into()));
        }
        let f = &self.baselines.filter;
        if !(f.self_transition > 0.0 && f.self_transition <= 1.0) {
            return Err(v(format!("baselines.filter.self_transition must lie in (0, 1], got {}", f.self_transition)));
        }
        for (i, k) in self.baselines.single.iter().enumerate() {
            if self.baselines.single[..i].contains(k) {
                return Err(v(format!("baselines.single lists '{k}' twice")));
            }
        }
        Ok(())
    }

    pub fn hat_config(&self) -> Result<HatConfig, CliError> {
        HatConfig::new(self.model.channels, self.model.models.clone()).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Lowercase hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
