//! Run configuration: one TOML file drives synthesis, training, inference,
//! evaluation, and visualization.
//!
//! Every section has complete defaults, so an empty file is a valid config.
//! `validate` cross-checks the sections (text embedding width must match the
//! head's mask-embedding width, timestep must fit the schedule, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::losses::DEFAULT_POINT_COUNT;
use crate::prompts::{DEFAULT_TEMPLATE, K_PHRASE};

/// Loss weighting and point-sampling settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce: f64,
    pub dice: f64,
    pub grounding: f64,
    /// Number of sampled points for the mask losses.
    pub points: usize,
    /// Supervise every decoder layer, not just the last one.
    pub aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce: 2.0,
            dice: 5.0,
            grounding: 1.0,
            points: DEFAULT_POINT_COUNT,
            aux: true,
        }
    }
}

/// AdamW settings and the step budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 2000,
        }
    }
}

/// Dataset sizing, resize target, and augmentation flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square edge used in training; evaluation keeps aspect ratio with this
    /// as the shorter edge.
    pub resize: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Synthetic vocabulary preset for the training split: "full" or "basic".
    pub vocab: String,
    /// Vocabulary preset for the held-out split; defaults to match `vocab`
    /// usage but may differ so the test split can exercise labels the
    /// training split never showed.
    pub test_vocab: String,
    /// Synthetic split sizes for end-to-end runs.
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            resize: 64,
            hflip: true,
            vflip: true,
            vocab: "full".into(),
            test_vocab: "full".into(),
            n_train: 8,
            n_test: 4,
        }
    }
}

/// Text embedding provider and phrase extraction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// `toy:<seed>` or `archive:<path>`.
    pub provider: String,
    /// Embedding width; must equal the head's mask-embedding width.
    pub d_txt: usize,
    /// Prompt template with a single `{}` placeholder.
    pub template: String,
    /// Caption phrases kept per image.
    pub k_phrases: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            provider: "toy:11".into(),
            d_txt: 32,
            template: DEFAULT_TEMPLATE.into(),
            k_phrases: K_PHRASE,
        }
    }
}

/// Inference-time settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Minimum cosine similarity for a mask to receive a label.
    pub threshold: f64,
    /// Diffusion timestep used for feature extraction.
    pub timestep: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            threshold: 0.5,
            timestep: 100,
        }
    }
}

/// Everything one run needs, grouped into TOML tables.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub text: TextConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("config {}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.backbone.output_channels() != self.head.c_f {
            return Err(Error::Config(format!(
                "backbone produces {} feature channels but head.c_f is {}",
                self.backbone.output_channels(),
                self.head.c_f
            )));
        }
        if self.text.d_txt != self.head.d_emb {
            return Err(Error::Config(format!(
                "text.d_txt ({}) must equal head.d_emb ({})",
                self.text.d_txt, self.head.d_emb
            )));
        }
        if self.optimizer.steps == 0 {
            return Err(Error::Config("optimizer.steps must be >= 1".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("optimizer.learning_rate must be > 0".into()));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("optimizer.weight_decay must be >= 0".into()));
        }
        if self.data.resize < 16 {
            return Err(Error::Config(format!(
                "data.resize must be >= 16, got {}",
                self.data.resize
            )));
        }
        for (name, v) in [("vocab", &self.data.vocab), ("test_vocab", &self.data.test_vocab)] {
            if v != "full" && v != "basic" {
                return Err(Error::Config(format!(
                    "data.{name} must be \"full\" or \"basic\", got {v:?}"
                )));
            }
        }
        if self.loss.points == 0 {
            return Err(Error::Config("loss.points must be >= 1".into()));
        }
        for (name, w) in [
            ("bce", self.loss.bce),
            ("dice", self.loss.dice),
            ("grounding", self.loss.grounding),
        ] {
            if w < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.infer.threshold) {
            return Err(Error::Config(format!(
                "infer.threshold must lie in [0, 1], got {}",
                self.infer.threshold
            )));
        }
        if self.infer.timestep > self.backbone.t_max {
            return Err(Error::Config(format!(
                "infer.timestep ({}) exceeds backbone.t_max ({})",
                self.infer.timestep, self.backbone.t_max
            )));
        }
        if self.text.k_phrases == 0 {
            return Err(Error::Config("text.k_phrases must be >= 1".into()));
        }
        if self.text.template.matches("{}").count() != 1 {
            return Err(Error::Config(
                "text.template must contain exactly one {} placeholder".into(),
            ));
        }
        Ok(())
    }
}
