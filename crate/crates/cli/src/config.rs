//! Experiment configuration: one JSON document, unknown keys rejected.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "data":     { "num_classes": 10, "train_per_class": 200, ... },
//!   "model":    { "num_classes": 10, "tokenizer": {...}, "classifier": {...}, "localizer": {...} },
//!   "baseline": { "epochs": 6, "base_lr": 0.001, ... },
//!   "train":    { "epochs": 20, "base_lr": 0.001, "flags": {...}, ... },
//!   "orbit":    { "n": 16, "lambda_s": 0.25, "pairing": "paired", "pre_shear": 0.2 },
//!   "eval":     { "samples": 8, "sweep": [1, 2, 4, 8, 16], "seed": 0 },
//!   "ablation": { "kl_weight": 0.01 }
//! }
//! ```
//!
//! Every section and field is optional and falls back to the benchmark
//! preset. `baseline` trains the plain classifier whose tokenizer and
//! classifier weights initialise the canonicalizer trained under `train`.

use std::path::Path;

use canonix::databench::{GlyphDatasetSpec, OrbitSpec};
use canonix::pipeline::checkpoint::config_hash;
use canonix::pipeline::{AugmentSpec, ModelConfig, TrainConfig};
use canonix::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Posterior samples per prediction.
    pub samples: usize,
    /// Sample counts reported by sweeps.
    pub sweep: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            sweep: vec![1, 2, 4, 8, 16],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// KL weight for the `use_kl=true` variant when `train.loss.lambda_kl` is 0.
    pub kl_weight: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { kl_weight: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GlyphDatasetSpec,
    pub model: ModelConfig,
    pub baseline: TrainConfig,
    pub train: TrainConfig,
    pub orbit: OrbitSpec,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl ExperimentConfig {
    /// The desk-scale glyph benchmark.
    pub fn benchmark() -> Self {
        Self {
            seed: 0,
            data: GlyphDatasetSpec::default(),
            model: ModelConfig::default(),
            baseline: TrainConfig {
                epochs: 6,
                base_lr: 1e-3,
                samples: 1,
                augment: AugmentSpec::photometric_only(),
                tokenizer_warmup_epochs: 6,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                epochs: 20,
                base_lr: 1e-3,
                samples: 2,
                eval_samples: Some(1),
                tokenizer_warmup_epochs: 0,
                ..TrainConfig::default()
            },
            orbit: OrbitSpec::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// A run small enough for a quick end-to-end check.
    pub fn smoke() -> Self {
        let mut c = Self::benchmark();
        c.data.train_per_class = 10;
        c.data.test_per_class = 4;
        c.data.image_size = 32;
        c.model.tokenizer.image_size = 32;
        c.model.tokenizer.patch_size = 8;
        c.model.tokenizer.embed_dim = 16;
        c.model.classifier.depth = 2;
        c.baseline.epochs = 2;
        c.baseline.tokenizer_warmup_epochs = 2;
        c.baseline.batch_size = 16;
        c.train.epochs = 2;
        c.train.batch_size = 16;
        c.orbit.n = 4;
        c.eval.sweep = vec![1, 2, 4];
        c.eval.samples = 4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "benchmark" => Ok(Self::benchmark()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected benchmark or smoke"))),
        }
    }

    /// Parses JSON text; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let at = format!("line {} column {}", inner.line(), inner.column());
            Error::Config(if path == "." {
                format!("{inner}")
            } else {
                format!("{path}: {} ({at})", strip_position(&inner.to_string()))
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.baseline.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.baseline.validate().map_err(|e| resection(e, "baseline"))?;
        self.train.validate()?;
        self.orbit.validate()?;
        if self.eval.samples == 0 || self.eval.sweep.is_empty() || self.eval.sweep.contains(&0) {
            return Err(Error::Config("eval.samples and every eval.sweep entry must be >= 1".into()));
        }
        if !(self.ablation.kl_weight >= 0.0 && self.ablation.kl_weight.is_finite()) {
            return Err(Error::Config("ablation.kl_weight must be finite and >= 0".into()));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes = {} but data.num_classes = {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        if self.model.tokenizer.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model.tokenizer.image_size = {} but data.image_size = {}",
                self.model.tokenizer.image_size, self.data.image_size
            )));
        }
        Ok(())
    }
}

/// Re-labels a `train.`-prefixed message for another section using the same schema.
fn resection(e: Error, section: &str) -> Error {
    match e {
        Error::Config(msg) => Error::Config(msg.replace("train.", &format!("{section}."))),
        other => other,
    }
}

fn strip_position(msg: &str) -> &str {
    msg.rsplit_once(" at line ").map_or(msg, |(head, _)| head)
}
