//! Run configuration file (TOML). Every section and key is optional;
//! unknown keys are rejected.
//!
//! ```toml
//! [knowledge]
//! tau = 0.07          # contrastive temperature
//! steps = 2000        # optimizer steps
//! batch_pairs = 64    # (name, definition) pairs per step
//! lr = 1e-4           # rate after warmup
//! warmup_lr = 1e-5    # rate during warmup (first 5% of steps)
//! max_seq_len = 256   # tokens kept per text
//! layers = 2          # encoder self-attention blocks
//!
//! [model]
//! mode = "ke_lp"      # baseline | ke | ke_lp
//! d = 256             # embedding width shared by all modules
//! prompt_count = 32   # ke_lp only
//! decoder_layers = 4
//! heads = 4
//! backbone_channels = [32, 64]
//! backbone_kernels = [3, 3, 3]
//!
//! [train]
//! epochs = 30
//! batch_size = 32
//! lr = 1e-4
//! warmup_lr = 1e-5
//! seed = 0
//!
//! [eval]
//! bootstrap = 1000    # resamples per class, 0 disables intervals
//! level = 0.95
//! min_cases = 50      # classes with at most this many positives are dismissed
//! ```

use std::path::Path;

use kdiag_core::eval::EvalOptions;
use kdiag_core::knowledge::{ContrastiveConfig, ToyEncoderConfig};
use kdiag_core::model::{Mode, ModelConfig};
use kdiag_core::training::TrainConfig;
use kdiag_core::visual::BackboneKind;
use kdiag_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeSection {
    pub tau: f64,
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub max_seq_len: usize,
    pub layers: usize,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        Self {
            tau: c.tau,
            steps: c.steps,
            batch_pairs: c.batch_pairs,
            lr: c.lr,
            warmup_lr: c.warmup_lr,
            max_seq_len: c.max_seq_len,
            layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mode: Mode,
    pub d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_count: Option<usize>,
    pub decoder_layers: usize,
    pub heads: usize,
    pub backbone_channels: [usize; 2],
    pub backbone_kernels: [usize; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mode: Mode::KeLp,
            d: 256,
            prompt_count: None,
            decoder_layers: 4,
            heads: 4,
            backbone_channels: [32, 64],
            backbone_kernels: [3, 3, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_lr: t.warmup_lr,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub bootstrap: usize,
    pub level: f64,
    pub min_cases: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            bootstrap: e.bootstrap,
            level: e.level,
            min_cases: e.min_cases,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub knowledge: KnowledgeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn encoder(&self) -> ToyEncoderConfig {
        let mut c = ToyEncoderConfig::with_dim(self.model.d);
        c.layers = self.knowledge.layers;
        c.tokenizer.max_seq_len = self.knowledge.max_seq_len;
        c
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.knowledge.tau,
            batch_pairs: self.knowledge.batch_pairs,
            steps: self.knowledge.steps,
            max_seq_len: self.knowledge.max_seq_len,
            lr: self.knowledge.lr,
            warmup_lr: self.knowledge.warmup_lr,
            warmup_steps: None,
            seed: self.seed(),
        }
    }

    /// Model configuration; `prompt_count` defaults to 32 in mode ke_lp
    /// and is an error in the other modes.
    pub fn model(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut c = ModelConfig::new(m.mode, m.d);
        c.backbone.kind = BackboneKind::Conv {
            channels: m.backbone_channels,
            kernels: m.backbone_kernels,
        };
        c.decoder.layers = m.decoder_layers;
        c.decoder.heads = m.heads;
        c.prompt_count = match (m.mode, m.prompt_count) {
            (Mode::KeLp, None) => Some(32),
            (_, given) => given,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            warmup_lr: self.train.warmup_lr,
            warmup_steps: None,
            seed: self.seed(),
            horizontal_flip: false,
        }
    }

    pub fn evaluation(&self) -> EvalOptions {
        EvalOptions {
            bootstrap: self.eval.bootstrap,
            level: self.eval.level,
            min_cases: self.eval.min_cases,
            seed: self.seed(),
        }
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.contrastive().validate()?;
        self.training().validate()?;
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            return Err(Error::Config(format!("eval.level {} must lie in (0, 1)", self.eval.level)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model().unwrap().prompt_count, Some(32));
        assert_eq!(c.training().epochs, 30);
        assert_eq!(c.evaluation().min_cases, 50);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.model.mode = Mode::Ke;
        c.model.d = 64;
        c.train.seed = 17;
        c.eval.bootstrap = 0;
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[optimizer]\nlr = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_count_outside_ke_lp_is_an_error() {
        let c = RunConfig::parse("[model]\nmode = \"baseline\"\nprompt_count = 64\n").unwrap();
        assert!(matches!(c.model(), Err(Error::Config(_))));
        let c = RunConfig::parse("[model]\nmode = \"ke_lp\"\nprompt_count = 64\n").unwrap();
        assert_eq!(c.model().unwrap().prompt_count, Some(64));
    }
}
