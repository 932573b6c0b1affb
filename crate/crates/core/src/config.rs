//! TOML run configuration for the command-line tool.
//!
//! ```toml
//! [data]
//! train = "tags.jsonl"        # paths are relative to this file
//! vocab = "vocab.txt"         # optional; built from the corpus when absent
//! init = "pre/model.ckpt"     # optional starting parameters
//! resume = "out/checkpoints/step-000500.ckpt"  # optional; needs the .optim twin
//!
//! [model]     # encoder shape; vocab_size and d_region are filled in
//! [batch]     # sequence limits and masking policy
//! [train]     # optimizer and schedule
//! [decode]    # caption length and beam width
//! [synthetic] # world generated by `gen-synthetic`
//! ```
//!
//! Every section and field is optional and falls back to its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchConfig, GEOMETRY_DIM};
use crate::decoder::DecodeConfig;
use crate::encoder::EncoderConfig;
use crate::synthetic::SyntheticConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub batch: BatchConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a config file and resolves its data paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.data.train,
            &mut config.data.vocab,
            &mut config.data.init,
            &mut config.data.resume,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Overrides every seed in the file.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    /// Fills the encoder fields implied by the vocabulary and the batch
    /// layout, rejecting explicit values that disagree.
    pub fn resolve_model(&mut self, vocab_size: usize) -> Result<(), ConfigError> {
        if self.model.vocab_size != 0 && self.model.vocab_size != vocab_size {
            return Err(ConfigError::Invalid(format!(
                "model.vocab_size is {} but the vocabulary has {vocab_size} entries",
                self.model.vocab_size
            )));
        }
        self.model.vocab_size = vocab_size;
        self.model.d_region = self.batch.d_app + GEOMETRY_DIM;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
