//! The JSON run configuration document.
//!
//! ```json
//! {
//!   "model": { "n_layers": 2, "d_model": 64, ... },
//!   "init": { "kind": "gamma", "value": 0.5, "seed": 1 },
//!   "optim": { "lr_max": 1e-3, "lr_min": 1e-5, "warmup_frac": 0.05,
//!              "beta1": 0.9, "beta2": 0.95, "lambda": 0.1, "total_steps": 2000 },
//!   "data": { "synth": { ... }, "batch": 16, "seq_len": 32, "holdout": 0.1 },
//!   "logging": { "log_every": 50, "checkpoint_every": 500, "out_dir": "runs/a" }
//! }
//! ```
//!
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataSource, SynthSpec};
use crate::init::{InitKind, InitScheme};
use crate::model::ModelConfig;
use crate::optim::OptimHyper;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("config value: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitTag {
    /// std `d_in^-value`.
    Gamma,
    /// std `value` for every matrix.
    Sigma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub kind: InitTag,
    pub value: f64,
    pub seed: u64,
}

impl InitSection {
    pub fn scheme(&self) -> InitScheme {
        let kind = match self.kind {
            InitTag::Gamma => InitKind::GammaRate(self.value),
            InitTag::Sigma => InitKind::FixedStd(self.value),
        };
        InitScheme { kind, seed: self.seed }
    }
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub total_steps: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl OptimSection {
    pub fn hyper(&self) -> OptimHyper {
        OptimHyper {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            warmup_frac: self.warmup_frac,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.lambda,
            total_steps: self.total_steps,
        }
    }
}

fn default_eval_windows() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    pub batch: usize,
    pub seq_len: usize,
    /// Final fraction of the corpus held out for evaluation.
    #[serde(default)]
    pub holdout: f64,
    /// Upper bound on evaluation windows drawn from the holdout.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
}

impl DataSection {
    pub fn source(&self) -> Result<DataSource, ConfigError> {
        match (&self.path, &self.synth) {
            (Some(p), None) => Ok(DataSource::Path(p.clone())),
            (None, Some(s)) => Ok(DataSource::Synth(s.clone())),
            _ => Err(ConfigError::Invalid("data needs exactly one of `path` or `synth`".into())),
        }
    }
}

fn default_spike_window() -> usize {
    32
}

fn default_spike_k() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingSection {
    pub log_every: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_spike_window")]
    pub spike_window: usize,
    #[serde(default = "default_spike_k")]
    pub spike_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub init: InitSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub logging: LoggingSection,
    /// Seed of the batch sampler.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A relative `data.path` is
    /// resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.init.scheme().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.optim.hyper().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(c) = self.optim.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("optim.grad_clip must be positive, got {c}"));
            }
        }
        self.data.source()?;
        if let Some(s) = &self.data.synth {
            s.chain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.data.batch == 0 || self.data.seq_len == 0 {
            return bad("data.batch and data.seq_len must be positive".into());
        }
        if self.data.seq_len > self.model.max_seq_len {
            return bad(format!(
                "data.seq_len {} exceeds model.max_seq_len {}",
                self.data.seq_len, self.model.max_seq_len
            ));
        }
        if !(0.0..=0.5).contains(&self.data.holdout) {
            return bad(format!("data.holdout must lie in [0, 0.5], got {}", self.data.holdout));
        }
        if self.logging.log_every == 0 {
            return bad("logging.log_every must be at least 1".into());
        }
        if self.logging.spike_window < 8 {
            return bad("logging.spike_window must be at least 8".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
