//! Run configuration: one JSON file drives dataset generation, both training
//! phases, sampling and evaluation. Parsing is strict; unknown keys are
//! rejected rather than ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::unet::UNetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Everything a full run needs. Every field has a default, so `{}` is a
/// valid config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root (written by `dataset`, read by `train` and `eval`).
    pub dataset_dir: PathBuf,
    /// Where checkpoints land.
    pub checkpoint_dir: PathBuf,
    /// Output directory for samples, reports and logs.
    pub out_dir: PathBuf,
    pub unet: UNetConfig,
    /// Identities to synthesize.
    pub n_identities: usize,
    /// Renders per identity.
    pub renders_per_identity: usize,
    /// Optimizer steps in the base (text-only) phase.
    pub base_steps: usize,
    /// Optimizer steps in the fused phase (face projections only).
    pub fused_steps: usize,
    pub base_lr: f64,
    pub fused_lr: f64,
    pub momentum: f64,
    /// Samples averaged per optimizer step.
    pub batch_size: usize,
    /// Fraction of steps trained with null text and no references.
    pub uncond_fraction: f64,
    /// Classifier-free guidance weight at sampling time.
    pub guidance: f64,
    /// Strided denoising steps at sampling time.
    pub sample_steps: usize,
    /// Top-level seed; all randomness derives from it.
    pub seed: u64,
    /// Held-out identities evaluated (capped by what the dataset provides).
    pub eval_identities: usize,
    /// Prompts per evaluated identity.
    pub eval_prompts: usize,
    /// Generations per (identity, prompt) cell.
    pub eval_samples: usize,
    /// Optimizer steps for the identity embedder fixture.
    pub identity_embedder_steps: usize,
    /// Optimizer steps for the prompt-alignment classifier fixture.
    pub prompt_classifier_steps: usize,
    /// Loss CSV granularity.
    pub log_every: usize,
    /// Training-state snapshot interval for resume; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            out_dir: "out".into(),
            unet: UNetConfig::default(),
            n_identities: 100,
            renders_per_identity: 40,
            base_steps: 6000,
            fused_steps: 4000,
            base_lr: 2e-3,
            fused_lr: 1e-4,
            momentum: 0.9,
            batch_size: 4,
            uncond_fraction: 0.1,
            guidance: 1.0,
            sample_steps: 50,
            seed: 0,
            eval_identities: 20,
            eval_prompts: 5,
            eval_samples: 1,
            identity_embedder_steps: 600,
            prompt_classifier_steps: 1200,
            log_every: 20,
            snapshot_every: 500,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.renders_per_identity < 2 {
            return Err(ConfigError::Invalid(
                "need at least one identity and two renders each".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.uncond_fraction) {
            return Err(ConfigError::Invalid(
                "uncond_fraction must be in [0, 1]".into(),
            ));
        }
        if self.guidance < 0.0 {
            return Err(ConfigError::Invalid("guidance must be >= 0".into()));
        }
        if self.batch_size == 0 || self.sample_steps == 0 {
            return Err(ConfigError::Invalid(
                "batch_size and sample_steps must be positive".into(),
            ));
        }
        self.unet
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Short digest of the canonical JSON form, used in provenance sidecars.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("serializable config");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
