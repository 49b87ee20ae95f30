use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Augmentation, LesionType, PreprocessConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::GeneratorVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: GeneratorVariant,
    pub lesion_filter: LesionType,
    pub epochs: usize,
    /// First epoch of the linear decay to zero.
    pub decay_start: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub working_size: usize,
    /// Capacity of each fake-image history buffer; 0 disables it.
    pub history_buffer_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: GeneratorVariant::Baseline,
            lesion_filter: LesionType::I,
            epochs: 200,
            decay_start: 100,
            lr0: 2e-4,
            batch_size: 1,
            weights: LossWeights::default(),
            seed: 0,
            working_size: 256,
            history_buffer_size: 50,
            beta1: 0.5,
            beta2: 0.999,
            augmentation: Augmentation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_start > self.epochs {
            return Err(Error::validation(
                "decay_start",
                format!("{} exceeds epochs {}", self.decay_start, self.epochs),
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::validation("lr0", format!("must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.lesion_filter == LesionType::NotApplicable {
            return Err(Error::validation("lesion_filter", "must be I or II"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        self.weights.validate()?;
        self.preprocess().validate()
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            working_size: self.working_size,
            augmentation: self.augmentation,
        }
    }

    /// SHA-256 over the configuration and both layer tables.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        h.update(self.variant.generator_spec().to_toml()?.as_bytes());
        h.update(self.variant.discriminator().spec().to_toml()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}

/// `lr0` before `decay_start`, then linear decay reaching 0 at `epochs`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::validation(
            "epoch",
            format!("{epoch} is past the last epoch {}", cfg.epochs),
        ));
    }
    if epoch < cfg.decay_start {
        return Ok(cfg.lr0);
    }
    let span = cfg.epochs - cfg.decay_start;
    if span == 0 {
        return Ok(0.0);
    }
    Ok(cfg.lr0 * ((cfg.epochs - epoch) as f64 / span as f64))
}
