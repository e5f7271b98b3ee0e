//! Training loop, optimizer and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, lr_at_epoch, AdamConfig, AdamState, Moments};
pub use trainer::{EpochRecord, Trainer, ValSummary, LOG_HEADER};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between learning-rate reductions.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub seed: u64,
    /// Validate after every `val_every` epochs (and after the last one).
    pub val_every: usize,
    /// Write `last.ckpt` after every `checkpoint_every` epochs (and after
    /// the last one).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            lr: 1e-3,
            lr_step: 100,
            lr_factor: 0.5,
            seed: 0,
            val_every: 1,
            checkpoint_every: 1,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.lr_step == 0 || self.val_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("lr_step, val_every and checkpoint_every must be at least 1"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::invalid(format!("lr_factor {} must lie in (0, 1]", self.lr_factor)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        self.adam.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(epoch, self.lr, self.lr_step, self.lr_factor)
    }
}
