//! Optimization: BCE loss, Adam, cosine annealing, flip augmentation and the
//! epoch loop.

mod adam;
mod augment;
mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use augment::{flip_width, hflip};
pub use loss::{bce_loss, LOG_FLOOR};
pub use schedule::cosine_lr;
pub use trainer::{EpochLog, StepRecord, TrainState, Trainer, EPOCH_LOG_HEADER, STEP_LOG_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Probability of mirroring each sample when it is drawn.
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 75,
            batch_size: 4,
            lr_start: 1e-4,
            lr_end: 1e-5,
            seed: 0,
            flip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }

    /// Batches per epoch for `n` samples; the short final batch is kept.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.batches_per_epoch(n)
    }
}
