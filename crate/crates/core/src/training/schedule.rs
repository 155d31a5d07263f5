use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Usage(format!(
            "cosine_lr: step {step} outside 0..={total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr_start);
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos()))
}
