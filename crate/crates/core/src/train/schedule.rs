//! One-cycle learning-rate schedule.

use crate::error::{Error, Result};

/// Fraction of the run spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
pub const START_DIVISOR: f64 = 25.0;
pub const END_DIVISOR: f64 = 100.0;

/// Step at which the schedule peaks.
pub fn peak_step(total_steps: usize) -> usize {
    let p = (WARMUP_FRACTION * total_steps as f64).floor() as usize;
    if p == 0 {
        1.min(total_steps.saturating_sub(1))
    } else {
        p.min(total_steps - 1)
    }
}

/// Linear warmup from `max_lr / 25` to `max_lr` over the first 30% of steps,
/// then linear decay to `max_lr / 100` at the final step.
pub fn cyclical_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if total_steps < 1 {
        return Err(Error::InvalidInput(
            "schedule needs at least one step".into(),
        ));
    }
    if step >= total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} outside 0..{total_steps}"
        )));
    }
    let start = max_lr / START_DIVISOR;
    let end = max_lr / END_DIVISOR;
    let peak = peak_step(total_steps);
    let last = total_steps - 1;
    Ok(if step == 0 {
        start
    } else if step == peak {
        max_lr
    } else if step < peak {
        start + (max_lr - start) * step as f64 / peak as f64
    } else {
        max_lr + (end - max_lr) * (step - peak) as f64 / (last - peak) as f64
    })
}
