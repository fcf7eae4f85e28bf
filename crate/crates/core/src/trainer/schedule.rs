use num_traits::Float;

use crate::error::{Error, Result};

/// Linear scaling rule: `base_lr × batch / 256`.
pub fn peak_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, peak: f64) -> Result<f64> {
    if warmup >= total {
        return Err(Error::arg(alloc::format!("warmup steps ({warmup}) must be fewer than total steps ({total})")));
    }
    if step >= total {
        return Err(Error::arg(alloc::format!("step {step} is past the schedule end ({total})")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let u = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + Float::cos(core::f64::consts::PI * u)))
}

/// Step counts derived from an epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPlan {
    pub steps_per_epoch: u64,
    pub total: u64,
    pub warmup: u64,
}

/// `max_steps` overrides the epoch budget; warmup keeps its share of the run.
pub fn step_plan(num_images: usize, batch_size: usize, epochs: f64, warmup_epochs: f64, max_steps: Option<u64>) -> Result<StepPlan> {
    if num_images == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 || batch_size > num_images {
        return Err(Error::Config {
            path: "optim.batch_size".into(),
            reason: alloc::format!("must be between 1 and the dataset size ({num_images}), got {batch_size}"),
        });
    }
    if !(epochs > 0.0) || !(warmup_epochs >= 0.0) || warmup_epochs >= epochs {
        return Err(Error::Config {
            path: "optim.warmup_epochs".into(),
            reason: alloc::format!("need 0 <= warmup_epochs < epochs, got {warmup_epochs} and {epochs}"),
        });
    }
    let steps_per_epoch = (num_images / batch_size) as u64;
    let total = max_steps.unwrap_or_else(|| Float::floor(epochs * steps_per_epoch as f64) as u64);
    if total == 0 {
        return Err(Error::Config {
            path: "optim.epochs".into(),
            reason: "budget amounts to zero steps".into(),
        });
    }
    let warmup = Float::floor(total as f64 * warmup_epochs / epochs) as u64;
    Ok(StepPlan {
        steps_per_epoch,
        total,
        warmup,
    })
}
