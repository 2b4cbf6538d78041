use std::f64::consts::PI;

/// Learning-rate plan for one stage, in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_base: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(lr_base: f64, lr_min: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: u64) -> Self {
        Self {
            lr_base,
            lr_min,
            warmup_steps: warmup_epochs as u64 * steps_per_epoch,
            total_steps: epochs as u64 * steps_per_epoch,
        }
    }

    /// Linear ramp from 0 to `lr_base` over the warmup steps, then cosine
    /// decay reaching `lr_min` on the final step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.lr_base * step as f64 / w as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= w {
            return if step >= last && last > 0 {
                self.lr_min
            } else {
                self.lr_base
            };
        }
        let p = ((step - w) as f64 / (last - w) as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr_base - self.lr_min) * (1.0 + (PI * p).cos())
    }
}
