use crate::error::value_err;
use crate::Result;

/// Optimization schedule for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPlan {
    pub total_steps: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub warmup_cap_steps: usize,
    pub grad_clip_norm: f64,
    /// Sequences per step; tokens per step is `batch_size · seq_len`.
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            base_lr: 3e-4,
            warmup_fraction: 0.03,
            warmup_cap_steps: 2000,
            grad_clip_norm: 1.0,
            batch_size: 4,
            seq_len: 64,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(value_err!("total_steps must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(value_err!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(value_err!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(value_err!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(value_err!("need batch_size >= 1 and seq_len >= 2"));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    /// `max(1, round(warmup_fraction · total))`, capped.
    pub fn warmup_steps(&self) -> usize {
        let w = libm::round(self.warmup_fraction * self.total_steps as f64) as usize;
        w.max(1).min(self.warmup_cap_steps.max(1)).min(self.total_steps)
    }

    /// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        let total = self.total_steps;
        if step >= total {
            return 0.0;
        }
        if step < w {
            return self.base_lr * step as f64 / w as f64;
        }
        let span = (total - w) as f64;
        let p = (step - w) as f64 / span;
        0.5 * self.base_lr * (1.0 + libm::cos(core::f64::consts::PI * p))
    }
}
