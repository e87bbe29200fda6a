use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero to `base_lr`, then cosine annealing down to
/// `final_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, final_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::domain(format!(
                "warmup steps {warmup_steps} exceed total steps {total_steps}"
            )));
        }
        if final_lr > base_lr {
            return Err(Error::domain(format!(
                "final rate {final_lr} exceeds base rate {base_lr}"
            )));
        }
        Ok(CosineSchedule {
            base_lr,
            final_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Warmup covering `warmup_fraction` of the run.
    pub fn with_warmup_fraction(
        base_lr: f64,
        final_lr: f64,
        warmup_fraction: f64,
        total_steps: u64,
    ) -> Result<Self> {
        let warmup = (warmup_fraction * total_steps as f64).round() as u64;
        Self::new(base_lr, final_lr, warmup.min(total_steps), total_steps)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_lr(self, step)
    }
}

/// Learning rate at `step`; steps past the end clamp to the final rate.
pub fn cosine_lr(s: &CosineSchedule, step: u64) -> f64 {
    if step > s.total_steps {
        return s.final_lr;
    }
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return s.base_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> CosineSchedule {
        CosineSchedule::new(1e-3, 1e-6, 10, 110).unwrap()
    }

    #[test]
    fn landmarks() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5), 0.5e-3);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!((s.lr_at(60) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert!((s.lr_at(110) - 1e-6).abs() < 1e-18);
        assert_eq!(s.lr_at(500), 1e-6);
    }

    #[test]
    fn anneal_is_monotone() {
        let s = sched();
        for step in 10..110 {
            assert!(s.lr_at(step + 1) <= s.lr_at(step));
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(CosineSchedule::new(1e-3, 1e-6, 20, 10).is_err());
        assert!(CosineSchedule::new(1e-6, 1e-3, 0, 10).is_err());
    }
}
