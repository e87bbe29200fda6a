//! Teacher-student self-distillation over global and local views.

mod ema;
mod losses;
mod objective;
mod run;
mod trainer;

use serde::{Deserialize, Serialize};

pub use ema::{ema_update, Center};
pub use losses::{
    cross_view_loss, dynamic_motion_loss, mean_entropy, student_log_distribution, teacher_distribution,
    total_loss, LossReduction, PairLoss,
};
pub use objective::{cross_view_rows, student_objective, Objective};
pub use run::{
    epoch_order, pretrain_run, read_metrics, MetricsRow, RunOptions, RunSummary, FINAL_CHECKPOINT, METRICS_FILE,
};
pub use trainer::{DistillState, StepMetrics, Trainer};

use crate::error::{Error, Result};
use crate::tensor::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub teacher_temp: f64,
    pub student_temp: f64,
    /// EMA momentum α of the teacher.
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
    /// Cross-view term between global teacher and local student outputs.
    pub cross_view: bool,
    /// Motion term between different global views.
    pub dynamic_motion: bool,
    pub reduction: LossReduction,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DistillConfig {
    pub fn paper() -> Self {
        DistillConfig {
            teacher_temp: 0.04,
            student_temp: 0.07,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            centering: true,
            cross_view: true,
            dynamic_motion: true,
            reduction: LossReduction::Mean,
            epochs: 30,
            batch_size: 12,
            optimizer: AdamWConfig::default(),
            final_lr: 1e-6,
            warmup_fraction: 0.1,
            max_steps: None,
            checkpoint_every: 0,
        }
    }

    pub fn desk() -> Self {
        DistillConfig {
            ema_momentum: 0.99,
            epochs: 32,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 1e-4,
                ..AdamWConfig::default()
            },
            final_lr: 1e-5,
            checkpoint_every: 100,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.teacher_temp > 0.0 && self.teacher_temp < self.student_temp) {
            return Err(Error::config(
                "distill.teacher_temp",
                format!(
                    "need 0 < teacher_temp ({}) < student_temp ({})",
                    self.teacher_temp, self.student_temp
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("distill.ema_momentum", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::config("distill.center_momentum", "must lie in [0, 1)"));
        }
        if !self.cross_view && !self.dynamic_motion {
            return Err(Error::config("distill.cross_view", "at least one loss term must be enabled"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("distill.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("distill.epochs", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::config("distill.optimizer", "invalid AdamW settings"));
        }
        if !(0.0..=o.lr).contains(&self.final_lr) {
            return Err(Error::config("distill.final_lr", "must lie in [0, lr]"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("distill.warmup_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}
