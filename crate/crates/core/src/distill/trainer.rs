use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ema::{ema_update, Center};
use super::losses::{mean_entropy, teacher_distribution};
use super::objective::{cross_view_rows, student_objective};
use super::DistillConfig;
use crate::data::{Checkpoint, VideoClip};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VideoTransformer};
use crate::tensor::{AdamW, CosineSchedule, Grads, Graph, ParamStore, Tensor};
use crate::views::{sample_views, ViewConfig};

/// Student θ, teacher φ, teacher center and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub center: Center,
    pub optimizer: AdamW<f32>,
    pub step: u64,
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Number of completed steps, counting this one.
    pub step: u64,
    pub epoch: u64,
    pub loss_cv: f64,
    pub loss_dm: f64,
    pub loss_total: f64,
    /// Mean entropy (nats) of the teacher distributions of this step.
    pub teacher_entropy: f64,
    pub center_norm: f64,
    pub lr: f64,
}

pub struct Trainer {
    model: VideoTransformer,
    views: ViewConfig,
    distill: DistillConfig,
    seed: u64,
    schedule: CosineSchedule,
    pub state: DistillState,
}

impl Trainer {
    /// Fresh run: student initialised from `seed`, teacher an exact copy.
    pub fn new(
        model: ModelConfig,
        views: ViewConfig,
        distill: DistillConfig,
        seed: u64,
        total_steps: u64,
    ) -> Result<Self> {
        let model = VideoTransformer::new(model)?;
        views.validate()?;
        distill.validate()?;
        if views.max_global_frames() > model.config().max_frames {
            return Err(Error::config(
                "views.global_frames",
                format!(
                    "{} frames exceed the model's temporal capacity {}",
                    views.max_global_frames(),
                    model.config().max_frames
                ),
            ));
        }
        if views.global_size > model.config().spatial_capacity {
            return Err(Error::config(
                "views.global_size",
                format!("exceeds the model's spatial capacity {}", model.config().spatial_capacity),
            ));
        }
        let student = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let teacher = student.clone();
        let optimizer = AdamW::new(distill.optimizer, &student);
        let center = Center::zeros(model.config().out_dim, distill.center_momentum);
        let schedule = schedule(&distill, total_steps)?;
        Ok(Trainer {
            model,
            views,
            distill,
            seed,
            schedule,
            state: DistillState {
                student,
                teacher,
                center,
                optimizer,
                step: 0,
            },
        })
    }

    pub fn model(&self) -> &VideoTransformer {
        &self.model
    }

    pub fn views(&self) -> &ViewConfig {
        &self.views
    }

    pub fn distill(&self) -> &DistillConfig {
        &self.distill
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    /// Number of global views sampled per clip: the motion term needs two
    /// even when only one is requested.
    pub fn sampled_globals(&self) -> usize {
        let g = self.views.global_views;
        if g == 1 && self.distill.dynamic_motion {
            2
        } else {
            g
        }
    }

    /// One optimisation step over `clips`.
    pub fn train_step(&mut self, clips: &[&VideoClip], epoch: u64) -> Result<StepMetrics> {
        if clips.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let k = self.model.config().out_dim;
        let zero_center = vec![0.0f32; k];
        let center = if self.distill.centering {
            &self.state.center.values
        } else {
            &zero_center
        };
        let inv_b = 1.0 / clips.len() as f32;
        let mut grads = Grads::zeros_like(&self.state.student);
        let mut teacher_logits = Vec::new();
        let mut entropy = 0.0;
        let (mut cv_sum, mut dm_sum, mut total_sum) = (0.0, 0.0, 0.0);

        for clip in clips {
            let set = sample_views(clip, &self.views, self.sampled_globals(), self.seed, epoch)?;

            let mut tg = Graph::<f32>::inference();
            let tv = self.state.teacher.register(&mut tg);
            let mut logits = Vec::with_capacity(set.globals.len() * k);
            for v in &set.globals {
                let out = self.model.forward(&mut tg, &tv, &v.frames)?;
                logits.extend_from_slice(tg.value(out.logits));
            }
            drop(tg);
            let probs = teacher_distribution(&logits, center, self.distill.teacher_temp)?;
            entropy += mean_entropy(&probs, k);
            teacher_logits.extend_from_slice(&logits);
            let targets = Tensor::new(vec![set.globals.len(), k], probs)?;

            let counts: Vec<usize> = set.globals.iter().map(|v| v.spec.frames).collect();
            let cv_rows = cross_view_rows(&counts, self.views.global_views);
            let globals: Vec<_> = set.globals.iter().map(|v| &v.frames).collect();
            let locals: Vec<_> = set.locals.iter().map(|v| &v.frames).collect();

            let mut g = Graph::<f32>::new();
            let vars = self.state.student.register(&mut g);
            let obj = student_objective(
                &mut g,
                &self.model,
                &vars,
                &globals,
                &locals,
                &targets,
                &cv_rows,
                &self.distill,
            )
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => self.non_finite(format!("clip `{}`: {what}", clip.id)),
                other => other,
            })?;
            cv_sum += obj.cv.get(&g);
            dm_sum += obj.dm.get(&g);
            if let Some(total) = obj.total {
                total_sum += g.value(total)[0] as f64;
                let scaled = g.scale(total, inv_b);
                g.backward(scaled)?;
                grads.add_assign(&vars.collect_grads(&g))?;
            }
        }

        let b = clips.len() as f64;
        let metrics_total = total_sum / b;
        if !metrics_total.is_finite() || !grads.all_finite() {
            return Err(self.non_finite(format!("loss {metrics_total} or its gradient")));
        }

        let lr = self.schedule.lr_at(self.state.step);
        self.state.optimizer.step(&mut self.state.student, &grads, lr)?;
        ema_update(&mut self.state.teacher, &self.state.student, self.distill.ema_momentum as f32)?;
        if self.distill.centering {
            self.state.center.update(&teacher_logits)?;
        }
        self.state.step += 1;

        Ok(StepMetrics {
            step: self.state.step,
            epoch,
            loss_cv: cv_sum / b,
            loss_dm: dm_sum / b,
            loss_total: metrics_total,
            teacher_entropy: entropy / b,
            center_norm: self.state.center.norm(),
            lr,
        })
    }

    fn non_finite(&self, what: String) -> Error {
        Error::NonFinite {
            step: self.state.step,
            what,
            last_checkpoint: None,
        }
    }

    /// Snapshot of everything needed to continue bit-exactly.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut arrays = std::collections::BTreeMap::new();
        for (name, t) in self.state.student.iter() {
            arrays.insert(format!("student/{name}"), t.clone());
        }
        for (name, t) in self.state.teacher.iter() {
            arrays.insert(format!("teacher/{name}"), t.clone());
        }
        for (name, t) in &self.state.optimizer.first_moment {
            arrays.insert(format!("adam_m/{name}"), t.clone());
        }
        for (name, t) in &self.state.optimizer.second_moment {
            arrays.insert(format!("adam_v/{name}"), t.clone());
        }
        let k = self.state.center.values.len();
        arrays.insert("center".into(), Tensor::new(vec![k], self.state.center.values.clone())?);
        Ok(Checkpoint {
            model: self.model.config().clone(),
            step: self.state.step,
            seed: self.seed,
            meta: serde_json::json!({
                "optimizer_step": self.state.optimizer.step,
                "total_steps": self.schedule.total_steps,
                "distill": self.distill,
                "views": self.views,
            }),
            arrays,
        })
    }

    /// Continue from `ckpt` with the given run settings. The schedule length
    /// must match the one the checkpoint was written under.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        views: ViewConfig,
        distill: DistillConfig,
        total_steps: u64,
    ) -> Result<Self> {
        let mut t = Trainer::new(ckpt.model.clone(), views, distill, ckpt.seed, total_steps)?;
        let saved_total = ckpt.meta.get("total_steps").and_then(|v| v.as_u64());
        if saved_total != Some(total_steps) {
            return Err(Error::contract(format!(
                "checkpoint was written for a {saved_total:?}-step schedule, resuming with {total_steps}"
            )));
        }
        let load = |prefix: &str, into: &ParamStore<f32>| -> Result<ParamStore<f32>> {
            let group = ckpt.group(prefix);
            let mut out = ParamStore::new();
            for (name, tensor) in group {
                out.insert(name, tensor);
            }
            if !out.same_structure(into) {
                return Err(Error::contract(format!(
                    "checkpoint `{prefix}` arrays do not match the model's parameters"
                )));
            }
            Ok(out)
        };
        t.state.student = load("student", &t.state.student)?;
        t.state.teacher = load("teacher", &t.state.teacher)?;
        let m = load("adam_m", &t.state.student)?;
        let v = load("adam_v", &t.state.student)?;
        t.state.optimizer.first_moment = m.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        t.state.optimizer.second_moment = v.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        t.state.optimizer.step = ckpt
            .meta
            .get("optimizer_step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::contract("checkpoint lacks optimizer_step"))?;
        let center = ckpt
            .arrays
            .get("center")
            .ok_or_else(|| Error::contract("checkpoint lacks the teacher center"))?;
        if center.numel() != t.state.center.values.len() {
            return Err(Error::contract("checkpoint center has the wrong length"));
        }
        t.state.center.values = center.values().to_vec();
        t.state.step = ckpt.step;
        Ok(t)
    }
}

fn schedule(d: &DistillConfig, total_steps: u64) -> Result<CosineSchedule> {
    CosineSchedule::with_warmup_fraction(d.optimizer.lr, d.final_lr, d.warmup_fraction, total_steps.max(1))
}
