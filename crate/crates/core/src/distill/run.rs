use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trainer::{StepMetrics, Trainer};
use super::DistillConfig;
use crate::data::{load_checkpoint, save_checkpoint, VideoClip};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::views::ViewConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss_cv: f64,
    pub loss_dm: f64,
    pub loss_total: f64,
    pub teacher_entropy: f64,
    pub lr: f64,
}

impl From<&StepMetrics> for MetricsRow {
    fn from(m: &StepMetrics) -> Self {
        MetricsRow {
            step: m.step,
            epoch: m.epoch,
            loss_cv: m.loss_cv,
            loss_dm: m.loss_dm,
            loss_total: m.loss_total,
            teacher_entropy: m.teacher_entropy,
            lr: m.lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Clip order of `epoch`: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("{other:?}"),
        },
    })?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["step", "epoch", "loss_cv", "loss_dm", "loss_total", "teacher_entropy", "lr"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

/// Pre-train on `clips`: seeded epoch shuffles, fixed-size batches (the last
/// one of an epoch may be short), cosine schedule over the whole run,
/// metrics appended to `metrics.csv` after every step, periodic and final
/// checkpoints in `out_dir`.
pub fn pretrain_run(
    clips: &[VideoClip],
    model: &ModelConfig,
    views: &ViewConfig,
    distill: &DistillConfig,
    seed: u64,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunSummary> {
    if clips.is_empty() {
        return Err(Error::domain("pre-training needs at least one clip"));
    }
    distill.validate()?;
    let per_epoch = clips.len().div_ceil(distill.batch_size) as u64;
    let mut total = distill.epochs * per_epoch;
    if let Some(m) = distill.max_steps {
        total = total.min(m);
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let metrics_path = opts.out_dir.join(METRICS_FILE);

    let (mut trainer, previous) = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if &ckpt.model != model || ckpt.seed != seed {
                return Err(Error::contract(format!(
                    "checkpoint {} was written with a different model or seed",
                    path.display()
                )));
            }
            let t = Trainer::from_checkpoint(&ckpt, views.clone(), distill.clone(), total)?;
            let kept = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| r.step <= ckpt.step)
                    .collect()
            } else {
                Vec::new()
            };
            (t, kept)
        }
        None => (
            Trainer::new(model.clone(), views.clone(), distill.clone(), seed, total)?,
            Vec::new(),
        ),
    };
    let mut writer = write_rows(&metrics_path, &previous)?;
    let mut last_checkpoint = opts.resume.clone();

    while trainer.state.step < total {
        let step = trainer.state.step;
        let epoch = step / per_epoch;
        let b = (step % per_epoch) as usize;
        let order = epoch_order(clips.len(), seed, epoch);
        let end = ((b + 1) * distill.batch_size).min(clips.len());
        let batch: Vec<&VideoClip> = order[b * distill.batch_size..end].iter().map(|&i| &clips[i]).collect();

        let m = trainer.train_step(&batch, epoch).map_err(|e| match e {
            Error::NonFinite { step, what, .. } => Error::NonFinite {
                step,
                what,
                last_checkpoint: last_checkpoint.clone(),
            },
            other => other,
        })?;
        writer.serialize(MetricsRow::from(&m))?;
        writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "step {}/{} epoch {} loss {:.4} (cv {:.4}, dm {:.4}) entropy {:.3} center {:.3} lr {:.2e}",
            m.step,
            total,
            m.epoch,
            m.loss_total,
            m.loss_cv,
            m.loss_dm,
            m.teacher_entropy,
            m.center_norm,
            m.lr
        );
        on_step(&m);

        if distill.checkpoint_every > 0 && m.step % distill.checkpoint_every == 0 && m.step < total {
            let path = opts.out_dir.join(format!("step_{:06}.ckpt", m.step));
            save_checkpoint(&path, &trainer.to_checkpoint()?)?;
            last_checkpoint = Some(path);
        }
    }

    let final_checkpoint = opts.out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &trainer.to_checkpoint()?)?;
    Ok(RunSummary {
        steps: trainer.state.step,
        final_checkpoint,
        metrics: metrics_path,
    })
}
