//! Linear-probe evaluation of a backbone on labelled clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::model::VideoTransformer;
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use crate::views::resize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Frames sampled uniformly from each clip.
    pub frames: usize,
    /// Square input resolution; 0 uses the model's spatial capacity.
    pub size: usize,
    pub train_fraction: f64,
    /// Full-batch optimisation steps of the classifier.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Also train the backbone (slow; not a frozen-feature probe).
    pub unfreeze: bool,
    pub backbone_lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            frames: 8,
            size: 0,
            train_fraction: 0.8,
            epochs: 200,
            lr: 1e-2,
            weight_decay: 1e-4,
            unfreeze: false,
            backbone_lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub classes: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
    /// Unweighted mean of per-class F1, in percent.
    pub macro_f1: f64,
    /// F1 of class 1 when there are exactly two classes, in percent.
    pub binary_f1: Option<f64>,
    /// `confusion[true][predicted]` on the test split.
    pub confusion: Vec<Vec<usize>>,
}

/// `count` frame indices spread evenly over `len` frames (centres of equal
/// segments; repeats when the clip is shorter).
pub fn uniform_indices(len: usize, count: usize) -> Vec<usize> {
    (0..count)
        .map(|i| (((2 * i + 1) * len) / (2 * count)).min(len - 1))
        .collect()
}

/// The probe input of `clip`: uniformly sampled frames, whole frame resized
/// to `size × size`.
pub fn probe_view(clip: &VideoClip, frames: usize, size: usize) -> Result<Frames> {
    if clip.is_empty() || frames == 0 || size == 0 {
        return Err(Error::domain("probe views need frames and a positive size"));
    }
    let picked = clip.frames.select(&uniform_indices(clip.len(), frames))?;
    if picked.height() == size && picked.width() == size {
        return Ok(picked);
    }
    resize(&picked, size, size)
}

/// Seeded split keeping `fraction` of every class for training (at least
/// one clip per side for classes with two or more clips).
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = n;
        }
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Percent accuracy, per-class F1 macro average, and class-1 F1 for binary
/// tasks.
pub fn classification_scores(truth: &[usize], predicted: &[usize], classes: usize) -> (f64, f64, Option<f64>, Vec<Vec<usize>>) {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = 100.0 * correct as f64 / truth.len().max(1) as f64;
    let f1 = |c: usize| {
        let tp = confusion[c][c] as f64;
        let fp: f64 = (0..classes).filter(|&t| t != c).map(|t| confusion[t][c] as f64).sum();
        let fneg: f64 = (0..classes).filter(|&p| p != c).map(|p| confusion[c][p] as f64).sum();
        if tp == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * tp / (2.0 * tp + fp + fneg)
        }
    };
    let macro_f1 = (0..classes).map(f1).sum::<f64>() / classes as f64;
    let binary = (classes == 2).then(|| f1(1));
    (accuracy, macro_f1, binary, confusion)
}

fn labels_of(clips: &[VideoClip]) -> Result<(Vec<usize>, usize)> {
    let labels = clips
        .iter()
        .map(|c| {
            c.label
                .ok_or_else(|| Error::domain(format!("clip `{}` has no label", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::domain(format!(
            "probe needs at least two classes, found {}",
            distinct.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok((labels, classes))
}

/// Class-token features of every clip.
pub fn extract_features(
    model: &VideoTransformer,
    params: &ParamStore<f32>,
    clips: &[VideoClip],
    cfg: &ProbeConfig,
) -> Result<Vec<Vec<f32>>> {
    let size = probe_size(model, cfg);
    clips
        .iter()
        .map(|c| {
            let view = probe_view(c, cfg.frames, size)?;
            Ok(model.embed(params, &view)?.1)
        })
        .collect()
}

fn probe_size(model: &VideoTransformer, cfg: &ProbeConfig) -> usize {
    if cfg.size == 0 {
        model.config().spatial_capacity
    } else {
        cfg.size
    }
}

/// Feature standardisation fitted on the training rows.
struct Standardizer {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl Standardizer {
    fn fit(rows: &[&[f32]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; d];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(*r) {
                *m += x as f64 / n;
            }
        }
        let mut var = vec![0.0f64; d];
        for r in rows {
            for ((v, &x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x as f64 - m).powi(2) / n;
            }
        }
        Standardizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_std: var.iter().map(|&v| (1.0 / (v + 1e-6).sqrt()) as f32).collect(),
        }
    }

    fn apply(&self, row: &[f32]) -> Vec<f32> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }
}

fn classifier_params(d: usize, classes: usize, seed: u64) -> ParamStore<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f32).sqrt();
    let mut p = ParamStore::new();
    p.insert(
        "probe.weight",
        Tensor::from_fn(vec![d, classes], |_| rng.random_range(-bound..bound)),
    );
    p.insert("probe.bias", Tensor::zeros(vec![classes]));
    p
}

/// Mean cross-entropy of `logits [B, C]` against `labels`.
fn cross_entropy(g: &mut Graph<f32>, logits: Var, labels: &[usize], classes: usize) -> Result<Var> {
    let logp = g.log_softmax(logits, 1.0)?;
    let mut onehot = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = -1.0 / labels.len() as f32;
    }
    let t = g.constant(Tensor::new(vec![labels.len(), classes], onehot)?);
    let prod = g.mul(logp, t)?;
    Ok(g.sum_all(prod))
}

fn argmax_rows(values: &[f32], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn fit_linear(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ParamStore<f32>> {
    let d = train_x[0].len();
    let mut params = classifier_params(d, classes, cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let x = Tensor::new(vec![train_x.len(), d], train_x.concat())?;
    for _ in 0..cfg.epochs {
        let mut g = Graph::<f32>::new();
        let v = params.register(&mut g);
        let xv = g.constant(x.clone());
        let logits = linear_logits(&mut g, &v, xv)?;
        let loss = cross_entropy(&mut g, logits, train_y, classes)?;
        g.backward(loss)?;
        let grads = v.collect_grads(&g);
        opt.step(&mut params, &grads, cfg.lr)?;
    }
    Ok(params)
}

fn linear_logits(g: &mut Graph<f32>, v: &crate::tensor::ParamVars, x: Var) -> Result<Var> {
    let y = g.matmul(x, v.get("probe.weight")?)?;
    g.add(y, v.get("probe.bias")?)
}

fn predict(params: &ParamStore<f32>, rows: &[Vec<f32>], classes: usize) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let d = rows[0].len();
    let mut g = Graph::<f32>::inference();
    let v = params.register(&mut g);
    let x = g.constant(Tensor::new(vec![rows.len(), d], rows.concat())?);
    let logits = linear_logits(&mut g, &v, x)?;
    Ok(argmax_rows(g.value(logits), classes))
}

/// Train a linear classifier on class-token features of the training split
/// and score it on the held-out split. With `cfg.unfreeze` the backbone is
/// trained jointly instead.
pub fn linear_probe(
    model: &VideoTransformer,
    backbone: &ParamStore<f32>,
    clips: &[VideoClip],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::config("probe.train_fraction", "must lie strictly between 0 and 1"));
    }
    if cfg.frames == 0 || cfg.frames > model.config().max_frames {
        return Err(Error::config(
            "probe.frames",
            format!("must lie in 1..={}", model.config().max_frames),
        ));
    }
    let (labels, classes) = labels_of(clips)?;
    let (train, test) = stratified_split(&labels, cfg.train_fraction, cfg.seed);
    if test.is_empty() {
        return Err(Error::domain("held-out split is empty; need more clips per class"));
    }
    if cfg.unfreeze {
        return finetune(model, backbone, clips, &labels, classes, &train, &test, cfg);
    }

    let feats = extract_features(model, backbone, clips, cfg)?;
    let train_rows: Vec<&[f32]> = train.iter().map(|&i| feats[i].as_slice()).collect();
    let scaler = Standardizer::fit(&train_rows);
    let tx: Vec<Vec<f32>> = train.iter().map(|&i| scaler.apply(&feats[i])).collect();
    let ty: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let ex: Vec<Vec<f32>> = test.iter().map(|&i| scaler.apply(&feats[i])).collect();
    let ey: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let params = fit_linear(&tx, &ty, classes, cfg)?;
    let train_pred = predict(&params, &tx, classes)?;
    let test_pred = predict(&params, &ex, classes)?;
    Ok(report(classes, &ty, &train_pred, &ey, &test_pred))
}

fn report(classes: usize, ty: &[usize], tp: &[usize], ey: &[usize], ep: &[usize]) -> ProbeReport {
    let (train_accuracy, ..) = classification_scores(ty, tp, classes);
    let (accuracy, macro_f1, binary_f1, confusion) = classification_scores(ey, ep, classes);
    ProbeReport {
        classes,
        train_clips: ty.len(),
        test_clips: ey.len(),
        train_accuracy,
        accuracy,
        macro_f1,
        binary_f1,
        confusion,
    }
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    model: &VideoTransformer,
    backbone: &ParamStore<f32>,
    clips: &[VideoClip],
    labels: &[usize],
    classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let size = probe_size(model, cfg);
    let views = clips
        .iter()
        .map(|c| probe_view(c, cfg.frames, size))
        .collect::<Result<Vec<_>>>()?;
    let d = model.config().embed_dim;
    let mut params = backbone.clone();
    for (k, t) in classifier_params(d, classes, cfg.seed).iter() {
        params.insert(k.clone(), t.clone());
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.backbone_lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let ty: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let forward = |g: &mut Graph<f32>, v: &crate::tensor::ParamVars, idx: &[usize]| -> Result<Var> {
        let rows = idx
            .iter()
            .map(|&i| model.forward(g, v, &views[i]).map(|o| o.cls))
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat(&rows, 0)?;
        linear_logits(g, v, x)
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::<f32>::new();
        let v = params.register(&mut g);
        let logits = forward(&mut g, &v, train)?;
        let loss = cross_entropy(&mut g, logits, &ty, classes)?;
        g.backward(loss)?;
        let grads = v.collect_grads(&g);
        opt.step(&mut params, &grads, cfg.backbone_lr)?;
    }
    let predict_idx = |idx: &[usize]| -> Result<Vec<usize>> {
        let mut g = Graph::<f32>::inference();
        let v = params.register(&mut g);
        let logits = forward(&mut g, &v, idx)?;
        Ok(argmax_rows(g.value(logits), classes))
    };
    let ey: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let tp = predict_idx(train)?;
    let ep = predict_idx(test)?;
    Ok(report(classes, &ty, &tp, &ey, &ep))
}
