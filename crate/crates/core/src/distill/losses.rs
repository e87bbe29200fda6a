use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Graph, Scalar, Tensor, Var};

/// How pair terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Average over pairs.
    #[default]
    Mean,
    /// Plain double sum.
    Sum,
}

/// A pairwise cross-entropy term and the number of pairs it covers. `value`
/// is `None` when there are no pairs; the loss is then zero.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub value: Option<Var>,
    pub pairs: usize,
}

impl PairLoss {
    pub fn empty() -> Self {
        PairLoss { value: None, pairs: 0 }
    }

    pub fn get<F: Scalar>(&self, g: &Graph<F>) -> f64 {
        self.value.map_or(0.0, |v| g.value(v)[0].to_f64())
    }
}

/// Teacher targets `softmax((f − c) / τ_t)` for each row of `logits`
/// (`rows × K`, row-major). Plain values: nothing flows back into them.
pub fn teacher_distribution<F: Scalar>(logits: &[F], center: &[F], tau: f64) -> Result<Vec<F>> {
    let k = center.len();
    if k == 0 || logits.len() % k != 0 {
        return Err(Error::shape(format!(
            "{} teacher logits do not split into rows of K = {k}",
            logits.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    let mut out: Vec<F> = logits.to_vec();
    for row in out.chunks_mut(k) {
        for (x, &c) in row.iter_mut().zip(center) {
            *x = *x - c;
        }
        softmax_row(row, F::from_f64(tau));
    }
    Ok(out)
}

/// Student log-probabilities `log softmax(f / τ_s)` row by row; gradients
/// flow.
pub fn student_log_distribution<F: Scalar>(g: &mut Graph<F>, logits: Var, tau: f64) -> Result<Var> {
    g.log_softmax(logits, F::from_f64(tau))
}

/// Mean (or sum) of `−p_t(i) · log p_s(j)` over every teacher row `i` and
/// student row `j`.
pub fn cross_view_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher: &Tensor<F>,
    student_logp: Option<Var>,
    reduction: LossReduction,
) -> Result<PairLoss> {
    let Some(logp) = student_logp else {
        return Ok(PairLoss::empty());
    };
    let (gn, k) = rows_cols(teacher.shape())?;
    let ln = check_student(g, logp, k)?;
    let pt = g.constant(teacher.clone());
    let lt = g.permute(logp, &[1, 0])?;
    let m = g.matmul(pt, lt)?;
    finish(g, m, gn * ln, reduction)
}

/// Mean (or sum) of `−p_t(i) · log p_s(k)` over ordered pairs `i ≠ k` of
/// global views; zero pairs when there is a single global view.
pub fn dynamic_motion_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher: &Tensor<F>,
    student_logp: Option<Var>,
    reduction: LossReduction,
) -> Result<PairLoss> {
    let (gn, k) = rows_cols(teacher.shape())?;
    let Some(logp) = student_logp else {
        return Ok(PairLoss::empty());
    };
    let sn = check_student(g, logp, k)?;
    if sn != gn {
        return Err(Error::shape(format!(
            "motion matching needs the same global views on both sides, got {gn} teacher and {sn} student rows"
        )));
    }
    if gn < 2 {
        return Ok(PairLoss::empty());
    }
    let pt = g.constant(teacher.clone());
    let lt = g.permute(logp, &[1, 0])?;
    let m = g.matmul(pt, lt)?;
    let mask = g.constant(Tensor::from_fn(vec![gn, gn], |i| {
        if i / gn == i % gn {
            F::ZERO
        } else {
            F::ONE
        }
    }));
    let m = g.mul(m, mask)?;
    finish(g, m, gn * (gn - 1), reduction)
}

fn finish<F: Scalar>(g: &mut Graph<F>, m: Var, pairs: usize, reduction: LossReduction) -> Result<PairLoss> {
    let s = g.sum_all(m);
    let c = match reduction {
        LossReduction::Mean => -1.0 / pairs as f64,
        LossReduction::Sum => -1.0,
    };
    Ok(PairLoss {
        value: Some(g.scale(s, F::from_f64(c))),
        pairs,
    })
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, k] => Ok((*r, *k)),
        _ => Err(Error::shape(format!("teacher targets must be [views, K], got {shape:?}"))),
    }
}

fn check_student<F: Scalar>(g: &Graph<F>, logp: Var, k: usize) -> Result<usize> {
    match g.shape(logp) {
        [r, kk] if *kk == k => Ok(*r),
        s => Err(Error::shape(format!(
            "student log-probabilities {s:?} do not match K = {k}"
        ))),
    }
}

/// `cv + dm`; `None` when neither term has pairs. A non-finite sum is a
/// [`Error::NonFinite`] (with step 0; the trainer fills in its own).
pub fn total_loss<F: Scalar>(g: &mut Graph<F>, cv: PairLoss, dm: PairLoss) -> Result<Option<Var>> {
    let total = match (cv.value, dm.value) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    };
    if let Some(t) = total {
        let v = g.value(t)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                what: format!("loss (cross-view {}, motion {})", cv.get(g), dm.get(g)),
                last_checkpoint: None,
            });
        }
    }
    Ok(total)
}

/// Shannon entropy (nats) of each row of `probs`, averaged over rows.
pub fn mean_entropy<F: Scalar>(probs: &[F], k: usize) -> f64 {
    let rows = probs.len() / k;
    if rows == 0 {
        return 0.0;
    }
    let total: f64 = probs
        .chunks(k)
        .map(|row| {
            row.iter()
                .map(|&p| {
                    let p = p.to_f64();
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}
