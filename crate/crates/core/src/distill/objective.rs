use super::losses::{
    cross_view_loss, dynamic_motion_loss, student_log_distribution, total_loss, PairLoss,
};
use super::DistillConfig;
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::model::VideoTransformer;
use crate::tensor::{Graph, ParamVars, Scalar, Tensor, Var};

/// Loss terms of one clip.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub cv: PairLoss,
    pub dm: PairLoss,
    pub total: Option<Var>,
}

/// Which global views act as cross-view teachers. With a single requested
/// global view but two sampled (for the motion term), only the longer one is
/// used.
pub fn cross_view_rows(frame_counts: &[usize], requested: usize) -> Vec<usize> {
    if requested == 1 && frame_counts.len() > 1 {
        let mut best = 0;
        for (i, &t) in frame_counts.iter().enumerate() {
            if t > frame_counts[best] {
                best = i;
            }
        }
        vec![best]
    } else {
        (0..frame_counts.len()).collect()
    }
}

fn stack_logits<F: Scalar>(
    g: &mut Graph<F>,
    model: &VideoTransformer,
    vars: &ParamVars,
    views: &[&Frames],
) -> Result<Option<Var>> {
    if views.is_empty() {
        return Ok(None);
    }
    let rows = views
        .iter()
        .map(|v| model.forward(g, vars, v).map(|o| o.logits))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(g.concat(&rows, 0)?))
}

/// Student side of the objective for one clip. `teacher` holds the teacher
/// distributions of all `globals` (rows in the same order); `cv_rows` picks
/// the rows that act as cross-view targets.
pub fn student_objective<F: Scalar>(
    g: &mut Graph<F>,
    model: &VideoTransformer,
    vars: &ParamVars,
    globals: &[&Frames],
    locals: &[&Frames],
    teacher: &Tensor<F>,
    cv_rows: &[usize],
    cfg: &DistillConfig,
) -> Result<Objective> {
    let k = model.config().out_dim;
    if teacher.shape() != [globals.len(), k] {
        return Err(Error::shape(format!(
            "teacher targets {:?} do not match {} global views of K = {k}",
            teacher.shape(),
            globals.len()
        )));
    }
    let cv = if cfg.cross_view && !locals.is_empty() {
        let logits = stack_logits(g, model, vars, locals)?;
        let logp = logits.map(|l| student_log_distribution(g, l, cfg.student_temp)).transpose()?;
        let rows: Vec<F> = cv_rows
            .iter()
            .flat_map(|&r| teacher.values()[r * k..(r + 1) * k].iter().copied())
            .collect();
        let targets = Tensor::new(vec![cv_rows.len(), k], rows)?;
        cross_view_loss(g, &targets, logp, cfg.reduction)?
    } else {
        PairLoss::empty()
    };
    let dm = if cfg.dynamic_motion && globals.len() > 1 {
        let logits = stack_logits(g, model, vars, globals)?;
        let logp = logits.map(|l| student_log_distribution(g, l, cfg.student_temp)).transpose()?;
        dynamic_motion_loss(g, teacher, logp, cfg.reduction)?
    } else {
        PairLoss::empty()
    };
    let total = total_loss(g, cv, dm)?;
    Ok(Objective { cv, dm, total })
}
