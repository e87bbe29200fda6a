use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// `φ ← α·φ + (1−α)·θ` for every teacher parameter.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, alpha: f32) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(Error::contract("teacher and student parameters differ in structure"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("EMA momentum {alpha} outside [0, 1]")));
    }
    let beta = 1.0 - alpha;
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        for (phi, &theta) in t.values_mut().iter_mut().zip(s.values()) {
            *phi = alpha * *phi + beta * theta;
        }
    }
    Ok(())
}

/// Running mean `c` of teacher outputs subtracted before the teacher softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Center {
    pub values: Vec<f32>,
    pub momentum: f64,
}

impl Center {
    pub fn zeros(k: usize, momentum: f64) -> Self {
        Center {
            values: vec![0.0; k],
            momentum,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// `c ← m·c + (1−m)·mean(rows)` over the rows of `batch` (`rows × K`).
    pub fn update(&mut self, batch: &[f32]) -> Result<()> {
        let k = self.values.len();
        if batch.is_empty() || batch.len() % k != 0 {
            return Err(Error::shape(format!(
                "center update needs a non-empty batch of rows of {k}, got {} values",
                batch.len()
            )));
        }
        let rows = (batch.len() / k) as f64;
        let mut mean = vec![0.0f64; k];
        for row in batch.chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        let m = self.momentum;
        for (c, s) in self.values.iter_mut().zip(mean) {
            *c = (m * *c as f64 + (1.0 - m) * (s / rows)) as f32;
        }
        Ok(())
    }
}
