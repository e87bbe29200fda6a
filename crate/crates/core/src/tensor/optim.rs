use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::params::{Grads, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            weight_decay: 4e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Holds the per-parameter moments and
/// the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor<F>>,
    pub second_moment: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        AdamW {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update at learning rate `lr_now`:
    /// `w ← w − lr·(m̂/(√v̂+ε) + λ·w)`.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>, lr_now: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one_b1 = F::from_f64(1.0 - c.beta1);
        let one_b2 = F::from_f64(1.0 - c.beta2);
        let bc1 = F::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - c.beta2.powi(t));
        let eps = F::from_f64(c.eps);
        let wd = F::from_f64(c.weight_decay);
        let lr = F::from_f64(lr_now);

        for (name, w) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
            let m = self
                .first_moment
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no optimizer state for `{name}`")))?;
            let v = self
                .second_moment
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no optimizer state for `{name}`")))?;
            if g.shape() != w.shape() || m.shape() != w.shape() {
                return Err(Error::shape(format!(
                    "`{name}`: parameter {:?}, gradient {:?}, moment {:?}",
                    w.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            for (((wi, &gi), mi), vi) in w
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *wi);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    fn grad(g: f64) -> Grads<f64> {
        Grads::from_store(&single(g))
    }

    #[test]
    fn pure_decoupled_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.04,
            ..AdamWConfig::default()
        };
        let mut p = single(1.0);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w - 0.996).abs() < 1e-15, "{w}");
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for g in [3.0, -0.25] {
            let mut p = single(0.5);
            let mut opt = AdamW::new(cfg, &p);
            opt.step(&mut p, &grad(g), 0.01).unwrap();
            let delta = p.get("w").unwrap().item() - 0.5;
            let expected = -0.01 * f64::signum(g);
            assert!((delta - expected).abs() < 1e-8, "g={g}: {delta}");
        }
    }

    #[test]
    fn descends_quadratic() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = single(2.0);
        let mut opt = AdamW::new(cfg, &p);
        let mut prev = 4.0;
        for _ in 0..3 {
            let w = p.get("w").unwrap().item();
            opt.step(&mut p, &grad(2.0 * w), 0.1).unwrap();
            let w = p.get("w").unwrap().item();
            assert!(w * w < prev);
            prev = w * w;
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_bit_identical() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = ParamStore::<f32>::new();
        p.insert(
            "w",
            Tensor::new(vec![4], vec![1.0, -3.5, 1e-7, 12345.678]).unwrap(),
        );
        let before = p.clone();
        let mut opt = AdamW::new(cfg, &p);
        let zeros = Grads::zeros_like(&p);
        opt.step(&mut p, &zeros, 0.5).unwrap();
        for (a, b) in p.get("w").unwrap().values().iter().zip(before.get("w").unwrap().values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
