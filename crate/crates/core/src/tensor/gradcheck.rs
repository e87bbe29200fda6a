//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamStore, ParamVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor
    /// is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            coords_per_tensor: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`; infinite
    /// when the loss went non-finite.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Set when the loss was non-finite, naming where it happened.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tolerance
    }
}

/// Compare `backward` of the scalar `f(params)` against central differences
/// on a sample of coordinates of every parameter.
pub fn grad_check<L>(params: &ParamStore<f64>, f: L, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }

    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let root = f(&mut g, &vars)?;
    let loss = g.value(root)[0];
    if !loss.is_finite() {
        return Ok(GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst: None,
            checked: 0,
            failure: Some(format!("loss is {loss} at the unperturbed point")),
        });
    }
    g.backward(root)?;
    let grads = vars.collect_grads(&g);
    drop(g);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let root = f(&mut g, &vars)?;
        Ok(g.value(root)[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        failure: None,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let analytic_all = grads
            .get(&name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?
            .values()
            .to_vec();
        for idx in coords {
            let orig = params.get(&name)?.values()[idx];
            work.get_mut(&name)?.values_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(&name)?.values_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(&name)?.values_mut()[idx] = orig;

            report.checked += 1;
            if !plus.is_finite() || !minus.is_finite() {
                report.max_rel_error = f64::INFINITY;
                report.failure = Some(format!("non-finite loss perturbing `{name}`[{idx}]"));
                report.worst = Some(Coordinate {
                    param: name.clone(),
                    index: idx,
                    analytic: analytic_all[idx],
                    numeric: f64::NAN,
                });
                return Ok(report);
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = analytic_all[idx];
            let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Coordinate {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(vec![values.len()], values).unwrap());
        p
    }

    fn sum_squares(g: &mut Graph<f64>, v: &ParamVars) -> Result<Var> {
        let x = v.get("x")?;
        let sq = g.mul(x, x)?;
        Ok(g.sum_all(sq))
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let p = store(vec![0.3, -1.7, 2.5, 10.0]);
        let r = grad_check(&p, sum_squares, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn zero_step_is_a_domain_error() {
        let p = store(vec![1.0]);
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(matches!(grad_check(&p, sum_squares, opts), Err(Error::Domain(_))));
    }

    #[test]
    fn wrong_backward_is_detected() {
        let p = store(vec![0.5, 1.5]);
        let r = grad_check(
            &p,
            |g, v| {
                let x = v.get("x")?;
                // sin with the derivative of cos
                let y = g.map(x, f64::sin, |x| -x.sin());
                Ok(g.sum_all(y))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn non_finite_loss_reports_coordinate() {
        let p = store(vec![1e-6, 2.0]);
        let r = grad_check(
            &p,
            |g, v| {
                let x = v.get("x")?;
                let y = g.map(x, f64::ln, |x| 1.0 / x);
                Ok(g.sum_all(y))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed(1e-4));
        let worst = r.worst.unwrap();
        assert_eq!((worst.param.as_str(), worst.index), ("x", 0));
    }
}
