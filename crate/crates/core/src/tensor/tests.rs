use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_row_sum() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c), &[1., 2., 3., 4.]);

    let r = g.constant(t(&[1, 3], &[1., 2., 3.]));
    let ones = g.constant(t(&[3, 1], &[1., 1., 1.]));
    let s = g.matmul(r, ones).unwrap();
    assert_eq!(g.shape(s), &[1, 1]);
    assert_eq!(g.value(s), &[6.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let expected = naive_matmul(a.values(), b.values(), 2, 3, 2);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).iter().zip(&expected) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn batched_matmul_broadcasts_batch_extents() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&[2, 1, 3, 4], &mut rng);
    let b = random(&[3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 3, 5]);
    for i in 0..2 {
        for j in 0..3 {
            let aa = &a.values()[i * 12..(i + 1) * 12];
            let bb = &b.values()[j * 20..(j + 1) * 20];
            let want = naive_matmul(aa, bb, 3, 4, 5);
            let off = (i * 3 + j) * 15;
            for (x, y) in g.value(c)[off..off + 15].iter().zip(&want) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[4], &[1., 1., 1., 1.]));
    let p = g.softmax(x, 0.07).unwrap();
    for &v in g.value(p) {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[0., 2f64.ln()]));
    let p = g.softmax(x, 1.0).unwrap();
    assert!((g.value(p)[0] - 1. / 3.).abs() < 1e-15);
    assert!((g.value(p)[1] - 2. / 3.).abs() < 1e-15);

    let x = g.constant(t(&[2], &[1., 0.]));
    let sharp = g.softmax(x, 0.04).unwrap();
    let soft = g.softmax(x, 0.07).unwrap();
    assert!(entropy(g.value(sharp)) < entropy(g.value(soft)));

    assert!(matches!(g.softmax(x, 0.0), Err(Error::Domain(_))));
    assert!(matches!(g.softmax(x, -1.0), Err(Error::Domain(_))));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(t(&[3], &[1., 1., 1.]));
    let zeros = g.constant(t(&[3], &[0., 0., 0.]));
    let c = g.constant(t(&[3], &[5., 5., 5.]));
    let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0., 0., 0.]);

    let x = g.constant(t(&[3], &[1., 2., 3.]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    let v = g.value(y);
    let mean = v.iter().sum::<f64>() / 3.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    // variance of (x-μ)/sqrt(σ²+eps) is σ²/(σ²+eps)
    assert!((var - 1.0).abs() < 2e-5, "{var}");

    let x = g.constant(t(&[2, 3], &[1., 7., -2., 0.5, 0.5, 3.]));
    let sevens = g.constant(t(&[3], &[7., 7., 7.]));
    let y = g.layer_norm(x, ones, sevens, 1e-5).unwrap();
    for row in g.value(y).chunks(3) {
        assert!((row.iter().sum::<f64>() / 3.0 - 7.0).abs() < 1e-12);
    }

    let bad = g.constant(t(&[2], &[1., 1.]));
    assert!(matches!(g.layer_norm(x, bad, zeros, 1e-5), Err(Error::Shape(_))));
}

#[test]
fn gelu_examples() {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
    let oracle = 1.0 * normal.cdf(1.0);
    assert!((gelu_scalar(1.0f64) - oracle).abs() < 1e-9, "{} vs {oracle}", gelu_scalar(1.0f64));
    assert!((oracle - 0.841345).abs() < 1e-6);
    for x in [-3.0, -0.7, 0.2, 2.4] {
        assert!((gelu_scalar(x) - x * normal.cdf(x)).abs() < 1e-9);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1., 2., 3.]));
    let sq = g.mul(x, x).unwrap();
    let root = g.sum_all(sq);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1., 2., 3.]));
    let y = g.add(x, x).unwrap();
    let root = g.sum_all(y);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., 2., 2.]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1., 2., 3.]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn inference_graph_tracks_nothing() {
    let mut g = Graph::inference();
    let x = g.param(t(&[2], &[1., 2.]));
    let y = g.mul(x, x).unwrap();
    let root = g.sum_all(y);
    g.backward(root).unwrap();
    assert!(g.grad(x).is_none());
    assert!(!g.requires_grad(root));
}

#[test]
fn fan_out_gradient_is_sum_of_single_consumers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = random(&[4], &mut rng);
    let run = |use_a: bool, use_b: bool| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let h = g.gelu(x);
        let mut terms = Vec::new();
        if use_a {
            let a = g.mul(h, h).unwrap();
            terms.push(g.sum_all(a));
        }
        if use_b {
            let b = g.softmax(h, 0.5).unwrap();
            let w = g.constant(t(&[4], &[1., -2., 3., 0.5]));
            let bw = g.mul(b, w).unwrap();
            terms.push(g.sum_all(bw));
        }
        let root = if terms.len() == 2 {
            g.add(terms[0], terms[1]).unwrap()
        } else {
            terms[0]
        };
        g.backward(root).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let both = run(true, true);
    let a = run(true, false);
    let b = run(false, true);
    for i in 0..4 {
        assert!((both[i] - (a[i] + b[i])).abs() < 1e-14);
    }
}

// ------------------------------------------------------------------
// finite differences, one isolated op at a time

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Checks `Σ w ⊙ op(inputs)` with fixed random weights `w` so every output
/// element contributes a distinct amount.
fn check_op(name: &str, shapes: &[&[usize]], build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut params = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        params.insert(format!("in{i}"), random(s, &mut rng));
    }
    let n_in = shapes.len();
    let weights_seed = rng.random::<u64>();
    let loss = move |g: &mut Graph<f64>, v: &ParamVars| -> Result<Var> {
        let inputs: Vec<Var> = (0..n_in).map(|i| v.get(&format!("in{i}"))).collect::<Result<_>>()?;
        let out = build(g, &inputs)?;
        let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = random(g.shape(out), &mut wr);
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        Ok(g.sum_all(prod))
    };
    let opts = GradCheckOptions {
        step: 1e-5,
        coords_per_tensor: 64,
        seed: 1,
    };
    let report = grad_check(&params, loss, opts).unwrap();
    assert!(report.passed(1e-6), "{name}: {report:?}");
}

#[test]
fn every_op_passes_finite_differences() {
    check_op("add_broadcast", &[&[2, 3, 4], &[3, 1]], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op("mul_broadcast", &[&[2, 3], &[3]], |g, v| g.mul(v[0], v[1]));
    check_op("scale", &[&[5]], |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_op("matmul_batched", &[&[2, 3, 4], &[2, 4, 3]], |g, v| g.matmul(v[0], v[1]));
    check_op("matmul_broadcast", &[&[2, 1, 2, 3], &[3, 3, 2]], |g, v| {
        g.matmul(v[0], v[1])
    });
    check_op("matmul_shared_rhs", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    check_op("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check_op("expand", &[&[1, 3]], |g, v| g.expand(v[0], &[4, 2, 3]));
    check_op("concat", &[&[2, 1, 3], &[2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 1));
    check_op("narrow", &[&[3, 5, 2]], |g, v| g.narrow(v[0], 1, 1, 3));
    check_op("sum_axis", &[&[3, 4, 2]], |g, v| g.sum_axis(v[0], 1));
    check_op("mean_axis", &[&[3, 4]], |g, v| g.mean_axis(v[0], 0));
    check_op("mean_all", &[&[3, 4]], |g, v| Ok(g.mean_all(v[0])));
    check_op("softmax", &[&[3, 5]], |g, v| g.softmax(v[0], 0.3));
    check_op("log_softmax", &[&[3, 5]], |g, v| g.log_softmax(v[0], 0.07));
    check_op("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check_op("gelu", &[&[7]], |g, v| Ok(g.gelu(v[0])));
    check_op("l2_normalize", &[&[3, 4]], |g, v| g.l2_normalize(v[0], 1e-12));
}

#[test]
fn random_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut params = ParamStore::new();
    params.insert("w", random(&[3, 4], &mut rng));
    params.insert("x", random(&[2, 3], &mut rng));
    let loss = |g: &mut Graph<f64>, v: &ParamVars| -> Result<Var> {
        let h = g.matmul(v.get("x")?, v.get("w")?)?;
        let a = g.gelu(h);
        let p = g.log_softmax(a, 0.5)?;
        Ok(g.sum_all(p))
    };
    let opts = GradCheckOptions {
        coords_per_tensor: 100,
        ..Default::default()
    };
    let r = grad_check(&params, loss, opts).unwrap();
    assert!(r.passed(1e-6), "{r:?}");
    assert_eq!(r.checked, 18);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        logits in prop::collection::vec(-30.0f64..30.0, 1..24),
        tau in 0.01f64..5.0,
    ) {
        let mut g = Graph::new();
        let k = logits.len();
        let spread = logits.iter().cloned().fold(f64::MIN, f64::max)
            - logits.iter().cloned().fold(f64::MAX, f64::min);
        let x = g.constant(Tensor::new(vec![k], logits).unwrap());
        let p = g.softmax(x, tau).unwrap();
        let s: f64 = g.value(p).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        // strictly positive while exp(-spread/tau) is representable
        if spread / tau < 700.0 {
            prop_assert!(g.value(p).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_entropy_grows_with_temperature(
        logits in prop::collection::vec(-3.0f64..3.0, 2..12),
    ) {
        let taus = [0.01, 0.04, 0.07, 0.1, 0.3, 1.0, 3.0, 10.0];
        let mut prev = -1.0;
        for tau in taus {
            let mut row = logits.clone();
            softmax_row(&mut row, tau);
            let h = entropy(&row);
            prop_assert!(h >= prev - 1e-12, "tau {}: {} < {}", tau, h, prev);
            prev = h;
        }
    }

    #[test]
    fn f32_softmax_sums_to_one(logits in prop::collection::vec(-5.0f32..5.0, 1..64)) {
        let mut row = logits;
        softmax_row(&mut row, 0.07f32);
        let s: f32 = row.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6 * 64.0);
    }
}
