//! Finite-difference checks of every differentiable op class and of the full
//! pre-training loss, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic_dataset, SyntheticSpec};
use crate::distill::{cross_view_rows, student_objective, teacher_distribution, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VideoTransformer};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, ParamVars, Tensor, Var};
use crate::views::{sample_views, ViewConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Deliberate defects for exercising the harness itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// An op whose backward is the derivative of a different function.
    WrongBackward,
    /// A loss that evaluates to NaN.
    NonFinite,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub model: ModelConfig,
    pub views: ViewConfig,
    pub distill: DistillConfig,
    pub seed: u64,
    pub check: GradCheckOptions,
    pub tolerance: f64,
    pub inject: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            model: ModelConfig::tiny(),
            views: ViewConfig::tiny(),
            distill: DistillConfig::paper(),
            seed: 0,
            check: GradCheckOptions::default(),
            tolerance: DEFAULT_TOLERANCE,
            inject: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckItem {
    pub name: String,
    pub report: GradCheckReport,
    pub passed: bool,
}

fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        p.insert(*name, Tensor::new(shape.to_vec(), values).expect("valid shape"));
    }
    p
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type OpLoss = Box<dyn Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<(&'static str, &'static [usize])>, OpLoss)> {
    vec![
        (
            "matmul",
            vec![("a", &[3, 4]), ("b", &[4, 5])],
            Box::new(move |g, v| {
                let y = g.matmul(v.get("a")?, v.get("b")?)?;
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "matmul_batched",
            vec![("a", &[2, 3, 4]), ("b", &[2, 4, 2])],
            Box::new(move |g, v| {
                let y = g.matmul(v.get("a")?, v.get("b")?)?;
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "elementwise_broadcast",
            vec![("a", &[2, 3]), ("b", &[3])],
            Box::new(move |g, v| {
                let (a, b) = (v.get("a")?, v.get("b")?);
                let s = g.add(a, b)?;
                let d = g.sub(s, b)?;
                let m = g.mul(d, b)?;
                let y = g.scale(m, 0.7);
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "gelu",
            vec![("x", &[7])],
            Box::new(move |g, v| {
                let y = g.gelu(v.get("x")?);
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "softmax",
            vec![("x", &[3, 5])],
            Box::new(move |g, v| {
                let y = g.softmax(v.get("x")?, 0.5)?;
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "log_softmax",
            vec![("x", &[3, 5])],
            Box::new(move |g, v| {
                let y = g.log_softmax(v.get("x")?, 0.3)?;
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "layer_norm",
            vec![("x", &[4, 6]), ("gamma", &[6]), ("beta", &[6])],
            Box::new(move |g, v| {
                let y = g.layer_norm(v.get("x")?, v.get("gamma")?, v.get("beta")?, 1e-6)?;
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "l2_normalize",
            vec![("x", &[3, 4])],
            Box::new(move |g, v| {
                let y = g.l2_normalize(v.get("x")?, 1e-12)?;
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "shape_ops",
            vec![("a", &[2, 3, 4]), ("b", &[1, 4])],
            Box::new(move |g, v| {
                let (a, b) = (v.get("a")?, v.get("b")?);
                let p = g.permute(a, &[1, 0, 2])?;
                let r = g.reshape(p, &[6, 4])?;
                let e = g.expand(b, &[2, 4])?;
                let c = g.concat(&[r, e], 0)?;
                let n = g.narrow(c, 0, 1, 6)?;
                let m = g.mean_axis(n, 1)?;
                let s = g.sum_axis(c, 0)?;
                let y = weighted_sum(g, m, seed)?;
                let z = weighted_sum(g, s, seed + 1)?;
                let t = g.mean_all(c);
                let yz = g.add(y, z)?;
                g.add(yz, t)
            }),
        ),
    ]
}

fn run_item(
    name: &str,
    params: &ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
    opts: &SuiteOptions,
) -> Result<CheckItem> {
    let report = grad_check(params, f, opts.check)?;
    let passed = report.passed(opts.tolerance);
    Ok(CheckItem {
        name: name.to_string(),
        report,
        passed,
    })
}

/// Student parameters, frozen teacher targets and sampled views for one
/// synthetic clip, ready for a 64-bit evaluation of the total loss.
struct LossFixture {
    model: VideoTransformer,
    student: ParamStore<f64>,
    globals: Vec<crate::Frames>,
    locals: Vec<crate::Frames>,
    targets: Tensor<f64>,
    cv_rows: Vec<usize>,
}

fn loss_fixture(opts: &SuiteOptions) -> Result<LossFixture> {
    let model = VideoTransformer::new(opts.model.clone())?;
    opts.views.validate()?;
    opts.distill.validate()?;
    let student = model.init_params(&mut ChaCha8Rng::seed_from_u64(opts.seed)).cast::<f64>();
    let teacher = model
        .init_params(&mut ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1)))
        .cast::<f64>();
    let side = opts.views.global_size.max(opts.views.local_size) * 2;
    let frames = opts.views.max_global_frames().max(2) * 2;
    let square = (side / 4).max(1);
    let spec = SyntheticSpec {
        count: 1,
        size: side,
        frames,
        square,
        base_speed: ((side - square) as f64 / (2 * frames) as f64).max(1e-3),
        seed: opts.seed,
        ..Default::default()
    };
    let clip = generate_synthetic_dataset(&spec)?.1.remove(0);
    let g_count = if opts.views.global_views == 1 && opts.distill.dynamic_motion {
        2
    } else {
        opts.views.global_views
    };
    let set = sample_views(&clip, &opts.views, g_count, opts.seed, 0)?;
    let globals: Vec<_> = set.globals.iter().map(|v| v.frames.clone()).collect();
    let locals: Vec<_> = set.locals.iter().map(|v| v.frames.clone()).collect();

    let k = opts.model.out_dim;
    let mut tg = Graph::<f64>::inference();
    let tv = teacher.register(&mut tg);
    let mut logits = Vec::new();
    for v in &globals {
        let out = model.forward(&mut tg, &tv, v)?;
        logits.extend_from_slice(tg.value(out.logits));
    }
    let probs = teacher_distribution(&logits, &vec![0.0; k], opts.distill.teacher_temp)?;
    let targets = Tensor::new(vec![globals.len(), k], probs)?;
    let counts: Vec<usize> = globals.iter().map(|f| f.len()).collect();
    let cv_rows = cross_view_rows(&counts, opts.views.global_views);
    Ok(LossFixture {
        model,
        student,
        globals,
        locals,
        targets,
        cv_rows,
    })
}

/// Check each op class, then the full loss of the configured model; faults
/// in `opts.inject` add one deliberately broken item.
pub fn gradcheck_suite(opts: &SuiteOptions, mut on_item: impl FnMut(&CheckItem)) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (name, shapes, f) in op_cases(opts.seed) {
        let params = random_store(&mut rng, &shapes);
        let item = run_item(name, &params, f, opts)?;
        on_item(&item);
        items.push(item);
    }

    match opts.inject {
        Some(Fault::WrongBackward) => {
            let params = random_store(&mut rng, &[("x", &[5])]);
            let item = run_item(
                "injected_wrong_backward",
                &params,
                |g, v| {
                    let y = g.map(v.get("x")?, f64::sin, |x| -x.sin());
                    Ok(g.sum_all(y))
                },
                opts,
            )?;
            on_item(&item);
            items.push(item);
        }
        Some(Fault::NonFinite) => {
            let params = random_store(&mut rng, &[("x", &[3])]);
            let item = run_item(
                "injected_non_finite",
                &params,
                |g, v| {
                    let nan = g.constant(Tensor::scalar(f64::NAN));
                    let s = g.sum_all(v.get("x")?);
                    g.mul(s, nan)
                },
                opts,
            )?;
            on_item(&item);
            items.push(item);
        }
        None => {}
    }

    let fx = loss_fixture(opts)?;
    let globals: Vec<_> = fx.globals.iter().collect();
    let locals: Vec<_> = fx.locals.iter().collect();
    let item = run_item(
        "total_loss",
        &fx.student,
        |g, v| {
            let obj = student_objective(
                g,
                &fx.model,
                v,
                &globals,
                &locals,
                &fx.targets,
                &fx.cv_rows,
                &opts.distill,
            )?;
            obj.total.ok_or_else(|| Error::contract("configuration leaves no loss term to check"))
        },
        opts,
    )?;
    on_item(&item);
    items.push(item);
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> SuiteOptions {
        SuiteOptions {
            model: ModelConfig {
                depth: 1,
                ..ModelConfig::tiny()
            },
            check: GradCheckOptions {
                coords_per_tensor: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn op_classes_pass() {
        let items = gradcheck_suite(&fast(), |_| {}).unwrap();
        assert_eq!(items.last().unwrap().name, "total_loss");
        for it in &items {
            assert!(it.passed, "{}: {:?}", it.name, it.report);
            assert!(it.report.checked > 0);
        }
    }

    #[test]
    fn injected_faults_fail() {
        for fault in [Fault::WrongBackward, Fault::NonFinite] {
            let opts = SuiteOptions {
                inject: Some(fault),
                ..fast()
            };
            let items = gradcheck_suite(&opts, |_| {}).unwrap();
            let failed: Vec<_> = items.iter().filter(|i| !i.passed).map(|i| i.name.as_str()).collect();
            assert_eq!(failed.len(), 1, "{fault:?}: {failed:?}");
            assert!(failed[0].starts_with("injected"));
        }
    }
}
