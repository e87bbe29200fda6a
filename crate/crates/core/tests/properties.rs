use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use endovid_core::data::{clip_ranges, decode_ppm, encode_ppm, Checkpoint};
use endovid_core::distill::{
    cross_view_loss, dynamic_motion_loss, ema_update, mean_entropy, teacher_distribution, LossReduction,
};
use endovid_core::model::{ModelConfig, VideoTransformer};
use endovid_core::tensor::{CosineSchedule, Graph, ParamStore, Tensor};
use endovid_core::Frames;

fn store(values: &[f32]) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    p
}

proptest! {
    #[test]
    fn ppm_roundtrip_is_quantised(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame: Vec<f32> = (0..3 * h * w).map(|_| rand::Rng::random(&mut rng)).collect();
        let bytes = encode_ppm(&frame, h, w).unwrap();
        let (hh, ww, back) = decode_ppm(&bytes, Path::new("mem.ppm")).unwrap();
        prop_assert_eq!((hh, ww), (h, w));
        for (a, b) in frame.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn clip_ranges_tile_the_video(total in 0usize..2000, fps in 1.0f64..60.0, seconds in 0.5f64..10.0) {
        let len = (fps * seconds).round() as usize;
        prop_assume!(len > 0);
        let ranges = clip_ranges(total, fps, seconds).unwrap();
        let mut next = 0;
        for (i, r) in ranges.iter().enumerate() {
            prop_assert_eq!(r.start, next);
            if i + 1 < ranges.len() {
                prop_assert_eq!(r.len(), len);
            } else {
                prop_assert!(2 * r.len() >= len && r.len() <= len);
            }
            next = r.end;
        }
        prop_assert!(2 * (total - next) < len);
    }

    #[test]
    fn ema_is_the_closed_form(alpha in 0.0f32..=1.0, phi in prop::collection::vec(-3.0f32..3.0, 1..20), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f32> = phi.iter().map(|_| rand::Rng::random_range(&mut rng, -3.0f32..3.0)).collect();
        let mut t = store(&phi);
        ema_update(&mut t, &store(&theta), alpha).unwrap();
        for ((a, p), q) in t.get("w").unwrap().values().iter().zip(&phi).zip(&theta) {
            prop_assert_eq!(a.to_bits(), (alpha * p + (1.0 - alpha) * q).to_bits());
        }
    }

    #[test]
    fn pair_counts(gv in 1usize..4, lv in 0usize..5) {
        let k = 5;
        let teacher = Tensor::full(vec![gv, k], 1.0 / k as f64);
        let mut g = Graph::<f64>::new();
        let logp = |g: &mut Graph<f64>, n: usize| g.constant(Tensor::full(vec![n, k], -(k as f64).ln()));
        let local = (lv > 0).then(|| logp(&mut g, lv));
        let global = logp(&mut g, gv);
        let cv = cross_view_loss(&mut g, &teacher, local, LossReduction::Sum).unwrap();
        let dm = dynamic_motion_loss(&mut g, &teacher, Some(global), LossReduction::Sum).unwrap();
        prop_assert_eq!(cv.pairs, gv * lv);
        prop_assert_eq!(dm.pairs, gv * (gv - 1));
        // each pair contributes ln K under the uniform distribution
        let ln_k = (k as f64).ln();
        prop_assert!((cv.get(&g) - (gv * lv) as f64 * ln_k).abs() < 1e-9);
        prop_assert!((dm.get(&g) - (gv * (gv - 1)) as f64 * ln_k).abs() < 1e-9);
    }

    #[test]
    fn teacher_rows_are_distributions(logits in prop::collection::vec(-20.0f64..20.0, 12), tau in 0.01f64..1.0) {
        let center = vec![0.5; 4];
        let p = teacher_distribution(&logits, &center, tau).unwrap();
        for row in p.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        let h = mean_entropy(&p, 4);
        prop_assert!(h >= -1e-12 && h <= 4f64.ln() + 1e-12);
        // a center equal to the logits cancels them
        let flat = teacher_distribution(&logits[..4], &logits[..4], tau).unwrap();
        prop_assert!((mean_entropy(&flat, 4) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_stays_in_range(total in 1u64..500, frac in 0.0f64..0.5, step in 0u64..600) {
        let s = CosineSchedule::with_warmup_fraction(1e-3, 1e-6, frac, total).unwrap();
        let lr = s.lr_at(step);
        prop_assert!((0.0..=1e-3 + 1e-15).contains(&lr));
        if step >= s.warmup_steps {
            prop_assert!(lr >= 1e-6 - 1e-15);
            prop_assert!(s.lr_at(step + 1) <= lr + 1e-15);
        }
    }
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let cfg = ModelConfig::tiny();
    let m = VideoTransformer::new(cfg.clone()).unwrap();
    let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(9));
    let arrays: BTreeMap<String, Tensor<f32>> = p.iter().map(|(n, t)| (format!("student.{n}"), t.clone())).collect();
    let ckpt = Checkpoint {
        model: cfg,
        step: 17,
        seed: 3,
        meta: serde_json::json!({"note": "x"}),
        arrays,
    };
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem.ckpt")).unwrap();
    assert_eq!(back.step, 17);
    assert_eq!(back.model, ckpt.model);
    for (name, t) in &ckpt.arrays {
        let b = &back.arrays[name];
        assert_eq!(b.shape(), t.shape());
        assert!(b.values().iter().zip(t.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("cut.ckpt")).is_err());
}

#[test]
fn embedding_is_deterministic_and_finite() {
    let m = VideoTransformer::new(ModelConfig::tiny()).unwrap();
    let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let view = Frames::new(2, 8, 8, (0..2 * 3 * 64).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    let (logits, cls) = m.embed(&p, &view).unwrap();
    assert_eq!(logits.len(), m.config().out_dim);
    assert_eq!(cls.len(), m.config().embed_dim);
    assert!(logits.iter().chain(&cls).all(|v| v.is_finite()));
    // logits are cosines against unit prototypes
    assert!(logits.iter().all(|v| v.abs() <= 1.0 + 1e-5));
    assert_eq!(m.embed(&p, &view).unwrap(), (logits, cls));
}
