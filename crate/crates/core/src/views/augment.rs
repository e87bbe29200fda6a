use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::Frames;

/// Probabilities and strengths of the per-view augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_sigma: (f64, f64),
    /// Blur probability for the first global view.
    pub blur_p_first: f64,
    /// Blur probability for every other view.
    pub blur_p_other: f64,
    pub solarize_threshold: f64,
    /// Solarize probability for the second global view (never applied elsewhere).
    pub solarize_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            blur_sigma: (0.1, 2.0),
            blur_p_first: 1.0,
            blur_p_other: 0.1,
            solarize_threshold: 0.5,
            solarize_p: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("views.augment.flip_p", self.flip_p),
            ("views.augment.jitter_p", self.jitter_p),
            ("views.augment.blur_p_first", self.blur_p_first),
            ("views.augment.blur_p_other", self.blur_p_other),
            ("views.augment.solarize_p", self.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("probability {p} outside [0, 1]")));
            }
        }
        for (field, s) in [
            ("views.augment.brightness", self.brightness),
            ("views.augment.contrast", self.contrast),
            ("views.augment.saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(field, format!("strength {s} outside [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config("views.augment.hue", "must lie in [0, 0.5]"));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("views.augment.blur_sigma", "need 0 < min <= max"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

/// One realisation of the augmentations, shared by every frame of a view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub jitter: Option<ColorJitter>,
    pub blur_sigma: Option<f32>,
    pub solarize: Option<f32>,
}

/// Which view an augmentation draw is for; blur and solarize depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewSlot {
    Global(usize),
    Local(usize),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams::default()
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentParams::default()
    }

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, slot: ViewSlot, rng: &mut R) -> Self {
        if !cfg.enabled {
            return AugmentParams::identity();
        }
        let flip = rng.random_bool(cfg.flip_p);
        let jitter = rng.random_bool(cfg.jitter_p).then(|| {
            let factor = |rng: &mut R, s: f64| rng.random_range(1.0 - s..=1.0 + s) as f32;
            ColorJitter {
                brightness: factor(rng, cfg.brightness),
                contrast: factor(rng, cfg.contrast),
                saturation: factor(rng, cfg.saturation),
                hue: rng.random_range(-cfg.hue..=cfg.hue) as f32,
            }
        });
        let blur_p = match slot {
            ViewSlot::Global(0) => cfg.blur_p_first,
            _ => cfg.blur_p_other,
        };
        let blur_sigma = rng
            .random_bool(blur_p)
            .then(|| rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) as f32);
        let solarize = match slot {
            ViewSlot::Global(1) => rng.random_bool(cfg.solarize_p),
            _ => false,
        }
        .then_some(cfg.solarize_threshold as f32);
        AugmentParams {
            flip,
            jitter,
            blur_sigma,
            solarize,
        }
    }
}

/// Apply one parameter realisation to every frame. Each frame is transformed
/// independently of the others; the result is clamped to `[0, 1]`.
pub fn augment_view(frames: &Frames, params: &AugmentParams) -> Frames {
    let mut out = frames.clone();
    if params.is_identity() {
        return out;
    }
    for t in 0..out.len() {
        let (h, w) = (out.height(), out.width());
        augment_frame(out.frame_mut(t), h, w, params);
    }
    out
}

/// Apply `params` to one `[3, H, W]` frame in place.
pub fn augment_frame(frame: &mut [f32], h: usize, w: usize, params: &AugmentParams) {
    let n = h * w;
    if params.flip {
        for plane in frame.chunks_mut(n) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    if let Some(j) = params.jitter {
        brightness(frame, j.brightness);
        contrast(frame, n, j.contrast);
        saturation(frame, n, j.saturation);
        hue(frame, n, j.hue);
    }
    if let Some(sigma) = params.blur_sigma {
        gaussian_blur(frame, h, w, sigma);
    }
    if let Some(thr) = params.solarize {
        for v in frame.iter_mut() {
            if *v >= thr {
                *v = 1.0 - *v;
            }
        }
    }
    for v in frame.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn brightness(frame: &mut [f32], f: f32) {
    for v in frame.iter_mut() {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn contrast(frame: &mut [f32], n: usize, f: f32) {
    let (r, rest) = frame.split_at(n);
    let (g, b) = rest.split_at(n);
    let mean = (0..n).map(|i| luma(r[i], g[i], b[i]) as f64).sum::<f64>() / n as f64;
    let mean = mean as f32;
    for v in frame.iter_mut() {
        *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0);
    }
}

fn saturation(frame: &mut [f32], n: usize, f: f32) {
    for i in 0..n {
        let y = luma(frame[i], frame[n + i], frame[2 * n + i]);
        for c in 0..3 {
            let v = &mut frame[c * n + i];
            *v = (f * *v + (1.0 - f) * y).clamp(0.0, 1.0);
        }
    }
}

fn hue(frame: &mut [f32], n: usize, shift: f32) {
    if shift == 0.0 {
        return;
    }
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(frame[i], frame[n + i], frame[2 * n + i]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        frame[i] = r;
        frame[n + i] = g;
        frame[2 * n + i] = b;
    }
}

pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(frame: &mut [f32], h: usize, w: usize, sigma: f32) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0f32; h * w];
    for plane in frame.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * plane[y * w + reflect(x as i64 + j as i64 - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> Frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frames::new(t, h, w, (0..t * 3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn everything() -> AugmentParams {
        AugmentParams {
            flip: true,
            jitter: Some(ColorJitter {
                brightness: 1.2,
                contrast: 0.7,
                saturation: 1.1,
                hue: 0.05,
            }),
            blur_sigma: Some(1.0),
            solarize: Some(0.5),
        }
    }

    #[test]
    fn disabled_is_bit_identical() {
        let f = clip(3, 5, 6, 0);
        assert_eq!(augment_view(&f, &AugmentParams::identity()), f);
        let p = AugmentParams::draw(&AugmentConfig::disabled(), ViewSlot::Global(0), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.is_identity());
    }

    #[test]
    fn flip_is_an_involution() {
        let f = clip(2, 4, 7, 1);
        let p = AugmentParams {
            flip: true,
            ..Default::default()
        };
        assert_eq!(augment_view(&augment_view(&f, &p), &p), f);
        let once = augment_view(&f, &p);
        assert_eq!(once.at(1, 2, 3, 0), f.at(1, 2, 3, 6));
    }

    #[test]
    fn identical_frames_stay_identical() {
        let one = clip(1, 6, 6, 2);
        let other = clip(1, 6, 6, 3);
        let f = Frames::stack(&[one.frame(0), other.frame(0), one.frame(0)], 6, 6).unwrap();
        let out = augment_view(&f, &everything());
        assert_eq!(out.frame(0), out.frame(2));
        assert_ne!(out.frame(0), out.frame(1));
    }

    #[test]
    fn output_clamped_to_unit_interval() {
        let f = clip(2, 8, 8, 4);
        let mut p = everything();
        p.jitter.as_mut().unwrap().brightness = 1.4;
        p.jitter.as_mut().unwrap().contrast = 1.4;
        let out = augment_view(&f, &p);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_planes_and_smooths_impulses() {
        let mut frame = vec![0.25f32; 3 * 9 * 9];
        gaussian_blur(&mut frame, 9, 9, 1.3);
        assert!(frame.iter().all(|v| (v - 0.25).abs() < 1e-6));
        let mut frame = vec![0.0f32; 3 * 9 * 9];
        frame[4 * 9 + 4] = 1.0;
        gaussian_blur(&mut frame, 9, 9, 1.0);
        assert!(frame[4 * 9 + 4] < 0.5);
        let total: f32 = frame[..81].iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn solarize_only_on_second_global() {
        let cfg = AugmentConfig {
            solarize_p: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(AugmentParams::draw(&cfg, ViewSlot::Global(1), &mut rng).solarize.is_some());
        assert!(AugmentParams::draw(&cfg, ViewSlot::Global(0), &mut rng).solarize.is_none());
        assert!(AugmentParams::draw(&cfg, ViewSlot::Local(1), &mut rng).solarize.is_none());
        assert!(AugmentParams::draw(&cfg, ViewSlot::Global(0), &mut rng).blur_sigma.is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn per_frame_equals_stacked(seed in 0u64..1000, draw in 0u64..1000) {
            let f = clip(3, 5, 4, seed);
            let p = AugmentParams::draw(&AugmentConfig { blur_p_other: 0.5, ..Default::default() }, ViewSlot::Local(0), &mut ChaCha8Rng::seed_from_u64(draw));
            let stacked = augment_view(&f, &p);
            for t in 0..3 {
                let single = augment_view(&f.select(&[t]).unwrap(), &p);
                prop_assert_eq!(single.frame(0), stacked.frame(t));
            }
        }
    }
}
