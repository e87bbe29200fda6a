//! Global and local spatio-temporal views of a clip.

mod augment;
mod resize;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment_frame, augment_view, AugmentConfig, AugmentParams, ColorJitter, ViewSlot};
pub use resize::{crop_resize, resize, CropRect};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::frames::Frames;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Global,
    Local,
}

/// Which local-view variation is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// Local views vary both frame rate and crop.
    #[default]
    Full,
    /// Every local view uses the same frame count as the shortest global
    /// view; only the crop varies.
    SpatialOnly,
    /// Local views see the whole frame; only the frame rate varies.
    TemporalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub global_views: usize,
    pub local_views: usize,
    /// Frame counts a global view may take.
    pub global_frames: Vec<usize>,
    /// Frame counts a local view may take.
    pub local_frames: Vec<usize>,
    pub global_size: usize,
    pub local_size: usize,
    /// Crop area fraction range of global views.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Crop aspect ratio range (width / height).
    pub aspect: (f64, f64),
    pub local_mode: LocalMode,
    pub augment: AugmentConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViewConfig {
    pub fn paper() -> Self {
        ViewConfig {
            global_views: 2,
            local_views: 8,
            global_frames: vec![8, 16],
            local_frames: vec![2, 4, 8, 16],
            global_size: 224,
            local_size: 96,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            local_mode: LocalMode::Full,
            augment: AugmentConfig::default(),
        }
    }

    pub fn desk() -> Self {
        ViewConfig {
            global_frames: vec![4, 8],
            local_frames: vec![2, 4, 8],
            global_size: 32,
            local_size: 16,
            ..Self::paper()
        }
    }

    /// Small views for gradient checks and tests: two 4-frame 16×16 globals
    /// and two 8×8 locals.
    pub fn tiny() -> Self {
        ViewConfig {
            local_views: 2,
            global_frames: vec![4],
            local_frames: vec![2, 4],
            global_size: 16,
            local_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_views == 0 {
            return Err(Error::config("views.global_views", "must be at least 1"));
        }
        for (field, set) in [
            ("views.global_frames", &self.global_frames),
            ("views.local_frames", &self.local_frames),
        ] {
            if set.is_empty() || set.contains(&0) {
                return Err(Error::config(field, "need a non-empty set of positive frame counts"));
            }
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::config("views.global_size", "view sizes must be positive"));
        }
        for (field, (lo, hi)) in [
            ("views.global_scale", self.global_scale),
            ("views.local_scale", self.local_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(field, format!("need 0 < {lo} <= {hi} <= 1")));
            }
        }
        let (a, b) = self.aspect;
        if !(a > 0.0 && a <= b) {
            return Err(Error::config("views.aspect", format!("need 0 < {a} <= {b}")));
        }
        self.augment.validate()
    }

    pub fn max_global_frames(&self) -> usize {
        self.global_frames.iter().copied().max().unwrap_or(0)
    }
}

/// Everything needed to regenerate one view from its clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub kind: ViewKind,
    /// Frame count T of the view.
    pub frames: usize,
    /// Sampling stride in source frames.
    pub stride: usize,
    /// Source frame indices, after cyclic wrap.
    pub indices: Vec<usize>,
    pub crop: CropRect,
    pub height: usize,
    pub width: usize,
    pub augment: AugmentParams,
}

#[derive(Clone, Debug)]
pub struct View {
    pub spec: ViewSpec,
    pub frames: Frames,
}

impl View {
    /// Materialise `spec` from `clip`: gather frames, crop and resize, augment.
    pub fn render(clip: &VideoClip, spec: ViewSpec) -> Result<View> {
        let picked = clip.frames.select(&spec.indices)?;
        let resized = crop_resize(&picked, spec.crop, spec.height, spec.width)?;
        let frames = augment_view(&resized, &spec.augment);
        Ok(View { spec, frames })
    }
}

/// Global and local views of one clip.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub globals: Vec<View>,
    pub locals: Vec<View>,
}

/// Evenly strided frame indices: stride `max(1, len / t)`, random start, and
/// indices past the end wrap around to the clip start.
pub fn temporal_indices<R: Rng + ?Sized>(len: usize, t: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
    if len == 0 || t == 0 {
        return Err(Error::domain(format!("cannot sample {t} frames from {len}")));
    }
    let stride = (len / t).max(1);
    let span = stride * (t - 1) + 1;
    let start = if span < len { rng.random_range(0..=len - span) } else { 0 };
    let idx = (0..t).map(|i| (start + i * stride) % len).collect();
    Ok((idx, stride))
}

/// Random crop with area fraction in `scale` and aspect ratio in `aspect`
/// (log-uniform), for an `h × w` frame. Falls back to the full frame.
pub fn random_crop<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> CropRect {
    let (h, w) = (h as f64, w as f64);
    let area = h * w;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(aspect.0.ln()..=aspect.1.ln()).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h {
            let x = rng.random_range(0.0..=w - cw);
            let y = rng.random_range(0.0..=h - ch);
            return CropRect {
                x: x / w,
                y: y / h,
                w: cw / w,
                h: ch / h,
            };
        }
    }
    CropRect::FULL
}

fn check_clip(clip: &VideoClip) -> Result<()> {
    if clip.len() < 2 {
        return Err(Error::domain(format!(
            "clip `{}` has {} frame(s); views need at least 2",
            clip.id,
            clip.len()
        )));
    }
    Ok(())
}

/// RNG stream owned by one (seed, clip, epoch) triple.
pub fn view_rng(seed: u64, clip_id: &str, epoch: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(clip_id.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

pub fn sample_global_views<R: Rng + ?Sized>(
    clip: &VideoClip,
    cfg: &ViewConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<View>> {
    check_clip(clip)?;
    (0..count)
        .map(|i| {
            let t = *cfg.global_frames.choose(rng).expect("non-empty set");
            let (indices, stride) = temporal_indices(clip.len(), t, rng)?;
            let crop = random_crop(clip.height(), clip.width(), cfg.global_scale, cfg.aspect, rng);
            let augment = AugmentParams::draw(&cfg.augment, ViewSlot::Global(i), rng);
            View::render(
                clip,
                ViewSpec {
                    kind: ViewKind::Global,
                    frames: t,
                    stride,
                    indices,
                    crop,
                    height: cfg.global_size,
                    width: cfg.global_size,
                    augment,
                },
            )
        })
        .collect()
}

/// Local views whose frame counts never exceed `max_frames` (the shortest
/// global view they will be paired with).
pub fn sample_local_views<R: Rng + ?Sized>(
    clip: &VideoClip,
    cfg: &ViewConfig,
    max_frames: usize,
    rng: &mut R,
) -> Result<Vec<View>> {
    check_clip(clip)?;
    let allowed: Vec<usize> = cfg.local_frames.iter().copied().filter(|&t| t <= max_frames).collect();
    (0..cfg.local_views)
        .map(|i| {
            let t = match cfg.local_mode {
                LocalMode::SpatialOnly => max_frames,
                _ => allowed.choose(rng).copied().unwrap_or(max_frames),
            };
            let (indices, stride) = temporal_indices(clip.len(), t, rng)?;
            let crop = match cfg.local_mode {
                LocalMode::TemporalOnly => CropRect::FULL,
                _ => random_crop(clip.height(), clip.width(), cfg.local_scale, cfg.aspect, rng),
            };
            let augment = AugmentParams::draw(&cfg.augment, ViewSlot::Local(i), rng);
            View::render(
                clip,
                ViewSpec {
                    kind: ViewKind::Local,
                    frames: t,
                    stride,
                    indices,
                    crop,
                    height: cfg.local_size,
                    width: cfg.local_size,
                    augment,
                },
            )
        })
        .collect()
}

/// All views of `clip` for one epoch, drawn from the clip's own RNG stream.
pub fn sample_views(clip: &VideoClip, cfg: &ViewConfig, globals: usize, seed: u64, epoch: u64) -> Result<ViewSet> {
    let mut rng = view_rng(seed, &clip.id, epoch);
    let globals = sample_global_views(clip, cfg, globals, &mut rng)?;
    let shortest = globals.iter().map(|v| v.spec.frames).min().unwrap_or(0);
    let locals = sample_local_views(clip, cfg, shortest, &mut rng)?;
    Ok(ViewSet { globals, locals })
}
