//! Moving-square clips for desk-scale experiments.
//!
//! Class `c` moves a textured square horizontally: even classes to the right,
//! odd classes to the left, at `base_speed · (1 + c)` pixels per frame. The
//! background is static per-clip noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::VideoClip;
use super::manifest::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::frames::Frames;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Frame side in pixels (frames are square).
    pub size: usize,
    pub frames: usize,
    pub classes: usize,
    pub square: usize,
    /// Speed of class 0 in pixels per frame.
    pub base_speed: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 64,
            size: 32,
            frames: 16,
            classes: 2,
            square: 10,
            base_speed: 0.6,
            fps: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn speed(&self, class: usize) -> f64 {
        self.base_speed * (1 + class) as f64
    }

    /// +1 for rightward classes, −1 for leftward.
    pub fn direction(class: usize) -> f64 {
        if class % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.frames == 0 || self.size == 0 {
            return Err(Error::domain("synthetic dataset needs clips, frames and a frame size"));
        }
        if self.classes < 1 {
            return Err(Error::domain("need at least one motion class"));
        }
        if self.square == 0 || self.square >= self.size {
            return Err(Error::domain(format!(
                "square of {} px does not fit in a {} px frame",
                self.square, self.size
            )));
        }
        if !(self.base_speed > 0.0) || !(self.fps > 0.0) {
            return Err(Error::domain("speed and fps must be positive"));
        }
        let travel = self.speed(self.classes - 1) * (self.frames - 1) as f64;
        if travel > (self.size - self.square) as f64 {
            return Err(Error::domain(format!(
                "fastest class travels {travel:.1} px but only {} px are free",
                self.size - self.square
            )));
        }
        Ok(())
    }
}

/// Overlap of pixel `[p, p + 1)` with `[lo, hi)`.
fn coverage(p: usize, lo: f64, hi: f64) -> f64 {
    let a = (p as f64).max(lo);
    let b = (p as f64 + 1.0).min(hi);
    (b - a).clamp(0.0, 1.0)
}

fn render_clip(spec: &SyntheticSpec, index: usize) -> (VideoClip, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let label = index % spec.classes;
    let (s, q, t) = (spec.size, spec.square, spec.frames);
    let n = s * s;

    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let background: Vec<f32> = (0..3 * n)
        .map(|i| (tint[i / n] + rng.random_range(-0.15..0.15f32)).clamp(0.0, 1.0))
        .collect();
    let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let texture: Vec<f32> = (0..3 * q * q)
        .map(|i| (colour[i / (q * q)] * 0.6 + rng.random_range(0.0..0.4f32)).clamp(0.0, 1.0))
        .collect();

    let dir = SyntheticSpec::direction(label);
    let speed = spec.speed(label);
    let travel = speed * (t - 1) as f64;
    let slack = (s - q) as f64 - travel;
    let offset = rng.random_range(0.0..=slack);
    let x0 = if dir > 0.0 { offset } else { offset + travel };
    let y0 = rng.random_range(0..=s - q);

    let mut xs = Vec::with_capacity(t);
    let mut data = Vec::with_capacity(t * 3 * n);
    for f in 0..t {
        let x = x0 + dir * speed * f as f64;
        xs.push(x);
        let mut frame = background.clone();
        for py in y0..y0 + q {
            let ty = py - y0;
            for px in 0..s {
                let cov = coverage(px, x, x + q as f64);
                if cov == 0.0 {
                    continue;
                }
                // texture column under the pixel centre, clamped to the square
                let u = ((px as f64 + 0.5 - x).floor().clamp(0.0, (q - 1) as f64)) as usize;
                for c in 0..3 {
                    let bg = frame[c * n + py * s + px];
                    let fg = texture[c * q * q + ty * q + u];
                    frame[c * n + py * s + px] = (cov as f32) * fg + (1.0 - cov as f32) * bg;
                }
            }
        }
        data.extend_from_slice(&frame);
    }
    let frames = Frames::new(t, s, s, data).expect("consistent dimensions");
    let clip = VideoClip::new(format!("clip_{index:04}"), spec.fps, Some(label), frames).expect("values in range");
    (clip, xs)
}

/// Square x-positions (left edge, pixels) of clip `index`, frame by frame.
pub fn square_trajectory(spec: &SyntheticSpec, index: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(render_clip(spec, index).1)
}

/// All clips of `spec` plus a manifest describing them (paths relative to the
/// dataset root, one directory per clip id).
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Manifest, Vec<VideoClip>)> {
    spec.validate()?;
    let clips: Vec<VideoClip> = (0..spec.count).map(|i| render_clip(spec, i).0).collect();
    let entries = clips
        .iter()
        .map(|c| ManifestEntry {
            id: c.id.clone(),
            path: c.id.clone(),
            frames: c.len(),
            fps: c.fps,
            label: c.label,
            height: c.height(),
            width: c.width(),
        })
        .collect();
    Ok((
        Manifest {
            dataset: format!("synthetic-motion-{}", spec.classes),
            seed: spec.seed,
            clips: entries,
        },
        clips,
    ))
}

/// Mean absolute difference between consecutive frames.
pub fn frame_difference_energy(clip: &VideoClip) -> f64 {
    let f = &clip.frames;
    if f.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 1..f.len() {
        acc += f
            .frame(t)
            .iter()
            .zip(f.frame(t - 1))
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>();
    }
    acc / ((f.len() - 1) * f.frame_len()) as f64
}
