//! Shared fixtures for the benchmarks.

use endovid_core::data::{generate_synthetic_dataset, SyntheticSpec, VideoClip};

/// `count` synthetic clips of `size × size` pixels and `frames` frames.
pub fn clips(count: usize, size: usize, frames: usize) -> Vec<VideoClip> {
    let square = size / 3;
    let spec = SyntheticSpec {
        count,
        size,
        frames,
        square,
        base_speed: (size - square) as f64 / (2 * frames) as f64,
        ..Default::default()
    };
    generate_synthetic_dataset(&spec).expect("valid spec").1
}
