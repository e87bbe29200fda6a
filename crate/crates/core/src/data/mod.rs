//! Clips, frame files, manifests, synthetic data and checkpoints.

mod checkpoint;
mod clip;
mod manifest;
mod ppm;
mod slicing;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use clip::VideoClip;
pub use manifest::{
    frame_file_name, load_clip, load_dataset, load_frame_sequence, load_manifest, save_clip, save_manifest, Manifest, ManifestEntry,
    MANIFEST_FILE,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use slicing::{clip_ranges, slice_video_to_clips};
pub use synthetic::{frame_difference_energy, generate_synthetic_dataset, square_trajectory, SyntheticSpec};
