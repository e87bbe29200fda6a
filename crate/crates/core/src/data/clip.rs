use crate::error::{Error, Result};
use crate::frames::Frames;

/// A decoded clip with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub fps: f64,
    pub label: Option<usize>,
    pub frames: Frames,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, fps: f64, label: Option<usize>, frames: Frames) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::domain(format!("fps must be positive, got {fps}")));
        }
        if let Some((i, v)) = frames
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::domain(format!("pixel {i} has value {v} outside [0, 1]")));
        }
        Ok(VideoClip {
            id: id.into(),
            fps,
            label,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.height()
    }

    pub fn width(&self) -> usize {
        self.frames.width()
    }
}
