use std::ops::Range;

use crate::error::{Error, Result};
use crate::frames::Frames;

/// Frame ranges of consecutive, non-overlapping clips of
/// `round(fps · seconds)` frames. A final remainder of at least half a clip is
/// kept as a shorter clip; a smaller one is dropped.
pub fn clip_ranges(total: usize, fps: f64, seconds: f64) -> Result<Vec<Range<usize>>> {
    if !(fps > 0.0) || !(seconds > 0.0) {
        return Err(Error::domain(format!(
            "fps ({fps}) and duration ({seconds}) must be positive"
        )));
    }
    let len = (fps * seconds).round() as usize;
    if len == 0 {
        return Err(Error::domain("clip length rounds to zero frames"));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= total {
        out.push(start..start + len);
        start += len;
    }
    let rest = total - start;
    if rest > 0 && 2 * rest >= len {
        out.push(start..total);
    }
    Ok(out)
}

pub fn slice_video_to_clips(video: &Frames, fps: f64, seconds: f64) -> Result<Vec<Frames>> {
    clip_ranges(video.len(), fps, seconds)?
        .into_iter()
        .map(|r| video.select(&r.collect::<Vec<_>>()))
        .collect()
}
