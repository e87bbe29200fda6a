use crate::error::{Error, Result};

/// A stack of RGB frames, `[T, 3, H, W]` row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty frame stack {t}×3×{h}×{w}")));
        }
        if data.len() != t * 3 * h * w {
            return Err(Error::shape(format!(
                "{t}×3×{h}×{w} frames need {} values, got {}",
                t * 3 * h * w,
                data.len()
            )));
        }
        Ok(Frames { t, h, w, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Frames {
            t,
            h,
            w,
            data: vec![0.0; t * 3 * h * w],
        }
    }

    /// Stack single frames (`[3, H, W]` each) of equal size.
    pub fn stack(frames: &[&[f32]], h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
        for f in frames {
            if f.len() != 3 * h * w {
                return Err(Error::shape(format!(
                    "frame of {} values does not match 3×{h}×{w}",
                    f.len()
                )));
            }
            data.extend_from_slice(f);
        }
        Frames::new(frames.len(), h, w, data)
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn frame_len(&self) -> usize {
        3 * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((t * 3 + c) * self.h + y) * self.w + x]
    }

    /// Frames at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Frames> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.t {
                return Err(Error::shape(format!(
                    "frame index {i} out of range for {} frames",
                    self.t
                )));
            }
            data.extend_from_slice(self.frame(i));
        }
        Frames::new(indices.len(), self.h, self.w, data)
    }

    /// Reverse the temporal order.
    pub fn reversed(&self) -> Frames {
        let idx: Vec<usize> = (0..self.t).rev().collect();
        self.select(&idx).expect("indices in range")
    }
}
