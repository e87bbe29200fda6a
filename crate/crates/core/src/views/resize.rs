use crate::error::{Error, Result};
use crate::frames::Frames;

/// Crop rectangle in normalised frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_within_unit_square(&self) -> bool {
        const EPS: f64 = 1e-9;
        self.x >= -EPS
            && self.y >= -EPS
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + EPS
            && self.y + self.h <= 1.0 + EPS
    }
}

/// Source coordinate sampled by output pixel `o` of `out` along an axis whose
/// crop starts at `start` and spans `len` source pixels (half-pixel centres).
fn source_taps(o: usize, out: usize, start: f64, len: f64, size: usize) -> (usize, usize, f32) {
    let s = start + (o as f64 + 0.5) * len / out as f64 - 0.5;
    let s = s.clamp(0.0, (size - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, (s - lo as f64) as f32)
}

/// Crop `rect` out of every frame and resample it to `out_h × out_w` with
/// bilinear interpolation (pixel centres, no corner alignment).
pub fn crop_resize(frames: &Frames, rect: CropRect, out_h: usize, out_w: usize) -> Result<Frames> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!("output size {out_h}×{out_w} is empty")));
    }
    if !rect.is_within_unit_square() {
        return Err(Error::domain(format!("crop {rect:?} leaves the unit square")));
    }
    let (h, w) = (frames.height(), frames.width());
    let ys: Vec<_> = (0..out_h)
        .map(|o| source_taps(o, out_h, rect.y * h as f64, rect.h * h as f64, h))
        .collect();
    let xs: Vec<_> = (0..out_w)
        .map(|o| source_taps(o, out_w, rect.x * w as f64, rect.w * w as f64, w))
        .collect();
    let t = frames.len();
    let mut data = Vec::with_capacity(t * 3 * out_h * out_w);
    for ti in 0..t {
        let src = frames.frame(ti);
        for c in 0..3 {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                for &(x0, x1, fx) in &xs {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
    }
    Frames::new(t, out_h, out_w, data)
}

pub fn resize(frames: &Frames, out_h: usize, out_w: usize) -> Result<Frames> {
    crop_resize(frames, CropRect::FULL, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: &[f32]) -> Frames {
        Frames::new(1, h, w, [v, v, v].concat()).unwrap()
    }

    #[test]
    fn two_by_two_upsample_matches_half_pixel_convention() {
        let f = gray(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = resize(&f, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        assert_eq!(&out.frame(0)[..16], &expected);
    }

    #[test]
    fn same_size_full_crop_is_identity() {
        let f = Frames::new(2, 3, 5, (0..90).map(|i| i as f32 / 90.0).collect()).unwrap();
        assert_eq!(resize(&f, 3, 5).unwrap(), f);
    }

    #[test]
    fn halving_averages_pixel_pairs() {
        let f = gray(1, 4, &[0.0, 1.0, 0.2, 0.6]);
        let out = resize(&f, 1, 2).unwrap();
        let got = &out.frame(0)[..2];
        assert!((got[0] - 0.5).abs() < 1e-6 && (got[1] - 0.4).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn crop_selects_quadrant() {
        let v: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let f = gray(4, 4, &v);
        let rect = CropRect {
            x: 0.5,
            y: 0.5,
            w: 0.5,
            h: 0.5,
        };
        let out = crop_resize(&f, rect, 2, 2).unwrap();
        assert_eq!(&out.frame(0)[..4], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn crop_outside_frame_rejected() {
        let f = gray(2, 2, &[0.0; 4]);
        let rect = CropRect {
            x: 0.8,
            y: 0.0,
            w: 0.5,
            h: 1.0,
        };
        assert!(crop_resize(&f, rect, 2, 2).is_err());
    }
}
