//! Binary portable pixmaps (P6), one RGB frame per file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Encode a `[3, H, W]` frame with values in `[0, 1]` as P6 with maxval 255.
pub fn encode_ppm(frame: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if frame.len() != 3 * h * w {
        return Err(Error::shape(format!(
            "frame of {} values does not match 3×{h}×{w}",
            frame.len()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let n = h * w;
    for i in 0..n {
        for c in 0..3 {
            out.push((frame[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, frame: &[f32], h: usize, w: usize) -> Result<()> {
    let bytes = encode_ppm(frame, h, w)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(format!("{what} out of range")))
    }
}

/// Decode P6 bytes into a `[3, H, W]` frame scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if !bytes.starts_with(b"P6") {
        return Err(c.fail("missing P6 magic number"));
    }
    c.pos = 2;
    let w = c.number("width")?;
    let h = c.number("height")?;
    let maxval = c.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(c.fail(format!("empty image {w}×{h}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(c.fail(format!("unsupported maxval {maxval}")));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err(c.fail("expected a single whitespace before the raster"));
    }
    c.pos += 1;
    let need = 3 * w * h;
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        c.pos = bytes.len();
        return Err(c.fail(format!("raster truncated: {} of {need} bytes", raster.len())));
    }
    if raster.len() > need {
        c.pos += need;
        return Err(c.fail(format!("{} trailing bytes after the raster", raster.len() - need)));
    }
    let n = w * h;
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; need];
    for i in 0..n {
        for ch in 0..3 {
            let v = raster[3 * i + ch] as usize;
            if v > maxval {
                c.pos += 3 * i + ch;
                return Err(c.fail(format!("sample {v} exceeds maxval {maxval}")));
            }
            data[ch * n + i] = v as f32 * scale;
        }
    }
    Ok((h, w, data))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_within_quantisation() {
        let (h, w) = (3, 5);
        let frame: Vec<f32> = (0..3 * h * w).map(|i| (i as f32 * 0.137).fract()).collect();
        let bytes = encode_ppm(&frame, h, w).unwrap();
        let (h2, w2, back) = decode_ppm(&bytes, Path::new("f.ppm")).unwrap();
        assert_eq!((h2, w2), (h, w));
        for (a, b) in frame.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
        let again = encode_ppm(&back, h, w).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn comments_and_whitespace_accepted() {
        let mut bytes = b"P6 # made by hand\n2\t1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let (h, w, d) = decode_ppm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn errors_name_path_and_offset() {
        let p = Path::new("clip/frame_00003.ppm");
        let err = decode_ppm(b"P5\n1 1\n255\nabc", p).unwrap_err();
        assert!(err.to_string().contains("frame_00003.ppm"), "{err}");
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x01", p).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 13),
            other => panic!("{other}"),
        }
        assert!(decode_ppm(b"P6\nx 2\n255\n", p).is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0", p).is_err());
    }
}
