use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::clip::VideoClip;
use super::ppm::{read_ppm, write_ppm};
use crate::error::{Error, Result};
use crate::frames::Frames;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Frame directory relative to the manifest.
    pub path: String,
    pub frames: usize,
    pub fps: f64,
    #[serde(default)]
    pub label: Option<usize>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: String,
    pub seed: u64,
    pub clips: Vec<ManifestEntry>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.clips {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::contract(format!("duplicate clip id `{}` in manifest", e.id)));
            }
            if e.frames == 0 || e.height == 0 || e.width == 0 {
                return Err(Error::contract(format!("clip `{}` has empty dimensions", e.id)));
            }
            if !(e.fps > 0.0) {
                return Err(Error::contract(format!("clip `{}` has fps {}", e.id, e.fps)));
            }
        }
        Ok(())
    }

    /// Check every listed frame file exists under `root`.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        for e in &self.clips {
            for i in 0..e.frames {
                let p = root.join(&e.path).join(frame_file_name(i));
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "frame file listed in manifest is missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of clips per label (unlabelled clips excluded).
    pub fn class_histogram(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut h = std::collections::BTreeMap::new();
        for e in &self.clips {
            if let Some(l) = e.label {
                *h.entry(l).or_insert(0) += 1;
            }
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn save_manifest(root: &Path, m: &Manifest) -> Result<PathBuf> {
    m.validate()?;
    let p = root.join(MANIFEST_FILE);
    fs::write(&p, m.to_json()?).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

/// Parse and validate `root/manifest.json`.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let p = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        reason: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

/// Write the frames of `clip` under `root/<id>/` and return its entry.
pub fn save_clip(root: &Path, clip: &VideoClip) -> Result<ManifestEntry> {
    let dir = root.join(&clip.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (h, w) = (clip.height(), clip.width());
    for i in 0..clip.len() {
        write_ppm(&dir.join(frame_file_name(i)), clip.frames.frame(i), h, w)?;
    }
    Ok(ManifestEntry {
        id: clip.id.clone(),
        path: clip.id.clone(),
        frames: clip.len(),
        fps: clip.fps,
        label: clip.label,
        height: h,
        width: w,
    })
}

/// Decode the frames listed by `entry`.
pub fn load_clip(root: &Path, entry: &ManifestEntry) -> Result<VideoClip> {
    let dir = root.join(&entry.path);
    let mut data = Vec::with_capacity(entry.frames * 3 * entry.height * entry.width);
    for i in 0..entry.frames {
        let p = dir.join(frame_file_name(i));
        let (h, w, frame) = read_ppm(&p)?;
        if (h, w) != (entry.height, entry.width) {
            return Err(Error::Format {
                path: p,
                offset: 0,
                reason: format!(
                    "frame is {h}×{w} but clip `{}` is {}×{}",
                    entry.id, entry.height, entry.width
                ),
            });
        }
        data.extend_from_slice(&frame);
    }
    let frames = Frames::new(entry.frames, entry.height, entry.width, data)?;
    VideoClip::new(entry.id.clone(), entry.fps, entry.label, frames)
}

/// Read `frame_00000.ppm`, `frame_00001.ppm`, … from `dir` until the next
/// index is missing.
pub fn load_frame_sequence(dir: &Path) -> Result<Frames> {
    let mut data = Vec::new();
    let mut size = None;
    let mut t = 0;
    loop {
        let p = dir.join(frame_file_name(t));
        if !p.is_file() {
            break;
        }
        let (h, w, frame) = read_ppm(&p)?;
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::Format {
                    path: p,
                    offset: 0,
                    reason: format!("frame is {h}×{w} but the sequence is {}×{}", s.0, s.1),
                })
            }
            _ => {}
        }
        data.extend_from_slice(&frame);
        t += 1;
    }
    let (h, w) = size.ok_or_else(|| {
        Error::io(
            dir.join(frame_file_name(0)),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no frames found"),
        )
    })?;
    Frames::new(t, h, w, data)
}

/// Load every clip of the dataset at `root`.
pub fn load_dataset(root: &Path) -> Result<(Manifest, Vec<VideoClip>)> {
    let m = load_manifest(root)?;
    m.check_files(root)?;
    let clips = m.clips.iter().map(|e| load_clip(root, e)).collect::<Result<Vec<_>>>()?;
    Ok((m, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str, label: Option<usize>) -> VideoClip {
        let data = (0..2 * 3 * 4 * 6).map(|i| (i % 17) as f32 / 16.0).collect();
        VideoClip::new(id, 30.0, label, Frames::new(2, 4, 6, data).unwrap()).unwrap()
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let a = clip("a", Some(1));
        let e = save_clip(dir.path(), &a).unwrap();
        let m = Manifest {
            dataset: "t".into(),
            seed: 3,
            clips: vec![e],
        };
        save_manifest(dir.path(), &m).unwrap();
        let (m2, clips) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, m);
        assert_eq!(clips[0].label, Some(1));
        for (x, y) in clips[0].frames.data().iter().zip(a.frames.data()) {
            assert!((x - y).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn missing_frame_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let e = save_clip(dir.path(), &clip("b", None)).unwrap();
        fs::remove_file(dir.path().join("b").join(frame_file_name(1))).unwrap();
        let err = load_clip(dir.path(), &e).unwrap_err();
        assert!(err.to_string().contains("frame_00001.ppm"), "{err}");
        let m = Manifest {
            dataset: "t".into(),
            seed: 0,
            clips: vec![e],
        };
        assert!(m.check_files(dir.path()).is_err());
    }

    #[test]
    fn frame_sequence_reads_until_gap() {
        let dir = tempfile::tempdir().unwrap();
        save_clip(dir.path(), &clip("s", None)).unwrap();
        let f = load_frame_sequence(&dir.path().join("s")).unwrap();
        assert_eq!((f.len(), f.height(), f.width()), (2, 4, 6));
        assert!(load_frame_sequence(dir.path()).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = save_clip(dir.path(), &clip("c", None)).unwrap();
        let m = Manifest {
            dataset: "t".into(),
            seed: 0,
            clips: vec![e.clone(), e],
        };
        fs::write(dir.path().join(MANIFEST_FILE), m.to_json().unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_frame_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = save_clip(dir.path(), &clip("d", None)).unwrap();
        write_ppm(&dir.path().join("d").join(frame_file_name(1)), &[0.5; 3 * 2 * 2], 2, 2).unwrap();
        assert!(matches!(load_clip(dir.path(), &e), Err(Error::Format { .. })));
    }

    #[test]
    fn malformed_json_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\n  \"dataset\": 5\n}").unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
    }
}
