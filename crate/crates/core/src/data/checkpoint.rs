//! Checkpoint files: a magic line, the header length, a JSON header with an
//! offset table, then raw little-endian f32 arrays.
//!
//! ```text
//! ENDOVID-CKPT\n
//! <header byte length>\n
//! {"format_version":1, ..., "arrays":[{"name":..,"shape":..,"offset":..,"len":..}]}
//! <payload>
//! ```
//! `offset` and `len` are in bytes relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "ENDOVID-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Free-form run settings (training configuration, schedule length).
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    step: u64,
    seed: u64,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            let len = 4 * t.numel() as u64;
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            step: self.step,
            seed: self.seed,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + offset as usize + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(json.len().to_string().as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&json);
        for t in self.arrays.values() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        let magic_end = CHECKPOINT_MAGIC.len();
        if bytes.len() <= magic_end || &bytes[..magic_end] != CHECKPOINT_MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
            return Err(format(0, "not a checkpoint (bad magic line)".into()));
        }
        let len_start = magic_end + 1;
        let nl = bytes[len_start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format(len_start, "missing header length line".into()))?;
        let header_len: usize = std::str::from_utf8(&bytes[len_start..len_start + nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format(len_start, "header length is not a number".into()))?;
        let header_start = len_start + nl + 1;
        let payload_start = header_start + header_len;
        if bytes.len() < payload_start {
            return Err(format(bytes.len(), format!("truncated header: need {header_len} bytes")));
        }
        let raw: serde_json::Value = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| format(header_start, format!("header is not valid JSON: {e}")))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| format(header_start, "header lacks format_version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| format(header_start, format!("bad header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut arrays = BTreeMap::new();
        let mut expected_end = 0u64;
        for e in header.arrays {
            let numel: usize = e.shape.iter().product();
            if e.len != 4 * numel as u64 {
                return Err(format(
                    payload_start + e.offset as usize,
                    format!("array `{}` has length {} but shape {:?} needs {}", e.name, e.len, e.shape, 4 * numel),
                ));
            }
            let end = e.offset + e.len;
            if end > payload.len() as u64 {
                return Err(format(
                    bytes.len(),
                    format!("truncated payload: array `{}` ends at byte {end} of {}", e.name, payload.len()),
                ));
            }
            let values = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape, values)
                .map_err(|err| format(payload_start + e.offset as usize, err.to_string()))?;
            expected_end = expected_end.max(end);
            arrays.insert(e.name, t);
        }
        if expected_end != payload.len() as u64 {
            return Err(format(
                payload_start + expected_end as usize,
                format!("{} trailing bytes after the last array", payload.len() as u64 - expected_end),
            ));
        }
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            seed: header.seed,
            meta: header.meta,
            arrays,
        })
    }

    /// Arrays under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        let p = format!("{prefix}/");
        self.arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect()
    }
}

/// Write to a temporary sibling, then rename over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
