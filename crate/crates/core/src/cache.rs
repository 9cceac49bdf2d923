//! Feature-cache files: a JSON manifest plus a raw little-endian `f32`
//! payload, one pair per sequence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrameSequence;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub source_id: String,
    pub shape: Vec<usize>,
    pub frame_rate_ms: f64,
    pub dtype: String,
    pub payload: String,
}

pub fn manifest_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

pub fn payload_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.f32"))
}

pub fn encode_f32_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32_le(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(path, "payload length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_frames(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &seq.source_id;
    if id.is_empty() || id.contains(['/', '\\']) {
        return Err(Error::InvalidArgument(format!("unusable source id {id:?}")));
    }
    let manifest = CacheManifest {
        source_id: id.clone(),
        shape: vec![seq.len(), seq.dim()],
        frame_rate_ms: seq.frame_rate_ms,
        dtype: "float32".into(),
        payload: format!("{id}.f32"),
    };
    let p = payload_path(dir, id);
    fs::write(&p, encode_f32_le(seq.frames.data())).map_err(|e| Error::io(&p, e))?;
    write_json(&manifest_path(dir, id), &manifest)
}

pub fn read_frames(dir: &Path, id: &str) -> Result<FrameSequence> {
    let mpath = manifest_path(dir, id);
    let m: CacheManifest = read_json(&mpath)?;
    if m.dtype != "float32" || m.shape.len() != 2 {
        return Err(Error::format(&mpath, "expected a float32 matrix"));
    }
    let p = dir.join(&m.payload);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let data = decode_f32_le(&bytes, &p)?;
    let frames = Tensor::new(m.shape.clone(), data).map_err(|e| Error::format(&p, e.to_string()))?;
    FrameSequence::new(frames, m.frame_rate_ms, m.source_id)
}
