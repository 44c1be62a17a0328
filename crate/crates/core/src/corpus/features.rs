//! `AIPF` feature files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                                     |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `AIPF`                              |
//! | 4      | 4    | `u32` frame count T                       |
//! | 8      | 4    | `u32` feature dimension F                 |
//! | 12     | 2    | `u16` frame length, tenths of ms (0=unset)|
//! | 14     | 2    | `u16` frame shift, tenths of ms (0=unset) |
//! | 16     | 4·T·F| `f32` payload, row-major                  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::FeatureSequence;

pub const MAGIC: &[u8; 4] = b"AIPF";
pub const HEADER_LEN: usize = 16;

pub fn encode(seq: &FeatureSequence) -> Vec<u8> {
    encode_matrix(
        &seq.frames,
        seq.frame_length_ms,
        seq.frame_shift_ms,
    )
}

/// Encodes any matrix; values are narrowed to `f32`.
pub fn encode_matrix(m: &Tensor, frame_length_ms: f64, frame_shift_ms: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&tenths(frame_length_ms).to_le_bytes());
    out.extend_from_slice(&tenths(frame_shift_ms).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn tenths(ms: f64) -> u16 {
    (ms * 10.0).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Decodes a feature file body. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<FeatureSequence> {
    let bad = |reason: String| Error::Format {
        kind: "feature",
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let half = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let (t, f) = (word(4), word(8));
    let expected = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {t}x{f}, found {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(t * f);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(bad("non-finite feature value".into()));
        }
        data.push(v as f64);
    }
    let ms = |h: u16, default: f64| if h == 0 { default } else { h as f64 / 10.0 };
    Ok(FeatureSequence {
        frames: Tensor::from_vec(t, f, data),
        frame_length_ms: ms(half(12), 0.0),
        frame_shift_ms: ms(half(14), 0.0),
    })
}

pub fn write(path: &Path, seq: &FeatureSequence) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(seq)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
