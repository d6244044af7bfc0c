//! Binary aligned-pair records.
//!
//! A 16-byte header (magic `SGAP`, valid length u32, label code u32 with 255
//! for none, reserved u32) followed by little-endian f32 values, `a` then
//! `b`, each `2000 × 23` row-major.

use std::path::Path;

use sigver_core::dtw::{AlignedPair, PairLabel, ALIGNED_LENGTH};
use sigver_core::features::NUM_CHANNELS;

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"SGAP";
pub const NO_LABEL: u32 = 255;

pub fn encode(pair: &AlignedPair) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * pair.a.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(pair.valid_length as u32).to_le_bytes());
    out.extend_from_slice(&pair.label.map_or(NO_LABEL, PairLabel::code).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in pair.a.iter().chain(&pair.b) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> AppResult<AlignedPair> {
    let bad = |m: String| AppError::format(path, format!("bad aligned pair: {m}"));
    let n = ALIGNED_LENGTH * NUM_CHANNELS;
    if bytes.len() != 16 + 8 * n {
        return Err(bad(format!("{} bytes, expected {}", bytes.len(), 16 + 8 * n)));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let valid_length = word(4) as usize;
    if valid_length == 0 || valid_length > ALIGNED_LENGTH {
        return Err(bad(format!("valid length {valid_length}")));
    }
    let code = word(8);
    let label = match code {
        NO_LABEL => None,
        c => Some(PairLabel::from_code(c).ok_or_else(|| bad(format!("label code {c}")))?),
    };
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let (a, b) = values.split_at(n);
    Ok(AlignedPair {
        a: a.to_vec(),
        b: b.to_vec(),
        length: ALIGNED_LENGTH,
        channels: NUM_CHANNELS,
        valid_length,
        label,
    })
}
