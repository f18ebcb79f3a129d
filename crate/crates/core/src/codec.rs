//! Coefficient quantization and the byte layout fed to BPE.
//!
//! Quantized coefficients of the valid dimensions are interleaved
//! lowest-frequency first (frequency 0 of every dimension, then frequency 1,
//! ...). Each integer is zigzag mapped and written as an unsigned LEB128
//! varint, so small magnitudes take one byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("codec error at byte {offset}: {message}")]
    Stream { offset: usize, message: String },
    #[error("codec error: unknown token id {0}")]
    UnknownToken(u32),
    #[error("training error: {0}")]
    Training(String),
    #[error("codec error: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub scale: f64,
    pub clip: i64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            scale: 10.0,
            clip: i16::MAX as i64,
        }
    }
}

impl QuantConfig {
    pub fn new(scale: f64) -> Result<Self, CodecError> {
        let cfg = Self {
            scale,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(CodecError::Invalid(format!(
                "quantization scale {} must be positive",
                self.scale
            )));
        }
        if self.clip <= 0 {
            return Err(CodecError::Invalid(format!("clip {} must be positive", self.clip)));
        }
        Ok(())
    }

    /// Rounds half away from zero, then clamps to `[-clip, clip]`.
    pub fn quantize_one(&self, x: f64) -> i64 {
        let q = (self.scale * x).round();
        let c = self.clip as f64;
        q.clamp(-c, c) as i64
    }

    pub fn dequantize_one(&self, q: i64) -> f64 {
        q as f64 / self.scale
    }
}

pub fn quantize(coeffs: &[f64], cfg: &QuantConfig) -> Vec<i64> {
    coeffs.iter().map(|&x| cfg.quantize_one(x)).collect()
}

pub fn dequantize(ints: &[i64], cfg: &QuantConfig) -> Vec<f64> {
    ints.iter().map(|&q| cfg.dequantize_one(q)).collect()
}

#[inline]
pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

#[inline]
pub fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

pub fn write_varint(mut u: u64, out: &mut Vec<u8>) {
    while u >= 0x80 {
        out.push((u as u8 & 0x7f) | 0x80);
        u >>= 7;
    }
    out.push(u as u8);
}

/// Reads one varint starting at `*pos`, advancing it.
pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64, CodecError> {
    let start = *pos;
    let mut value = 0u64;
    for shift in (0..64).step_by(7) {
        let Some(&b) = bytes.get(*pos) else {
            return Err(CodecError::Stream {
                offset: start,
                message: "truncated varint".into(),
            });
        };
        *pos += 1;
        value |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(CodecError::Stream {
        offset: start,
        message: "varint longer than 10 bytes".into(),
    })
}

/// Serializes a `horizon x dims` block of quantized coefficients, stored
/// frequency-major (`coeffs[freq * dims + dim]`).
pub fn serialize_coeffs(coeffs: &[i64], horizon: usize, dims: usize) -> Result<Vec<u8>, CodecError> {
    if coeffs.len() != horizon * dims {
        return Err(CodecError::Shape(format!(
            "{} coefficients for {horizon} frequencies x {dims} dims",
            coeffs.len()
        )));
    }
    let mut out = Vec::with_capacity(coeffs.len());
    for &c in coeffs {
        write_varint(zigzag(c), &mut out);
    }
    Ok(out)
}

pub fn deserialize_coeffs(bytes: &[u8], horizon: usize, dims: usize) -> Result<Vec<i64>, CodecError> {
    let expected = horizon * dims;
    let mut out = Vec::with_capacity(expected);
    let mut pos = 0;
    while pos < bytes.len() {
        if out.len() == expected {
            return Err(CodecError::Stream {
                offset: pos,
                message: format!("trailing bytes after {expected} coefficients"),
            });
        }
        out.push(unzigzag(read_varint(bytes, &mut pos)?));
    }
    if out.len() != expected {
        return Err(CodecError::Stream {
            offset: pos,
            message: format!("stream holds {} coefficients, expected {expected}", out.len()),
        });
    }
    Ok(out)
}

/// Serializes the valid block of a quantized 30x32 grid stored row-major as
/// `grid[freq * 32 + dim]`, honoring the prefix masks.
pub fn serialize_grid(
    grid: &[i64],
    horizon_mask: &[bool],
    dim_mask: &[bool],
) -> Result<Vec<u8>, CodecError> {
    let width = dim_mask.len();
    if grid.len() != horizon_mask.len() * width {
        return Err(CodecError::Shape("grid does not match masks".into()));
    }
    let h = horizon_mask.iter().take_while(|&&m| m).count();
    let d = dim_mask.iter().take_while(|&&m| m).count();
    let block: Vec<i64> = (0..h)
        .flat_map(|f| grid[f * width..f * width + d].iter().copied())
        .collect();
    serialize_coeffs(&block, h, d)
}
