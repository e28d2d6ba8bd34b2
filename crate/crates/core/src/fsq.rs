//! Finite scalar quantization.
//!
//! Each codebook owns a contiguous slice of `levels.len()` latent
//! dimensions (codebook 0 first). A dimension is bounded with `tanh`, mapped
//! onto `[0, L-1]` and rounded half away from zero; the per-dimension digits
//! form a mixed-radix index with the first dimension least significant.

use crate::config::FsqSpec;
use crate::error::{Error, Result};

/// One frame of codebook indices, codebook 0 first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenFrame {
    pub indices: Vec<u32>,
}

impl TokenFrame {
    pub fn new(indices: Vec<u32>) -> Self {
        Self { indices }
    }

    /// Checks codebook count and index range against `spec`.
    pub fn validate(&self, spec: &FsqSpec) -> Result<()> {
        if self.indices.len() != spec.num_codebooks {
            return Err(Error::shape("token frame codebooks", spec.num_codebooks, self.indices.len()));
        }
        let codes = spec.codes_per_codebook();
        if let Some(&bad) = self.indices.iter().find(|&&i| u64::from(i) >= codes) {
            return Err(Error::Range(format!("token index {bad} >= {codes} codes")));
        }
        Ok(())
    }
}

/// Per-dimension digits of one code, `digits[i] < levels[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodePoint {
    pub digits: Vec<u32>,
}

pub fn digits_to_index(code: &CodePoint, spec: &FsqSpec) -> Result<u32> {
    if code.digits.len() != spec.levels.len() {
        return Err(Error::shape("code point digits", spec.levels.len(), code.digits.len()));
    }
    let mut index = 0u64;
    let mut radix = 1u64;
    for (&d, &l) in code.digits.iter().zip(&spec.levels) {
        if d >= l {
            return Err(Error::Range(format!("digit {d} >= level {l}")));
        }
        index += u64::from(d) * radix;
        radix *= u64::from(l);
    }
    u32::try_from(index).map_err(|_| Error::Range(format!("index {index} exceeds 32 bits")))
}

pub fn index_to_digits(index: u32, spec: &FsqSpec) -> Result<CodePoint> {
    let codes = spec.codes_per_codebook();
    if u64::from(index) >= codes {
        return Err(Error::Range(format!("token index {index} >= {codes} codes")));
    }
    let mut rest = index;
    let digits = spec
        .levels
        .iter()
        .map(|&l| {
            let d = rest % l;
            rest /= l;
            d
        })
        .collect();
    Ok(CodePoint { digits })
}

/// Digit for a value already bounded to `[-1, 1]`.
fn bounded_digit(v: f64, level: u32) -> u32 {
    let top = f64::from(level - 1);
    // f64::round rounds half away from zero.
    ((v + 1.0) * 0.5 * top).round().clamp(0.0, top) as u32
}

/// Center value of digit `d` on a level-`L` grid: `2d/(L-1) - 1`.
fn center(d: u32, level: u32) -> f32 {
    (2.0 * f64::from(d) / f64::from(level - 1) - 1.0) as f32
}

fn check_len(len: usize, spec: &FsqSpec) -> Result<()> {
    if len != spec.latent_dim() {
        return Err(Error::shape("latent vector", spec.latent_dim(), len));
    }
    Ok(())
}

fn quantize_with(values: &[f32], spec: &FsqSpec, bound: impl Fn(f64) -> f64) -> Result<TokenFrame> {
    check_len(values.len(), spec)?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("latent value {bad}")));
    }
    let dims = spec.dims_per_codebook();
    let indices = values
        .chunks_exact(dims)
        .map(|slice| {
            let digits = slice
                .iter()
                .zip(&spec.levels)
                .map(|(&z, &l)| bounded_digit(bound(f64::from(z)), l))
                .collect();
            digits_to_index(&CodePoint { digits }, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenFrame { indices })
}

/// Quantizes an unbounded latent vector of length `latent_dim`.
pub fn quantize(latent: &[f32], spec: &FsqSpec) -> Result<TokenFrame> {
    quantize_with(latent, spec, f64::tanh)
}

/// Quantizes values that are already in `[-1, 1]` (no `tanh`). Dequantized
/// centers map back to their own indices through this function.
pub fn quantize_bounded(values: &[f32], spec: &FsqSpec) -> Result<TokenFrame> {
    quantize_with(values, spec, |v| v)
}

/// Maps a frame back to the concatenated per-codebook center values.
pub fn dequantize(frame: &TokenFrame, spec: &FsqSpec) -> Result<Vec<f32>> {
    frame.validate(spec)?;
    let mut out = Vec::with_capacity(spec.latent_dim());
    for &index in &frame.indices {
        let code = index_to_digits(index, spec)?;
        out.extend(code.digits.iter().zip(&spec.levels).map(|(&d, &l)| center(d, l)));
    }
    Ok(out)
}
