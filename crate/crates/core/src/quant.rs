//! B-bit fixed-point features and the distortion caused by bit errors.
//!
//! An element u ∈ [0, 1) is stored as B fractional bits, most significant
//! first, so bit j (1-based) carries weight 2⁻ʲ. A stream of d elements is
//! element-major: the B bits of element 0, then element 1, and so on.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bits per element must be in 1..=52, got {0}")]
    Bits(u32),
    #[error("element {index} = {value} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("bit stream holds {got} bits, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("error bit count {errors} exceeds bits per element {bits}")]
    TooManyErrors { errors: u32, bits: u32 },
    #[error("error probability must lie in [0, 1], got {0}")]
    Probability(f64),
}

fn check_bits(bits: u32) -> Result<(), QuantError> {
    if (1..=52).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::Bits(bits))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedFeature {
    bits: Vec<bool>,
    bits_per_element: u32,
    elements: usize,
}

impl QuantizedFeature {
    pub fn from_bits(bits: Vec<bool>, bits_per_element: u32, elements: usize) -> Result<Self, QuantError> {
        check_bits(bits_per_element)?;
        let expected = elements * bits_per_element as usize;
        if bits.len() != expected {
            return Err(QuantError::Length { expected, got: bits.len() });
        }
        Ok(Self { bits, bits_per_element, elements })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_per_element(&self) -> u32 {
        self.bits_per_element
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    /// Payload size D = d·B in bits.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Integer code of each element.
    pub fn codes(&self) -> Vec<u64> {
        self.bits
            .chunks(self.bits_per_element as usize)
            .map(|c| c.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64))
            .collect()
    }

    /// Packs the stream into bytes, MSB first; the final byte is zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], bits_per_element: u32, elements: usize) -> Result<Self, QuantError> {
        check_bits(bits_per_element)?;
        let n = elements * bits_per_element as usize;
        if bytes.len() != n.div_ceil(8) {
            return Err(QuantError::Length { expected: n, got: bytes.len() * 8 });
        }
        let bits = (0..n).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect();
        Self::from_bits(bits, bits_per_element, elements)
    }

    pub fn with_bits(&self, bits: Vec<bool>) -> Result<Self, QuantError> {
        Self::from_bits(bits, self.bits_per_element, self.elements)
    }
}

/// Rounds each element to the nearest multiple of 2⁻ᴮ (ties up); the top
/// half-step [1 − 2⁻ᴮ⁻¹, 1] maps to the largest code 2ᴮ − 1.
pub fn quantize(u: &[f64], bits: u32) -> Result<QuantizedFeature, QuantError> {
    check_bits(bits)?;
    let levels = (1u64 << bits) as f64;
    let top = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(u.len() * bits as usize);
    for (index, &value) in u.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(QuantError::OutOfRange { index, value });
        }
        let code = ((value * levels + 0.5).floor() as u64).min(top);
        out.extend((0..bits).rev().map(|k| code >> k & 1 == 1));
    }
    QuantizedFeature::from_bits(out, bits, u.len())
}

/// Σ_j bit_j·2⁻ʲ per element.
pub fn dequantize(q: &QuantizedFeature) -> Vec<f64> {
    let scale = 1.0 / (1u64 << q.bits_per_element) as f64;
    q.codes().into_iter().map(|c| c as f64 * scale).collect()
}

fn check_errors(k: u32, bits: u32) -> Result<(), QuantError> {
    check_bits(bits)?;
    if k > bits {
        return Err(QuantError::TooManyErrors { errors: k, bits });
    }
    Ok(())
}

/// Worst-case distortion of K bit errors (the K most significant bits):
/// Σ_{k=1..K} 2⁻ᵏ = 1 − 2⁻ᴷ.
pub fn max_distortion(k: u32, bits: u32) -> Result<f64, QuantError> {
    check_errors(k, bits)?;
    Ok(1.0 - (-(k as f64)).exp2())
}

/// Mean distortion over all C(B, K) equally likely K-bit error patterns:
/// (K/B)(1 − 2⁻ᴮ).
pub fn expected_distortion(k: u32, bits: u32) -> Result<f64, QuantError> {
    check_errors(k, bits)?;
    Ok(k as f64 / bits as f64 * (1.0 - (-(bits as f64)).exp2()))
}

/// ε·(1 − 2⁻ᴮ): the per-element distortion budget at bit-error rate ε.
pub fn distortion_bound_from_eps(eps: f64, bits: u32) -> Result<f64, QuantError> {
    check_bits(bits)?;
    if !(0.0..=1.0).contains(&eps) {
        return Err(QuantError::Probability(eps));
    }
    Ok(eps * (1.0 - (-(bits as f64)).exp2()))
}
