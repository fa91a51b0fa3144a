//! Finite-blocklength link mathematics under the normal approximation.
//!
//! Rates are in bits per channel use. Every logarithm is base 2, including
//! the `log L / L` correction term.

use std::f64::consts::{FRAC_2_PI, LOG2_E, SQRT_2};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FblError {
    #[error("snr must be finite and non-negative, got {0}")]
    Snr(f64),
    #[error("blocklength must be at least 2, got {0}")]
    Blocklength(u64),
    #[error("error probability must lie in (0, 1), got {0}")]
    Probability(f64),
    #[error("rate must be finite, got {0}")]
    Rate(f64),
    #[error("stored {field} = {stored} disagrees with recomputed {recomputed}")]
    Inconsistent { field: &'static str, stored: f64, recomputed: f64 },
}

fn check_snr(snr: f64) -> Result<(), FblError> {
    if snr.is_finite() && snr >= 0.0 {
        Ok(())
    } else {
        Err(FblError::Snr(snr))
    }
}

/// C = ½·log₂(1 + φ).
pub fn capacity(snr: f64) -> Result<f64, FblError> {
    check_snr(snr)?;
    Ok(0.5 * snr.ln_1p() * LOG2_E)
}

/// V = 1 − (1 + φ)⁻².
pub fn dispersion(snr: f64) -> Result<f64, FblError> {
    check_snr(snr)?;
    let r = 1.0 / (1.0 + snr);
    Ok(1.0 - r * r)
}

/// Gaussian tail probability, Q(z) = ½·erfc(z/√2).
pub fn q_exact(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of [`q_exact`] by Newton steps kept inside a shrinking bracket.
pub fn q_inv(eps: f64) -> Result<f64, FblError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(FblError::Probability(eps));
    }
    if eps == 0.5 {
        return Ok(0.0);
    }
    // Q(±38.5) is below the smallest normal double / above 1 - ε_mach.
    let (mut lo, mut hi) = (-38.5f64, 38.5f64);
    let mut z = q_logistic_inv(eps).clamp(lo, hi);
    for _ in 0..200 {
        let r = q_exact(z) - eps;
        if r == 0.0 {
            return Ok(z);
        }
        // Q is decreasing: r > 0 means z is too small.
        if r > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let pdf = std_normal_pdf(z);
        let mut next = if pdf > 0.0 { z + r / pdf } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= 1e-15 * z.abs().max(1.0) || hi - lo <= 1e-15 * z.abs().max(1.0) {
            return Ok(next);
        }
        z = next;
    }
    Ok(z)
}

/// The constant a = √(2/π) of the logistic Q approximation.
pub fn logistic_slope() -> f64 {
    FRAC_2_PI.sqrt()
}

/// 1/(1 + e^x), evaluated without overflow for large |x|.
pub(crate) fn logistic_tail(x: f64) -> f64 {
    if x.is_nan() {
        0.5
    } else if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Q(z) ≈ 1/(1 + exp(2az)), a = √(2/π).
pub fn q_logistic(z: f64) -> f64 {
    logistic_tail(2.0 * logistic_slope() * z)
}

/// Exact inverse of [`q_logistic`].
pub fn q_logistic_inv(eps: f64) -> f64 {
    ((1.0 - eps) / eps).ln() / (2.0 * logistic_slope())
}

/// Which Q-function to invert inside [`achievable_rate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QModel {
    #[default]
    Exact,
    Logistic,
}

/// SNR, blocklength, and the derived capacity and dispersion of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLink")]
pub struct LinkParams {
    pub snr: f64,
    pub blocklength: u64,
    pub capacity: f64,
    pub dispersion: f64,
}

#[derive(Deserialize)]
struct RawLink {
    snr: f64,
    blocklength: u64,
    capacity: Option<f64>,
    dispersion: Option<f64>,
}

impl TryFrom<RawLink> for LinkParams {
    type Error = FblError;

    fn try_from(raw: RawLink) -> Result<Self, FblError> {
        let link = LinkParams::new(raw.snr, raw.blocklength)?;
        for (field, stored, recomputed) in [
            ("capacity", raw.capacity, link.capacity),
            ("dispersion", raw.dispersion, link.dispersion),
        ] {
            if let Some(s) = stored {
                if (s - recomputed).abs() > 1e-12 {
                    return Err(FblError::Inconsistent { field, stored: s, recomputed });
                }
            }
        }
        Ok(link)
    }
}

impl LinkParams {
    pub fn new(snr: f64, blocklength: u64) -> Result<Self, FblError> {
        if blocklength < 2 {
            return Err(FblError::Blocklength(blocklength));
        }
        Ok(Self { snr, blocklength, capacity: capacity(snr)?, dispersion: dispersion(snr)? })
    }

    pub fn from_snr_db(snr_db: f64, blocklength: u64) -> Result<Self, FblError> {
        Self::new(10f64.powf(snr_db / 10.0), blocklength)
    }

    /// log₂(L)/L.
    pub fn length_correction(&self) -> f64 {
        let l = self.blocklength as f64;
        l.log2() / l
    }

    /// b = C + log₂(L)/L, the rate at which the predicted error is ½.
    pub fn midpoint_rate(&self) -> f64 {
        self.capacity + self.length_correction()
    }

    /// k = √(8L / (π V log₂²e)); infinite when V = 0.
    pub fn logistic_gain(&self) -> f64 {
        if self.dispersion == 0.0 {
            return f64::INFINITY;
        }
        let l = self.blocklength as f64;
        (8.0 * l / (std::f64::consts::PI * self.dispersion * LOG2_E * LOG2_E)).sqrt()
    }
}

/// R = C − √(V/L)·Q⁻¹(ε)·log₂e + log₂(L)/L.
pub fn achievable_rate(link: &LinkParams, eps: f64) -> Result<f64, FblError> {
    achievable_rate_with(link, eps, QModel::Exact)
}

pub fn achievable_rate_with(link: &LinkParams, eps: f64, q: QModel) -> Result<f64, FblError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(FblError::Probability(eps));
    }
    let z = match q {
        QModel::Exact => q_inv(eps)?,
        QModel::Logistic => q_logistic_inv(eps),
    };
    let l = link.blocklength as f64;
    Ok(link.capacity - (link.dispersion / l).sqrt() * z * LOG2_E + link.length_correction())
}

/// ε = 1/(1 + exp[k(b − R)]): the logistic inversion of [`achievable_rate`].
///
/// With zero dispersion the logistic degenerates to a step at b.
pub fn error_prob_of_rate(link: &LinkParams, rate: f64) -> Result<f64, FblError> {
    if !rate.is_finite() {
        return Err(FblError::Rate(rate));
    }
    Ok(logistic_error(link.logistic_gain(), link.midpoint_rate(), rate))
}

pub(crate) fn logistic_error(k: f64, b: f64, rate: f64) -> f64 {
    let gap = b - rate;
    if gap == 0.0 {
        return 0.5;
    }
    logistic_tail(k * gap)
}
