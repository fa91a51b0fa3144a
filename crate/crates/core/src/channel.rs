//! Flat-fading links and bit-error injection.
//!
//! Each payload bit is flipped independently with the link's error
//! probability ε, so the expected per-element distortion is ε(1 − 2⁻ᴮ).
//!
//! Randomness comes from ChaCha8 keyed by a master seed. Every (purpose,
//! modality, SNR index, trial) tuple selects its own stream, so results do
//! not depend on the order in which trials or modalities are processed.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::fbl::{error_prob_of_rate, FblError, LinkParams};

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("noise power must be positive and finite, got {0}")]
    NoisePower(f64),
    #[error("transmit power must be non-negative and finite, got {0}")]
    TxPower(f64),
    #[error("channel gain must be non-negative and finite, got {0}")]
    Gain(f64),
    #[error("an awgn channel has unit gain, got {0}")]
    AwgnGain(f64),
    #[error("stored snr {stored} does not match |h|^2 P / N = {recomputed}")]
    Inconsistent { stored: f64, recomputed: f64 },
    #[error("error probability must lie in [0, 1], got {0}")]
    Probability(f64),
    #[error("rate must be non-negative and finite, got {0}")]
    Rate(f64),
    #[error("unknown fading model '{0}' (expected awgn or rayleigh)")]
    UnknownFading(String),
    #[error(transparent)]
    Fbl(#[from] FblError),
    #[error("transcript: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fading {
    #[default]
    Awgn,
    Rayleigh,
}

impl fmt::Display for Fading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fading::Awgn => "awgn",
            Fading::Rayleigh => "rayleigh",
        })
    }
}

impl FromStr for Fading {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(Fading::Awgn),
            "rayleigh" => Ok(Fading::Rayleigh),
            _ => Err(ChannelError::UnknownFading(s.to_string())),
        }
    }
}

/// What a random stream is used for; part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Gain = 1,
    Flip = 2,
    Sample = 3,
    Calibration = 4,
}

/// Stream id layout: purpose (4 bits) | modality (12) | SNR index (16) | trial (32).
pub fn stream_id(purpose: Purpose, modality: usize, snr_index: usize, trial: u64) -> u64 {
    ((purpose as u64) << 60)
        | ((modality as u64 & 0xfff) << 48)
        | ((snr_index as u64 & 0xffff) << 32)
        | (trial & 0xffff_ffff)
}

pub fn stream_rng(master: u64, purpose: Purpose, modality: usize, snr_index: usize, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream_id(purpose, modality, snr_index, trial));
    rng
}

/// |h| for one coherence interval. AWGN returns 1 without touching `rng`;
/// Rayleigh returns |CN(0, 1)|, so |h|² ~ Exp(1).
pub fn sample_gain<R: Rng + ?Sized>(fading: Fading, rng: &mut R) -> f64 {
    match fading {
        Fading::Awgn => 1.0,
        Fading::Rayleigh => {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            ((re * re + im * im) * 0.5).sqrt()
        }
    }
}

/// φ = |h|²P / N.
pub fn snr(gain: f64, tx_power: f64, noise_power: f64) -> Result<f64, ChannelError> {
    if !(noise_power.is_finite() && noise_power > 0.0) {
        return Err(ChannelError::NoisePower(noise_power));
    }
    if !(tx_power.is_finite() && tx_power >= 0.0) {
        return Err(ChannelError::TxPower(tx_power));
    }
    if !(gain.is_finite() && gain >= 0.0) {
        return Err(ChannelError::Gain(gain));
    }
    Ok(gain * gain * tx_power / noise_power)
}

/// State of one modality's link during one inference sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawState")]
pub struct ChannelState {
    pub fading: Fading,
    pub gain: f64,
    pub tx_power: f64,
    pub noise_power: f64,
    pub snr: f64,
    pub blocklength: u64,
}

#[derive(Deserialize)]
struct RawState {
    fading: Fading,
    gain: f64,
    tx_power: f64,
    noise_power: f64,
    snr: f64,
    blocklength: u64,
}

impl TryFrom<RawState> for ChannelState {
    type Error = ChannelError;

    fn try_from(r: RawState) -> Result<Self, ChannelError> {
        let state = ChannelState::new(r.fading, r.gain, r.tx_power, r.noise_power, r.blocklength)?;
        if (state.snr - r.snr).abs() > 1e-12 * state.snr.max(1.0) {
            return Err(ChannelError::Inconsistent { stored: r.snr, recomputed: state.snr });
        }
        Ok(state)
    }
}

impl ChannelState {
    pub fn new(fading: Fading, gain: f64, tx_power: f64, noise_power: f64, blocklength: u64) -> Result<Self, ChannelError> {
        if fading == Fading::Awgn && gain != 1.0 {
            return Err(ChannelError::AwgnGain(gain));
        }
        let snr = snr(gain, tx_power, noise_power)?;
        LinkParams::new(snr, blocklength)?;
        Ok(Self { fading, gain, tx_power, noise_power, snr, blocklength })
    }

    /// Unit noise power and transmit power set so that the mean SNR is
    /// `mean_snr_db`; the instantaneous SNR scales with |h|².
    pub fn from_mean_snr_db(fading: Fading, gain: f64, mean_snr_db: f64, blocklength: u64) -> Result<Self, ChannelError> {
        Self::new(fading, gain, 10f64.powf(mean_snr_db / 10.0), 1.0, blocklength)
    }

    pub fn link_params(&self) -> Result<LinkParams, ChannelError> {
        Ok(LinkParams::new(self.snr, self.blocklength)?)
    }
}

/// Per-modality SNR fed back to the transmitter (perfect CSI).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiReport {
    pub trial: u64,
    pub snr: Vec<f64>,
}

impl CsiReport {
    pub fn from_states(trial: u64, states: &[ChannelState]) -> Self {
        Self { trial, snr: states.iter().map(|s| s.snr).collect() }
    }
}

/// Flips each bit independently with probability `eps`. Returns the received
/// bits and the number of flips. One uniform draw is consumed per bit.
pub fn transmit<R: Rng + ?Sized>(bits: &[bool], eps: f64, rng: &mut R) -> Result<(Vec<bool>, usize), ChannelError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(ChannelError::Probability(eps));
    }
    let mut flips = 0;
    let out = bits
        .iter()
        .map(|&b| {
            let flip = rng.gen::<f64>() < eps;
            flips += flip as usize;
            b ^ flip
        })
        .collect();
    Ok((out, flips))
}

/// ε at rate R on the link described by `state`.
pub fn link_error_prob(state: &ChannelState, rate: f64) -> Result<f64, ChannelError> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(ChannelError::Rate(rate));
    }
    Ok(error_prob_of_rate(&state.link_params()?, rate)?)
}

/// One transcript line: what one modality's link did on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub trial: u64,
    pub modality: usize,
    pub fading: Fading,
    pub gain: f64,
    pub snr: f64,
    pub rate: f64,
    pub eps: f64,
    pub bits: usize,
    pub flips: usize,
}

pub fn write_transcript<W: Write>(rows: &[TranscriptRow], out: W) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
