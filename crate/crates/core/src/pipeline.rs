//! The end-to-end rate-adaptive mechanism, its baselines and SNR sweeps.
//!
//! One trial runs: encode the raw sample into per-modality features in
//! [0, 1], compute semantic importance κ from bound propagation at the
//! features, read CSI, solve the rate allocation, quantize, flip bits at the
//! link error probability, dequantize and decode. The clean reference
//! y_clean is the decoder output on the unquantized, noiseless features.
//!
//! The realized robustness bound of a trial is the width of the certified
//! output box over the ℒ∞ ball whose per-modality radii are the measured
//! feature distortions; it therefore upper-bounds |ŷ − y_clean| on every
//! trial.
//!
//! Random streams: the raw sample and the channel gains depend only on the
//! trial index, so every SNR point sees the same samples and fades. Bit flips
//! are keyed by (modality, SNR index, trial) and are shared by all schemes.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bounds::{self, BoundsError, NormOrder, PerturbationBall};
use crate::channel::{self, ChannelError, ChannelState, Fading, Purpose};
use crate::graph::{make_toy_fusion, train_toy, GraphError, Sample, SyntheticDataset, Tensor, ToyFusionModel};
use crate::quant::{self, QuantError};
use crate::ratesolver::{self, Infeasibility, ModalityLink, RateSolution, SolverError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(#[from] GraphError),
    #[error("bound propagation: {0}")]
    Bounds(#[from] BoundsError),
    #[error("rate allocation: {0}")]
    Solver(#[from] SolverError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("quantization: {0}")]
    Quant(#[from] QuantError),
    #[error("mcs table is empty")]
    EmptyMcsTable,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn infeasibility(&self) -> Option<&Infeasibility> {
        match self {
            PipelineError::Solver(SolverError::Infeasible(v)) => Some(v),
            _ => None,
        }
    }
}

/// Transmission scheme. `fixed` without a rate uses the equal-delay uniform
/// rate derived from the adaptive solution on the same CSI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Adaptive,
    Fixed(Option<f64>),
    ErrorFree,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Adaptive => f.write_str("adaptive"),
            Scheme::Fixed(None) => f.write_str("fixed"),
            Scheme::Fixed(Some(r)) => write!(f, "fixed:{r}"),
            Scheme::ErrorFree => f.write_str("errorfree"),
        }
    }
}

impl FromStr for Scheme {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "adaptive" => return Ok(Scheme::Adaptive),
            "fixed" => return Ok(Scheme::Fixed(None)),
            "errorfree" | "error-free" | "error_free" => return Ok(Scheme::ErrorFree),
            _ => {}
        }
        if let Some(r) = s.strip_prefix("fixed:") {
            let rate: f64 = r.parse().map_err(|_| PipelineError::Config(format!("bad fixed rate '{r}'")))?;
            if !(rate.is_finite() && rate > 0.0) {
                return Err(PipelineError::Config(format!("fixed rate must be positive, got {rate}")));
            }
            return Ok(Scheme::Fixed(Some(rate)));
        }
        Err(PipelineError::Config(format!("unknown scheme '{s}' (expected adaptive, fixed[:R] or errorfree)")))
    }
}

impl Serialize for Scheme {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a sweep depends on. Missing JSON fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the student model; the teacher that labels data uses seed + 1
    /// and the training set is drawn with seed + 2.
    pub model_seed: u64,
    /// Feature dimension of each modality.
    pub dims: Vec<usize>,
    pub hidden: usize,
    pub train_epochs: usize,
    pub train_samples: usize,
    pub learning_rate: f64,
    /// Load the model from JSON instead of building one; it also labels data.
    pub model_path: Option<PathBuf>,
    pub bits: u32,
    pub blocklength: u64,
    pub delta0: f64,
    pub p: NormOrder,
    pub tol: f64,
    pub max_iter: usize,
    pub fading: Fading,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub schemes: Vec<Scheme>,
    /// Compute κ once on a calibration sample instead of per trial.
    pub freeze_kappa: bool,
    /// ℒ_p radius of the ball κ is computed over; `None` uses 1 − 2⁻ᴮ, the
    /// largest per-element distortion any bit-error pattern can cause.
    pub kappa_radius: Option<f64>,
    /// Snap rates down to the illustrative MCS table before transmission.
    pub mcs_snap: bool,
    /// Worker cap for sweeps; `None` uses rayon's default.
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_seed: 7,
            dims: vec![2, 16, 8],
            hidden: 16,
            train_epochs: 300,
            train_samples: 512,
            learning_rate: 0.3,
            model_path: None,
            bits: 8,
            blocklength: 256,
            delta0: 1e-3,
            p: NormOrder::Inf,
            tol: ratesolver::DEFAULT_TOL,
            max_iter: ratesolver::DEFAULT_MAX_ITER,
            fading: Fading::Awgn,
            snr_db: (0..10).map(|i| 2.0 * i as f64).collect(),
            trials: 100,
            seed: 2024,
            schemes: vec![Scheme::Adaptive, Scheme::Fixed(None)],
            freeze_kappa: false,
            kappa_radius: None,
            mcs_snap: false,
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(1..=52).contains(&self.bits) {
            return bad(format!("bits must be in 1..=52, got {}", self.bits));
        }
        if self.blocklength < 2 {
            return bad(format!("blocklength must be at least 2, got {}", self.blocklength));
        }
        if !(self.delta0.is_finite() && self.delta0 > 0.0) {
            return bad(format!("delta0 must be positive, got {}", self.delta0));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr grid must be non-empty and finite".into());
        }
        if self.snr_db.len() > 0xffff {
            return bad("snr grid is limited to 65535 points".into());
        }
        if self.trials == 0 || self.trials as u64 > u32::MAX as u64 {
            return bad(format!("trials must be in 1..=2^32-1, got {}", self.trials));
        }
        if self.model_path.is_none() && (self.dims.is_empty() || self.dims.contains(&0) || self.hidden == 0) {
            return bad(format!("dims {:?} and hidden {} must be positive", self.dims, self.hidden));
        }
        if self.dims.len() > 0xfff {
            return bad("at most 4095 modalities".into());
        }
        if self.schemes.is_empty() {
            return bad("at least one scheme is required".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(r) = self.kappa_radius {
            if !(r.is_finite() && r >= 0.0) {
                return bad(format!("kappa_radius must be non-negative, got {r}"));
            }
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        Ok(())
    }

    /// Radius of the ball κ is computed over.
    pub fn kappa_ball_radius(&self) -> f64 {
        self.kappa_radius.unwrap_or(1.0 - (-(self.bits as f64)).exp2())
    }
}

/// Builds (and trains) the student and teacher models described by `config`.
pub fn build_models(config: &ExperimentConfig) -> Result<(ToyFusionModel, ToyFusionModel), PipelineError> {
    if let Some(path) = &config.model_path {
        let text = std::fs::read_to_string(path)?;
        let model: ToyFusionModel = serde_json::from_str(&text)?;
        return Ok((model.clone(), model));
    }
    let teacher = make_toy_fusion(config.model_seed.wrapping_add(1), &config.dims, config.hidden)?;
    let init = make_toy_fusion(config.model_seed, &config.dims, config.hidden)?;
    let data = SyntheticDataset::generate(&teacher, config.train_samples, config.model_seed.wrapping_add(2))?;
    let model = train_toy(&init, &data, config.train_epochs, config.learning_rate)?;
    Ok((model, teacher))
}

/// κ⁽ᵐ⁾ of the decoder at `center` from bounds over a uniform ball of
/// `radius` in every modality.
pub fn kappa_at(model: &ToyFusionModel, center: &[Tensor], p: NormOrder, radius: f64) -> Result<Vec<f64>, PipelineError> {
    let dec = model.decoder();
    let ball = PerturbationBall::uniform(p, radius, dec.num_modalities())?;
    let b = bounds::propagate_bounds(dec, center, &ball)?;
    Ok(bounds::semantic_importance(&b, p))
}

/// Identifies a trial for random-stream selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialKey {
    pub snr_index: usize,
    pub snr_db: f64,
    pub trial: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityOutcome {
    pub payload_bits: usize,
    pub gain: f64,
    pub snr: f64,
    pub rate: f64,
    pub eps: f64,
    pub flips: usize,
    /// Measured ℒ∞ distortion of the received feature.
    pub delta_realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub trial: u64,
    pub modalities: Vec<ModalityOutcome>,
    pub kappa: Vec<f64>,
    pub tau_star: Option<f64>,
    /// Σ a⁽ᵐ⁾ε⁽ᵐ⁾ at the transmitted rates.
    pub predicted_distortion: f64,
    /// Σ a⁽ᵐ⁾ · (flips⁽ᵐ⁾ / D⁽ᵐ⁾).
    pub realized_distortion: f64,
    pub gamma_realized: f64,
    pub deviation: f64,
    /// max_m D⁽ᵐ⁾/R⁽ᵐ⁾ in channel uses.
    pub delay: f64,
    pub y_clean: f64,
    pub y_hat: f64,
    pub label: f64,
    pub mse: f64,
    pub mae: f64,
}

impl TrialResult {
    /// |ŷ − y_clean| ≤ γ_realized up to `slack`.
    pub fn is_sound(&self, slack: f64) -> bool {
        self.deviation <= self.gamma_realized + slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub snr_db: f64,
    pub trial: u64,
    pub scheme: Scheme,
    pub error: String,
}

/// Encoded features of one sample with its clean output and κ.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub features: Vec<Vec<f64>>,
    pub y_clean: f64,
    pub label: f64,
    pub kappa: Vec<f64>,
}

fn to_tensors(features: &[Vec<f64>]) -> Result<Vec<Tensor>, GraphError> {
    features.iter().map(|f| Tensor::vector(f.clone())).collect()
}

/// A configured experiment: models, optional frozen κ, and the trial runners.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    model: ToyFusionModel,
    teacher: ToyFusionModel,
    frozen_kappa: Option<Vec<f64>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let (model, teacher) = build_models(&config)?;
        Self::with_models(config, model, teacher)
    }

    pub fn with_models(
        mut config: ExperimentConfig,
        model: ToyFusionModel,
        teacher: ToyFusionModel,
    ) -> Result<Self, PipelineError> {
        config.dims = model.feature_dims();
        config.validate()?;
        if teacher.raw_dims() != model.raw_dims() {
            return Err(PipelineError::Config(format!(
                "teacher inputs {:?} differ from model inputs {:?}",
                teacher.raw_dims(),
                model.raw_dims()
            )));
        }
        let mut exp = Self { config, model, teacher, frozen_kappa: None };
        if exp.config.freeze_kappa {
            let mut rng = channel::stream_rng(exp.config.seed, Purpose::Calibration, 0, 0, 0);
            let sample = Sample::draw(&exp.teacher, 0.0, &mut rng)?;
            exp.frozen_kappa = Some(exp.prepare(&sample)?.kappa);
        }
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyFusionModel {
        &self.model
    }

    pub fn frozen_kappa(&self) -> Option<&[f64]> {
        self.frozen_kappa.as_deref()
    }

    pub fn payload_bits(&self) -> Vec<usize> {
        self.config.dims.iter().map(|d| d * self.config.bits as usize).collect()
    }

    /// The labelled sample of a trial; identical at every SNR point.
    pub fn draw_sample(&self, trial: u64) -> Result<Sample, PipelineError> {
        let mut rng = channel::stream_rng(self.config.seed, Purpose::Sample, 0, 0, trial);
        Ok(Sample::draw(&self.teacher, SyntheticDataset::LABEL_NOISE, &mut rng)?)
    }

    /// Per-modality link states of a trial at mean SNR `snr_db`. Gains depend
    /// only on (modality, trial).
    pub fn channel_states(&self, snr_db: f64, trial: u64) -> Result<Vec<ChannelState>, PipelineError> {
        (0..self.config.dims.len())
            .map(|m| {
                let mut rng = channel::stream_rng(self.config.seed, Purpose::Gain, m, 0, trial);
                let h = channel::sample_gain(self.config.fading, &mut rng);
                Ok(ChannelState::from_mean_snr_db(self.config.fading, h, snr_db, self.config.blocklength)?)
            })
            .collect()
    }

    pub fn prepare(&self, sample: &Sample) -> Result<PreparedSample, PipelineError> {
        let features: Vec<Vec<f64>> = self
            .model
            .encode(&sample.raw)?
            .into_iter()
            .map(|t| t.into_vec().into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
            .collect();
        let tensors = to_tensors(&features)?;
        let y_clean = self.model.decoder().forward(&tensors)?.data()[0];
        let kappa = match &self.frozen_kappa {
            Some(k) => k.clone(),
            None => kappa_at(&self.model, &tensors, self.config.p, self.config.kappa_ball_radius())?,
        };
        Ok(PreparedSample { features, y_clean, label: sample.label, kappa })
    }

    pub fn links(&self, prep: &PreparedSample, states: &[ChannelState]) -> Result<Vec<ModalityLink>, PipelineError> {
        if states.len() != prep.kappa.len() {
            return Err(PipelineError::Config(format!(
                "{} channel states for {} modalities",
                states.len(),
                prep.kappa.len()
            )));
        }
        self.payload_bits()
            .iter()
            .zip(&prep.kappa)
            .zip(states)
            .map(|((&d, &k), s)| Ok(ModalityLink::from_channel(d as f64, k, self.config.bits, s.link_params()?)?))
            .collect()
    }

    pub fn solve(&self, prep: &PreparedSample, states: &[ChannelState]) -> Result<RateSolution, PipelineError> {
        let links = self.links(prep, states)?;
        Ok(ratesolver::solve_bisection(&links, self.config.delta0, self.config.tol, self.config.max_iter)?)
    }

    fn snap(&self, rates: Vec<f64>) -> Result<Vec<f64>, PipelineError> {
        if !self.config.mcs_snap {
            return Ok(rates);
        }
        let table = default_mcs_table();
        rates.into_iter().map(|r| Ok(mcs_snap(r, &table)?.effective_rate)).collect()
    }

    /// Quantize, transmit at `rates`, decode, and measure.
    pub fn transmit(
        &self,
        scheme: Scheme,
        prep: &PreparedSample,
        states: &[ChannelState],
        rates: &[f64],
        tau_star: Option<f64>,
        key: TrialKey,
    ) -> Result<TrialResult, PipelineError> {
        let bits = self.config.bits;
        let a_scale = 1.0 - (-(bits as f64)).exp2();
        let payload = self.payload_bits();
        let mut outcomes = Vec::with_capacity(rates.len());
        let mut received = Vec::with_capacity(rates.len());
        for (m, ((feature, state), &rate)) in prep.features.iter().zip(states).zip(rates).enumerate() {
            let eps = channel::link_error_prob(state, rate)?;
            let q = quant::quantize(feature, bits)?;
            let mut rng = channel::stream_rng(self.config.seed, Purpose::Flip, m, key.snr_index, key.trial);
            let (rx, flips) = channel::transmit(q.bits(), eps, &mut rng)?;
            let back = quant::dequantize(&q.with_bits(rx)?);
            let delta = back.iter().zip(feature).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            outcomes.push(ModalityOutcome {
                payload_bits: payload[m],
                gain: state.gain,
                snr: state.snr,
                rate,
                eps,
                flips,
                delta_realized: delta,
            });
            received.push(back);
        }
        let clean = to_tensors(&prep.features)?;
        let y_hat = self.model.decoder().forward(&to_tensors(&received)?)?.data()[0];
        let radii: Vec<f64> = outcomes.iter().map(|o| o.delta_realized).collect();
        let report = bounds::certify(self.model.decoder(), &clean, &PerturbationBall::new(NormOrder::Inf, radii)?)?;
        let gamma_realized = report.output_box.as_ref().map_or(0.0, |b| b[0].width());
        let predicted_distortion = outcomes.iter().zip(&prep.kappa).map(|(o, k)| a_scale * k * o.eps).sum();
        let realized_distortion =
            outcomes.iter().zip(&prep.kappa).map(|(o, k)| a_scale * k * o.flips as f64 / o.payload_bits as f64).sum();
        let delay = outcomes.iter().map(|o| o.payload_bits as f64 / o.rate).fold(0.0, f64::max);
        let err = y_hat - prep.label;
        Ok(TrialResult {
            scheme,
            snr_db: key.snr_db,
            trial: key.trial,
            modalities: outcomes,
            kappa: prep.kappa.clone(),
            tau_star,
            predicted_distortion,
            realized_distortion,
            gamma_realized,
            deviation: (y_hat - prep.y_clean).abs(),
            delay,
            y_clean: prep.y_clean,
            y_hat,
            label: prep.label,
            mse: err * err,
            mae: err.abs(),
        })
    }

    /// The rate-adaptive mechanism on one sample.
    pub fn run_adaptive(&self, sample: &Sample, states: &[ChannelState], key: TrialKey) -> Result<TrialResult, PipelineError> {
        let prep = self.prepare(sample)?;
        let sol = self.solve(&prep, states)?;
        self.transmit(Scheme::Adaptive, &prep, states, &self.snap(sol.rates)?, Some(sol.tau_star), key)
    }

    /// Uniform rate on every modality. Without an explicit rate, the
    /// equal-delay rate max D / max(D/R*) of the adaptive solution is used.
    pub fn run_fixed(
        &self,
        sample: &Sample,
        states: &[ChannelState],
        rate: Option<f64>,
        key: TrialKey,
    ) -> Result<TrialResult, PipelineError> {
        let prep = self.prepare(sample)?;
        let sol = match rate {
            Some(_) => None,
            None => Some(self.solve(&prep, states)?),
        };
        self.fixed_from(&prep, states, rate, sol.as_ref(), key)
    }

    fn fixed_from(
        &self,
        prep: &PreparedSample,
        states: &[ChannelState],
        rate: Option<f64>,
        sol: Option<&RateSolution>,
        key: TrialKey,
    ) -> Result<TrialResult, PipelineError> {
        let r = match (rate, sol) {
            (Some(r), _) => r,
            (None, Some(sol)) => {
                let d: Vec<f64> = self.payload_bits().iter().map(|&d| d as f64).collect();
                ratesolver::fixed_rate_baseline(&d, &sol.rates)?
            }
            (None, None) => return Err(PipelineError::Config("fixed scheme needs a rate or a solution".into())),
        };
        let rates = self.snap(vec![r; states.len()])?;
        self.transmit(Scheme::Fixed(rate), prep, states, &rates, sol.map(|s| s.tau_star), key)
    }

    /// Unquantized, noiseless features: ŷ = y_clean.
    pub fn run_error_free(&self, sample: &Sample, key: TrialKey) -> Result<TrialResult, PipelineError> {
        Ok(self.error_free_from(&self.prepare(sample)?, key))
    }

    fn error_free_from(&self, prep: &PreparedSample, key: TrialKey) -> TrialResult {
        let err = prep.y_clean - prep.label;
        TrialResult {
            scheme: Scheme::ErrorFree,
            snr_db: key.snr_db,
            trial: key.trial,
            modalities: self
                .payload_bits()
                .into_iter()
                .map(|d| ModalityOutcome {
                    payload_bits: d,
                    gain: 1.0,
                    snr: f64::INFINITY,
                    rate: f64::INFINITY,
                    eps: 0.0,
                    flips: 0,
                    delta_realized: 0.0,
                })
                .collect(),
            kappa: prep.kappa.clone(),
            tau_star: None,
            predicted_distortion: 0.0,
            realized_distortion: 0.0,
            gamma_realized: 0.0,
            deviation: 0.0,
            delay: 0.0,
            y_clean: prep.y_clean,
            y_hat: prep.y_clean,
            label: prep.label,
            mse: err * err,
            mae: err.abs(),
        }
    }

    /// Every configured scheme on one (SNR index, trial) slot, in scheme order.
    pub fn run_slot(&self, snr_index: usize, trial: u64) -> Vec<Result<TrialResult, TrialFailure>> {
        let snr_db = self.config.snr_db[snr_index];
        let key = TrialKey { snr_index, snr_db, trial };
        let fail = |scheme: Scheme, e: &PipelineError| TrialFailure { snr_db, trial, scheme, error: e.to_string() };
        let setup = self
            .draw_sample(trial)
            .and_then(|s| self.prepare(&s))
            .and_then(|p| Ok((self.channel_states(snr_db, trial)?, p)));
        let (states, prep) = match setup {
            Ok(v) => v,
            Err(e) => return self.config.schemes.iter().map(|&s| Err(fail(s, &e))).collect(),
        };
        let needs_solution = self.config.schemes.iter().any(|s| matches!(s, Scheme::Adaptive | Scheme::Fixed(None)));
        let sol = needs_solution.then(|| self.solve(&prep, &states));

        self.config
            .schemes
            .iter()
            .map(|&scheme| {
                let out = match (scheme, &sol) {
                    (Scheme::ErrorFree, _) => Ok(self.error_free_from(&prep, key)),
                    (Scheme::Fixed(Some(r)), _) => self.fixed_from(&prep, &states, Some(r), None, key),
                    (_, Some(Err(e))) => return Err(fail(scheme, e)),
                    (Scheme::Adaptive, Some(Ok(s))) => self
                        .snap(s.rates.clone())
                        .and_then(|r| self.transmit(scheme, &prep, &states, &r, Some(s.tau_star), key)),
                    (Scheme::Fixed(None), Some(Ok(s))) => self.fixed_from(&prep, &states, None, Some(s), key),
                    (_, None) => unreachable!("solution computed whenever a scheme needs it"),
                };
                out.map_err(|e| fail(scheme, &e))
            })
            .collect()
    }

    /// All SNR points × trials × schemes. Results are ordered by
    /// (SNR index, trial, scheme) regardless of worker scheduling.
    pub fn sweep(&self) -> Result<SweepResult, PipelineError> {
        let slots: Vec<(usize, u64)> = (0..self.config.snr_db.len())
            .flat_map(|i| (0..self.config.trials as u64).map(move |t| (i, t)))
            .collect();
        let run = || slots.par_iter().map(|&(i, t)| self.run_slot(i, t)).collect::<Vec<_>>();
        let per_slot = match self.config.jobs {
            Some(j) => rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| PipelineError::Pool(e.to_string()))?
                .install(run),
            None => run(),
        };
        let mut trials = Vec::with_capacity(per_slot.len() * self.config.schemes.len());
        let mut failures = Vec::new();
        for r in per_slot.into_iter().flatten() {
            match r {
                Ok(t) => trials.push(t),
                Err(f) => failures.push(f),
            }
        }
        let summaries = summarize(&self.config, &trials, &failures);
        Ok(SweepResult { trials, failures, summaries })
    }
}

/// Builds the experiment and runs its sweep.
pub fn snr_sweep(config: ExperimentConfig) -> Result<SweepResult, PipelineError> {
    Experiment::new(config)?.sweep()
}

/// Aggregates of one (SNR point, scheme) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub snr_db: f64,
    pub scheme: Scheme,
    pub trials: usize,
    pub failures: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Pearson correlation of ŷ with the label.
    pub corr: f64,
    pub delay_mean: f64,
    pub gamma_realized_mean: f64,
    pub deviation_mean: f64,
    pub rate_mean: Vec<f64>,
    pub predicted_distortion_mean: f64,
    pub realized_distortion_mean: f64,
    /// Trials with |ŷ − y_clean| > γ_realized + 1e-9.
    pub violations: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        f64::NAN
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn summarize(config: &ExperimentConfig, trials: &[TrialResult], failures: &[TrialFailure]) -> Vec<PointSummary> {
    let mut out = Vec::with_capacity(config.snr_db.len() * config.schemes.len());
    for &snr_db in &config.snr_db {
        for &scheme in &config.schemes {
            let cell: Vec<&TrialResult> = trials.iter().filter(|t| t.snr_db == snr_db && t.scheme == scheme).collect();
            let col = |f: &dyn Fn(&TrialResult) -> f64| cell.iter().map(|t| f(t)).collect::<Vec<f64>>();
            let mse = col(&|t| t.mse);
            let mae = col(&|t| t.mae);
            let rate_mean = (0..config.dims.len())
                .map(|m| mean(&col(&|t| t.modalities[m].rate)))
                .collect();
            out.push(PointSummary {
                snr_db,
                scheme,
                trials: cell.len(),
                failures: failures.iter().filter(|f| f.snr_db == snr_db && f.scheme == scheme).count(),
                mse_mean: mean(&mse),
                mse_std: std_dev(&mse),
                mae_mean: mean(&mae),
                mae_std: std_dev(&mae),
                corr: pearson(&col(&|t| t.y_hat), &col(&|t| t.label)),
                delay_mean: mean(&col(&|t| t.delay)),
                gamma_realized_mean: mean(&col(&|t| t.gamma_realized)),
                deviation_mean: mean(&col(&|t| t.deviation)),
                rate_mean,
                predicted_distortion_mean: mean(&col(&|t| t.predicted_distortion)),
                realized_distortion_mean: mean(&col(&|t| t.realized_distortion)),
                violations: cell.iter().filter(|t| !t.is_sound(1e-9)).count(),
            });
        }
    }
    out
}

pub const CSV_HEADER: [&str; 12] = [
    "snr_db",
    "scheme",
    "trial",
    "modality",
    "rate",
    "eps",
    "delta_realized",
    "gamma_realized",
    "deviation",
    "delay",
    "mse",
    "mae",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub trials: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
    pub summaries: Vec<PointSummary>,
}

impl SweepResult {
    /// One row per (trial, modality) with the fixed column schema.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for t in &self.trials {
            for (m, o) in t.modalities.iter().enumerate() {
                w.write_record([
                    t.snr_db.to_string(),
                    t.scheme.to_string(),
                    t.trial.to_string(),
                    m.to_string(),
                    o.rate.to_string(),
                    o.eps.to_string(),
                    o.delta_realized.to_string(),
                    t.gamma_realized.to_string(),
                    t.deviation.to_string(),
                    t.delay.to_string(),
                    t.mse.to_string(),
                    t.mae.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String, PipelineError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn summary(&self, snr_db: f64, scheme: Scheme) -> Option<&PointSummary> {
        self.summaries.iter().find(|s| s.snr_db == snr_db && s.scheme == scheme)
    }
}

/// One modulation-and-coding entry; the effective rate is code rate times
/// bits per symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub code_rate: f64,
    pub bits_per_symbol: u32,
}

impl McsEntry {
    pub fn effective_rate(&self) -> f64 {
        self.code_rate * self.bits_per_symbol as f64
    }

    pub fn modulation_order(&self) -> u64 {
        1u64 << self.bits_per_symbol
    }
}

/// {QPSK, 16-, 64-, 256-QAM} × {1/3, 1/2, 2/3, 3/4}.
pub fn default_mcs_table() -> Vec<McsEntry> {
    let mut t = Vec::with_capacity(16);
    for bits_per_symbol in [2, 4, 6, 8] {
        for code_rate in [1.0 / 3.0, 0.5, 2.0 / 3.0, 0.75] {
            t.push(McsEntry { code_rate, bits_per_symbol });
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McsChoice {
    pub entry: McsEntry,
    pub effective_rate: f64,
    /// The requested rate lies below every entry; the smallest was returned.
    pub below_table: bool,
}

/// The largest effective rate not exceeding `rate`, or the smallest entry
/// (flagged) when none does.
pub fn mcs_snap(rate: f64, table: &[McsEntry]) -> Result<McsChoice, PipelineError> {
    let by_rate = |a: &&McsEntry, b: &&McsEntry| a.effective_rate().total_cmp(&b.effective_rate());
    let best = table.iter().filter(|e| e.effective_rate() <= rate).max_by(by_rate);
    match best {
        Some(&entry) => Ok(McsChoice { entry, effective_rate: entry.effective_rate(), below_table: false }),
        None => {
            let &entry = table.iter().min_by(by_rate).ok_or(PipelineError::EmptyMcsTable)?;
            Ok(McsChoice { entry, effective_rate: entry.effective_rate(), below_table: true })
        }
    }
}
