//! Minimum-delay rate allocation under a robustness budget.
//!
//! Each modality contributes a logistic term a/(1 + exp[k(b − R)]) to the
//! predicted output distortion. With τ the common payload-normalized rate
//! (R⁽ᵐ⁾ = D⁽ᵐ⁾τ), the optimum is the root of
//! f(τ) = Σ a⁽ᵐ⁾/(1 + exp[k⁽ᵐ⁾(b⁽ᵐ⁾ − D⁽ᵐ⁾τ)]) − Δ₀, which is increasing in τ
//! and found by bisection on [0, min_m b⁽ᵐ⁾/D⁽ᵐ⁾].

use serde::{Deserialize, Serialize};

use crate::fbl::{logistic_error, FblError, LinkParams};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no modalities given")]
    Empty,
    #[error("invalid modality {index}: {detail}")]
    Link { index: usize, detail: String },
    #[error("delta0 must be finite and positive, got {0}")]
    Delta0(f64),
    #[error("infeasible: {0}")]
    Infeasible(Infeasibility),
    #[error("bracket [{lo}, {hi}] does not straddle a root (f = {f_lo}, {f_hi})")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("no convergence after {iterations} iterations; last bracket [{lo}, {hi}]")]
    MaxIter { iterations: usize, lo: f64, hi: f64 },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("entries must be positive and finite")]
    NonPositive,
    #[error(transparent)]
    Fbl(#[from] FblError),
}

/// Why a budget Δ₀ cannot be met, with both sides of the violated inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Infeasibility {
    /// Δ₀ must not exceed ½·Σa⁽ᵐ⁾.
    BudgetTooLarge { delta0: f64, half_sum_a: f64 },
    /// Even at zero rate the predicted distortion Σa⁽ᵐ⁾ε⁽ᵐ⁾(0) reaches Δ₀.
    BudgetTooSmall { delta0: f64, distortion_at_zero_rate: f64 },
    /// Some modality has b⁽ᵐ⁾ ≤ 0, so no positive rate is admissible.
    NoRateRange { upper: f64 },
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Infeasibility::BudgetTooLarge { delta0, half_sum_a } => {
                write!(f, "delta0 = {delta0} > 0.5 * sum(a) = {half_sum_a}")
            }
            Infeasibility::BudgetTooSmall { delta0, distortion_at_zero_rate } => {
                write!(f, "delta0 = {delta0} <= predicted distortion at zero rate = {distortion_at_zero_rate}")
            }
            Infeasibility::NoRateRange { upper } => write!(f, "rate range (0, {upper}] is empty"),
        }
    }
}

/// The constants (a, b, k) of one modality's logistic distortion term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticTerm {
    pub a: f64,
    pub b: f64,
    pub k: f64,
}

impl LogisticTerm {
    pub fn eps(&self, rate: f64) -> f64 {
        logistic_error(self.k, self.b, rate)
    }

    pub fn distortion(&self, rate: f64) -> f64 {
        if self.a == 0.0 {
            0.0
        } else {
            self.a * self.eps(rate)
        }
    }

    /// Closed-form second derivative of a/(1 + exp[k(b − R)]) in R.
    pub fn second_derivative(&self, rate: f64) -> f64 {
        let x = self.k * (self.b - rate);
        let shape = if x > 0.0 {
            let t = (-x).exp();
            t * (1.0 - t) / (1.0 + t).powi(3)
        } else {
            let e = x.exp();
            e * (e - 1.0) / (1.0 + e).powi(3)
        };
        self.a * self.k * self.k * shape
    }
}

/// One modality of a rate-allocation instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityLink {
    /// Payload D⁽ᵐ⁾ in bits.
    pub payload_bits: f64,
    pub term: LogisticTerm,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkParams>,
}

impl ModalityLink {
    /// a = (1 − 2⁻ᴮ)κ, b = C + log₂(L)/L, k = √(8L/(πV log₂²e)).
    pub fn from_channel(payload_bits: f64, kappa: f64, bits: u32, link: LinkParams) -> Result<Self, SolverError> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(SolverError::Link { index: 0, detail: format!("kappa = {kappa}") });
        }
        if bits == 0 || bits > 52 {
            return Err(SolverError::Link { index: 0, detail: format!("bits = {bits}") });
        }
        let a = (1.0 - (-(bits as f64)).exp2()) * kappa;
        let term = LogisticTerm { a, b: link.midpoint_rate(), k: link.logistic_gain() };
        let out = Self { payload_bits, term, kappa: Some(kappa), bits: Some(bits), link: Some(link) };
        out.check(0)?;
        Ok(out)
    }

    pub fn from_constants(payload_bits: f64, a: f64, b: f64, k: f64) -> Result<Self, SolverError> {
        let out = Self { payload_bits, term: LogisticTerm { a, b, k }, kappa: None, bits: None, link: None };
        out.check(0)?;
        Ok(out)
    }

    fn check(&self, index: usize) -> Result<(), SolverError> {
        let bad = |detail: String| Err(SolverError::Link { index, detail });
        if !(self.payload_bits.is_finite() && self.payload_bits > 0.0) {
            return bad(format!("payload {} must be positive", self.payload_bits));
        }
        let LogisticTerm { a, b, k } = self.term;
        if !(a.is_finite() && a >= 0.0) {
            return bad(format!("a = {a} must be non-negative"));
        }
        if !b.is_finite() {
            return bad(format!("b = {b} must be finite"));
        }
        if !(k > 0.0) {
            return bad(format!("k = {k} must be positive"));
        }
        Ok(())
    }

    pub fn eps(&self, rate: f64) -> f64 {
        self.term.eps(rate)
    }
}

/// Serialized form of a modality: physical link parameters or raw constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModalitySpec {
    Channel { payload_bits: f64, kappa: f64, bits: u32, snr: f64, blocklength: u64 },
    Constants { payload_bits: f64, a: f64, b: f64, k: f64 },
}

impl ModalitySpec {
    pub fn build(&self) -> Result<ModalityLink, SolverError> {
        match *self {
            ModalitySpec::Channel { payload_bits, kappa, bits, snr, blocklength } => {
                ModalityLink::from_channel(payload_bits, kappa, bits, LinkParams::new(snr, blocklength)?)
            }
            ModalitySpec::Constants { payload_bits, a, b, k } => ModalityLink::from_constants(payload_bits, a, b, k),
        }
    }
}

/// A solver instance as read by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverInstance {
    pub delta0: f64,
    pub links: Vec<ModalitySpec>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

impl SolverInstance {
    pub fn build_links(&self) -> Result<Vec<ModalityLink>, SolverError> {
        self.links
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.build().map_err(|e| match e {
                    SolverError::Link { detail, .. } => SolverError::Link { index: i, detail },
                    other => other,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSolution {
    pub tau_star: f64,
    pub rates: Vec<f64>,
    pub eps: Vec<f64>,
    /// Σ a⁽ᵐ⁾ε⁽ᵐ⁾ at the returned rates.
    pub gamma_pred: f64,
    /// Common transmission delay D⁽ᵐ⁾/R⁽ᵐ⁾ in channel uses.
    pub delay: f64,
    pub iterations: usize,
    pub bracket: [f64; 2],
    /// True when f stays non-positive up to the bracket end, so the budget
    /// does not bind and τ* is the largest admissible value.
    pub capped: bool,
}

fn check_links(links: &[ModalityLink], delta0: f64) -> Result<(), SolverError> {
    if links.is_empty() {
        return Err(SolverError::Empty);
    }
    if !(delta0.is_finite() && delta0 > 0.0) {
        return Err(SolverError::Delta0(delta0));
    }
    for (i, l) in links.iter().enumerate() {
        l.check(i)?;
    }
    Ok(())
}

fn f_unchecked(links: &[ModalityLink], delta0: f64, tau: f64) -> f64 {
    links.iter().map(|l| l.term.distortion(l.payload_bits * tau)).sum::<f64>() - delta0
}

/// f(τ) = Σ a⁽ᵐ⁾/(1 + exp[k⁽ᵐ⁾(b⁽ᵐ⁾ − D⁽ᵐ⁾τ)]) − Δ₀.
pub fn f_tau(links: &[ModalityLink], delta0: f64, tau: f64) -> Result<f64, SolverError> {
    check_links(links, delta0)?;
    Ok(f_unchecked(links, delta0, tau))
}

/// Checks Δ₀ ≤ ½Σa and f(0) < 0, and returns the bisection bracket
/// [0, min_m b⁽ᵐ⁾/D⁽ᵐ⁾].
pub fn feasibility_check(links: &[ModalityLink], delta0: f64) -> Result<[f64; 2], SolverError> {
    check_links(links, delta0)?;
    let half_sum_a = 0.5 * links.iter().map(|l| l.term.a).sum::<f64>();
    if delta0 > half_sum_a {
        return Err(SolverError::Infeasible(Infeasibility::BudgetTooLarge { delta0, half_sum_a }));
    }
    let upper = links.iter().map(|l| l.term.b / l.payload_bits).fold(f64::INFINITY, f64::min);
    if !(upper > 0.0) {
        return Err(SolverError::Infeasible(Infeasibility::NoRateRange { upper }));
    }
    let f0 = f_unchecked(links, delta0, 0.0);
    if f0 >= 0.0 {
        return Err(SolverError::Infeasible(Infeasibility::BudgetTooSmall {
            delta0,
            distortion_at_zero_rate: f0 + delta0,
        }));
    }
    Ok([0.0, upper])
}

/// Bisection on f over the feasibility bracket until its width is ≤ `tol`.
pub fn solve_bisection(
    links: &[ModalityLink],
    delta0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<RateSolution, SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::Tolerance(tol));
    }
    let bracket = feasibility_check(links, delta0)?;
    let [mut lo, mut hi] = bracket;
    let f_lo = f_unchecked(links, delta0, lo);
    let f_hi = f_unchecked(links, delta0, hi);
    if f_lo > 0.0 {
        return Err(SolverError::Bracket { lo, hi, f_lo, f_hi });
    }

    let mut iterations = 0;
    let (tau, capped) = if f_hi <= 0.0 {
        (hi, true)
    } else {
        let mut exact = None;
        while hi - lo > tol {
            if iterations == max_iter {
                return Err(SolverError::MaxIter { iterations, lo, hi });
            }
            let mid = 0.5 * (lo + hi);
            let f_mid = f_unchecked(links, delta0, mid);
            iterations += 1;
            if f_mid == 0.0 {
                exact = Some(mid);
                break;
            }
            if f_mid < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (exact.unwrap_or(0.5 * (lo + hi)), false)
    };
    Ok(solution_at(links, tau, iterations, bracket, capped))
}

fn solution_at(links: &[ModalityLink], tau: f64, iterations: usize, bracket: [f64; 2], capped: bool) -> RateSolution {
    let rates: Vec<f64> = links.iter().map(|l| l.payload_bits * tau).collect();
    let eps: Vec<f64> = links.iter().zip(&rates).map(|(l, &r)| l.eps(r)).collect();
    let gamma_pred = links.iter().zip(&rates).map(|(l, &r)| l.term.distortion(r)).sum();
    RateSolution { tau_star: tau, rates, eps, gamma_pred, delay: 1.0 / tau, iterations, bracket, capped }
}

/// R_fixed = max_m D⁽ᵐ⁾ / max_m (D⁽ᵐ⁾/R⁽ᵐ⁾): the uniform rate with the same
/// end-to-end delay as the given per-modality rates.
pub fn fixed_rate_baseline(payload_bits: &[f64], rates: &[f64]) -> Result<f64, SolverError> {
    if payload_bits.is_empty() || payload_bits.len() != rates.len() {
        return Err(SolverError::Empty);
    }
    if payload_bits.iter().chain(rates).any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(SolverError::NonPositive);
    }
    let d_max = payload_bits.iter().copied().fold(0.0, f64::max);
    let delay = payload_bits.iter().zip(rates).map(|(d, r)| d / r).fold(0.0, f64::max);
    Ok(d_max / delay)
}

pub const AUDIT_STEP: f64 = 1e-4;
/// Second differences below this are counted as convexity violations.
pub const AUDIT_FLOOR: f64 = -1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditPoint {
    pub modality: usize,
    pub fraction: f64,
    pub rate: f64,
    pub second_difference: f64,
    pub analytic: f64,
    /// R ≤ b, where the constraint is claimed convex.
    pub in_region: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityAudit {
    pub points: Vec<AuditPoint>,
    /// In-region points whose second difference falls below [`AUDIT_FLOOR`].
    pub violations: usize,
    /// Points where numeric and analytic curvature clearly disagree in sign.
    pub sign_mismatches: usize,
    /// Out-of-region points with negative curvature (expected, reported).
    pub outside_concave: usize,
    pub max_cross_partial: f64,
    pub passed: bool,
}

/// Audits the convexity of g(R) = Σ a⁽ᵐ⁾/(1 + exp[k⁽ᵐ⁾(b⁽ᵐ⁾ − R⁽ᵐ⁾)]) at
/// R⁽ᵐ⁾ = fraction·b⁽ᵐ⁾ for every grid fraction.
pub fn convexity_audit(links: &[ModalityLink], fractions: &[f64]) -> Result<ConvexityAudit, SolverError> {
    check_links(links, 1.0)?;
    let h = AUDIT_STEP;
    let g = |r: &[f64]| -> f64 { links.iter().zip(r).map(|(l, &x)| l.term.distortion(x)).sum() };

    let mut points = Vec::with_capacity(fractions.len() * links.len());
    let mut max_cross: f64 = 0.0;
    for &frac in fractions {
        let base: Vec<f64> = links.iter().map(|l| frac * l.term.b).collect();
        let g0 = g(&base);
        for (m, l) in links.iter().enumerate() {
            let mut r = base.clone();
            r[m] = base[m] + h;
            let gp = g(&r);
            r[m] = base[m] - h;
            let gm = g(&r);
            points.push(AuditPoint {
                modality: m,
                fraction: frac,
                rate: base[m],
                second_difference: (gp - 2.0 * g0 + gm) / (h * h),
                analytic: l.term.second_derivative(base[m]),
                in_region: base[m] <= l.term.b,
            });
            for n in (m + 1)..links.len() {
                let mut r = base.clone();
                r[m] += h;
                r[n] += h;
                let gmn = g(&r);
                r[n] = base[n];
                let gm_only = g(&r);
                r[m] = base[m];
                r[n] += h;
                let gn_only = g(&r);
                max_cross = max_cross.max(((gmn - gm_only - gn_only + g0) / (h * h)).abs());
            }
        }
    }
    let violations = points.iter().filter(|p| p.in_region && p.second_difference < AUDIT_FLOOR).count();
    let sign_mismatches = points
        .iter()
        .filter(|p| p.analytic.abs() > 1e-5 && p.analytic.signum() != p.second_difference.signum())
        .count();
    let outside_concave = points.iter().filter(|p| !p.in_region && p.second_difference < 0.0).count();
    let passed = violations == 0 && sign_mismatches == 0 && max_cross <= 1e-6;
    Ok(ConvexityAudit { points, violations, sign_mismatches, outside_concave, max_cross_partial: max_cross, passed })
}
