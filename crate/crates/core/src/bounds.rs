//! Linear bound propagation over [`CompGraph`]s.
//!
//! Bounds are computed by backward substitution: starting from the identity
//! at a target node, coefficient matrices are pushed through the graph in
//! reverse topological order until they land on the modality inputs. ReLU
//! nodes are replaced by a pair of lines valid on the pre-activation box,
//! and those boxes are themselves obtained by running the same backward pass
//! from the ReLU's parent and concretizing it against the perturbation ball.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::graph::{CompGraph, GraphError, NodeKind, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("unsupported norm order '{0}' (expected 1, 2 or inf)")]
    UnsupportedNorm(String),
    #[error("dual maximizer is undefined for the zero vector")]
    ZeroVector,
    #[error("invalid interval: lower {lower} exceeds upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },
    #[error("radius {radius} for modality {modality} must be finite and non-negative")]
    InvalidRadius { modality: usize, radius: f64 },
    #[error("ball has {radii} radii but the bounds have {modalities} modalities")]
    ModalityMismatch { radii: usize, modalities: usize },
    #[error("center has dimension {got}, expected {expected}")]
    CenterDim { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Norm order p of the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormOrder {
    One,
    Two,
    #[default]
    Inf,
}

impl NormOrder {
    /// Hölder conjugate q with 1/p + 1/q = 1.
    pub fn dual(self) -> NormOrder {
        match self {
            NormOrder::One => NormOrder::Inf,
            NormOrder::Two => NormOrder::Two,
            NormOrder::Inf => NormOrder::One,
        }
    }

    pub fn norm<'a>(self, v: impl IntoIterator<Item = &'a f64>) -> f64 {
        let it = v.into_iter();
        match self {
            NormOrder::One => it.map(|x| x.abs()).sum(),
            NormOrder::Two => it.map(|x| x * x).sum::<f64>().sqrt(),
            NormOrder::Inf => it.fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormOrder::One => "1",
            NormOrder::Two => "2",
            NormOrder::Inf => "inf",
        })
    }
}

impl FromStr for NormOrder {
    type Err = BoundsError;

    fn from_str(s: &str) -> Result<Self, BoundsError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(NormOrder::One),
            "2" | "l2" => Ok(NormOrder::Two),
            "inf" | "infinity" | "linf" | "∞" => Ok(NormOrder::Inf),
            other => Err(BoundsError::UnsupportedNorm(other.to_string())),
        }
    }
}

impl Serialize for NormOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NormOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let s = match v {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => other.to_string(),
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// ‖v‖_q where q is the Hölder conjugate of `p`.
pub fn dual_norm(v: &[f64], p: NormOrder) -> f64 {
    p.dual().norm(v)
}

/// A unit-p-norm vector x̃ attaining v·x̃ = ‖v‖_q.
///
/// p = 2 gives v/‖v‖₂, p = ∞ the sign corner (zeros map to +1), and p = 1
/// the signed basis vector at the first index of maximal |vᵢ|.
pub fn dual_maximizer(v: &[f64], p: NormOrder) -> Result<Vec<f64>, BoundsError> {
    if v.iter().all(|&x| x == 0.0) {
        return Err(BoundsError::ZeroVector);
    }
    Ok(match p {
        NormOrder::Two => {
            let n = NormOrder::Two.norm(v);
            v.iter().map(|x| x / n).collect()
        }
        NormOrder::Inf => v.iter().map(|&x| if x < 0.0 { -1.0 } else { 1.0 }).collect(),
        NormOrder::One => {
            let mut best = 0;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[best].abs() {
                    best = i;
                }
            }
            let mut out = vec![0.0; v.len()];
            out[best] = v[best].signum();
            out
        }
    })
}

/// Upper and lower lines bounding ReLU on a pre-activation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluRelaxation {
    pub upper_slope: f64,
    pub upper_intercept: f64,
    pub lower_slope: f64,
    pub lower_intercept: f64,
}

impl ReluRelaxation {
    pub fn upper(&self, x: f64) -> f64 {
        self.upper_slope * x + self.upper_intercept
    }

    pub fn lower(&self, x: f64) -> f64 {
        self.lower_slope * x + self.lower_intercept
    }
}

pub fn relax_relu(l: f64, u: f64) -> Result<ReluRelaxation, BoundsError> {
    if l.is_nan() || u.is_nan() || l > u {
        return Err(BoundsError::InvalidInterval { lower: l, upper: u });
    }
    Ok(relax_unchecked(l, u))
}

fn relax_unchecked(l: f64, u: f64) -> ReluRelaxation {
    if u <= 0.0 {
        ReluRelaxation { upper_slope: 0.0, upper_intercept: 0.0, lower_slope: 0.0, lower_intercept: 0.0 }
    } else if l >= 0.0 {
        ReluRelaxation { upper_slope: 1.0, upper_intercept: 0.0, lower_slope: 1.0, lower_intercept: 0.0 }
    } else {
        let slope = u / (u - l);
        ReluRelaxation {
            upper_slope: slope,
            upper_intercept: -l * slope,
            lower_slope: if u >= -l { 1.0 } else { 0.0 },
            lower_intercept: 0.0,
        }
    }
}

/// Per-modality ℒ_p ball around a center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBall {
    pub p: NormOrder,
    pub radii: Vec<f64>,
}

impl PerturbationBall {
    pub fn new(p: NormOrder, radii: Vec<f64>) -> Result<Self, BoundsError> {
        for (m, &r) in radii.iter().enumerate() {
            if !r.is_finite() || r < 0.0 {
                return Err(BoundsError::InvalidRadius { modality: m, radius: r });
            }
        }
        Ok(Self { p, radii })
    }

    pub fn uniform(p: NormOrder, radius: f64, modalities: usize) -> Result<Self, BoundsError> {
        Self::new(p, vec![radius; modalities])
    }

    pub fn q(&self) -> NormOrder {
        self.p.dual()
    }

    /// Same norm, radii multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self, BoundsError> {
        Self::new(self.p, self.radii.iter().map(|r| r * alpha).collect())
    }
}

/// Affine lower/upper bounds of a node in terms of the concatenated input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
    pub lower_bias: Array1<f64>,
    pub upper_bias: Array1<f64>,
    /// Column range of each modality block.
    pub blocks: Vec<Range<usize>>,
}

impl LinearBounds {
    pub fn output_dim(&self) -> usize {
        self.upper.nrows()
    }

    pub fn num_modalities(&self) -> usize {
        self.blocks.len()
    }

    /// Identity bounds of the concatenated input itself.
    pub fn identity(blocks: Vec<Range<usize>>) -> Self {
        let d = blocks.last().map_or(0, |b| b.end);
        Self {
            lower: Array2::eye(d),
            upper: Array2::eye(d),
            lower_bias: Array1::zeros(d),
            upper_bias: Array1::zeros(d),
            blocks,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.lower == self.upper && self.lower_bias == self.upper_bias
    }

    fn check(&self, center: &[f64], ball: &PerturbationBall) -> Result<(), BoundsError> {
        if ball.radii.len() != self.blocks.len() {
            return Err(BoundsError::ModalityMismatch { radii: ball.radii.len(), modalities: self.blocks.len() });
        }
        let d = self.upper.ncols();
        if center.len() != d {
            return Err(BoundsError::CenterDim { expected: d, got: center.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64, slack: f64) -> bool {
        x >= self.lower - slack && x <= self.upper + slack
    }
}

/// Noise-only robustness bound γ with its per-modality weights κ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub gamma: f64,
    pub kappa: Vec<f64>,
    pub p: NormOrder,
    pub radii: Vec<f64>,
    /// Certified output box, present when a center was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "box")]
    pub output_box: Option<Vec<Interval>>,
}

fn concat_center(center: &[Tensor]) -> Vec<f64> {
    center.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Pre-activation relaxations of every ReLU node, indexed by node.
type Relaxations = Vec<Option<Vec<ReluRelaxation>>>;

/// Backward substitution from `target` down to the inputs.
fn backsubstitute(graph: &CompGraph, target: usize, relax: &Relaxations) -> LinearBounds {
    let n = graph.len();
    let rows = graph.dim(target);
    let cols = graph.input_dim();
    let blocks = graph.blocks();

    let mut lam_u: Vec<Option<Array2<f64>>> = vec![None; n];
    let mut lam_l: Vec<Option<Array2<f64>>> = vec![None; n];
    lam_u[target] = Some(Array2::eye(rows));
    lam_l[target] = Some(Array2::eye(rows));
    let mut bias_u = Array1::<f64>::zeros(rows);
    let mut bias_l = Array1::<f64>::zeros(rows);
    let mut a_u = Array2::<f64>::zeros((rows, cols));
    let mut a_l = Array2::<f64>::zeros((rows, cols));

    fn push(slot: &mut Option<Array2<f64>>, m: Array2<f64>) {
        match slot {
            Some(acc) => *acc += &m,
            None => *slot = Some(m),
        }
    }

    for i in (0..=target).rev() {
        let (Some(lu), Some(ll)) = (lam_u[i].take(), lam_l[i].take()) else { continue };
        let ps = graph.parents(i);
        match &graph.nodes()[i].kind {
            NodeKind::Input { modality, .. } => {
                let b = blocks[*modality].clone();
                a_u.slice_mut(s![.., b.clone()]).scaled_add(1.0, &lu);
                a_l.slice_mut(s![.., b]).scaled_add(1.0, &ll);
            }
            NodeKind::Affine { weight, bias } => {
                bias_u += &lu.dot(bias);
                bias_l += &ll.dot(bias);
                push(&mut lam_u[ps[0]], lu.dot(weight));
                push(&mut lam_l[ps[0]], ll.dot(weight));
            }
            NodeKind::Scale { factor } => {
                push(&mut lam_u[ps[0]], lu * *factor);
                push(&mut lam_l[ps[0]], ll * *factor);
            }
            NodeKind::Add => {
                for &p in ps {
                    push(&mut lam_u[p], lu.clone());
                    push(&mut lam_l[p], ll.clone());
                }
            }
            NodeKind::Concat => {
                let mut off = 0;
                for &p in ps {
                    let d = graph.dim(p);
                    push(&mut lam_u[p], lu.slice(s![.., off..off + d]).to_owned());
                    push(&mut lam_l[p], ll.slice(s![.., off..off + d]).to_owned());
                    off += d;
                }
            }
            NodeKind::Relu => {
                let r = relax[i].as_ref().expect("relu relaxed before use");
                let mut nu = Array2::<f64>::zeros(lu.raw_dim());
                let mut nl = Array2::<f64>::zeros(ll.raw_dim());
                for (k, rk) in r.iter().enumerate() {
                    for row in 0..rows {
                        // Upper bound: positive coefficients take the upper line.
                        let c = lu[[row, k]];
                        let (slope, icpt) = if c >= 0.0 {
                            (rk.upper_slope, rk.upper_intercept)
                        } else {
                            (rk.lower_slope, rk.lower_intercept)
                        };
                        nu[[row, k]] = c * slope;
                        bias_u[row] += c * icpt;

                        let c = ll[[row, k]];
                        let (slope, icpt) = if c >= 0.0 {
                            (rk.lower_slope, rk.lower_intercept)
                        } else {
                            (rk.upper_slope, rk.upper_intercept)
                        };
                        nl[[row, k]] = c * slope;
                        bias_l[row] += c * icpt;
                    }
                }
                push(&mut lam_u[ps[0]], nu);
                push(&mut lam_l[ps[0]], nl);
            }
        }
    }

    LinearBounds { lower: a_l, upper: a_u, lower_bias: bias_l, upper_bias: bias_u, blocks }
}

fn concretize_flat(bounds: &LinearBounds, center: &[f64], ball: &PerturbationBall) -> Vec<Interval> {
    let c = ArrayView1::from(center);
    let q = ball.q();
    (0..bounds.output_dim())
        .map(|r| {
            let up = bounds.upper.row(r);
            let lo = bounds.lower.row(r);
            let mut upper = up.dot(&c) + bounds.upper_bias[r];
            let mut lower = lo.dot(&c) + bounds.lower_bias[r];
            for (m, b) in bounds.blocks.iter().enumerate() {
                let delta = ball.radii[m];
                if delta > 0.0 {
                    upper += delta * q.norm(up.slice(s![b.clone()]));
                    lower -= delta * q.norm(lo.slice(s![b.clone()]));
                }
            }
            Interval { lower, upper }
        })
        .collect()
}

/// Linear bounds of the output node over the ball around `center`.
pub fn propagate_bounds(
    graph: &CompGraph,
    center: &[Tensor],
    ball: &PerturbationBall,
) -> Result<LinearBounds, BoundsError> {
    propagate_to(graph, graph.output_index(), center, ball)
}

/// Linear bounds of an arbitrary node.
pub fn propagate_to(
    graph: &CompGraph,
    target: usize,
    center: &[Tensor],
    ball: &PerturbationBall,
) -> Result<LinearBounds, BoundsError> {
    if ball.radii.len() != graph.num_modalities() {
        return Err(BoundsError::ModalityMismatch { radii: ball.radii.len(), modalities: graph.num_modalities() });
    }
    // Validates modality count and dims against the partition.
    graph.evaluate(center)?;
    let flat = concat_center(center);

    let mut relax: Relaxations = vec![None; graph.len()];
    let mut pre_boxes: Vec<Option<Vec<Interval>>> = vec![None; graph.len()];
    for i in 0..=target {
        if !matches!(graph.nodes()[i].kind, NodeKind::Relu) {
            continue;
        }
        let p = graph.parents(i)[0];
        if pre_boxes[p].is_none() {
            let b = backsubstitute(graph, p, &relax);
            pre_boxes[p] = Some(concretize_flat(&b, &flat, ball));
        }
        let boxes = pre_boxes[p].as_ref().expect("just computed");
        relax[i] = Some(
            boxes
                .iter()
                .map(|iv| {
                    // Rounding can leave lower a hair above upper on a degenerate box.
                    let (l, u) = if iv.lower <= iv.upper { (iv.lower, iv.upper) } else { (iv.upper, iv.lower) };
                    relax_unchecked(l, u)
                })
                .collect(),
        );
    }
    Ok(backsubstitute(graph, target, &relax))
}

/// Per-coordinate certified range: row·center + offset ± Σ_m Δ⁽ᵐ⁾‖row block‖_q.
pub fn concretize(bounds: &LinearBounds, center: &[Tensor], ball: &PerturbationBall) -> Result<Vec<Interval>, BoundsError> {
    let flat = concat_center(center);
    bounds.check(&flat, ball)?;
    Ok(concretize_flat(bounds, &flat, ball))
}

/// κ⁽ᵐ⁾ = max over output rows of ‖A_U row block‖_q + ‖A_L row block‖_q,
/// and γ = Σ_m Δ⁽ᵐ⁾ κ⁽ᵐ⁾.
pub fn robustness_bound(bounds: &LinearBounds, ball: &PerturbationBall) -> Result<RobustnessReport, BoundsError> {
    if ball.radii.len() != bounds.num_modalities() {
        return Err(BoundsError::ModalityMismatch { radii: ball.radii.len(), modalities: bounds.num_modalities() });
    }
    let kappa = semantic_importance(bounds, ball.p);
    let gamma = kappa.iter().zip(&ball.radii).map(|(k, d)| k * d).sum();
    Ok(RobustnessReport { gamma, kappa, p: ball.p, radii: ball.radii.clone(), output_box: None })
}

/// κ⁽ᵐ⁾ for every modality; depends only on the bound matrices and q.
pub fn semantic_importance(bounds: &LinearBounds, p: NormOrder) -> Vec<f64> {
    let q = p.dual();
    bounds
        .blocks
        .iter()
        .map(|b| {
            bounds
                .upper
                .axis_iter(Axis(0))
                .zip(bounds.lower.axis_iter(Axis(0)))
                .map(|(u, l)| q.norm(u.slice(s![b.clone()])) + q.norm(l.slice(s![b.clone()])))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Propagates, reduces to γ/κ and attaches the certified output box.
pub fn certify(graph: &CompGraph, center: &[Tensor], ball: &PerturbationBall) -> Result<RobustnessReport, BoundsError> {
    let bounds = propagate_bounds(graph, center, ball)?;
    let mut report = robustness_bound(&bounds, ball)?;
    report.output_box = Some(concretize(&bounds, center, ball)?);
    Ok(report)
}
