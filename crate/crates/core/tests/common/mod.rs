//! Independent reference implementations and random instance generators
//! shared by the integration and acceptance tests. Nothing here calls into
//! the code under test except to build graphs and evaluate them.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use semrate::bounds::NormOrder;
use semrate::graph::{CompGraph, GraphSpec, ModalityInput, NodeKind, NodeSpec, Tensor};

pub const LOG2_E: f64 = std::f64::consts::LOG2_E;

// ---------------------------------------------------------------- graphs

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.gen_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * rng.gen_range(-1.0..1.0))
}

/// Random fusion graph: per-modality encoders (affine, optionally ReLU),
/// concatenation, then `depth` ReLU layers and a final affine read-out.
/// Input dimension is at most 12.
pub fn random_relu_graph<R: Rng>(rng: &mut R, depth: usize) -> CompGraph {
    let m = rng.gen_range(1..=3);
    let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=12 / m)).collect();
    let mut nodes = Vec::new();
    let mut modalities = Vec::new();
    let mut encoded = Vec::new();
    let mut encoded_dim = 0;
    for (i, &d) in dims.iter().enumerate() {
        let input = format!("u{i}");
        nodes.push(NodeSpec::new(&input, NodeKind::Input { modality: i, dim: d }, &[]));
        modalities.push(ModalityInput { input: input.clone(), dim: d });
        let h = rng.gen_range(1..=4);
        let enc = format!("enc{i}");
        nodes.push(NodeSpec::new(
            &enc,
            NodeKind::affine(random_matrix(rng, h, d, 1.0), random_vector(rng, h, 0.5)),
            &[&input],
        ));
        encoded_dim += h;
        encoded.push(enc);
    }
    let refs: Vec<&str> = encoded.iter().map(String::as_str).collect();
    nodes.push(NodeSpec::new("fused", NodeKind::Concat, &refs));
    let mut prev = "fused".to_string();
    let mut width = encoded_dim;
    for l in 0..depth {
        let h = rng.gen_range(2..=8);
        let lin = format!("lin{l}");
        nodes.push(NodeSpec::new(
            &lin,
            NodeKind::affine(random_matrix(rng, h, width, 1.0), random_vector(rng, h, 0.5)),
            &[&prev],
        ));
        let act = format!("relu{l}");
        nodes.push(NodeSpec::new(&act, NodeKind::Relu, &[&lin]));
        prev = act;
        width = h;
    }
    let out_dim = rng.gen_range(1..=2);
    nodes.push(NodeSpec::new(
        "y",
        NodeKind::affine(random_matrix(rng, out_dim, width, 1.0), random_vector(rng, out_dim, 0.5)),
        &[&prev],
    ));
    CompGraph::new(GraphSpec { nodes, output: "y".into(), modalities }).expect("generated graph is valid")
}

/// Single affine map from M concatenated modalities, returned with its weight.
pub fn random_affine_graph<R: Rng>(rng: &mut R) -> (CompGraph, Array2<f64>) {
    let m = rng.gen_range(1..=4);
    let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=4)).collect();
    let total: usize = dims.iter().sum();
    let out = rng.gen_range(1..=4);
    let w = random_matrix(rng, out, total, 2.0);
    let mut nodes = Vec::new();
    let mut modalities = Vec::new();
    let names: Vec<String> = (0..m).map(|i| format!("u{i}")).collect();
    for (i, &d) in dims.iter().enumerate() {
        nodes.push(NodeSpec::new(&names[i], NodeKind::Input { modality: i, dim: d }, &[]));
        modalities.push(ModalityInput { input: names[i].clone(), dim: d });
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    nodes.push(NodeSpec::new("cat", NodeKind::Concat, &refs));
    nodes.push(NodeSpec::new("y", NodeKind::affine(w.clone(), random_vector(rng, out, 1.0)), &["cat"]));
    let g = CompGraph::new(GraphSpec { nodes, output: "y".into(), modalities }).expect("valid");
    (g, w)
}

pub fn random_center<R: Rng>(rng: &mut R, graph: &CompGraph) -> Vec<Tensor> {
    graph
        .modality_dims()
        .iter()
        .map(|&d| Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

// ---------------------------------------------------------------- norms

pub fn p_norm(v: &[f64], p: NormOrder) -> f64 {
    match p {
        NormOrder::One => v.iter().map(|x| x.abs()).sum(),
        NormOrder::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormOrder::Inf => v.iter().fold(0.0, |a, x| a.max(x.abs())),
    }
}

pub fn dual_of(p: NormOrder) -> NormOrder {
    match p {
        NormOrder::One => NormOrder::Inf,
        NormOrder::Two => NormOrder::Two,
        NormOrder::Inf => NormOrder::One,
    }
}

/// Uniform sample from the ℒ_p ball of radius r in d dimensions.
pub fn sample_ball<R: Rng>(rng: &mut R, d: usize, p: NormOrder, r: f64) -> Vec<f64> {
    match p {
        NormOrder::Inf => (0..d).map(|_| r * rng.gen_range(-1.0..=1.0)).collect(),
        NormOrder::Two => {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = p_norm(&g, NormOrder::Two).max(f64::MIN_POSITIVE);
            let s = r * rng.gen::<f64>().powf(1.0 / d as f64);
            g.iter().map(|x| x * s / n).collect()
        }
        NormOrder::One => {
            // Exponential spacings give a uniform point of the simplex.
            let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            (0..d)
                .map(|i| {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    sign * r * e[i] / total
                })
                .collect()
        }
    }
}

/// Extreme points of the ball: the 2ᵈ box vertices for ℒ∞, ±r·eᵢ otherwise.
pub fn ball_corners(d: usize, p: NormOrder, r: f64) -> Vec<Vec<f64>> {
    match p {
        NormOrder::Inf => (0..1usize << d)
            .map(|mask| (0..d).map(|i| if mask >> i & 1 == 1 { r } else { -r }).collect())
            .collect(),
        _ => (0..2 * d)
            .map(|k| {
                let mut v = vec![0.0; d];
                v[k / 2] = if k % 2 == 0 { r } else { -r };
                v
            })
            .collect(),
    }
}

/// Sampled points of the product ball, each including its corner set when
/// `with_corners`, as concatenated inputs.
pub fn product_ball_points<R: Rng>(
    rng: &mut R,
    center: &[Tensor],
    p: NormOrder,
    radii: &[f64],
    samples: usize,
    with_corners: bool,
) -> Vec<Vec<f64>> {
    let flat_center: Vec<f64> = center.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut x = Vec::with_capacity(flat_center.len());
        for (t, &r) in center.iter().zip(radii) {
            x.extend(sample_ball(rng, t.len(), p, r).into_iter().zip(t.data()).map(|(d, c)| c + d));
        }
        out.push(x);
    }
    if with_corners {
        // Cartesian product of per-modality corner sets.
        let per: Vec<Vec<Vec<f64>>> = center.iter().zip(radii).map(|(t, &r)| ball_corners(t.len(), p, r)).collect();
        let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
        for (m, corners) in per.iter().enumerate() {
            let mut next = Vec::with_capacity(combos.len() * corners.len());
            for prefix in &combos {
                for c in corners {
                    let mut v = prefix.clone();
                    v.extend(c.iter().zip(center[m].data()).map(|(d, x)| x + d));
                    next.push(v);
                }
            }
            combos = next;
        }
        out.extend(combos);
    }
    out
}

// ------------------------------------------------------- link and solver

pub fn oracle_capacity(phi: f64) -> f64 {
    0.5 * (1.0 + phi).log2()
}

pub fn oracle_dispersion(phi: f64) -> f64 {
    1.0 - 1.0 / ((1.0 + phi) * (1.0 + phi))
}

/// (b, k) of the logistic error curve at SNR φ and blocklength L.
pub fn oracle_logistic(phi: f64, l: f64) -> (f64, f64) {
    let b = oracle_capacity(phi) + l.log2() / l;
    let k = (8.0 * l / (std::f64::consts::PI * oracle_dispersion(phi) * LOG2_E * LOG2_E)).sqrt();
    (b, k)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleLink {
    pub d: f64,
    pub a: f64,
    pub b: f64,
    pub k: f64,
}

pub fn oracle_f(links: &[OracleLink], delta0: f64, tau: f64) -> f64 {
    links.iter().map(|l| l.a / (1.0 + (l.k * (l.b - l.d * tau)).exp())).sum::<f64>() - delta0
}

/// Smallest point of the 10⁻⁸ grid on [0, hi] where f ≥ 0, found by nested
/// scans (f is increasing in τ). Returns `hi` when f < 0 on the whole grid.
pub fn oracle_grid_tau(links: &[OracleLink], delta0: f64, hi: f64) -> f64 {
    const FINEST: f64 = 1e-8;
    let mut lo: f64 = 0.0;
    let mut step: f64 = 1e-2;
    let mut end: f64 = hi;
    while step >= FINEST * 0.5 {
        let mut t = lo;
        let mut found = None;
        loop {
            let tc = t.min(end);
            if oracle_f(links, delta0, tc) >= 0.0 {
                found = Some(tc);
                break;
            }
            if tc >= end {
                break;
            }
            t += step;
        }
        match found {
            None => return hi,
            Some(t) => {
                lo = (t - step).max(0.0);
                end = t;
            }
        }
        step /= 10.0;
    }
    end
}

// --------------------------------------------------------- quantization

/// Mean of the flipped-bit weight sum Σ 2⁻ʲ over all C(B, K) error patterns.
pub fn oracle_enumerated_distortion(k: u32, bits: u32) -> f64 {
    let mut total = 0.0;
    let mut count = 0u64;
    for mask in 0u32..(1 << bits) {
        if mask.count_ones() != k {
            continue;
        }
        total += (0..bits).filter(|j| mask >> j & 1 == 1).map(|j| 2f64.powi(-(j as i32 + 1))).sum::<f64>();
        count += 1;
    }
    total / count as f64
}

// ---------------------------------------------------------- derivatives

pub fn central_second_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

// ------------------------------------------------------------- statistics

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean with the n − 1 variance.
pub fn std_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (var / xs.len() as f64).sqrt()
}
