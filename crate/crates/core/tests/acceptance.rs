//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semrate::bounds::{certify, dual_maximizer, dual_norm, NormOrder, PerturbationBall};
use semrate::channel::{stream_rng, transmit, Fading, Purpose};
use semrate::fbl::LinkParams;
use semrate::graph::Tensor;
use semrate::pipeline::{Experiment, ExperimentConfig, Scheme, SweepResult, TrialResult};
use semrate::quant::{distortion_bound_from_eps, expected_distortion};
use semrate::ratesolver::{convexity_audit, f_tau, solve_bisection, ModalityLink, AUDIT_FLOOR, DEFAULT_MAX_ITER, DEFAULT_TOL};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The reference toy configuration: three modalities with payloads 16:128:64
/// bits, 0–18 dB in 2 dB steps, 1000 trials per point.
fn reference_config() -> ExperimentConfig {
    ExperimentConfig {
        trials: 1000,
        schemes: vec![Scheme::Adaptive, Scheme::Fixed(None), Scheme::ErrorFree],
        ..ExperimentConfig::default()
    }
}

struct Reference {
    exp: Experiment,
    sweep: SweepResult,
}

impl Reference {
    fn rows(&self, scheme: Scheme, snr_db: f64) -> Vec<&TrialResult> {
        self.sweep.trials.iter().filter(|t| t.scheme == scheme && t.snr_db == snr_db).collect()
    }
}

const NORMS: [NormOrder; 3] = [NormOrder::Inf, NormOrder::Two, NormOrder::One];

fn bound_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let graphs = 24;
    let (mut checked, mut violations, mut max_dim) = (0usize, 0usize, 0usize);
    for i in 0..graphs {
        let g = random_relu_graph(&mut rng, 1 + i % 3);
        max_dim = max_dim.max(g.input_dim());
        let center = random_center(&mut rng, &g);
        let p = NORMS[i % 3];
        let radii: Vec<f64> = (0..g.num_modalities()).map(|_| rng.gen_range(0.01..0.5)).collect();
        let ball = PerturbationBall::new(p, radii.clone()).unwrap();
        let boxes = certify(&g, &center, &ball).unwrap().output_box.unwrap();
        for x in product_ball_points(&mut rng, &center, p, &radii, 100_000, true) {
            let y = g.forward_flat(&x).unwrap();
            checked += 1;
            if boxes.iter().zip(&y).any(|(iv, v)| !iv.contains(*v, 1e-9)) {
                violations += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && elapsed <= Duration::from_secs(120) && max_dim <= 12,
        format!("{graphs} graphs (input dim <= {max_dim}), {checked} points, {violations} violations, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn affine_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (g, w) = random_affine_graph(&mut rng);
        let center = random_center(&mut rng, &g);
        for p in NORMS {
            let radii: Vec<f64> = (0..g.num_modalities()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ball = PerturbationBall::new(p, radii.clone()).unwrap();
            let boxes = certify(&g, &center, &ball).unwrap().output_box.unwrap();
            for (row, iv) in boxes.iter().enumerate() {
                let expected: f64 = g
                    .blocks()
                    .iter()
                    .zip(&radii)
                    .map(|(b, r)| 2.0 * r * p_norm(&b.clone().map(|c| w[[row, c]]).collect::<Vec<_>>(), dual_of(p)))
                    .sum();
                worst = worst.max((iv.width() - expected).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("100 graphs x 3 norms, max |width - 2 sum D ||W||_q| = {worst:.2e}"))
}

fn dual_norm_attainment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let (mut gap, mut unit): (f64, f64) = (0.0, 0.0);
    for i in 0..10_000 {
        let d = rng.gen_range(1..=32);
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = NORMS[i % 3];
        let x = dual_maximizer(&v, p).unwrap();
        let dot: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
        gap = gap.max((dot - p_norm(&v, dual_of(p))).abs().max((dual_norm(&v, p) - dot).abs()));
        unit = unit.max((p_norm(&x, p) - 1.0).abs());
    }
    outcome(gap <= 1e-9 && unit <= 1e-9, format!("10^4 vectors, max |v.x - ||v||_q| = {gap:.2e}, max | ||x||_p - 1 | = {unit:.2e}"))
}

fn bit_error_distortion() -> Outcome {
    let mut worst: f64 = 0.0;
    for bits in 1..=12 {
        for k in 1..=bits {
            worst = worst.max((oracle_enumerated_distortion(k, bits) - expected_distortion(k, bits).unwrap()).abs());
        }
    }
    let bits = 8u32;
    let n = 1_000_000;
    let mut sim = Vec::new();
    let mut all_within = true;
    for (i, eps) in [0.01, 0.1, 0.5].into_iter().enumerate() {
        let mut rng = stream_rng(1004, Purpose::Flip, i, 0, 0);
        let (rx, _) = transmit(&vec![false; n * bits as usize], eps, &mut rng).unwrap();
        let per: Vec<f64> = rx
            .chunks(bits as usize)
            .map(|c| c.iter().enumerate().filter(|(_, &f)| f).map(|(j, _)| 2f64.powi(-(j as i32 + 1))).sum())
            .collect();
        let z = (mean(&per) - distortion_bound_from_eps(eps, bits).unwrap()) / std_error(&per);
        all_within &= z.abs() <= 3.0;
        sim.push(format!("eps={eps}: z={z:+.2}"));
    }
    // Enumeration sums the same dyadic weights in a different order, so
    // agreement is to the last ulp.
    outcome(
        worst <= 1e-15 && all_within,
        format!("enumeration max diff {worst:.1e} over 1<=K<=B<=12; 10^6 elements, {}", sim.join(", ")),
    )
}

fn solver_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.gen_range(1..=5);
        let mut links = Vec::new();
        let mut oracle = Vec::new();
        for _ in 0..m {
            let d = (8 * rng.gen_range(1..=32)) as f64;
            let phi = 10f64.powf(rng.gen_range(0.0..1.8));
            let kappa = rng.gen_range(0.01..1.0);
            links.push(ModalityLink::from_channel(d, kappa, 8, LinkParams::new(phi, 256).unwrap()).unwrap());
            let (b, k) = oracle_logistic(phi, 256.0);
            oracle.push(OracleLink { d, a: kappa * (1.0 - 2f64.powi(-8)), b, k });
        }
        let sum_a: f64 = oracle.iter().map(|o| o.a).sum();
        let delta0 = rng.gen_range((2.0 * oracle_f(&oracle, 0.0, 0.0)).max(1e-6)..0.45 * sum_a);
        let sol = solve_bisection(&links, delta0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let hi = oracle.iter().map(|o| o.b / o.d).fold(f64::INFINITY, f64::min);
        worst = worst.max((sol.tau_star - oracle_grid_tau(&oracle, delta0, hi)).abs());
    }
    let single = vec![ModalityLink::from_constants(1.0, 0.5, 1.0, 10.0).unwrap()];
    let closed = solve_bisection(&single, 0.05, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().tau_star;
    let closed_ok = (closed - 0.780_277_5).abs() <= DEFAULT_TOL;

    // f(0) on the reference payloads with unit importance and Δ₀ = 1e-3.
    let mut f0_notes = Vec::new();
    let mut f0_ok = true;
    for phi in [1.0, 2.0, 4.0, 10.0, 100.0] {
        let link = LinkParams::new(phi, 256).unwrap();
        let links: Vec<_> =
            [16.0, 128.0, 64.0].iter().map(|&d| ModalityLink::from_channel(d, 1.0, 8, link).unwrap()).collect();
        let residual = (f_tau(&links, 1e-3, 0.0).unwrap() + 1e-3).abs();
        f0_ok &= residual <= 1e-6;
        f0_notes.push(format!("phi={phi}: {residual:.2e}"));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 2e-6 && closed_ok && f0_ok && elapsed <= Duration::from_secs(60),
        format!(
            "max |tau_bis - tau_grid| = {worst:.2e}; closed form {closed:.7}; |f(0) + D0| {}; {:.1}s",
            f0_notes.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn convexity(reference: &Reference) -> Outcome {
    let fractions: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut instances: Vec<Vec<ModalityLink>> = (0..50)
        .map(|_| {
            (0..rng.gen_range(1..=5))
                .map(|_| {
                    let link = LinkParams::new(10f64.powf(rng.gen_range(-1.0..2.0)), 256).unwrap();
                    ModalityLink::from_channel((8 * rng.gen_range(1..=32)) as f64, rng.gen_range(0.01..1.0), 8, link).unwrap()
                })
                .collect()
        })
        .collect();
    let exp = &reference.exp;
    let prep = exp.prepare(&exp.draw_sample(0).unwrap()).unwrap();
    for &snr in &exp.config().snr_db {
        instances.push(exp.links(&prep, &exp.channel_states(snr, 0).unwrap()).unwrap());
    }
    let (mut points, mut violations, mut mismatches, mut min_in_region) = (0, 0, 0, f64::INFINITY);
    for links in &instances {
        let audit = convexity_audit(links, &fractions).unwrap();
        points += audit.points.iter().filter(|p| p.in_region).count();
        violations += audit.violations;
        mismatches += audit.sign_mismatches;
        for p in audit.points.iter().filter(|p| p.in_region) {
            min_in_region = min_in_region.min(p.second_difference);
        }
    }
    outcome(
        violations == 0 && mismatches == 0,
        format!(
            "{} instances, {points} in-region points, min second difference {min_in_region:.2e} (floor {AUDIT_FLOOR:e}), {violations} violations, {mismatches} sign mismatches",
            instances.len()
        ),
    )
}

fn rate_trend(reference: &Reference) -> Outcome {
    let snrs = &reference.exp.config().snr_db;
    let trials = reference.exp.config().trials as u64;
    let adaptive: Vec<&TrialResult> = reference.sweep.trials.iter().filter(|t| t.scheme == Scheme::Adaptive).collect();
    let lookup = |snr: f64, trial: u64| adaptive.iter().find(|t| t.snr_db == snr && t.trial == trial).copied();
    let (mut non_monotone, mut missing) = (0, 0);
    for trial in 0..trials {
        let rows: Vec<Option<&TrialResult>> = snrs.iter().map(|&s| lookup(s, trial)).collect();
        if rows.iter().any(Option::is_none) {
            missing += 1;
            continue;
        }
        for w in rows.windows(2) {
            let (a, b) = (w[0].unwrap(), w[1].unwrap());
            if a.modalities.iter().zip(&b.modalities).any(|(x, y)| y.rate < x.rate - 1e-9) {
                non_monotone += 1;
            }
        }
    }
    let unequal = adaptive
        .iter()
        .filter(|t| t.modalities.iter().any(|o| (o.payload_bits as f64 / o.rate - t.delay).abs() > 1e-9 * t.delay))
        .count();
    let first = reference.rows(Scheme::Adaptive, snrs[0]);
    let last = reference.rows(Scheme::Adaptive, *snrs.last().unwrap());
    let mean_rates = |rows: &[&TrialResult]| -> Vec<String> {
        (0..rows[0].modalities.len())
            .map(|m| format!("{:.3}", mean(&rows.iter().map(|t| t.modalities[m].rate).collect::<Vec<_>>())))
            .collect()
    };
    outcome(
        non_monotone == 0 && unequal == 0 && missing == 0,
        format!(
            "{} trials x {} SNR points: {non_monotone} decreasing steps, {unequal} unequal-delay trials, {missing} incomplete; mean rates {:?} -> {:?}",
            trials,
            snrs.len(),
            mean_rates(&first),
            mean_rates(&last)
        ),
    )
}

/// Bound on |MSE(ŷ) − MSE(y_clean)| from feature quantization alone:
/// with |e| ≤ g per trial, mean(e² + 2e(y_clean − y)) ≤ mean(g²) + 2·√mean(g²)·RMSE_clean.
fn quantization_floor(reference: &Reference, snr_db: f64) -> f64 {
    let exp = &reference.exp;
    let step = 2f64.powi(-(exp.config().bits as i32));
    let clean = reference.rows(Scheme::ErrorFree, snr_db);
    let mut g2 = Vec::with_capacity(clean.len());
    for t in &clean {
        let prep = exp.prepare(&exp.draw_sample(t.trial).unwrap()).unwrap();
        let center: Vec<Tensor> = prep.features.iter().map(|f| Tensor::vector(f.clone()).unwrap()).collect();
        let ball = PerturbationBall::uniform(NormOrder::Inf, step, center.len()).unwrap();
        let report = certify(exp.model().decoder(), &center, &ball).unwrap();
        let g = report.output_box.unwrap().iter().map(|iv| iv.width()).fold(0.0, f64::max);
        g2.push(g * g);
    }
    let rmse_clean = mean(&clean.iter().map(|t| t.mse).collect::<Vec<_>>()).sqrt();
    mean(&g2) + 2.0 * mean(&g2).sqrt() * rmse_clean
}

fn mse_trend(reference: &Reference) -> Outcome {
    let snrs = &reference.exp.config().snr_db;
    let lower = &snrs[..snrs.len() / 2];
    let mut lines = Vec::new();
    let mut clause1 = true;
    for &snr in lower {
        let a = reference.rows(Scheme::Adaptive, snr);
        let f = reference.rows(Scheme::Fixed(None), snr);
        let diff: Vec<f64> = a
            .iter()
            .filter_map(|x| f.iter().find(|y| y.trial == x.trial).map(|y| x.mse - y.mse))
            .collect();
        // One-sided 95% upper confidence bound of the paired mean difference.
        let ucb = mean(&diff) + 1.645 * std_error(&diff);
        clause1 &= ucb <= 0.0 && diff.len() >= 1000;
        lines.push(format!("{snr}dB: {:+.2e} (ucb {:+.2e})", mean(&diff), ucb));
    }
    let top = *snrs.last().unwrap();
    let floor = quantization_floor(reference, top);
    let err_free = mean(&reference.rows(Scheme::ErrorFree, top).iter().map(|t| t.mse).collect::<Vec<_>>());
    let mut clause2 = true;
    let mut gaps = Vec::new();
    for scheme in [Scheme::Adaptive, Scheme::Fixed(None)] {
        let gap = (mean(&reference.rows(scheme, top).iter().map(|t| t.mse).collect::<Vec<_>>()) - err_free).abs();
        clause2 &= gap <= floor;
        gaps.push(format!("{scheme} {gap:.2e}"));
    }
    outcome(
        clause1 && clause2,
        format!(
            "adaptive - fixed MSE per lower-half point [{}]; at {top}dB gap to error-free {} vs floor {floor:.2e}",
            lines.join(", "),
            gaps.join(", ")
        ),
    )
}

fn end_to_end_soundness(reference: &Reference, rayleigh: &SweepResult) -> Outcome {
    let count = |s: &SweepResult| s.trials.iter().filter(|t| !t.is_sound(1e-12)).count();
    let (va, vr) = (count(&reference.sweep), count(rayleigh));
    let worst = reference
        .sweep
        .trials
        .iter()
        .chain(&rayleigh.trials)
        .filter(|t| t.gamma_realized > 0.0)
        .map(|t| t.deviation / t.gamma_realized)
        .fold(0.0, f64::max);
    outcome(
        va + vr == 0,
        format!(
            "AWGN {} trials, Rayleigh {} trials ({} outages): {} violations, max |y_hat - y_clean| / gamma = {worst:.3}",
            reference.sweep.trials.len(),
            rayleigh.trials.len(),
            rayleigh.failures.len(),
            va + vr
        ),
    )
}

fn determinism(reference: &Reference) -> Outcome {
    let first = reference.sweep.csv_string().unwrap();
    let again = Experiment::new(reference_config()).unwrap().sweep().unwrap().csv_string().unwrap();
    let serial = Experiment::new(ExperimentConfig { jobs: Some(1), ..reference_config() })
        .unwrap()
        .sweep()
        .unwrap()
        .csv_string()
        .unwrap();
    outcome(
        first == again && first == serial,
        format!("{} CSV bytes; rerun identical: {}; single worker identical: {}", first.len(), first == again, first == serial),
    )
}

fn main() {
    let reference = {
        let exp = Experiment::new(reference_config()).expect("reference experiment builds");
        let sweep = exp.sweep().expect("reference sweep runs");
        Reference { exp, sweep }
    };
    let rayleigh = Experiment::new(ExperimentConfig { fading: Fading::Rayleigh, ..reference_config() })
        .unwrap()
        .sweep()
        .unwrap();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("bound soundness", Box::new(bound_soundness)),
        ("affine exactness", Box::new(affine_exactness)),
        ("dual norm", Box::new(dual_norm_attainment)),
        ("bit-error distortion", Box::new(bit_error_distortion)),
        ("solver correctness", Box::new(solver_correctness)),
        ("convexity audit", Box::new(|| convexity(&reference))),
        ("rate trend and equal delay", Box::new(|| rate_trend(&reference))),
        ("MSE trend and convergence", Box::new(|| mse_trend(&reference))),
        ("end-to-end soundness", Box::new(|| end_to_end_soundness(&reference, &rayleigh))),
        ("determinism", Box::new(|| determinism(&reference))),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
