mod common;

use common::*;
use proptest::prelude::*;

use semrate::fbl::{
    achievable_rate, achievable_rate_with, capacity, dispersion, error_prob_of_rate, q_exact, q_inv, q_logistic,
    LinkParams, QModel,
};

#[test]
fn link_constants_match_the_oracle() {
    for phi in [0.01, 0.5, 1.0, 3.0, 10.0, 63.0, 1e3] {
        assert!((capacity(phi).unwrap() - oracle_capacity(phi)).abs() < 1e-14);
        assert!((dispersion(phi).unwrap() - oracle_dispersion(phi)).abs() < 1e-14);
        for l in [64u64, 256, 1024] {
            let link = LinkParams::new(phi, l).unwrap();
            let (b, k) = oracle_logistic(phi, l as f64);
            assert!((link.midpoint_rate() - b).abs() < 1e-13);
            assert!((link.logistic_gain() - k).abs() < 1e-9 * k);
        }
    }
    assert_eq!(capacity(0.0).unwrap(), 0.0);
    assert!(capacity(-1.0).is_err());
    assert!(LinkParams::new(1.0, 1).is_err());
}

#[test]
fn q_inverse_round_trips() {
    for eps in [1e-12, 1e-6, 1e-3, 0.1, 0.5, 0.9, 1.0 - 1e-9] {
        let z = q_inv(eps).unwrap();
        assert!((q_exact(z) - eps).abs() <= 1e-12 * eps.max(1e-3), "eps {eps}");
    }
    assert!((q_exact(0.0) - 0.5).abs() < 1e-15);
    assert!(q_inv(0.0).is_err() && q_inv(1.0).is_err());
}

#[test]
fn logistic_q_is_close_to_the_gaussian_tail() {
    for i in -40..=40 {
        let z = i as f64 / 10.0;
        assert!((q_logistic(z) - q_exact(z)).abs() < 0.02, "z = {z}");
    }
}

#[test]
fn logistic_rate_inversion_is_exact() {
    let link = LinkParams::new(4.0, 256).unwrap();
    for eps in [1e-6, 1e-3, 0.1, 0.5, 0.8] {
        let r = achievable_rate_with(&link, eps, QModel::Logistic).unwrap();
        assert!((error_prob_of_rate(&link, r).unwrap() - eps).abs() < 1e-9 * eps.max(1e-6));
    }
}

#[test]
fn error_probability_slope_matches_finite_differences() {
    let link = LinkParams::new(2.0, 256).unwrap();
    let (b, k) = oracle_logistic(2.0, 256.0);
    for r in [0.2, 0.5, 0.8, b] {
        let analytic = {
            let e = 1.0 / (1.0 + (k * (b - r)).exp());
            k * e * (1.0 - e)
        };
        let numeric = central_difference(|x| error_prob_of_rate(&link, x).unwrap(), r, 1e-6);
        assert!((numeric - analytic).abs() < 1e-5 * (1.0 + analytic), "R = {r}");
    }
}

proptest! {
    #[test]
    fn achievable_rate_increases_with_eps(phi in 0.05f64..100.0, l in 16u64..2048, e1 in 1e-9f64..0.5, e2 in 1e-9f64..0.5) {
        let link = LinkParams::new(phi, l).unwrap();
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(achievable_rate(&link, lo).unwrap() <= achievable_rate(&link, hi).unwrap() + 1e-12);
    }

    #[test]
    fn error_probability_is_a_monotone_probability(phi in 0.05f64..100.0, l in 16u64..2048, r1 in 0.0f64..5.0, r2 in 0.0f64..5.0) {
        let link = LinkParams::new(phi, l).unwrap();
        let (e1, e2) = (error_prob_of_rate(&link, r1).unwrap(), error_prob_of_rate(&link, r2).unwrap());
        prop_assert!((0.0..=1.0).contains(&e1) && (0.0..=1.0).contains(&e2));
        if r1 <= r2 {
            prop_assert!(e1 <= e2);
        }
        let (b, k) = oracle_logistic(phi, l as f64);
        let oracle = 1.0 / (1.0 + (k * (b - r1)).exp());
        prop_assert!((e1 - oracle).abs() <= 1e-12);
    }

    #[test]
    fn capacity_is_concave_and_increasing(phi in 0.01f64..1e4) {
        let c = |x: f64| capacity(x).unwrap();
        prop_assert!(c(phi * 1.01) > c(phi));
        prop_assert!(central_second_difference(c, phi, phi * 1e-3) < 0.0);
        let v = dispersion(phi).unwrap();
        prop_assert!((0.0..1.0).contains(&v));
    }
}
