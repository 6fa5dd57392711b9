mod common;

use common::{
    rdp_lattice, renyi_mixture_numeric, single_gaussian_eps, ACCOUNT_Q05_S2_T1000_EPS, ACCOUNT_Q05_S2_T1000_ORDER,
    CALIBRATED_SIGMA_T2000, CALIBRATED_SIGMA_T400,
};
use dploda::accountant::{
    calibrate_sigma, dense_orders, dp_sgd_spend, integer_orders, rdp_gaussian, rdp_subsampled_gaussian,
    rdp_to_eps_delta, Accountant, RdpCurve,
};
use proptest::prelude::*;

#[test]
fn full_sampling_matches_gaussian() {
    for &sigma in &[0.5, 0.8, 1.0, 1.5, 4.0, 10.0] {
        for alpha in [2u32, 3, 5, 8, 16, 32, 64, 128, 256] {
            let sub = rdp_subsampled_gaussian(1.0, sigma, alpha).unwrap();
            let full = rdp_gaussian(sigma, alpha as f64).unwrap();
            assert!(
                (sub - full).abs() <= 1e-12 * full.max(1.0),
                "sigma {sigma} alpha {alpha}: {sub} vs {full}"
            );
        }
    }
}

#[test]
fn bound_dominates_numeric_divergence() {
    for (q, sigma, alpha) in rdp_lattice() {
        let bound = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
        let numeric = renyi_mixture_numeric(q, sigma, alpha as f64);
        let rel = (bound - numeric) / numeric.abs().max(1e-300);
        assert!(
            rel >= -1e-9,
            "q {q} sigma {sigma} alpha {alpha}: bound {bound} below numeric {numeric}"
        );
        assert!(
            rel <= 1e-6,
            "q {q} sigma {sigma} alpha {alpha}: bound {bound} loose vs numeric {numeric}"
        );
    }
}

#[test]
fn single_gaussian_step_epsilon() {
    let oracle = single_gaussian_eps();
    assert!((oracle - 5.2986).abs() < 1e-4);
    // Dense fractional orders: the minimizer sits between grid points, and
    // the objective is flat there, so the error is second order in the step.
    let step = 0.01;
    let dense = RdpCurve::gaussian(1.0, &dense_orders(256.0, step)).unwrap();
    let eps = rdp_to_eps_delta(&dense, 1e-5).unwrap().epsilon;
    assert!(
        eps >= oracle - 1e-12 && eps - oracle < step * step,
        "dense grid: {eps} vs {oracle}"
    );
    // Integer orders land at alpha = 6.
    let ints: Vec<f64> = integer_orders().into_iter().map(f64::from).collect();
    let coarse = rdp_to_eps_delta(&RdpCurve::gaussian(1.0, &ints).unwrap(), 1e-5).unwrap();
    assert_eq!(coarse.order, 6.0);
    assert!((coarse.epsilon - (3.0 + (1e5f64).ln() / 5.0)).abs() < 1e-12);
}

#[test]
fn frozen_spend_and_calibration() {
    let s = dp_sgd_spend(0.05, 2.0, 1000, 1e-5).unwrap();
    assert!((s.epsilon - ACCOUNT_Q05_S2_T1000_EPS).abs() < 1e-9, "{}", s.epsilon);
    assert_eq!(s.order, ACCOUNT_Q05_S2_T1000_ORDER);
    for (steps, frozen) in [(400, CALIBRATED_SIGMA_T400), (2000, CALIBRATED_SIGMA_T2000)] {
        let sigma = calibrate_sigma(0.05, steps, 10.0, 1e-5).unwrap();
        assert!((sigma - frozen).abs() < 1e-8, "{steps} steps: {sigma}");
        assert!(dp_sgd_spend(0.05, sigma, steps, 1e-5).unwrap().epsilon <= 10.0);
        assert!(dp_sgd_spend(0.05, sigma * (1.0 - 1e-6), steps, 1e-5).unwrap().epsilon > 10.0);
    }
}

#[test]
fn accountant_ticks_compose_linearly() {
    let mut acc = Accountant::new(0.05, 1.2, 1e-5).unwrap();
    for _ in 0..250 {
        acc.tick();
    }
    assert_eq!(acc.steps(), 250);
    assert_eq!(acc.spend().unwrap(), dp_sgd_spend(0.05, 1.2, 250, 1e-5).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rdp_monotone_in_q_and_sigma(q in 0.001f64..0.9, sigma in 0.6f64..8.0, alpha in 2u32..64) {
        let base = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(rdp_subsampled_gaussian((q * 1.1).min(1.0), sigma, alpha).unwrap() >= base * (1.0 - 1e-12));
        prop_assert!(rdp_subsampled_gaussian(q, sigma * 1.1, alpha).unwrap() <= base * (1.0 + 1e-12));
        prop_assert!(base <= rdp_gaussian(sigma, alpha as f64).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn epsilon_nondecreasing_in_steps(q in 0.001f64..0.5, sigma in 0.7f64..5.0, t in 1u64..2000) {
        let a = dp_sgd_spend(q, sigma, t, 1e-5).unwrap().epsilon;
        let b = dp_sgd_spend(q, sigma, t + 1, 1e-5).unwrap().epsilon;
        prop_assert!(b >= a);
    }
}
