mod common;

use proptest::prelude::*;
use time_drs::gbm::{cox_gradient_hessian, cox_neg_log_partial_likelihood, CoxState};

#[test]
fn derivatives_match_finite_differences_with_ties() {
    for seed in 0..20 {
        let r = common::cox_finite_differences(seed, 30);
        assert!(r.loss_error < 1e-12, "seed {seed}: loss {}", r.loss_error);
        assert!(r.grad_rel < 1e-5, "seed {seed}: grad {}", r.grad_rel);
        assert!(r.hess_rel < 1e-4, "seed {seed}: hess {}", r.hess_rel);
    }
}

#[test]
fn gradient_sums_to_zero() {
    let mut r = common::rng(1);
    let (times, events) = common::tied_survival(&mut r, 25);
    let state = CoxState::new(times, events).unwrap();
    let scores: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
    let (g, h) = cox_gradient_hessian(&scores, &state).unwrap();
    assert!(g.iter().sum::<f64>().abs() < 1e-12);
    assert!(h.iter().all(|&v| v >= 0.0));
}

#[test]
fn extreme_scores_stay_finite() {
    let state = CoxState::new(vec![1.0, 2.0, 3.0], vec![true, true, false]).unwrap();
    let scores = [800.0, -800.0, 750.0];
    assert!(cox_neg_log_partial_likelihood(&scores, &state).unwrap().is_finite());
    let (g, h) = cox_gradient_hessian(&scores, &state).unwrap();
    assert!(g.iter().chain(&h).all(|v| v.is_finite()));
}

proptest! {
    #[test]
    fn loss_is_translation_invariant(
        obs in prop::collection::vec((0u8..6, any::<bool>(), -5.0f64..5.0), 1..40),
        c in -10.0f64..=10.0,
    ) {
        prop_assume!(obs.iter().any(|o| o.1));
        let state = CoxState::new(obs.iter().map(|o| o.0 as f64).collect(), obs.iter().map(|o| o.1).collect()).unwrap();
        let s: Vec<f64> = obs.iter().map(|o| o.2).collect();
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let a = cox_neg_log_partial_likelihood(&s, &state).unwrap();
        let b = cox_neg_log_partial_likelihood(&shifted, &state).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        let (ga, ha) = cox_gradient_hessian(&s, &state).unwrap();
        let (gb, hb) = cox_gradient_hessian(&shifted, &state).unwrap();
        for (x, y) in ga.iter().zip(&gb).chain(ha.iter().zip(&hb)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
