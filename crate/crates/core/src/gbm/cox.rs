//! Negative log partial likelihood of the Cox model, Breslow ties.

use crate::data::SurvivalRecord;
use crate::error::{Error, Result};

/// Survival outcomes with risk-set ordering precomputed.
#[derive(Clone, Debug)]
pub struct CoxState {
    times: Vec<f64>,
    events: Vec<bool>,
    /// Indices by ascending time.
    order: Vec<usize>,
    /// Tie groups in `order`: half-open ranges of equal time.
    groups: Vec<(usize, usize)>,
}

impl CoxState {
    pub fn new(times: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if times.len() != events.len() {
            return Err(Error::Invalid(format!("{} times but {} event flags", times.len(), events.len())));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Invalid(format!("survival time {t} is not a finite non-negative value")));
        }
        if !events.iter().any(|&e| e) {
            return Err(Error::NoEvents);
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut groups = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let mut j = i + 1;
            while j < order.len() && times[order[j]] == times[order[i]] {
                j += 1;
            }
            groups.push((i, j));
            i = j;
        }
        Ok(CoxState { times, events, order, groups })
    }

    pub fn from_records(records: &[SurvivalRecord]) -> Result<Self> {
        CoxState::new(
            records.iter().map(|r| r.time_months).collect(),
            records.iter().map(|r| r.event).collect(),
        )
    }

    /// Restriction to the given sample indices.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        CoxState::new(
            rows.iter().map(|&r| self.times[r]).collect(),
            rows.iter().map(|&r| self.events[r]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn observations(&self) -> Vec<(f64, bool)> {
        self.times.iter().copied().zip(self.events.iter().copied()).collect()
    }

    fn check(&self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::Invalid(format!("{} scores for {} samples", scores.len(), self.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("scores must be finite".into()));
        }
        Ok(())
    }

    /// exp(score - max) and, per tie group, the risk-set sum Σ_{t_j ≥ t} exp(s_j - max).
    fn risk_sums(&self, scores: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();
        let mut sums = vec![0.0; self.groups.len()];
        let mut acc = 0.0;
        for (g, &(lo, hi)) in self.groups.iter().enumerate().rev() {
            acc += self.order[lo..hi].iter().map(|&k| w[k]).sum::<f64>();
            sums[g] = acc;
        }
        (w, sums, shift)
    }
}

/// −Σ_{i: event} [s_i − log Σ_{j: t_j ≥ t_i} exp(s_j)].
pub fn cox_neg_log_partial_likelihood(scores: &[f64], state: &CoxState) -> Result<f64> {
    state.check(scores)?;
    let (_, sums, shift) = state.risk_sums(scores);
    let mut loss = 0.0;
    for (g, &(lo, hi)) in state.groups.iter().enumerate() {
        let log_risk = sums[g].ln() + shift;
        for &k in &state.order[lo..hi] {
            if state.events[k] {
                loss += log_risk - scores[k];
            }
        }
    }
    Ok(loss)
}

/// Per-sample gradient and diagonal Hessian of the negative log partial likelihood.
pub fn cox_gradient_hessian(scores: &[f64], state: &CoxState) -> Result<(Vec<f64>, Vec<f64>)> {
    state.check(scores)?;
    let (w, sums, _) = state.risk_sums(scores);
    let n = state.len();
    let (mut grad, mut hess) = (vec![0.0; n], vec![0.0; n]);
    // Σ over event times t_i ≤ t_k of d_i/R_i and d_i/R_i²
    let (mut inv, mut inv_sq) = (0.0, 0.0);
    for (g, &(lo, hi)) in state.groups.iter().enumerate() {
        let d = state.order[lo..hi].iter().filter(|&&k| state.events[k]).count() as f64;
        inv += d / sums[g];
        inv_sq += d / (sums[g] * sums[g]);
        for &k in &state.order[lo..hi] {
            let delta = if state.events[k] { 1.0 } else { 0.0 };
            grad[k] = w[k] * inv - delta;
            hess[k] = (w[k] * inv - w[k] * w[k] * inv_sq).max(0.0);
        }
    }
    Ok((grad, hess))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_scores_give_log_risk_set_sizes() {
        let times = vec![1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 8.0];
        let events = vec![true, true, true, false, true, false, true];
        let state = CoxState::new(times.clone(), events.clone()).unwrap();
        let expected: f64 = times
            .iter()
            .zip(&events)
            .filter(|(_, &e)| e)
            .map(|(t, _)| (times.iter().filter(|&&u| u >= *t).count() as f64).ln())
            .sum();
        for c in [-3.0, 0.0, 7.5] {
            let loss = cox_neg_log_partial_likelihood(&vec![c; times.len()], &state).unwrap();
            assert!((loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_event_and_all_censored() {
        let one = CoxState::new(vec![4.0], vec![true]).unwrap();
        assert_eq!(cox_neg_log_partial_likelihood(&[2.5], &one).unwrap(), 0.0);
        assert!(matches!(CoxState::new(vec![1.0, 2.0], vec![false, false]), Err(Error::NoEvents)));
    }

    #[test]
    fn gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let times: Vec<f64> = (0..25).map(|_| rng.random_range(0..10) as f64).collect();
        let mut events: Vec<bool> = (0..25).map(|_| rng.random_bool(0.5)).collect();
        events[0] = true;
        let scores: Vec<f64> = (0..25).map(|_| rng.random_range(-2.0..2.0)).collect();
        let state = CoxState::new(times, events).unwrap();
        let (g, h) = cox_gradient_hessian(&scores, &state).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(h.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mismatched_or_non_finite_scores() {
        let state = CoxState::new(vec![1.0, 2.0], vec![true, false]).unwrap();
        assert!(cox_neg_log_partial_likelihood(&[0.0], &state).is_err());
        assert!(cox_gradient_hessian(&[0.0, f64::NAN], &state).is_err());
    }
}
