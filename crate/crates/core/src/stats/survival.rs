use serde::{Deserialize, Serialize};

use super::{chi_square_sf, TestResult};
use crate::data::SurvivalRecord;
use crate::error::{Error, Result};

/// Product-limit survival curve. Index 0 is the origin `(0, 1.0)`; each further
/// entry is a distinct event time with the survival just after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub event_times: Vec<f64>,
    pub survival_prob: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub censor_marks: Vec<f64>,
}

impl KmCurve {
    /// S(t), right-continuous step function.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.event_times.partition_point(|&x| x <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival_prob[idx - 1]
        }
    }

    /// Smallest time at which S(t) ≤ 0.5, if reached.
    pub fn median(&self) -> Option<f64> {
        self.event_times
            .iter()
            .zip(&self.survival_prob)
            .find(|(_, &s)| s <= 0.5)
            .map(|(t, _)| *t)
    }
}

/// Truncate follow-up at `censor_at`: later times become censored at the horizon.
pub fn administrative_censor(records: &[SurvivalRecord], censor_at: Option<f64>) -> Vec<(f64, bool)> {
    records
        .iter()
        .map(|r| match censor_at {
            Some(c) if r.time_months > c => (c, false),
            _ => (r.time_months, r.event),
        })
        .collect()
}

pub fn kaplan_meier(records: &[SurvivalRecord], censor_at: Option<f64>) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::Invalid("Kaplan-Meier needs at least one record".into()));
    }
    Ok(product_limit(&administrative_censor(records, censor_at)))
}

pub(crate) fn product_limit(obs: &[(f64, bool)]) -> KmCurve {
    let mut sorted = obs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut curve = KmCurve {
        event_times: vec![0.0],
        survival_prob: vec![1.0],
        at_risk: vec![n],
        events: vec![0],
        censor_marks: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].0;
        let at_risk = n - i;
        let mut d = 0;
        let mut j = i;
        while j < n && sorted[j].0 == t {
            if sorted[j].1 {
                d += 1;
            } else {
                curve.censor_marks.push(t);
            }
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            if t == 0.0 {
                curve.survival_prob[0] = s;
                curve.events[0] = d;
            } else {
                curve.event_times.push(t);
                curve.survival_prob.push(s);
                curve.at_risk.push(at_risk);
                curve.events.push(d);
            }
        }
        i = j;
    }
    curve
}

/// Two-group log-rank test, chi-square with one degree of freedom.
pub fn log_rank(
    group_a: &[SurvivalRecord],
    group_b: &[SurvivalRecord],
    censor_at: Option<f64>,
) -> Result<TestResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::UndefinedTest("log-rank needs two non-empty groups".into()));
    }
    let a = administrative_censor(group_a, censor_at);
    let b = administrative_censor(group_b, censor_at);
    log_rank_raw(&a, &b)
}

pub(crate) fn log_rank_raw(a: &[(f64, bool)], b: &[(f64, bool)]) -> Result<TestResult> {
    let mut all: Vec<(f64, bool, bool)> = a
        .iter()
        .map(|&(t, e)| (t, e, true))
        .chain(b.iter().map(|&(t, e)| (t, e, false)))
        .collect();
    if !all.iter().any(|x| x.1) {
        return Err(Error::UndefinedTest("no events in either group".into()));
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n_total = all.len();
    let mut n_a = a.len() as f64;
    let mut observed_minus_expected = 0.0;
    let mut variance = 0.0;
    let mut i = 0;
    while i < n_total {
        let t = all[i].0;
        let n = (n_total - i) as f64;
        let (mut d, mut d_a, mut leaving_a) = (0.0, 0.0, 0.0);
        let mut j = i;
        while j < n_total && all[j].0 == t {
            if all[j].1 {
                d += 1.0;
                if all[j].2 {
                    d_a += 1.0;
                }
            }
            if all[j].2 {
                leaving_a += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            observed_minus_expected += d_a - d * n_a / n;
            if n > 1.0 {
                variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= leaving_a;
        i = j;
    }
    let statistic = if variance > 0.0 {
        observed_minus_expected * observed_minus_expected / variance
    } else {
        0.0
    };
    Ok(TestResult::new("log-rank", statistic, chi_square_sf(statistic, 1.0)))
}
