//! Two-group comparisons of a single feature.

use serde::{Deserialize, Serialize};

use super::{chi_square_sf, normal_two_sided, student_t_two_sided, TestResult};
use crate::error::{Error, Result};

/// Pooled sample size up to which Mann-Whitney p-values are enumerated exactly.
const MWU_EXACT_MAX_N: usize = 12;

/// p-value reported for completely separated logistic fits.
pub const SEPARATION_P_CAP: f64 = 1e-7;

fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = mid;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    (ranks, tie_sizes)
}

/// Mann-Whitney U of `sample_a` (mid-ranks for ties), two-sided. The p-value
/// is exact by enumeration of all group labelings when the pooled size is at
/// most 12, otherwise normal with tie and continuity correction.
pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<TestResult> {
    let (na, nb) = (sample_a.len(), sample_b.len());
    if na == 0 || nb == 0 {
        return Err(Error::UndefinedTest("Mann-Whitney U needs two non-empty samples".into()));
    }
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let p = if na + nb <= MWU_EXACT_MAX_N {
        exact_mwu_p(&ranks, na, u)
    } else {
        normal_mwu_p(na, nb, &ties, u)
    };
    Ok(TestResult::new("mann-whitney-u", u, p))
}

fn exact_mwu_p(ranks: &[f64], na: usize, u_obs: f64) -> f64 {
    let n = ranks.len();
    let mean = (na * (n - na)) as f64 / 2.0;
    let offset = (na * (na + 1)) as f64 / 2.0;
    let observed = (u_obs - mean).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let rank_sum: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        total += 1;
        if ((rank_sum - offset) - mean).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

fn normal_mwu_p(na: usize, nb: usize, ties: &[usize], u: f64) -> f64 {
    let n = (na + nb) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let mean = (na * nb) as f64 / 2.0;
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    normal_two_sided(z)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test, two-sided.
pub fn students_t(sample_a: &[f64], sample_b: &[f64]) -> Result<TestResult> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::UndefinedTest("t-test needs at least two values per group".into()));
    }
    let (ma, va) = mean_var(sample_a);
    let (mb, vb) = mean_var(sample_b);
    let (sa, sb) = (va / sample_a.len() as f64, vb / sample_b.len() as f64);
    if sa + sb == 0.0 {
        return Err(Error::UndefinedTest("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2)
        / (sa * sa / (sample_a.len() as f64 - 1.0) + sb * sb / (sample_b.len() as f64 - 1.0));
    Ok(TestResult::new("welch-t", t, student_t_two_sided(t, df)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticTest {
    pub test: TestResult,
    /// Complete (or numerically complete) separation; coefficients diverge.
    pub separated: bool,
    pub intercept: f64,
    pub slope: f64,
    pub converged: bool,
}

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;

fn log_likelihood(x: &[f64], y: &[bool], b0: f64, b1: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let eta = b0 + b1 * xi;
            // log σ(η) and log(1-σ(η)) without overflow
            let log1pexp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            if yi { eta - log1pexp } else { -log1pexp }
        })
        .sum()
}

/// Univariate logistic regression of `labels` on `feature`, fitted by IRLS;
/// p-value from the likelihood-ratio test against the intercept-only model.
pub fn logistic_separability(feature: &[f64], labels: &[bool]) -> Result<LogisticTest> {
    if feature.len() != labels.len() {
        return Err(Error::Invalid("feature and label lengths differ".into()));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::UndefinedTest("logistic test needs both classes".into()));
    }
    let n = labels.len() as f64;
    let base = n1 as f64 / n;
    let ll0 = n1 as f64 * base.ln() + n0 as f64 * (1.0 - base).ln();
    let intercept_only = (base / (1.0 - base)).ln();

    let mean = feature.iter().sum::<f64>() / n;
    let sd = (feature.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Ok(LogisticTest {
            test: TestResult::new("logistic-lrt", 0.0, 1.0),
            separated: false,
            intercept: intercept_only,
            slope: 0.0,
            converged: true,
        });
    }
    let x: Vec<f64> = feature.iter().map(|v| (v - mean) / sd).collect();

    let class_range = |cls: bool| {
        x.iter()
            .zip(labels)
            .filter(|(_, &l)| l == cls)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)))
    };
    let (lo1, hi1) = class_range(true);
    let (lo0, hi0) = class_range(false);
    if hi0 < lo1 || hi1 < lo0 {
        let statistic = -2.0 * ll0;
        let direction = if hi0 < lo1 { 1.0 } else { -1.0 };
        return Ok(LogisticTest {
            test: TestResult::new("logistic-lrt", statistic, chi_square_sf(statistic, 1.0).min(SEPARATION_P_CAP)),
            separated: true,
            intercept: f64::NAN,
            slope: direction * f64::INFINITY,
            converged: false,
        });
    }

    let (mut b0, mut b1) = (intercept_only, 0.0);
    let mut ll = log_likelihood(&x, labels, b0, b1);
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITER {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(labels) {
            let p = 1.0 / (1.0 + (-(b0 + b1 * xi)).exp());
            let r = f64::from(u8::from(yi)) - p;
            let w = p * (1.0 - p);
            g0 += r;
            g1 += r * xi;
            h00 += w;
            h01 += w * xi;
            h11 += w * xi * xi;
        }
        let det = h00 * h11 - h01 * h01;
        if det <= 0.0 || !det.is_finite() {
            break;
        }
        let d0 = (h11 * g0 - h01 * g1) / det;
        let d1 = (h00 * g1 - h01 * g0) / det;
        let mut step = 1.0;
        let mut next = log_likelihood(&x, labels, b0 + d0, b1 + d1);
        while next < ll && step > 1e-6 {
            step *= 0.5;
            next = log_likelihood(&x, labels, b0 + step * d0, b1 + step * d1);
        }
        b0 += step * d0;
        b1 += step * d1;
        let delta = (next - ll).abs();
        ll = next;
        if delta < IRLS_TOL {
            converged = true;
            break;
        }
    }
    let statistic = (2.0 * (ll - ll0)).max(0.0);
    let separated = !converged && b1.abs() > 20.0;
    let mut p = chi_square_sf(statistic, 1.0);
    if separated {
        p = p.min(SEPARATION_P_CAP);
    }
    Ok(LogisticTest {
        test: TestResult::new("logistic-lrt", statistic, p),
        separated,
        intercept: b0 - b1 * mean / sd,
        slope: b1 / sd,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Null distribution of U without ties by the counting recurrence
    /// N(m, n, u) = N(m-1, n, u-n) + N(m, n-1, u).
    fn u_counts(m: usize, n: usize) -> Vec<f64> {
        let max = m * n;
        let mut table = vec![vec![vec![0.0; max + 1]; n + 1]; m + 1];
        for i in 0..=m {
            for j in 0..=n {
                if i == 0 || j == 0 {
                    table[i][j][0] = 1.0;
                    continue;
                }
                for u in 0..=i * j {
                    let mut v = table[i][j - 1][u];
                    if u >= j {
                        v += table[i - 1][j][u - j];
                    }
                    table[i][j][u] = v;
                }
            }
        }
        table[m][n].clone()
    }

    fn oracle_p(m: usize, n: usize, u: f64) -> f64 {
        let counts = u_counts(m, n);
        let total: f64 = counts.iter().sum();
        let mean = (m * n) as f64 / 2.0;
        counts
            .iter()
            .enumerate()
            .filter(|(k, _)| (*k as f64 - mean).abs() >= (u - mean).abs() - 1e-9)
            .map(|(_, c)| c)
            .sum::<f64>()
            / total
    }

    #[test]
    fn separated_samples_have_zero_u() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn identical_samples_are_not_different() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(mann_whitney_u(&a, &a).unwrap().p_value >= 0.99);
        let big: Vec<f64> = (0..20).map(|v| v as f64).collect();
        assert!(mann_whitney_u(&big, &big).unwrap().p_value >= 0.99);
    }

    #[test]
    fn exact_five_by_five_matches_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..25 {
            let mut vals: Vec<f64> = (0..10).map(|v| v as f64 + rng.random_range(0.0..0.5)).collect();
            vals.shuffle(&mut rng);
            let r = mann_whitney_u(&vals[..5], &vals[5..]).unwrap();
            assert!((r.p_value - oracle_p(5, 5, r.statistic)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_and_normal_agree_for_six_by_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let mut vals: Vec<f64> = (0..12).map(|v| v as f64).collect();
            vals.shuffle(&mut rng);
            let exact = mann_whitney_u(&vals[..6], &vals[6..]).unwrap();
            let (ranks, ties) = midranks(&vals);
            let u: f64 = ranks[..6].iter().sum::<f64>() - 21.0;
            assert_eq!(u, exact.statistic);
            let approx = normal_mwu_p(6, 6, &ties, u);
            assert!((exact.p_value - approx).abs() < 0.02, "{} vs {}", exact.p_value, approx);
        }
    }

    #[test]
    fn welch_identical_and_large_effect() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let r = students_t(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        use rand_distr::Distribution;
        let x: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..30).map(|_| 10.0 + normal.sample(&mut rng)).collect();
        assert!(students_t(&x, &y).unwrap().p_value < 1e-10);
    }

    #[test]
    fn welch_errors() {
        assert!(students_t(&[1.0], &[1.0, 2.0]).is_err());
        assert!(students_t(&[3.0, 3.0], &[5.0, 5.0]).is_err());
        assert!(students_t(&[3.0, 3.0], &[5.0, 6.0]).is_ok());
    }

    #[test]
    fn logistic_flags_separation_and_constant_feature() {
        let labels = [false, false, true, true, true];
        let x = [0.0, 0.0, 1.0, 1.0, 1.0];
        let r = logistic_separability(&x, &labels).unwrap();
        assert!(r.separated);
        assert!(r.test.p_value <= SEPARATION_P_CAP);

        let r = logistic_separability(&[2.0; 5], &labels).unwrap();
        assert_eq!(r.test.p_value, 1.0);
        assert!(!r.separated);
        assert!(logistic_separability(&x, &[true; 5]).is_err());
    }

    #[test]
    fn logistic_recovers_a_known_slope() {
        // large sample from logit p = -0.5 + 1.2 x
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..4000).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<bool> = x
            .iter()
            .map(|&v: &f64| rng.random::<f64>() < 1.0 / (1.0 + (0.5 - 1.2 * v).exp()))
            .collect();
        let r = logistic_separability(&x, &y).unwrap();
        assert!(r.converged);
        assert!((r.slope - 1.2).abs() < 0.15, "slope {}", r.slope);
        assert!((r.intercept + 0.5).abs() < 0.15, "intercept {}", r.intercept);
        assert!(r.test.p_value < 1e-10);
    }

    #[test]
    fn logistic_null_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut accept = 0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..100.0)).collect();
            let mut y: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
            y.shuffle(&mut rng);
            if logistic_separability(&x, &y).unwrap().test.p_value > 0.05 {
                accept += 1;
            }
        }
        assert!(accept >= 90, "{accept}/100");
    }
}
