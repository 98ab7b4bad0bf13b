//! Segmentation overlap and centroid detection metrics.

use serde::{Deserialize, Serialize};

use crate::data::{Point2, RegionMask};
use crate::error::{Error, Result};

pub const DEFAULT_GATE_UM: f64 = 3.0;

/// Sørensen–Dice overlap; two empty masks score 1.
pub fn dice(a: &RegionMask, b: &RegionMask) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch((a.width(), a.height()), (b.width(), b.height())));
    }
    if a.pixel_size_um() != b.pixel_size_um() {
        return Err(Error::Invalid(format!(
            "pixel sizes differ: {} vs {} μm",
            a.pixel_size_um(),
            b.pixel_size_um()
        )));
    }
    let both = a.grid().iter().zip(b.grid()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Minimum-cost assignment of every row to a distinct column (rows ≤ columns),
/// by the shortest augmenting path method with potentials. Returns the column
/// of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) || n > m {
        return Err(Error::Invalid("assignment needs a rectangular matrix with rows ≤ columns".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("assignment costs must be finite".into()));
    }
    // 1-based internal arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if reduced < min_to[j] {
                        min_to[j] = reduced;
                        way[j] = j0;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub predicted: usize,
    pub truth: usize,
    pub distance_um: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub f1: f64,
    pub pairs: Vec<MatchedPair>,
}

/// Globally optimal centroid assignment; assigned pairs farther apart than
/// `gate_um` are unmade and counted as one false positive and one false negative.
pub fn detection_f1(predicted: &[Point2], truth: &[Point2], gate_um: f64) -> Result<MatchReport> {
    if predicted.iter().chain(truth).any(|p| !p.is_finite()) {
        return Err(Error::Invalid("centroids must be finite".into()));
    }
    if !(gate_um >= 0.0) {
        return Err(Error::Invalid(format!("gate {gate_um} μm must be non-negative")));
    }
    let transpose = predicted.len() > truth.len();
    let (rows, cols) = if transpose { (truth, predicted) } else { (predicted, truth) };
    let cost: Vec<Vec<f64>> = rows.iter().map(|r| cols.iter().map(|c| r.distance(*c)).collect()).collect();
    let assignment = hungarian(&cost)?;
    let mut pairs: Vec<MatchedPair> = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| cost[i][j] <= gate_um)
        .map(|(i, &j)| {
            let (p, t) = if transpose { (j, i) } else { (i, j) };
            MatchedPair { predicted: p, truth: t, distance_um: cost[i][j] }
        })
        .collect();
    pairs.sort_by_key(|p| p.predicted);
    let tp = pairs.len();
    let (fp, fn_) = (predicted.len() - tp, truth.len() - tp);
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok(MatchReport { true_positive: tp, false_positive: fp, false_negative: fn_, f1, pairs })
}
