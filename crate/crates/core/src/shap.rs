//! Exact path-dependent TreeSHAP attributions for boosted ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbm::{FeatureMatrix, Tree, TreeEnsemble, TreeNode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapRow {
    pub patient_id: String,
    pub phi: Vec<f64>,
    pub base_value: f64,
}

impl ShapRow {
    /// base_value + Σ phi, which equals the model prediction.
    pub fn total(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

/// Fractions of the parent's cover sent left and right; an empty node splits evenly.
fn child_fractions(tree: &Tree, node: usize) -> (usize, usize, f64, f64) {
    match tree.nodes[node] {
        TreeNode::Split { left, right, cover, .. } => {
            if cover > 0.0 {
                (left, right, tree.nodes[left].cover() / cover, tree.nodes[right].cover() / cover)
            } else {
                (left, right, 0.5, 0.5)
            }
        }
        TreeNode::Leaf { .. } => unreachable!("leaves have no children"),
    }
}

/// Cover-weighted mean leaf value: the tree's prediction with no feature known.
pub fn expected_value(tree: &Tree) -> f64 {
    fn go(tree: &Tree, node: usize) -> f64 {
        match tree.nodes[node] {
            TreeNode::Leaf { weight, .. } => weight,
            TreeNode::Split { .. } => {
                let (l, r, fl, fr) = child_fractions(tree, node);
                fl * go(tree, l) + fr * go(tree, r)
            }
        }
    }
    go(tree, 0)
}

#[derive(Clone, Copy, Debug)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement { feature, zero_fraction, one_fraction, weight: if depth == 0 { 1.0 } else { 0.0 } });
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / (depth + 1) as f64;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / (depth + 1) as f64;
    }
}

fn unwind(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let PathElement { zero_fraction, one_fraction, .. } = path[index];
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * (depth + 1) as f64 / ((i + 1) as f64 * one_fraction);
            next_one = tmp - path[i].weight * zero_fraction * (depth - i) as f64 / (depth + 1) as f64;
        } else {
            path[i].weight = path[i].weight * (depth + 1) as f64 / (zero_fraction * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement { zero_fraction, one_fraction, .. } = path[index];
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = next_one * (depth + 1) as f64 / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one = path[i].weight - tmp * zero_fraction * (depth - i) as f64 / (depth + 1) as f64;
        } else {
            total += path[i].weight / zero_fraction / ((depth - i) as f64 / (depth + 1) as f64);
        }
    }
    total
}

fn recurse(
    tree: &Tree,
    x: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
) {
    extend(&mut path, zero_fraction, one_fraction, feature);
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                phi[el.feature.expect("only the root element lacks a feature")] +=
                    w * (el.one_fraction - el.zero_fraction) * weight;
            }
        }
        TreeNode::Split { feature_index, threshold, default_left, .. } => {
            let (left, right, fl, fr) = child_fractions(tree, node);
            let v = x.get(feature_index).copied().unwrap_or(f64::NAN);
            let go_left = if v.is_nan() { default_left } else { v < threshold };
            let (hot, cold, hot_zero, cold_zero) = if go_left { (left, right, fl, fr) } else { (right, left, fr, fl) };
            let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == Some(feature_index)) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind(&mut path, k);
            }
            recurse(tree, x, phi, hot, path.clone(), hot_zero * incoming_zero, incoming_one, Some(feature_index));
            recurse(tree, x, phi, cold, path, cold_zero * incoming_zero, 0.0, Some(feature_index));
        }
    }
}

/// Attributions of a single tree's output (without shrinkage).
pub fn tree_shap(tree: &Tree, x: &[f64], n_features: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n_features];
    recurse(tree, x, &mut phi, 0, Vec::with_capacity(tree.depth() + 2), 1.0, 1.0, None);
    phi
}

/// One row per patient; attributions of each tree are scaled by its shrinkage.
pub fn shap_values(ensemble: &TreeEnsemble, patient_ids: &[String], x: &FeatureMatrix) -> Result<Vec<ShapRow>> {
    if patient_ids.len() != x.n_rows() {
        return Err(Error::Invalid(format!("{} patient ids for {} feature rows", patient_ids.len(), x.n_rows())));
    }
    ensemble.validate(x.n_cols()).map_err(|e| Error::Invalid(format!("model does not fit {} features: {e}", x.n_cols())))?;
    let base_value = ensemble.base_score
        + ensemble.trees.iter().zip(&ensemble.shrinkage).map(|(t, s)| s * expected_value(t)).sum::<f64>();
    Ok(patient_ids
        .iter()
        .zip(x.rows())
        .map(|(id, row)| {
            let mut phi = vec![0.0; x.n_cols()];
            for (tree, s) in ensemble.trees.iter().zip(&ensemble.shrinkage) {
                for (p, v) in phi.iter_mut().zip(tree_shap(tree, row, x.n_cols())) {
                    *p += s * v;
                }
            }
            ShapRow { patient_id: id.clone(), phi, base_value }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: usize,
    pub name: String,
    pub mean_abs_phi: f64,
}

/// Per-patient value, population percentile and attribution of one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapPoint {
    pub patient_id: String,
    pub feature: usize,
    pub feature_value: f64,
    pub feature_percentile: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    /// Descending mean |phi|; ties keep feature order.
    pub ranking: Vec<FeatureImportance>,
    pub points: Vec<ShapPoint>,
}

/// Mid-rank percentile in (0, 100) of every value in `values`.
pub fn percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    values
        .iter()
        .map(|v| {
            let below = values.iter().filter(|u| *u < v).count() as f64;
            let equal = values.iter().filter(|u| *u == v).count() as f64;
            100.0 * (below + equal / 2.0) / n
        })
        .collect()
}

pub fn shap_summary(rows: &[ShapRow], x: &FeatureMatrix, names: &[String]) -> Result<ShapSummary> {
    if rows.is_empty() {
        return Err(Error::Invalid("no attribution rows to summarise".into()));
    }
    if rows.len() != x.n_rows() || names.len() != x.n_cols() || rows.iter().any(|r| r.phi.len() != x.n_cols()) {
        return Err(Error::Invalid("attribution rows, features and names do not align".into()));
    }
    let d = x.n_cols();
    let mut ranking: Vec<FeatureImportance> = (0..d)
        .map(|f| FeatureImportance {
            feature: f,
            name: names[f].clone(),
            mean_abs_phi: rows.iter().map(|r| r.phi[f].abs()).sum::<f64>() / rows.len() as f64,
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi));
    let mut points = Vec::with_capacity(rows.len() * d);
    for f in 0..d {
        let column: Vec<f64> = (0..x.n_rows()).map(|i| x.get(i, f)).collect();
        for ((row, value), pct) in rows.iter().zip(&column).zip(percentiles(&column)) {
            points.push(ShapPoint {
                patient_id: row.patient_id.clone(),
                feature: f,
                feature_value: *value,
                feature_percentile: pct,
                phi: row.phi[f],
            });
        }
    }
    Ok(ShapSummary { ranking, points })
}
