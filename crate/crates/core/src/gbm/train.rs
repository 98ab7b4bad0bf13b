use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cox::{cox_gradient_hessian, CoxState};
use super::tree::{Booster, BoostingConfig, Tree, TreeEnsemble, TreeNode};
use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Smallest loss reduction accepted for a split.
const MIN_SPLIT_GAIN: f64 = 1e-6;
const NO_SLOT: u32 = u32::MAX;

/// Fits a boosted Cox ensemble. Deterministic given `cfg.rng_seed`.
pub fn train(x: &FeatureMatrix, state: &CoxState, cfg: &BoostingConfig) -> Result<TreeEnsemble> {
    train_with_monitor(x, state, cfg, |_, _| {})
}

/// As [`train`], calling `monitor(round, margin)` with the training-set
/// predictions after every round.
pub fn train_with_monitor(
    x: &FeatureMatrix,
    state: &CoxState,
    cfg: &BoostingConfig,
    mut monitor: impl FnMut(usize, &[f64]),
) -> Result<TreeEnsemble> {
    cfg.validate()?;
    let n = x.n_rows();
    if n != state.len() {
        return Err(Error::Invalid(format!("{n} feature rows for {} survival records", state.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let columns = Columns::new(x);
    let mut ensemble = TreeEnsemble::empty(0.0, cfg.clone());
    if !columns.any_splittable() {
        return Ok(ensemble);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let all_features: Vec<usize> = (0..x.n_cols()).collect();
    let mut margin = vec![ensemble.base_score; n];
    let mut outputs: Vec<Vec<f64>> = Vec::new();

    for round in 0..cfg.num_boost_round {
        let dropped: Vec<usize> = if cfg.booster == Booster::Dart {
            (0..outputs.len()).filter(|_| rng.random_bool(cfg.rate_drop)).collect()
        } else {
            Vec::new()
        };
        let mut working = margin.clone();
        for &m in &dropped {
            for (w, o) in working.iter_mut().zip(&outputs[m]) {
                *w -= ensemble.shrinkage[m] * o;
            }
        }
        let (grad, hess) = cox_gradient_hessian(&working, state)?;

        let in_sample = sample_rows(&mut rng, n, cfg.subsample);
        let tree_features = sample_features(&mut rng, &all_features, cfg.colsample_bytree);
        let Some(tree) = grow_tree(x, &columns, &grad, &hess, &in_sample, &tree_features, cfg, &mut rng) else {
            monitor(round, &margin);
            continue;
        };
        let out: Vec<f64> = x.rows().map(|r| tree.predict(r)).collect();

        let k = dropped.len() as f64;
        let eta = cfg.learning_rate;
        let new_weight = if dropped.is_empty() { eta } else { eta / (k + eta) };
        if !dropped.is_empty() {
            let factor = k / (k + eta);
            for &m in &dropped {
                let old = ensemble.shrinkage[m];
                ensemble.shrinkage[m] = old * factor;
                for (v, o) in margin.iter_mut().zip(&outputs[m]) {
                    *v -= old * (1.0 - factor) * o;
                }
            }
        }
        for (v, o) in margin.iter_mut().zip(&out) {
            *v += new_weight * o;
        }
        ensemble.trees.push(tree);
        ensemble.shrinkage.push(new_weight);
        outputs.push(out);
        monitor(round, &margin);
    }
    Ok(ensemble)
}

/// Per-feature row orderings by value, with missing rows kept apart.
struct Columns {
    sorted: Vec<Vec<u32>>,
    missing: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
}

impl Columns {
    fn new(x: &FeatureMatrix) -> Self {
        let mut sorted = Vec::with_capacity(x.n_cols());
        let mut missing = Vec::with_capacity(x.n_cols());
        let mut values = Vec::with_capacity(x.n_cols());
        for f in 0..x.n_cols() {
            let col: Vec<f64> = (0..x.n_rows()).map(|i| x.get(i, f)).collect();
            let (mut present, absent): (Vec<u32>, Vec<u32>) =
                (0..x.n_rows() as u32).partition(|&i| !col[i as usize].is_nan());
            present.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            sorted.push(present);
            missing.push(absent);
            values.push(col);
        }
        Columns { sorted, missing, values }
    }

    fn any_splittable(&self) -> bool {
        self.sorted.iter().zip(&self.values).any(|(s, v)| match (s.first(), s.last()) {
            (Some(&a), Some(&b)) => v[a as usize] < v[b as usize],
            _ => false,
        })
    }
}

fn sample_rows(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> Vec<bool> {
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return vec![true; n];
    }
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, k) {
        mask[i] = true;
    }
    mask
}

fn sample_features(rng: &mut ChaCha8Rng, from: &[usize], fraction: f64) -> Vec<usize> {
    let k = ((fraction * from.len() as f64).floor() as usize).max(1);
    if k >= from.len() {
        return from.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect();
    picked.sort_unstable();
    picked
}

fn soft_threshold(g: f64, alpha: f64) -> f64 {
    g.signum() * (g.abs() - alpha).max(0.0)
}

fn leaf_weight(g: f64, h: f64, cfg: &BoostingConfig) -> f64 {
    let denom = h + cfg.reg_lambda;
    if denom > 0.0 {
        -soft_threshold(g, cfg.reg_alpha) / denom
    } else {
        0.0
    }
}

fn structure_score(g: f64, h: f64, cfg: &BoostingConfig) -> f64 {
    let denom = h + cfg.reg_lambda;
    if denom > 0.0 {
        soft_threshold(g, cfg.reg_alpha).powi(2) / denom
    } else {
        0.0
    }
}

struct OpenNode {
    arena: usize,
    g: f64,
    h: f64,
    features: Vec<bool>,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

#[derive(Clone, Copy, Default)]
struct Scan {
    g: f64,
    h: f64,
    last: f64,
    seen: bool,
    miss_g: f64,
    miss_h: f64,
    miss_n: usize,
}

#[allow(clippy::too_many_arguments)]
fn grow_tree(
    x: &FeatureMatrix,
    columns: &Columns,
    grad: &[f64],
    hess: &[f64],
    in_sample: &[bool],
    tree_features: &[usize],
    cfg: &BoostingConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Tree> {
    let n = x.n_rows();
    let mut slot = vec![NO_SLOT; n];
    let (mut g0, mut h0) = (0.0, 0.0);
    for i in (0..n).filter(|&i| in_sample[i]) {
        slot[i] = 0;
        g0 += grad[i];
        h0 += hess[i];
    }
    if h0 < cfg.min_child_weight {
        return None;
    }
    let mut nodes = vec![TreeNode::Leaf { weight: leaf_weight(g0, h0, cfg), cover: h0 }];
    let mut open = vec![OpenNode { arena: 0, g: g0, h: h0, features: Vec::new() }];

    for _depth in 0..cfg.max_depth {
        if open.is_empty() {
            break;
        }
        let level_features = sample_features(rng, tree_features, cfg.colsample_bylevel);
        for node in open.iter_mut() {
            let mut allowed = vec![false; x.n_cols()];
            for f in sample_features(rng, &level_features, cfg.colsample_bynode) {
                allowed[f] = true;
            }
            node.features = allowed;
        }

        let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
        let mut scans = vec![Scan::default(); open.len()];
        for &f in &level_features {
            for s in scans.iter_mut() {
                *s = Scan::default();
            }
            for &r in &columns.missing[f] {
                let s = slot[r as usize];
                if s != NO_SLOT {
                    let sc = &mut scans[s as usize];
                    sc.miss_g += grad[r as usize];
                    sc.miss_h += hess[r as usize];
                    sc.miss_n += 1;
                }
            }
            let col = &columns.values[f];
            for &r in &columns.sorted[f] {
                let r = r as usize;
                let s = slot[r];
                if s == NO_SLOT {
                    continue;
                }
                let s = s as usize;
                let node = &open[s];
                if !node.features[f] || node.h < 2.0 * cfg.min_child_weight {
                    continue;
                }
                let v = col[r];
                let sc = &mut scans[s];
                if sc.seen && v > sc.last {
                    let mut threshold = sc.last + (v - sc.last) / 2.0;
                    if threshold <= sc.last {
                        threshold = v;
                    }
                    let parent = structure_score(node.g, node.h, cfg);
                    let mut options = vec![(false, sc.g, sc.h)];
                    if sc.miss_n > 0 {
                        options.push((true, sc.g + sc.miss_g, sc.h + sc.miss_h));
                    }
                    for (default_left, gl, hl) in options {
                        let (gr, hr) = (node.g - gl, node.h - hl);
                        if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
                            continue;
                        }
                        let gain = 0.5 * (structure_score(gl, hl, cfg) + structure_score(gr, hr, cfg) - parent);
                        if gain > best[s].map_or(MIN_SPLIT_GAIN, |b| b.gain) {
                            best[s] = Some(Candidate { gain, feature: f, threshold, default_left });
                        }
                    }
                }
                sc.g += grad[r];
                sc.h += hess[r];
                sc.last = v;
                sc.seen = true;
            }
        }

        // children of split nodes form the next level
        let mut child_slot = vec![[NO_SLOT; 2]; open.len()];
        let mut next: Vec<OpenNode> = Vec::new();
        for (s, cand) in best.iter().enumerate() {
            if let Some(c) = cand {
                let left = nodes.len();
                nodes.push(TreeNode::Leaf { weight: 0.0, cover: 0.0 });
                nodes.push(TreeNode::Leaf { weight: 0.0, cover: 0.0 });
                nodes[open[s].arena] = TreeNode::Split {
                    feature_index: c.feature,
                    threshold: c.threshold,
                    left,
                    right: left + 1,
                    default_left: c.default_left,
                    cover: open[s].h,
                };
                child_slot[s] = [next.len() as u32, next.len() as u32 + 1];
                next.push(OpenNode { arena: left, g: 0.0, h: 0.0, features: Vec::new() });
                next.push(OpenNode { arena: left + 1, g: 0.0, h: 0.0, features: Vec::new() });
            }
        }
        for i in 0..n {
            let s = slot[i];
            if s == NO_SLOT {
                continue;
            }
            slot[i] = match best[s as usize] {
                None => NO_SLOT,
                Some(c) => {
                    let v = x.get(i, c.feature);
                    let go_left = if v.is_nan() { c.default_left } else { v < c.threshold };
                    let t = child_slot[s as usize][usize::from(!go_left)];
                    next[t as usize].g += grad[i];
                    next[t as usize].h += hess[i];
                    t
                }
            };
        }
        for node in &next {
            nodes[node.arena] = TreeNode::Leaf { weight: leaf_weight(node.g, node.h, cfg), cover: node.h };
        }
        open = next;
    }
    Some(Tree { nodes })
}
