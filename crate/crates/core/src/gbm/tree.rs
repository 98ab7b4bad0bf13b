use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Booster {
    Gbtree,
    Dart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostingConfig {
    pub num_boost_round: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub colsample_bylevel: f64,
    pub colsample_bynode: f64,
    pub min_child_weight: f64,
    pub reg_lambda: f64,
    pub reg_alpha: f64,
    pub booster: Booster,
    pub rate_drop: f64,
    pub rng_seed: u64,
}

impl Default for BoostingConfig {
    fn default() -> Self {
        BoostingConfig {
            num_boost_round: 64,
            learning_rate: 0.05,
            max_depth: 3,
            subsample: 0.8,
            colsample_bytree: 0.8,
            colsample_bylevel: 0.8,
            colsample_bynode: 0.8,
            min_child_weight: 1.0,
            reg_lambda: 1.0,
            reg_alpha: 0.1,
            booster: Booster::Gbtree,
            rate_drop: 0.1,
            rng_seed: 0,
        }
    }
}

impl BoostingConfig {
    /// Checks that the configuration can be trained. Tighter bounds for the
    /// search live in [`super::SearchSpace`].
    pub fn validate(&self) -> Result<()> {
        let fraction = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name} = {v} must lie in (0, 1]")))
            }
        };
        fraction("subsample", self.subsample)?;
        fraction("colsample_bytree", self.colsample_bytree)?;
        fraction("colsample_bylevel", self.colsample_bylevel)?;
        fraction("colsample_bynode", self.colsample_bynode)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if self.max_depth == 0 {
            return Err(Error::Invalid("max_depth must be at least 1".into()));
        }
        for (name, v) in [
            ("min_child_weight", self.min_child_weight),
            ("reg_lambda", self.reg_lambda),
            ("reg_alpha", self.reg_alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.rate_drop) {
            return Err(Error::Invalid(format!("rate_drop = {} must lie in [0, 1]", self.rate_drop)));
        }
        Ok(())
    }
}

/// Node of a tree stored as an arena; the root is index 0. `cover` is the
/// Hessian sum of the training rows that reached the node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature_index: usize,
        threshold: f64,
        left: usize,
        right: usize,
        default_left: bool,
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match *self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => cover,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: f64) -> Self {
        Tree { nodes: vec![TreeNode::Leaf { weight, cover }] }
    }

    /// Goes left when `x < threshold`; a missing (NaN or absent) value follows
    /// the default direction.
    pub fn leaf_for(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split { feature_index, threshold, left, right, default_left, .. } => {
                    let v = x.get(feature_index).copied().unwrap_or(f64::NAN);
                    let go_left = if v.is_nan() { default_left } else { v < threshold };
                    i = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_for(x)] {
            TreeNode::Leaf { weight, .. } => weight,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Children always follow their parent in the arena, so the tree is acyclic.
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("tree has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                TreeNode::Leaf { weight, .. } if !weight.is_finite() => {
                    return Err(Error::Invalid(format!("leaf {i} has non-finite weight")));
                }
                TreeNode::Split { feature_index, left, right, .. } => {
                    if feature_index >= n_features {
                        return Err(Error::Invalid(format!("node {i} splits on feature {feature_index}")));
                    }
                    if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() || left == right {
                        return Err(Error::Invalid(format!("node {i} has invalid children")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// f(x) = base_score + Σ shrinkage[m] · trees[m](x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub shrinkage: Vec<f64>,
    pub config: BoostingConfig,
}

impl TreeEnsemble {
    pub fn empty(base_score: f64, config: BoostingConfig) -> Self {
        TreeEnsemble { base_score, trees: Vec::new(), shrinkage: Vec::new(), config }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().zip(&self.shrinkage).map(|(t, s)| s * t.predict(x)).sum::<f64>()
    }

    pub fn predict_rows<R: AsRef<[f64]>>(&self, rows: &[R]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r.as_ref())).collect()
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.trees.len() != self.shrinkage.len() {
            return Err(Error::Invalid("one shrinkage factor per tree is required".into()));
        }
        if !self.base_score.is_finite() || self.shrinkage.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("ensemble weights must be finite".into()));
        }
        self.trees.iter().try_for_each(|t| t.validate(n_features))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("model JSON: {e}")))
    }
}
