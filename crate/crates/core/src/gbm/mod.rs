//! Gradient-boosted trees for the Cox proportional-hazards objective.

mod cox;
mod search;
mod train;
mod tree;

pub use cox::{cox_gradient_hessian, cox_neg_log_partial_likelihood, CoxState};
pub use search::{evaluate_config, random_search, select_config, Fold, SearchOutcome, SearchSpace};
pub use train::{train, train_with_monitor};
pub use tree::{Booster, BoostingConfig, Tree, TreeEnsemble, TreeNode};

use crate::error::{Error, Result};

/// Dense row-major feature matrix; NaN marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl FeatureMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        if n_cols == 0 {
            return Err(Error::Invalid("feature matrix needs at least one row and column".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::Invalid(format!("row {i} has {} values, expected {n_cols}", r.len())));
            }
            if r.iter().any(|v| v.is_infinite()) {
                return Err(Error::Invalid(format!("row {i} has an infinite value")));
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureMatrix { data, n_rows: rows.len(), n_cols })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix { data, n_rows: rows.len(), n_cols: self.n_cols }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols)
    }
}
