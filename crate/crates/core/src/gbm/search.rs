use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cox::CoxState;
use super::train::train;
use super::tree::{Booster, BoostingConfig};
use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::stats::concordance_index_raw;

/// Train/validation row indices of one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Hyper-parameter space; integer and real ranges are inclusive and sampled
/// uniformly, the fraction and booster sets uniformly by element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub num_boost_round: (usize, usize),
    pub learning_rate: (f64, f64),
    pub max_depth: (usize, usize),
    pub fractions: Vec<f64>,
    pub min_child_weight: (f64, f64),
    pub reg_lambda: (f64, f64),
    pub reg_alpha: (f64, f64),
    pub boosters: Vec<Booster>,
    pub rate_drop: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            num_boost_round: (8, 256),
            learning_rate: (0.001, 0.1),
            max_depth: (1, 16),
            fractions: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            min_child_weight: (0.01, 3.0),
            reg_lambda: (0.1, 2.0),
            reg_alpha: (0.1, 2.0),
            boosters: vec![Booster::Gbtree, Booster::Dart],
            rate_drop: (0.1, 0.7),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Invalid(format!("search range for {name} is empty")))
            }
        };
        ordered("num_boost_round", self.num_boost_round.0 as f64, self.num_boost_round.1 as f64)?;
        ordered("learning_rate", self.learning_rate.0, self.learning_rate.1)?;
        ordered("max_depth", self.max_depth.0 as f64, self.max_depth.1 as f64)?;
        ordered("min_child_weight", self.min_child_weight.0, self.min_child_weight.1)?;
        ordered("reg_lambda", self.reg_lambda.0, self.reg_lambda.1)?;
        ordered("reg_alpha", self.reg_alpha.0, self.reg_alpha.1)?;
        ordered("rate_drop", self.rate_drop.0, self.rate_drop.1)?;
        if self.fractions.is_empty() || self.boosters.is_empty() {
            return Err(Error::Invalid("search space needs at least one fraction and one booster".into()));
        }
        Ok(())
    }

    pub fn contains(&self, cfg: &BoostingConfig) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let int_within = |v: usize, (lo, hi): (usize, usize)| v >= lo && v <= hi;
        int_within(cfg.num_boost_round, self.num_boost_round)
            && within(cfg.learning_rate, self.learning_rate)
            && int_within(cfg.max_depth, self.max_depth)
            && [cfg.subsample, cfg.colsample_bytree, cfg.colsample_bylevel, cfg.colsample_bynode]
                .iter()
                .all(|f| self.fractions.contains(f))
            && within(cfg.min_child_weight, self.min_child_weight)
            && within(cfg.reg_lambda, self.reg_lambda)
            && within(cfg.reg_alpha, self.reg_alpha)
            && self.boosters.contains(&cfg.booster)
            && within(cfg.rate_drop, self.rate_drop)
    }

    /// `n` configurations drawn from one stream seeded by `seed`; configuration
    /// `i` trains with seed `seed + i`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<BoostingConfig>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut fraction = || *self.fractions.choose(&mut rng).expect("non-empty");
            let (subsample, colsample_bytree, colsample_bylevel, colsample_bynode) =
                (fraction(), fraction(), fraction(), fraction());
            out.push(BoostingConfig {
                num_boost_round: rng.random_range(self.num_boost_round.0..=self.num_boost_round.1),
                learning_rate: uniform(&mut rng, self.learning_rate),
                max_depth: rng.random_range(self.max_depth.0..=self.max_depth.1),
                subsample,
                colsample_bytree,
                colsample_bylevel,
                colsample_bynode,
                min_child_weight: uniform(&mut rng, self.min_child_weight),
                reg_lambda: uniform(&mut rng, self.reg_lambda),
                reg_alpha: uniform(&mut rng, self.reg_alpha),
                booster: *self.boosters.choose(&mut rng).expect("non-empty"),
                rate_drop: uniform(&mut rng, self.rate_drop),
                rng_seed: seed.wrapping_add(i as u64),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best: BoostingConfig,
    /// Mean validation C-index of every candidate, in sampling order.
    pub scores: Vec<f64>,
}

struct PreparedFold {
    x: FeatureMatrix,
    state: CoxState,
    validation_x: FeatureMatrix,
    validation_obs: Vec<(f64, bool)>,
}

fn prepare(x: &FeatureMatrix, state: &CoxState, folds: &[Fold]) -> Result<Vec<PreparedFold>> {
    if folds.is_empty() {
        return Err(Error::Invalid("search needs at least one fold".into()));
    }
    let obs = state.observations();
    folds
        .iter()
        .enumerate()
        .map(|(j, fold)| {
            let mut seen = vec![false; x.n_rows()];
            for &i in fold.train.iter().chain(&fold.validation) {
                if i >= x.n_rows() {
                    return Err(Error::Invalid(format!("fold {j} references row {i}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Invalid(format!("fold {j}: row {i} is in both portions")));
                }
            }
            Ok(PreparedFold {
                x: x.select_rows(&fold.train),
                state: state.subset(&fold.train)?,
                validation_x: x.select_rows(&fold.validation),
                validation_obs: fold.validation.iter().map(|&i| obs[i]).collect(),
            })
        })
        .collect()
}

fn score_prepared(folds: &[PreparedFold], cfg: &BoostingConfig) -> Result<f64> {
    let mut total = 0.0;
    for (j, fold) in folds.iter().enumerate() {
        let cfg = BoostingConfig { rng_seed: cfg.rng_seed.wrapping_add(j as u64), ..cfg.clone() };
        let model = train(&fold.x, &fold.state, &cfg)?;
        let pred: Vec<f64> = fold.validation_x.rows().map(|r| model.predict(r)).collect();
        total += concordance_index_raw(&pred, &fold.validation_obs).unwrap_or(0.5);
    }
    Ok(total / folds.len() as f64)
}

/// Mean validation C-index of `cfg` over the folds. Fold `j` trains with seed
/// `cfg.rng_seed + j`; a validation portion without admissible pairs scores 0.5.
pub fn evaluate_config(x: &FeatureMatrix, state: &CoxState, folds: &[Fold], cfg: &BoostingConfig) -> Result<f64> {
    score_prepared(&prepare(x, state, folds)?, cfg)
}

/// Best candidate by mean validation C-index; ties go to the lowest index.
pub fn select_config(
    x: &FeatureMatrix,
    state: &CoxState,
    folds: &[Fold],
    candidates: &[BoostingConfig],
) -> Result<SearchOutcome> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidate configurations".into()));
    }
    let prepared = prepare(x, state, folds)?;
    let scores = candidates
        .par_iter()
        .map(|cfg| score_prepared(&prepared, cfg))
        .collect::<Result<Vec<f64>>>()?;
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(SearchOutcome { best_index, best: candidates[best_index].clone(), scores })
}

pub fn random_search(
    x: &FeatureMatrix,
    state: &CoxState,
    folds: &[Fold],
    space: &SearchSpace,
    n_samples: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if n_samples < 1 {
        return Err(Error::Invalid("random search needs at least one sample".into()));
    }
    select_config(x, state, folds, &space.sample(n_samples, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize, seed: u64) -> (FeatureMatrix, CoxState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let times: Vec<f64> = rows.iter().map(|r| -rng.random::<f64>().ln() / (4.0 * r[0]).exp()).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        (FeatureMatrix::from_rows(&rows).unwrap(), CoxState::new(times, events).unwrap())
    }

    fn folds(n: usize, k: usize) -> Vec<Fold> {
        (0..k)
            .map(|j| Fold {
                train: (0..n).filter(|i| i % k != j).collect(),
                validation: (0..n).filter(|i| i % k == j).collect(),
            })
            .collect()
    }

    #[test]
    fn default_space_samples_stay_inside() {
        let space = SearchSpace::default();
        let configs = space.sample(500, 9).unwrap();
        assert!(configs.iter().all(|c| space.contains(c) && c.validate().is_ok()));
        assert!(configs.iter().any(|c| c.booster == Booster::Dart));
        assert!(configs.iter().any(|c| c.max_depth == 16));
        assert_eq!(configs[3].rng_seed, 12);
        assert_eq!(configs, space.sample(500, 9).unwrap());
    }

    #[test]
    fn single_sample_is_returned() {
        let (x, state) = cohort(40, 1);
        let out = random_search(&x, &state, &folds(40, 4), &SearchSpace::default(), 1, 5).unwrap();
        assert_eq!(out.best, SearchSpace::default().sample(1, 5).unwrap()[0]);
        assert!(random_search(&x, &state, &folds(40, 4), &SearchSpace::default(), 0, 5).is_err());
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let (x, state) = cohort(40, 2);
        let cfg = BoostingConfig::default();
        let out = select_config(&x, &state, &folds(40, 4), &[cfg.clone(), cfg.clone(), cfg]).unwrap();
        assert_eq!(out.best_index, 0);
        assert_eq!(out.scores[0], out.scores[2]);
    }

    #[test]
    fn dominant_config_is_selected() {
        let (x, state) = cohort(90, 3);
        let learns = BoostingConfig { num_boost_round: 128, learning_rate: 0.1, max_depth: 3, ..BoostingConfig::default() };
        // column sampling keeps only one of the three features per tree, and
        // a single round with depth one yields a two-level score
        let weak = BoostingConfig {
            num_boost_round: 8,
            learning_rate: 0.001,
            max_depth: 1,
            colsample_bytree: 0.3,
            ..BoostingConfig::default()
        };
        let out = select_config(&x, &state, &folds(90, 5), &[weak.clone(), learns.clone()]).unwrap();
        assert_eq!(out.best, learns);
        let out = select_config(&x, &state, &folds(90, 5), &[learns.clone(), weak]).unwrap();
        assert_eq!(out.best, learns);
    }

    #[test]
    fn overlapping_fold_is_rejected() {
        let (x, state) = cohort(20, 4);
        let bad = vec![Fold { train: (0..15).collect(), validation: (14..20).collect() }];
        assert!(evaluate_config(&x, &state, &bad, &BoostingConfig::default()).is_err());
    }
}
