//! Repeated random splits, per-split refits, ensembled risk scores and
//! threshold-based stratification.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureVector, SurvivalRecord};
use crate::error::{Error, Result};
use crate::gbm::{random_search, train, BoostingConfig, CoxState, FeatureMatrix, Fold, SearchOutcome, SearchSpace, TreeEnsemble};
use crate::stats::concordance_index_raw;

pub const DEFAULT_SPLITS: usize = 25;
pub const DEFAULT_SEARCH_POINTS: usize = 4096;
/// Consecutive splits whose test portions partition the cohort.
pub const SPLITS_PER_BLOCK: usize = 5;
const MIN_PATIENTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split_id: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Train and validation sizes for `n` patients; the test portion takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let validation = (0.2 * n as f64).round() as usize;
    (train, validation)
}

/// 60/20/20 splits. Each block of five consecutive splits cuts one uniform
/// shuffle into five test portions, so a patient is tested exactly once per
/// complete block; the remaining patients of every split are shuffled
/// independently into train and validation.
pub fn make_splits(patient_ids: &[String], n_splits: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    let n = patient_ids.len();
    if n < MIN_PATIENTS {
        return Err(Error::InsufficientData { needed: MIN_PATIENTS, got: n });
    }
    if n_splits == 0 {
        return Err(Error::Invalid("at least one split is required".into()));
    }
    let (_, n_val) = split_sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::with_capacity(n_splits);
    let mut block: Vec<usize> = Vec::new();
    for split_id in 0..n_splits {
        let j = split_id % SPLITS_PER_BLOCK;
        if j == 0 {
            block = (0..n).collect();
            block.shuffle(&mut rng);
        }
        let lo = j * n / SPLITS_PER_BLOCK;
        let hi = (j + 1) * n / SPLITS_PER_BLOCK;
        let test_idx = &block[lo..hi];
        let mut rest: Vec<usize> = block[..lo].iter().chain(&block[hi..]).copied().collect();
        rest.sort_unstable();
        rest.shuffle(&mut rng);
        let n_val = n_val.min(rest.len().saturating_sub(1));
        let name = |idx: &[usize]| -> Vec<String> {
            let mut v: Vec<String> = idx.iter().map(|&i| patient_ids[i].clone()).collect();
            v.sort();
            v
        };
        plans.push(SplitPlan {
            split_id,
            train: name(&rest[n_val..]),
            validation: name(&rest[..n_val]),
            test: name(test_idx),
        });
    }
    Ok(plans)
}

/// Feature rows aligned with one endpoint's survival records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub patient_ids: Vec<String>,
    pub x: FeatureMatrix,
    pub state: CoxState,
}

impl Dataset {
    /// Every feature row needs exactly one survival record; records of other
    /// patients are ignored.
    pub fn new(features: &[FeatureVector], survival: &[SurvivalRecord]) -> Result<Self> {
        let mut by_id: HashMap<&str, &SurvivalRecord> = HashMap::new();
        for r in survival {
            if by_id.insert(&r.patient_id, r).is_some() {
                return Err(Error::Conflict(format!("patient {} has more than one survival record", r.patient_id)));
            }
        }
        let mut ids = Vec::with_capacity(features.len());
        let mut times = Vec::with_capacity(features.len());
        let mut events = Vec::with_capacity(features.len());
        for f in features {
            let r = by_id
                .get(f.patient_id.as_str())
                .ok_or_else(|| Error::Protocol(format!("patient {} has features but no survival record", f.patient_id)))?;
            ids.push(f.patient_id.clone());
            times.push(r.time_months);
            events.push(r.event);
        }
        if ids.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: ids.len() });
        }
        let rows: Vec<&[f64]> = features.iter().map(|f| &f.values[..]).collect();
        Ok(Dataset { patient_ids: ids, x: FeatureMatrix::from_rows(&rows)?, state: CoxState::new(times, events)? })
    }

    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        let pos: HashMap<&str, usize> = self.patient_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
        ids.iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| Error::Protocol(format!("split references unknown patient {id}"))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrsSource {
    IntraArm,
    CrossArm,
}

impl DrsSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DrsSource::IntraArm => "intra_arm",
            DrsSource::CrossArm => "cross_arm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskGroup {
    HighRisk,
    LowRisk,
}

impl RiskGroup {
    /// High risk iff strictly above the threshold.
    pub fn classify(drs: f64, threshold: f64) -> Self {
        if drs > threshold {
            RiskGroup::HighRisk
        } else {
            RiskGroup::LowRisk
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::HighRisk => "HighRisk",
            RiskGroup::LowRisk => "LowRisk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrsResult {
    pub patient_id: String,
    pub drs: f64,
    pub source: DrsSource,
    pub threshold: f64,
    pub group: RiskGroup,
}

impl DrsResult {
    pub fn new(patient_id: String, drs: f64, source: DrsSource, threshold: f64) -> Self {
        DrsResult { patient_id, drs, source, threshold, group: RiskGroup::classify(drs, threshold) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub split_id: usize,
    pub model: TreeEnsemble,
    pub validation_median: f64,
    pub validation_c_index: Option<f64>,
    pub test_c_index: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryOutcome {
    pub models: Vec<SplitModel>,
    pub threshold: f64,
    pub intra_arm: Vec<DrsResult>,
}

impl DiscoveryOutcome {
    pub fn ensembles(&self) -> Vec<&TreeEnsemble> {
        self.models.iter().map(|m| &m.model).collect()
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Threshold = mean over splits of the median validation prediction.
pub fn average_median_threshold(validation_medians: &[f64]) -> Result<f64> {
    if validation_medians.is_empty() {
        return Err(Error::Protocol("no validation medians to average".into()));
    }
    Ok(validation_medians.iter().sum::<f64>() / validation_medians.len() as f64)
}

/// Folds for the hyper-parameter search: each split's train and validation portions.
pub fn search_folds(data: &Dataset, plans: &[SplitPlan]) -> Result<Vec<Fold>> {
    plans
        .iter()
        .map(|p| Ok(Fold { train: data.indices(&p.train)?, validation: data.indices(&p.validation)? }))
        .collect()
}

fn check_plan(data: &Dataset, plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let train = data.indices(&plan.train)?;
    let validation = data.indices(&plan.validation)?;
    let test = data.indices(&plan.test)?;
    let mut seen = vec![false; data.len()];
    for &i in train.iter().chain(&validation).chain(&test) {
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Protocol(format!(
                "split {}: patient {} is in more than one portion",
                plan.split_id, data.patient_ids[i]
            )));
        }
    }
    if validation.is_empty() {
        return Err(Error::Protocol(format!("split {} has an empty validation portion", plan.split_id)));
    }
    Ok((train, validation, test))
}

/// Refits `config` on every split's train portion (split `j` seeded with
/// `master_seed + j`) and ensembles test-portion predictions. With at least
/// one complete block of splits every patient must be tested at least once;
/// shorter plans report only the patients they test.
pub fn run_discovery(data: &Dataset, plans: &[SplitPlan], config: &BoostingConfig, master_seed: u64) -> Result<DiscoveryOutcome> {
    if plans.is_empty() {
        return Err(Error::Protocol("no splits".into()));
    }
    let portions = plans.iter().map(|p| check_plan(data, p)).collect::<Result<Vec<_>>>()?;
    let obs = data.state.observations();
    let fitted = plans
        .par_iter()
        .zip(portions.par_iter())
        .map(|(plan, (train_idx, val_idx, test_idx))| {
            let cfg = BoostingConfig { rng_seed: master_seed.wrapping_add(plan.split_id as u64), ..config.clone() };
            let model = train(&data.x.select_rows(train_idx), &data.state.subset(train_idx)?, &cfg)?;
            let predict = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| model.predict(data.x.row(i))).collect() };
            let val_pred = predict(val_idx);
            let test_pred = predict(test_idx);
            let c = |pred: &[f64], idx: &[usize]| {
                concordance_index_raw(pred, &idx.iter().map(|&i| obs[i]).collect::<Vec<_>>()).ok()
            };
            Ok((
                SplitModel {
                    split_id: plan.split_id,
                    validation_median: median(&val_pred).expect("non-empty validation"),
                    validation_c_index: c(&val_pred, val_idx),
                    test_c_index: c(&test_pred, test_idx),
                    model,
                },
                test_pred,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sum = vec![0.0; data.len()];
    let mut count = vec![0usize; data.len()];
    for ((_, test_pred), (_, _, test_idx)) in fitted.iter().zip(&portions) {
        for (&i, &p) in test_idx.iter().zip(test_pred) {
            sum[i] += p;
            count[i] += 1;
        }
    }
    if plans.len() >= SPLITS_PER_BLOCK {
        if let Some(i) = count.iter().position(|&c| c == 0) {
            return Err(Error::Protocol(format!("patient {} is never in a test portion", data.patient_ids[i])));
        }
    }
    let medians: Vec<f64> = fitted.iter().map(|(m, _)| m.validation_median).collect();
    let threshold = average_median_threshold(&medians)?;
    let intra_arm = (0..data.len())
        .filter(|&i| count[i] > 0)
        .map(|i| DrsResult::new(data.patient_ids[i].clone(), sum[i] / count[i] as f64, DrsSource::IntraArm, threshold))
        .collect();
    Ok(DiscoveryOutcome { models: fitted.into_iter().map(|(m, _)| m).collect(), threshold, intra_arm })
}

/// Mean prediction of all models for each external patient, stratified by the
/// discovery threshold.
pub fn run_cross_arm(models: &[&TreeEnsemble], patients: &[FeatureVector], threshold: f64) -> Result<Vec<DrsResult>> {
    if models.is_empty() {
        return Err(Error::Protocol("no models to score with".into()));
    }
    Ok(patients
        .iter()
        .map(|p| {
            let drs = models.iter().map(|m| m.predict(&p.values)).sum::<f64>() / models.len() as f64;
            DrsResult::new(p.patient_id.clone(), drs, DrsSource::CrossArm, threshold)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_splits: usize,
    pub search_points: usize,
    pub master_seed: u64,
    pub space: SearchSpace,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_splits: DEFAULT_SPLITS,
            search_points: DEFAULT_SEARCH_POINTS,
            master_seed: 0,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolRun {
    pub plans: Vec<SplitPlan>,
    pub search: SearchOutcome,
    pub discovery: DiscoveryOutcome,
}

/// Splits, search over the train/validation portions, refits and ensembling,
/// all seeded from `cfg.master_seed`.
pub fn run_protocol(data: &Dataset, cfg: &ProtocolConfig) -> Result<ProtocolRun> {
    let plans = make_splits(&data.patient_ids, cfg.n_splits, cfg.master_seed)?;
    let folds = search_folds(data, &plans)?;
    let search = random_search(&data.x, &data.state, &folds, &cfg.space, cfg.search_points, cfg.master_seed)?;
    let discovery = run_discovery(data, &plans, &search.best, cfg.master_seed)?;
    Ok(ProtocolRun { plans, search, discovery })
}
