//! CLI-level file formats: DRS tables, model bundles and centroid lists.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use time_drs::data::{Arm, Endpoint, Point2};
use time_drs::gbm::{BoostingConfig, TreeEnsemble};
use time_drs::protocol::{DrsResult, DrsSource, RiskGroup};

pub const DRS_HEADER: &str = "patient_id,drs,source,group";

/// Every split model of one protocol run with the shared stratification threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub arm: Arm,
    pub endpoint: Endpoint,
    pub threshold: f64,
    pub selected_config: BoostingConfig,
    pub models: Vec<TreeEnsemble>,
}

impl ModelBundle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let bundle: ModelBundle =
            serde_json::from_str(&text).with_context(|| format!("{} is not a model bundle", path.display()))?;
        if bundle.models.is_empty() {
            bail!("{} contains no models", path.display());
        }
        for m in &bundle.models {
            m.validate(time_drs::phenotype::N_PHENOTYPES)?;
        }
        Ok(bundle)
    }
}

pub fn drs_csv(rows: &[DrsResult]) -> String {
    let mut out = String::from(DRS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.patient_id, r.drs, r.source.as_str(), r.group.as_str()));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrsRow {
    pub patient_id: String,
    pub drs: f64,
    pub source: DrsSource,
    pub group: RiskGroup,
}

pub fn load_drs(path: &Path) -> Result<Vec<DrsRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if headers != DRS_HEADER {
        bail!("{}: expected header {DRS_HEADER:?}, found {headers:?}", path.display());
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        let line = i + 2;
        let drs: f64 = rec[1].parse().with_context(|| format!("{}:{line}: bad drs {:?}", path.display(), &rec[1]))?;
        let source = match &rec[2] {
            "intra_arm" => DrsSource::IntraArm,
            "cross_arm" => DrsSource::CrossArm,
            s => bail!("{}:{line}: unknown source {s:?}", path.display()),
        };
        let group = match &rec[3] {
            "HighRisk" => RiskGroup::HighRisk,
            "LowRisk" => RiskGroup::LowRisk,
            s => bail!("{}:{line}: unknown group {s:?}", path.display()),
        };
        rows.push(DrsRow { patient_id: rec[0].to_string(), drs, source, group });
    }
    Ok(rows)
}

/// Centroid list with header `x_um,y_um`.
pub fn load_centroids(path: &Path) -> Result<Vec<Point2>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers != ["x_um", "y_um"] {
        bail!("{}: expected header x_um,y_um", path.display());
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().with_context(|| format!("{}:{}: bad coordinate {s:?}", path.display(), i + 2))?;
                if !v.is_finite() {
                    bail!("{}:{}: non-finite coordinate", path.display(), i + 2);
                }
                Ok(v)
            };
            Ok(Point2::new(parse(&rec[0])?, parse(&rec[1])?))
        })
        .collect()
}
