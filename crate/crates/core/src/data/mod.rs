//! Core domain types shared by every stage of the pipeline.

mod io;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phenotype::{Phenotype, N_PHENOTYPES};

pub use io::{
    load_cohort, load_features, load_mask, load_nuclei, load_survival, save_cohort,
    save_features, save_mask, save_nuclei, save_survival, write_atomic, NucleusEntry,
    COHORT_MASKS_DIR, COHORT_NUCLEI_FILE, COHORT_SURVIVAL_FILE,
};
pub use synthetic::{generate_synthetic_cohort, GroundTruth, SyntheticCohortSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Marker {
    #[serde(rename = "CK")]
    Ck,
    #[serde(rename = "PD1")]
    Pd1,
    #[serde(rename = "PDL1")]
    Pdl1,
    #[serde(rename = "CD8")]
    Cd8,
    #[serde(rename = "CD4")]
    Cd4,
    #[serde(rename = "CD45RO")]
    Cd45ro,
    #[serde(rename = "FOXP3")]
    Foxp3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Panel {
    #[serde(rename = "P1")]
    Panel1,
    #[serde(rename = "P2")]
    Panel2,
}

impl Panel {
    pub fn markers(self) -> &'static [Marker] {
        match self {
            Panel::Panel1 => &[Marker::Ck, Marker::Pd1, Marker::Pdl1, Marker::Cd8],
            Panel::Panel2 => &[Marker::Cd4, Marker::Cd8, Marker::Cd45ro, Marker::Foxp3],
        }
    }
}

impl fmt::Display for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Panel::Panel1 => "P1",
            Panel::Panel2 => "P2",
        })
    }
}

/// Marker → positive flag for one nucleus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Positivity(BTreeMap<Marker, bool>);

impl Positivity {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Marker, bool)>) -> Self {
        Positivity(pairs.into_iter().collect())
    }

    pub fn get(&self, marker: Marker) -> Option<bool> {
        self.0.get(&marker).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Marker, bool)> + '_ {
        self.0.iter().map(|(m, v)| (*m, *v))
    }

    /// Keys must be exactly the marker set of `panel`.
    pub fn check_panel(&self, panel: Panel) -> Result<()> {
        let expected = panel.markers();
        if self.0.len() != expected.len() || !expected.iter().all(|m| self.0.contains_key(m)) {
            return Err(Error::MarkerSet {
                panel: panel.to_string(),
                detail: format!(
                    "got {:?}, expected {:?}",
                    self.0.keys().collect::<Vec<_>>(),
                    expected
                ),
            });
        }
        Ok(())
    }
}

/// One detected nucleus in the reference (Panel 1) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusRecord {
    pub id: u64,
    pub centroid_um: Point2,
    pub panel: Panel,
    pub positivity: Positivity,
}

impl NucleusRecord {
    pub fn new(id: u64, centroid_um: Point2, panel: Panel, positivity: Positivity) -> Result<Self> {
        if !centroid_um.is_finite() || centroid_um.x < 0.0 || centroid_um.y < 0.0 {
            return Err(Error::Invalid(format!(
                "nucleus {id}: centroid must be finite and non-negative, got ({}, {})",
                centroid_um.x, centroid_um.y
            )));
        }
        positivity.check_panel(panel)?;
        Ok(NucleusRecord {
            id,
            centroid_um,
            panel,
            positivity,
        })
    }

    pub fn phenotype(&self) -> Phenotype {
        crate::phenotype::assign_phenotype(self.panel, &self.positivity)
            .unwrap_or(Phenotype::Unclassified)
    }
}

/// Binary raster in μm space. Pixel `(row, col)` covers
/// `[origin.x + col·size, origin.x + (col+1)·size) × [origin.y + row·size, …)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    grid: Vec<bool>,
    pixel_size_um: f64,
    origin_um: Point2,
}

impl RegionMask {
    pub fn new(
        width: usize,
        height: usize,
        grid: Vec<bool>,
        pixel_size_um: f64,
        origin_um: Point2,
    ) -> Result<Self> {
        if grid.len() != width * height {
            return Err(Error::Invalid(format!(
                "mask grid has {} cells, expected {width}×{height}",
                grid.len()
            )));
        }
        if !(pixel_size_um > 0.0) || !pixel_size_um.is_finite() {
            return Err(Error::Invalid(format!(
                "pixel size must be positive, got {pixel_size_um}"
            )));
        }
        if !origin_um.is_finite() {
            return Err(Error::Invalid("mask origin must be finite".into()));
        }
        Ok(RegionMask {
            width,
            height,
            grid,
            pixel_size_um,
            origin_um,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn pixel_size_um(&self) -> f64 {
        self.pixel_size_um
    }

    pub fn origin_um(&self) -> Point2 {
        self.origin_um
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn area_um2(&self) -> f64 {
        self.count() as f64 * self.pixel_size_um * self.pixel_size_um
    }

    /// Same geometry, different foreground.
    pub fn with_grid(&self, grid: Vec<bool>) -> RegionMask {
        assert_eq!(grid.len(), self.grid.len());
        RegionMask {
            grid,
            ..self.clone()
        }
    }

    /// Pixel containing `p`, if inside the grid.
    pub fn pixel_of(&self, p: Point2) -> Option<(usize, usize)> {
        let col = ((p.x - self.origin_um.x) / self.pixel_size_um).floor();
        let row = ((p.y - self.origin_um.y) / self.pixel_size_um).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.pixel_of(p).is_some_and(|(r, c)| self.get(r, c))
    }

    /// Centre of pixel `(row, col)` in μm.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point2 {
        Point2::new(
            self.origin_um.x + (col as f64 + 0.5) * self.pixel_size_um,
            self.origin_um.y + (row as f64 + 0.5) * self.pixel_size_um,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "ARM1")]
    Arm1,
    #[serde(rename = "ARM3")]
    Arm3,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Arm1 => "ARM1",
            Arm::Arm3 => "ARM3",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ARM1" => Ok(Arm::Arm1),
            "ARM3" => Ok(Arm::Arm3),
            _ => Err(Error::Invalid(format!("unknown arm {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    #[serde(rename = "PFS")]
    Pfs,
    #[serde(rename = "OS")]
    Os,
}

impl Endpoint {
    /// Administrative censoring horizon used for reporting, in months.
    pub fn default_censor_months(self) -> f64 {
        match self {
            Endpoint::Pfs => 12.0,
            Endpoint::Os => 36.0,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Endpoint::Pfs => "PFS",
            Endpoint::Os => "OS",
        })
    }
}

impl FromStr for Endpoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PFS" => Ok(Endpoint::Pfs),
            "OS" => Ok(Endpoint::Os),
            _ => Err(Error::Invalid(format!("unknown endpoint {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub arm: Arm,
    pub endpoint: Endpoint,
    pub time_months: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(
        patient_id: impl Into<String>,
        arm: Arm,
        endpoint: Endpoint,
        time_months: f64,
        event: bool,
    ) -> Result<Self> {
        if !(time_months >= 0.0) || !time_months.is_finite() {
            return Err(Error::Invalid(format!(
                "time_months must be finite and >= 0, got {time_months}"
            )));
        }
        Ok(SurvivalRecord {
            patient_id: patient_id.into(),
            arm,
            endpoint,
            time_months,
            event,
        })
    }
}

/// The 14 phenotype densities (count per mm²) of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub patient_id: String,
    pub values: [f64; N_PHENOTYPES],
}

impl FeatureVector {
    pub fn new(patient_id: impl Into<String>, values: [f64; N_PHENOTYPES]) -> Result<Self> {
        let fv = FeatureVector {
            patient_id: patient_id.into(),
            values,
        };
        fv.validate()?;
        Ok(fv)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, v)) = self
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Invalid(format!(
                "patient {}: feature {} = {v} is not a finite non-negative density",
                self.patient_id,
                Phenotype::ALL[i]
            )));
        }
        Ok(())
    }
}

/// One tissue piece: its registered nuclei from both panels and its tumour mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TissuePiece {
    pub nuclei: Vec<NucleusRecord>,
    pub tumour: RegionMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSlides {
    pub patient_id: String,
    pub pieces: Vec<TissuePiece>,
}

/// A patient excluded at load time, with the reasons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub patient_id: String,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientSlides>,
    pub survival: Vec<SurvivalRecord>,
    pub rejections: Vec<Rejection>,
}

impl Cohort {
    pub fn patient_ids(&self) -> Vec<&str> {
        self.patients.iter().map(|p| p.patient_id.as_str()).collect()
    }

    /// Survival records for one endpoint, in patient order.
    pub fn survival_for(&self, endpoint: Endpoint) -> Vec<SurvivalRecord> {
        self.patients
            .iter()
            .filter_map(|p| {
                self.survival
                    .iter()
                    .find(|s| s.patient_id == p.patient_id && s.endpoint == endpoint)
                    .cloned()
            })
            .collect()
    }

    /// Per-patient feature vectors with tissue pieces pooled.
    pub fn features(&self, extent_um: f64) -> Result<Vec<FeatureVector>> {
        self.patients
            .iter()
            .map(|p| patient_features(p, extent_um))
            .collect()
    }
}

/// Density features for one patient, pooling counts and areas over pieces.
pub fn patient_features(patient: &PatientSlides, extent_um: f64) -> Result<FeatureVector> {
    let regions = patient
        .pieces
        .iter()
        .map(|piece| crate::phenotype::dilate_region(&piece.tumour, extent_um))
        .collect::<Result<Vec<_>>>()?;
    let pieces: Vec<(&[NucleusRecord], &crate::phenotype::AnalysisRegion)> = patient
        .pieces
        .iter()
        .zip(&regions)
        .map(|(piece, region)| (piece.nuclei.as_slice(), region))
        .collect();
    let values = crate::phenotype::pooled_density_features(&pieces)?;
    FeatureVector::new(patient.patient_id.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positivity_must_match_panel() {
        let p1 = Positivity::from_pairs(Panel::Panel1.markers().iter().map(|m| (*m, false)));
        assert!(p1.check_panel(Panel::Panel1).is_ok());
        assert!(p1.check_panel(Panel::Panel2).is_err());
        let partial = Positivity::from_pairs([(Marker::Ck, true)]);
        assert!(partial.check_panel(Panel::Panel1).is_err());
    }

    #[test]
    fn nucleus_rejects_negative_or_nan_centroids() {
        let p = Phenotype::CkPos.expression().unwrap();
        assert!(NucleusRecord::new(0, Point2::new(-1.0, 0.0), Panel::Panel1, p.clone()).is_err());
        assert!(NucleusRecord::new(0, Point2::new(f64::NAN, 0.0), Panel::Panel1, p.clone()).is_err());
        assert!(NucleusRecord::new(0, Point2::new(0.0, 3.0), Panel::Panel1, p).is_ok());
    }

    #[test]
    fn mask_area_and_lookup() {
        let m = RegionMask::new(3, 2, vec![true, false, true, false, false, true], 2.0, Point2::new(10.0, 0.0))
            .unwrap();
        assert_eq!(m.count(), 3);
        assert_eq!(m.area_um2(), 12.0);
        assert!(m.contains(Point2::new(10.5, 1.0)));
        assert!(!m.contains(Point2::new(12.5, 1.0)));
        assert!(m.contains(Point2::new(15.9, 3.9)));
        assert!(!m.contains(Point2::new(16.0, 3.9)));
        assert!(!m.contains(Point2::new(9.9, 1.0)));
        assert!(RegionMask::new(1, 1, vec![true], 0.0, Point2::default()).is_err());
    }

    #[test]
    fn survival_rejects_negative_time() {
        assert!(SurvivalRecord::new("a", Arm::Arm1, Endpoint::Pfs, -1.0, true).is_err());
    }

    #[test]
    fn feature_vector_rejects_nan() {
        let mut v = [1.0; N_PHENOTYPES];
        v[3] = f64::NAN;
        assert!(FeatureVector::new("p", v).is_err());
    }
}
