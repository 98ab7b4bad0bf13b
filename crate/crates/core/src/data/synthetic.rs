//! Planted-hazard synthetic cohorts with known risk ordering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{
    Arm, Cohort, Endpoint, FeatureVector, NucleusRecord, PatientSlides, Point2, Positivity,
    RegionMask, SurvivalRecord, TissuePiece,
};
use crate::error::{Error, Result};
use crate::phenotype::{dilate_region, pooled_density_features, Phenotype, DEFAULT_EXTENT_UM, N_PHENOTYPES};

/// Median densities (per mm²) of the log-normal feature draws, canonical order.
const MEDIAN_DENSITY: [f64; N_PHENOTYPES] = [
    800.0, 60.0, 40.0, 120.0, 50.0, 25.0, 150.0, 80.0, 40.0, 20.0, 8.0, 60.0, 30.0, 15.0,
];
const LOG_SD: f64 = 0.6;
const GRID: usize = 160;
const PIXEL_UM: f64 = 8.0;
/// OS hazard relative to PFS hazard.
const OS_HAZARD_FACTOR: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohortSpec {
    pub n_patients: usize,
    /// Log-hazard weights on standardized features.
    pub planted_coefficients: [f64; N_PHENOTYPES],
    pub censoring_rate: f64,
    /// PFS hazard per month at zero log-hazard.
    pub baseline_hazard: f64,
    pub rng_seed: u64,
    pub arm: Arm,
}

impl SyntheticCohortSpec {
    pub fn new(n_patients: usize, planted_coefficients: [f64; N_PHENOTYPES], rng_seed: u64) -> Self {
        SyntheticCohortSpec {
            n_patients,
            planted_coefficients,
            censoring_rate: 0.2,
            baseline_hazard: 0.17,
            rng_seed,
            arm: Arm::Arm1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 10 {
            return Err(Error::Invalid(format!("n_patients must be >= 10, got {}", self.n_patients)));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::Invalid(format!("censoring_rate must be in [0,1), got {}", self.censoring_rate)));
        }
        if !(self.baseline_hazard > 0.0) || !self.baseline_hazard.is_finite() {
            return Err(Error::Invalid("baseline_hazard must be positive".into()));
        }
        if self.planted_coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("planted coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Planted log-hazards and realized features, in cohort patient order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub patient_ids: Vec<String>,
    pub log_hazard: Vec<f64>,
    pub features: Vec<FeatureVector>,
}

impl GroundTruth {
    /// Patient indices from highest to lowest true hazard (stable on ties).
    pub fn risk_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.log_hazard.len()).collect();
        idx.sort_by(|&a, &b| self.log_hazard[b].total_cmp(&self.log_hazard[a]));
        idx
    }
}

fn elliptical_tumour(rng: &mut ChaCha8Rng) -> RegionMask {
    let half = GRID as f64 / 2.0;
    let cx = half + rng.random_range(-8.0..8.0);
    let cy = half + rng.random_range(-8.0..8.0);
    let a = rng.random_range(20.0..45.0);
    let b = rng.random_range(20.0..45.0);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let grid = (0..GRID * GRID)
        .map(|i| {
            let (r, col) = ((i / GRID) as f64 + 0.5, (i % GRID) as f64 + 0.5);
            let (dx, dy) = (col - cx, r - cy);
            let u = (c * dx + s * dy) / a;
            let v = (-s * dx + c * dy) / b;
            u * u + v * v <= 1.0
        })
        .collect();
    RegionMask::new(GRID, GRID, grid, PIXEL_UM, Point2::new(0.0, 0.0)).expect("valid synthetic mask")
}

fn scatter(
    rng: &mut ChaCha8Rng,
    mask: &RegionMask,
    pixels: &[(usize, usize)],
    count: usize,
    panel_pos: (super::Panel, &Positivity),
    next_id: &mut u64,
    out: &mut Vec<NucleusRecord>,
) {
    for _ in 0..count {
        let (r, c) = pixels[rng.random_range(0..pixels.len())];
        let ps = mask.pixel_size_um();
        let o = mask.origin_um();
        let p = Point2::new(
            o.x + (c as f64 + rng.random_range(0.05..0.95)) * ps,
            o.y + (r as f64 + rng.random_range(0.05..0.95)) * ps,
        );
        out.push(
            NucleusRecord::new(*next_id, p, panel_pos.0, panel_pos.1.clone()).expect("valid synthetic nucleus"),
        );
        *next_id += 1;
    }
}

fn foreground(mask: &RegionMask) -> Vec<(usize, usize)> {
    (0..mask.height())
        .flat_map(|r| (0..mask.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c))
        .collect()
}

/// Generate slides, features and survival for a planted-hazard cohort.
///
/// Nuclei are scattered so that the density features at the default 128 μm
/// extent equal the sampled log-normal densities up to integer rounding of
/// counts. PFS times are exponential with hazard
/// `baseline · exp(coefficients · z)`, z the cohort-standardized features;
/// OS uses the same log-hazard at a lower baseline.
pub fn generate_synthetic_cohort(spec: &SyntheticCohortSpec) -> Result<(Cohort, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let log_normal = Normal::new(0.0, LOG_SD).expect("valid normal");
    let mut patients = Vec::with_capacity(spec.n_patients);
    let mut features = Vec::with_capacity(spec.n_patients);

    let unclassified_p1 = Positivity::from_pairs(super::Panel::Panel1.markers().iter().map(|m| (*m, false)));
    let unclassified_p2 = Positivity::from_pairs(super::Panel::Panel2.markers().iter().map(|m| (*m, false)));

    for i in 0..spec.n_patients {
        let patient_id = format!("{}-{:04}", spec.arm, i + 1);
        let tumour = elliptical_tumour(&mut rng);
        let region = dilate_region(&tumour, DEFAULT_EXTENT_UM)?;
        let tumour_px = foreground(&region.tumour);
        let region_px = foreground(&region.mask);

        let mut nuclei = Vec::new();
        let mut next_id = 0u64;
        for (k, phenotype) in Phenotype::ALL.iter().enumerate() {
            let density = MEDIAN_DENSITY[k] * log_normal.sample(&mut rng).exp();
            let count = (density * region.area_mm2).round() as usize;
            let pixels = if phenotype.is_tumour_cell() { &tumour_px } else { &region_px };
            let expr = phenotype.expression().expect("canonical phenotype");
            let panel = phenotype.panel().expect("canonical phenotype");
            scatter(&mut rng, &region.mask, pixels, count, (panel, &expr), &mut next_id, &mut nuclei);
        }
        // background nuclei matching no phenotype, at least one per panel
        let extra = 1 + rng.random_range(0..20);
        scatter(&mut rng, &region.mask, &region_px, extra, (super::Panel::Panel1, &unclassified_p1), &mut next_id, &mut nuclei);
        scatter(&mut rng, &region.mask, &region_px, extra, (super::Panel::Panel2, &unclassified_p2), &mut next_id, &mut nuclei);

        let values = pooled_density_features(&[(&nuclei, &region)])?;
        features.push(FeatureVector::new(patient_id.clone(), values)?);
        patients.push(PatientSlides {
            patient_id,
            pieces: vec![TissuePiece { nuclei, tumour }],
        });
    }

    let log_hazard = planted_log_hazard(&features, &spec.planted_coefficients);
    let mut survival = Vec::with_capacity(2 * spec.n_patients);
    for (p, eta) in patients.iter().zip(&log_hazard) {
        for (endpoint, factor) in [(Endpoint::Pfs, 1.0), (Endpoint::Os, OS_HAZARD_FACTOR)] {
            let hazard = spec.baseline_hazard * factor * eta.exp();
            let t = Exp::new(hazard).expect("positive hazard").sample(&mut rng);
            let censored = rng.random::<f64>() < spec.censoring_rate;
            let (time, event) = if censored {
                (t * rng.random::<f64>(), false)
            } else {
                (t, true)
            };
            survival.push(SurvivalRecord::new(p.patient_id.clone(), spec.arm, endpoint, time, event)?);
        }
    }

    let truth = GroundTruth {
        patient_ids: patients.iter().map(|p| p.patient_id.clone()).collect(),
        log_hazard,
        features,
    };
    Ok((
        Cohort {
            patients,
            survival,
            rejections: Vec::new(),
        },
        truth,
    ))
}

fn planted_log_hazard(features: &[FeatureVector], coef: &[f64; N_PHENOTYPES]) -> Vec<f64> {
    let n = features.len() as f64;
    let mut mean = [0.0; N_PHENOTYPES];
    let mut sd = [0.0; N_PHENOTYPES];
    for k in 0..N_PHENOTYPES {
        mean[k] = features.iter().map(|f| f.values[k]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f.values[k] - mean[k]).powi(2)).sum::<f64>() / n;
        sd[k] = var.sqrt();
    }
    features
        .iter()
        .map(|f| {
            (0..N_PHENOTYPES)
                .filter(|&k| coef[k] != 0.0 && sd[k] > 0.0)
                .map(|k| coef[k] * (f.values[k] - mean[k]) / sd[k])
                .sum()
        })
        .collect()
}
