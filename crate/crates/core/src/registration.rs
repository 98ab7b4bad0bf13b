//! Rigid registration of Panel 2 keypoints onto Panel 1 keypoints:
//! mutual-nearest-neighbour descriptor matching, two-point RANSAC with a
//! closed-form rotation+translation fit, and SSIM/PCC quality scores.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, NucleusRecord, Point2};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub position_um: Point2,
    pub descriptor: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KeypointRow {
    x_um: f64,
    y_um: f64,
    desc: Vec<f64>,
}

/// Read keypoints from JSON-lines; all descriptors must be finite and share a length.
pub fn load_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let label = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut out: Vec<Keypoint> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse {
            file: label.clone(),
            line: idx + 1,
            message: m,
        };
        let row: KeypointRow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if row.desc.iter().any(|v| !v.is_finite()) || !row.x_um.is_finite() || !row.y_um.is_finite() {
            return Err(bad("non-finite keypoint value".into()));
        }
        if let Some(first) = out.first() {
            if first.descriptor.len() != row.desc.len() {
                return Err(bad(format!(
                    "descriptor length {} differs from {}",
                    row.desc.len(),
                    first.descriptor.len()
                )));
            }
        }
        out.push(Keypoint {
            position_um: Point2::new(row.x_um, row.y_um),
            descriptor: row.desc,
        });
    }
    Ok(out)
}

pub fn save_keypoints(path: &Path, keypoints: &[Keypoint]) -> Result<()> {
    let mut buf = Vec::new();
    for k in keypoints {
        let row = KeypointRow {
            x_um: k.position_um.x,
            y_um: k.position_um.y,
            desc: k.descriptor.clone(),
        };
        serde_json::to_writer(&mut buf, &row).expect("keypoint rows serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Rotation about the origin followed by translation: `p' = R(θ)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation_rad: f64,
    pub translation_um: Point2,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation_rad: 0.0,
        translation_um: Point2::new(0.0, 0.0),
    };

    pub fn new(rotation_rad: f64, tx: f64, ty: f64) -> Self {
        RigidTransform {
            rotation_rad,
            translation_um: Point2::new(tx, ty),
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.rotation_rad.sin_cos();
        Point2::new(
            c * p.x - s * p.y + self.translation_um.x,
            s * p.x + c * p.y + self.translation_um.y,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let (s, c) = self.rotation_rad.sin_cos();
        let t = self.translation_um;
        RigidTransform {
            rotation_rad: -self.rotation_rad,
            translation_um: Point2::new(-(c * t.x + s * t.y), -(-s * t.x + c * t.y)),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let t = self.apply(other.translation_um);
        RigidTransform {
            rotation_rad: self.rotation_rad + other.rotation_rad,
            translation_um: t,
        }
    }

    /// Always +1; reflections are not representable.
    pub fn determinant(&self) -> f64 {
        let (s, c) = self.rotation_rad.sin_cos();
        c * c + s * s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub inlier_threshold_um: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_threshold_um: 16.0,
            max_iterations: 2000,
            min_inliers: 3,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold_um > 0.0) || !self.inlier_threshold_um.is_finite() {
            return Err(Error::Invalid("inlier threshold must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("max_iterations must be positive".into()));
        }
        if self.min_inliers < 2 {
            return Err(Error::Invalid("min_inliers must be at least 2".into()));
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(query: &Keypoint, pool: &[Keypoint]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, k) in pool.iter().enumerate() {
        let d = squared_distance(&query.descriptor, &k.descriptor);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Mutual nearest neighbours in descriptor space, as `(source, target)` index pairs.
pub fn match_keypoints(source: &[Keypoint], target: &[Keypoint]) -> Result<Vec<(usize, usize)>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: 0,
        });
    }
    let len = source[0].descriptor.len();
    if let Some(k) = source.iter().chain(target).find(|k| k.descriptor.len() != len) {
        return Err(Error::DescriptorMismatch(len, k.descriptor.len()));
    }
    let backward: Vec<usize> = target.iter().map(|t| nearest(t, source)).collect();
    Ok(source
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let j = nearest(s, target);
            (backward[j] == i).then_some((i, j))
        })
        .collect())
}

/// Least-squares rotation+translation mapping `src` onto `dst`.
pub fn fit_rigid(src: &[Point2], dst: &[Point2]) -> RigidTransform {
    debug_assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let mean = |pts: &[Point2]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
        Point2::new(sx / n, sy / n)
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut cross, mut dot) = (0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p.x - ms.x, p.y - ms.y);
        let (qx, qy) = (q.x - md.x, q.y - md.y);
        cross += px * qy - py * qx;
        dot += px * qx + py * qy;
    }
    let theta = cross.atan2(dot);
    let rotated = RigidTransform::new(theta, 0.0, 0.0).apply(ms);
    RigidTransform::new(theta, md.x - rotated.x, md.y - rotated.y)
}

fn inlier_mask(t: &RigidTransform, pairs: &[(Point2, Point2)], threshold: f64) -> Vec<bool> {
    pairs
        .iter()
        .map(|(s, d)| t.apply(*s).distance(*d) <= threshold)
        .collect()
}

fn fit_subset(pairs: &[(Point2, Point2)], mask: &[bool]) -> RigidTransform {
    let (src, dst): (Vec<Point2>, Vec<Point2>) = pairs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .unzip();
    fit_rigid(&src, &dst)
}

const MAX_REFINEMENTS: usize = 20;

/// RANSAC over `(source, target)` point pairs. Returns the transform mapping
/// source onto target and the final inlier mask; the transform is the
/// least-squares fit of exactly the returned inliers.
pub fn estimate_rigid(pairs: &[(Point2, Point2)], cfg: &RansacConfig) -> Result<(RigidTransform, Vec<bool>)> {
    cfg.validate()?;
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..cfg.max_iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (pairs[i], pairs[j]);
        if a.0.distance(b.0) == 0.0 {
            continue;
        }
        let hypothesis = fit_rigid(&[a.0, b.0], &[a.1, b.1]);
        let mask = inlier_mask(&hypothesis, pairs, cfg.inlier_threshold_um);
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (count, mut mask) = best.ok_or(Error::RegistrationFailed {
        inliers: 0,
        required: cfg.min_inliers,
    })?;
    if count < cfg.min_inliers.max(2) {
        return Err(Error::RegistrationFailed {
            inliers: count,
            required: cfg.min_inliers,
        });
    }

    let mut transform = fit_subset(pairs, &mask);
    for _ in 0..MAX_REFINEMENTS {
        let next = inlier_mask(&transform, pairs, cfg.inlier_threshold_um);
        if next == mask {
            break;
        }
        if next.iter().filter(|&&m| m).count() < 2 {
            break;
        }
        mask = next;
        transform = fit_subset(pairs, &mask);
    }
    // keep only pairs the final fit explains
    let final_mask: Vec<bool> = inlier_mask(&transform, pairs, cfg.inlier_threshold_um)
        .iter()
        .zip(&mask)
        .map(|(a, b)| *a && *b)
        .collect();
    let inliers = final_mask.iter().filter(|&&m| m).count();
    if inliers < cfg.min_inliers {
        return Err(Error::RegistrationFailed {
            inliers,
            required: cfg.min_inliers,
        });
    }
    Ok((transform, final_mask))
}

/// Map nucleus centroids through `t`; panel and positivity are untouched.
pub fn apply_transform(t: &RigidTransform, nuclei: &[NucleusRecord]) -> Vec<NucleusRecord> {
    nuclei
        .iter()
        .map(|n| NucleusRecord {
            centroid_um: t.apply(n.centroid_um),
            ..n.clone()
        })
        .collect()
}

/// Grey-level raster, row-major, intensities on a 0..=255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub const DYNAMIC_RANGE: f64 = 255.0;

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Invalid(format!(
                "raster has {} values, expected {width}×{height}",
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: 1,
                message: e.to_string(),
            })?
            .into_luma8();
        Raster::new(
            img.width() as usize,
            img.height() as usize,
            img.pixels().map(|p| p.0[0] as f64).collect(),
        )
    }

    /// Resample `self` into the reference frame: output pixel centres are
    /// pulled back through `t⁻¹` with nearest-neighbour lookup; outside → 0.
    pub fn warp(&self, t: &RigidTransform, pixel_size_um: f64) -> Raster {
        let inv = t.inverse();
        let mut data = vec![0.0; self.width * self.height];
        for r in 0..self.height {
            for c in 0..self.width {
                let p = Point2::new((c as f64 + 0.5) * pixel_size_um, (r as f64 + 0.5) * pixel_size_um);
                let q = inv.apply(p);
                let (sc, sr) = ((q.x / pixel_size_um).floor(), (q.y / pixel_size_um).floor());
                if sc >= 0.0 && sr >= 0.0 && (sc as usize) < self.width && (sr as usize) < self.height {
                    data[r * self.width + c] = self.data[sr as usize * self.width + sc as usize];
                }
            }
        }
        Raster {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub ssim: f64,
    pub pcc: f64,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Raster, b: &Raster) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch((a.width, a.height), (b.width, b.height)));
    }
    if a.width < 8 || a.height < 8 {
        return Err(Error::Invalid(format!(
            "rasters must be at least 8×8, got {}×{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// L = 255. Windows are truncated at the border and renormalized.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    check_dims(a, b)?;
    let half = (SSIM_WINDOW / 2) as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let c1 = (SSIM_K1 * Raster::DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * Raster::DYNAMIC_RANGE).powi(2);
    let (w, h) = (a.width as isize, a.height as isize);
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (mut sw, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -half..=half {
                let rr = r + dr;
                if rr < 0 || rr >= h {
                    continue;
                }
                for dc in -half..=half {
                    let cc = c + dc;
                    if cc < 0 || cc >= w {
                        continue;
                    }
                    let wt = kernel[(dr + half) as usize] * kernel[(dc + half) as usize];
                    let idx = (rr * w + cc) as usize;
                    let (x, y) = (a.data[idx], b.data[idx]);
                    sw += wt;
                    sa += wt * x;
                    sb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (mu_a, mu_b) = (sa / sw, sb / sw);
            let var_a = saa / sw - mu_a * mu_a;
            let var_b = sbb / sw - mu_b * mu_b;
            let cov = sab / sw - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    Ok(total / (w * h) as f64)
}

/// Pearson correlation over all pixels.
pub fn pearson(a: &Raster, b: &Raster) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantImage);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn registration_quality(reference: &Raster, moved: &Raster) -> Result<QualityReport> {
    Ok(QualityReport {
        ssim: ssim(reference, moved)?,
        pcc: pearson(reference, moved)?,
    })
}
