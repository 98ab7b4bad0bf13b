//! Nuclear phenotypes, tumour-neighbourhood regions, and per-phenotype densities.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Marker, NucleusRecord, Panel, Positivity, RegionMask};
use crate::error::{Error, Result};

/// Number of density features per patient.
pub const N_PHENOTYPES: usize = 14;

/// Default neighbourhood extent around the tumour, in μm.
pub const DEFAULT_EXTENT_UM: f64 = 128.0;

/// Cell phenotype derived from a nucleus' full marker-positivity pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phenotype {
    CkPos,
    CkPdl1,
    Pdl1Pos,
    Cd8Pos,
    Pd1Pos,
    Cd8Pd1,
    Cd4Pos,
    Cd45roPos,
    Foxp3Pos,
    Cd4Foxp3,
    Cd8Foxp3,
    Cd4Cd45ro,
    Cd8Cd45ro,
    Foxp3Cd45ro,
    Unclassified,
}

impl Phenotype {
    /// The 14 phenotypes in canonical feature order.
    pub const ALL: [Phenotype; N_PHENOTYPES] = [
        Phenotype::CkPos,
        Phenotype::CkPdl1,
        Phenotype::Pdl1Pos,
        Phenotype::Cd8Pos,
        Phenotype::Pd1Pos,
        Phenotype::Cd8Pd1,
        Phenotype::Cd4Pos,
        Phenotype::Cd45roPos,
        Phenotype::Foxp3Pos,
        Phenotype::Cd4Foxp3,
        Phenotype::Cd8Foxp3,
        Phenotype::Cd4Cd45ro,
        Phenotype::Cd8Cd45ro,
        Phenotype::Foxp3Cd45ro,
    ];

    /// Feature column index, `None` for [`Phenotype::Unclassified`].
    pub fn index(self) -> Option<usize> {
        Phenotype::ALL.iter().position(|&p| p == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Phenotype::CkPos => "CK+",
            Phenotype::CkPdl1 => "CK+PDL1+",
            Phenotype::Pdl1Pos => "PDL1+",
            Phenotype::Cd8Pos => "CD8+",
            Phenotype::Pd1Pos => "PD1+",
            Phenotype::Cd8Pd1 => "CD8+PD1+",
            Phenotype::Cd4Pos => "CD4+",
            Phenotype::Cd45roPos => "CD45RO+",
            Phenotype::Foxp3Pos => "FOXP3+",
            Phenotype::Cd4Foxp3 => "CD4+FOXP3+",
            Phenotype::Cd8Foxp3 => "CD8+FOXP3+",
            Phenotype::Cd4Cd45ro => "CD4+CD45RO+",
            Phenotype::Cd8Cd45ro => "CD8+CD45RO+",
            Phenotype::Foxp3Cd45ro => "FOXP3+CD45RO+",
            Phenotype::Unclassified => "Unclassified",
        }
    }

    pub fn from_name(name: &str) -> Option<Phenotype> {
        Phenotype::ALL.iter().copied().find(|p| p.name() == name)
    }

    /// Panel whose nuclei carry this phenotype.
    pub fn panel(self) -> Option<Panel> {
        match self.index()? {
            0..=5 => Some(Panel::Panel1),
            _ => Some(Panel::Panel2),
        }
    }

    /// Markers that are positive in the full expression; every other marker of
    /// the panel is negative.
    pub fn positive_markers(self) -> &'static [Marker] {
        use Marker::*;
        match self {
            Phenotype::CkPos => &[Ck],
            Phenotype::CkPdl1 => &[Ck, Pdl1],
            Phenotype::Pdl1Pos => &[Pdl1],
            Phenotype::Cd8Pos => &[Cd8],
            Phenotype::Pd1Pos => &[Pd1],
            Phenotype::Cd8Pd1 => &[Cd8, Pd1],
            Phenotype::Cd4Pos => &[Cd4],
            Phenotype::Cd45roPos => &[Cd45ro],
            Phenotype::Foxp3Pos => &[Foxp3],
            Phenotype::Cd4Foxp3 => &[Cd4, Foxp3],
            Phenotype::Cd8Foxp3 => &[Cd8, Foxp3],
            Phenotype::Cd4Cd45ro => &[Cd4, Cd45ro],
            Phenotype::Cd8Cd45ro => &[Cd8, Cd45ro],
            Phenotype::Foxp3Cd45ro => &[Foxp3, Cd45ro],
            Phenotype::Unclassified => &[],
        }
    }

    /// The full positivity pattern of this phenotype over its panel's markers.
    pub fn expression(self) -> Option<Positivity> {
        let panel = self.panel()?;
        let positive = self.positive_markers();
        Some(Positivity::from_pairs(
            panel
                .markers()
                .iter()
                .map(|m| (*m, positive.contains(m))),
        ))
    }

    /// Tumour-cell phenotypes are counted inside the tumour mask only.
    pub fn is_tumour_cell(self) -> bool {
        matches!(self, Phenotype::CkPos | Phenotype::CkPdl1)
    }
}

impl fmt::Display for Phenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Assign the unique phenotype whose full expression equals `positivity`.
pub fn assign_phenotype(panel: Panel, positivity: &Positivity) -> Result<Phenotype> {
    positivity.check_panel(panel)?;
    Ok(Phenotype::ALL
        .iter()
        .copied()
        .filter(|p| p.panel() == Some(panel))
        .find(|p| {
            p.expression()
                .map(|expr| &expr == positivity)
                .unwrap_or(false)
        })
        .unwrap_or(Phenotype::Unclassified))
}

/// Tumour mask together with its dilated analysis region.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRegion {
    pub tumour: RegionMask,
    pub mask: RegionMask,
    pub extent_um: f64,
    pub area_mm2: f64,
}

/// Dilate `tumour` with a Euclidean disk of `extent_um` (rounded to whole pixels).
/// The result is clipped to the input grid.
pub fn dilate_region(tumour: &RegionMask, extent_um: f64) -> Result<AnalysisRegion> {
    if !(extent_um >= 0.0) || !extent_um.is_finite() {
        return Err(Error::Invalid(format!("extent must be >= 0, got {extent_um}")));
    }
    if tumour.count() == 0 {
        return Err(Error::EmptyRegion("tumour mask has no foreground pixels".into()));
    }
    let radius = (extent_um / tumour.pixel_size_um()).round();
    let mask = if radius == 0.0 {
        tumour.clone()
    } else {
        let sq = squared_distance_transform(tumour);
        let r2 = radius * radius;
        tumour.with_grid(sq.iter().map(|&d| d <= r2).collect())
    };
    let area_mm2 = mask.area_um2() * 1e-6;
    Ok(AnalysisRegion {
        tumour: tumour.clone(),
        mask,
        extent_um,
        area_mm2,
    })
}

/// Exact squared Euclidean distance (in pixels) from each pixel to the nearest
/// foreground pixel, by separable lower envelopes of parabolas.
fn squared_distance_transform(mask: &RegionMask) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    // exceeds every in-grid squared distance while keeping integer arithmetic exact
    let far = ((w + h) * (w + h)) as f64 + 1.0;
    let mut grid: Vec<f64> = mask
        .grid()
        .iter()
        .map(|&on| if on { 0.0 } else { far })
        .collect();
    let mut line = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for c in 0..w {
        for r in 0..h {
            line[r] = grid[r * w + c];
        }
        envelope_1d(&line[..h], &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        line[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        envelope_1d(&line[..w], &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn envelope_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Count nuclei per phenotype inside the region. Tumour-cell phenotypes are
/// restricted to Panel 1 nuclei inside the tumour mask proper.
pub fn phenotype_counts(
    nuclei: &[NucleusRecord],
    region: &AnalysisRegion,
) -> Result<[u64; N_PHENOTYPES]> {
    let mut counts = [0u64; N_PHENOTYPES];
    for nucleus in nuclei {
        let phenotype = assign_phenotype(nucleus.panel, &nucleus.positivity)?;
        let Some(idx) = phenotype.index() else {
            continue;
        };
        let inside = if phenotype.is_tumour_cell() {
            region.tumour.contains(nucleus.centroid_um)
        } else {
            region.mask.contains(nucleus.centroid_um)
        };
        if inside {
            counts[idx] += 1;
        }
    }
    Ok(counts)
}

/// Per-phenotype densities (count per mm²) over one analysis region.
pub fn density_features(
    nuclei: &[NucleusRecord],
    region: &AnalysisRegion,
) -> Result<[f64; N_PHENOTYPES]> {
    pooled_density_features(&[(nuclei, region)])
}

/// Densities over several tissue pieces: counts and areas are summed before dividing.
pub fn pooled_density_features(
    pieces: &[(&[NucleusRecord], &AnalysisRegion)],
) -> Result<[f64; N_PHENOTYPES]> {
    let mut counts = [0u64; N_PHENOTYPES];
    let mut area = 0.0;
    for (nuclei, region) in pieces {
        let c = phenotype_counts(nuclei, region)?;
        for (total, n) in counts.iter_mut().zip(c) {
            *total += n;
        }
        area += region.area_mm2;
    }
    if !(area > 0.0) {
        return Err(Error::EmptyRegion("analysis region has zero area".into()));
    }
    Ok(counts.map(|c| c as f64 / area))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Point2;

    fn pos(panel: Panel, positive: &[Marker]) -> Positivity {
        Positivity::from_pairs(panel.markers().iter().map(|m| (*m, positive.contains(m))))
    }

    #[test]
    fn named_examples() {
        use Marker::*;
        assert_eq!(
            assign_phenotype(Panel::Panel1, &pos(Panel::Panel1, &[Ck])).unwrap(),
            Phenotype::CkPos
        );
        assert_eq!(
            assign_phenotype(Panel::Panel1, &pos(Panel::Panel1, &[Cd8, Pd1])).unwrap(),
            Phenotype::Cd8Pd1
        );
        assert_eq!(
            assign_phenotype(Panel::Panel2, &pos(Panel::Panel2, &[])).unwrap(),
            Phenotype::Unclassified
        );
        assert_eq!(
            assign_phenotype(Panel::Panel1, &pos(Panel::Panel1, &[Cd8, Pdl1, Pd1])).unwrap(),
            Phenotype::Unclassified
        );
    }

    #[test]
    fn wrong_marker_set_is_rejected() {
        let p2 = pos(Panel::Panel2, &[Marker::Cd4]);
        assert!(matches!(
            assign_phenotype(Panel::Panel1, &p2),
            Err(Error::MarkerSet { .. })
        ));
    }

    #[test]
    fn names_round_trip() {
        for p in Phenotype::ALL {
            assert_eq!(Phenotype::from_name(p.name()), Some(p));
        }
        assert_eq!(Phenotype::Unclassified.index(), None);
    }

    fn single_pixel(w: usize, h: usize, r: usize, c: usize) -> RegionMask {
        let mut grid = vec![false; w * h];
        grid[r * w + c] = true;
        RegionMask::new(w, h, grid, 1.0, Point2::new(0.0, 0.0)).unwrap()
    }

    fn brute_dilate(mask: &RegionMask, radius: i64) -> Vec<bool> {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let mut out = vec![false; (w * h) as usize];
        for r in 0..h {
            for c in 0..w {
                if !mask.grid()[(r * w + c) as usize] {
                    continue;
                }
                for dr in -radius..=radius {
                    for dc in -radius..=radius {
                        let (rr, cc) = (r + dr, c + dc);
                        if dr * dr + dc * dc <= radius * radius
                            && (0..h).contains(&rr)
                            && (0..w).contains(&cc)
                        {
                            out[(rr * w + cc) as usize] = true;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn disk_of_radius_two_has_13_pixels() {
        let m = single_pixel(9, 9, 4, 4);
        let region = dilate_region(&m, 2.0).unwrap();
        assert_eq!(region.mask.count(), 13);
    }

    #[test]
    fn extent_zero_is_identity_and_full_mask_saturates() {
        let m = single_pixel(5, 4, 1, 2);
        assert_eq!(dilate_region(&m, 0.0).unwrap().mask, m);
        let full = RegionMask::new(6, 5, vec![true; 30], 2.0, Point2::new(0.0, 0.0)).unwrap();
        assert_eq!(dilate_region(&full, 50.0).unwrap().mask, full);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = RegionMask::new(4, 4, vec![false; 16], 1.0, Point2::new(0.0, 0.0)).unwrap();
        assert!(matches!(dilate_region(&m, 3.0), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn distance_transform_matches_brute_force_stamping() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let w = rng.random_range(1..25);
            let h = rng.random_range(1..25);
            let density = rng.random_range(0.01..0.3);
            let mut grid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
            grid[rng.random_range(0..w * h)] = true;
            let mask = RegionMask::new(w, h, grid, 1.5, Point2::new(0.0, 0.0)).unwrap();
            let extent = rng.random_range(0.0..12.0);
            let radius = (extent / 1.5_f64).round() as i64;
            let got = dilate_region(&mask, extent).unwrap();
            assert_eq!(got.mask.grid(), brute_dilate(&mask, radius).as_slice());
        }
    }

    #[test]
    fn hundred_cd8_in_one_square_mm() {
        let mask = RegionMask::new(10, 10, vec![true; 100], 100.0, Point2::new(0.0, 0.0)).unwrap();
        let region = dilate_region(&mask, 0.0).unwrap();
        assert!((region.area_mm2 - 1.0).abs() < 1e-12);
        let nuclei: Vec<NucleusRecord> = (0..100)
            .map(|i| {
                NucleusRecord::new(
                    i,
                    Point2::new(5.0 + (i % 10) as f64 * 100.0, 5.0 + (i / 10) as f64 * 100.0),
                    Panel::Panel1,
                    Phenotype::Cd8Pos.expression().unwrap(),
                )
                .unwrap()
            })
            .collect();
        let d = density_features(&nuclei, &region).unwrap();
        for (i, v) in d.iter().enumerate() {
            let expected = if i == Phenotype::Cd8Pos.index().unwrap() { 100.0 } else { 0.0 };
            assert_eq!(*v, expected);
        }
        assert_eq!(density_features(&[], &region).unwrap(), [0.0; N_PHENOTYPES]);
    }

    #[test]
    fn tumour_cells_only_count_inside_tumour() {
        let tumour = single_pixel(11, 11, 5, 5);
        let region = dilate_region(&tumour, 3.0).unwrap();
        let ck = Phenotype::CkPos.expression().unwrap();
        let cd8 = Phenotype::Cd8Pos.expression().unwrap();
        let at = |x, y, p: &Positivity| {
            NucleusRecord::new(0, Point2::new(x, y), Panel::Panel1, p.clone()).unwrap()
        };
        let nuclei = vec![at(5.5, 5.5, &ck), at(7.5, 5.5, &ck), at(7.5, 5.5, &cd8)];
        let c = phenotype_counts(&nuclei, &region).unwrap();
        assert_eq!(c[Phenotype::CkPos.index().unwrap()], 1);
        assert_eq!(c[Phenotype::Cd8Pos.index().unwrap()], 1);
    }

    #[test]
    fn dilation_is_monotone_in_extent() {
        let tumour = single_pixel(21, 21, 10, 4);
        let mut prev = dilate_region(&tumour, 0.0).unwrap().mask;
        for e in 1..10 {
            let next = dilate_region(&tumour, e as f64).unwrap().mask;
            assert!(prev.grid().iter().zip(next.grid()).all(|(a, b)| !a || *b));
            prev = next;
        }
    }
}
