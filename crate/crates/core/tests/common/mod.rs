//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use time_drs::data::{Marker, NucleusRecord, Panel, Point2, Positivity, RegionMask};
use time_drs::gbm::{cox_gradient_hessian, cox_neg_log_partial_likelihood, CoxState, Tree, TreeNode};
use time_drs::phenotype::N_PHENOTYPES;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Breslow negative log partial likelihood by direct summation over risk sets.
pub fn breslow_nll(scores: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..scores.len() {
        if !events[i] {
            continue;
        }
        let risk: f64 = (0..scores.len()).filter(|&j| times[j] >= times[i]).map(|j| scores[j].exp()).sum();
        total += risk.ln() - scores[i];
    }
    total
}

/// Random survival data with heavy ties and at least one event.
pub fn tied_survival(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        if events.iter().any(|&e| e) {
            return (times, events);
        }
    }
}

pub struct FdReport {
    pub loss_error: f64,
    pub grad_rel: f64,
    pub hess_rel: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Gradient against central differences of the loss with step 1e-5, diagonal
/// Hessian against second central differences with step 1e-3.
pub fn cox_finite_differences(seed: u64, n: usize) -> FdReport {
    let mut r = rng(seed);
    let (times, events) = tied_survival(&mut r, n);
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let state = CoxState::new(times.clone(), events.clone()).unwrap();
    let loss = |s: &[f64]| cox_neg_log_partial_likelihood(s, &state).unwrap();
    let (g, h) = cox_gradient_hessian(&scores, &state).unwrap();
    let l0 = loss(&scores);
    let mut report = FdReport {
        loss_error: (l0 - breslow_nll(&scores, &times, &events)).abs() / l0.abs().max(1.0),
        grad_rel: 0.0,
        hess_rel: 0.0,
    };
    let shifted = |k: usize, d: f64| {
        let mut s = scores.clone();
        s[k] += d;
        loss(&s)
    };
    for k in 0..n {
        let step = 1e-5;
        let fd = (shifted(k, step) - shifted(k, -step)) / (2.0 * step);
        report.grad_rel = report.grad_rel.max(rel(g[k], fd));
        let step = 1e-3;
        let fd2 = (shifted(k, step) - 2.0 * l0 + shifted(k, -step)) / (step * step);
        report.hess_rel = report.hess_rel.max(rel(h[k], fd2));
    }
    report
}

pub fn positivity(panel: Panel, positive: &[Marker]) -> Positivity {
    Positivity::from_pairs(panel.markers().iter().map(|m| (*m, positive.contains(m))))
}

/// Phenotype names with their full expressions written out by hand.
pub const EXPRESSIONS: [(&str, Panel, &[Marker]); N_PHENOTYPES] = {
    use Marker::*;
    use Panel::*;
    [
        ("CK+", Panel1, &[Ck]),
        ("CK+PDL1+", Panel1, &[Ck, Pdl1]),
        ("PDL1+", Panel1, &[Pdl1]),
        ("CD8+", Panel1, &[Cd8]),
        ("PD1+", Panel1, &[Pd1]),
        ("CD8+PD1+", Panel1, &[Cd8, Pd1]),
        ("CD4+", Panel2, &[Cd4]),
        ("CD45RO+", Panel2, &[Cd45ro]),
        ("FOXP3+", Panel2, &[Foxp3]),
        ("CD4+FOXP3+", Panel2, &[Cd4, Foxp3]),
        ("CD8+FOXP3+", Panel2, &[Cd8, Foxp3]),
        ("CD4+CD45RO+", Panel2, &[Cd4, Cd45ro]),
        ("CD8+CD45RO+", Panel2, &[Cd8, Cd45ro]),
        ("FOXP3+CD45RO+", Panel2, &[Foxp3, Cd45ro]),
    ]
};

/// Names of the expressions matching `positivity` exactly.
pub fn matching_expressions(panel: Panel, positivity: &Positivity) -> Vec<&'static str> {
    EXPRESSIONS
        .iter()
        .filter(|(_, p, markers)| {
            *p == panel && panel.markers().iter().all(|m| positivity.get(*m) == Some(markers.contains(m)))
        })
        .map(|(name, _, _)| *name)
        .collect()
}

pub struct DensityCase {
    pub tumour: RegionMask,
    pub extent_um: f64,
    pub nuclei: Vec<NucleusRecord>,
}

/// Random blobby mask, random geometry, nuclei scattered over and beyond the grid.
pub fn density_case(seed: u64) -> DensityCase {
    let mut r = rng(seed);
    let (w, h) = (r.random_range(8..48), r.random_range(8..48));
    let ps = r.random_range(0.5..6.0);
    let origin = Point2::new(r.random_range(0.0..50.0), r.random_range(0.0..50.0));
    let mut grid = vec![false; w * h];
    for _ in 0..r.random_range(1..5) {
        let (cr, cc, rad) = (r.random_range(0..h) as f64, r.random_range(0..w) as f64, r.random_range(0.0..6.0));
        for row in 0..h {
            for col in 0..w {
                if (row as f64 - cr).powi(2) + (col as f64 - cc).powi(2) <= rad * rad {
                    grid[row * w + col] = true;
                }
            }
        }
    }
    let tumour = RegionMask::new(w, h, grid, ps, origin).unwrap();
    let extent_um = r.random_range(0.0..12.0) * ps;
    let nuclei = (0..400)
        .map(|id| {
            let panel = if r.random_bool(0.5) { Panel::Panel1 } else { Panel::Panel2 };
            let pos = Positivity::from_pairs(panel.markers().iter().map(|m| (*m, r.random_bool(0.4))));
            let p = Point2::new(
                origin.x + r.random_range(-5.0..w as f64 * ps + 5.0),
                origin.y + r.random_range(-5.0..h as f64 * ps + 5.0),
            );
            let p = Point2::new(p.x.max(0.0), p.y.max(0.0));
            NucleusRecord::new(id, p, panel, pos).unwrap()
        })
        .collect();
    DensityCase { tumour, extent_um, nuclei }
}

/// Densities by per-pixel membership: a pixel is in the analysis region when a
/// tumour pixel lies within the rounded pixel radius.
pub fn density_oracle(case: &DensityCase) -> [f64; N_PHENOTYPES] {
    let m = &case.tumour;
    let (w, h, ps) = (m.width(), m.height(), m.pixel_size_um());
    let radius = (case.extent_um / ps).round() as i64;
    let tumour_px: Vec<(i64, i64)> =
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| m.get(r, c)).map(|(r, c)| (r as i64, c as i64)).collect();
    let in_region = |r: i64, c: i64| tumour_px.iter().any(|&(tr, tc)| (tr - r).pow(2) + (tc - c).pow(2) <= radius * radius);
    let pixel = |p: Point2| -> Option<(i64, i64)> {
        let c = ((p.x - m.origin_um().x) / ps).floor();
        let r = ((p.y - m.origin_um().y) / ps).floor();
        (c >= 0.0 && r >= 0.0 && c < w as f64 && r < h as f64).then_some((r as i64, c as i64))
    };
    let region_px = (0..h as i64).flat_map(|r| (0..w as i64).map(move |c| (r, c))).filter(|&(r, c)| in_region(r, c)).count();
    let area_mm2 = region_px as f64 * ps * ps * 1e-6;
    let mut counts = [0u64; N_PHENOTYPES];
    for n in &case.nuclei {
        let Some(idx) = matching_expressions(n.panel, &n.positivity).first().and_then(|name| EXPRESSIONS.iter().position(|e| e.0 == *name))
        else {
            continue;
        };
        let Some((r, c)) = pixel(n.centroid_um) else { continue };
        let inside = if EXPRESSIONS[idx].2.contains(&Marker::Ck) {
            tumour_px.contains(&(r, c))
        } else {
            in_region(r, c)
        };
        if inside {
            counts[idx] += 1;
        }
    }
    counts.map(|c| c as f64 / area_mm2)
}

/// Expected tree output when only the features in `known` are fixed to `x`,
/// other splits being averaged by cover.
pub fn conditional_expectation(tree: &Tree, x: &[f64], known: u32, node: usize) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => weight,
        TreeNode::Split { feature_index, threshold, left, right, default_left, cover } => {
            if known & (1 << feature_index) != 0 {
                let v = x[feature_index];
                let go_left = if v.is_nan() { default_left } else { v < threshold };
                conditional_expectation(tree, x, known, if go_left { left } else { right })
            } else {
                let (fl, fr) = if cover > 0.0 {
                    (tree.nodes[left].cover() / cover, tree.nodes[right].cover() / cover)
                } else {
                    (0.5, 0.5)
                };
                fl * conditional_expectation(tree, x, known, left) + fr * conditional_expectation(tree, x, known, right)
            }
        }
    }
}

/// Shapley values by enumerating all coalitions.
pub fn brute_shapley(tree: &Tree, x: &[f64], m: usize) -> Vec<f64> {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    (0..m)
        .map(|i| {
            (0u32..(1 << m))
                .filter(|s| s & (1 << i) == 0)
                .map(|s| {
                    let size = s.count_ones() as usize;
                    let w = fact(size) * fact(m - size - 1) / fact(m);
                    w * (conditional_expectation(tree, x, s | (1 << i), 0) - conditional_expectation(tree, x, s, 0))
                })
                .sum()
        })
        .collect()
}

/// Minimum assignment cost over all injections of rows into columns.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let m = cost.first().map_or(0, |r| r.len());
    go(cost, 0, &mut vec![false; m])
}

/// Harrell's C by looping over all pairs.
pub fn brute_concordance(drs: &[f64], obs: &[(f64, bool)]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..drs.len() {
        for j in 0..drs.len() {
            if obs[i].1 && obs[i].0 < obs[j].0 {
                den += 1.0;
                if drs[i] > drs[j] {
                    num += 1.0;
                } else if drs[i] == drs[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// U statistic of `a` by pair counting.
pub fn pair_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
        .sum()
}

/// Two-sided exact Mann-Whitney p over all relabelings of the pooled sample.
pub fn exact_mwu_oracle(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (n, na) = (pooled.len(), a.len());
    let mean = (na * (n - na)) as f64 / 2.0;
    let observed = (pair_u(a, b) - mean).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let (ga, gb): (Vec<f64>, Vec<f64>) = {
            let (mut ga, mut gb) = (Vec::new(), Vec::new());
            for (i, v) in pooled.iter().enumerate() {
                if mask & (1 << i) != 0 { ga.push(*v) } else { gb.push(*v) }
            }
            (ga, gb)
        };
        total += 1;
        if (pair_u(&ga, &gb) - mean).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Planted rigid motion with Gaussian noise on inliers and uniform outliers.
pub fn ransac_instance(seed: u64, n: usize, outlier_fraction: f64, sigma: f64) -> (f64, f64, f64, Vec<(Point2, Point2)>) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let theta = r.random_range(-45.0f64..=45.0).to_radians();
    let (tx, ty) = (r.random_range(-100.0..=100.0), r.random_range(-100.0..=100.0));
    let noise = Normal::new(0.0, sigma).unwrap();
    let n_out = (n as f64 * outlier_fraction).round() as usize;
    let pairs = (0..n)
        .map(|i| {
            let src = Point2::new(r.random_range(0.0..2000.0), r.random_range(0.0..2000.0));
            let dst = if i < n_out {
                Point2::new(r.random_range(-200.0..2200.0), r.random_range(-200.0..2200.0))
            } else {
                let (c, s) = (theta.cos(), theta.sin());
                Point2::new(
                    c * src.x - s * src.y + tx + noise.sample(&mut r),
                    s * src.x + c * src.y + ty + noise.sample(&mut r),
                )
            };
            (src, dst)
        })
        .collect();
    (theta, tx, ty, pairs)
}
