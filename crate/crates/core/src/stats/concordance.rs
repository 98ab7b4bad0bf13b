use crate::data::SurvivalRecord;
use crate::error::{Error, Result};

/// Fenwick tree over score ranks.
struct Counts {
    tree: Vec<u64>,
}

impl Counts {
    fn new(n: usize) -> Self {
        Counts { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C. A pair is admissible when the shorter time is an observed
/// event (tied times are not comparable); the pair is concordant when that
/// patient has the higher score, and score ties count one half.
pub fn concordance_index(drs: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if drs.len() != records.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} survival records",
            drs.len(),
            records.len()
        )));
    }
    let obs: Vec<(f64, bool)> = records.iter().map(|r| (r.time_months, r.event)).collect();
    concordance_index_raw(drs, &obs)
}

/// Harrell's C on raw `(time, event)` observations.
pub fn concordance_index_raw(drs: &[f64], obs: &[(f64, bool)]) -> Result<f64> {
    let n = drs.len();
    if obs.len() != n {
        return Err(Error::Invalid(format!("{n} scores for {} observations", obs.len())));
    }
    let mut distinct: Vec<f64> = drs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rank = |v: f64| distinct.partition_point(|&x| x < v);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| obs[b].0.total_cmp(&obs[a].0));

    let mut later = Counts::new(distinct.len());
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut admissible) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < n {
        let t = obs[order[i]].0;
        let mut j = i;
        while j < n && obs[order[j]].0 == t {
            j += 1;
        }
        for &k in &order[i..j] {
            if obs[k].1 {
                let r = rank(drs[k]);
                let below = later.below(r);
                let not_above = later.below(r + 1);
                concordant += below;
                tied += not_above - below;
                admissible += inserted;
            }
        }
        for &k in &order[i..j] {
            later.add(rank(drs[k]));
            inserted += 1;
        }
        i = j;
    }
    if admissible == 0 {
        return Err(Error::UndefinedTest("no admissible pairs for the C-index".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / admissible as f64)
}
