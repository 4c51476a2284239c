//! Integer budgets: N for N:M sparsity, bit-widths, and kept ranks.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sparsity::allocate_in_range;
use super::{check_layers, AllocationError, BudgetKind, BudgetPlan, Endpoints};

/// Integer value per layer, aligned with the input qualities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub kind: BudgetKind,
    pub values: Vec<u32>,
    /// Average target (density·M for N:M, bits, or total kept rank).
    pub budget: f64,
    pub options: Vec<u32>,
}

impl LayerBudget {
    /// Attach layer names. Each name may stand for a block whose matrices are
    /// listed in `members`; the plan then carries one entry per matrix.
    pub fn into_plan(self, members: &[Vec<String>]) -> Result<BudgetPlan, AllocationError> {
        if members.len() != self.values.len() {
            return Err(AllocationError::InvalidInput(format!(
                "{} layer values but {} layer name lists",
                self.values.len(),
                members.len()
            )));
        }
        let mut per_layer = BTreeMap::new();
        for (names, &v) in members.iter().zip(&self.values) {
            for n in names {
                if per_layer.insert(n.clone(), v).is_some() {
                    return Err(AllocationError::InvalidInput(format!("layer `{n}` listed twice")));
                }
            }
        }
        Ok(BudgetPlan {
            kind: self.kind,
            budget: self.budget,
            options: self.options,
            per_layer,
        })
    }
}

/// Layers in ascending quality, ties by index.
fn order_by_q(q: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[a].partial_cmp(&q[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// N per group of `m` for each layer.
///
/// Densities `1 - φ_i` come from the sparsity map at `1 - density` with
/// endpoints from `tau`; `N_i = round(density_i · m)` clamped to `[1, m]`.
/// Then, while the kept count exceeds `density · Σd`, the highest-quality
/// layer with `N > 1` gives up one; while there is room, the
/// lowest-quality layer with `N < m` gains one as long as that does not
/// overshoot. The result lies within one group quantum `max d_i / m` of the
/// target and `N` is non-increasing in quality.
pub fn allocate_nm(q: &[f64], d: &[f64], m: u32, density: f64, tau: f64) -> Result<LayerBudget, AllocationError> {
    check_layers(q, d)?;
    if m < 2 {
        return Err(AllocationError::InvalidInput(format!("group size M = {m} must be at least 2")));
    }
    let mf = f64::from(m);
    if !(density.is_finite() && density * mf >= 1.0 && density <= 1.0) {
        return Err(AllocationError::Infeasible(format!(
            "density {density} with M = {m}: every group keeps at least one weight, so density must lie in [1/M, 1]"
        )));
    }
    let options: Vec<u32> = (1..=m).collect();
    let budget = density * mf;
    if density == 1.0 {
        return Ok(LayerBudget {
            kind: BudgetKind::Nm,
            values: vec![m; q.len()],
            budget,
            options,
        });
    }

    let alloc = allocate_in_range(q, d, 1.0 - density, Endpoints::from_tau(tau)?)?;
    let mut n: Vec<u32> = alloc
        .values
        .iter()
        .map(|&s| ((1.0 - s) * mf).round().clamp(1.0, mf) as u32)
        .collect();

    let total: f64 = d.iter().sum();
    let target = density * total;
    let tol = 1e-9 * total;
    let kept = |n: &[u32]| -> f64 { n.iter().zip(d).map(|(&v, &w)| f64::from(v) * w / mf).sum() };
    let order = order_by_q(q);

    while kept(&n) > target + tol {
        match order.iter().rev().find(|&&i| n[i] > 1) {
            Some(&i) => n[i] -= 1,
            None => break,
        }
    }
    loop {
        let room = target + tol - kept(&n);
        match order.iter().find(|&&i| n[i] < m) {
            Some(&i) if d[i] / mf <= room => n[i] += 1,
            _ => break,
        }
    }
    let achieved = kept(&n);
    let quantum = d.iter().cloned().fold(0.0, f64::max) / mf;
    if (achieved - target).abs() > quantum + tol {
        return Err(AllocationError::Infeasible(format!(
            "N:{m} plan keeps {achieved} of {target} target weights"
        )));
    }
    Ok(LayerBudget {
        kind: BudgetKind::Nm,
        values: n,
        budget,
        options,
    })
}

/// Bit-width per layer from `options`, highest precision to the most
/// heavy-tailed (lowest quality) layers.
///
/// Layers are visited in ascending quality, equal qualities forming one
/// group that is assigned a common width: the largest option, no wider
/// than the previous group's, whose cost still leaves every later layer its
/// minimum width within `target · Σd`. Leftover budget then raises single layers one option
/// step at a time, lowest quality first (ties by index), as long as the
/// assignment stays non-increasing in quality. The weighted total never
/// exceeds `target · Σd`.
pub fn allocate_bits(q: &[f64], d: &[f64], options: &[u32], target: f64) -> Result<LayerBudget, AllocationError> {
    check_layers(q, d)?;
    if options.is_empty() {
        return Err(AllocationError::InvalidInput("no bit-width options".into()));
    }
    let mut opts = options.to_vec();
    opts.sort_unstable();
    opts.dedup();
    let (lo, hi) = (f64::from(opts[0]), f64::from(*opts.last().unwrap()));
    if !(target >= lo && target <= hi) {
        return Err(AllocationError::Infeasible(format!(
            "average of {target} bits outside the option range [{lo}, {hi}]"
        )));
    }
    let total: f64 = d.iter().sum();
    let budget = target * total;
    let tol = 1e-9 * total;
    let order = order_by_q(q);

    let mut bits = vec![opts[0]; q.len()];
    let mut used = 0.0;
    let mut rest: f64 = total;
    let mut cap = u32::MAX;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && q[order[end]] == q[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let dg: f64 = group.iter().map(|&i| d[i]).sum();
        rest -= dg;
        let avail = budget + tol - used - lo * rest;
        let v = opts
            .iter()
            .rev()
            .copied()
            .find(|&v| v <= cap && f64::from(v) * dg <= avail)
            .unwrap_or(opts[0]);
        cap = v;
        for &i in group {
            bits[i] = v;
        }
        used += f64::from(v) * dg;
        start = end;
    }

    loop {
        let mut changed = false;
        for (pos, &i) in order.iter().enumerate() {
            let Some(&next) = opts.iter().find(|&&v| v > bits[i]) else {
                continue;
            };
            let cost = f64::from(next - bits[i]) * d[i];
            let ceiling = order[..pos]
                .iter()
                .filter(|&&j| q[j] < q[i])
                .map(|&j| bits[j])
                .min()
                .unwrap_or(u32::MAX);
            if used + cost <= budget + tol && next <= ceiling {
                bits[i] = next;
                used += cost;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(LayerBudget {
        kind: BudgetKind::Bits,
        values: bits,
        budget: target,
        options: opts,
    })
}

/// How kept ranks follow layer quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankStrategy {
    /// Heavy-tailed (low quality) layers keep fewer ranks.
    MoreOnHt,
    /// Heavy-tailed layers keep more ranks.
    LessOnHt,
}

impl std::str::FromStr for RankStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "more_on_ht" => Ok(RankStrategy::MoreOnHt),
            "less_on_ht" => Ok(RankStrategy::LessOnHt),
            other => Err(format!("unknown rank strategy `{other}` (expected more_on_ht or less_on_ht)")),
        }
    }
}

/// Kept rank per layer with `Σ kept = keep`.
///
/// Kept fractions come from the linear map over `q` (or `-q` for
/// [`RankStrategy::LessOnHt`]) with the full ranks as weights and
/// `keep / Σ full` as the target. The ideal ranks are floored, raised to
/// at least 1, and the remaining units go by largest fractional part
/// (ties to the lower index), never past a layer's full rank.
pub fn allocate_ranks(
    q: &[f64],
    full: &[u32],
    keep: u32,
    strategy: RankStrategy,
    tau: f64,
) -> Result<LayerBudget, AllocationError> {
    let d: Vec<f64> = full.iter().map(|&f| f64::from(f)).collect();
    check_layers(q, &d)?;
    let total: u64 = full.iter().map(|&f| u64::from(f)).sum();
    let l = full.len() as u64;
    if u64::from(keep) < l || u64::from(keep) > total {
        return Err(AllocationError::Infeasible(format!(
            "keeping {keep} ranks: need between {l} (one per layer) and {total}"
        )));
    }
    let options: Vec<u32> = (1..=*full.iter().max().unwrap()).collect();
    let signed: Vec<f64> = match strategy {
        RankStrategy::MoreOnHt => q.to_vec(),
        RankStrategy::LessOnHt => q.iter().map(|v| -v).collect(),
    };
    let frac = f64::from(keep) / total as f64;
    let alloc = allocate_in_range(&signed, &d, frac, Endpoints::from_tau(tau)?)?;
    let ideal: Vec<f64> = alloc.values.iter().zip(&d).map(|(p, f)| p * f).collect();

    let mut kept: Vec<u32> = ideal
        .iter()
        .zip(full)
        .map(|(&x, &f)| (x.floor() as u32).clamp(1, f))
        .collect();
    let mut sum: u64 = kept.iter().map(|&k| u64::from(k)).sum();
    let rem = |i: usize, k: &[u32]| ideal[i] - f64::from(k[i]);
    while sum < u64::from(keep) {
        let i = (0..kept.len())
            .filter(|&i| kept[i] < full[i])
            .max_by(|&a, &b| rem(a, &kept).partial_cmp(&rem(b, &kept)).unwrap_or(Ordering::Equal).then(b.cmp(&a)))
            .expect("keep <= Σ full");
        kept[i] += 1;
        sum += 1;
    }
    while sum > u64::from(keep) {
        let i = (0..kept.len())
            .filter(|&i| kept[i] > 1)
            .min_by(|&a, &b| rem(a, &kept).partial_cmp(&rem(b, &kept)).unwrap_or(Ordering::Equal).then(b.cmp(&a)))
            .expect("keep >= L");
        kept[i] -= 1;
        sum -= 1;
    }
    Ok(LayerBudget {
        kind: BudgetKind::Ranks,
        values: kept,
        budget: f64::from(keep),
        options,
    })
}
