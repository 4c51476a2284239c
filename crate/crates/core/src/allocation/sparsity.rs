use std::collections::BTreeMap;

use super::{check_layers, AllocationError, Endpoints, Granularity, SparsityPlan, BUDGET_RTOL, PLAN_VERSION};
use crate::tensorio::{BlockGrouping, WeightStore};

/// Per-layer values produced by the linear map, after clamping to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub values: Vec<f64>,
    pub eta: f64,
    /// Indices of layers held at 0 or 1 by the clamping pass.
    pub clamped: Vec<usize>,
    pub endpoints: Endpoints,
    pub target: f64,
}

/// Map qualities to sparsities with `Σ φ_i d_i = target · Σ d_i`.
///
/// `target` must lie in `(0, 1)`. Layers whose mapped value leaves `[0, 1]`
/// are pinned at the bound and `eta` is re-solved over the rest until no
/// free layer is out of range; this keeps both the budget identity and the
/// ordering of `q`.
pub fn allocate_sparsity(q: &[f64], d: &[f64], target: f64, ends: Endpoints) -> Result<Allocation, AllocationError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(AllocationError::InvalidTarget(target));
    }
    allocate_in_range(q, d, target, ends)
}

/// Same as [`allocate_sparsity`] but accepts the closed interval, which the
/// nested (mixed) allocation needs when a block is pinned at 0 or 1.
pub(crate) fn allocate_in_range(
    q: &[f64],
    d: &[f64],
    target: f64,
    ends: Endpoints,
) -> Result<Allocation, AllocationError> {
    check_layers(q, d)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(AllocationError::InvalidTarget(target));
    }
    let n = q.len();
    let (q_min, q_max) = q
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));

    // Constant q (the normalized position is 0/0) or s1 = s2: every layer
    // sits at the same point of the map, so the plan is exactly uniform.
    // The normalized position is taken as the midpoint of [s1, s2].
    if q_min == q_max || ends.s1 == ends.s2 || target == 0.0 || target == 1.0 {
        return Ok(Allocation {
            values: vec![target; n],
            eta: target / ends.midpoint(),
            clamped: Vec::new(),
            endpoints: ends,
            target,
        });
    }

    let span = q_max - q_min;
    let raw: Vec<f64> = q
        .iter()
        .map(|&v| (v - q_min) / span * (ends.s2 - ends.s1) + ends.s1)
        .collect();
    let total_d: f64 = d.iter().sum();
    let budget = target * total_d;

    let mut pinned: Vec<Option<f64>> = vec![None; n];
    let mut eta;
    loop {
        let pinned_mass: f64 = (0..n).filter_map(|i| pinned[i].map(|v| v * d[i])).sum();
        let free_mass: f64 = (0..n).filter(|&i| pinned[i].is_none()).map(|i| raw[i] * d[i]).sum();
        let remaining = budget - pinned_mass;
        if free_mass <= 0.0 {
            if remaining.abs() <= BUDGET_RTOL * total_d {
                eta = 0.0;
                break;
            }
            return Err(AllocationError::Infeasible(format!(
                "target {target} cannot be met: {remaining} parameters left for layers whose mapped value is zero"
            )));
        }
        eta = remaining / free_mass;
        let mut changed = false;
        for i in 0..n {
            if pinned[i].is_some() {
                continue;
            }
            let v = eta * raw[i];
            if v > 1.0 {
                pinned[i] = Some(1.0);
                changed = true;
            } else if v < 0.0 {
                pinned[i] = Some(0.0);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let values: Vec<f64> = (0..n).map(|i| pinned[i].unwrap_or(eta * raw[i])).collect();
    let achieved: f64 = values.iter().zip(d).map(|(v, w)| v * w).sum();
    if (achieved - budget).abs() > BUDGET_RTOL * total_d {
        return Err(AllocationError::Infeasible(format!(
            "target {target} unattainable within [0, 1]: best achievable {}",
            achieved / total_d
        )));
    }
    Ok(Allocation {
        values,
        eta,
        clamped: (0..n).filter(|&i| pinned[i].is_some()).collect(),
        endpoints: ends,
        target,
    })
}

/// Block-level allocation refined within each block.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedAllocation {
    pub blocks: Allocation,
    /// One allocation per block over its member matrices; its target is the
    /// block's sparsity.
    pub matrices: Vec<Allocation>,
}

/// Allocate over blocks with `tau_block`, then re-apply the map inside each
/// block over its matrices with `tau_matrix` and the block's sparsity as the
/// target.
pub fn allocate_mixed(
    block_q: &[f64],
    matrix_q: &[Vec<f64>],
    matrix_d: &[Vec<f64>],
    target: f64,
    tau_block: f64,
    tau_matrix: f64,
) -> Result<MixedAllocation, AllocationError> {
    if block_q.len() != matrix_q.len() || block_q.len() != matrix_d.len() {
        return Err(AllocationError::InvalidInput(
            "block and per-matrix inputs differ in length".into(),
        ));
    }
    mixed(
        block_q,
        matrix_q,
        matrix_d,
        target,
        Endpoints::from_tau(tau_block)?,
        Endpoints::from_tau(tau_matrix)?,
    )
}

pub(crate) fn mixed(
    block_q: &[f64],
    matrix_q: &[Vec<f64>],
    matrix_d: &[Vec<f64>],
    target: f64,
    block_ends: Endpoints,
    inner_ends: Endpoints,
) -> Result<MixedAllocation, AllocationError> {
    let block_d: Vec<f64> = matrix_d.iter().map(|ds| ds.iter().sum()).collect();
    let blocks = allocate_sparsity(block_q, &block_d, target, block_ends)?;
    let matrices = blocks
        .values
        .iter()
        .zip(matrix_q.iter().zip(matrix_d))
        .map(|(&s, (mq, md))| allocate_in_range(mq, md, s, inner_ends))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MixedAllocation { blocks, matrices })
}

/// Endpoints `(s1, 2 - s1)` whose plan has minimum layer sparsity
/// `min_sparsity` at global sparsity `target`, found by bisection on `s1`.
pub fn min_sparsity_endpoints(
    target: f64,
    min_sparsity: f64,
    q: &[f64],
    d: &[f64],
) -> Result<Endpoints, AllocationError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(AllocationError::InvalidTarget(target));
    }
    if !(min_sparsity > 0.0 && min_sparsity < target) {
        return Err(AllocationError::Infeasible(format!(
            "minimum sparsity {min_sparsity} must lie in (0, {target})"
        )));
    }
    check_layers(q, d)?;
    let min_of = |s1: f64| -> Result<f64, AllocationError> {
        let a = allocate_sparsity(q, d, target, Endpoints::new(s1, 2.0 - s1)?)?;
        Ok(a.values.iter().copied().fold(f64::INFINITY, f64::min))
    };
    // s1 = 1 is the uniform plan (minimum = target); s1 = 0 sends the
    // lowest-quality layer to 0
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if min_of(lo)? > min_sparsity || (min_of(hi)? - target).abs() > 1e-12 {
        return Err(AllocationError::Infeasible(
            "minimum layer sparsity cannot be controlled for these qualities".into(),
        ));
    }
    if q.iter().all(|&v| v == q[0]) {
        return Err(AllocationError::Infeasible(
            "all qualities are equal, the plan is uniform at the target".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = min_of(mid)?;
        if (m - min_sparsity).abs() <= 1e-13 || hi - lo <= 1e-16 {
            return Endpoints::new(mid, 2.0 - mid);
        }
        if m < min_sparsity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s1 = 0.5 * (lo + hi);
    Endpoints::new(s1, 2.0 - s1)
}

/// Give every matrix of a block that block's sparsity.
///
/// `alloc.values` must follow `grouping.blocks` order. Parameter counts are
/// read from `store`.
pub fn expand_to_matrices(
    alloc: &Allocation,
    grouping: &BlockGrouping,
    store: &WeightStore,
) -> Result<SparsityPlan, AllocationError> {
    if alloc.values.len() != grouping.blocks.len() {
        return Err(AllocationError::InvalidInput(format!(
            "allocation covers {} blocks, grouping has {}",
            alloc.values.len(),
            grouping.blocks.len()
        )));
    }
    let mut members = Vec::with_capacity(grouping.blocks.len());
    for b in &grouping.blocks {
        let mut m = Vec::with_capacity(b.matrices.len());
        for name in &b.matrices {
            let t = store
                .get(name)
                .ok_or_else(|| AllocationError::MissingTensor(name.clone()))?;
            m.push((name.clone(), t.numel() as f64));
        }
        members.push(m);
    }
    expand(alloc, &members)
}

pub(crate) fn expand(alloc: &Allocation, members: &[Vec<(String, f64)>]) -> Result<SparsityPlan, AllocationError> {
    let mut per_matrix = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut clamped = Vec::new();
    for (b, (ms, &s)) in members.iter().zip(&alloc.values).enumerate() {
        for (name, d) in ms {
            per_matrix.insert(name.clone(), s);
            params.insert(name.clone(), *d);
            if alloc.clamped.contains(&b) {
                clamped.push(name.clone());
            }
        }
    }
    let plan = SparsityPlan {
        version: PLAN_VERSION,
        metric: None,
        granularity: Granularity::PerBlock,
        target: alloc.target,
        tau: alloc.endpoints.tau(),
        tau_matrix: None,
        s1: alloc.endpoints.s1,
        s2: alloc.endpoints.s2,
        eta: alloc.eta,
        clamped,
        per_matrix,
    };
    plan.verify_budget(|name| params.get(name).copied())?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tau(t: f64) -> Endpoints {
        Endpoints::from_tau(t).unwrap()
    }

    #[test]
    fn hand_evaluated_example() {
        // raw = [0.8, 1.0, 1.2], Σ raw·d = 30, eta = 0.5·30/30 = 0.5
        let a = allocate_sparsity(&[1.0, 2.0, 3.0], &[10.0; 3], 0.5, Endpoints::new(0.8, 1.2).unwrap()).unwrap();
        assert_relative_eq!(a.eta, 0.5, epsilon = 1e-15);
        for (v, e) in a.values.iter().zip([0.4, 0.5, 0.6]) {
            assert_relative_eq!(*v, e, epsilon = 1e-15);
        }
        assert!(a.clamped.is_empty());
    }

    #[test]
    fn zero_tau_is_uniform() {
        let a = allocate_sparsity(&[3.0, 1.0, 2.0], &[1.0, 5.0, 7.0], 0.7, tau(0.0)).unwrap();
        assert_eq!(a.values, vec![0.7; 3]);
    }

    #[test]
    fn equal_qualities_are_uniform() {
        let a = allocate_sparsity(&[2.5; 4], &[1.0, 2.0, 3.0, 4.0], 0.3, tau(0.5)).unwrap();
        assert_eq!(a.values, vec![0.3; 4]);
    }

    #[test]
    fn clamping_pins_at_one_and_rebalances() {
        // S = 0.9, tau = 1: raw = [0, 1, 2] → eta·2 > 1 pins the top layer.
        // Remaining: 2.7 - 1 = 1.7 over raw mass 1 → eta = 1.7 → pins the
        // middle layer too; then 0.7 left over raw mass 0 → infeasible.
        let err = allocate_sparsity(&[0.0, 1.0, 2.0], &[1.0; 3], 0.9, tau(1.0)).unwrap_err();
        assert!(matches!(err, AllocationError::Infeasible(_)));

        // tau = 0.5: raw = [0.5, 1, 1.5], eta = 0.9 → 1.35 > 1 pinned.
        // Remaining 1.7 over 1.5 → eta = 1.1333 → middle 1.1333 pinned.
        // Remaining 0.7 over 0.5 → eta = 1.4 → bottom 0.7.
        let a = allocate_sparsity(&[0.0, 1.0, 2.0], &[1.0; 3], 0.9, tau(0.5)).unwrap();
        assert_relative_eq!(a.values[0], 0.7, epsilon = 1e-12);
        assert_eq!(&a.values[1..], &[1.0, 1.0]);
        assert_eq!(a.clamped, vec![1, 2]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            allocate_sparsity(&[1.0], &[1.0], 1.0, tau(0.1)),
            Err(AllocationError::InvalidTarget(_))
        ));
        assert!(allocate_sparsity(&[1.0, 2.0], &[1.0], 0.5, tau(0.1)).is_err());
        assert!(allocate_sparsity(&[1.0, 2.0], &[1.0, 0.0], 0.5, tau(0.1)).is_err());
        assert!(allocate_sparsity(&[], &[], 0.5, tau(0.1)).is_err());
    }

    #[test]
    fn mixed_with_zero_matrix_tau_is_per_block() {
        let bq = [1.0, 3.0];
        let mq = vec![vec![0.5, 2.0], vec![4.0, 1.0]];
        let md = vec![vec![10.0, 30.0], vec![20.0, 20.0]];
        let m = allocate_mixed(&bq, &mq, &md, 0.6, 0.3, 0.0).unwrap();
        let per_block = allocate_sparsity(&bq, &[40.0, 40.0], 0.6, tau(0.3)).unwrap();
        assert_eq!(m.blocks, per_block);
        for (inner, &s) in m.matrices.iter().zip(&per_block.values) {
            assert!(inner.values.iter().all(|&v| v == s));
        }
    }

    #[test]
    fn mixed_with_single_matrix_blocks_is_per_block() {
        let bq = [1.0, 2.0, 4.0];
        let mq = vec![vec![1.0], vec![2.0], vec![4.0]];
        let md = vec![vec![5.0], vec![7.0], vec![9.0]];
        let m = allocate_mixed(&bq, &mq, &md, 0.5, 0.4, 0.9).unwrap();
        let per_block = allocate_sparsity(&bq, &[5.0, 7.0, 9.0], 0.5, tau(0.4)).unwrap();
        for (inner, &s) in m.matrices.iter().zip(&per_block.values) {
            assert_eq!(inner.values, vec![s]);
        }
    }

    #[test]
    fn mixed_two_by_two_hand_oracle() {
        // blocks: q = [1, 2], d = [20, 20], S = 0.5, tau_block = 0.2
        //   raw = [0.8, 1.2], eta = 0.5·40/40 = 0.5 → [0.4, 0.6]
        // block 0 matrices: q = [5, 1], d = [10, 10], tau_matrix = 0.5
        //   raw = [1.5, 0.5], eta = 0.4·20/20 = 0.4 → [0.6, 0.2]
        // block 1 matrices: q = [2, 3], d = [5, 15]
        //   raw = [0.5, 1.5], Σ raw·d = 25, eta = 0.6·20/25 = 0.48 → [0.24, 0.72]
        let m = allocate_mixed(
            &[1.0, 2.0],
            &[vec![5.0, 1.0], vec![2.0, 3.0]],
            &[vec![10.0, 10.0], vec![5.0, 15.0]],
            0.5,
            0.2,
            0.5,
        )
        .unwrap();
        let expected = [[0.6, 0.2], [0.24, 0.72]];
        for (a, e) in m.matrices.iter().zip(expected) {
            for (v, x) in a.values.iter().zip(e) {
                assert_relative_eq!(*v, x, epsilon = 1e-12);
            }
        }
        let total: f64 = [0.6 * 10.0, 0.2 * 10.0, 0.24 * 5.0, 0.72 * 15.0].iter().sum();
        assert_relative_eq!(total, 0.5 * 40.0, epsilon = 1e-12);
    }

    #[test]
    fn min_sparsity_near_target_is_near_uniform() {
        let q = [1.0, 2.0, 5.0, 3.0];
        let d = [1.0, 2.0, 1.0, 3.0];
        let e = min_sparsity_endpoints(0.6, 0.6 - 1e-6, &q, &d).unwrap();
        let a = allocate_sparsity(&q, &d, 0.6, e).unwrap();
        let spread = a.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - a.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-4, "{spread}");
    }

    #[test]
    fn min_sparsity_errors() {
        let q = [1.0, 2.0];
        let d = [1.0, 1.0];
        assert!(matches!(min_sparsity_endpoints(0.7, 0.7, &q, &d), Err(AllocationError::Infeasible(_))));
        assert!(matches!(min_sparsity_endpoints(0.7, 0.8, &q, &d), Err(AllocationError::Infeasible(_))));
        assert!(matches!(
            min_sparsity_endpoints(0.7, 0.5, &[1.0, 1.0], &d),
            Err(AllocationError::Infeasible(_))
        ));
    }

    #[test]
    fn min_sparsity_hits_requested_minimum() {
        let q = [2.1, 3.4, 2.9, 4.8, 3.3];
        let d = [4.0, 4.0, 4.0, 4.0, 4.0];
        let e = min_sparsity_endpoints(0.7, 0.57, &q, &d).unwrap();
        assert_relative_eq!(e.s1 + e.s2, 2.0, epsilon = 1e-15);
        let a = allocate_sparsity(&q, &d, 0.7, e).unwrap();
        let min = a.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((min - 0.57).abs() < 1e-9, "{min}");
    }
}
