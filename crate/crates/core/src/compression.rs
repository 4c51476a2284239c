//! Magnitude and N:M pruning, round-to-nearest quantization, and truncated
//! SVD, plus applying a plan to a whole checkpoint.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{BudgetKind, BudgetPlan, SparsityPlan};
use crate::tensorio::{MatrixRef, WeightStore};

/// Relative tolerance of the internal Eckart-Young check.
pub const ECKART_YOUNG_RTOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("`{name}`: {reason}")]
    Shape { name: String, reason: String },
    #[error("plan names `{0}`, which is not in the checkpoint")]
    MissingTensor(String),
    #[error("plan names `{0}`, which is not a 2-D tensor")]
    NotMatrix(String),
    #[error("`{name}`: reconstruction error {measured} disagrees with singular value tail {tail}")]
    EckartYoung { name: String, measured: f64, tail: f64 },
    #[error("plan file: {0}")]
    Plan(String),
}

/// Keep/drop flag per element, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub rows: usize,
    pub cols: usize,
    keep: Vec<bool>,
    kept_count: usize,
}

impl PruneMask {
    fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Self {
        let kept_count = keep.iter().filter(|&&k| k).count();
        PruneMask {
            rows,
            cols,
            keep,
            kept_count,
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_count as f64 / self.keep.len() as f64
    }

    fn apply(&self, data: &[f32]) -> Vec<f32> {
        data.iter().zip(&self.keep).map(|(&w, &k)| if k { w } else { 0.0 }).collect()
    }
}

/// Entries zeroed at sparsity `s` of `d` parameters: `round(s·d)`, halves
/// away from zero.
pub fn zero_count(d: usize, s: f64) -> usize {
    ((s * d as f64).round() as usize).min(d)
}

/// Zero the `round(s·d)` smallest-magnitude entries. Equal magnitudes are
/// pruned in row-major order.
pub fn magnitude_prune(w: MatrixRef<'_>, s: f64) -> Result<(Vec<f32>, PruneMask), CompressionError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(CompressionError::InvalidArgument(format!("sparsity {s} outside [0, 1]")));
    }
    let d = w.data.len();
    let z = zero_count(d, s);
    let mut keep = vec![true; d];
    if z > 0 {
        let mut idx: Vec<usize> = (0..d).collect();
        let key = |&i: &usize| (w.data[i].abs(), i);
        let cmp = |a: &usize, b: &usize| {
            let (ma, ia) = key(a);
            let (mb, ib) = key(b);
            ma.total_cmp(&mb).then(ia.cmp(&ib))
        };
        if z < d {
            idx.select_nth_unstable_by(z - 1, cmp);
        }
        for &i in &idx[..z] {
            keep[i] = false;
        }
    }
    let mask = PruneMask::new(w.rows, w.cols, keep);
    Ok((mask.apply(w.data), mask))
}

/// Keep the `n` largest-magnitude entries of every run of `m` consecutive
/// entries along each row; equal magnitudes keep the lower column.
pub fn nm_prune(w: MatrixRef<'_>, n: u32, m: u32) -> Result<(Vec<f32>, PruneMask), CompressionError> {
    if m == 0 || n == 0 || n > m {
        return Err(CompressionError::InvalidArgument(format!("need 1 <= N <= M, got {n}:{m}")));
    }
    let (n, m) = (n as usize, m as usize);
    if !w.cols.is_multiple_of(m) {
        return Err(CompressionError::Shape {
            name: String::new(),
            reason: format!("{} columns are not divisible by M = {m}", w.cols),
        });
    }
    let mut keep = vec![false; w.data.len()];
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (g, chunk) in w.data.chunks_exact(m).enumerate() {
        order.clear();
        order.extend(0..m);
        order.sort_by(|&a, &b| chunk[b].abs().total_cmp(&chunk[a].abs()).then(a.cmp(&b)));
        for &j in &order[..n] {
            keep[g * m + j] = true;
        }
    }
    let mask = PruneMask::new(w.rows, w.cols, keep);
    Ok((mask.apply(w.data), mask))
}

/// Symmetric per-matrix round-to-nearest quantization, dequantized.
///
/// `scale = max|w| / (2^(bits-1) - 1)`; levels are rounded half to even.
/// An all-zero matrix is returned unchanged.
pub fn rtn_quantize(w: MatrixRef<'_>, bits: u32) -> Result<Vec<f32>, CompressionError> {
    if !(2..=8).contains(&bits) {
        return Err(CompressionError::InvalidArgument(format!("bit-width {bits} outside [2, 8]")));
    }
    let qmax = f64::from((1u32 << (bits - 1)) - 1);
    let max = w.data.iter().fold(0.0f64, |acc, &v| acc.max(f64::from(v).abs()));
    if max == 0.0 {
        return Ok(w.data.to_vec());
    }
    let scale = max / qmax;
    Ok(w
        .data
        .iter()
        .map(|&v| ((f64::from(v) / scale).round_ties_even().clamp(-qmax, qmax) * scale) as f32)
        .collect())
}

/// Rank-`r` truncated SVD in `f64`, row-major, with the tail
/// `sqrt(Σ_{i>r} σ_i²)`.
pub fn lra_reconstruct(w: MatrixRef<'_>, r: usize) -> Result<(Vec<f64>, f64), CompressionError> {
    let full = w.rows.min(w.cols);
    if r == 0 || r > full {
        return Err(CompressionError::InvalidArgument(format!("rank {r} outside [1, {full}]")));
    }
    let svd = w.to_dmatrix().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..full).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut approx = nalgebra::DMatrix::<f64>::zeros(w.rows, w.cols);
    for &i in &order[..r] {
        let s = svd.singular_values[i];
        approx += u.column(i) * vt.row(i) * s;
    }
    let tail = order[r..]
        .iter()
        .map(|&i| svd.singular_values[i].powi(2))
        .sum::<f64>()
        .sqrt()
        .abs();
    let data = (0..w.rows)
        .flat_map(|i| (0..w.cols).map(move |j| (i, j)))
        .map(|(i, j)| approx[(i, j)])
        .collect();
    Ok((data, tail))
}

/// Rank-`r` truncation rounded to `f32`, and its error
/// `sqrt(Σ_{i>r} σ_i²)` after checking it against `‖W - Ŵ‖_F`.
pub fn lra_truncate(w: MatrixRef<'_>, r: usize) -> Result<(Vec<f32>, f64), CompressionError> {
    let (approx, tail) = lra_reconstruct(w, r)?;
    let (measured, scale) = w.data.iter().zip(&approx).fold((0.0f64, 0.0f64), |(e, n), (&x, &y)| {
        let x = f64::from(x);
        (e + (x - y).powi(2), n + x * x)
    });
    let (measured, scale) = (measured.sqrt(), scale.sqrt());
    // below about sqrt(eps)·‖W‖ the tail is rounding noise
    let floor = f64::EPSILON.sqrt() * scale;
    if (measured - tail).abs() > ECKART_YOUNG_RTOL * tail.max(floor) {
        return Err(CompressionError::EckartYoung {
            name: String::new(),
            measured,
            tail,
        });
    }
    Ok((approx.iter().map(|&v| v as f32).collect(), tail))
}

/// A sparsity plan or an integer budget plan.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressionPlan {
    Sparsity(SparsityPlan),
    Budget(BudgetPlan),
}

impl CompressionPlan {
    /// Budget plans carry a `kind` field; sparsity plans do not.
    pub fn from_json(text: &str) -> Result<Self, CompressionError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CompressionError::Plan(e.to_string()))?;
        let plan = if value.get("kind").is_some() {
            BudgetPlan::from_json(text).map(CompressionPlan::Budget)
        } else {
            SparsityPlan::from_json(text).map(CompressionPlan::Sparsity)
        };
        plan.map_err(|e| CompressionError::Plan(e.to_string()))
    }

    fn entries(&self) -> Vec<(String, Op)> {
        match self {
            CompressionPlan::Sparsity(p) => p.per_matrix.iter().map(|(n, &s)| (n.clone(), Op::Magnitude(s))).collect(),
            CompressionPlan::Budget(p) => {
                let m = p.group_size();
                p.per_layer
                    .iter()
                    .map(|(n, &v)| {
                        let op = match p.kind {
                            BudgetKind::Nm => Op::NM(v, m),
                            BudgetKind::Bits => Op::Rtn(v),
                            BudgetKind::Ranks => Op::Lra(v as usize),
                        };
                        (n.clone(), op)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Magnitude(f64),
    NM(u32, u32),
    Rtn(u32),
    Lra(usize),
}

impl Op {
    fn check(self, name: &str, rows: usize, cols: usize) -> Result<(), CompressionError> {
        let bad = |reason: String| {
            Err(CompressionError::Shape {
                name: name.to_string(),
                reason,
            })
        };
        match self {
            Op::Magnitude(s) if !(0.0..=1.0).contains(&s) => bad(format!("sparsity {s} outside [0, 1]")),
            Op::NM(n, m) if n == 0 || n > m => bad(format!("invalid N:M = {n}:{m}")),
            Op::NM(_, m) if !cols.is_multiple_of(m as usize) => bad(format!("{cols} columns are not divisible by M = {m}")),
            Op::Rtn(b) if !(2..=8).contains(&b) => bad(format!("bit-width {b} outside [2, 8]")),
            Op::Lra(r) if r == 0 || r > rows.min(cols) => bad(format!("rank {r} outside [1, {}]", rows.min(cols))),
            _ => Ok(()),
        }
    }

    fn run(self, w: MatrixRef<'_>) -> Result<Vec<f32>, CompressionError> {
        Ok(match self {
            Op::Magnitude(s) => magnitude_prune(w, s)?.0,
            Op::NM(n, m) => nm_prune(w, n, m)?.0,
            Op::Rtn(b) => rtn_quantize(w, b)?,
            Op::Lra(r) => lra_truncate(w, r)?.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub name: String,
    pub d: usize,
    pub zeros: usize,
    pub sparsity: f64,
    /// Planned sparsity, N, bit-width or rank.
    pub planned: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// `‖W - Ŵ‖_F` of the stored output.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub operation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    pub global_sparsity: f64,
    pub total_params: usize,
    pub total_zeros: usize,
    pub matrices: Vec<MatrixReport>,
}

pub const REPORT_CSV_HEADER: [&str; 8] = ["name", "d", "zeros", "sparsity", "planned", "bits", "rank", "error"];

impl CompressionReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_HEADER).expect("in-memory write");
        for m in &self.matrices {
            w.write_record([
                m.name.clone(),
                m.d.to_string(),
                m.zeros.to_string(),
                m.sparsity.to_string(),
                m.planned.to_string(),
                m.bits.map(|b| b.to_string()).unwrap_or_default(),
                m.rank.map(|r| r.to_string()).unwrap_or_default(),
                m.error.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn frobenius_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Transform every tensor named by `plan` and copy the rest.
///
/// All entries are validated before any work starts, so an error leaves
/// nothing half-done. Matrices are processed in parallel on the current
/// rayon pool. Output values are stored back in each tensor's dtype.
pub fn apply_plan(
    store: &WeightStore,
    plan: &CompressionPlan,
) -> Result<(WeightStore, CompressionReport), CompressionError> {
    let entries = plan.entries();
    for (name, op) in &entries {
        let t = store.get(name).ok_or_else(|| CompressionError::MissingTensor(name.clone()))?;
        let m = t.as_matrix().ok_or_else(|| CompressionError::NotMatrix(name.clone()))?;
        op.check(name, m.rows, m.cols)?;
    }

    let outputs: Vec<(String, Vec<f32>, MatrixReport)> = entries
        .par_iter()
        .map(|(name, op)| {
            let t = store.get(name).expect("validated");
            let w = t.as_matrix().expect("validated");
            let data = op.run(w).map_err(|e| match e {
                CompressionError::EckartYoung { measured, tail, .. } => CompressionError::EckartYoung {
                    name: name.clone(),
                    measured,
                    tail,
                },
                other => other,
            })?;
            // round through the storage dtype so the report matches the file
            let stored = t.dtype().decode(&t.dtype().encode(&data));
            let zeros = stored.iter().filter(|&&v| v == 0.0).count();
            let d = stored.len();
            let (planned, bits, rank) = match *op {
                Op::Magnitude(s) => (s, None, None),
                Op::NM(n, _) => (f64::from(n), None, None),
                Op::Rtn(b) => (f64::from(b), Some(b), None),
                Op::Lra(r) => (r as f64, None, Some(r)),
            };
            let report = MatrixReport {
                name: name.clone(),
                d,
                zeros,
                sparsity: zeros as f64 / d as f64,
                planned,
                bits,
                rank,
                error: frobenius_diff(w.data, &stored),
            };
            Ok((name.clone(), stored, report))
        })
        .collect::<Result<_, CompressionError>>()?;

    let mut out = store.clone();
    let mut matrices = Vec::with_capacity(outputs.len());
    let mut replaced = BTreeMap::new();
    for (name, data, report) in outputs {
        let t = store.get(&name).expect("validated").with_data(data).map_err(CompressionError::InvalidArgument)?;
        replaced.insert(name, t);
        matrices.push(report);
    }
    for (name, t) in replaced {
        out.replace(&name, t);
    }
    let total_params: usize = matrices.iter().map(|m| m.d).sum();
    let total_zeros: usize = matrices.iter().map(|m| m.zeros).sum();
    let (operation, target) = match plan {
        CompressionPlan::Sparsity(p) => ("magnitude".to_string(), Some(p.target)),
        CompressionPlan::Budget(p) => (
            match p.kind {
                BudgetKind::Nm => format!("nm:{}", p.group_size()),
                BudgetKind::Bits => "rtn".to_string(),
                BudgetKind::Ranks => "lra".to_string(),
            },
            Some(p.budget),
        ),
    };
    let report = CompressionReport {
        operation,
        target,
        global_sparsity: if total_params == 0 {
            0.0
        } else {
            total_zeros as f64 / total_params as f64
        },
        total_params,
        total_zeros,
        matrices,
    };
    Ok((out, report))
}
