//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use htsr_core::tensorio::{load_checkpoint, CheckpointFormat, WeightStore};
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn toy(variant: &str) -> WeightStore {
    load_checkpoint(&fixture(&format!("toy_{variant}.safetensors")), CheckpointFormat::Safetensors)
        .expect("toy fixture loads")
}

pub fn reference() -> serde_json::Value {
    let text = std::fs::read_to_string(fixture("reference.json")).expect("reference.json");
    serde_json::from_str(&text).expect("reference parses")
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Vec<f32> {
    (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Singular values, descending, by one-sided Jacobi rotations.
pub fn jacobi_singular_values(data: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    // work on columns of A (m × n, m >= n); transpose otherwise
    let at = |i: usize, j: usize| f64::from(data[i * cols + j]);
    let (m, n) = (rows.max(cols), rows.min(cols));
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| if rows >= cols { at(i, j) } else { at(j, i) }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = a.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    (*x, *y) = (c * *x - s * *y, s * *x + c * *y);
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Mask of a full sort by `(|w|, index)`: the first `z` entries are pruned.
pub fn brute_force_magnitude_mask(w: &[f32], s: f64) -> Vec<bool> {
    let z = (s * w.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap().then(a.cmp(&b)));
    let mut keep = vec![true; w.len()];
    for &i in idx.iter().take(z) {
        keep[i] = false;
    }
    keep
}

/// For each group, try every N-subset and keep the one with the largest
/// magnitude sum, preferring lower columns on ties (lexicographically
/// smallest index set among maxima).
pub fn brute_force_nm_mask(w: &[f32], n: usize, m: usize) -> Vec<bool> {
    let mut keep = vec![false; w.len()];
    for (g, chunk) in w.chunks(m).enumerate() {
        let mut best: Option<(Vec<f32>, u32)> = None;
        for set in 0u32..(1 << m) {
            if set.count_ones() as usize != n {
                continue;
            }
            // compare kept magnitudes sorted descending; this orders subsets
            // the same way as "take the N largest"
            let mut mags: Vec<f32> = (0..m).filter(|j| set >> j & 1 == 1).map(|j| chunk[j].abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let better = match &best {
                None => true,
                Some((bm, bset)) => match mags.partial_cmp(bm).unwrap() {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => lower_columns(set, *bset, m),
                    std::cmp::Ordering::Less => false,
                },
            };
            if better {
                best = Some((mags, set));
            }
        }
        let set = best.unwrap().1;
        for j in 0..m {
            keep[g * m + j] = set >> j & 1 == 1;
        }
    }
    keep
}

/// `a` keeps lower columns than `b`: the sorted index lists compare less.
fn lower_columns(a: u32, b: u32, m: usize) -> bool {
    let ia: Vec<usize> = (0..m).filter(|j| a >> j & 1 == 1).collect();
    let ib: Vec<usize> = (0..m).filter(|j| b >> j & 1 == 1).collect();
    ia < ib
}

/// The linear quality map evaluated directly, no clamping.
pub fn linear_map(q: &[f64], d: &[f64], s: f64, s1: f64, s2: f64) -> (Vec<f64>, f64) {
    let qmin = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let qmax = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if qmin == qmax {
        return (vec![s; q.len()], s / ((s1 + s2) / 2.0));
    }
    let raw: Vec<f64> = q.iter().map(|v| (v - qmin) / (qmax - qmin) * (s2 - s1) + s1).collect();
    let eta = s * d.iter().sum::<f64>() / raw.iter().zip(d).map(|(r, w)| r * w).sum::<f64>();
    (raw.iter().map(|r| eta * r).collect(), eta)
}

pub fn frobenius_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Ranks of `v` (ascending, ties by index) as a permutation.
pub fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
    idx
}
