//! Synthetic spectra for checking the estimator and the tail/rank relation.
//!
//! Eigenvalues are IID Pareto with density `p(λ) ∝ λ^(-α)` on `[1, ∞)`,
//! drawn by inverse CDF: `λ = u^(-1/(α-1))`.
//!
//! The uniform stream is xoshiro256++ seeded through SplitMix64 from a
//! 64-bit seed (the reference `seed_from_u64` expansion). Each draw uses the
//! top 53 bits of one output: `u = ((x >> 11) + 1) · 2^-53`, so
//! `u ∈ (0, 1]` and `λ ≥ 1`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{allocate_ranks, AllocationError, QualityTable, RankStrategy};
use crate::compression::{lra_truncate, CompressionError};
use crate::metrics::{analyze_model, stable_rank, Metric, MetricsError};
use crate::spectral::{pl_alpha_hill, Esd, SpectralError};
use crate::tensorio::{BlockGrouping, WeightStore};

/// Density exponents of the default correlation grid.
pub const DEFAULT_ALPHA_GRID: [f64; 6] = [1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const MIN_SAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("alpha = {0} must exceed 1")]
    InvalidAlpha(f64),
    #[error("n = {0} below the minimum of {MIN_SAMPLES} samples")]
    TooFewSamples(usize),
    #[error("empty alpha grid or seed list")]
    EmptyGrid,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnsemble {
    pub alpha_true: f64,
    pub n: usize,
    pub seed: u64,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
}

impl SyntheticEnsemble {
    pub fn esd(&self) -> Esd {
        Esd::from_eigenvalues(self.eigenvalues.clone()).expect("Pareto samples are finite and positive")
    }
}

/// Uniform draw on `(0, 1]` from one generator output.
pub fn unit_open_closed(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn sample_pareto_esd(alpha_true: f64, n: usize, seed: u64) -> Result<SyntheticEnsemble, SynthError> {
    if !(alpha_true.is_finite() && alpha_true > 1.0) {
        return Err(SynthError::InvalidAlpha(alpha_true));
    }
    if n < MIN_SAMPLES {
        return Err(SynthError::TooFewSamples(n));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let exponent = -1.0 / (alpha_true - 1.0);
    let mut eigenvalues: Vec<f64> = (0..n).map(|_| unit_open_closed(rng.next_u64()).powf(exponent)).collect();
    eigenvalues.sort_by(f64::total_cmp);
    Ok(SyntheticEnsemble {
        alpha_true,
        n,
        seed,
        eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub alpha_true: f64,
    pub seed: u64,
    pub alpha_hill: f64,
    pub stable_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    /// Grid order, then seed order.
    pub rows: Vec<CorrelationRow>,
    /// Pearson r between `alpha_hill` and `stable_rank`; `None` when either
    /// column is constant or there are fewer than two rows.
    pub pearson_r: Option<f64>,
}

pub const CORRELATION_CSV_HEADER: [&str; 4] = ["alpha_true", "seed", "alpha_hill", "stable_rank"];

impl CorrelationTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CORRELATION_CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.alpha_true.to_string(),
                r.seed.to_string(),
                r.alpha_hill.to_string(),
                r.stable_rank.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Mean stable rank per grid value, in grid order.
    pub fn mean_stable_rank(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(a, _, _)| *a == r.alpha_true) {
                Some(e) => {
                    e.1 += r.stable_rank;
                    e.2 += 1;
                }
                None => out.push((r.alpha_true, r.stable_rank, 1)),
            }
        }
        out.into_iter().map(|(a, s, c)| (a, s / c as f64)).collect()
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Fit `alpha_hill` and measure the stable rank of one ensemble per
/// `(alpha, seed)` pair.
///
/// The ensemble seed is the listed seed itself, so every alpha reuses the
/// same uniform draws and rows differ only through alpha.
pub fn correlation_experiment(alpha_grid: &[f64], n: usize, seeds: &[u64]) -> Result<CorrelationTable, SynthError> {
    if alpha_grid.is_empty() || seeds.is_empty() {
        return Err(SynthError::EmptyGrid);
    }
    let jobs: Vec<(f64, u64)> = alpha_grid.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(alpha, seed)| {
            let esd = sample_pareto_esd(alpha, n, seed)?.esd();
            let fit = pl_alpha_hill(&esd)?;
            Ok(CorrelationRow {
                alpha_true: alpha,
                seed,
                alpha_hill: fit.alpha,
                stable_rank: stable_rank(&esd)?,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.alpha_hill).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.stable_rank).collect();
    Ok(CorrelationTable {
        pearson_r: pearson(&x, &y),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy: RankStrategy,
    pub ranks: Vec<u32>,
    /// Per matrix `sqrt(Σ_{i>r} σ_i²)`.
    pub errors: Vec<f64>,
    /// `sqrt(Σ errors²)`, the Frobenius error over all matrices.
    pub total_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LraComparison {
    pub names: Vec<String>,
    pub full_ranks: Vec<u32>,
    pub alpha_hill: Vec<f64>,
    pub keep: u32,
    pub tau: f64,
    pub outcomes: Vec<StrategyOutcome>,
}

pub const LRA_CSV_HEADER: [&str; 6] = ["strategy", "name", "alpha_hill", "full_rank", "rank", "error"];

impl LraComparison {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LRA_CSV_HEADER).expect("in-memory write");
        for o in &self.outcomes {
            let strategy = serde_json::to_value(o.strategy).expect("enum serializes");
            for (i, name) in self.names.iter().enumerate() {
                w.write_record([
                    strategy.as_str().unwrap_or_default().to_string(),
                    name.clone(),
                    self.alpha_hill[i].to_string(),
                    self.full_ranks[i].to_string(),
                    o.ranks[i].to_string(),
                    o.errors[i].to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Allocate `keep` total ranks over the grouped matrices under both
/// strategies (per-matrix `alpha_hill` as quality) and truncate each matrix.
pub fn lra_strategy_experiment(
    store: &WeightStore,
    grouping: &BlockGrouping,
    keep: u32,
    tau: f64,
) -> Result<LraComparison, SynthError> {
    let analysis = analyze_model(store, grouping, Metric::AlphaHill)?;
    let table = QualityTable::from_analysis(&analysis)?;
    let entries: Vec<_> = table.blocks.iter().flat_map(|b| &b.matrices).collect();
    let names: Vec<String> = entries.iter().map(|m| m.name.clone()).collect();
    let q: Vec<f64> = entries.iter().map(|m| m.q).collect();
    let full: Vec<u32> = names
        .iter()
        .map(|n| {
            let m = store.get(n).and_then(|t| t.as_matrix()).expect("analyzed matrix");
            m.rows.min(m.cols) as u32
        })
        .collect();

    let mut outcomes = Vec::with_capacity(2);
    for strategy in [RankStrategy::MoreOnHt, RankStrategy::LessOnHt] {
        let ranks = allocate_ranks(&q, &full, keep, strategy, tau)?.values;
        let errors = names
            .par_iter()
            .zip(&ranks)
            .map(|(n, &r)| {
                let m = store.get(n).and_then(|t| t.as_matrix()).expect("analyzed matrix");
                lra_truncate(m, r as usize).map(|(_, e)| e)
            })
            .collect::<Result<Vec<f64>, CompressionError>>()?;
        let total_error = errors.iter().map(|e| e * e).sum::<f64>().sqrt();
        outcomes.push(StrategyOutcome {
            strategy,
            ranks,
            errors,
            total_error,
        });
    }
    Ok(LraComparison {
        names,
        full_ranks: full,
        alpha_hill: q,
        keep,
        tau,
        outcomes,
    })
}
