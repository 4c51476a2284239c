//! Per-matrix shape and scale metrics and their block averages.
//!
//! | metric        | definition                                 |
//! |---------------|--------------------------------------------|
//! | `alpha_hill`  | Hill tail exponent of the spectrum          |
//! | `alpha_hat`   | `alpha · ln λ_max`                          |
//! | `stable_rank` | `Σλ / λ_max` = `‖W‖_F² / ‖W‖₂²`              |
//! | `entropy`     | `-(1/ln R) Σ p_i ln p_i`, `p_i = λ_i / Σλ`   |
//! | `frobenius`   | `‖W‖_F² = Σλ`                               |
//! | `spectral`    | `‖W‖₂² = λ_max`                             |
//!
//! Allocation treats a larger value of any of these as "less heavy-tailed,
//! more prunable".

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{compute_esd, pl_alpha_hill, Esd, PlFit, SpectralError};
use crate::tensorio::{BlockGrouping, WeightStore};

/// Singular values at or below this fraction of `σ_max` do not count toward
/// the numerical rank used by the entropy metric.
pub const RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("spectral maximum λ_max = {0} must be positive")]
    NonPositiveLambdaMax(f64),
    #[error("all-zero spectrum")]
    ZeroSpectrum,
    #[error("matrix `{0}` is in the grouping but not a 2-D tensor of the store")]
    MissingMatrix(String),
    #[error("block {block}: no member matrix could be analyzed ({})", .failures.join("; "))]
    EmptyBlock { block: usize, failures: Vec<String> },
    #[error("report: {0}")]
    Report(String),
}

/// Which metric supplies block qualities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AlphaHill,
    AlphaHat,
    StableRank,
    Entropy,
    Frobenius,
    Spectral,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::AlphaHill,
        Metric::AlphaHat,
        Metric::StableRank,
        Metric::Entropy,
        Metric::Frobenius,
        Metric::Spectral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AlphaHill => "alpha_hill",
            Metric::AlphaHat => "alpha_hat",
            Metric::StableRank => "stable_rank",
            Metric::Entropy => "entropy",
            Metric::Frobenius => "frobenius",
            Metric::Spectral => "spectral",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                format!("unknown metric `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// `α · ln λ_max`.
pub fn alpha_hat(fit: &PlFit) -> Result<f64, MetricsError> {
    if fit.lambda_max <= 0.0 {
        return Err(MetricsError::NonPositiveLambdaMax(fit.lambda_max));
    }
    Ok(fit.alpha * fit.lambda_max.ln())
}

/// `Σλ / λ_max`.
pub fn stable_rank(esd: &Esd) -> Result<f64, MetricsError> {
    let max = esd.lambda_max();
    if max <= 0.0 {
        return Err(MetricsError::ZeroSpectrum);
    }
    Ok(esd.sum() / max)
}

/// Normalized spectral entropy over the numerically non-zero eigenvalues.
/// Zero when the numerical rank is at most one.
pub fn entropy(esd: &Esd) -> Result<f64, MetricsError> {
    let max = esd.lambda_max();
    if max <= 0.0 {
        return Err(MetricsError::ZeroSpectrum);
    }
    // σ > rtol·σ_max  ⇔  λ > rtol²·λ_max
    let floor = RANK_RTOL * RANK_RTOL * max;
    let positive: Vec<f64> = esd.eigenvalues().iter().copied().filter(|&v| v > floor).collect();
    let rank = positive.len();
    if rank <= 1 {
        return Ok(0.0);
    }
    let total: f64 = positive.iter().sum();
    let h: f64 = positive
        .iter()
        .map(|&v| {
            let p = v / total;
            p * p.ln()
        })
        .sum();
    Ok((-h / (rank as f64).ln()).clamp(0.0, 1.0))
}

/// `(‖W‖_F², ‖W‖₂²)` read off the spectrum.
pub fn scale_norms(esd: &Esd) -> (f64, f64) {
    (esd.sum(), esd.lambda_max())
}

/// Every metric for one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetrics {
    pub name: String,
    pub block: usize,
    pub d: usize,
    pub alpha_hill: f64,
    pub alpha_hat: f64,
    pub stable_rank: f64,
    pub entropy: f64,
    pub frobenius_sq: f64,
    pub spectral_sq: f64,
    #[serde(flatten)]
    pub fit: PlFit,
}

impl MatrixMetrics {
    pub fn from_esd(name: &str, block: usize, d: usize, esd: &Esd) -> Result<Self, MetricsError> {
        let fit = pl_alpha_hill(esd)?;
        let (frobenius_sq, spectral_sq) = scale_norms(esd);
        Ok(MatrixMetrics {
            name: name.to_string(),
            block,
            d,
            alpha_hill: fit.alpha,
            alpha_hat: alpha_hat(&fit)?,
            stable_rank: stable_rank(esd)?,
            entropy: entropy(esd)?,
            frobenius_sq,
            spectral_sq,
            fit,
        })
    }

    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::AlphaHill => self.alpha_hill,
            Metric::AlphaHat => self.alpha_hat,
            Metric::StableRank => self.stable_rank,
            Metric::Entropy => self.entropy,
            Metric::Frobenius => self.frobenius_sq,
            Metric::Spectral => self.spectral_sq,
        }
    }
}

/// A matrix whose spectrum could not be fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFailure {
    pub name: String,
    pub block: usize,
    pub d: usize,
    pub error: String,
}

/// Mean metric over a block's successfully analyzed matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockQuality {
    pub block: usize,
    pub q: f64,
    /// Parameters over all member matrices, analyzed or not.
    pub d: usize,
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<String>,
}

/// Output of [`analyze_model`]; serializes as the JSON metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnalysis {
    pub version: u32,
    pub metric: Metric,
    pub matrices: Vec<MatrixMetrics>,
    pub blocks: Vec<BlockQuality>,
    #[serde(default)]
    pub failures: Vec<MatrixFailure>,
}

pub const REPORT_VERSION: u32 = 1;

/// Analyze every grouped matrix and average `metric` per block.
///
/// Matrices are processed in parallel on the current rayon pool; output
/// order follows the grouping and does not depend on scheduling.
pub fn analyze_model(
    store: &WeightStore,
    grouping: &BlockGrouping,
    metric: Metric,
) -> Result<ModelAnalysis, MetricsError> {
    let jobs: Vec<(usize, &str)> = grouping.grouped_names().collect();
    for (_, name) in &jobs {
        if !store.get(name).is_some_and(|t| t.is_matrix()) {
            return Err(MetricsError::MissingMatrix(name.to_string()));
        }
    }

    let outcomes: Vec<Result<MatrixMetrics, MatrixFailure>> = jobs
        .par_iter()
        .map(|&(block, name)| {
            let m = store.get(name).and_then(|t| t.as_matrix()).expect("checked above");
            let d = m.rows * m.cols;
            compute_esd(name, m)
                .map_err(MetricsError::from)
                .and_then(|esd| MatrixMetrics::from_esd(name, block, d, &esd))
                .map_err(|e| MatrixFailure {
                    name: name.to_string(),
                    block,
                    d,
                    error: e.to_string(),
                })
        })
        .collect();

    let mut matrices = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(m) => matrices.push(m),
            Err(f) => failures.push(f),
        }
    }
    let blocks = block_qualities(grouping, &matrices, &failures, metric)?;
    Ok(ModelAnalysis {
        version: REPORT_VERSION,
        metric,
        matrices,
        blocks,
        failures,
    })
}

fn block_qualities(
    grouping: &BlockGrouping,
    matrices: &[MatrixMetrics],
    failures: &[MatrixFailure],
    metric: Metric,
) -> Result<Vec<BlockQuality>, MetricsError> {
    grouping
        .blocks
        .iter()
        .map(|b| {
            let ok: Vec<&MatrixMetrics> = matrices.iter().filter(|m| m.block == b.index).collect();
            let bad: Vec<&MatrixFailure> = failures.iter().filter(|f| f.block == b.index).collect();
            if ok.is_empty() {
                return Err(MetricsError::EmptyBlock {
                    block: b.index,
                    failures: bad.iter().map(|f| format!("{}: {}", f.name, f.error)).collect(),
                });
            }
            let q = ok.iter().map(|m| m.value(metric)).sum::<f64>() / ok.len() as f64;
            let d = ok.iter().map(|m| m.d).sum::<usize>() + bad.iter().map(|f| f.d).sum::<usize>();
            Ok(BlockQuality {
                block: b.index,
                q,
                d,
                members: b.matrices.clone(),
                failed: bad.iter().map(|f| f.name.clone()).collect(),
            })
        })
        .collect()
}

impl ModelAnalysis {
    /// Recompute block qualities for another metric.
    pub fn with_metric(&self, metric: Metric) -> Result<ModelAnalysis, MetricsError> {
        let grouping = BlockGrouping {
            blocks: self
                .blocks
                .iter()
                .map(|b| crate::tensorio::Block {
                    index: b.block,
                    matrices: b.members.clone(),
                })
                .collect(),
            ..Default::default()
        };
        Ok(ModelAnalysis {
            metric,
            blocks: block_qualities(&grouping, &self.matrices, &self.failures, metric)?,
            ..self.clone()
        })
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        if self.matrices.is_empty() {
            return None;
        }
        Some(self.matrices.iter().map(|m| m.value(metric)).sum::<f64>() / self.matrices.len() as f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::Report(e.to_string()))
    }

    /// One row per analyzed matrix.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for m in &self.matrices {
            w.write_record([
                m.name.clone(),
                m.block.to_string(),
                m.d.to_string(),
                m.alpha_hill.to_string(),
                m.alpha_hat.to_string(),
                m.stable_rank.to_string(),
                m.entropy.to_string(),
                m.frobenius_sq.to_string(),
                m.spectral_sq.to_string(),
                m.fit.k.to_string(),
                m.fit.lambda_min.to_string(),
                m.fit.lambda_max.to_string(),
                m.fit.fallback_used.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "name",
    "block",
    "d",
    "alpha_hill",
    "alpha_hat",
    "stable_rank",
    "entropy",
    "frobenius_sq",
    "spectral_sq",
    "k",
    "lambda_min",
    "lambda_max",
    "fallback_used",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{group_blocks, GroupingRules, Tensor};
    use approx::assert_relative_eq;
    use std::f64::consts::E;

    fn esd(v: &[f64]) -> Esd {
        Esd::from_eigenvalues(v.to_vec()).unwrap()
    }

    fn fit(alpha: f64, lambda_max: f64) -> PlFit {
        PlFit {
            alpha,
            k: 2,
            lambda_min: 0.5,
            lambda_max,
            fallback_used: false,
        }
    }

    #[test]
    fn alpha_hat_examples() {
        assert_eq!(alpha_hat(&fit(2.5, 1.0)).unwrap(), 0.0);
        assert_relative_eq!(alpha_hat(&fit(2.0, E * E)).unwrap(), 4.0, epsilon = 1e-12);
        assert!(alpha_hat(&fit(2.0, 0.0)).is_err());
    }

    #[test]
    fn stable_rank_examples() {
        assert_eq!(stable_rank(&esd(&[1.0; 5])).unwrap(), 5.0);
        assert_eq!(stable_rank(&esd(&[4.0, 1.0])).unwrap(), 1.25);
        assert_eq!(stable_rank(&esd(&[0.0, 0.0, 9.0])).unwrap(), 1.0);
        assert!(matches!(stable_rank(&esd(&[0.0, 0.0])), Err(MetricsError::ZeroSpectrum)));
    }

    #[test]
    fn entropy_examples() {
        assert_relative_eq!(entropy(&esd(&[1.0; 7])).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(entropy(&esd(&[0.0, 0.0, 3.0])).unwrap(), 0.0);
        let expected = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln()) / 2f64.ln();
        assert_relative_eq!(entropy(&esd(&[1.0, 3.0])).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.8113, epsilon = 1e-4);
        assert!(entropy(&esd(&[0.0])).is_err());
    }

    #[test]
    fn scale_norm_examples() {
        assert_eq!(scale_norms(&esd(&[1.0, 4.0])), (5.0, 4.0));
        assert_eq!(scale_norms(&esd(&[1.0, 1.0, 1.0])), (3.0, 1.0));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("alpha".parse::<Metric>().is_err());
    }

    fn toy_matrix(seed: u32, rows: usize, cols: usize) -> Vec<f32> {
        (0..rows * cols)
            .map(|i| (((i as u32 + 1).wrapping_mul(2654435761u32) ^ seed) % 1000) as f32 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn identical_blocks_get_equal_quality() {
        let mut s = WeightStore::new();
        let w = toy_matrix(7, 16, 12);
        s.insert("h.0.w", Tensor::matrix(16, 12, w.clone()).unwrap()).unwrap();
        s.insert("h.1.w", Tensor::matrix(16, 12, w).unwrap()).unwrap();
        let g = group_blocks(&s, &GroupingRules::gpt2()).unwrap();
        let a = analyze_model(&s, &g, Metric::AlphaHill).unwrap();
        assert_eq!(a.blocks.len(), 2);
        assert_eq!(a.blocks[0].q, a.blocks[1].q);
        assert_eq!(a.blocks[0].d, 16 * 12);
    }

    #[test]
    fn block_quality_is_member_mean() {
        let mk = |name: &str, block, alpha| MatrixMetrics {
            name: name.into(),
            block,
            d: 10,
            alpha_hill: alpha,
            alpha_hat: 0.0,
            stable_rank: 1.0,
            entropy: 0.5,
            frobenius_sq: 1.0,
            spectral_sq: 1.0,
            fit: fit(alpha, 1.0),
        };
        let g = BlockGrouping {
            blocks: vec![crate::tensorio::Block {
                index: 0,
                matrices: vec!["a".into(), "b".into()],
            }],
            ..Default::default()
        };
        let q = block_qualities(&g, &[mk("a", 0, 2.0), mk("b", 0, 4.0)], &[], Metric::AlphaHill).unwrap();
        assert_eq!(q[0].q, 3.0);
        assert_eq!(q[0].d, 20);
    }

    #[test]
    fn failed_matrices_are_skipped_and_reported() {
        let mut s = WeightStore::new();
        s.insert("h.0.good", Tensor::matrix(16, 12, toy_matrix(3, 16, 12)).unwrap()).unwrap();
        s.insert("h.0.zero", Tensor::matrix(4, 4, vec![0.0; 16]).unwrap()).unwrap();
        s.insert("h.1.zero", Tensor::matrix(4, 4, vec![0.0; 16]).unwrap()).unwrap();
        let g = group_blocks(&s, &GroupingRules::gpt2()).unwrap();
        let err = analyze_model(&s, &g, Metric::AlphaHill).unwrap_err();
        assert!(matches!(err, MetricsError::EmptyBlock { block: 1, .. }), "{err}");

        let mut s2 = WeightStore::new();
        s2.insert("h.0.good", Tensor::matrix(16, 12, toy_matrix(3, 16, 12)).unwrap()).unwrap();
        s2.insert("h.0.zero", Tensor::matrix(4, 4, vec![0.0; 16]).unwrap()).unwrap();
        let g2 = group_blocks(&s2, &GroupingRules::gpt2()).unwrap();
        let a = analyze_model(&s2, &g2, Metric::AlphaHill).unwrap();
        assert_eq!(a.matrices.len(), 1);
        assert_eq!(a.failures.len(), 1);
        assert_eq!(a.blocks[0].failed, vec!["h.0.zero".to_string()]);
        assert_eq!(a.blocks[0].d, 16 * 12 + 16);
        assert_eq!(a.blocks[0].q, a.matrices[0].alpha_hill);
    }

    #[test]
    fn report_json_round_trips_and_csv_has_one_row_per_matrix() {
        let mut s = WeightStore::new();
        for b in 0..3 {
            s.insert(format!("h.{b}.w"), Tensor::matrix(20, 10, toy_matrix(b, 20, 10)).unwrap())
                .unwrap();
        }
        let g = group_blocks(&s, &GroupingRules::gpt2()).unwrap();
        let a = analyze_model(&s, &g, Metric::Entropy).unwrap();
        assert_eq!(ModelAnalysis::from_json(&a.to_json()).unwrap(), a);
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3);
        assert!(csv.starts_with("name,block,d,alpha_hill"));
        let switched = a.with_metric(Metric::AlphaHill).unwrap();
        assert_eq!(switched.blocks[1].q, a.matrices[1].alpha_hill);
    }
}
