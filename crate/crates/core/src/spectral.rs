//! Eigenvalue spectra of weight matrices and power-law tail fits.
//!
//! The spectrum of `W` is the eigenvalue list of `X = WᵀW`, obtained here
//! as the squared singular values of `W` (forming `WᵀW` would square the
//! condition number). The tail exponent is fitted with the Hill estimator
//!
//! ```text
//! alpha = 1 + k / Σ_{i=1..k} ln(λ_{n-i+1} / λ_{n-k})
//! ```
//!
//! over the ascending, 1-based eigenvalues `λ_1 ≤ … ≤ λ_n`, with `k` chosen
//! so that the lower cutoff sits at the peak of the log-spectrum histogram.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::MatrixRef;

/// Eigenvalues at or below this fraction of `λ_max` are treated as
/// numerical zeros and excluded from tail fitting.
pub const ZERO_EIGENVALUE_RTOL: f64 = 1e-12;

/// Lower bound on the Fix-finger histogram bin count.
pub const MIN_HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpectralError {
    #[error("matrix `{name}` has a non-finite entry at ({row}, {col})")]
    NonFinite { name: String, row: usize, col: usize },
    #[error("invalid eigenvalue list: {0}")]
    InvalidEigenvalues(String),
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("degenerate tail: the top {k} eigenvalues all equal the reference eigenvalue")]
    DegenerateTail { k: usize },
    #[error("reference eigenvalue λ_(n-k) is zero for k = {k}")]
    ZeroReference { k: usize },
    #[error("tail size k = {k} outside [1, {max}]")]
    InvalidTailCount { k: usize, max: usize },
}

/// Ascending, non-negative eigenvalues of a correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Esd {
    eigenvalues: Vec<f64>,
}

impl Esd {
    /// Validate and sort. Entries must be finite and non-negative.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Result<Self, SpectralError> {
        if eigenvalues.is_empty() {
            return Err(SpectralError::InvalidEigenvalues("empty".into()));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(SpectralError::InvalidEigenvalues(format!(
                "{bad} is not a finite non-negative value"
            )));
        }
        eigenvalues.sort_by(f64::total_cmp);
        Ok(Esd { eigenvalues })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty")
    }

    pub fn sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Eigenvalues above the numerical-zero floor, ascending.
    pub fn nonzero(&self) -> &[f64] {
        let floor = ZERO_EIGENVALUE_RTOL * self.lambda_max();
        let start = self.eigenvalues.partition_point(|&v| v <= floor);
        &self.eigenvalues[start..]
    }
}

/// Spectrum of `W` as squared singular values, ascending, of length
/// `min(rows, cols)`.
pub fn compute_esd(name: &str, w: MatrixRef<'_>) -> Result<Esd, SpectralError> {
    if let Some(pos) = w.data.iter().position(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite {
            name: name.to_string(),
            row: pos / w.cols,
            col: pos % w.cols,
        });
    }
    let sv = w.to_dmatrix().singular_values();
    Esd::from_eigenvalues(sv.iter().map(|s| s * s).collect())
}

/// Lower cutoff and tail size chosen at the peak of the log-eigenvalue
/// histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub lambda_min: f64,
    pub k: usize,
}

/// Fix-finger threshold selection.
///
/// Histogram of `ln λ` over the non-zero eigenvalues with
/// `max(10, ⌊√n⌋)` equal-width bins spanning `[ln λ_min⁺, ln λ_max]`. The
/// most populated bin (lowest index on ties) gives `lambda_min = exp(center)`,
/// and `k = |{λ > lambda_min}|` clamped to `[2, n-1]`.
pub fn fix_finger_threshold(esd: &Esd) -> Result<Threshold, SpectralError> {
    let (lambda_min, k) = fix_finger_on(nonzero_or_err(esd)?)?;
    Ok(Threshold { lambda_min, k })
}

fn nonzero_or_err(esd: &Esd) -> Result<&[f64], SpectralError> {
    if esd.lambda_max() <= 0.0 {
        return Err(SpectralError::DegenerateSpectrum("all eigenvalues are zero".into()));
    }
    let tail = esd.nonzero();
    if tail.first() == tail.last() {
        return Err(SpectralError::DegenerateSpectrum(
            "fewer than two distinct positive eigenvalues".into(),
        ));
    }
    if tail.len() < 3 {
        return Err(SpectralError::DegenerateSpectrum(format!(
            "{} positive eigenvalues; a tail fit needs at least 3",
            tail.len()
        )));
    }
    Ok(tail)
}

fn fix_finger_on(sorted: &[f64]) -> Result<(f64, usize), SpectralError> {
    let n = sorted.len();
    let lo = sorted[0].ln();
    let hi = sorted[n - 1].ln();
    let bins = MIN_HISTOGRAM_BINS.max((n as f64).sqrt().floor() as usize);
    let width = (hi - lo) / bins as f64;

    let mut counts = vec![0usize; bins];
    for &v in sorted {
        let b = (((v.ln() - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    // first maximum wins ties
    let peak = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    let lambda_min = (lo + (peak as f64 + 0.5) * width).exp();
    let above = n - sorted.partition_point(|&v| v <= lambda_min);
    Ok((lambda_min, above.clamp(2, n - 1)))
}

/// Hill estimate over the top `k` of an ascending eigenvalue list.
///
/// 1-based: the reference is `λ_{n-k}` and the sum runs over
/// `λ_n, …, λ_{n-k+1}`.
pub fn hill_alpha(esd: &Esd, k: usize) -> Result<f64, SpectralError> {
    hill_on(esd.eigenvalues(), k)
}

fn hill_on(sorted: &[f64], k: usize) -> Result<f64, SpectralError> {
    let n = sorted.len();
    if k < 1 || k + 1 > n {
        return Err(SpectralError::InvalidTailCount {
            k,
            max: n.saturating_sub(1),
        });
    }
    // λ_{n-k} in 1-based indexing
    let reference = sorted[n - k - 1];
    if reference <= 0.0 {
        return Err(SpectralError::ZeroReference { k });
    }
    let log_sum: f64 = sorted[n - k..].iter().map(|&v| (v / reference).ln()).sum();
    if log_sum <= 0.0 {
        return Err(SpectralError::DegenerateTail { k });
    }
    Ok(1.0 + k as f64 / log_sum)
}

/// Power-law fit diagnostics for one spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlFit {
    pub alpha: f64,
    pub k: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Set when the Fix-finger `k` gave a degenerate tail and `⌊n/2⌋` was
    /// used instead.
    pub fallback_used: bool,
}

/// Fix-finger threshold followed by the Hill estimator.
///
/// Numerical-zero eigenvalues are dropped first, so `n` here counts
/// eigenvalues above `ZERO_EIGENVALUE_RTOL · λ_max`.
pub fn pl_alpha_hill(esd: &Esd) -> Result<PlFit, SpectralError> {
    let sorted = nonzero_or_err(esd)?;
    let (lambda_min, k) = fix_finger_on(sorted)?;
    fit_at(sorted, k, lambda_min)
}

fn fit_at(sorted: &[f64], k: usize, lambda_min: f64) -> Result<PlFit, SpectralError> {
    let n = sorted.len();
    let lambda_max = sorted[n - 1];
    match hill_on(sorted, k) {
        Ok(alpha) => Ok(PlFit {
            alpha,
            k,
            lambda_min,
            lambda_max,
            fallback_used: false,
        }),
        Err(err @ SpectralError::DegenerateTail { .. }) => {
            let half = n / 2;
            match hill_on(sorted, half) {
                Ok(alpha) if half != k => Ok(PlFit {
                    alpha,
                    k: half,
                    lambda_min: sorted[n - half - 1],
                    lambda_max,
                    fallback_used: true,
                }),
                _ => Err(err),
            }
        }
        Err(err) => Err(err),
    }
}
