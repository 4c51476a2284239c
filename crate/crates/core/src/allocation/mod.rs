//! Layer-wise budget allocation.
//!
//! Layer qualities `q` are mapped linearly onto `[s1, s2]` and rescaled by a
//! factor `eta` so the parameter-weighted mean equals the global target:
//!
//! ```text
//! φ_i = eta · [ (q_i - q_min) / (q_max - q_min) · (s2 - s1) + s1 ]
//! Σ φ_i d_i = S · Σ d_i
//! ```
//!
//! A larger `q` (lighter tail) gets a larger `φ` (more sparsity). With
//! `tau`, the endpoints are `s1 = 1 - tau`, `s2 = 1 + tau`.
//!
//! The same map drives the integer budgets in [`budget`]: N for N:M
//! sparsity, bit-widths, and kept ranks for low-rank approximation.

pub mod budget;
mod plan;
mod sparsity;

use thiserror::Error;

pub use budget::{allocate_bits, allocate_nm, allocate_ranks, LayerBudget, RankStrategy};
pub use plan::{
    plan_sparsity, BlockEntry, BudgetKind, BudgetPlan, EndpointSpec, Granularity, MatrixEntry, QualityTable,
    SparsityPlan, PLAN_VERSION,
};
pub use sparsity::{
    allocate_mixed, allocate_sparsity, expand_to_matrices, min_sparsity_endpoints, Allocation, MixedAllocation,
};

/// Taus swept when tuning the non-uniformity.
pub const DEFAULT_TAU_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Default non-uniformity, the value used for 7B-scale LLaMA models.
pub const DEFAULT_TAU: f64 = 0.2;

/// Tolerance of the budget identity, relative to `Σ d`.
pub const BUDGET_RTOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid endpoints s1 = {s1}, s2 = {s2}: need 0 <= s1 <= s2 and s2 > 0")]
    InvalidEndpoints { s1: f64, s2: f64 },
    #[error("target {0} outside the open interval (0, 1)")]
    InvalidTarget(f64),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("tensor `{0}` is in the grouping but missing from the store")]
    MissingTensor(String),
    #[error("plan file: {0}")]
    Plan(String),
}

/// Endpoints `(s1, s2)` of the linear quality-to-budget map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoints {
    pub s1: f64,
    pub s2: f64,
}

impl Endpoints {
    pub fn new(s1: f64, s2: f64) -> Result<Self, AllocationError> {
        if !(s1.is_finite() && s2.is_finite()) || s1 < 0.0 || s2 < s1 || s2 <= 0.0 {
            return Err(AllocationError::InvalidEndpoints { s1, s2 });
        }
        Ok(Endpoints { s1, s2 })
    }

    /// `s1 = 1 - tau`, `s2 = 1 + tau`, for `tau` in `[0, 1]`.
    pub fn from_tau(tau: f64) -> Result<Self, AllocationError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(AllocationError::InvalidInput(format!("tau = {tau} outside [0, 1]")));
        }
        Self::new(1.0 - tau, 1.0 + tau)
    }

    /// The `tau` these endpoints correspond to, if they are symmetric about 1.
    pub fn tau(&self) -> Option<f64> {
        let tau = (self.s2 - self.s1) / 2.0;
        ((self.s1 + self.s2 - 2.0).abs() <= 1e-12).then_some(tau)
    }

    pub(crate) fn midpoint(&self) -> f64 {
        (self.s1 + self.s2) / 2.0
    }
}

pub(crate) fn check_layers(q: &[f64], d: &[f64]) -> Result<(), AllocationError> {
    if q.is_empty() {
        return Err(AllocationError::InvalidInput("no layers".into()));
    }
    if q.len() != d.len() {
        return Err(AllocationError::InvalidInput(format!(
            "{} qualities but {} parameter counts",
            q.len(),
            d.len()
        )));
    }
    if let Some(bad) = q.iter().find(|v| !v.is_finite()) {
        return Err(AllocationError::InvalidInput(format!("quality {bad} is not finite")));
    }
    if let Some(bad) = d.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(AllocationError::InvalidInput(format!("parameter count {bad} must be positive")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_endpoints() {
        let e = Endpoints::from_tau(0.2).unwrap();
        assert_eq!((e.s1, e.s2), (0.8, 1.2));
        assert!((e.tau().unwrap() - 0.2).abs() < 1e-15);
        assert!(Endpoints::from_tau(1.5).is_err());
        assert!(Endpoints::from_tau(-0.1).is_err());
        assert_eq!(Endpoints::new(0.5, 1.0).unwrap().tau(), None);
    }

    #[test]
    fn endpoints_order() {
        assert!(matches!(Endpoints::new(1.2, 0.8), Err(AllocationError::InvalidEndpoints { .. })));
        assert!(Endpoints::new(0.0, 0.0).is_err());
        assert!(Endpoints::new(0.0, 2.0).is_ok());
    }
}
