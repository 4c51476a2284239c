//! Plan files and the model-level entry point.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sparsity::{allocate_sparsity, expand, min_sparsity_endpoints, mixed};
use super::{AllocationError, Endpoints, BUDGET_RTOL, DEFAULT_TAU};
use crate::metrics::{Metric, ModelAnalysis};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerBlock,
    PerMatrix,
    Mixed,
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_block" => Ok(Granularity::PerBlock),
            "per_matrix" => Ok(Granularity::PerMatrix),
            "mixed" => Ok(Granularity::Mixed),
            other => Err(format!("unknown granularity `{other}` (expected per_block, per_matrix or mixed)")),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerBlock => "per_block",
            Granularity::PerMatrix => "per_matrix",
            Granularity::Mixed => "mixed",
        })
    }
}

/// Per-matrix sparsity plan, the interchange file read by pruners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityPlan {
    pub version: u32,
    pub metric: Option<Metric>,
    pub granularity: Granularity,
    #[serde(rename = "S")]
    pub target: f64,
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_matrix: Option<f64>,
    pub s1: f64,
    pub s2: f64,
    pub eta: f64,
    pub clamped: Vec<String>,
    pub per_matrix: BTreeMap<String, f64>,
}

impl SparsityPlan {
    /// Check `Σ s_i d_i = S Σ d_i` and that every value is in `[0, 1]`.
    /// `params` gives each matrix's parameter count.
    pub fn verify_budget(&self, params: impl Fn(&str) -> Option<f64>) -> Result<(), AllocationError> {
        let mut mass = 0.0;
        let mut total = 0.0;
        for (name, &s) in &self.per_matrix {
            if !(0.0..=1.0).contains(&s) {
                return Err(AllocationError::Plan(format!("sparsity {s} of `{name}` outside [0, 1]")));
            }
            let d = params(name).ok_or_else(|| AllocationError::MissingTensor(name.clone()))?;
            mass += s * d;
            total += d;
        }
        if total == 0.0 {
            return Err(AllocationError::Plan("plan covers no parameters".into()));
        }
        if (mass - self.target * total).abs() > BUDGET_RTOL * total {
            return Err(AllocationError::Plan(format!(
                "budget identity violated: Σ s·d = {mass}, S·Σd = {}",
                self.target * total
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, AllocationError> {
        let plan: SparsityPlan = serde_json::from_str(text).map_err(|e| AllocationError::Plan(e.to_string()))?;
        if plan.version != PLAN_VERSION {
            return Err(AllocationError::Plan(format!("unsupported plan version {}", plan.version)));
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Nm,
    Bits,
    Ranks,
}

/// Integer budget per matrix: N per group of `max(options)`, bit-width, or
/// kept rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetPlan {
    pub kind: BudgetKind,
    pub budget: f64,
    pub options: Vec<u32>,
    pub per_layer: BTreeMap<String, u32>,
}

impl BudgetPlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, AllocationError> {
        let plan: BudgetPlan = serde_json::from_str(text).map_err(|e| AllocationError::Plan(e.to_string()))?;
        if plan.options.is_empty() {
            return Err(AllocationError::Plan("empty option set".into()));
        }
        if let Some((name, v)) = plan.per_layer.iter().find(|(_, v)| !plan.options.contains(v)) {
            return Err(AllocationError::Plan(format!("value {v} of `{name}` not among the options")));
        }
        Ok(plan)
    }

    /// Group size for N:M plans.
    pub fn group_size(&self) -> u32 {
        self.options.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub q: f64,
    pub d: f64,
    /// The matrix could not be analyzed and carries its block's quality.
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub block: usize,
    pub q: f64,
    pub matrices: Vec<MatrixEntry>,
}

impl BlockEntry {
    pub fn d(&self) -> f64 {
        self.matrices.iter().map(|m| m.d).sum()
    }
}

/// Block and matrix qualities with parameter counts, the allocator input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub metric: Option<Metric>,
    pub blocks: Vec<BlockEntry>,
}

impl QualityTable {
    /// Qualities from a metrics report, using the report's metric.
    pub fn from_analysis(analysis: &ModelAnalysis) -> Result<Self, AllocationError> {
        let mut by_name = BTreeMap::new();
        for m in &analysis.matrices {
            by_name.insert(m.name.as_str(), (m.value(analysis.metric), m.d as f64, false));
        }
        let mut blocks = Vec::with_capacity(analysis.blocks.len());
        for b in &analysis.blocks {
            for f in analysis.failures.iter().filter(|f| f.block == b.block) {
                by_name.insert(f.name.as_str(), (b.q, f.d as f64, true));
            }
            let matrices = b
                .members
                .iter()
                .map(|name| {
                    let &(q, d, imputed) = by_name
                        .get(name.as_str())
                        .ok_or_else(|| AllocationError::MissingTensor(name.clone()))?;
                    Ok(MatrixEntry {
                        name: name.clone(),
                        q,
                        d,
                        imputed,
                    })
                })
                .collect::<Result<Vec<_>, AllocationError>>()?;
            blocks.push(BlockEntry {
                block: b.block,
                q: b.q,
                matrices,
            });
        }
        if blocks.is_empty() {
            return Err(AllocationError::InvalidInput("report has no blocks".into()));
        }
        Ok(QualityTable {
            metric: Some(analysis.metric),
            blocks,
        })
    }

    pub fn block_q(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.q).collect()
    }

    pub fn block_d(&self) -> Vec<f64> {
        self.blocks.iter().map(BlockEntry::d).collect()
    }

    pub fn params(&self, name: &str) -> Option<f64> {
        self.blocks
            .iter()
            .flat_map(|b| &b.matrices)
            .find(|m| m.name == name)
            .map(|m| m.d)
    }
}

/// How the map's endpoints are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EndpointSpec {
    Tau(f64),
    Range { s1: f64, s2: f64 },
    /// Symmetric endpoints giving this minimum layer sparsity.
    MinSparsity(f64),
}

impl EndpointSpec {
    fn resolve(self, target: f64, q: &[f64], d: &[f64]) -> Result<Endpoints, AllocationError> {
        match self {
            EndpointSpec::Tau(t) => Endpoints::from_tau(t),
            EndpointSpec::Range { s1, s2 } => Endpoints::new(s1, s2),
            EndpointSpec::MinSparsity(m) => min_sparsity_endpoints(target, m, q, d),
        }
    }
}

/// Sparsity plan for a model at global sparsity `target`.
///
/// For [`Granularity::Mixed`], `tau_matrix` sets the within-block
/// endpoints; it defaults to the block tau when that is given as a tau, and
/// to [`DEFAULT_TAU`] otherwise. It is ignored for the other granularities.
pub fn plan_sparsity(
    table: &QualityTable,
    target: f64,
    endpoints: EndpointSpec,
    granularity: Granularity,
    tau_matrix: Option<f64>,
) -> Result<SparsityPlan, AllocationError> {
    let members: Vec<Vec<(String, f64)>> = table
        .blocks
        .iter()
        .map(|b| b.matrices.iter().map(|m| (m.name.clone(), m.d)).collect())
        .collect();
    let mut plan = match granularity {
        Granularity::PerBlock => {
            let (q, d) = (table.block_q(), table.block_d());
            let ends = endpoints.resolve(target, &q, &d)?;
            let alloc = allocate_sparsity(&q, &d, target, ends)?;
            expand(&alloc, &members)?
        }
        Granularity::PerMatrix => {
            let all: Vec<&MatrixEntry> = table.blocks.iter().flat_map(|b| &b.matrices).collect();
            let q: Vec<f64> = all.iter().map(|m| m.q).collect();
            let d: Vec<f64> = all.iter().map(|m| m.d).collect();
            let ends = endpoints.resolve(target, &q, &d)?;
            let alloc = allocate_sparsity(&q, &d, target, ends)?;
            let singles: Vec<Vec<(String, f64)>> = all.iter().map(|m| vec![(m.name.clone(), m.d)]).collect();
            let mut plan = expand(&alloc, &singles)?;
            plan.granularity = Granularity::PerMatrix;
            plan
        }
        Granularity::Mixed => {
            let (q, d) = (table.block_q(), table.block_d());
            let ends = endpoints.resolve(target, &q, &d)?;
            let inner_tau = tau_matrix.unwrap_or(match endpoints {
                EndpointSpec::Tau(t) => t,
                _ => DEFAULT_TAU,
            });
            let mq: Vec<Vec<f64>> = table.blocks.iter().map(|b| b.matrices.iter().map(|m| m.q).collect()).collect();
            let md: Vec<Vec<f64>> = table.blocks.iter().map(|b| b.matrices.iter().map(|m| m.d).collect()).collect();
            let m = mixed(&q, &mq, &md, target, ends, Endpoints::from_tau(inner_tau)?)?;
            let mut per_matrix = BTreeMap::new();
            let mut clamped = Vec::new();
            for (b, (block, inner)) in table.blocks.iter().zip(&m.matrices).enumerate() {
                for (j, (entry, &s)) in block.matrices.iter().zip(&inner.values).enumerate() {
                    per_matrix.insert(entry.name.clone(), s);
                    if m.blocks.clamped.contains(&b) || inner.clamped.contains(&j) {
                        clamped.push(entry.name.clone());
                    }
                }
            }
            SparsityPlan {
                version: PLAN_VERSION,
                metric: None,
                granularity: Granularity::Mixed,
                target,
                tau: ends.tau(),
                tau_matrix: Some(inner_tau),
                s1: ends.s1,
                s2: ends.s2,
                eta: m.blocks.eta,
                clamped,
                per_matrix,
            }
        }
    };
    plan.metric = table.metric;
    plan.clamped.sort();
    plan.verify_budget(|name| table.params(name))?;
    Ok(plan)
}
