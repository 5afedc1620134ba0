//! Cost of model-driven prevention versus purely reactive handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;

/// `c_prev` is the average prevention cost; a reaction costs `r * c_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParameters {
    pub c_prev: f64,
    pub r: f64,
}

impl CostParameters {
    pub fn new(c_prev: f64, r: f64) -> Result<Self> {
        if !(c_prev > 0.0 && c_prev.is_finite()) {
            return Err(Error::Config(format!("c_prev must be positive, got {c_prev}")));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Config(format!("r must be positive, got {r}")));
        }
        Ok(CostParameters { c_prev, r })
    }

    pub fn c_reac(&self) -> f64 {
        self.r * self.c_prev
    }
}

/// `[C_reac FN + C_prev (TP + FP)] - C_reac (TP + FN)`, evaluated in the
/// cancelled form `C_prev (TP + FP) - C_reac TP`.
pub fn delta_cost(counts: &ConfusionCounts, params: &CostParameters) -> f64 {
    params.c_prev * (counts.tp + counts.fp) as f64 - params.c_reac() * counts.tp as f64
}

/// Break-even cost ratio `(TP + FP) / TP`, i.e. `1 / precision`. Infinite when TP = 0.
pub fn r_min(counts: &ConfusionCounts) -> f64 {
    if counts.tp == 0 {
        f64::INFINITY
    } else {
        (counts.tp + counts.fp) as f64 / counts.tp as f64
    }
}

/// Break-even ratio for a given precision.
pub fn r_min_from_precision(precision: f64) -> f64 {
    1.0 / precision
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostAnalysis {
    pub counts: ConfusionCounts,
    pub params: CostParameters,
    pub delta_c: f64,
    /// `None` when TP = 0: no ratio makes prevention pay.
    pub r_min: Option<f64>,
    pub prevention_count: u64,
    pub reaction_count_with_model: u64,
    pub reaction_count_without: u64,
    pub prevention_pays: bool,
}

pub fn cost_report(counts: &ConfusionCounts, params: &CostParameters) -> CostAnalysis {
    let delta_c = delta_cost(counts, params);
    let r = r_min(counts);
    CostAnalysis {
        counts: *counts,
        params: *params,
        delta_c,
        r_min: r.is_finite().then_some(r),
        prevention_count: counts.tp + counts.fp,
        reaction_count_with_model: counts.fn_,
        reaction_count_without: counts.tp + counts.fn_,
        prevention_pays: delta_c < 0.0,
    }
}

/// Stage-level cost result; stages that act after the fact cannot prevent anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum StageCost {
    Applicable(CostAnalysis),
    NotApplicable { reason: String },
}
