//! Per-sample energy accounting under the routing policy.
//!
//! The lite encoder runs on every sample and escalated samples additionally
//! pay for the heavy encoder, so at routing rate `r`:
//! `e_routed = e_lite + r * e_heavy`. Tabular and fusion costs are not charged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{aggregate_folds, MeanStd};
use crate::model::{EncoderProfile, RouteDecision};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("no routing decisions to account")]
    EmptyDecisions,
    #[error("heavy encoder energy is zero; savings are undefined")]
    ZeroHeavyEnergy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub e_lite: f64,
    pub e_heavy: f64,
    pub e_ecofair: f64,
    pub routing_pct: f64,
    pub savings_vs_heavy: f64,
    /// Negative or zero whenever anything escalates; `None` if `e_lite` is 0.
    pub savings_vs_lite: Option<f64>,
    pub n_samples: usize,
}

/// Accounts energy for a list of routing decisions.
pub fn account(
    decisions: &[RouteDecision],
    lite: &EncoderProfile,
    heavy: &EncoderProfile,
) -> Result<EnergyReport, EnergyError> {
    if decisions.is_empty() {
        return Err(EnergyError::EmptyDecisions);
    }
    let routed = decisions.iter().filter(|d| d.gate).count();
    let rate = routed as f64 / decisions.len() as f64;
    let mut report = account_rate(rate, lite.energy_per_sample_j, heavy.energy_per_sample_j)?;
    report.n_samples = decisions.len();
    Ok(report)
}

/// Accounting at a given routing rate in `[0, 1]`.
pub fn account_rate(rate: f64, e_lite: f64, e_heavy: f64) -> Result<EnergyReport, EnergyError> {
    if e_heavy <= 0.0 {
        return Err(EnergyError::ZeroHeavyEnergy);
    }
    let e_ecofair = e_lite + rate * e_heavy;
    Ok(EnergyReport {
        e_lite,
        e_heavy,
        e_ecofair,
        routing_pct: rate,
        savings_vs_heavy: (e_heavy - e_ecofair) / e_heavy,
        savings_vs_lite: (e_lite > 0.0).then(|| (e_lite - e_ecofair) / e_lite),
        n_samples: 0,
    })
}

/// Routing rate above which routing costs more than running the heavy encoder
/// on every sample.
pub fn breakeven_rate(lite: &EncoderProfile, heavy: &EncoderProfile) -> Result<f64, EnergyError> {
    breakeven(lite.energy_per_sample_j, heavy.energy_per_sample_j)
}

pub fn breakeven(e_lite: f64, e_heavy: f64) -> Result<f64, EnergyError> {
    if e_heavy <= 0.0 {
        return Err(EnergyError::ZeroHeavyEnergy);
    }
    Ok((1.0 - e_lite / e_heavy).clamp(0.0, 1.0))
}

/// Fold-level energy reports with mean and sample std of the varying columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub folds: Vec<EnergyReport>,
    pub e_ecofair: MeanStd,
    pub routing_pct: MeanStd,
    pub savings_vs_heavy: MeanStd,
}

pub fn summarise(folds: Vec<EnergyReport>) -> Result<EnergySummary, EnergyError> {
    let col = |f: fn(&EnergyReport) -> f64| {
        let v: Vec<f64> = folds.iter().map(f).collect();
        aggregate_folds(&v).map_err(|_| EnergyError::EmptyDecisions)
    };
    Ok(EnergySummary {
        e_ecofair: col(|r| r.e_ecofair)?,
        routing_pct: col(|r| r.routing_pct)?,
        savings_vs_heavy: col(|r| r.savings_vs_heavy)?,
        folds,
    })
}
