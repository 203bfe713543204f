//! Tabular risk prior built from age and lesion localisation.
//!
//! `R_tab(x) = a(x) * l(x)`, where `a` is min-max normalised age and `l` is the
//! localisation's empirical malignancy rate divided by the highest such rate.
//! Both are fit on training-fold rows only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClassTaxonomy, Sample};

/// Age score used when a sample has no age.
pub const MISSING_AGE_SCORE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("no training sample has an age")]
    NoAgeData,
    #[error("no localisation has a malignant training case; the localisation score is undefined")]
    NoMalignantCases,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub a_min: f64,
    pub a_max: f64,
    pub mal_rate: BTreeMap<String, f64>,
    pub max_rate: f64,
    pub fallback_rate: f64,
    pub fallback_age_score: f64,
}

/// Per-sample breakdown of the tabular risk score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBreakdown {
    pub age_score: f64,
    pub loc_score: f64,
    pub risk: f64,
    pub age_fallback: bool,
    pub loc_fallback: bool,
}

/// Fits a [`RiskModel`] on training rows.
pub fn calibrate(train: &[Sample], taxonomy: &ClassTaxonomy) -> Result<RiskModel, RiskError> {
    let mut ages = train.iter().filter_map(|s| s.age);
    let first = ages.next().ok_or(RiskError::NoAgeData)?;
    let (a_min, a_max) = ages.fold((first, first), |(lo, hi), a| (lo.min(a), hi.max(a)));

    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in train {
        if let Some(loc) = s.localisation.as_deref() {
            let e = counts.entry(loc).or_default();
            e.1 += 1;
            if taxonomy.is_malignant(s.label) {
                e.0 += 1;
            }
        }
    }
    let mal_rate: BTreeMap<String, f64> =
        counts.into_iter().map(|(loc, (mal, n))| (loc.to_string(), mal as f64 / n as f64)).collect();
    let max_rate = mal_rate.values().copied().fold(0.0, f64::max);
    if max_rate <= 0.0 {
        return Err(RiskError::NoMalignantCases);
    }
    let n_mal = train.iter().filter(|s| taxonomy.is_malignant(s.label)).count();
    Ok(RiskModel {
        a_min,
        a_max,
        mal_rate,
        max_rate,
        fallback_rate: n_mal as f64 / train.len() as f64,
        fallback_age_score: MISSING_AGE_SCORE,
    })
}

/// Normalised age in `[0, 1]`. Out-of-range ages clamp, a degenerate range
/// gives 0.5 and a missing age gives the model's fallback.
pub fn age_score(age: Option<f64>, m: &RiskModel) -> f64 {
    match age {
        None => m.fallback_age_score,
        Some(_) if m.a_max <= m.a_min => 0.5,
        Some(a) => ((a - m.a_min) / (m.a_max - m.a_min)).clamp(0.0, 1.0),
    }
}

/// Relative malignancy rate of a localisation in `[0, 1]`.
pub fn loc_score(localisation: Option<&str>, m: &RiskModel) -> f64 {
    loc_score_detail(localisation, m).0
}

fn loc_score_detail(localisation: Option<&str>, m: &RiskModel) -> (f64, bool) {
    let (rate, fallback) = match localisation.and_then(|l| m.mal_rate.get(l)) {
        Some(&r) => (r, false),
        None => (m.fallback_rate, true),
    };
    ((rate / m.max_rate).clamp(0.0, 1.0), fallback)
}

pub fn tab_risk(s: &Sample, m: &RiskModel) -> f64 {
    tab_risk_detail(s, m).risk
}

pub fn tab_risk_detail(s: &Sample, m: &RiskModel) -> RiskBreakdown {
    let age = age_score(s.age, m);
    let (loc, loc_fallback) = loc_score_detail(s.localisation.as_deref(), m);
    RiskBreakdown { age_score: age, loc_score: loc, risk: age * loc, age_fallback: s.age.is_none(), loc_fallback }
}

/// Inclusive threshold test for the metadata override.
pub fn risk_override(r_tab: f64, tau_risk: f64) -> bool {
    r_tab >= tau_risk
}
