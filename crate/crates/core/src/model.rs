//! Shared domain types: class taxonomy, samples, predictive distributions,
//! embeddings, encoder profiles, routing configuration and route decisions.
//!
//! Everything here is immutable after construction and validated on entry.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|sum(p) - 1|` accepted by [`PredictiveDistribution::validate`].
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("taxonomy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {0} is in both the safe and danger sets")]
    Overlap(String),
    #[error("class {0} is in neither the safe nor the danger set")]
    Coverage(String),
    #[error("malignant set is empty")]
    EmptyMalignant,
    #[error("malignant class {0} is not in the danger set")]
    MalignantNotDanger(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange { index: usize, classes: usize },
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("duplicate class name {0:?}")]
    DuplicateClassName(String),
    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, outside 1 +/- {PROB_TOLERANCE}")]
    NormalizationError { sum: f64 },
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("embedding {encoder_id:?} is empty or has non-finite entries")]
    InvalidEmbedding { encoder_id: String },
    #[error("invalid encoder profile {encoder_id:?}: {reason}")]
    InvalidProfile { encoder_id: String, reason: String },
    #[error("invalid routing config: {0}")]
    InvalidRoutingConfig(String),
    #[error("invalid sample {id:?}: {reason}")]
    InvalidSample { id: String, reason: String },
}

/// Ordered class labels with the safe/danger partition and the malignant
/// subset used for recall and TPR metrics. Sets hold class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub class_names: Vec<String>,
    pub safe_set: BTreeSet<usize>,
    pub danger_set: BTreeSet<usize>,
    pub malignant_set: BTreeSet<usize>,
}

/// Name-based taxonomy description, the form used in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomySpec {
    pub class_names: Vec<String>,
    pub safe: Vec<String>,
    pub danger: Vec<String>,
    pub malignant: Vec<String>,
}

impl ClassTaxonomy {
    pub fn new(
        class_names: Vec<String>,
        safe_set: BTreeSet<usize>,
        danger_set: BTreeSet<usize>,
        malignant_set: BTreeSet<usize>,
    ) -> Result<Self, ModelError> {
        validate_taxonomy(ClassTaxonomy { class_names, safe_set, danger_set, malignant_set })
    }

    pub fn from_spec(spec: &TaxonomySpec) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for name in &spec.class_names {
            if !seen.insert(name.as_str()) {
                return Err(ModelError::DuplicateClassName(name.clone()));
            }
        }
        let lookup = |names: &[String]| -> Result<BTreeSet<usize>, ModelError> {
            names
                .iter()
                .map(|n| {
                    spec.class_names.iter().position(|c| c == n).ok_or_else(|| ModelError::UnknownClassName(n.clone()))
                })
                .collect()
        };
        Self::new(spec.class_names.clone(), lookup(&spec.safe)?, lookup(&spec.danger)?, lookup(&spec.malignant)?)
    }

    pub fn to_spec(&self) -> TaxonomySpec {
        let names = |set: &BTreeSet<usize>| set.iter().map(|&i| self.class_names[i].clone()).collect();
        TaxonomySpec {
            class_names: self.class_names.clone(),
            safe: names(&self.safe_set),
            danger: names(&self.danger_set),
            malignant: names(&self.malignant_set),
        }
    }

    /// Seven-class HAM10000 layout in the dataset's alphabetical label order.
    ///
    /// The safe/danger split (nv, bkl, df, vasc vs. mel, bcc, akiec) follows the
    /// dataset's own benign/malignant convention. It is a project default and can
    /// be replaced through configuration.
    pub fn ham10000() -> Self {
        let names = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];
        let spec = TaxonomySpec {
            class_names: names.iter().map(|s| s.to_string()).collect(),
            safe: ["nv", "bkl", "df", "vasc"].iter().map(|s| s.to_string()).collect(),
            danger: ["mel", "bcc", "akiec"].iter().map(|s| s.to_string()).collect(),
            malignant: ["mel", "bcc", "akiec"].iter().map(|s| s.to_string()).collect(),
        };
        Self::from_spec(&spec).expect("built-in taxonomy is valid")
    }

    /// Benign/malignant binary taxonomy.
    pub fn binary() -> Self {
        Self::new(vec!["benign".into(), "malignant".into()], [0].into(), [1].into(), [1].into())
            .expect("built-in taxonomy is valid")
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn is_malignant(&self, class: usize) -> bool {
        self.malignant_set.contains(&class)
    }
}

/// Checks every taxonomy invariant and hands the taxonomy back unchanged.
pub fn validate_taxonomy(t: ClassTaxonomy) -> Result<ClassTaxonomy, ModelError> {
    let c = t.class_names.len();
    if c < 2 {
        return Err(ModelError::TooFewClasses(c));
    }
    for &i in t.safe_set.iter().chain(&t.danger_set).chain(&t.malignant_set) {
        if i >= c {
            return Err(ModelError::ClassIndexOutOfRange { index: i, classes: c });
        }
    }
    if let Some(&i) = t.safe_set.intersection(&t.danger_set).next() {
        return Err(ModelError::Overlap(t.class_names[i].clone()));
    }
    if let Some(i) = (0..c).find(|i| !t.safe_set.contains(i) && !t.danger_set.contains(i)) {
        return Err(ModelError::Coverage(t.class_names[i].clone()));
    }
    if t.malignant_set.is_empty() {
        return Err(ModelError::EmptyMalignant);
    }
    if let Some(&i) = t.malignant_set.difference(&t.danger_set).next() {
        return Err(ModelError::MalignantNotDanger(t.class_names[i].clone()));
    }
    Ok(t)
}

/// One patient case. Metadata cells may be missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub age: Option<f64>,
    pub localisation: Option<String>,
    pub subgroup: Option<String>,
    pub fold: Option<usize>,
}

impl Sample {
    pub fn validate(&self, n_classes: usize) -> Result<(), ModelError> {
        if self.label >= n_classes {
            return Err(ModelError::InvalidSample {
                id: self.id.clone(),
                reason: format!("label {} out of range for {} classes", self.label, n_classes),
            });
        }
        if let Some(age) = self.age {
            if !age.is_finite() || age < 0.0 {
                return Err(ModelError::InvalidSample {
                    id: self.id.clone(),
                    reason: format!("age {age} is not a finite non-negative number"),
                });
            }
        }
        Ok(())
    }
}

/// A probability vector over the class taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictiveDistribution(Vec<f64>);

impl PredictiveDistribution {
    /// Validates a raw probability vector of expected length `n_classes`.
    ///
    /// Sign is checked before the sum, so a clipped negative entry is reported
    /// as such even when the total is within tolerance. Accepted vectors are
    /// rescaled so their left-to-right sum is within 4 ulp of 1.
    pub fn validate(raw: &[f64], n_classes: usize) -> Result<Self, ModelError> {
        if raw.len() != n_classes {
            return Err(ModelError::LengthMismatch { expected: n_classes, got: raw.len() });
        }
        if let Some((index, &value)) = raw.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(ModelError::NegativeProbability { index, value });
        }
        let sum: f64 = raw.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(ModelError::NormalizationError { sum });
        }
        Ok(Self(renormalise(raw.to_vec(), sum)))
    }

    /// Softmax of a logit vector.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let s = probs.iter().sum();
        Self(renormalise(probs, s))
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self::softmax(&vec![0.0; n_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sums this close to one are left as they are, which makes validation a
/// fixed point: an accepted vector validates to itself.
const SUM_SLACK: f64 = 4.0 * f64::EPSILON;

fn renormalise(mut p: Vec<f64>, sum: f64) -> Vec<f64> {
    if (sum - 1.0).abs() <= SUM_SLACK {
        return p;
    }
    for v in p.iter_mut() {
        *v /= sum;
    }
    // Push the residual rounding error into the largest entry until the
    // in-order sum is within the slack.
    let top = argmax(&p);
    for _ in 0..8 {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() <= SUM_SLACK {
            break;
        }
        p[top] = (p[top] + (1.0 - s)).clamp(0.0, 1.0);
    }
    p
}

/// Encoder tier within the edge pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Lite,
    Heavy,
    Tabular,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Lite => "lite",
            Tier::Heavy => "heavy",
            Tier::Tabular => "tabular",
        })
    }
}

/// A learned representation produced by one encoder for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub encoder_id: String,
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(encoder_id: impl Into<String>, values: Vec<f64>) -> Result<Self, ModelError> {
        let encoder_id = encoder_id.into();
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidEmbedding { encoder_id });
        }
        Ok(Self { encoder_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Fixed per-encoder cost profile. Energy figures are inputs, never measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub encoder_id: String,
    pub tier: Tier,
    pub energy_per_sample_j: f64,
    #[serde(default)]
    pub latency_ms: f64,
    pub embedding_dim: usize,
}

impl EncoderProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad =
            |reason: &str| ModelError::InvalidProfile { encoder_id: self.encoder_id.clone(), reason: reason.into() };
        if !self.energy_per_sample_j.is_finite() || self.energy_per_sample_j < 0.0 {
            return Err(bad("energy_per_sample_j must be finite and >= 0"));
        }
        if !self.latency_ms.is_finite() || self.latency_ms < 0.0 {
            return Err(bad("latency_ms must be finite and >= 0"));
        }
        if self.embedding_dim == 0 {
            return Err(bad("embedding_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Combined weighted score against a single threshold.
    Score,
    /// Disjunction of per-signal threshold tests.
    #[default]
    Trigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeavyTransmission {
    /// Escalated samples send the heavy embedding instead of the lite one.
    #[default]
    Replace,
    /// Escalated samples send lite and heavy embeddings concatenated.
    Alongside,
}

/// Routing weights and thresholds.
///
/// Comparisons: score `> tau_r`, normalised entropy `> tau_h`, ambiguity
/// `> tau_delta`, tabular risk `>= tau_risk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub lambda_h: f64,
    pub lambda_delta: f64,
    pub tau_r: f64,
    pub tau_h: f64,
    pub tau_delta: f64,
    pub tau_risk: f64,
    pub gate_mode: GateMode,
    pub heavy_transmission: HeavyTransmission,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            lambda_h: 0.5,
            lambda_delta: 0.5,
            tau_r: 0.6,
            tau_h: 0.6,
            tau_delta: 0.8,
            tau_risk: 0.5,
            gate_mode: GateMode::Trigger,
            heavy_transmission: HeavyTransmission::Replace,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let thresholds =
            [("tau_r", self.tau_r), ("tau_h", self.tau_h), ("tau_delta", self.tau_delta), ("tau_risk", self.tau_risk)];
        for (name, v) in thresholds {
            if !v.is_finite() {
                return Err(ModelError::InvalidRoutingConfig(format!("{name} must be finite")));
            }
        }
        for (name, v) in [("lambda_h", self.lambda_h), ("lambda_delta", self.lambda_delta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::InvalidRoutingConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.gate_mode == GateMode::Score && self.lambda_h + self.lambda_delta <= 0.0 {
            return Err(ModelError::InvalidRoutingConfig("lambda_h + lambda_delta must be > 0 in score mode".into()));
        }
        Ok(())
    }
}

/// Which gate clauses fired for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TriggerSet {
    pub entropy: bool,
    pub ambiguity: bool,
    pub score: bool,
    pub risk_override: bool,
}

impl TriggerSet {
    pub fn is_empty(&self) -> bool {
        !(self.entropy || self.ambiguity || self.score || self.risk_override)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.entropy {
            out.push("entropy");
        }
        if self.ambiguity {
            out.push("ambiguity");
        }
        if self.score {
            out.push("score");
        }
        if self.risk_override {
            out.push("risk_override");
        }
        out
    }
}

impl fmt::Display for TriggerSet {
    /// Pipe-separated clause names, empty when nothing fired.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("|"))
    }
}

/// The gate bit for one sample together with every signal behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub sample_id: String,
    pub gate: bool,
    pub entropy: f64,
    pub norm_entropy: f64,
    pub delta: f64,
    pub ambiguity: f64,
    /// Only computed in score mode.
    pub score: Option<f64>,
    pub tab_risk: f64,
    pub trigger_reason: TriggerSet,
    /// Age was missing and the neutral fallback was used.
    pub age_fallback: bool,
    /// Localisation was missing or unseen and the fold-level rate was used.
    pub loc_fallback: bool,
}
