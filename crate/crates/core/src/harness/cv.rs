//! Cross-validation driver.
//!
//! [`prepare_cv`] does everything that depends only on training folds (risk
//! calibration, head training, per-arm predictions). [`evaluate`] then applies
//! a routing configuration, which is cheap, so sweeps reuse one preparation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::energy::{self, EnergyReport};
use crate::fusion::{
    self, concat_embeddings, featurise_tabular, FusionHead, FusionHeads, FusionTrainSet, TrainingConfig,
};
use crate::ingest::{assign_stratified_folds, Dataset};
use crate::metrics::{self, FairnessDelta, FairnessReport};
use crate::model::{
    Embedding, EncoderProfile, HeavyTransmission, PredictiveDistribution, RouteDecision, RoutingConfig,
};
use crate::risk::{self, RiskModel};
use crate::routing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Lite,
    Heavy,
    Ecofair,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Lite, Arm::Heavy, Arm::Ecofair];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Lite => "lite",
            Arm::Heavy => "heavy",
            Arm::Ecofair => "ecofair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub lite: String,
    pub heavy: String,
}

/// Everything learned from one fold's training split, plus the arm
/// predictions on its test split.
#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub fold: usize,
    /// Dataset row indices of the test split, in dataset order.
    pub test_idx: Vec<usize>,
    pub risk_model: RiskModel,
    pub heads: FusionHeads,
    pub lite_pred: Vec<usize>,
    /// Prediction of the escalation head (heavy, or alongside).
    pub heavy_pred: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PreparedCv {
    pub dataset: Dataset,
    pub pair: EncoderPair,
    pub lite_profile: EncoderProfile,
    pub heavy_profile: EncoderProfile,
    pub transmission: HeavyTransmission,
    pub k: usize,
    pub folds: Vec<PreparedFold>,
}

/// Fold indices from the metadata when every row has one, otherwise a fresh
/// stratified assignment.
pub fn resolve_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<(Vec<usize>, usize), HarnessError> {
    let given: Vec<Option<usize>> = dataset.samples.iter().map(|s| s.fold).collect();
    let n_given = given.iter().filter(|f| f.is_some()).count();
    if n_given == 0 {
        let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
        let a = assign_stratified_folds(&labels, &dataset.taxonomy, k, seed)?;
        return Ok((a.folds, k));
    }
    if n_given != given.len() {
        return Err(HarnessError::Config(format!(
            "fold column is set for {n_given} of {} rows; fill every row or none",
            given.len()
        )));
    }
    let folds: Vec<usize> = given.into_iter().flatten().collect();
    let k = folds.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(HarnessError::Config("metadata folds must span at least 2 values".into()));
    }
    for f in 0..k {
        if !folds.contains(&f) {
            return Err(HarnessError::Config(format!("metadata fold {f} has no rows")));
        }
    }
    Ok((folds, k))
}

fn table<'a>(dataset: &'a Dataset, id: &str) -> Result<(&'a [PredictiveDistribution], &'a [Vec<f64>]), HarnessError> {
    let t = dataset.encoders.get(id).ok_or_else(|| HarnessError::Config(format!("encoder {id:?} not in dataset")))?;
    let emb =
        t.embeddings.as_deref().ok_or_else(|| HarnessError::Config(format!("encoder {id:?} has no embeddings")))?;
    Ok((t.probabilities.as_deref().unwrap_or(&[]), emb))
}

pub fn prepare_cv(
    dataset: Dataset,
    pair: &EncoderPair,
    k: usize,
    seed: u64,
    training: &TrainingConfig,
    transmission: HeavyTransmission,
) -> Result<PreparedCv, HarnessError> {
    dataset.validate()?;
    let lite_profile = dataset
        .profile(&pair.lite)
        .cloned()
        .ok_or_else(|| HarnessError::Config(format!("no profile for lite encoder {:?}", pair.lite)))?;
    let heavy_profile = dataset
        .profile(&pair.heavy)
        .cloned()
        .ok_or_else(|| HarnessError::Config(format!("no profile for heavy encoder {:?}", pair.heavy)))?;
    let (lite_probs, _) = table(&dataset, &pair.lite)?;
    if lite_probs.is_empty() && !dataset.is_empty() {
        return Err(HarnessError::Config(format!(
            "lite encoder {:?} has no probabilities; routing needs them",
            pair.lite
        )));
    }
    table(&dataset, &pair.heavy)?;

    let (fold_of, k) = resolve_folds(&dataset, k, seed)?;
    let mut dataset = dataset;
    for (s, f) in dataset.samples.iter_mut().zip(&fold_of) {
        s.fold = Some(*f);
    }

    let folds = (0..k)
        .into_par_iter()
        .map(|f| prepare_fold(&dataset, pair, f, seed, training, transmission))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PreparedCv { dataset, pair: pair.clone(), lite_profile, heavy_profile, transmission, k, folds })
}

fn prepare_fold(
    dataset: &Dataset,
    pair: &EncoderPair,
    fold: usize,
    seed: u64,
    training: &TrainingConfig,
    transmission: HeavyTransmission,
) -> Result<PreparedFold, HarnessError> {
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.samples[i].fold != Some(fold));

    // Only the training rows are visible from here until the heads exist.
    let train = dataset.subset(&train_idx);
    let risk_model =
        risk::calibrate(&train.samples, &train.taxonomy).map_err(|source| HarnessError::Risk { fold, source })?;
    let (_, lite_emb) = table(&train, &pair.lite)?;
    let (_, heavy_emb) = table(&train, &pair.heavy)?;
    let heads = fusion::train_fusion_heads(
        &FusionTrainSet {
            samples: &train.samples,
            lite_encoder: &pair.lite,
            lite: lite_emb,
            heavy_encoder: &pair.heavy,
            heavy: heavy_emb,
        },
        &risk_model,
        train.taxonomy.n_classes(),
        Some(fold),
        seed,
        training,
        transmission == HeavyTransmission::Alongside,
    )
    .map_err(|source| HarnessError::Fusion { fold, source })?;

    let (_, all_lite) = table(dataset, &pair.lite)?;
    let (_, all_heavy) = table(dataset, &pair.heavy)?;
    let escalation = escalation_head(&heads, transmission);
    let mut lite_pred = Vec::with_capacity(test_idx.len());
    let mut heavy_pred = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let tab = featurise_tabular(&dataset.samples[i], &heads.featuriser);
        let lite = Embedding::new(pair.lite.clone(), all_lite[i].clone())?;
        let heavy = Embedding::new(pair.heavy.clone(), all_heavy[i].clone())?;
        let predict = |img: &Embedding, head: &FusionHead| {
            fusion::fuse_predict(img, &tab, head)
                .map(|p| p.argmax())
                .map_err(|source| HarnessError::Fusion { fold, source })
        };
        lite_pred.push(predict(&lite, &heads.lite.head)?);
        let escalated = match transmission {
            HeavyTransmission::Replace => heavy,
            HeavyTransmission::Alongside => concat_embeddings(&lite, &heavy),
        };
        heavy_pred.push(predict(&escalated, escalation)?);
    }
    Ok(PreparedFold { fold, test_idx, risk_model, heads, lite_pred, heavy_pred })
}

/// Head used for escalated samples.
pub fn escalation_head(heads: &FusionHeads, transmission: HeavyTransmission) -> &FusionHead {
    match (transmission, &heads.alongside) {
        (HeavyTransmission::Alongside, Some(h)) => &h.head,
        _ => &heads.heavy.head,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub n: usize,
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub malignant_recall: Option<f64>,
    pub fairness: Option<FairnessReport>,
    pub energy_per_sample: f64,
    pub routing_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEvaluation {
    pub fold: usize,
    pub decisions: Vec<RouteDecision>,
    /// Routed-arm predictions; the pathway per row equals the decision's gate.
    pub predictions: BTreeMap<Arm, Vec<usize>>,
    pub metrics: BTreeMap<Arm, ArmMetrics>,
    pub energy: EnergyReport,
    pub delta_vs_lite: Option<FairnessDelta>,
    pub delta_vs_heavy: Option<FairnessDelta>,
}

/// Per-sample energy of the heavy-only baseline.
pub fn heavy_arm_energy(cv: &PreparedCv) -> f64 {
    let heavy = cv.heavy_profile.energy_per_sample_j;
    match cv.transmission {
        HeavyTransmission::Replace => heavy,
        HeavyTransmission::Alongside => cv.lite_profile.energy_per_sample_j + heavy,
    }
}

pub fn evaluate_fold(
    cv: &PreparedCv,
    fold: &PreparedFold,
    cfg: &RoutingConfig,
) -> Result<FoldEvaluation, HarnessError> {
    let f = fold.fold;
    let d = &cv.dataset;
    let (lite_probs, _) = table(d, &cv.pair.lite)?;
    let decisions: Vec<RouteDecision> = fold
        .test_idx
        .iter()
        .map(|&i| routing::route_sample(&d.samples[i], &lite_probs[i], &d.taxonomy, &fold.risk_model, cfg))
        .collect();
    let eco_pred: Vec<usize> = decisions
        .iter()
        .enumerate()
        .map(|(j, dec)| if dec.gate { fold.heavy_pred[j] } else { fold.lite_pred[j] })
        .collect();
    let energy = energy::account(&decisions, &cv.lite_profile, &cv.heavy_profile)
        .map_err(|source| HarnessError::Energy { fold: f, source })?;

    let labels: Vec<usize> = fold.test_idx.iter().map(|&i| d.samples[i].label).collect();
    let groups: Vec<Option<String>> = fold.test_idx.iter().map(|&i| d.samples[i].subgroup.clone()).collect();
    let arm_metrics = |pred: &[usize], e: f64, r: f64| -> Result<ArmMetrics, HarnessError> {
        let cm = metrics::confusion(&labels, pred, d.taxonomy.n_classes())
            .map_err(|source| HarnessError::Metrics { fold: f, source })?;
        Ok(ArmMetrics {
            n: labels.len(),
            macro_f1: metrics::macro_f1(&cm),
            balanced_accuracy: metrics::balanced_accuracy(&cm),
            malignant_recall: metrics::malignant_recall(&labels, pred, &d.taxonomy).ok(),
            fairness: metrics::fairness(&labels, pred, &groups, &d.taxonomy).ok(),
            energy_per_sample: e,
            routing_pct: r,
        })
    };
    let lite = arm_metrics(&fold.lite_pred, cv.lite_profile.energy_per_sample_j, 0.0)?;
    let heavy = arm_metrics(&fold.heavy_pred, heavy_arm_energy(cv), 1.0)?;
    let eco = arm_metrics(&eco_pred, energy.e_ecofair, energy.routing_pct)?;
    let delta = |base: &ArmMetrics| -> Result<Option<FairnessDelta>, HarnessError> {
        match (&eco.fairness, &base.fairness) {
            (Some(e), Some(b)) => {
                metrics::fairness_delta(e, b).map(Some).map_err(|source| HarnessError::Metrics { fold: f, source })
            }
            _ => Ok(None),
        }
    };
    let delta_vs_lite = delta(&lite)?;
    let delta_vs_heavy = delta(&heavy)?;

    Ok(FoldEvaluation {
        fold: f,
        decisions,
        predictions: BTreeMap::from([
            (Arm::Lite, fold.lite_pred.clone()),
            (Arm::Heavy, fold.heavy_pred.clone()),
            (Arm::Ecofair, eco_pred),
        ]),
        metrics: BTreeMap::from([(Arm::Lite, lite), (Arm::Heavy, heavy), (Arm::Ecofair, eco)]),
        energy,
        delta_vs_lite,
        delta_vs_heavy,
    })
}

/// Applies a routing configuration to every prepared fold.
pub fn evaluate(cv: &PreparedCv, cfg: &RoutingConfig) -> Result<Vec<FoldEvaluation>, HarnessError> {
    cfg.validate()?;
    if cfg.heavy_transmission != cv.transmission {
        return Err(HarnessError::Config("heavy_transmission differs from the one the heads were trained for".into()));
    }
    cv.folds.par_iter().map(|f| evaluate_fold(cv, f, cfg)).collect()
}
