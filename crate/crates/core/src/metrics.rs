//! Classification and subgroup fairness metrics.
//!
//! Fairness is measured as malignant-case TPR per subgroup, where a malignant
//! sample counts as recalled when it is predicted as *any* malignant class.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ClassTaxonomy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} labels vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("class index {index} out of range for {classes} classes")]
    OutOfRangeLabel { index: usize, classes: usize },
    #[error("no sample has a malignant label")]
    NoMalignantSamples,
    #[error("no subgroup contains a malignant-labelled sample")]
    NoEvaluableSubgroup,
    #[error("fairness reports cover different subgroups: {0:?} vs {1:?}")]
    SubgroupMismatch(Vec<String>, Vec<String>),
    #[error("no values to aggregate")]
    EmptyInput,
}

/// Square count matrix, rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes).map(<[u64]>::to_vec).collect()
    }
}

/// Counts predictions per (true, predicted) class. Predictions are class
/// indices; use [`crate::model::argmax`] (lowest index wins ties) to obtain them.
pub fn confusion(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), predictions.len()));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        for index in [y, p] {
            if index >= n_classes {
                return Err(MetricsError::OutOfRangeLabel { index, classes: n_classes });
            }
        }
        counts[y * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Unweighted mean of per-class F1; a class with `P + R = 0` contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let c = cm.n_classes();
    if c == 0 {
        return 0.0;
    }
    let total: f64 = (0..c)
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let predicted = cm.col_sum(k) as f64;
            let actual = cm.row_sum(k) as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    total / c as f64
}

/// Mean per-class recall over classes that have at least one true instance.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    let recalls: Vec<f64> = (0..cm.n_classes())
        .filter_map(|k| {
            let actual = cm.row_sum(k);
            (actual > 0).then(|| cm.get(k, k) as f64 / actual as f64)
        })
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Fraction of malignant-labelled samples predicted as any malignant class.
pub fn malignant_recall(
    labels: &[usize],
    predictions: &[usize],
    taxonomy: &ClassTaxonomy,
) -> Result<f64, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), predictions.len()));
    }
    let (hit, total) = labels
        .iter()
        .zip(predictions)
        .filter(|(y, _)| taxonomy.is_malignant(**y))
        .fold((0usize, 0usize), |(h, n), (_, p)| (h + usize::from(taxonomy.is_malignant(*p)), n + 1));
    if total == 0 {
        return Err(MetricsError::NoMalignantSamples);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTpr {
    pub tpr: f64,
    pub positives: usize,
    pub recalled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Subgroups with at least one malignant-labelled sample.
    pub groups: BTreeMap<String, GroupTpr>,
    pub tpr_mean: f64,
    pub tpr_worst: f64,
    pub tpr_best: f64,
    pub tpr_gap: f64,
    /// Subgroups without malignant positives, with their sample counts.
    pub excluded: BTreeMap<String, usize>,
    /// Samples without a subgroup value.
    pub unassigned: usize,
}

pub fn fairness(
    labels: &[usize],
    predictions: &[usize],
    subgroups: &[Option<String>],
    taxonomy: &ClassTaxonomy,
) -> Result<FairnessReport, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), predictions.len()));
    }
    if labels.len() != subgroups.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), subgroups.len()));
    }
    // (samples, positives, recalled)
    let mut tally: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    let mut unassigned = 0;
    for ((&y, &p), g) in labels.iter().zip(predictions).zip(subgroups) {
        let Some(g) = g.as_deref() else {
            unassigned += 1;
            continue;
        };
        let e = tally.entry(g).or_default();
        e.0 += 1;
        if taxonomy.is_malignant(y) {
            e.1 += 1;
            if taxonomy.is_malignant(p) {
                e.2 += 1;
            }
        }
    }
    let mut groups = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for (g, (n, pos, rec)) in tally {
        if pos == 0 {
            excluded.insert(g.to_string(), n);
        } else {
            groups.insert(g.to_string(), GroupTpr { tpr: rec as f64 / pos as f64, positives: pos, recalled: rec });
        }
    }
    if groups.is_empty() {
        return Err(MetricsError::NoEvaluableSubgroup);
    }
    let tprs: Vec<f64> = groups.values().map(|g| g.tpr).collect();
    let tpr_mean = tprs.iter().sum::<f64>() / tprs.len() as f64;
    let tpr_worst = tprs.iter().copied().fold(f64::INFINITY, f64::min);
    let tpr_best = tprs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FairnessReport { groups, tpr_mean, tpr_worst, tpr_best, tpr_gap: tpr_best - tpr_worst, excluded, unassigned })
}

/// Improvement of one report over a baseline. Positive is better in both fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessDelta {
    /// `worst(eco) - worst(baseline)`
    pub d_wg_tpr: f64,
    /// `gap(baseline) - gap(eco)`
    pub d_gap: f64,
}

pub fn fairness_delta(eco: &FairnessReport, baseline: &FairnessReport) -> Result<FairnessDelta, MetricsError> {
    let a: BTreeSet<&String> = eco.groups.keys().collect();
    let b: BTreeSet<&String> = baseline.groups.keys().collect();
    if a != b {
        return Err(MetricsError::SubgroupMismatch(a.into_iter().cloned().collect(), b.into_iter().cloned().collect()));
    }
    Ok(FairnessDelta { d_wg_tpr: eco.tpr_worst - baseline.tpr_worst, d_gap: baseline.tpr_gap - eco.tpr_gap })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation across folds.
pub fn aggregate_folds(values: &[f64]) -> Result<MeanStd, MetricsError> {
    let n = values.len();
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        log::warn!("aggregating a single fold; standard deviation reported as 0");
        return Ok(MeanStd { mean, std: 0.0, n });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(MeanStd { mean, std: var.sqrt(), n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary_cm() -> ConfusionMatrix {
        // [[8, 2], [4, 6]]
        let mut labels = vec![0; 10];
        labels.extend(vec![1; 10]);
        let mut preds = vec![0; 8];
        preds.extend(vec![1; 2]);
        preds.extend(vec![0; 4]);
        preds.extend(vec![1; 6]);
        confusion(&labels, &preds, 2).unwrap()
    }

    #[test]
    fn confusion_basics() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let cm = confusion(&[0, 1, 2, 2], &[0; 4], 3).unwrap();
        assert_eq!(cm.col_sum(0), 4);
        assert_eq!(binary_cm().rows(), vec![vec![8, 2], vec![4, 6]]);
        assert_eq!(confusion(&[0], &[0, 1], 2), Err(MetricsError::LengthMismatch(1, 2)));
        assert!(matches!(confusion(&[3], &[0], 2), Err(MetricsError::OutOfRangeLabel { .. })));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap()), 1.0);
        let f0 = 2.0 * (8.0 / 12.0) * 0.8 / (8.0 / 12.0 + 0.8);
        let f1 = 2.0 * 0.75 * 0.6 / (0.75 + 0.6);
        let m = macro_f1(&binary_cm());
        assert!((m - (f0 + f1) / 2.0).abs() < 1e-15);
        assert!((m - 0.69697).abs() < 1e-5);
        // Class 2 never true, never predicted.
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&confusion(&[0, 1], &[0, 1], 2).unwrap()), 1.0);
        assert!((balanced_accuracy(&binary_cm()) - 0.7).abs() < 1e-15);
        // Classes without true instances are skipped.
        let cm = confusion(&[0, 0], &[0, 2], 3).unwrap();
        assert_eq!(balanced_accuracy(&cm), 0.5);
    }

    #[test]
    fn balanced_accuracy_of_random_guessing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let c = 5;
        let labels: Vec<usize> = (0..5000).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<usize> = (0..5000).map(|_| rng.random_range(0..c)).collect();
        let ba = balanced_accuracy(&confusion(&labels, &preds, c).unwrap());
        assert!((ba - 1.0 / c as f64).abs() <= 0.05, "{ba}");
    }

    #[test]
    fn malignant_recall_is_binarised() {
        let t = ClassTaxonomy::ham10000();
        let mel = t.class_index("mel").unwrap();
        let bcc = t.class_index("bcc").unwrap();
        let nv = t.class_index("nv").unwrap();
        assert_eq!(malignant_recall(&[mel, bcc], &[bcc, mel], &t), Ok(1.0));
        assert_eq!(malignant_recall(&[mel, mel, mel, mel, nv], &[mel, bcc, mel, nv, nv], &t), Ok(0.75));
        assert_eq!(malignant_recall(&[nv], &[nv], &t), Err(MetricsError::NoMalignantSamples));
    }

    fn g(s: &str) -> Option<String> {
        Some(s.to_string())
    }

    #[test]
    fn fairness_examples() {
        let t = ClassTaxonomy::binary();
        let r = fairness(&[1, 1, 0], &[1, 0, 0], &[g("a"), g("a"), g("a")], &t).unwrap();
        assert_eq!(r.tpr_worst, 0.5);
        assert_eq!(r.tpr_mean, 0.5);
        assert_eq!(r.tpr_gap, 0.0);

        let mut labels = vec![1; 10];
        let mut preds = vec![1, 1, 1, 1, 0];
        preds.extend([1, 1, 1, 0, 0]);
        let mut groups = vec![g("a"); 5];
        groups.extend(vec![g("b"); 5]);
        // Group a: 4/5 = 0.8, group b: 3/5 = 0.6. Group c has no positives.
        labels.push(0);
        preds.push(0);
        groups.push(g("c"));
        labels.push(1);
        preds.push(1);
        groups.push(None);
        let r = fairness(&labels, &preds, &groups, &t).unwrap();
        assert!((r.tpr_mean - 0.7).abs() < 1e-15);
        assert_eq!(r.tpr_worst, 0.6);
        assert!((r.tpr_gap - 0.2).abs() < 1e-15);
        assert_eq!(r.excluded, BTreeMap::from([("c".to_string(), 1)]));
        assert_eq!(r.unassigned, 1);

        assert_eq!(fairness(&[0], &[0], &[g("a")], &t), Err(MetricsError::NoEvaluableSubgroup));
    }

    fn report(worst: f64, gap: f64) -> FairnessReport {
        FairnessReport {
            groups: BTreeMap::from([
                ("a".to_string(), GroupTpr { tpr: worst, positives: 1, recalled: 0 }),
                ("b".to_string(), GroupTpr { tpr: worst + gap, positives: 1, recalled: 0 }),
            ]),
            tpr_mean: worst + gap / 2.0,
            tpr_worst: worst,
            tpr_best: worst + gap,
            tpr_gap: gap,
            excluded: BTreeMap::new(),
            unassigned: 0,
        }
    }

    #[test]
    fn fairness_delta_signs() {
        let r = report(0.6, 0.1);
        assert_eq!(fairness_delta(&r, &r).unwrap(), FairnessDelta { d_wg_tpr: 0.0, d_gap: 0.0 });
        let d = fairness_delta(&report(0.60, 0.1), &report(0.623, 0.1)).unwrap();
        assert!((d.d_wg_tpr + 0.023).abs() < 1e-12);
        let d = fairness_delta(&report(0.5, 0.10), &report(0.5, 0.30)).unwrap();
        assert!((d.d_gap - 0.20).abs() < 1e-12);
        let mut other = report(0.5, 0.1);
        other.groups.remove("b");
        assert!(matches!(fairness_delta(&r, &other), Err(MetricsError::SubgroupMismatch(..))));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate_folds(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((a.mean, a.std), (0.5, 0.0));
        let a = aggregate_folds(&[0.4, 0.6]).unwrap();
        assert!((a.mean - 0.5).abs() < 1e-15);
        assert!((a.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((a.std - 0.1414).abs() < 1e-4);
        let a = aggregate_folds(&[0.3]).unwrap();
        assert_eq!((a.mean, a.std, a.n), (0.3, 0.0, 1));
        assert_eq!(aggregate_folds(&[]), Err(MetricsError::EmptyInput));
    }

    proptest! {
        #[test]
        fn worst_never_exceeds_mean(
            rows in prop::collection::vec((0usize..2, 0usize..2, 0usize..4), 1..80)
        ) {
            let t = ClassTaxonomy::binary();
            let labels: Vec<_> = rows.iter().map(|r| r.0).collect();
            let preds: Vec<_> = rows.iter().map(|r| r.1).collect();
            let groups: Vec<_> = rows.iter().map(|r| Some(format!("g{}", r.2))).collect();
            if let Ok(r) = fairness(&labels, &preds, &groups, &t) {
                prop_assert!(r.tpr_worst <= r.tpr_mean + 1e-15);
                prop_assert!(r.tpr_mean <= r.tpr_best + 1e-15);
                prop_assert!(r.tpr_gap >= 0.0);
            }
        }

        #[test]
        fn metrics_are_order_invariant(
            rows in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            rot in 0usize..60,
        ) {
            let labels: Vec<_> = rows.iter().map(|r| r.0).collect();
            let preds: Vec<_> = rows.iter().map(|r| r.1).collect();
            let k = rot % rows.len();
            let mut l2 = labels.clone();
            let mut p2 = preds.clone();
            l2.rotate_left(k);
            p2.rotate_left(k);
            l2.reverse();
            p2.reverse();
            let a = confusion(&labels, &preds, 4).unwrap();
            let b = confusion(&l2, &p2, 4).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(macro_f1(&a), macro_f1(&b));
        }
    }
}
