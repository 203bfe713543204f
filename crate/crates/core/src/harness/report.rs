use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cv::{escalation_head, heavy_arm_energy, Arm, ArmMetrics, FoldEvaluation, PreparedCv};
use super::{HarnessError, RunConfig};
use crate::energy::{self, EnergyReport, EnergySummary};
use crate::fmt::{round_json, sig6};
use crate::fusion::Pathway;
use crate::ingest::write_json;
use crate::metrics::{aggregate_folds, FairnessDelta, MeanStd};
use crate::model::{EncoderProfile, HeavyTransmission};
use crate::risk::RiskModel;

pub const REPORT_COLUMNS: [&str; 16] = [
    "arm",
    "fold",
    "n",
    "macro_f1",
    "balanced_accuracy",
    "malignant_recall",
    "tpr_mean",
    "tpr_worst",
    "tpr_gap",
    "energy_per_sample_j",
    "routing_pct",
    "savings_vs_heavy",
    "d_wg_tpr_vs_lite",
    "d_gap_vs_lite",
    "d_wg_tpr_vs_heavy",
    "d_gap_vs_heavy",
];

pub const DECISION_COLUMNS: [&str; 10] = [
    "sample_id",
    "fold",
    "gate",
    "entropy",
    "norm_entropy",
    "delta",
    "ambiguity",
    "score",
    "tab_risk",
    "trigger_reason",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_test: usize,
    pub metrics: BTreeMap<Arm, ArmMetrics>,
    pub energy: EnergyReport,
    pub delta_vs_lite: Option<FairnessDelta>,
    pub delta_vs_heavy: Option<FairnessDelta>,
    pub risk_model: RiskModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmAggregate {
    pub macro_f1: MeanStd,
    pub balanced_accuracy: MeanStd,
    pub malignant_recall: Option<MeanStd>,
    pub tpr_mean: Option<MeanStd>,
    pub tpr_worst: Option<MeanStd>,
    pub tpr_gap: Option<MeanStd>,
    pub energy_per_sample: MeanStd,
    pub routing_pct: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaAggregate {
    pub d_wg_tpr: MeanStd,
    pub d_gap: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub lite_profile: EncoderProfile,
    pub heavy_profile: EncoderProfile,
    pub heavy_arm_energy_j: f64,
    pub breakeven_rate: f64,
    pub folds: Vec<FoldSummary>,
    pub aggregate: BTreeMap<Arm, ArmAggregate>,
    pub energy: EnergySummary,
    pub delta_vs_lite: Option<DeltaAggregate>,
    pub delta_vs_heavy: Option<DeltaAggregate>,
}

fn opt_aggregate(values: Vec<Option<f64>>) -> Result<Option<MeanStd>, HarnessError> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        Ok(None)
    } else {
        Ok(Some(aggregate_folds(&v)?))
    }
}

fn delta_aggregate(deltas: Vec<Option<FairnessDelta>>) -> Result<Option<DeltaAggregate>, HarnessError> {
    let d: Vec<FairnessDelta> = deltas.into_iter().flatten().collect();
    if d.is_empty() {
        return Ok(None);
    }
    Ok(Some(DeltaAggregate {
        d_wg_tpr: aggregate_folds(&d.iter().map(|x| x.d_wg_tpr).collect::<Vec<_>>())?,
        d_gap: aggregate_folds(&d.iter().map(|x| x.d_gap).collect::<Vec<_>>())?,
    }))
}

pub fn build_report(cfg: &RunConfig, cv: &PreparedCv, folds: &[FoldEvaluation]) -> Result<RunReport, HarnessError> {
    let mut aggregate = BTreeMap::new();
    for &arm in &cfg.arms {
        let ms: Vec<&ArmMetrics> = folds.iter().map(|f| &f.metrics[&arm]).collect();
        let col = |g: fn(&ArmMetrics) -> f64| aggregate_folds(&ms.iter().map(|m| g(m)).collect::<Vec<_>>());
        let fair = |g: fn(&crate::metrics::FairnessReport) -> f64| {
            opt_aggregate(ms.iter().map(|m| m.fairness.as_ref().map(g)).collect())
        };
        aggregate.insert(
            arm,
            ArmAggregate {
                macro_f1: col(|m| m.macro_f1)?,
                balanced_accuracy: col(|m| m.balanced_accuracy)?,
                malignant_recall: opt_aggregate(ms.iter().map(|m| m.malignant_recall).collect())?,
                tpr_mean: fair(|f| f.tpr_mean)?,
                tpr_worst: fair(|f| f.tpr_worst)?,
                tpr_gap: fair(|f| f.tpr_gap)?,
                energy_per_sample: col(|m| m.energy_per_sample)?,
                routing_pct: col(|m| m.routing_pct)?,
            },
        );
    }
    let energy = energy::summarise(folds.iter().map(|f| f.energy).collect())
        .map_err(|source| HarnessError::Energy { fold: 0, source })?;
    let breakeven = energy::breakeven_rate(&cv.lite_profile, &cv.heavy_profile)
        .map_err(|source| HarnessError::Energy { fold: 0, source })?;
    let summaries = folds
        .iter()
        .zip(&cv.folds)
        .map(|(f, p)| FoldSummary {
            fold: f.fold,
            n_test: f.decisions.len(),
            metrics: f.metrics.iter().filter(|(a, _)| cfg.arms.contains(a)).map(|(a, m)| (*a, m.clone())).collect(),
            energy: f.energy,
            delta_vs_lite: f.delta_vs_lite,
            delta_vs_heavy: f.delta_vs_heavy,
            risk_model: p.risk_model.clone(),
        })
        .collect();
    Ok(RunReport {
        config: cfg.clone(),
        n_samples: cv.dataset.len(),
        class_names: cv.dataset.taxonomy.class_names.clone(),
        lite_profile: cv.lite_profile.clone(),
        heavy_profile: cv.heavy_profile.clone(),
        heavy_arm_energy_j: heavy_arm_energy(cv),
        breakeven_rate: breakeven,
        folds: summaries,
        aggregate,
        energy,
        delta_vs_lite: delta_aggregate(folds.iter().map(|f| f.delta_vs_lite).collect())?,
        delta_vs_heavy: delta_aggregate(folds.iter().map(|f| f.delta_vs_heavy).collect())?,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

fn report_row(arm: Arm, fold: usize, m: &ArmMetrics, f: &FoldEvaluation, heavy_energy: f64) -> Vec<String> {
    let fair = m.fairness.as_ref();
    let eco = arm == Arm::Ecofair;
    let savings = (heavy_energy > 0.0).then(|| (heavy_energy - m.energy_per_sample) / heavy_energy);
    vec![
        arm.name().to_string(),
        fold.to_string(),
        m.n.to_string(),
        sig6(m.macro_f1),
        sig6(m.balanced_accuracy),
        cell(m.malignant_recall),
        cell(fair.map(|r| r.tpr_mean)),
        cell(fair.map(|r| r.tpr_worst)),
        cell(fair.map(|r| r.tpr_gap)),
        sig6(m.energy_per_sample),
        sig6(m.routing_pct),
        cell(savings),
        cell(f.delta_vs_lite.filter(|_| eco).map(|d| d.d_wg_tpr)),
        cell(f.delta_vs_lite.filter(|_| eco).map(|d| d.d_gap)),
        cell(f.delta_vs_heavy.filter(|_| eco).map(|d| d.d_wg_tpr)),
        cell(f.delta_vs_heavy.filter(|_| eco).map(|d| d.d_gap)),
    ]
}

/// Appends `mean` and `std` rows for every arm, computed column-wise over the
/// numeric fold rows. Empty cells are skipped.
pub fn aggregate_rows(rows: &[Vec<String>]) -> Result<Vec<Vec<String>>, HarnessError> {
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r[0].as_str()) {
            arms.push(&r[0]);
        }
    }
    let mut out = Vec::new();
    for arm in arms {
        let fold_rows: Vec<&Vec<String>> =
            rows.iter().filter(|r| r[0] == arm && r[1].parse::<usize>().is_ok()).collect();
        if fold_rows.is_empty() {
            continue;
        }
        let mut mean_row = vec![arm.to_string(), "mean".to_string()];
        let mut std_row = vec![arm.to_string(), "std".to_string()];
        let n_total: usize = fold_rows.iter().filter_map(|r| r[2].parse::<usize>().ok()).sum();
        mean_row.push(n_total.to_string());
        std_row.push(String::new());
        for c in 3..REPORT_COLUMNS.len() {
            let vals: Vec<f64> = fold_rows.iter().filter_map(|r| r[c].parse::<f64>().ok()).collect();
            if vals.is_empty() {
                mean_row.push(String::new());
                std_row.push(String::new());
            } else {
                let a = aggregate_folds(&vals)?;
                mean_row.push(sig6(a.mean));
                std_row.push(sig6(a.std));
            }
        }
        out.push(mean_row);
        out.push(std_row);
    }
    Ok(out)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let err = |source| HarnessError::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.into(), source })
}

pub fn report_rows(report: &RunReport, folds: &[FoldEvaluation]) -> Result<Vec<Vec<String>>, HarnessError> {
    let mut rows = Vec::new();
    for &arm in Arm::ALL.iter().filter(|a| report.config.arms.contains(a)) {
        for f in folds {
            rows.push(report_row(arm, f.fold, &f.metrics[&arm], f, report.heavy_arm_energy_j));
        }
    }
    let agg = aggregate_rows(&rows)?;
    rows.extend(agg);
    Ok(rows)
}

/// Writes every run output into `dir`.
pub fn write_run(
    dir: &Path,
    cv: &PreparedCv,
    folds: &[FoldEvaluation],
    report: &RunReport,
) -> Result<(), HarnessError> {
    let io = |path: &Path, source| HarnessError::Io { path: path.into(), source };
    let models = dir.join("models");
    fs::create_dir_all(&models).map_err(|e| io(&models, e))?;
    let d = &cv.dataset;

    if report.config.arms.contains(&Arm::Ecofair) {
        let mut rows = Vec::new();
        for f in folds {
            for dec in &f.decisions {
                rows.push(vec![
                    dec.sample_id.clone(),
                    f.fold.to_string(),
                    u8::from(dec.gate).to_string(),
                    sig6(dec.entropy),
                    sig6(dec.norm_entropy),
                    sig6(dec.delta),
                    sig6(dec.ambiguity),
                    cell(dec.score),
                    sig6(dec.tab_risk),
                    dec.trigger_reason.to_string(),
                ]);
            }
        }
        write_csv(&dir.join("decisions.csv"), &DECISION_COLUMNS, &rows)?;
    }

    let escalated = match cv.transmission {
        HeavyTransmission::Replace => Pathway::Heavy,
        HeavyTransmission::Alongside => Pathway::Alongside,
    };
    let mut rows = Vec::new();
    for (f, p) in folds.iter().zip(&cv.folds) {
        for (j, &i) in p.test_idx.iter().enumerate() {
            let name = |arm: Arm| d.taxonomy.class_names[f.predictions[&arm][j]].clone();
            let pathway = if f.decisions[j].gate { escalated } else { Pathway::Lite };
            rows.push(vec![
                d.samples[i].id.clone(),
                f.fold.to_string(),
                d.taxonomy.class_names[d.samples[i].label].clone(),
                name(Arm::Lite),
                name(Arm::Heavy),
                name(Arm::Ecofair),
                pathway.to_string(),
            ]);
        }
    }
    write_csv(
        &dir.join("predictions.csv"),
        &["sample_id", "fold", "label", "lite", "heavy", "ecofair", "pathway"],
        &rows,
    )?;

    write_csv(&dir.join("report.csv"), &REPORT_COLUMNS, &report_rows(report, folds)?)?;

    let mut json = serde_json::to_value(report).expect("report serialises");
    round_json(&mut json);
    write_json(&dir.join("report.json"), &json)?;

    for p in &cv.folds {
        write_json(&models.join(format!("fold{}_risk.json", p.fold)), &p.risk_model)?;
        write_json(&models.join(format!("fold{}_lite_head.json", p.fold)), &p.heads.lite.head)?;
        let esc = escalation_head(&p.heads, cv.transmission);
        write_json(&models.join(format!("fold{}_{}_head.json", p.fold, esc.pathway)), esc)?;
    }
    Ok(())
}

/// Re-reads a `report.csv` and recomputes its `mean`/`std` rows from the
/// per-fold rows. Returns the rebuilt table (fold rows followed by aggregates).
pub fn reaggregate(report_csv: &Path) -> Result<Vec<Vec<String>>, HarnessError> {
    let err = |source| HarnessError::Csv { path: report_csv.into(), source };
    let mut rdr = csv::Reader::from_path(report_csv).map_err(err)?;
    let header = rdr.headers().map_err(err)?.clone();
    if header.iter().ne(REPORT_COLUMNS.iter().copied()) {
        return Err(HarnessError::Config(format!("{} does not have the report.csv header", report_csv.display())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(err)?;
        if rec.get(1).is_some_and(|f| f.parse::<usize>().is_ok()) {
            rows.push(rec.iter().map(String::from).collect::<Vec<_>>());
        }
    }
    let agg = aggregate_rows(&rows)?;
    rows.extend(agg);
    Ok(rows)
}

pub fn write_report_table(path: &Path, rows: &[Vec<String>]) -> Result<(), HarnessError> {
    write_csv(path, &REPORT_COLUMNS, rows)
}
