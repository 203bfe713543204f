//! Grid sweeps over routing thresholds and the energy/fairness Pareto frontier.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::sig6;
use crate::harness::cv::{evaluate, Arm, PreparedCv};
use crate::harness::{HarnessError, RunConfig};
use crate::metrics::{aggregate_folds, MetricsError};
use crate::model::RoutingConfig;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("no operating points to compare")]
    EmptyInput,
    #[error("operating point {0} has a non-finite energy or worst-group TPR")]
    NonFinite(usize),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Values to try per routing parameter. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub lambda_h: Vec<f64>,
    pub lambda_delta: Vec<f64>,
    pub tau_r: Vec<f64>,
    pub tau_h: Vec<f64>,
    pub tau_delta: Vec<f64>,
    pub tau_risk: Vec<f64>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        [&self.lambda_h, &self.lambda_delta, &self.tau_r, &self.tau_h, &self.tau_delta, &self.tau_risk]
            .iter()
            .map(|v| v.len().max(1))
            .product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn axis(values: &[f64], base: f64) -> Vec<f64> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the grid in lexicographic order
/// (lambda_h, lambda_delta, tau_r, tau_h, tau_delta, tau_risk), last axis fastest.
pub fn grid_configs(base: &RoutingConfig, grid: &SweepGrid) -> Vec<RoutingConfig> {
    let mut out = Vec::with_capacity(grid.len());
    for &lambda_h in &axis(&grid.lambda_h, base.lambda_h) {
        for &lambda_delta in &axis(&grid.lambda_delta, base.lambda_delta) {
            for &tau_r in &axis(&grid.tau_r, base.tau_r) {
                for &tau_h in &axis(&grid.tau_h, base.tau_h) {
                    for &tau_delta in &axis(&grid.tau_delta, base.tau_delta) {
                        for &tau_risk in &axis(&grid.tau_risk, base.tau_risk) {
                            out.push(RoutingConfig {
                                lambda_h,
                                lambda_delta,
                                tau_r,
                                tau_h,
                                tau_delta,
                                tau_risk,
                                ..*base
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub config: RoutingConfig,
    /// Mean energy per sample over all test folds (J).
    pub energy: f64,
    /// `energy` times the test-set size.
    pub total_energy: f64,
    pub test_set_size: usize,
    /// Mean over folds of the per-fold worst-group TPR.
    pub wg_tpr: f64,
    pub routing_pct: f64,
    #[serde(default)]
    pub aux: BTreeMap<String, f64>,
}

/// Evaluates every grid configuration against already prepared folds.
/// Results keep the grid order.
pub fn grid_sweep(cv: &PreparedCv, base: &RoutingConfig, grid: &SweepGrid) -> Result<Vec<OperatingPoint>, SweepError> {
    grid_configs(base, grid).into_par_iter().map(|cfg| operating_point(cv, cfg)).collect()
}

pub fn operating_point(cv: &PreparedCv, cfg: RoutingConfig) -> Result<OperatingPoint, SweepError> {
    let folds = evaluate(cv, &cfg)?;
    let n: usize = folds.iter().map(|f| f.decisions.len()).sum();
    let total_energy: f64 = folds.iter().map(|f| f.energy.e_ecofair * f.decisions.len() as f64).sum();
    let routed: usize = folds.iter().map(|f| f.decisions.iter().filter(|d| d.gate).count()).sum();
    let eco: Vec<_> = folds.iter().map(|f| &f.metrics[&Arm::Ecofair]).collect();
    let worst: Vec<f64> = eco.iter().filter_map(|m| m.fairness.as_ref().map(|r| r.tpr_worst)).collect();
    let wg_tpr = if worst.is_empty() { f64::NAN } else { aggregate_folds(&worst)?.mean };
    let mut aux = BTreeMap::new();
    aux.insert("macro_f1".to_string(), aggregate_folds(&eco.iter().map(|m| m.macro_f1).collect::<Vec<_>>())?.mean);
    aux.insert(
        "balanced_accuracy".to_string(),
        aggregate_folds(&eco.iter().map(|m| m.balanced_accuracy).collect::<Vec<_>>())?.mean,
    );
    let gaps: Vec<f64> = eco.iter().filter_map(|m| m.fairness.as_ref().map(|r| r.tpr_gap)).collect();
    if !gaps.is_empty() {
        aux.insert("tpr_gap".to_string(), aggregate_folds(&gaps)?.mean);
    }
    Ok(OperatingPoint {
        config: cfg,
        energy: total_energy / n as f64,
        total_energy,
        test_set_size: n,
        wg_tpr,
        routing_pct: routed as f64 / n as f64,
        aux,
    })
}

/// Indices of the non-dominated points (minimise energy, maximise wg_tpr),
/// ordered by increasing energy. Of exact duplicates only the first is kept.
pub fn pareto_indices(points: &[(f64, f64)]) -> Result<Vec<usize>, SweepError> {
    if points.is_empty() {
        return Err(SweepError::EmptyInput);
    }
    if let Some(i) = points.iter().position(|(e, w)| !e.is_finite() || !w.is_finite()) {
        return Err(SweepError::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, wa) = points[a];
        let (eb, wb) = points[b];
        ea.partial_cmp(&eb)
            .unwrap_or(Ordering::Equal)
            .then(wb.partial_cmp(&wa).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in order {
        if points[i].1 > best {
            best = points[i].1;
            front.push(i);
        }
    }
    Ok(front)
}

pub fn pareto_front(points: &[OperatingPoint]) -> Result<Vec<usize>, SweepError> {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.energy, p.wg_tpr)).collect();
    pareto_indices(&pairs)
}

pub const POINT_COLUMNS: [&str; 14] = [
    "index",
    "lambda_h",
    "lambda_delta",
    "tau_r",
    "tau_h",
    "tau_delta",
    "tau_risk",
    "energy_per_sample_j",
    "total_energy_j",
    "test_set_size",
    "wg_tpr",
    "routing_pct",
    "macro_f1",
    "frontier",
];

/// Writes every operating point, flagging frontier members.
pub fn write_points(path: &Path, points: &[OperatingPoint], front: &[usize]) -> Result<(), HarnessError> {
    let err = |source| HarnessError::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(POINT_COLUMNS).map_err(err)?;
    for (i, p) in points.iter().enumerate() {
        let c = &p.config;
        let row = [
            i.to_string(),
            sig6(c.lambda_h),
            sig6(c.lambda_delta),
            sig6(c.tau_r),
            sig6(c.tau_h),
            sig6(c.tau_delta),
            sig6(c.tau_risk),
            sig6(p.energy),
            sig6(p.total_energy),
            p.test_set_size.to_string(),
            sig6(p.wg_tpr),
            sig6(p.routing_pct),
            p.aux.get("macro_f1").map(|v| sig6(*v)).unwrap_or_default(),
            u8::from(front.contains(&i)).to_string(),
        ];
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.into(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default)]
    pub grid: SweepGrid,
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg: SweepConfig = crate::ingest::read_json(path)?;
        cfg.run.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<OperatingPoint>,
    pub frontier: Vec<usize>,
}

/// Prepares folds once, then sweeps the grid.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult, SweepError> {
    let cv = cfg.run.prepare()?;
    let points = grid_sweep(&cv, &cfg.run.routing, &cfg.grid)?;
    let frontier = pareto_front(&points)?;
    Ok(SweepResult { points, frontier })
}

/// Writes `sweep.csv` and `sweep.json` into `dir`.
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.into(), source })?;
    write_points(&dir.join("sweep.csv"), &result.points, &result.frontier)?;
    let mut json = serde_json::to_value(result).expect("sweep result serialises");
    crate::fmt::round_json(&mut json);
    crate::ingest::write_json(&dir.join("sweep.json"), &json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(points: &[(f64, f64)]) -> Vec<usize> {
        let mut keep: Vec<usize> = (0..points.len())
            .filter(|&i| {
                let (ei, wi) = points[i];
                let dominated = points.iter().any(|&(e, w)| e <= ei && w >= wi && (e < ei || w > wi));
                let earlier_dup = points[..i].iter().any(|&p| p == points[i]);
                !dominated && !earlier_dup
            })
            .collect();
        keep.sort_by(|&a, &b| points[a].0.partial_cmp(&points[b].0).unwrap());
        keep
    }

    #[test]
    fn frontier_of_small_set() {
        let pts = [(1.0, 0.5), (2.0, 0.7), (1.5, 0.4), (3.0, 0.7), (0.5, 0.1)];
        assert_eq!(pareto_indices(&pts).unwrap(), vec![4, 0, 1]);
    }

    #[test]
    fn duplicates_keep_first() {
        let pts = [(1.0, 0.5), (1.0, 0.5)];
        assert_eq!(pareto_indices(&pts).unwrap(), vec![0]);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(pareto_indices(&[]), Err(SweepError::EmptyInput)));
    }

    #[test]
    fn grid_is_lexicographic() {
        let base = RoutingConfig::default();
        let grid = SweepGrid { tau_h: vec![0.1, 0.2], tau_risk: vec![0.5, 0.9], ..Default::default() };
        let cfgs = grid_configs(&base, &grid);
        assert_eq!(cfgs.len(), 4);
        let pairs: Vec<(f64, f64)> = cfgs.iter().map(|c| (c.tau_h, c.tau_risk)).collect();
        assert_eq!(pairs, vec![(0.1, 0.5), (0.1, 0.9), (0.2, 0.5), (0.2, 0.9)]);
        assert!(cfgs.iter().all(|c| c.lambda_h == base.lambda_h));
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in prop::collection::vec((0u8..20, 0u8..20), 1..40)) {
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|(e, w)| (e as f64, w as f64 / 20.0)).collect();
            prop_assert_eq!(pareto_indices(&pts).unwrap(), brute_force(&pts));
        }

        #[test]
        fn frontier_is_mutually_non_dominated(pts in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0), 1..60)) {
            let f = pareto_indices(&pts).unwrap();
            for &a in &f {
                for &b in &f {
                    if a != b {
                        let (ea, wa) = pts[a];
                        let (eb, wb) = pts[b];
                        prop_assert!(!(eb <= ea && wb >= wa));
                    }
                }
            }
        }
    }
}
