//! Run configuration, the cross-validation entry point and report files.
//!
//! Output files written by [`write_run`]:
//!
//! * `decisions.csv`: one row per test sample per fold for the routed arm
//! * `predictions.csv`: per-sample predictions of every arm and the pathway used
//! * `report.csv`: one row per (arm, fold) plus `mean` and `std` rows
//! * `report.json`: the resolved config and every fold-level result
//! * `models/`: per-fold risk model and fusion head weights

pub mod cv;
pub mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::EnergyError;
use crate::fusion::{FusionError, TrainingConfig};
use crate::ingest::{self, Dataset, IngestError, SynthSpec};
use crate::metrics::MetricsError;
use crate::model::{ClassTaxonomy, ModelError, RoutingConfig, TaxonomySpec};
use crate::risk::RiskError;

pub use cv::{evaluate, prepare_cv, Arm, EncoderPair, FoldEvaluation, PreparedCv};
pub use report::{build_report, write_run, RunReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fold {fold}: risk calibration failed: {source}")]
    Risk { fold: usize, source: RiskError },
    #[error("fold {fold}: fusion failed: {source}")]
    Fusion { fold: usize, source: FusionError },
    #[error("fold {fold}: energy accounting failed: {source}")]
    Energy { fold: usize, source: EnergyError },
    #[error("fold {fold}: metrics failed: {source}")]
    Metrics { fold: usize, source: MetricsError },
    #[error("aggregation failed: {0}")]
    Aggregate(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Path to a `dataset.json` manifest.
    Manifest(PathBuf),
    Synth(Box<SynthSpec>),
}

fn default_folds() -> usize {
    5
}

fn default_arms() -> Vec<Arm> {
    Arm::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Overrides the dataset's own taxonomy when set.
    #[serde(default)]
    pub taxonomy: Option<TaxonomySpec>,
    pub pair: EncoderPair,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig = ingest::read_json(path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (normally the config's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Manifest(p) = &mut self.dataset {
            fix(p);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.folds < 2 {
            return Err(HarnessError::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.arms.is_empty() {
            return Err(HarnessError::Config("at least one arm is required".into()));
        }
        if self.pair.lite == self.pair.heavy {
            return Err(HarnessError::Config("lite and heavy encoders must differ".into()));
        }
        self.routing.validate()?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, HarnessError> {
        let mut d = match &self.dataset {
            DatasetSource::Manifest(p) => ingest::load_manifest(p)?,
            DatasetSource::Synth(spec) => ingest::synth_generate(spec)?,
        };
        if let Some(spec) = &self.taxonomy {
            let t = ClassTaxonomy::from_spec(spec)?;
            if t.n_classes() != d.taxonomy.n_classes() {
                return Err(HarnessError::Config(
                    "taxonomy override has a different class count than the dataset".into(),
                ));
            }
            d.taxonomy = t;
        }
        Ok(d)
    }

    pub fn prepare(&self) -> Result<PreparedCv, HarnessError> {
        self.validate()?;
        let d = self.load_dataset()?;
        prepare_cv(d, &self.pair, self.folds, self.seed, &self.training, self.routing.heavy_transmission)
    }
}

/// Runs every fold and builds the report. Nothing is written to disk.
pub fn run_cv(cfg: &RunConfig) -> Result<(PreparedCv, Vec<FoldEvaluation>, RunReport), HarnessError> {
    let cv = cfg.prepare()?;
    let folds = evaluate(&cv, &cfg.routing)?;
    let report = build_report(cfg, &cv, &folds)?;
    Ok((cv, folds, report))
}
