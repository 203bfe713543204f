//! Dataset container, CSV loading and writing, stratified fold assignment,
//! and a deterministic synthetic dataset generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClassTaxonomy, EncoderProfile, ModelError, PredictiveDistribution, Sample, TaxonomySpec, Tier};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("schema error in {path}: {reason}")]
    SchemaError { path: PathBuf, reason: String },
    #[error("{what}: expected {expected} rows, got {got}")]
    RowCountMismatch { what: String, expected: usize, got: usize },
    #[error("row {row}: label {label:?} is not in the taxonomy")]
    UnknownLabel { row: usize, label: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("encoder {0:?} has no profile")]
    MissingProfile(String),
    #[error("dataset has {n} samples, fewer than {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("fold count must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-encoder outputs, one row per sample in dataset order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EncoderTable {
    pub probabilities: Option<Vec<PredictiveDistribution>>,
    pub embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub taxonomy: ClassTaxonomy,
    pub samples: Vec<Sample>,
    pub encoders: BTreeMap<String, EncoderTable>,
    pub profiles: Vec<EncoderProfile>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn profile(&self, encoder_id: &str) -> Option<&EncoderProfile> {
        self.profiles.iter().find(|p| p.encoder_id == encoder_id)
    }

    /// Checks row alignment, labels, ids, and that every encoder has a profile.
    pub fn validate(&self) -> Result<(), IngestError> {
        let n = self.samples.len();
        let c = self.taxonomy.n_classes();
        let mut ids = HashSet::new();
        for s in &self.samples {
            s.validate(c)?;
            if !ids.insert(s.id.as_str()) {
                return Err(IngestError::DuplicateSampleId(s.id.clone()));
            }
        }
        for p in &self.profiles {
            p.validate()?;
        }
        for (id, table) in &self.encoders {
            let profile = self.profile(id).ok_or_else(|| IngestError::MissingProfile(id.clone()))?;
            if let Some(probs) = &table.probabilities {
                check_rows(&format!("{id} probabilities"), n, probs.len())?;
                for p in probs {
                    if p.n_classes() != c {
                        return Err(ModelError::LengthMismatch { expected: c, got: p.n_classes() }.into());
                    }
                }
            }
            if let Some(emb) = &table.embeddings {
                check_rows(&format!("{id} embeddings"), n, emb.len())?;
                for row in emb {
                    if row.len() != profile.embedding_dim {
                        return Err(
                            ModelError::LengthMismatch { expected: profile.embedding_dim, got: row.len() }.into()
                        );
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(ModelError::InvalidEmbedding { encoder_id: id.clone() }.into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        fn pick<T: Clone>(v: &[T], indices: &[usize]) -> Vec<T> {
            indices.iter().map(|&i| v[i].clone()).collect()
        }
        Dataset {
            taxonomy: self.taxonomy.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            encoders: self
                .encoders
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        EncoderTable {
                            probabilities: t.probabilities.as_deref().map(|v| pick(v, indices)),
                            embeddings: t.embeddings.as_deref().map(|v| pick(v, indices)),
                        },
                    )
                })
                .collect(),
            profiles: self.profiles.clone(),
        }
    }
}

fn check_rows(what: &str, expected: usize, got: usize) -> Result<(), IngestError> {
    if expected != got {
        return Err(IngestError::RowCountMismatch { what: what.into(), expected, got });
    }
    Ok(())
}

/// Files for one encoder. Either may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSource {
    pub encoder_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

/// On-disk description of a dataset. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub metadata: PathBuf,
    pub profiles: PathBuf,
    pub taxonomy: TaxonomySpec,
    pub encoders: Vec<EncoderSource>,
    #[serde(default = "default_subgroup_column")]
    pub subgroup_column: String,
}

pub fn default_subgroup_column() -> String {
    "subgroup".into()
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| IngestError::Json { path: path.into(), source })
}

pub fn load_profiles(path: &Path) -> Result<Vec<EncoderProfile>, IngestError> {
    let profiles: Vec<EncoderProfile> = read_json(path)?;
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

pub fn load_manifest(path: &Path) -> Result<Dataset, IngestError> {
    let manifest: DatasetManifest = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let taxonomy = ClassTaxonomy::from_spec(&manifest.taxonomy)?;
    let profiles = load_profiles(&resolve(&manifest.profiles))?;
    let encoders: Vec<EncoderSource> = manifest
        .encoders
        .iter()
        .map(|e| EncoderSource {
            encoder_id: e.encoder_id.clone(),
            probabilities: e.probabilities.as_deref().map(resolve),
            embeddings: e.embeddings.as_deref().map(resolve),
        })
        .collect();
    load_dataset(&resolve(&manifest.metadata), &encoders, profiles, &taxonomy, &manifest.subgroup_column)
}

/// Loads a metadata CSV and the listed encoder CSVs.
pub fn load_dataset(
    metadata: &Path,
    encoders: &[EncoderSource],
    profiles: Vec<EncoderProfile>,
    taxonomy: &ClassTaxonomy,
    subgroup_column: &str,
) -> Result<Dataset, IngestError> {
    let samples = load_metadata(metadata, taxonomy, subgroup_column)?;
    let index: HashMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut tables = BTreeMap::new();
    for src in encoders {
        let mut table = EncoderTable::default();
        if let Some(path) = &src.probabilities {
            let rows = load_matrix(path, "p_", Some(taxonomy.n_classes()), &index)?;
            table.probabilities = Some(
                rows.iter()
                    .map(|r| PredictiveDistribution::validate(r, taxonomy.n_classes()))
                    .collect::<Result<_, _>>()?,
            );
        }
        if let Some(path) = &src.embeddings {
            table.embeddings = Some(load_matrix(path, "e_", None, &index)?);
        }
        tables.insert(src.encoder_id.clone(), table);
    }
    let d = Dataset { taxonomy: taxonomy.clone(), samples, encoders: tables, profiles };
    d.validate()?;
    Ok(d)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>, IngestError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| IngestError::Csv { path: path.into(), source })
}

pub fn load_metadata(path: &Path, taxonomy: &ClassTaxonomy, subgroup_column: &str) -> Result<Vec<Sample>, IngestError> {
    let schema = |reason: String| IngestError::SchemaError { path: path.into(), reason };
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|source| IngestError::Csv { path: path.into(), source })?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("sample_id").ok_or_else(|| schema("missing column sample_id".into()))?;
    let label_col = col("label").ok_or_else(|| schema("missing column label".into()))?;
    let age_col = col("age");
    let loc_col = col("localization").or_else(|| col("localisation"));
    let group_col = col(subgroup_column);
    let fold_col = col("fold");

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| IngestError::Csv { path: path.into(), source })?;
        let cell = |c: Option<usize>| c.and_then(|c| rec.get(c)).filter(|v| !v.is_empty());
        let id = cell(Some(id_col)).ok_or_else(|| schema(format!("row {row}: empty sample_id")))?;
        if !seen.insert(id.to_string()) {
            return Err(IngestError::DuplicateSampleId(id.into()));
        }
        let raw_label = cell(Some(label_col)).unwrap_or("");
        let label = taxonomy
            .class_index(raw_label)
            .or_else(|| raw_label.parse::<usize>().ok().filter(|&i| i < taxonomy.n_classes()))
            .ok_or_else(|| IngestError::UnknownLabel { row, label: raw_label.into() })?;
        let age = cell(age_col)
            .map(|a| a.parse::<f64>().map_err(|_| schema(format!("row {row}: bad age {a:?}"))))
            .transpose()?;
        let fold = cell(fold_col)
            .map(|f| f.parse::<usize>().map_err(|_| schema(format!("row {row}: bad fold {f:?}"))))
            .transpose()?;
        let s = Sample {
            id: id.into(),
            label,
            age,
            localisation: cell(loc_col).map(String::from),
            subgroup: cell(group_col).map(String::from),
            fold,
        };
        s.validate(taxonomy.n_classes())?;
        samples.push(s);
    }
    Ok(samples)
}

/// Reads `sample_id,<prefix>0,...` and reorders rows to match `index`.
fn load_matrix(
    path: &Path,
    prefix: &str,
    width: Option<usize>,
    index: &HashMap<&str, usize>,
) -> Result<Vec<Vec<f64>>, IngestError> {
    let schema = |reason: String| IngestError::SchemaError { path: path.into(), reason };
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|source| IngestError::Csv { path: path.into(), source })?.clone();
    if headers.get(0) != Some("sample_id") {
        return Err(schema("first column must be sample_id".into()));
    }
    let cols = headers.len() - 1;
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("{prefix}{j}") {
            return Err(schema(format!("column {} should be {prefix}{j}, found {h:?}", j + 1)));
        }
    }
    if let Some(w) = width {
        if cols != w {
            return Err(schema(format!("expected {w} value columns, found {cols}")));
        }
    }
    if cols == 0 {
        return Err(schema("no value columns".into()));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; index.len()];
    let mut count = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| IngestError::Csv { path: path.into(), source })?;
        count += 1;
        let id = rec.get(0).unwrap_or("");
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| schema(format!("row {r}: bad number {v:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(&i) = index.get(id) {
            if rows[i].is_some() {
                return Err(IngestError::DuplicateSampleId(id.into()));
            }
            rows[i] = Some(values);
        } else if count <= index.len() {
            return Err(schema(format!("row {r}: sample_id {id:?} not in metadata")));
        }
    }
    check_rows(&path.display().to_string(), index.len(), count)?;
    rows.into_iter().enumerate().map(|(i, r)| r.ok_or_else(|| schema(format!("no row for metadata row {i}")))).collect()
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the dataset as CSV/JSON files plus a `dataset.json` manifest.
/// Floats use the shortest representation that parses back to the same value.
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<PathBuf, IngestError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path: path.clone(), source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Csv { path: path.clone(), source }
    };

    let meta_path = dir.join("metadata.csv");
    let mut w = csv::Writer::from_path(&meta_path).map_err(csv_err(&meta_path))?;
    w.write_record(["sample_id", "label", "age", "localization", "subgroup", "fold"]).map_err(csv_err(&meta_path))?;
    for s in &d.samples {
        w.write_record([
            s.id.clone(),
            d.taxonomy.class_names[s.label].clone(),
            fmt_cell(s.age),
            s.localisation.clone().unwrap_or_default(),
            s.subgroup.clone().unwrap_or_default(),
            s.fold.map(|f| f.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err(&meta_path))?;
    }
    w.flush().map_err(io(&meta_path))?;

    let mut sources = Vec::new();
    for (id, table) in &d.encoders {
        let mut src = EncoderSource { encoder_id: id.clone(), probabilities: None, embeddings: None };
        if let Some(probs) = &table.probabilities {
            let name = format!("{id}.probs.csv");
            let rows: Vec<&[f64]> = probs.iter().map(|p| p.probs()).collect();
            write_matrix(&dir.join(&name), "p_", &d.samples, &rows)?;
            src.probabilities = Some(name.into());
        }
        if let Some(emb) = &table.embeddings {
            let name = format!("{id}.emb.csv");
            let rows: Vec<&[f64]> = emb.iter().map(Vec::as_slice).collect();
            write_matrix(&dir.join(&name), "e_", &d.samples, &rows)?;
            src.embeddings = Some(name.into());
        }
        sources.push(src);
    }

    let profiles_path = dir.join("profiles.json");
    write_json(&profiles_path, &d.profiles)?;
    let manifest = DatasetManifest {
        metadata: "metadata.csv".into(),
        profiles: "profiles.json".into(),
        taxonomy: d.taxonomy.to_spec(),
        encoders: sources,
        subgroup_column: default_subgroup_column(),
    };
    let manifest_path = dir.join("dataset.json");
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IngestError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| IngestError::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| IngestError::Io { path: path.into(), source })
}

fn write_matrix(path: &Path, prefix: &str, samples: &[Sample], rows: &[&[f64]]) -> Result<(), IngestError> {
    let err = |source| IngestError::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let width = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..width).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(err)?;
    for (s, row) in samples.iter().zip(rows) {
        let mut rec = vec![s.id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| IngestError::Io { path: path.into(), source })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    /// Classes with fewer members than folds; spread round-robin.
    pub flagged: Vec<String>,
}

/// Stratified fold assignment by class label.
///
/// Each class's members are shuffled and dealt round-robin, continuing from
/// where the previous class stopped, so per-class fold counts differ by at
/// most one and overall fold sizes stay balanced.
pub fn assign_stratified_folds(
    labels: &[usize],
    taxonomy: &ClassTaxonomy,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, IngestError> {
    if k < 2 {
        return Err(IngestError::InvalidFoldCount(k));
    }
    if labels.len() < k {
        return Err(IngestError::TooFewSamples { n: labels.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut flagged = Vec::new();
    let mut next = 0;
    for c in 0..taxonomy.n_classes() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            log::warn!(
                "class {} has {} samples, fewer than {k} folds; spreading round-robin",
                taxonomy.class_names[c],
                members.len()
            );
            flagged.push(taxonomy.class_names[c].clone());
        }
        members.shuffle(&mut rng);
        for &i in &members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { folds, flagged })
}

/// Returns a copy of `d` with every sample's fold set.
pub fn stratified_folds(d: &Dataset, k: usize, seed: u64) -> Result<Dataset, IngestError> {
    let labels: Vec<usize> = d.samples.iter().map(|s| s.label).collect();
    let assignment = assign_stratified_folds(&labels, &d.taxonomy, k, seed)?;
    let mut out = d.clone();
    for (s, f) in out.samples.iter_mut().zip(assignment.folds) {
        s.fold = Some(f);
    }
    Ok(out)
}

/// Image encoder settings for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEncoder {
    pub encoder_id: String,
    pub energy_per_sample_j: f64,
    #[serde(default)]
    pub latency_ms: f64,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_localisations: usize,
    pub n_subgroups: usize,
    /// Empty means uniform.
    pub class_prior: Vec<f64>,
    pub lite_noise: f64,
    pub heavy_noise: f64,
    pub age_range: [f64; 2],
    /// Std of the per-class center coordinates.
    pub center_scale: f64,
    pub lite: SynthEncoder,
    pub heavy: SynthEncoder,
    /// Subgroup index whose lite embeddings use `noisy_lite_noise` instead.
    pub noisy_subgroup: Option<usize>,
    pub noisy_lite_noise: f64,
    pub missing_age_frac: f64,
    pub missing_loc_frac: f64,
    pub taxonomy: Option<TaxonomySpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 1000,
            n_classes: 4,
            n_localisations: 6,
            n_subgroups: 3,
            class_prior: Vec::new(),
            lite_noise: 1.5,
            heavy_noise: 0.5,
            age_range: [20.0, 85.0],
            center_scale: 1.0,
            lite: SynthEncoder {
                encoder_id: "MobileNetV2".into(),
                energy_per_sample_j: 0.178,
                latency_ms: 130.49,
                embedding_dim: 16,
            },
            heavy: SynthEncoder {
                encoder_id: "ResNet50".into(),
                energy_per_sample_j: 0.392,
                latency_ms: 203.47,
                embedding_dim: 24,
            },
            noisy_subgroup: None,
            noisy_lite_noise: 3.0,
            missing_age_frac: 0.0,
            missing_loc_frac: 0.0,
            taxonomy: None,
        }
    }
}

impl SynthSpec {
    fn taxonomy(&self) -> Result<ClassTaxonomy, IngestError> {
        if let Some(spec) = &self.taxonomy {
            let t = ClassTaxonomy::from_spec(spec)?;
            if t.n_classes() != self.n_classes {
                return Err(IngestError::InvalidSpec(format!(
                    "taxonomy has {} classes but n_classes is {}",
                    t.n_classes(),
                    self.n_classes
                )));
            }
            return Ok(t);
        }
        let c = self.n_classes;
        let n_danger = (c / 2).max(1);
        let danger: std::collections::BTreeSet<usize> = (c - n_danger..c).collect();
        Ok(ClassTaxonomy::new(
            (0..c).map(|i| format!("class_{i}")).collect(),
            (0..c - n_danger).collect(),
            danger.clone(),
            danger,
        )?)
    }

    pub fn validate(&self) -> Result<ClassTaxonomy, IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidSpec(m.into()));
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.n_localisations == 0 || self.n_subgroups == 0 {
            return bad("n_localisations and n_subgroups must be >= 1");
        }
        if !self.class_prior.is_empty() {
            if self.class_prior.len() != self.n_classes {
                return bad("class_prior length must equal n_classes");
            }
            PredictiveDistribution::validate(&self.class_prior, self.n_classes)
                .map_err(|e| IngestError::InvalidSpec(format!("class_prior: {e}")))?;
        }
        let noises = [self.lite_noise, self.heavy_noise, self.noisy_lite_noise, self.center_scale];
        if noises.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise levels and center_scale must be finite and >= 0");
        }
        if self.heavy_noise > self.lite_noise {
            return bad("heavy_noise must not exceed lite_noise");
        }
        let [lo, hi] = self.age_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad("age_range must satisfy 0 <= lo <= hi");
        }
        if self.lite.embedding_dim == 0 || self.heavy.embedding_dim == 0 {
            return bad("embedding dims must be >= 1");
        }
        if self.lite.encoder_id == self.heavy.encoder_id {
            return bad("lite and heavy encoder ids must differ");
        }
        for e in [&self.lite, &self.heavy] {
            if !e.energy_per_sample_j.is_finite() || e.energy_per_sample_j < 0.0 {
                return bad("encoder energy must be finite and >= 0");
            }
        }
        if let Some(g) = self.noisy_subgroup {
            if g >= self.n_subgroups {
                return bad("noisy_subgroup out of range");
            }
        }
        for f in [self.missing_age_frac, self.missing_loc_frac] {
            if !(0.0..=1.0).contains(&f) {
                return bad("missing fractions must lie in [0, 1]");
            }
        }
        self.taxonomy()
    }
}

fn categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng)).collect()
}

/// Class probabilities from squared distances to the class centers:
/// `softmax(-||h - mu_c||^2 / dim)`.
fn similarity_probs(h: &[f64], centers: &[Vec<f64>]) -> PredictiveDistribution {
    let dim = h.len() as f64;
    let logits: Vec<f64> =
        centers.iter().map(|mu| -mu.iter().zip(h).map(|(m, x)| (x - m).powi(2)).sum::<f64>() / dim).collect();
    PredictiveDistribution::softmax(&logits)
}

/// Deterministic synthetic dataset.
///
/// Embeddings are class centers plus isotropic Gaussian noise per tier.
/// Malignant cases favour higher-numbered localisations (weight `(l+1)^2`)
/// while other cases spread uniformly, so per-site malignancy is non-uniform.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, IngestError> {
    let taxonomy = spec.validate()?;
    let c = spec.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prior = if spec.class_prior.is_empty() { vec![1.0 / c as f64; c] } else { spec.class_prior.clone() };

    let lite_centers: Vec<Vec<f64>> =
        (0..c).map(|_| gaussian_vec(&mut rng, spec.lite.embedding_dim, spec.center_scale)).collect();
    let heavy_centers: Vec<Vec<f64>> =
        (0..c).map(|_| gaussian_vec(&mut rng, spec.heavy.embedding_dim, spec.center_scale)).collect();
    let mal_loc_weights: Vec<f64> = (0..spec.n_localisations).map(|l| ((l + 1) * (l + 1)) as f64).collect();
    let ben_loc_weights = vec![1.0; spec.n_localisations];

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut lite_emb = Vec::with_capacity(spec.n_samples);
    let mut heavy_emb = Vec::with_capacity(spec.n_samples);
    let mut lite_probs = Vec::with_capacity(spec.n_samples);
    let mut heavy_probs = Vec::with_capacity(spec.n_samples);
    let [lo, hi] = spec.age_range;
    for i in 0..spec.n_samples {
        let label = categorical(&mut rng, &prior);
        let weights = if taxonomy.is_malignant(label) { &mal_loc_weights } else { &ben_loc_weights };
        let loc = categorical(&mut rng, weights);
        let age = lo + (hi - lo) * rng.random::<f64>();
        let group = rng.random_range(0..spec.n_subgroups);
        let age_missing = rng.random::<f64>() < spec.missing_age_frac;
        let loc_missing = rng.random::<f64>() < spec.missing_loc_frac;
        let lite_sigma = if spec.noisy_subgroup == Some(group) { spec.noisy_lite_noise } else { spec.lite_noise };
        let lite: Vec<f64> = gaussian_vec(&mut rng, spec.lite.embedding_dim, lite_sigma)
            .iter()
            .zip(&lite_centers[label])
            .map(|(n, m)| m + n)
            .collect();
        let heavy: Vec<f64> = gaussian_vec(&mut rng, spec.heavy.embedding_dim, spec.heavy_noise)
            .iter()
            .zip(&heavy_centers[label])
            .map(|(n, m)| m + n)
            .collect();
        lite_probs.push(similarity_probs(&lite, &lite_centers));
        heavy_probs.push(similarity_probs(&heavy, &heavy_centers));
        lite_emb.push(lite);
        heavy_emb.push(heavy);
        samples.push(Sample {
            id: format!("s{i:05}"),
            label,
            age: (!age_missing).then_some(age),
            localisation: (!loc_missing).then(|| format!("loc_{loc}")),
            subgroup: Some(format!("g{group}")),
            fold: None,
        });
    }

    let profile = |e: &SynthEncoder, tier| EncoderProfile {
        encoder_id: e.encoder_id.clone(),
        tier,
        energy_per_sample_j: e.energy_per_sample_j,
        latency_ms: e.latency_ms,
        embedding_dim: e.embedding_dim,
    };
    let mut encoders = BTreeMap::new();
    encoders.insert(
        spec.lite.encoder_id.clone(),
        EncoderTable { probabilities: Some(lite_probs), embeddings: Some(lite_emb) },
    );
    encoders.insert(
        spec.heavy.encoder_id.clone(),
        EncoderTable { probabilities: Some(heavy_probs), embeddings: Some(heavy_emb) },
    );
    let d = Dataset {
        taxonomy,
        samples,
        encoders,
        profiles: vec![profile(&spec.lite, Tier::Lite), profile(&spec.heavy, Tier::Heavy)],
    };
    d.validate()?;
    Ok(d)
}
