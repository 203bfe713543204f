//! Server-side fusion: a tabular featuriser and linear-softmax heads over
//! `[image embedding || tabular embedding]`, trained per fold by full-batch
//! gradient descent on cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Embedding, ModelError, PredictiveDistribution, Sample};
use crate::risk::{self, RiskModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("training set has fewer than two classes")]
    DegenerateTrainingSet,
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("head expects embeddings from {expected:?}, got {got:?}")]
    EncoderMismatch { expected: String, got: String },
    #[error("{0} training rows but {1} labels")]
    RowMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which image representation a head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Lite,
    Heavy,
    /// Lite and heavy embeddings concatenated.
    Alongside,
}

impl std::fmt::Display for Pathway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pathway::Lite => "lite",
            Pathway::Heavy => "heavy",
            Pathway::Alongside => "alongside",
        })
    }
}

pub const TABULAR_ENCODER_ID: &str = "tabular";

/// Normalised age followed by a one-hot localisation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularFeaturiser {
    pub vocabulary: Vec<String>,
    pub a_min: f64,
    pub a_max: f64,
}

impl TabularFeaturiser {
    /// Vocabulary comes from the training rows; age bounds from the fold's risk model.
    pub fn fit(train: &[Sample], risk_model: &RiskModel) -> Self {
        let mut vocabulary: Vec<String> = train.iter().filter_map(|s| s.localisation.clone()).collect();
        vocabulary.sort();
        vocabulary.dedup();
        Self { vocabulary, a_min: risk_model.a_min, a_max: risk_model.a_max }
    }

    pub fn dim(&self) -> usize {
        self.vocabulary.len() + 1
    }

    fn age_value(&self, age: Option<f64>) -> f64 {
        match age {
            None => risk::MISSING_AGE_SCORE,
            Some(_) if self.a_max <= self.a_min => 0.5,
            Some(a) => ((a - self.a_min) / (self.a_max - self.a_min)).clamp(0.0, 1.0),
        }
    }
}

pub fn featurise_tabular(s: &Sample, f: &TabularFeaturiser) -> Embedding {
    let mut values = vec![0.0; f.dim()];
    values[0] = f.age_value(s.age);
    if let Some(i) = s.localisation.as_deref().and_then(|l| f.vocabulary.binary_search_by(|v| v.as_str().cmp(l)).ok()) {
        values[i + 1] = 1.0;
    }
    Embedding { encoder_id: TABULAR_ENCODER_ID.into(), values }
}

/// Concatenated `lite || heavy` representation for the alongside pathway.
pub fn concat_embeddings(lite: &Embedding, heavy: &Embedding) -> Embedding {
    let mut values = lite.values.clone();
    values.extend_from_slice(&heavy.values);
    Embedding { encoder_id: alongside_id(&lite.encoder_id, &heavy.encoder_id), values }
}

pub fn alongside_id(lite: &str, heavy: &str) -> String {
    format!("{lite}+{heavy}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Initial step size; halved whenever a step would raise the loss.
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 1.0, l2: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub pathway: Pathway,
    pub image_encoder: String,
    pub image_dim: usize,
    pub tab_dim: usize,
    pub n_classes: usize,
    /// Row-major `n_classes x (image_dim + tab_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Per-feature standardisation fitted on the training rows.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub fold: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl FusionHead {
    pub fn input_dim(&self) -> usize {
        self.image_dim + self.tab_dim
    }

    /// Logits for an already concatenated raw input row.
    fn logits(&self, input: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let z: Vec<f64> =
            input.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((x, m), s)| (x - m) / s).collect();
        (0..self.n_classes)
            .map(|c| {
                let w = &self.weights[c * d..(c + 1) * d];
                self.bias[c] + w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// Softmax of the head's logits over `[h_img || h_tab]`.
pub fn fuse_predict(
    h_img: &Embedding,
    h_tab: &Embedding,
    head: &FusionHead,
) -> Result<PredictiveDistribution, FusionError> {
    if h_img.dim() != head.image_dim {
        return Err(FusionError::DimensionMismatch {
            what: "image embedding",
            expected: head.image_dim,
            got: h_img.dim(),
        });
    }
    if h_img.encoder_id != head.image_encoder {
        return Err(FusionError::EncoderMismatch {
            expected: head.image_encoder.clone(),
            got: h_img.encoder_id.clone(),
        });
    }
    if h_tab.dim() != head.tab_dim {
        return Err(FusionError::DimensionMismatch {
            what: "tabular embedding",
            expected: head.tab_dim,
            got: h_tab.dim(),
        });
    }
    let mut input = h_img.values.clone();
    input.extend_from_slice(&h_tab.values);
    Ok(PredictiveDistribution::softmax(&head.logits(&input)))
}

/// Mean cross-entropy plus `l2 / 2 * ||W||^2` for a linear-softmax model, and
/// its gradient with respect to the row-major weights and the bias.
///
/// `x` is row-major `n x d`.
pub fn softmax_regression_loss(
    weights: &[f64],
    bias: &[f64],
    x: &[f64],
    labels: &[usize],
    n_classes: usize,
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let d = x.len().checked_div(n).unwrap_or(0);
    let mut grad_w = vec![0.0; n_classes * d];
    let mut grad_b = vec![0.0; n_classes];
    let mut loss = 0.0;
    let mut logits = vec![0.0; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        let row = &x[i * d..(i + 1) * d];
        for c in 0..n_classes {
            let w = &weights[c * d..(c + 1) * d];
            logits[c] = bias[c] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        for c in 0..n_classes {
            let err = (logits[c] - lse).exp() - f64::from(u8::from(c == y));
            grad_b[c] += err;
            let g = &mut grad_w[c * d..(c + 1) * d];
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += err * xj;
            }
        }
    }
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    loss *= inv;
    grad_b.iter_mut().for_each(|g| *g *= inv);
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g * inv + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad_w, grad_b)
}

/// A trained head with its per-epoch training loss (initial loss first).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: FusionHead,
    pub loss_history: Vec<f64>,
}

/// Rows for one head: image embedding and tabular embedding per sample.
pub struct HeadData<'a> {
    pub image: &'a [Vec<f64>],
    pub tabular: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

#[allow(clippy::too_many_arguments)]
pub fn train_head(
    pathway: Pathway,
    image_encoder: &str,
    data: &HeadData<'_>,
    n_classes: usize,
    fold: Option<usize>,
    seed: u64,
    cfg: &TrainingConfig,
) -> Result<TrainedHead, FusionError> {
    let n = data.labels.len();
    if data.image.len() != n || data.tabular.len() != n {
        return Err(FusionError::RowMismatch(data.image.len().min(data.tabular.len()), n));
    }
    let mut present = vec![false; n_classes];
    for &y in data.labels {
        if y >= n_classes {
            return Err(FusionError::DimensionMismatch { what: "label", expected: n_classes, got: y });
        }
        present[y] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(FusionError::DegenerateTrainingSet);
    }
    let image_dim = data.image[0].len();
    let tab_dim = data.tabular[0].len();
    let d = image_dim + tab_dim;
    let mut x = Vec::with_capacity(n * d);
    for (img, tab) in data.image.iter().zip(data.tabular) {
        if img.len() != image_dim {
            return Err(FusionError::DimensionMismatch {
                what: "image embedding",
                expected: image_dim,
                got: img.len(),
            });
        }
        if tab.len() != tab_dim {
            return Err(FusionError::DimensionMismatch {
                what: "tabular embedding",
                expected: tab_dim,
                got: tab.len(),
            });
        }
        x.extend_from_slice(img);
        x.extend_from_slice(tab);
    }

    let (feature_mean, feature_scale) = standardisation(&x, n, d);
    for row in x.chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(&feature_mean).zip(&feature_scale) {
            *v = (*v - m) / s;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(head_seed(seed, pathway, fold));
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut weights: Vec<f64> = (0..n_classes * d).map(|_| init.sample(&mut rng)).collect();
    let mut bias = vec![0.0; n_classes];

    let (mut loss, mut gw, mut gb) = softmax_regression_loss(&weights, &bias, &x, data.labels, n_classes, cfg.l2);
    let mut history = vec![loss];
    let mut lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        let mut accepted = false;
        for _ in 0..40 {
            let w2: Vec<f64> = weights.iter().zip(&gw).map(|(w, g)| w - lr * g).collect();
            let b2: Vec<f64> = bias.iter().zip(&gb).map(|(b, g)| b - lr * g).collect();
            let (l2_loss, gw2, gb2) = softmax_regression_loss(&w2, &b2, &x, data.labels, n_classes, cfg.l2);
            if l2_loss <= loss {
                weights = w2;
                bias = b2;
                loss = l2_loss;
                gw = gw2;
                gb = gb2;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        history.push(loss);
        if !accepted {
            break;
        }
    }

    Ok(TrainedHead {
        head: FusionHead {
            pathway,
            image_encoder: image_encoder.to_string(),
            image_dim,
            tab_dim,
            n_classes,
            weights,
            bias,
            feature_mean,
            feature_scale,
            fold,
            seed,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            l2: cfg.l2,
        },
        loss_history: history,
    })
}

fn standardisation(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn head_seed(seed: u64, pathway: Pathway, fold: Option<usize>) -> u64 {
    let p = match pathway {
        Pathway::Lite => 1,
        Pathway::Heavy => 2,
        Pathway::Alongside => 3,
    };
    let f = fold.map_or(0, |f| f as u64 + 1);
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (p << 32) ^ f
}

/// All heads for one fold plus the featuriser they share.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHeads {
    pub featuriser: TabularFeaturiser,
    pub lite: TrainedHead,
    pub heavy: TrainedHead,
    pub alongside: Option<TrainedHead>,
}

/// Training rows for one fold, aligned by position with `samples`.
pub struct FusionTrainSet<'a> {
    pub samples: &'a [Sample],
    pub lite_encoder: &'a str,
    pub lite: &'a [Vec<f64>],
    pub heavy_encoder: &'a str,
    pub heavy: &'a [Vec<f64>],
}

pub fn train_fusion_heads(
    train: &FusionTrainSet<'_>,
    risk_model: &RiskModel,
    n_classes: usize,
    fold: Option<usize>,
    seed: u64,
    cfg: &TrainingConfig,
    with_alongside: bool,
) -> Result<FusionHeads, FusionError> {
    let featuriser = TabularFeaturiser::fit(train.samples, risk_model);
    let tabular: Vec<Vec<f64>> = train.samples.iter().map(|s| featurise_tabular(s, &featuriser).values).collect();
    let labels: Vec<usize> = train.samples.iter().map(|s| s.label).collect();
    let fit = |pathway, encoder: &str, image: &[Vec<f64>]| {
        train_head(
            pathway,
            encoder,
            &HeadData { image, tabular: &tabular, labels: &labels },
            n_classes,
            fold,
            seed,
            cfg,
        )
    };
    let lite = fit(Pathway::Lite, train.lite_encoder, train.lite)?;
    let heavy = fit(Pathway::Heavy, train.heavy_encoder, train.heavy)?;
    let alongside = if with_alongside {
        let both: Vec<Vec<f64>> =
            train.lite.iter().zip(train.heavy).map(|(l, h)| l.iter().chain(h).copied().collect()).collect();
        let id = alongside_id(train.lite_encoder, train.heavy_encoder);
        Some(fit(Pathway::Alongside, &id, &both)?)
    } else {
        None
    };
    Ok(FusionHeads { featuriser, lite, heavy, alongside })
}
