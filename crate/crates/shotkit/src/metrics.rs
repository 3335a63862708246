//! Multi-shot evaluation metrics: transition confidence from detector
//! logits, transition-type accuracy and distribution, cross-shot
//! consistency aggregation, and the Gaussian Fréchet distance between
//! feature distributions.
//!
//! Every operation starts from ingested numbers (logits, similarity
//! scores, feature vectors); the upstream detector and embedding models
//! are out of scope. All reductions run in a fixed order, so results are
//! reproducible to the bit for identical inputs.

use crate::tensor::{read_tensor_file, write_tensor_file, Tensor, TensorError};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

/// Eigenvalues below this fraction of the largest eigenvalue are treated
/// as exact zeros before the square root. Roundoff perturbs a true zero
/// eigenvalue to roughly machine epsilon times the spectral radius, and
/// the square root amplifies that to its own square root, so without the
/// floor a rank-deficient spectrum yields O(1e-8) noise in the distance.
pub const PSD_CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} must be nonempty")]
    EmptyInput(&'static str),
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature sets have dimensions {a} and {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("need at least 2 samples for covariance, got {n}")]
    TooFewSamples { n: usize },
    #[error("semantic feature vector has zero norm")]
    ZeroNorm,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// --- transition confidence ------------------------------------------------

/// Per-frame transition logits for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionLikelihood {
    pub d: Vec<f64>,
}

impl TransitionLikelihood {
    pub fn new(d: Vec<f64>) -> Result<Self, MetricsError> {
        if d.is_empty() {
            return Err(MetricsError::EmptyInput("logit sequence"));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "logits" });
        }
        Ok(Self { d })
    }
}

/// One line of a detector-output file: a clip id with its logit sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub clip_id: String,
    pub d: Vec<f64>,
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maximum over frames of the sigmoid of each logit, a score in (0, 1).
pub fn transition_confidence(d: &TransitionLikelihood) -> Result<f64, MetricsError> {
    if d.d.is_empty() {
        return Err(MetricsError::EmptyInput("logit sequence"));
    }
    if d.d.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite { what: "logits" });
    }
    Ok(d.d.iter().copied().map(sigmoid).fold(f64::MIN, f64::max))
}

// --- transition types -----------------------------------------------------

/// Ground-truth transition categories. The evaluation set never labels a
/// clip as having no transition, so that category exists only on the
/// prediction side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionType {
    ShotReverseShot,
    CutIn,
    CutOut,
    MultiAngle,
}

impl TransitionType {
    pub fn label(self) -> &'static str {
        match self {
            Self::ShotReverseShot => "shot_reverse_shot",
            Self::CutIn => "cut_in",
            Self::CutOut => "cut_out",
            Self::MultiAngle => "multi_angle",
        }
    }
}

/// Predicted categories: the four transition types plus `no_transition`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictedType {
    ShotReverseShot,
    CutIn,
    CutOut,
    MultiAngle,
    NoTransition,
}

impl PredictedType {
    pub fn label(self) -> &'static str {
        match self {
            Self::ShotReverseShot => "shot_reverse_shot",
            Self::CutIn => "cut_in",
            Self::CutOut => "cut_out",
            Self::MultiAngle => "multi_angle",
            Self::NoTransition => "no_transition",
        }
    }

    /// A `no_transition` prediction mismatches every ground-truth type.
    pub fn matches(self, truth: TransitionType) -> bool {
        self.label() == truth.label()
    }
}

/// Fixed reporting order for prediction buckets.
pub const PREDICTED_TYPE_ORDER: [PredictedType; 5] = [
    PredictedType::CutIn,
    PredictedType::CutOut,
    PredictedType::ShotReverseShot,
    PredictedType::MultiAngle,
    PredictedType::NoTransition,
];

/// One prediction against its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedPrediction {
    pub clip_id: String,
    pub predicted_type: PredictedType,
    pub ground_truth_type: TransitionType,
}

/// Fraction of predictions matching their ground truth.
pub fn type_accuracy(preds: &[TypedPrediction]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput("predictions"));
    }
    let correct = preds
        .iter()
        .filter(|p| p.predicted_type.matches(p.ground_truth_type))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// One bucket of the predicted-type histogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeBucket {
    pub transition_type: &'static str,
    pub count: usize,
    pub fraction: f64,
}

/// Histogram over predicted categories in the fixed reporting order.
/// Counts always sum to the number of predictions.
pub fn type_distribution(preds: &[TypedPrediction]) -> Result<Vec<TypeBucket>, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput("predictions"));
    }
    let n = preds.len();
    Ok(PREDICTED_TYPE_ORDER
        .iter()
        .map(|&t| {
            let count = preds.iter().filter(|p| p.predicted_type == t).count();
            TypeBucket {
                transition_type: t.label(),
                count,
                fraction: count as f64 / n as f64,
            }
        })
        .collect())
}

// --- cross-shot consistency -----------------------------------------------

/// Inputs for one clip's consistency aggregation: a shot-level semantic
/// embedding per shot and per-adjacent-pair subject and background
/// similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyInput {
    pub semantic_a: Vec<f64>,
    pub semantic_b: Vec<f64>,
    pub subject_similarities: Vec<f64>,
    pub background_similarities: Vec<f64>,
}

/// Semantic cosine plus averaged visual similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyScores {
    pub semantic: f64,
    pub visual: f64,
}

/// Semantic score: cosine of the two shot embeddings. Visual score: mean
/// over adjacent-shot pairs of the equal-weight average of subject and
/// background similarity. Equal weighting is a fixed, documented choice.
pub fn consistency_scores(input: &ConsistencyInput) -> Result<ConsistencyScores, MetricsError> {
    let a = &input.semantic_a;
    let b = &input.semantic_b;
    if a.is_empty() {
        return Err(MetricsError::EmptyInput("semantic vectors"));
    }
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            what: "semantic_b",
            expected: a.len(),
            got: b.len(),
        });
    }
    if input.subject_similarities.is_empty() {
        return Err(MetricsError::EmptyInput("similarity sequences"));
    }
    if input.subject_similarities.len() != input.background_similarities.len() {
        return Err(MetricsError::LengthMismatch {
            what: "background_similarities",
            expected: input.subject_similarities.len(),
            got: input.background_similarities.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    let visual_sum: f64 = input
        .subject_similarities
        .iter()
        .zip(&input.background_similarities)
        .map(|(s, g)| (s + g) / 2.0)
        .sum();
    Ok(ConsistencyScores {
        semantic: dot / (na * nb),
        visual: visual_sum / input.subject_similarities.len() as f64,
    })
}

// --- Fréchet distance -----------------------------------------------------

/// A bag of feature vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        if n == 0 || dim == 0 {
            return Err(MetricsError::EmptyInput("feature set"));
        }
        if data.len() != n * dim {
            return Err(MetricsError::LengthMismatch {
                what: "feature data",
                expected: n * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "features" });
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, MetricsError> {
        if t.shape().len() != 2 {
            return Err(MetricsError::LengthMismatch {
                what: "tensor rank",
                expected: 2,
                got: t.shape().len(),
            });
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.dim], self.data.clone()).expect("consistent by construction")
    }

    /// Read from a tensor container holding exactly one rank-2 tensor.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, MetricsError> {
        let tensors = read_tensor_file(path)?;
        if tensors.len() != 1 {
            return Err(MetricsError::LengthMismatch {
                what: "tensors in file",
                expected: 1,
                got: tensors.len(),
            });
        }
        Self::from_tensor(&tensors[0])
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), MetricsError> {
        write_tensor_file(path, &[self.to_tensor()])?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for i in 0..self.n {
            for (m, v) in mu.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= self.n as f64;
        }
        mu
    }

    /// Unbiased sample covariance.
    fn covariance(&self, mu: &[f64]) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.n {
            let row = self.row(i);
            for p in 0..self.dim {
                let dp = row[p] - mu[p];
                for q in 0..self.dim {
                    c[(p, q)] += dp * (row[q] - mu[q]);
                }
            }
        }
        c / (self.n as f64 - 1.0)
    }
}

/// Square roots of an eigenvalue list, with everything under the relative
/// floor flattened to zero.
fn clamped_roots(eigenvalues: &[f64]) -> Vec<f64> {
    let largest = eigenvalues.iter().fold(0.0, |acc: f64, &l| acc.max(l));
    let floor = largest * PSD_CLAMP_TOLERANCE;
    eigenvalues
        .iter()
        .map(|&l| if l <= floor { 0.0 } else { l.sqrt() })
        .collect()
}

/// Symmetric PSD square root via eigendecomposition, with eigenvalues at
/// or under the relative floor clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let dim = m.nrows();
    let roots = clamped_roots(eig.eigenvalues.as_slice());
    let mut out = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let v = eig.eigenvectors.column(k);
        for p in 0..dim {
            for q in 0..dim {
                out[(p, q)] += roots[k] * v[p] * v[q];
            }
        }
    }
    out
}

/// Gaussian Fréchet distance between two feature distributions:
/// the squared mean gap plus tr(Ca + Cb - 2(Ca Cb)^(1/2)).
///
/// The cross term comes from the eigenvalues of the symmetrized product
/// sqrt(Ca) Cb sqrt(Ca), clamped under [`PSD_CLAMP_TOLERANCE`] so noise on
/// the PSD boundary cannot push the result negative or inflate it.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.dim != b.dim {
        return Err(MetricsError::DimMismatch { a: a.dim, b: b.dim });
    }
    if a.n < 2 {
        return Err(MetricsError::TooFewSamples { n: a.n });
    }
    if b.n < 2 {
        return Err(MetricsError::TooFewSamples { n: b.n });
    }
    let mu_a = a.mean();
    let mu_b = b.mean();
    let ca = a.covariance(&mu_a);
    let cb = b.covariance(&mu_b);
    let sa = psd_sqrt(&ca);
    let prod = &sa * &cb * &sa;
    let sym = (&prod + prod.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = clamped_roots(eig.eigenvalues.as_slice());
    roots.sort_unstable_by(f64::total_cmp);
    let cross: f64 = roots.iter().sum();
    let mean_gap: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(mean_gap + ca.trace() + cb.trace() - 2.0 * cross)
}

// --- file ingestion -------------------------------------------------------

fn read_jsonl<T: serde::de::DeserializeOwned, P: AsRef<Path>>(
    path: P,
) -> Result<Vec<T>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Load detector logit sequences, one clip per line.
pub fn load_logits<P: AsRef<Path>>(path: P) -> Result<Vec<LogitRecord>, MetricsError> {
    read_jsonl(path)
}

/// Load prediction/ground-truth pairs, one clip per line.
pub fn load_predictions<P: AsRef<Path>>(path: P) -> Result<Vec<TypedPrediction>, MetricsError> {
    read_jsonl(path)
}

/// Load one clip's consistency inputs from a JSON document.
pub fn load_consistency_input<P: AsRef<Path>>(path: P) -> Result<ConsistencyInput, MetricsError> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| MetricsError::Parse {
        line: 0,
        message: e.to_string(),
    })
}
