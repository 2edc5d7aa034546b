//! Linear probe: logistic regression on frozen document embeddings.
//!
//! Embeddings come from a provider (a CSV on disk or an HTTP endpoint, see
//! [`http`]); the probe itself is a deterministic full-batch optimizer with
//! backtracking line search, so the fitted model depends only on the data,
//! hyperparameters, and seed. Training rows are accumulated in id order,
//! which makes the fit bit-identical under any input row order.

pub mod http;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, StreamKind};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("cannot read embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    WidthMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("batch {batch}: {reason}")]
    Protocol { batch: usize, reason: String },
    #[error("train fraction must be inside (0, 1), got {0}")]
    BadFraction(f64),
    #[error("split needs at least 2 documents, got {0}")]
    TooFewDocuments(usize),
    #[error("train fraction {fraction} leaves the {side} side empty for n={n}")]
    EmptySide {
        fraction: f64,
        side: &'static str,
        n: usize,
    },
    #[error("no label for document {0:?}")]
    MissingLabel(String),
    #[error("document {0:?} has no split assignment")]
    MissingSplit(String),
    #[error("training set contains a single class")]
    DegenerateLabels,
    #[error("embedding width {found} does not match model width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("model file error: {0}")]
    ModelFile(String),
}

/// Where a set of document embeddings came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderTag {
    File,
    Http,
}

/// Document embeddings, one row per id, constant width.
#[derive(Debug, Clone)]
pub struct DocEmbeddingSet {
    ids: Vec<String>,
    matrix: Vec<f64>,
    dim: usize,
    pub provider: ProviderTag,
    pub model: String,
}

impl DocEmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        provider: ProviderTag,
        model: String,
    ) -> Result<Self, ProbeError> {
        assert_eq!(ids.len(), rows.len(), "ids and rows must align");
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(ProbeError::DuplicateId(id.clone()));
            }
        }
        let mut matrix = Vec::with_capacity(ids.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(ProbeError::WidthMismatch {
                    line: i + 2,
                    expected: dim,
                    found: row.len(),
                });
            }
            matrix.extend_from_slice(row);
        }
        Ok(DocEmbeddingSet {
            ids,
            matrix,
            dim,
            provider,
            model,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|i| i == id).map(|i| self.row(i))
    }
}

/// Read an embeddings CSV with header `id,v1,…,vD`. Row order is kept.
pub fn load_embeddings_csv(path: &Path) -> Result<DocEmbeddingSet, ProbeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(ProbeError::Parse {
        line: 1,
        reason: "file is empty".into(),
    })??;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"id") || columns.len() < 2 {
        return Err(ProbeError::Parse {
            line: 1,
            reason: format!("expected header \"id,v1,…,vD\", found {header:?}"),
        });
    }
    let dim = columns.len() - 1;
    for (j, name) in columns[1..].iter().enumerate() {
        if *name != format!("v{}", j + 1) {
            return Err(ProbeError::Parse {
                line: 1,
                reason: format!("column {} should be v{}, found {name:?}", j + 2, j + 1),
            });
        }
    }

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| ProbeError::Parse {
                    line: line_no,
                    reason: format!("bad value {f:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(ProbeError::WidthMismatch {
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        ids.push(id);
        rows.push(values);
    }
    DocEmbeddingSet::new(ids, rows, ProviderTag::File, String::new())
}

/// Write an embeddings CSV. Values print as the shortest decimal that
/// parses back to the same f64.
pub fn save_embeddings_csv(set: &DocEmbeddingSet, path: &Path) -> Result<(), ProbeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id")?;
    for j in 1..=set.dim() {
        write!(w, ",v{j}")?;
    }
    writeln!(w)?;
    for (i, id) in set.ids().iter().enumerate() {
        write!(w, "{id}")?;
        for v in set.row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Which side of the split a document landed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

/// A reproducible train/test partition: shuffle the id-sorted list with a
/// seeded stream, cut at `round(n · fraction)`.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    assignment: BTreeMap<String, Side>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl SplitAssignment {
    pub fn side_of(&self, id: &str) -> Option<Side> {
        self.assignment.get(id).copied()
    }

    pub fn ids_on(&self, side: Side) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == side)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

pub fn split(
    ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, ProbeError> {
    if !(0.0..=1.0).contains(&train_fraction) || train_fraction == 0.0 || train_fraction == 1.0 {
        return Err(ProbeError::BadFraction(train_fraction));
    }
    let n = ids.len();
    if n < 2 {
        return Err(ProbeError::TooFewDocuments(n));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    let mut rng = substream(seed, StreamKind::Split, 0, 0);
    sorted.shuffle(&mut rng);
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 {
        return Err(ProbeError::EmptySide {
            fraction: train_fraction,
            side: "train",
            n,
        });
    }
    if n_train == n {
        return Err(ProbeError::EmptySide {
            fraction: train_fraction,
            side: "test",
            n,
        });
    }
    let assignment = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, if i < n_train { Side::Train } else { Side::Test }))
        .collect();
    Ok(SplitAssignment {
        assignment,
        seed,
        train_fraction,
    })
}

/// Probe hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// L2 penalty λ on the weights (the bias is not penalized).
    pub l2: f64,
    pub max_iterations: usize,
    /// Stop when the gradient ∞-norm drops below this.
    pub tolerance: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            l2: 1e-4,
            max_iterations: 500,
            tolerance: 1e-6,
        }
    }
}

/// Why training stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientConverged,
    MaxIterations,
    /// Line search could not decrease the loss any further.
    Stalled,
}

/// Per-side confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }
}

/// Accuracy and confusion counts for both sides of the split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_confusion: Confusion,
    pub test_confusion: Confusion,
}

/// Everything recorded alongside the fitted parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub train_fraction: f64,
    pub embedding_model: String,
    pub n_train: usize,
    pub n_iterations: usize,
    pub stop_reason: StopReason,
    pub final_loss: f64,
    pub metrics: EvalMetrics,
}

/// The fitted probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub hyperparameters: Hyperparameters,
    pub metadata: TrainingMetadata,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

pub fn save_model(model: &ProbeModel, path: &Path) -> Result<(), ProbeError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, model)
        .map_err(|e| ProbeError::ModelFile(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ProbeModel, ProbeError> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| ProbeError::ModelFile(e.to_string()))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean logistic loss plus (λ/2)‖w‖², and its gradient, over the given
/// rows. Exposed so the gradient can be checked against finite differences.
pub fn loss_and_gradient(
    rows: &[&[f64]],
    labels: &[u8],
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let d = weights.len();
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for (x, y) in rows.iter().zip(labels) {
        let y = *y as f64;
        let s: f64 = x.iter().zip(weights).map(|(xi, wi)| xi * wi).sum::<f64>() + bias;
        loss += log1p_exp(s) - y * s;
        let residual = sigmoid(s) - y;
        for (g, xi) in grad_w.iter_mut().zip(*x) {
            *g += residual * xi;
        }
        grad_b += residual;
    }
    loss /= n;
    grad_b /= n;
    let mut penalty = 0.0;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
        penalty += w * w;
    }
    (loss + 0.5 * l2 * penalty, grad_w, grad_b)
}

/// Fit the probe on the training side of `split` by full-batch steepest
/// descent with Armijo backtracking. Rows are visited in ascending id
/// order, so the result does not depend on input ordering.
pub fn train_probe(
    embeddings: &DocEmbeddingSet,
    labels: &HashMap<String, u8>,
    split: &SplitAssignment,
    hyper: Hyperparameters,
) -> Result<ProbeModel, ProbeError> {
    let mut train_ids: Vec<&String> = embeddings
        .ids()
        .iter()
        .filter(|id| split.side_of(id) == Some(Side::Train))
        .collect();
    train_ids.sort();

    let mut rows: Vec<&[f64]> = Vec::with_capacity(train_ids.len());
    let mut y: Vec<u8> = Vec::with_capacity(train_ids.len());
    let index: HashMap<&String, usize> = embeddings
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    for id in &train_ids {
        let label = labels
            .get(*id)
            .copied()
            .ok_or_else(|| ProbeError::MissingLabel((*id).clone()))?;
        rows.push(embeddings.row(index[*id]));
        y.push(label);
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(ProbeError::DegenerateLabels);
    }

    let d = embeddings.dim();
    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    let (mut loss, mut grad_w, mut grad_b) = loss_and_gradient(&rows, &y, &weights, bias, hyper.l2);

    let mut stop_reason = StopReason::MaxIterations;
    let mut n_iterations = 0;
    for iter in 0..hyper.max_iterations {
        n_iterations = iter;
        let grad_inf = grad_w
            .iter()
            .chain(std::iter::once(&grad_b))
            .fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < hyper.tolerance {
            stop_reason = StopReason::GradientConverged;
            break;
        }

        // Armijo backtracking along the steepest-descent direction.
        let grad_sq: f64 = grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - step * g)
                .collect();
            let trial_b = bias - step * grad_b;
            let (trial_loss, trial_gw, trial_gb) =
                loss_and_gradient(&rows, &y, &trial_w, trial_b, hyper.l2);
            if trial_loss <= loss - 1e-4 * step * grad_sq {
                debug_assert!(trial_loss <= loss, "line search increased the loss");
                weights = trial_w;
                bias = trial_b;
                loss = trial_loss;
                grad_w = trial_gw;
                grad_b = trial_gb;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stop_reason = StopReason::Stalled;
            break;
        }
        n_iterations = iter + 1;
    }

    Ok(ProbeModel {
        weights,
        bias,
        hyperparameters: hyper,
        metadata: TrainingMetadata {
            seed: split.seed,
            train_fraction: split.train_fraction,
            embedding_model: embeddings.model.clone(),
            n_train: rows.len(),
            n_iterations,
            stop_reason,
            final_loss: loss,
            metrics: EvalMetrics {
                train_accuracy: f64::NAN,
                test_accuracy: f64::NAN,
                train_confusion: Confusion::default(),
                test_confusion: Confusion::default(),
            },
        },
    })
}

/// One scored document. Probability ≥ 0.5 classifies as 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probability: f64,
    pub label: u8,
}

pub fn predict(
    model: &ProbeModel,
    embeddings: &DocEmbeddingSet,
) -> Result<Vec<Prediction>, ProbeError> {
    if embeddings.dim() != model.dim() {
        return Err(ProbeError::DimensionMismatch {
            expected: model.dim(),
            found: embeddings.dim(),
        });
    }
    Ok(embeddings
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s: f64 = embeddings
                .row(i)
                .iter()
                .zip(&model.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                + model.bias;
            let probability = sigmoid(s);
            Prediction {
                id: id.clone(),
                probability,
                label: u8::from(probability >= 0.5),
            }
        })
        .collect())
}

/// Accuracy and confusion counts on both sides of the split. Every
/// document in the embedding set needs a label and a split side.
pub fn evaluate(
    model: &ProbeModel,
    embeddings: &DocEmbeddingSet,
    labels: &HashMap<String, u8>,
    split: &SplitAssignment,
) -> Result<EvalMetrics, ProbeError> {
    let predictions = predict(model, embeddings)?;
    let mut train = Confusion::default();
    let mut test = Confusion::default();
    for prediction in &predictions {
        let truth = labels
            .get(&prediction.id)
            .copied()
            .ok_or_else(|| ProbeError::MissingLabel(prediction.id.clone()))?;
        let side = split
            .side_of(&prediction.id)
            .ok_or_else(|| ProbeError::MissingSplit(prediction.id.clone()))?;
        let confusion = match side {
            Side::Train => &mut train,
            Side::Test => &mut test,
        };
        match (truth, prediction.label) {
            (1, 1) => confusion.true_pos += 1,
            (0, 1) => confusion.false_pos += 1,
            (0, 0) => confusion.true_neg += 1,
            (1, 0) => confusion.false_neg += 1,
            _ => unreachable!("labels are binary"),
        }
    }
    Ok(EvalMetrics {
        train_accuracy: train.accuracy(),
        test_accuracy: test.accuracy(),
        train_confusion: train,
        test_confusion: test,
    })
}

/// Convenience: train, then attach evaluation metrics to the model.
pub fn train_and_evaluate(
    embeddings: &DocEmbeddingSet,
    labels: &HashMap<String, u8>,
    split: &SplitAssignment,
    hyper: Hyperparameters,
) -> Result<ProbeModel, ProbeError> {
    let mut model = train_probe(embeddings, labels, split, hyper)?;
    model.metadata.metrics = evaluate(&model, embeddings, labels, split)?;
    Ok(model)
}
