//! Context embeddings: average the pre-trained vectors of a window, then
//! apply a square linear transform. Includes fitting the transform from a
//! corpus (least squares of each word's vector on its mean context vector),
//! a text file round-trip for pre-trained transforms, and group pooling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::corpus::{tokenize, ContextInstance, Document};
use crate::vectorstore::VectorStore;

#[derive(Debug, Error)]
pub enum AlcError {
    #[error("cannot read transform file: {0}")]
    Io(#[from] std::io::Error),
    #[error("transform dimension {transform} does not match store dimension {store}")]
    DimensionMismatch { transform: usize, store: usize },
    #[error("instance {doc_id}@{match_position} has no in-vocabulary context tokens")]
    NoContext {
        doc_id: String,
        match_position: usize,
    },
    #[error("transform file line {line}: {reason}")]
    ParseTransform { line: usize, reason: String },
    #[error("transform file is not square: header says {expected}, row {line} has {found} values")]
    NonSquare {
        expected: usize,
        line: usize,
        found: usize,
    },
    #[error(
        "corpus yields {found} qualifying words, need at least {needed} (min_count {min_count})"
    )]
    InsufficientData {
        found: usize,
        needed: usize,
        min_count: usize,
    },
    #[error("normal equations are singular even after ridge regularization")]
    SingularFit,
    #[error("no instances to pool")]
    EmptyInput,
}

/// Where a transform came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformSource {
    Loaded,
    Learned,
}

/// The d×d linear map applied to averaged context vectors.
#[derive(Debug, Clone)]
pub struct AlcTransform {
    matrix: DMatrix<f64>,
    pub source: TransformSource,
    pub trained_on: Option<String>,
}

impl AlcTransform {
    pub fn new(matrix: DMatrix<f64>, source: TransformSource) -> Self {
        assert!(matrix.is_square(), "transform must be square");
        assert!(
            matrix.iter().all(|v| v.is_finite()),
            "transform must be finite"
        );
        AlcTransform {
            matrix,
            source,
            trained_on: None,
        }
    }

    pub fn identity(dim: usize) -> Self {
        AlcTransform::new(DMatrix::identity(dim, dim), TransformSource::Loaded)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// The embedding of one context instance.
#[derive(Debug, Clone)]
pub struct InstanceEmbedding {
    pub doc_id: String,
    pub match_position: usize,
    pub vector: Vec<f64>,
    /// In-vocabulary context tokens that went into the average.
    pub n_context_found: usize,
    /// Covariate values carried over from the instance.
    pub covariates: Vec<u8>,
}

/// Mean embedding over every instance of one group.
#[derive(Debug, Clone)]
pub struct GroupEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
    pub n_instances: usize,
}

/// Embed one instance: `A · mean(vectors of in-vocabulary context tokens)`.
/// Out-of-vocabulary tokens are skipped, not zero-imputed; an instance with
/// no in-vocabulary context is an error carrying the instance ref.
pub fn alc_embed(
    instance: &ContextInstance,
    store: &VectorStore,
    transform: &AlcTransform,
) -> Result<InstanceEmbedding, AlcError> {
    if transform.dim() != store.dim() {
        return Err(AlcError::DimensionMismatch {
            transform: transform.dim(),
            store: store.dim(),
        });
    }
    let mean =
        context_mean(&instance.context_tokens, store).ok_or_else(|| AlcError::NoContext {
            doc_id: instance.doc_id.clone(),
            match_position: instance.match_position,
        })?;
    let vector = transform.matrix() * mean.0;
    Ok(InstanceEmbedding {
        doc_id: instance.doc_id.clone(),
        match_position: instance.match_position,
        vector: vector.as_slice().to_vec(),
        n_context_found: mean.1,
        covariates: instance.covariates.clone(),
    })
}

/// Mean vector of the in-vocabulary tokens, or None if there are none.
/// Rows are accumulated in vocabulary order so the result is independent
/// of the order the tokens arrive in.
fn context_mean(tokens: &[String], store: &VectorStore) -> Option<(DVector<f64>, usize)> {
    let mut rows: Vec<usize> = tokens.iter().filter_map(|t| store.index_of(t)).collect();
    if rows.is_empty() {
        return None;
    }
    rows.sort_unstable();
    let n = rows.len();
    let mut sum = DVector::zeros(store.dim());
    for row in rows {
        for (acc, v) in sum.iter_mut().zip(store.row(row)) {
            *acc += v;
        }
    }
    sum /= n as f64;
    Some((sum, n))
}

/// Fit the transform on a corpus: for every word type with at least
/// `min_count` usable occurrences, pool the context vectors of all its
/// occurrences into a mean `u_w`, then solve
/// `A = argmin Σ_w ‖v_w − A u_w‖²` by normal equations with a small
/// trace-scaled ridge so degenerate corpora still solve.
pub fn learn_transform(
    docs: &[Document],
    store: &VectorStore,
    window: usize,
    min_count: usize,
) -> Result<AlcTransform, AlcError> {
    assert!(window >= 1, "window must be at least 1");
    let d = store.dim();

    // Per word type: pooled sum of context vectors, number of context
    // tokens pooled, number of occurrences seen. BTreeMap keeps merge
    // order fixed regardless of corpus order.
    struct Stats {
        context_sum: DVector<f64>,
        n_context: usize,
        n_occurrences: usize,
    }
    let mut per_word: BTreeMap<usize, Stats> = BTreeMap::new();

    for doc in docs {
        let tokens = tokenize(&doc.text);
        let rows: Vec<Option<usize>> = tokens.iter().map(|t| store.index_of(t)).collect();
        for (pos, row) in rows.iter().enumerate() {
            let Some(word_row) = row else { continue };
            let lo = pos.saturating_sub(window);
            let hi = (pos + 1 + window).min(tokens.len());
            let mut context_rows: Vec<usize> = (lo..hi)
                .filter(|i| *i != pos)
                .filter_map(|i| rows[i])
                .collect();
            if context_rows.is_empty() {
                continue;
            }
            context_rows.sort_unstable();
            let stats = per_word.entry(*word_row).or_insert_with(|| Stats {
                context_sum: DVector::zeros(d),
                n_context: 0,
                n_occurrences: 0,
            });
            for row in context_rows {
                for (acc, v) in stats.context_sum.iter_mut().zip(store.row(row)) {
                    *acc += v;
                }
                stats.n_context += 1;
            }
            stats.n_occurrences += 1;
        }
    }

    let qualifying: Vec<(usize, &Stats)> = per_word
        .iter()
        .filter(|(_, s)| s.n_occurrences >= min_count)
        .map(|(row, s)| (*row, s))
        .collect();
    if qualifying.len() < d {
        return Err(AlcError::InsufficientData {
            found: qualifying.len(),
            needed: d,
            min_count,
        });
    }

    // A = (Σ v u^T)(Σ u u^T + λI)^{-1}; λ is 1e-8 of the mean diagonal.
    let mut uut = DMatrix::zeros(d, d);
    let mut vut = DMatrix::zeros(d, d);
    for (word_row, stats) in &qualifying {
        let u = &stats.context_sum / stats.n_context as f64;
        let v = DVector::from_column_slice(store.row(*word_row));
        uut += &u * u.transpose();
        vut += v * u.transpose();
    }
    let ridge = 1e-8 * uut.trace() / d as f64;
    for i in 0..d {
        uut[(i, i)] += ridge;
    }

    // Solve X (uut)^T = vut^T for X^T, i.e. A uut = vut with uut symmetric.
    let chol = uut.cholesky().ok_or(AlcError::SingularFit)?;
    let a_t = chol.solve(&vut.transpose());
    let mut transform = AlcTransform::new(a_t.transpose(), TransformSource::Learned);
    transform.trained_on = Some(format!(
        "{} documents, window {window}, min_count {min_count}, {} word types",
        docs.len(),
        qualifying.len()
    ));
    Ok(transform)
}

/// Transform file: first line `D`, then D rows of D space-separated values
/// printed with 17 significant digits.
pub fn save_transform(transform: &AlcTransform, path: &Path) -> Result<(), AlcError> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = transform.dim();
    writeln!(w, "{d}")?;
    for i in 0..d {
        for j in 0..d {
            if j > 0 {
                write!(w, " ")?;
            }
            write!(w, "{:.16e}", transform.matrix()[(i, j)])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<AlcTransform, AlcError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| AlcError::ParseTransform {
        line: 1,
        reason: "file is empty".into(),
    })??;
    let d: usize = header
        .trim()
        .parse()
        .map_err(|e| AlcError::ParseTransform {
            line: 1,
            reason: format!("bad dimension header {header:?}: {e}"),
        })?;
    if d == 0 {
        return Err(AlcError::ParseTransform {
            line: 1,
            reason: "dimension must be positive".into(),
        });
    }
    let mut values = Vec::with_capacity(d * d);
    let mut n_rows = 0;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>().map_err(|e| AlcError::ParseTransform {
                    line: line_no,
                    reason: format!("bad value {f:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if row.len() != d {
            return Err(AlcError::NonSquare {
                expected: d,
                line: line_no,
                found: row.len(),
            });
        }
        values.extend(row);
        n_rows += 1;
    }
    if n_rows != d {
        return Err(AlcError::NonSquare {
            expected: d,
            line: n_rows + 1,
            found: 0,
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AlcError::ParseTransform {
            line: 1,
            reason: "transform has non-finite entries".into(),
        });
    }
    Ok(AlcTransform::new(
        DMatrix::from_row_slice(d, d, &values),
        TransformSource::Loaded,
    ))
}

/// Pool instance embeddings into one mean vector per label. Labels come
/// from `group_of`; the result is ordered by label.
pub fn group_embeddings<F>(
    instances: &[InstanceEmbedding],
    group_of: F,
) -> Result<BTreeMap<String, GroupEmbedding>, AlcError>
where
    F: Fn(&InstanceEmbedding) -> String,
{
    if instances.is_empty() {
        return Err(AlcError::EmptyInput);
    }
    let dim = instances[0].vector.len();
    let mut groups: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for inst in instances {
        let entry = groups
            .entry(group_of(inst))
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (acc, v) in entry.0.iter_mut().zip(&inst.vector) {
            *acc += v;
        }
        entry.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(label, (sum, n))| {
            let vector = sum.into_iter().map(|v| v / n as f64).collect();
            (
                label.clone(),
                GroupEmbedding {
                    label,
                    vector,
                    n_instances: n,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vectorstore::VectorStore;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeMap as Map;

    fn instance(tokens: &[&str]) -> ContextInstance {
        ContextInstance {
            doc_id: "d".into(),
            match_position: 0,
            context_tokens: tokens.iter().map(|t| t.to_string()).collect(),
            covariates: vec![],
        }
    }

    fn toy_store() -> VectorStore {
        VectorStore::from_rows([
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![2.0, 2.0]),
        ])
        .unwrap()
    }

    #[test]
    fn identity_transform_single_token_echoes_vector() {
        let store = toy_store();
        let emb = alc_embed(&instance(&["a"]), &store, &AlcTransform::identity(2)).unwrap();
        assert_eq!(emb.vector, vec![1.0, 0.0]);
        assert_eq!(emb.n_context_found, 1);
    }

    #[test]
    fn identity_transform_averages() {
        let store = toy_store();
        let emb = alc_embed(&instance(&["a", "b"]), &store, &AlcTransform::identity(2)).unwrap();
        assert_eq!(emb.vector, vec![0.5, 0.5]);
    }

    #[test]
    fn oov_tokens_are_skipped_and_counted() {
        let store = toy_store();
        let emb = alc_embed(
            &instance(&["a", "zzz", "b"]),
            &store,
            &AlcTransform::identity(2),
        )
        .unwrap();
        assert_eq!(emb.n_context_found, 2);
        assert_eq!(emb.vector, vec![0.5, 0.5]);
    }

    #[test]
    fn all_oov_is_an_error_with_instance_ref() {
        let store = toy_store();
        let mut inst = instance(&["zzz"]);
        inst.match_position = 7;
        match alc_embed(&inst, &store, &AlcTransform::identity(2)) {
            Err(AlcError::NoContext {
                doc_id,
                match_position,
            }) => {
                assert_eq!(doc_id, "d");
                assert_eq!(match_position, 7);
            }
            other => panic!("expected NoContext, got {other:?}"),
        }
    }

    #[test]
    fn matches_mean_then_multiply_oracle() {
        // Independent oracle: average rows by hand, multiply by hand.
        let d = 4;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let rows: Vec<(String, Vec<f64>)> = (0..5)
            .map(|i| {
                (
                    format!("w{i}"),
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let store = VectorStore::from_rows(rows.clone()).unwrap();
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let transform =
            AlcTransform::new(DMatrix::from_row_slice(d, d, &a), TransformSource::Loaded);

        let tokens: Vec<&str> = vec!["w0", "w1", "w2", "w3", "w4"];
        let emb = alc_embed(&instance(&tokens), &store, &transform).unwrap();

        let mut mean = vec![0.0; d];
        for (_, v) in &rows {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / rows.len() as f64;
            }
        }
        for i in 0..d {
            let expect: f64 = (0..d).map(|j| a[i * d + j] * mean[j]).sum();
            assert_relative_eq!(emb.vector[i], expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn embedding_is_invariant_to_context_order() {
        let store = toy_store();
        let transform = AlcTransform::new(
            DMatrix::from_row_slice(2, 2, &[0.3, -1.7, 2.2, 0.9]),
            TransformSource::Loaded,
        );
        let fwd = alc_embed(&instance(&["a", "b", "c"]), &store, &transform).unwrap();
        let rev = alc_embed(&instance(&["c", "b", "a"]), &store, &transform).unwrap();
        assert_eq!(fwd.vector, rev.vector);
    }

    #[test]
    fn composed_transform_equals_sequential_application() {
        let store = toy_store();
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, -1.0, 3.0]);
        let composed = AlcTransform::new(&a2 * &a1, TransformSource::Loaded);
        let first = AlcTransform::new(a1, TransformSource::Loaded);

        let inst = instance(&["a", "c"]);
        let one_shot = alc_embed(&inst, &store, &composed).unwrap();
        let staged = alc_embed(&inst, &store, &first).unwrap();
        let staged_vec = &a2 * DVector::from_column_slice(&staged.vector);
        for (x, y) in one_shot.vector.iter().zip(staged_vec.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    fn synthetic_identity_corpus() -> (Vec<Document>, VectorStore) {
        // Each word's context mean equals its own vector: words come in
        // pairs (x, x') with identical vectors, repeated often, so the
        // context of x is always x' and vice versa.
        let mut rows = Vec::new();
        let mut docs = Vec::new();
        let _dim = 3;
        let base = [
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        for (i, v) in base.iter().enumerate() {
            rows.push((format!("w{i}a"), v.clone()));
            rows.push((format!("w{i}b"), v.clone()));
            for rep in 0..6 {
                docs.push(Document {
                    id: format!("doc{i}_{rep}"),
                    text: format!("w{i}a w{i}b"),
                    meta: Map::new(),
                });
            }
        }
        (docs, VectorStore::from_rows(rows).unwrap())
    }

    #[test]
    fn learned_transform_recovers_identity() {
        let (docs, store) = synthetic_identity_corpus();
        let transform = learn_transform(&docs, &store, 2, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (transform.matrix()[(i, j)] - expect).abs() < 1e-6,
                    "A[{i},{j}] = {}",
                    transform.matrix()[(i, j)]
                );
            }
        }
        assert_eq!(transform.source, TransformSource::Learned);
    }

    #[test]
    fn learned_transform_matches_normal_equation_oracle() {
        // d=2 toy, solved against hand-rolled normal equations.
        let store = VectorStore::from_rows([
            ("p", vec![1.0, 0.0]),
            ("q", vec![0.0, 1.0]),
            ("r", vec![1.0, 1.0]),
        ])
        .unwrap();
        let docs: Vec<Document> = ["p q", "q r", "r p", "p q r"]
            .iter()
            .enumerate()
            .flat_map(|(i, text)| {
                (0..3).map(move |rep| Document {
                    id: format!("{i}_{rep}"),
                    text: text.to_string(),
                    meta: Map::new(),
                })
            })
            .collect();
        let transform = learn_transform(&docs, &store, 6, 2).unwrap();

        // Oracle: accumulate u_w per word exactly as specified, then solve
        // A (Σ u u^T + λI) = Σ v u^T by 2x2 matrix inversion.
        let v = |w: &str| store.get(w).unwrap().values.to_vec();
        // Occurrences (window 6 covers the whole text):
        //   p: contexts {q}, {r}, {q,r}  → u_p = (v_q + v_r + v_q + v_r)/4
        //   q: contexts {p}, {r}, {p,r}  → u_q = (v_p + v_r + v_p + v_r)/4
        //   r: contexts {q}, {p}, {p,q}  → u_r = (v_q + v_p + v_p + v_q)/4
        let u = [
            [
                (v("q")[0] * 2.0 + v("r")[0] * 2.0) / 4.0,
                (v("q")[1] * 2.0 + v("r")[1] * 2.0) / 4.0,
            ],
            [
                (v("p")[0] * 2.0 + v("r")[0] * 2.0) / 4.0,
                (v("p")[1] * 2.0 + v("r")[1] * 2.0) / 4.0,
            ],
            [
                (v("q")[0] * 2.0 + v("p")[0] * 2.0) / 4.0,
                (v("q")[1] * 2.0 + v("p")[1] * 2.0) / 4.0,
            ],
        ];
        let vs = [v("p"), v("q"), v("r")];
        let mut uut = [[0.0f64; 2]; 2];
        let mut vut = [[0.0f64; 2]; 2];
        for (uw, vw) in u.iter().zip(&vs) {
            for i in 0..2 {
                for j in 0..2 {
                    uut[i][j] += uw[i] * uw[j];
                    vut[i][j] += vw[i] * uw[j];
                }
            }
        }
        let ridge = 1e-8 * (uut[0][0] + uut[1][1]) / 2.0;
        uut[0][0] += ridge;
        uut[1][1] += ridge;
        let det = uut[0][0] * uut[1][1] - uut[0][1] * uut[1][0];
        let inv = [
            [uut[1][1] / det, -uut[0][1] / det],
            [-uut[1][0] / det, uut[0][0] / det],
        ];
        for i in 0..2 {
            for j in 0..2 {
                let expect: f64 = (0..2).map(|k| vut[i][k] * inv[k][j]).sum();
                assert_relative_eq!(transform.matrix()[(i, j)], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cancelling_contexts_are_a_singular_fit() {
        // Every qualifying word's pooled context mean is exactly zero, so
        // the normal equations stay singular even with the ridge term.
        let store = VectorStore::from_rows([
            ("w", vec![1.0, 0.0]),
            ("w2", vec![-1.0, 0.0]),
            ("c", vec![0.0, 2.0]),
            ("d", vec![0.0, -2.0]),
        ])
        .unwrap();
        let docs: Vec<Document> = ["c w", "d w", "c w2", "d w2"]
            .iter()
            .enumerate()
            .map(|(i, text)| Document {
                id: i.to_string(),
                text: text.to_string(),
                meta: Map::new(),
            })
            .collect();
        assert!(matches!(
            learn_transform(&docs, &store, 2, 2),
            Err(AlcError::SingularFit)
        ));
    }

    #[test]
    fn too_few_qualifying_words_is_an_error() {
        let store = VectorStore::from_rows([("p", vec![1.0, 0.0]), ("q", vec![0.0, 1.0])]).unwrap();
        let docs = vec![Document {
            id: "1".into(),
            text: "p q".into(),
            meta: Map::new(),
        }];
        match learn_transform(&docs, &store, 2, 5) {
            Err(AlcError::InsufficientData { found, needed, .. }) => {
                assert_eq!(found, 0);
                assert_eq!(needed, 2);
            }
            other => panic!("expected InsufficientData, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_corpus_learns_the_same_transform() {
        let (docs, store) = synthetic_identity_corpus();
        let once = learn_transform(&docs, &store, 2, 5).unwrap();
        let mut tripled = docs.clone();
        for k in 1..3 {
            tripled.extend(docs.iter().map(|d| Document {
                id: format!("{}_copy{k}", d.id),
                ..d.clone()
            }));
        }
        let thrice = learn_transform(&tripled, &store, 2, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(
                    once.matrix()[(i, j)],
                    thrice.matrix()[(i, j)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn transform_file_round_trip() {
        let transform = AlcTransform::identity(3);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_transform(&transform, f.path()).unwrap();
        let back = load_transform(f.path()).unwrap();
        assert_eq!(back.matrix(), transform.matrix());
        assert_eq!(back.source, TransformSource::Loaded);
    }

    #[test]
    fn transform_round_trip_preserves_embeddings() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let d = 4;
        let values: Vec<f64> = (0..d * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let transform = AlcTransform::new(
            DMatrix::from_row_slice(d, d, &values),
            TransformSource::Learned,
        );
        let store = VectorStore::from_rows((0..d).map(|i| {
            let mut v = vec![0.25; d];
            v[i] = 1.0;
            (format!("t{i}"), v)
        }))
        .unwrap();
        let inst = instance(&["t0", "t2", "t3"]);
        let before = alc_embed(&inst, &store, &transform).unwrap();

        let f = tempfile::NamedTempFile::new().unwrap();
        save_transform(&transform, f.path()).unwrap();
        let after = alc_embed(&inst, &store, &load_transform(f.path()).unwrap()).unwrap();
        for (x, y) in before.vector.iter().zip(&after.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_square_transform_file_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, b"3\n1 0 0\n0 1 0\n").unwrap();
        assert!(matches!(
            load_transform(f.path()),
            Err(AlcError::NonSquare { .. })
        ));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, b"2\n1 0 0\n0 1 0\n").unwrap();
        assert!(matches!(
            load_transform(f.path()),
            Err(AlcError::NonSquare { .. })
        ));
    }

    fn embedding(doc_id: &str, vector: Vec<f64>, group: &str) -> (InstanceEmbedding, String) {
        (
            InstanceEmbedding {
                doc_id: doc_id.into(),
                match_position: 0,
                vector,
                n_context_found: 1,
                covariates: vec![],
            },
            group.to_string(),
        )
    }

    #[test]
    fn singleton_groups_echo_their_instance() {
        let items = [
            embedding("1", vec![1.0, 0.0], "x"),
            embedding("2", vec![0.0, 2.0], "y"),
        ];
        let insts: Vec<_> = items.iter().map(|(i, _)| i.clone()).collect();
        let labels: Map<String, String> = items
            .iter()
            .map(|(i, g)| (i.doc_id.clone(), g.clone()))
            .collect();
        let groups = group_embeddings(&insts, |i| labels[&i.doc_id].clone()).unwrap();
        assert_eq!(groups["x"].vector, vec![1.0, 0.0]);
        assert_eq!(groups["y"].vector, vec![0.0, 2.0]);
        assert_eq!(groups["x"].n_instances, 1);
    }

    #[test]
    fn group_mean_of_two_instances() {
        let insts = vec![
            embedding("1", vec![1.0, 0.0], "g").0,
            embedding("2", vec![0.0, 1.0], "g").0,
        ];
        let groups = group_embeddings(&insts, |_| "g".to_string()).unwrap();
        assert_eq!(groups["g"].vector, vec![0.5, 0.5]);
    }

    #[test]
    fn group_means_match_brute_force_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let insts: Vec<InstanceEmbedding> = (0..50)
            .map(|i| InstanceEmbedding {
                doc_id: format!("d{i}"),
                match_position: 0,
                vector: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                n_context_found: 1,
                covariates: vec![],
            })
            .collect();
        let label = |i: &InstanceEmbedding| {
            let n: usize = i.doc_id[1..].parse().unwrap();
            if n.is_multiple_of(2) {
                "even".to_string()
            } else {
                "odd".to_string()
            }
        };
        let groups = group_embeddings(&insts, label).unwrap();

        for parity in ["even", "odd"] {
            let members: Vec<&InstanceEmbedding> =
                insts.iter().filter(|i| label(i) == parity).collect();
            for k in 0..3 {
                let oracle: f64 =
                    members.iter().map(|m| m.vector[k]).sum::<f64>() / members.len() as f64;
                assert_relative_eq!(groups[parity].vector[k], oracle, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn union_group_is_count_weighted_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let insts: Vec<InstanceEmbedding> = (0..20)
            .map(|i| InstanceEmbedding {
                doc_id: format!("d{i:02}"),
                match_position: 0,
                vector: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                n_context_found: 1,
                covariates: vec![],
            })
            .collect();
        let split_label = |i: &InstanceEmbedding| {
            if i.doc_id.as_str() < "d07" {
                "a".to_string()
            } else {
                "b".to_string()
            }
        };
        let split = group_embeddings(&insts, split_label).unwrap();
        let union = group_embeddings(&insts, |_| "all".to_string()).unwrap();

        let (ga, gb) = (&split["a"], &split["b"]);
        let total = (ga.n_instances + gb.n_instances) as f64;
        for k in 0..4 {
            let weighted = (ga.vector[k] * ga.n_instances as f64
                + gb.vector[k] * gb.n_instances as f64)
                / total;
            assert_relative_eq!(union["all"].vector[k], weighted, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_instance_list_is_an_error() {
        assert!(matches!(
            group_embeddings(&[], |_| "g".to_string()),
            Err(AlcError::EmptyInput)
        ));
    }
}
