//! Embedding regression: multivariate OLS of instance embeddings on binary
//! covariates, scalar effect sizes as coefficient-row norms, permutation
//! p-values, and bootstrap standard errors / percentile intervals.
//!
//! Every sum over instance rows goes through [`stable_sum`], which sorts
//! before adding, so fitted coefficients are exactly invariant to the order
//! instances arrive in. Permutation and bootstrap replicates each draw from
//! their own RNG substream and can run on any number of threads without
//! changing a single output byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alacarte::{alc_embed, AlcError, AlcTransform, InstanceEmbedding};
use crate::corpus::{extract_contexts, resolve_covariate, CorpusError, Document, FocalPattern};
use crate::rng::{substream, StreamKind};
use crate::vectorstore::VectorStore;

#[derive(Debug, Error)]
pub enum EmbedRegError {
    #[error("design needs n > p + 1: n={n}, p={p}")]
    TooFewInstances { n: usize, p: usize },
    #[error("covariate {name:?} is constant; both levels must be present")]
    ConstantColumn { name: String },
    #[error("covariate {name:?} has non-binary value {value}")]
    NonBinary { name: String, value: u8 },
    #[error("covariate count {covariates} does not match instance covariate width {width}")]
    CovariateWidth { covariates: usize, width: usize },
    #[error("covariates {a:?} and {b:?} are collinear")]
    CollinearPair { a: String, b: String },
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("n_permutations must be at least 1")]
    NoPermutations,
    #[error("n_bootstrap must be at least 2")]
    TooFewBootstrap,
    #[error("bootstrap replicate kept drawing a constant covariate column after 100 attempts")]
    BootstrapDegenerate,
    #[error("embedding dimension varies across instances")]
    RaggedEmbeddings,
}

/// Pipeline stage tags for [`PipelineError`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStage {
    Covariates,
    Extraction,
    Embedding,
    Design,
    Fit,
    Permutation,
    Bootstrap,
}

impl std::fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PipelineStage::Covariates => "covariates",
            PipelineStage::Extraction => "extraction",
            PipelineStage::Embedding => "embedding",
            PipelineStage::Design => "design",
            PipelineStage::Fit => "fit",
            PipelineStage::Permutation => "permutation",
            PipelineStage::Bootstrap => "bootstrap",
        };
        write!(f, "{name}")
    }
}

/// An error from [`run_embedding_regression`], tagged with the stage that
/// produced it.
#[derive(Debug, Error)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: PipelineStage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn new(stage: PipelineStage, source: impl std::error::Error + Send + Sync + 'static) -> Self {
        PipelineError {
            stage,
            source: Box::new(source),
        }
    }
}

/// Sum that is independent of input order: values are sorted before
/// accumulation, so any permutation of the same multiset rounds identically.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut buf: Vec<f64> = values.into_iter().collect();
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Validated inputs for one regression: Y (n × d instance embeddings) and
/// X (n × (p+1), leading intercept column of ones, then binary covariates).
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl RegressionDesign {
    /// Build and validate a design from embedding rows and named binary
    /// covariate columns.
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        covariates: Vec<(String, Vec<u8>)>,
    ) -> Result<Self, EmbedRegError> {
        let n = embeddings.len();
        let p = covariates.len();
        if n <= p + 1 {
            return Err(EmbedRegError::TooFewInstances { n, p });
        }
        let d = embeddings[0].len();
        if embeddings.iter().any(|row| row.len() != d) {
            return Err(EmbedRegError::RaggedEmbeddings);
        }
        for (name, column) in &covariates {
            if column.len() != n {
                return Err(EmbedRegError::CovariateWidth {
                    covariates: column.len(),
                    width: n,
                });
            }
            if let Some(bad) = column.iter().find(|v| **v > 1) {
                return Err(EmbedRegError::NonBinary {
                    name: name.clone(),
                    value: *bad,
                });
            }
            let ones = column.iter().filter(|v| **v == 1).count();
            if ones == 0 || ones == n {
                return Err(EmbedRegError::ConstantColumn { name: name.clone() });
            }
        }

        let mut x = DMatrix::zeros(n, p + 1);
        for i in 0..n {
            x[(i, 0)] = 1.0;
        }
        for (j, (_, column)) in covariates.iter().enumerate() {
            for (i, v) in column.iter().enumerate() {
                x[(i, j + 1)] = *v as f64;
            }
        }
        let y = DMatrix::from_fn(n, d, |i, k| embeddings[i][k]);
        Ok(RegressionDesign {
            x,
            y,
            covariate_names: covariates.into_iter().map(|(name, _)| name).collect(),
        })
    }

    /// Build a design from embedded instances; covariate values ride on the
    /// instances, `names` labels them in order.
    pub fn from_instances(
        instances: &[InstanceEmbedding],
        names: &[String],
    ) -> Result<Self, EmbedRegError> {
        let p = names.len();
        if instances.iter().any(|inst| inst.covariates.len() != p) {
            return Err(EmbedRegError::CovariateWidth {
                covariates: p,
                width: instances
                    .iter()
                    .map(|i| i.covariates.len())
                    .next()
                    .unwrap_or(0),
            });
        }
        let embeddings = instances.iter().map(|i| i.vector.clone()).collect();
        let covariates = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                (
                    name.clone(),
                    instances.iter().map(|i| i.covariates[j]).collect(),
                )
            })
            .collect();
        Self::new(embeddings, covariates)
    }

    pub fn n_instances(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Copy of the design with covariate column `j` (0-based, intercept not
    /// counted) shuffled across instances.
    fn with_permuted_covariate(&self, j: usize, rng: &mut impl Rng) -> RegressionDesign {
        let mut column: Vec<f64> = (0..self.x.nrows()).map(|i| self.x[(i, j + 1)]).collect();
        column.shuffle(rng);
        let mut permuted = self.clone();
        for (i, v) in column.into_iter().enumerate() {
            permuted.x[(i, j + 1)] = v;
        }
        permuted
    }

    /// Copy of the design keeping only the rows in `indices` (repeats allowed).
    fn resampled(&self, indices: &[usize]) -> RegressionDesign {
        let x = DMatrix::from_fn(indices.len(), self.x.ncols(), |i, j| {
            self.x[(indices[i], j)]
        });
        let y = DMatrix::from_fn(indices.len(), self.y.ncols(), |i, k| {
            self.y[(indices[i], k)]
        });
        RegressionDesign {
            x,
            y,
            covariate_names: self.covariate_names.clone(),
        }
    }

    fn has_constant_covariate(&self) -> bool {
        (1..self.x.ncols()).any(|j| {
            let first = self.x[(0, j)];
            (1..self.x.nrows()).all(|i| self.x[(i, j)] == first)
        })
    }
}

/// OLS fit: `B = (XᵀX)⁻¹XᵀY`, each embedding dimension independently.
/// Row 0 of B is the intercept, row j+1 belongs to covariate j.
pub fn fit_ols(design: &RegressionDesign) -> Result<DMatrix<f64>, EmbedRegError> {
    let x = &design.x;
    let y = &design.y;
    let n = x.nrows();
    let q = x.ncols();
    let d = y.ncols();

    // Exactly collinear binary columns: equal, or complementary through the
    // intercept. Caught here to name the pair instead of failing the solve.
    for a in 1..q {
        for b in (a + 1)..q {
            let equal = (0..n).all(|i| x[(i, a)] == x[(i, b)]);
            let complement = (0..n).all(|i| x[(i, a)] == 1.0 - x[(i, b)]);
            if equal || complement {
                return Err(EmbedRegError::CollinearPair {
                    a: design.covariate_names[a - 1].clone(),
                    b: design.covariate_names[b - 1].clone(),
                });
            }
        }
    }

    let mut xtx = DMatrix::zeros(q, q);
    for a in 0..q {
        for b in a..q {
            let s = stable_sum((0..n).map(|i| x[(i, a)] * x[(i, b)]));
            xtx[(a, b)] = s;
            xtx[(b, a)] = s;
        }
    }
    let mut xty = DMatrix::zeros(q, d);
    for a in 0..q {
        for k in 0..d {
            xty[(a, k)] = stable_sum((0..n).map(|i| x[(i, a)] * y[(i, k)]));
        }
    }
    let chol = xtx.cholesky().ok_or(EmbedRegError::SingularDesign)?;
    Ok(chol.solve(&xty))
}

/// Euclidean norm of each covariate's coefficient row (intercept excluded).
pub fn normed_coefficients(b: &DMatrix<f64>) -> Vec<f64> {
    (1..b.nrows())
        .map(|j| b.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Marginal permutation test: for each covariate, shuffle its column while
/// holding Y and the other columns fixed, refit, and compare coefficient
/// norms. Returns one p-value per covariate, computed with the add-one
/// estimator `(1 + #{permuted ≥ observed}) / (1 + P)` so p is never zero.
pub fn permutation_test(
    design: &RegressionDesign,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<f64>, EmbedRegError> {
    if n_permutations == 0 {
        return Err(EmbedRegError::NoPermutations);
    }
    let observed = normed_coefficients(&fit_ols(design)?);
    let mut p_values = Vec::with_capacity(design.n_covariates());
    for j in 0..design.n_covariates() {
        let norms: Vec<f64> = (0..n_permutations)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(seed, StreamKind::Permutation, j as u16, i as u32);
                let permuted = design.with_permuted_covariate(j, &mut rng);
                fit_ols(&permuted).map(|b| normed_coefficients(&b)[j])
            })
            .collect::<Result<_, _>>()?;
        let exceed = norms.iter().filter(|norm| **norm >= observed[j]).count();
        p_values.push((1 + exceed) as f64 / (1 + n_permutations) as f64);
    }
    Ok(p_values)
}

/// Spread of one covariate's norm across bootstrap replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSpread {
    pub std_error: f64,
    pub lower_ci: f64,
    pub upper_ci: f64,
}

/// Bootstrap output; replicate norms are kept (row = replicate, column =
/// covariate) so callers can audit the percentiles.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub spreads: Vec<CovariateSpread>,
    pub replicate_norms: Vec<Vec<f64>>,
}

/// Nonparametric bootstrap over instances: resample rows with replacement,
/// refit, and summarize each covariate's norm by its sample standard
/// deviation and percentile interval. A replicate that draws a constant
/// covariate column is redrawn, up to 100 attempts.
pub fn bootstrap_se_ci(
    design: &RegressionDesign,
    n_bootstrap: usize,
    seed: u64,
    ci_level: f64,
) -> Result<BootstrapResult, EmbedRegError> {
    if n_bootstrap < 2 {
        return Err(EmbedRegError::TooFewBootstrap);
    }
    assert!(
        ci_level > 0.0 && ci_level < 1.0,
        "ci_level must be inside (0, 1)"
    );
    let n = design.n_instances();
    let replicate_norms: Vec<Vec<f64>> = (0..n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, StreamKind::Bootstrap, 0, b as u32);
            let mut attempts = 0;
            let resampled = loop {
                let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let candidate = design.resampled(&indices);
                if !candidate.has_constant_covariate() {
                    break candidate;
                }
                attempts += 1;
                if attempts >= 100 {
                    return Err(EmbedRegError::BootstrapDegenerate);
                }
            };
            fit_ols(&resampled).map(|b| normed_coefficients(&b))
        })
        .collect::<Result<_, _>>()?;

    let alpha = 1.0 - ci_level;
    let spreads = (0..design.n_covariates())
        .map(|j| {
            let mut norms: Vec<f64> = replicate_norms.iter().map(|row| row[j]).collect();
            norms.sort_unstable_by(f64::total_cmp);
            CovariateSpread {
                std_error: sample_std(&norms),
                lower_ci: percentile(&norms, alpha / 2.0),
                upper_ci: percentile(&norms, 1.0 - alpha / 2.0),
            }
        })
        .collect();
    Ok(BootstrapResult {
        spreads,
        replicate_norms,
    })
}

/// Sample standard deviation (n−1 denominator). Constant data is exactly 0.
fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 || values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Empirical quantile with linear interpolation between order statistics
/// (the R type-7 convention). `sorted` must be ascending.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let h = (m - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// One reported coefficient. Field names in serialized form mirror the
/// report CSV schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub coefficient: String,
    #[serde(rename = "normed.estimate")]
    pub normed_estimate: f64,
    #[serde(rename = "std.error")]
    pub std_error: f64,
    #[serde(rename = "lower.ci")]
    pub lower_ci: f64,
    #[serde(rename = "upper.ci")]
    pub upper_ci: f64,
    #[serde(rename = "p.value")]
    pub p_value: f64,
}

/// Full regression output: one row per covariate, in input order, plus the
/// knobs that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rows: Vec<CoefficientRow>,
    pub n_instances: usize,
    pub n_permutations: usize,
    pub n_bootstrap: usize,
    pub seed: u64,
}

/// Knobs for [`run_embedding_regression`].
#[derive(Debug, Clone)]
pub struct RegressionSettings {
    pub window: usize,
    pub n_permutations: usize,
    pub n_bootstrap: usize,
    pub ci_level: f64,
    pub seed: u64,
    /// Instances with fewer in-vocabulary context tokens are dropped.
    pub min_context: usize,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        RegressionSettings {
            window: 6,
            n_permutations: 100,
            n_bootstrap: 100,
            ci_level: 0.95,
            seed: 0,
            min_context: 1,
        }
    }
}

/// The whole pipeline: resolve covariates, extract contexts, embed, build
/// the design, fit, permute, bootstrap, report. Errors carry the stage
/// they came from.
pub fn run_embedding_regression(
    docs: &[Document],
    pattern: &FocalPattern,
    covariate_specs: &[String],
    store: &VectorStore,
    transform: &AlcTransform,
    settings: &RegressionSettings,
) -> Result<RegressionReport, PipelineError> {
    let covariates = covariate_specs
        .iter()
        .map(|spec| resolve_covariate(docs, spec))
        .collect::<Result<Vec<_>, CorpusError>>()
        .map_err(|e| PipelineError::new(PipelineStage::Covariates, e))?;

    let instances = extract_contexts(docs, pattern, settings.window, &covariates);
    if instances.is_empty() {
        return Err(PipelineError::new(
            PipelineStage::Extraction,
            StageMessage("no focal matches in the corpus"),
        ));
    }

    let mut embedded = Vec::with_capacity(instances.len());
    for instance in &instances {
        match alc_embed(instance, store, transform) {
            Ok(emb) if emb.n_context_found >= settings.min_context => embedded.push(emb),
            Ok(_) | Err(AlcError::NoContext { .. }) => continue,
            Err(e) => return Err(PipelineError::new(PipelineStage::Embedding, e)),
        }
    }
    if embedded.is_empty() {
        return Err(PipelineError::new(
            PipelineStage::Embedding,
            StageMessage("no focal matches with in-vocabulary context"),
        ));
    }

    let names: Vec<String> = covariate_specs.to_vec();
    let design = RegressionDesign::from_instances(&embedded, &names)
        .map_err(|e| PipelineError::new(PipelineStage::Design, e))?;

    let b = fit_ols(&design).map_err(|e| PipelineError::new(PipelineStage::Fit, e))?;
    let norms = normed_coefficients(&b);
    let p_values = permutation_test(&design, settings.n_permutations, settings.seed)
        .map_err(|e| PipelineError::new(PipelineStage::Permutation, e))?;
    let bootstrap = bootstrap_se_ci(
        &design,
        settings.n_bootstrap,
        settings.seed,
        settings.ci_level,
    )
    .map_err(|e| PipelineError::new(PipelineStage::Bootstrap, e))?;

    let rows = names
        .iter()
        .enumerate()
        .map(|(j, name)| CoefficientRow {
            coefficient: name.clone(),
            normed_estimate: norms[j],
            std_error: bootstrap.spreads[j].std_error,
            lower_ci: bootstrap.spreads[j].lower_ci,
            upper_ci: bootstrap.spreads[j].upper_ci,
            p_value: p_values[j],
        })
        .collect();
    Ok(RegressionReport {
        rows,
        n_instances: design.n_instances(),
        n_permutations: settings.n_permutations,
        n_bootstrap: settings.n_bootstrap,
        seed: settings.seed,
    })
}

#[derive(Debug, Error)]
#[error("{0}")]
struct StageMessage(&'static str);

/// How numbers print in the report CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportPrecision {
    /// Two decimals, the shape the human-readable tables use.
    Rounded2,
    /// Shortest representation that parses back to the same f64.
    Full,
}

pub const REPORT_CSV_HEADER: &str =
    "coefficient,normed.estimate,std.error,lower.ci,upper.ci,p.value";

/// Write the report CSV: exactly the header above, one row per covariate.
pub fn write_report_csv(
    report: &RegressionReport,
    path: &Path,
    precision: ReportPrecision,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for row in &report.rows {
        let cells = [
            row.normed_estimate,
            row.std_error,
            row.lower_ci,
            row.upper_ci,
            row.p_value,
        ];
        write!(w, "{}", csv_field(&row.coefficient))?;
        for value in cells {
            match precision {
                ReportPrecision::Rounded2 => write!(w, ",{value:.2}")?,
                ReportPrecision::Full => write!(w, ",{value}")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// JSON mirror of the report, including the seed / P / B metadata.
pub fn write_report_json(report: &RegressionReport, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()
}
