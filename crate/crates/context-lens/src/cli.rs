//! The `context-lens` command line: one executable exposing the pipeline
//! as subcommands over a shared `key = value` config file.
//!
//! Setting precedence is flag > config file > built-in default. Exit codes:
//! 0 success, 2 validation problems (bad flags, missing inputs, missing
//! seed), 1 runtime failures (pipeline or transport errors). Commands never
//! mutate their inputs; everything lands under `--out-dir`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::alacarte::{
    alc_embed, group_embeddings, learn_transform, load_transform, AlcError, AlcTransform,
};
use crate::config::{discover, FileConfig};
use crate::corpus::{
    extract_contexts, load_corpus, resolve_covariate, CorpusFormat, Document, FocalPattern,
};
use crate::diagnose::{
    agreement_summary, disagreement_features, export_reannotation, import_adjudications,
    load_records, mine_disagreements, save_records, write_summary_json, SideFilter,
};
use crate::embedreg::{
    run_embedding_regression, write_report_csv, write_report_json, RegressionSettings,
    ReportPrecision,
};
use crate::probe::{
    evaluate, http::fetch_embeddings_http, load_embeddings_csv, load_model, predict,
    save_embeddings_csv, save_model, split, train_and_evaluate, DocEmbeddingSet, Hyperparameters,
};
use crate::simratio::{candidate_features, rank_discriminant, write_ratio_csv, RatioDirection};
use crate::vectorstore::{load_vectors, VectorFormat, VectorStore};

#[derive(Debug)]
enum CliError {
    /// Bad invocation or unusable inputs; exits 2.
    Validation(String),
    /// The pipeline failed while running; exits 1.
    Runtime(String),
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError::Validation(message.into())
    }

    fn runtime(error: impl std::fmt::Display) -> Self {
        CliError::Runtime(error.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "context-lens",
    version,
    about = "Context-embedding diagnostics for annotated text corpora",
    propagate_version = true
)]
struct Cli {
    /// Config file with `key = value` lines; flags override it. Falls back
    /// to $CONTEXT_LENS_CONFIG when not given.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embedding regression of focal-pattern contexts on binary covariates
    Regress(RegressArgs),
    /// Cosine-similarity-ratio features between two covariate groups
    Simratio(SimratioArgs),
    /// Linear probe over document embeddings
    Probe(ProbeArgs),
    /// Embedding provider operations
    Embed(EmbedArgs),
    /// Blinded re-annotation workflow over a disagreement set
    Reannotate(ReannotateArgs),
}

#[derive(Args, Clone)]
struct CorpusOpts {
    /// Corpus file (jsonl or csv)
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Corpus format: jsonl | csv [default: jsonl]
    #[arg(long, value_name = "FORMAT")]
    format: Option<String>,
    /// Field holding the document id [default: id]
    #[arg(long, value_name = "NAME")]
    id_field: Option<String>,
    /// Field holding the document text [default: text]
    #[arg(long, value_name = "NAME")]
    text_field: Option<String>,
}

#[derive(Args, Clone)]
struct VectorOpts {
    /// Pre-trained word vectors file
    #[arg(long, value_name = "PATH")]
    vectors: Option<PathBuf>,
    /// Vector file format: word2vec-text | glove-text [default: glove-text]
    #[arg(long, value_name = "FORMAT")]
    vectors_format: Option<String>,
}

#[derive(Args, Clone)]
struct TransformOpts {
    /// Transform file to load; identity when omitted
    #[arg(long, value_name = "PATH")]
    transform: Option<PathBuf>,
    /// Fit the transform on the corpus instead of loading it
    #[arg(long)]
    learn_transform: bool,
    /// Minimum occurrences for a word type to enter transform fitting
    /// [default: 5]
    #[arg(long, value_name = "N")]
    min_count: Option<usize>,
}

#[derive(Args)]
struct RegressArgs {
    #[command(flatten)]
    corpus: CorpusOpts,
    #[command(flatten)]
    vectors: VectorOpts,
    #[command(flatten)]
    transform: TransformOpts,
    /// Focal pattern variants, comma separated (e.g. "woman,women")
    #[arg(long, value_name = "VARIANTS")]
    focal: Option<String>,
    /// Covariate spec: field, field=value, or field>threshold (repeatable)
    #[arg(long, value_name = "SPEC")]
    covariate: Vec<String>,
    /// Context window size per side [default: 6]
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// Permutation replicates [default: 100]
    #[arg(long, value_name = "P")]
    permutations: Option<usize>,
    /// Bootstrap replicates [default: 100]
    #[arg(long, value_name = "B")]
    bootstrap: Option<usize>,
    /// Confidence level for bootstrap intervals [default: 0.95]
    #[arg(long, value_name = "LEVEL")]
    ci_level: Option<f64>,
    /// Minimum in-vocabulary context tokens per instance [default: 1]
    #[arg(long, value_name = "N")]
    min_context: Option<usize>,
    /// RNG seed (required)
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimratioArgs {
    #[command(flatten)]
    corpus: CorpusOpts,
    #[command(flatten)]
    vectors: VectorOpts,
    #[command(flatten)]
    transform: TransformOpts,
    /// Focal pattern variants, comma separated
    #[arg(long, value_name = "VARIANTS")]
    focal: Option<String>,
    /// Binary covariate defining the two groups (1 = group A, 0 = group B)
    #[arg(long, value_name = "SPEC")]
    covariate: Option<String>,
    /// Context window size per side [default: 6]
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// Candidate features per group [default: 20]
    #[arg(long, value_name = "K")]
    k: Option<usize>,
    /// Ranking direction: a-over-b | b-over-a [default: a-over-b]
    #[arg(long, value_name = "DIR")]
    direction: Option<String>,
    /// Minimum in-vocabulary context tokens per instance [default: 1]
    #[arg(long, value_name = "N")]
    min_context: Option<usize>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(subcommand)]
    action: ProbeAction,
}

#[derive(Subcommand)]
enum ProbeAction {
    /// Fit the probe on the training side of a seeded split
    Train(ProbeTrainArgs),
    /// Re-evaluate a trained probe on its split
    Eval(ProbeEvalArgs),
    /// Score documents with a trained probe
    Predict(ProbePredictArgs),
    /// Mine human/machine disagreements (optionally with feature ranking)
    Diagnose(ProbeDiagnoseArgs),
}

#[derive(Args)]
struct ProbeTrainArgs {
    /// Document embeddings CSV (id,v1,…,vD)
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Covariate spec giving the 0/1 label (e.g. "hatespeech>1")
    #[arg(long, value_name = "SPEC")]
    label: Option<String>,
    /// Fraction of documents in the training side [default: 0.8]
    #[arg(long, value_name = "F")]
    train_fraction: Option<f64>,
    /// L2 penalty on the weights [default: 1e-4]
    #[arg(long, value_name = "LAMBDA")]
    lambda: Option<f64>,
    /// Iteration cap [default: 500]
    #[arg(long, value_name = "N")]
    max_iter: Option<usize>,
    /// Gradient tolerance [default: 1e-6]
    #[arg(long, value_name = "TOL")]
    tol: Option<f64>,
    /// RNG seed (required)
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeEvalArgs {
    /// Trained model JSON
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Document embeddings CSV
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Covariate spec giving the 0/1 label
    #[arg(long, value_name = "SPEC")]
    label: Option<String>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProbePredictArgs {
    /// Trained model JSON
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Document embeddings CSV
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeDiagnoseArgs {
    /// Trained model JSON
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Document embeddings CSV
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Covariate spec giving the 0/1 label
    #[arg(long, value_name = "SPEC")]
    label: Option<String>,
    /// Split side to mine: test | train | all [default: test]
    #[arg(long, value_name = "SIDE")]
    side: Option<String>,
    #[command(flatten)]
    vectors: VectorOpts,
    /// Transform file for the feature pass; identity when omitted
    #[arg(long, value_name = "PATH")]
    transform: Option<PathBuf>,
    /// Candidate features per group in the feature pass [default: 20]
    #[arg(long, value_name = "K")]
    k: Option<usize>,
    /// Feature direction: hate-over-non-hate | non-hate-over-hate
    /// [default: non-hate-over-hate]
    #[arg(long, value_name = "DIR")]
    direction: Option<String>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(subcommand)]
    action: EmbedAction,
}

#[derive(Subcommand)]
enum EmbedAction {
    /// Fetch document embeddings from an HTTP endpoint
    Fetch(EmbedFetchArgs),
}

#[derive(Args)]
struct EmbedFetchArgs {
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Embedding endpoint URL
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Texts per request [default: 32]
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Model name sent with each request
    #[arg(long, value_name = "NAME")]
    model_name: Option<String>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReannotateArgs {
    #[command(subcommand)]
    action: ReannotateAction,
}

#[derive(Subcommand)]
enum ReannotateAction {
    /// Write the blinded re-annotation CSV and sealed mapping
    Export(ReannotateExportArgs),
    /// Join adjudications back onto the record set
    Import(ReannotateImportArgs),
    /// Summarize agreement rates over adjudicated records
    Summary(ReannotateSummaryArgs),
}

#[derive(Args)]
struct ReannotateExportArgs {
    /// Disagreement records JSON (from probe diagnose)
    #[arg(long, value_name = "PATH")]
    records: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReannotateImportArgs {
    /// Disagreement records JSON to update
    #[arg(long, value_name = "PATH")]
    records: Option<PathBuf>,
    /// Adjudications CSV (columns id, adjudication)
    #[arg(long, value_name = "PATH")]
    adjudications: Option<PathBuf>,
    /// Output directory for the updated records [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReannotateSummaryArgs {
    /// Disagreement records JSON
    #[arg(long, value_name = "PATH")]
    records: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

/// Parse, dispatch, map errors to exit codes.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let file = match discover(cli.config.as_deref()) {
        Ok(file) => file,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx { file };
    let outcome = match cli.command {
        Command::Regress(args) => cmd_regress(&ctx, args),
        Command::Simratio(args) => cmd_simratio(&ctx, args),
        Command::Probe(args) => match args.action {
            ProbeAction::Train(args) => cmd_probe_train(&ctx, args),
            ProbeAction::Eval(args) => cmd_probe_eval(&ctx, args),
            ProbeAction::Predict(args) => cmd_probe_predict(&ctx, args),
            ProbeAction::Diagnose(args) => cmd_probe_diagnose(&ctx, args),
        },
        Command::Embed(args) => match args.action {
            EmbedAction::Fetch(args) => cmd_embed_fetch(&ctx, args),
        },
        Command::Reannotate(args) => match args.action {
            ReannotateAction::Export(args) => cmd_reannotate_export(&ctx, args),
            ReannotateAction::Import(args) => cmd_reannotate_import(&ctx, args),
            ReannotateAction::Summary(args) => cmd_reannotate_summary(&ctx, args),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

/// Resolution context: the loaded config file, if any.
struct Ctx {
    file: Option<FileConfig>,
}

impl Ctx {
    fn file_value(&self, key: &str) -> Option<&str> {
        self.file.as_ref().and_then(|f| f.get(key))
    }

    /// flag > file > default.
    fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.resolve_opt(flag, key)?.map_or(Ok(default), |v| Ok(v))
    }

    /// flag > file > None.
    fn resolve_opt<T>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file_value(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::validation(format!("config key {key:?}: cannot parse {raw:?}: {e}"))
            }),
        }
    }

    /// flag > file > error naming the flag.
    fn required<T>(&self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.resolve_opt(flag, key)?.ok_or_else(|| {
            CliError::validation(format!(
                "missing required --{key} (or `{key} = …` in the config file)"
            ))
        })
    }

    /// Repeatable values: flags win wholesale when any are given.
    fn list(&self, flags: &[String], key: &str) -> Vec<String> {
        if !flags.is_empty() {
            return flags.to_vec();
        }
        self.file
            .as_ref()
            .map(|f| f.get_all(key))
            .unwrap_or_default()
    }
}

fn require_input(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn ensure_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::validation(format!("cannot create out dir {}: {e}", dir.display())))
}

fn parse_corpus_format(raw: &str) -> CliResult<CorpusFormat> {
    match raw {
        "jsonl" => Ok(CorpusFormat::Jsonl),
        "csv" => Ok(CorpusFormat::Csv),
        other => Err(CliError::validation(format!(
            "unknown corpus format {other:?} (want jsonl | csv)"
        ))),
    }
}

fn parse_vector_format(raw: &str) -> CliResult<VectorFormat> {
    match raw {
        "word2vec-text" => Ok(VectorFormat::Word2vecText),
        "glove-text" => Ok(VectorFormat::GloveText),
        other => Err(CliError::validation(format!(
            "unknown vector format {other:?} (want word2vec-text | glove-text)"
        ))),
    }
}

fn parse_side(raw: &str) -> CliResult<SideFilter> {
    match raw {
        "test" => Ok(SideFilter::Test),
        "train" => Ok(SideFilter::Train),
        "all" => Ok(SideFilter::All),
        other => Err(CliError::validation(format!(
            "unknown side {other:?} (want test | train | all)"
        ))),
    }
}

fn load_corpus_opts(ctx: &Ctx, opts: &CorpusOpts) -> CliResult<Vec<Document>> {
    let path: PathBuf = ctx.required(opts.corpus.clone(), "corpus")?;
    require_input(&path, "corpus")?;
    let format =
        parse_corpus_format(&ctx.resolve(opts.format.clone(), "format", "jsonl".into())?)?;
    let id_field = ctx.resolve(opts.id_field.clone(), "id-field", "id".to_string())?;
    let text_field = ctx.resolve(opts.text_field.clone(), "text-field", "text".to_string())?;
    let docs = load_corpus(&path, format, &id_field, &text_field).map_err(CliError::runtime)?;
    let empty = docs.iter().filter(|d| d.text.is_empty()).count();
    if empty > 0 {
        eprintln!("note: {empty} documents have empty text");
    }
    Ok(docs)
}

fn load_vector_opts(ctx: &Ctx, opts: &VectorOpts) -> CliResult<VectorStore> {
    let path: PathBuf = ctx.required(opts.vectors.clone(), "vectors")?;
    require_input(&path, "vectors")?;
    let format = parse_vector_format(&ctx.resolve(
        opts.vectors_format.clone(),
        "vectors-format",
        "glove-text".into(),
    )?)?;
    let (store, report) = load_vectors(&path, format).map_err(CliError::runtime)?;
    if !report.duplicates.is_empty() {
        eprintln!(
            "note: {} duplicate tokens in {}, first occurrence kept",
            report.duplicates.len(),
            path.display()
        );
    }
    Ok(store)
}

fn resolve_transform(
    ctx: &Ctx,
    opts: &TransformOpts,
    docs: &[Document],
    store: &VectorStore,
    window: usize,
) -> CliResult<AlcTransform> {
    let path: Option<PathBuf> = ctx.resolve_opt(opts.transform.clone(), "transform")?;
    if let Some(path) = path {
        require_input(&path, "transform")?;
        let transform = load_transform(&path).map_err(CliError::runtime)?;
        if transform.dim() != store.dim() {
            return Err(CliError::validation(format!(
                "transform dimension {} does not match vectors dimension {}",
                transform.dim(),
                store.dim()
            )));
        }
        return Ok(transform);
    }
    let learn = opts.learn_transform || ctx.file_value("learn-transform") == Some("true");
    if learn {
        let min_count = ctx.resolve(opts.min_count, "min-count", 5)?;
        return learn_transform(docs, store, window, min_count).map_err(CliError::runtime);
    }
    Ok(AlcTransform::identity(store.dim()))
}

fn cmd_regress(ctx: &Ctx, args: RegressArgs) -> CliResult<()> {
    let seed: u64 = ctx.required(args.seed, "seed")?;
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let window = ctx.resolve(args.window, "window", 6)?;
    let settings = RegressionSettings {
        window,
        n_permutations: ctx.resolve(args.permutations, "permutations", 100)?,
        n_bootstrap: ctx.resolve(args.bootstrap, "bootstrap", 100)?,
        ci_level: ctx.resolve(args.ci_level, "ci-level", 0.95)?,
        seed,
        min_context: ctx.resolve(args.min_context, "min-context", 1)?,
    };
    let focal: String = ctx.required(args.focal.clone(), "focal")?;
    let covariates = ctx.list(&args.covariate, "covariate");
    if covariates.is_empty() {
        return Err(CliError::validation(
            "at least one --covariate (or `covariate = …`) is required",
        ));
    }

    let docs = load_corpus_opts(ctx, &args.corpus)?;
    let store = load_vector_opts(ctx, &args.vectors)?;
    let transform = resolve_transform(ctx, &args.transform, &docs, &store, window)?;
    let pattern = FocalPattern::parse(&focal).map_err(CliError::runtime)?;

    let report =
        run_embedding_regression(&docs, &pattern, &covariates, &store, &transform, &settings)
            .map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    write_report_csv(
        &report,
        &out_dir.join("report.csv"),
        ReportPrecision::Rounded2,
    )
    .map_err(CliError::runtime)?;
    write_report_csv(
        &report,
        &out_dir.join("report_full.csv"),
        ReportPrecision::Full,
    )
    .map_err(CliError::runtime)?;
    write_report_json(&report, &out_dir.join("report.json")).map_err(CliError::runtime)?;
    println!(
        "regressed {} instances over {} covariates (P={}, B={}, seed={})",
        report.n_instances,
        report.rows.len(),
        report.n_permutations,
        report.n_bootstrap,
        report.seed
    );
    Ok(())
}

fn cmd_simratio(ctx: &Ctx, args: SimratioArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let window = ctx.resolve(args.window, "window", 6)?;
    let k = ctx.resolve(args.k, "k", 20)?;
    let min_context = ctx.resolve(args.min_context, "min-context", 1)?;
    let focal: String = ctx.required(args.focal.clone(), "focal")?;
    let covariate: String = ctx.required(args.covariate.clone(), "covariate")?;
    let direction = match ctx
        .resolve(args.direction.clone(), "direction", "a-over-b".into())?
        .as_str()
    {
        "a-over-b" => RatioDirection::AOverB,
        "b-over-a" => RatioDirection::BOverA,
        other => {
            return Err(CliError::validation(format!(
                "unknown direction {other:?} (want a-over-b | b-over-a)"
            )))
        }
    };

    let docs = load_corpus_opts(ctx, &args.corpus)?;
    let store = load_vector_opts(ctx, &args.vectors)?;
    let transform = resolve_transform(ctx, &args.transform, &docs, &store, window)?;
    let pattern = FocalPattern::parse(&focal).map_err(CliError::runtime)?;
    let group_covariate = resolve_covariate(&docs, &covariate).map_err(CliError::runtime)?;

    let instances = extract_contexts(&docs, &pattern, window, &[group_covariate]);
    if instances.is_empty() {
        return Err(CliError::Runtime("no focal matches in the corpus".into()));
    }
    let mut embedded = Vec::new();
    for instance in &instances {
        match alc_embed(instance, &store, &transform) {
            Ok(e) if e.n_context_found >= min_context => embedded.push(e),
            Ok(_) | Err(AlcError::NoContext { .. }) => continue,
            Err(e) => return Err(CliError::runtime(e)),
        }
    }
    if embedded.is_empty() {
        return Err(CliError::Runtime(
            "no focal matches with in-vocabulary context".into(),
        ));
    }
    let groups = group_embeddings(&embedded, |inst| {
        format!("{covariate}={}", inst.covariates[0])
    })
    .map_err(CliError::runtime)?;
    let label_a = format!("{covariate}=1");
    let label_b = format!("{covariate}=0");
    let (Some(group_a), Some(group_b)) = (groups.get(&label_a), groups.get(&label_b)) else {
        return Err(CliError::Runtime(format!(
            "need focal instances on both covariate levels of {covariate:?}"
        )));
    };

    let exclude: HashSet<String> = pattern.all_tokens();
    let features =
        candidate_features(group_a, group_b, &store, k, &exclude).map_err(CliError::runtime)?;
    let rows = rank_discriminant(&features, group_a, group_b, &store, direction)
        .map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    let out = out_dir.join("ratios.csv");
    write_ratio_csv(&rows, group_a, group_b, &out).map_err(CliError::runtime)?;
    println!(
        "ranked {} features between {} (n={}) and {} (n={})",
        rows.len(),
        group_a.label,
        group_a.n_instances,
        group_b.label,
        group_b.n_instances
    );
    Ok(())
}

fn labels_from_corpus(
    ctx: &Ctx,
    opts: &CorpusOpts,
    label_spec: &str,
) -> CliResult<(Vec<Document>, HashMap<String, u8>)> {
    let docs = load_corpus_opts(ctx, opts)?;
    let covariate = resolve_covariate(&docs, label_spec).map_err(CliError::runtime)?;
    let labels = docs
        .iter()
        .zip(&covariate.values)
        .map(|(doc, v)| (doc.id.clone(), *v))
        .collect();
    Ok((docs, labels))
}

fn load_embedding_set(ctx: &Ctx, flag: Option<PathBuf>) -> CliResult<DocEmbeddingSet> {
    let path: PathBuf = ctx.required(flag, "embeddings")?;
    require_input(&path, "embeddings")?;
    load_embeddings_csv(&path).map_err(CliError::runtime)
}

fn cmd_probe_train(ctx: &Ctx, args: ProbeTrainArgs) -> CliResult<()> {
    let seed: u64 = ctx.required(args.seed, "seed")?;
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let label_spec: String = ctx.required(args.label.clone(), "label")?;
    let train_fraction = ctx.resolve(args.train_fraction, "train-fraction", 0.8)?;
    let hyper = Hyperparameters {
        l2: ctx.resolve(args.lambda, "lambda", 1e-4)?,
        max_iterations: ctx.resolve(args.max_iter, "max-iter", 500)?,
        tolerance: ctx.resolve(args.tol, "tol", 1e-6)?,
    };

    let embeddings = load_embedding_set(ctx, args.embeddings.clone())?;
    let (_, labels) = labels_from_corpus(ctx, &args.corpus, &label_spec)?;
    let assignment = split(embeddings.ids(), train_fraction, seed).map_err(CliError::runtime)?;
    let model =
        train_and_evaluate(&embeddings, &labels, &assignment, hyper).map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    save_model(&model, &out_dir.join("model.json")).map_err(CliError::runtime)?;
    let metrics_json =
        serde_json::to_string_pretty(&model.metadata.metrics).map_err(CliError::runtime)?;
    fs::write(out_dir.join("metrics.json"), metrics_json + "\n").map_err(CliError::runtime)?;
    println!(
        "trained on {} documents: train accuracy {:.4}, test accuracy {:.4} ({:?})",
        model.metadata.n_train,
        model.metadata.metrics.train_accuracy,
        model.metadata.metrics.test_accuracy,
        model.metadata.stop_reason
    );
    Ok(())
}

fn cmd_probe_eval(ctx: &Ctx, args: ProbeEvalArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let label_spec: String = ctx.required(args.label.clone(), "label")?;
    let model_path: PathBuf = ctx.required(args.model.clone(), "model")?;
    require_input(&model_path, "model")?;
    let model = load_model(&model_path).map_err(CliError::runtime)?;

    let embeddings = load_embedding_set(ctx, args.embeddings.clone())?;
    let (_, labels) = labels_from_corpus(ctx, &args.corpus, &label_spec)?;
    let assignment = split(
        embeddings.ids(),
        model.metadata.train_fraction,
        model.metadata.seed,
    )
    .map_err(CliError::runtime)?;
    let metrics = evaluate(&model, &embeddings, &labels, &assignment).map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    let metrics_json = serde_json::to_string_pretty(&metrics).map_err(CliError::runtime)?;
    fs::write(out_dir.join("metrics.json"), metrics_json + "\n").map_err(CliError::runtime)?;
    println!(
        "train accuracy {:.4}, test accuracy {:.4}",
        metrics.train_accuracy, metrics.test_accuracy
    );
    Ok(())
}

fn cmd_probe_predict(ctx: &Ctx, args: ProbePredictArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let model_path: PathBuf = ctx.required(args.model.clone(), "model")?;
    require_input(&model_path, "model")?;
    let model = load_model(&model_path).map_err(CliError::runtime)?;
    let embeddings = load_embedding_set(ctx, args.embeddings.clone())?;
    let predictions = predict(&model, &embeddings).map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    let mut out = String::from("id,probability,label\n");
    for p in &predictions {
        out.push_str(&format!("{},{},{}\n", p.id, p.probability, p.label));
    }
    fs::write(out_dir.join("predictions.csv"), out).map_err(CliError::runtime)?;
    println!("scored {} documents", predictions.len());
    Ok(())
}

fn cmd_probe_diagnose(ctx: &Ctx, args: ProbeDiagnoseArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let label_spec: String = ctx.required(args.label.clone(), "label")?;
    let side = parse_side(&ctx.resolve(args.side.clone(), "side", "test".into())?)?;
    let model_path: PathBuf = ctx.required(args.model.clone(), "model")?;
    require_input(&model_path, "model")?;
    let model = load_model(&model_path).map_err(CliError::runtime)?;

    let embeddings = load_embedding_set(ctx, args.embeddings.clone())?;
    let (docs, labels) = labels_from_corpus(ctx, &args.corpus, &label_spec)?;
    let texts: HashMap<String, String> = docs
        .iter()
        .map(|d| (d.id.clone(), d.text.clone()))
        .collect();
    let assignment = split(
        embeddings.ids(),
        model.metadata.train_fraction,
        model.metadata.seed,
    )
    .map_err(CliError::runtime)?;
    let predictions = predict(&model, &embeddings).map_err(CliError::runtime)?;
    let records = mine_disagreements(&predictions, &labels, &texts, &assignment, side)
        .map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    save_records(&records, &out_dir.join("disagreements.json")).map_err(CliError::runtime)?;
    println!("mined {} disagreements", records.len());

    // Feature ranking is optional: it needs word vectors.
    let vectors_given = args.vectors.vectors.is_some() || ctx.file_value("vectors").is_some();
    if vectors_given && !records.is_empty() {
        let store = load_vector_opts(ctx, &args.vectors)?;
        let transform = match ctx.resolve_opt(args.transform.clone(), "transform")? {
            Some(path) => {
                require_input(&path, "transform")?;
                load_transform(&path).map_err(CliError::runtime)?
            }
            None => AlcTransform::identity(store.dim()),
        };
        let k = ctx.resolve(args.k, "k", 20)?;
        let direction = match ctx
            .resolve(
                args.direction.clone(),
                "direction",
                "non-hate-over-hate".into(),
            )?
            .as_str()
        {
            "hate-over-non-hate" => RatioDirection::AOverB,
            "non-hate-over-hate" => RatioDirection::BOverA,
            other => {
                return Err(CliError::validation(format!(
                    "unknown direction {other:?} (want hate-over-non-hate | non-hate-over-hate)"
                )))
            }
        };
        let features = disagreement_features(&records, &store, &transform, k, direction)
            .map_err(CliError::runtime)?;
        write_ratio_csv(
            &features.rows,
            &features.group_hate,
            &features.group_non_hate,
            &out_dir.join("disagreement_features.csv"),
        )
        .map_err(CliError::runtime)?;
        println!("ranked {} disagreement features", features.rows.len());
    }
    Ok(())
}

fn cmd_embed_fetch(ctx: &Ctx, args: EmbedFetchArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let endpoint: String = ctx.required(args.endpoint.clone(), "endpoint")?;
    let batch_size = ctx.resolve(args.batch_size, "batch-size", 32)?;
    if batch_size == 0 {
        return Err(CliError::validation("batch-size must be at least 1"));
    }
    let model_name = ctx.resolve(args.model_name.clone(), "model-name", "default".to_string())?;

    let docs = load_corpus_opts(ctx, &args.corpus)?;
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let set = fetch_embeddings_http(&endpoint, &ids, &texts, batch_size, &model_name)
        .map_err(CliError::runtime)?;

    ensure_out_dir(&out_dir)?;
    save_embeddings_csv(&set, &out_dir.join("embeddings.csv")).map_err(CliError::runtime)?;
    println!(
        "fetched {}×{} embeddings from {endpoint}",
        set.len(),
        set.dim()
    );
    Ok(())
}

fn cmd_reannotate_export(ctx: &Ctx, args: ReannotateExportArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let records_path: PathBuf = ctx.required(args.records.clone(), "records")?;
    require_input(&records_path, "records")?;
    let records = load_records(&records_path).map_err(CliError::runtime)?;
    ensure_out_dir(&out_dir)?;
    export_reannotation(
        &records,
        &out_dir.join("reannotation.csv"),
        &out_dir.join("mapping_sealed.json"),
    )
    .map_err(CliError::runtime)?;
    println!(
        "exported {} records for blinded re-annotation",
        records.len()
    );
    Ok(())
}

fn cmd_reannotate_import(ctx: &Ctx, args: ReannotateImportArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let records_path: PathBuf = ctx.required(args.records.clone(), "records")?;
    require_input(&records_path, "records")?;
    let adjudications: PathBuf = ctx.required(args.adjudications.clone(), "adjudications")?;
    require_input(&adjudications, "adjudications")?;
    let records = load_records(&records_path).map_err(CliError::runtime)?;
    let updated = import_adjudications(&records, &adjudications).map_err(CliError::runtime)?;
    let n_adjudicated = updated.iter().filter(|r| r.adjudication.is_some()).count();
    ensure_out_dir(&out_dir)?;
    save_records(&updated, &out_dir.join("disagreements.json")).map_err(CliError::runtime)?;
    println!(
        "imported adjudications: {n_adjudicated}/{} records adjudicated",
        updated.len()
    );
    Ok(())
}

fn cmd_reannotate_summary(ctx: &Ctx, args: ReannotateSummaryArgs) -> CliResult<()> {
    let out_dir: PathBuf = ctx.resolve(args.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let records_path: PathBuf = ctx.required(args.records.clone(), "records")?;
    require_input(&records_path, "records")?;
    let records = load_records(&records_path).map_err(CliError::runtime)?;
    let summary = agreement_summary(&records).map_err(CliError::runtime)?;
    ensure_out_dir(&out_dir)?;
    write_summary_json(&summary, &out_dir.join("summary.json")).map_err(CliError::runtime)?;
    println!(
        "adjudicated {}/{}: machine {:.2}, human {:.2}, unclear {:.2}",
        summary.n_adjudicated,
        summary.n_disagreements,
        summary.machine_agreement_rate,
        summary.human_agreement_rate,
        summary.unclear_rate
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn resolution_precedence_is_flag_file_default() {
        let ctx = Ctx {
            file: Some(FileConfig::parse("window = 9\n").unwrap()),
        };
        assert_eq!(ctx.resolve(Some(3usize), "window", 6).unwrap(), 3);
        assert_eq!(ctx.resolve(None::<usize>, "window", 6).unwrap(), 9);
        assert_eq!(ctx.resolve(None::<usize>, "other", 6).unwrap(), 6);
    }

    #[test]
    fn required_reports_the_key() {
        let ctx = Ctx { file: None };
        match ctx.required(None::<u64>, "seed") {
            Err(CliError::Validation(message)) => assert!(message.contains("--seed")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
