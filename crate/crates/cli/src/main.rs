use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};

use ctxrank_core::corpus::{gen_synthetic, load_dataset, Context, Dataset, Query, SynthSpec};
use ctxrank_core::embedding::{context_key, load_embeddings, EmbeddingStore, Embedder, DEFAULT_DIM};
use ctxrank_core::experiment::{parse_key_values, run_experiment, ExperimentConfig};
use ctxrank_core::features::{AblationMask, FeatureExtractor, FeatureSchema};
use ctxrank_core::metrics::{evaluate_with_mask, rank_documents, DEFAULT_K};
use ctxrank_core::model::Model;
use ctxrank_core::training::{grad_check, train, GradCheckConfig, LossKind, TrainConfig};
use ctxrank_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const GRAD_TOLERANCE: f64 = 1e-4;

/// Contextual learning-to-rank engine.
#[derive(Parser)]
#[command(name = "ctxrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted context-dependent relevance.
    GenSynth(GenSynthArgs),
    /// Export hash-fallback embeddings for a dataset to an EMB1 file.
    Embed(EmbedArgs),
    /// Train a ranking model on a dataset.
    Train(TrainArgs),
    /// Evaluate a model on a dataset and print a per-query TSV report.
    Eval(EvalArgs),
    /// Rank documents for an ad hoc query.
    Rank(RankArgs),
    /// Compare analytic and finite-difference gradients on random small networks.
    GradCheck(GradCheckArgs),
    /// Run a full experiment described by a key=value config file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of queries.
    #[arg(long, default_value_t = 200)]
    queries: usize,
    /// Judged documents per query.
    #[arg(long, default_value_t = 20)]
    docs_per_query: usize,
    /// Probability that a query carries a context.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Target share of partially matching documents per query.
    #[arg(long, default_value_t = 0.15)]
    good_fraction: f64,
    /// Probability that a query is a single topic word.
    #[arg(long, default_value_t = 0.2)]
    short_query_fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output EMB1 file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Hash seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct EmbedderArgs {
    /// EMB1 embeddings file. Ids missing from it fall back to hash embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Hash embedding dimension when no embeddings file is given. [default: 64, or the model's]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Hash embedding seed. [default: 0, or the model's]
    #[arg(long)]
    embed_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// key=value file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch loss log (TSV).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[command(flatten)]
    embedder: EmbedderArgs,
    /// hinge or logistic. [default: hinge]
    #[arg(long)]
    loss: Option<LossKind>,
    /// Hinge margin. [default: 1]
    #[arg(long)]
    margin: Option<f64>,
    /// Adam learning rate. [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Pairs per mini-batch. [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Pairs sampled per query. [default: 100]
    #[arg(long)]
    max_pairs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Cross layers. [default: 2]
    #[arg(long)]
    cross_layers: Option<usize>,
    /// Comma-separated hidden layer widths. [default: 64,64]
    #[arg(long)]
    hidden: Option<String>,
    /// [default: 1.2]
    #[arg(long)]
    bm25_k1: Option<f64>,
    /// [default: 0.75]
    #[arg(long)]
    bm25_b: Option<f64>,
    /// Zero all context features.
    #[arg(long)]
    no_context: bool,
    /// Zero the lexical context features.
    #[arg(long)]
    no_lexical_context: bool,
    /// Zero the semantic context features.
    #[arg(long)]
    no_semantic_context: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate with context features zeroed.
    #[arg(long)]
    no_context: bool,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory holding the candidate documents.
    #[arg(long)]
    data: PathBuf,
    /// Query text. Required unless --query-id names a dataset query.
    #[arg(long)]
    query: Option<String>,
    /// Dataset query whose judged documents become the candidates.
    #[arg(long)]
    query_id: Option<String>,
    /// Context attribute, as attr=value; repeatable.
    #[arg(long = "context", value_name = "ATTR=VALUE")]
    context: Vec<String>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random networks per loss.
    #[arg(long, default_value_t = 100)]
    configs: u64,
    /// hinge, logistic or both.
    #[arg(long, default_value = "both")]
    loss: String,
    /// First seed; network i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// key=value experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated seeds (overrides the config's `seeds`).
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<NumericFailure>().is_some() {
        return EXIT_NUMERIC;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        Some(Error::InvalidArgument(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rank(a) => rank_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn error_chain(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    let mut last = out.clone();
    for cause in err.chain().skip(1) {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn gen_synth_cmd(a: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        queries: a.queries,
        docs_per_query: a.docs_per_query,
        context_strength: a.alpha,
        good_fraction: a.good_fraction,
        short_query_fraction: a.short_query_fraction,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let ds = gen_synthetic(&spec)?;
    ds.write(&a.out)?;
    println!(
        "wrote {} queries, {} documents, {} judgments to {}",
        ds.queries().len(),
        ds.documents().len(),
        ds.judgments().len(),
        a.out.display()
    );
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let embedder = Embedder::hashed(a.dim, a.seed)?;
    let mut store = EmbeddingStore::new(a.dim)?;
    let f32s = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    for d in ds.documents() {
        store.insert(d.id.clone(), f32s(embedder.vector(&d.id, &d.full_text())))?;
    }
    for q in ds.queries() {
        store.insert(q.id.clone(), f32s(embedder.vector(&q.id, &q.text)))?;
    }
    let mut values: BTreeMap<String, &str> = BTreeMap::new();
    for q in ds.queries() {
        for (attr, value) in q.context.iter().flatten() {
            values.insert(context_key(attr, value), value);
        }
    }
    for (key, value) in values {
        store.insert(key.clone(), f32s(embedder.vector(&key, value)))?;
    }
    store.save(&a.out)?;
    println!("wrote {} vectors of dimension {} to {}", store.len(), a.dim, a.out.display());
    Ok(())
}

fn meta_value<'m>(metadata: &'m str, key: &str) -> Option<&'m str> {
    metadata
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

fn build_embedder(args: &EmbedderArgs, model: Option<&Model>) -> Result<Embedder> {
    let from_model = |key: &str| model.and_then(|m| meta_value(&m.metadata, key)).map(str::to_string);
    let seed = match args.embed_seed {
        Some(s) => s,
        None => from_model("embed_seed").map_or(Ok(0), |s| s.parse()).context("model embed_seed")?,
    };
    let embeddings = args.embeddings.clone().or_else(|| from_model("embeddings").map(PathBuf::from));
    if let Some(path) = embeddings {
        return Ok(Embedder::with_store(load_embeddings(&path)?, seed)?);
    }
    let dim = match args.embed_dim {
        Some(d) => d,
        None => from_model("embed_dim")
            .map_or(Ok(DEFAULT_DIM), |s| s.parse())
            .context("model embed_dim")?,
    };
    Ok(Embedder::hashed(dim, seed)?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::default();
    let mut embedder_args = a.embedder.clone();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        for (k, v) in parse_key_values(&text)? {
            match k.as_str() {
                "embed_dim" if embedder_args.embed_dim.is_none() => {
                    embedder_args.embed_dim = Some(v.parse().map_err(|_| usage(format!("bad embed_dim `{v}`")))?)
                }
                "embed_seed" if embedder_args.embed_seed.is_none() => {
                    embedder_args.embed_seed = Some(v.parse().map_err(|_| usage(format!("bad embed_seed `{v}`")))?)
                }
                "embeddings" if embedder_args.embeddings.is_none() => embedder_args.embeddings = Some(PathBuf::from(v)),
                "embed_dim" | "embed_seed" | "embeddings" => {}
                _ => {
                    if !config.set(&k, &v)? {
                        return Err(usage(format!("unknown config key `{k}` in {}", path.display())));
                    }
                }
            }
        }
    }
    if let Some(v) = a.loss {
        config.loss = v;
    }
    if let Some(v) = a.margin {
        config.margin = v;
    }
    if let Some(v) = a.lr {
        config.adam.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.max_pairs {
        config.max_pairs_per_query = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.cross_layers {
        config.cross_layers = v;
    }
    if let Some(v) = &a.hidden {
        config.set("hidden", v)?;
    }
    if let Some(v) = a.bm25_k1 {
        config.set("bm25_k1", &v.to_string())?;
    }
    if let Some(v) = a.bm25_b {
        config.set("bm25_b", &v.to_string())?;
    }
    if a.no_context || a.no_lexical_context || a.no_semantic_context {
        config.mask = AblationMask::new(
            config.mask.use_context() && !a.no_context,
            config.mask.use_lexical_context() && !a.no_lexical_context,
            config.mask.use_semantic_context() && !a.no_semantic_context,
        );
    }

    let ds = load_dataset(&a.data)?;
    let embedder = build_embedder(&embedder_args, None)?;
    let outcome = train(&ds, &embedder, &config)?;
    let mut model = outcome.model.clone();
    match &embedder_args.embeddings {
        Some(p) => {
            let _ = writeln!(model.metadata, "embeddings={}", p.display());
        }
        None => {
            let _ = writeln!(model.metadata, "embed_dim={}", embedder.dim());
        }
    }
    let _ = writeln!(model.metadata, "embed_seed={}", embedder.seed());
    model.save(&a.out)?;
    if let Some(path) = &a.loss_log {
        outcome.write_loss_log(path)?;
    }
    let last = outcome.history.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "trained on {} pairs for {} epochs; final mean pair loss {last:.6}; model written to {}",
        outcome.history.first().map_or(0, |e| e.pairs),
        outcome.history.len(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let embedder = build_embedder(&a.embedder, Some(&model))?;
    let extractor = FeatureExtractor::new(&ds, &model.schema, &embedder, model.bm25)?;
    let mask = if a.no_context {
        AblationMask::no_context()
    } else {
        model.mask
    };
    let report = evaluate_with_mask(&model, &extractor, a.k, mask)?;
    match &a.out {
        Some(path) => {
            report.write_tsv(path)?;
            let m = report.mean();
            println!(
                "ndcg@{k}={:.6} map={:.6} p@{k}={:.6} recall@{k}={:.6}",
                m.ndcg,
                m.map,
                m.precision,
                m.recall,
                k = a.k
            );
        }
        None => print!("{}", report.to_tsv()),
    }
    Ok(())
}

fn parse_context(pairs: &[String], schema: &FeatureSchema) -> Result<Option<Context>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut context = Context::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| usage(format!("--context expects attr=value, got `{p}`")))?;
        if !schema.context_attrs().iter().any(|a| a == k) {
            return Err(Error::UnknownAttribute(k.to_string()).into());
        }
        context.insert(k.to_string(), v.to_string());
    }
    Ok(Some(context))
}

fn rank_cmd(a: RankArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let ds: Dataset = load_dataset(&a.data)?;
    let embedder = build_embedder(&a.embedder, Some(&model))?;
    let extractor = FeatureExtractor::new(&ds, &model.schema, &embedder, model.bm25)?;
    let context = parse_context(&a.context, &model.schema)?;

    let known = a.query_id.as_deref().and_then(|id| ds.group(id));
    let query = match (&known, &a.query) {
        (Some(g), text) => Query {
            id: g.query.id.clone(),
            text: text.clone().unwrap_or_else(|| g.query.text.clone()),
            context: if a.context.is_empty() { g.query.context.clone() } else { context },
        },
        (None, Some(text)) => Query {
            id: a.query_id.clone().unwrap_or_else(|| "adhoc".to_string()),
            text: text.clone(),
            context,
        },
        (None, None) => return Err(usage("--query is required unless --query-id names a dataset query")),
    };
    let ranked = match &known {
        Some(g) => rank_documents(&model, &extractor, &query, g.judged.iter().copied(), model.mask)?,
        None => rank_documents(&model, &extractor, &query, ds.documents().iter().map(|d| (d, 0)), model.mask)?,
    };

    println!("rank\tdoc_id\tscore\ttitle");
    for (i, (id, score)) in ranked.doc_ids.iter().zip(&ranked.scores).take(a.top_n).enumerate() {
        let title = ds.document(id).map_or("", |d| d.title.as_str());
        println!("{}\t{id}\t{score:.6}\t{title}", i + 1);
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let losses = match a.loss.as_str() {
        "both" => vec![LossKind::Hinge, LossKind::Logistic],
        other => vec![other.parse::<LossKind>().map_err(|e| usage(e.to_string()))?],
    };
    let mut failed = false;
    println!("loss\tconfigs\tmax_rel_error\tmax_abs_error\tresult");
    for loss in losses {
        let mut rel = 0.0f64;
        let mut abs = 0.0f64;
        for i in 0..a.configs {
            let r = grad_check(&GradCheckConfig {
                seed: a.seed.wrapping_add(i),
                loss,
                ..GradCheckConfig::default()
            })?;
            rel = rel.max(r.max_rel_error);
            abs = abs.max(r.max_abs_error);
        }
        let ok = rel < GRAD_TOLERANCE;
        failed |= !ok;
        println!(
            "{}\t{}\t{rel:.3e}\t{abs:.3e}\t{}",
            loss.name(),
            a.configs,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed {
        return Err(NumericFailure(format!("gradient check exceeded relative error {GRAD_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_file(&a.config)?;
    let cwd = Path::new(".");
    if let Some(out) = &a.output {
        config.set("output", &out.to_string_lossy(), cwd)?;
    }
    if let Some(seeds) = &a.seeds {
        config.set("seeds", seeds, cwd)?;
    }
    let report = run_experiment(&config)?;
    print!("{}", report.summary_tsv());
    eprintln!("experiment artifacts written to {}", config.output.display());
    Ok(())
}
