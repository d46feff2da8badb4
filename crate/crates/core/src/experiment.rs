//! Experiment harness: context on/off, mixed training, ablations and
//! cross-dataset evaluation over several seeds.
//!
//! For every seed each dataset is split 80/20 by query. Each training
//! combination (every dataset alone, plus all of them pooled when there are
//! several) is trained once per variant and evaluated on every test split.
//! Variants are the model without context features (`w/o`) and one model per
//! requested ablation with context features (`w/`).
//!
//! Output directory layout:
//!
//! ```text
//! config.txt           effective configuration
//! report.tsv           one row per (train, variant, eval, seed)
//! summary.tsv          seed means of report.tsv
//! splits/<data>/seed<s>.tsv
//! models/<cell>.ctxr
//! logs/<cell>.loss.tsv
//! eval/<cell>__<data>.tsv
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::corpus::{load_dataset, split_train_test, Dataset};
use crate::embedding::{load_embeddings, Embedder, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::features::{AblationMask, FeatureExtractor, FeatureSchema};
use crate::metrics::{evaluate_with_mask, format_row, MetricsReport, DEFAULT_K};
use crate::model::Model;
use crate::training::{extract_groups, train_groups, FeatureGroup, TrainConfig};

pub const THREADS_ENV: &str = "CTXRANK_THREADS";
pub const MIXED: &str = "mixed";

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Combined,
    Lexical,
    Semantic,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Combined => "combined",
            Ablation::Lexical => "lexical",
            Ablation::Semantic => "semantic",
        }
    }

    pub fn mask(self) -> AblationMask {
        match self {
            Ablation::Combined => AblationMask::combined(),
            Ablation::Lexical => AblationMask::lexical_only(),
            Ablation::Semantic => AblationMask::semantic_only(),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "combined" => Ok(Ablation::Combined),
            "lexical" => Ok(Ablation::Lexical),
            "semantic" => Ok(Ablation::Semantic),
            other => Err(Error::invalid(format!(
                "unknown ablation `{other}` (combined | lexical | semantic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    /// `false` zeroes context features for this dataset. `None` infers from the data.
    pub has_context: Option<bool>,
    /// Copies of this dataset's training groups in mixed training.
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    pub train: TrainConfig,
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub train_fraction: f64,
    pub mixed: bool,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub embeddings: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            train: TrainConfig::default(),
            ablations: vec![Ablation::Combined],
            seeds: vec![0],
            k: DEFAULT_K,
            train_fraction: 0.8,
            mixed: true,
            embed_dim: DEFAULT_DIM,
            embed_seed: 0,
            embeddings: None,
            output: PathBuf::from("experiment-out"),
        }
    }
}

impl ExperimentConfig {
    /// Reads a key=value file. Relative dataset paths resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        let base = path.parent().unwrap_or(Path::new("."));
        for (k, v) in parse_key_values(&text)? {
            config.set(&k, &v, base)?;
        }
        Ok(config)
    }

    /// Recognized keys: `dataset.<name>`, `has_context.<name>`, `repeat.<name>`,
    /// `seeds`, `ablations`, `k`, `train_fraction`, `mixed`, `embed_dim`,
    /// `embed_seed`, `embeddings`, `output`, plus every training key.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
        }
        if let Some((prefix, name)) = key.split_once('.') {
            let spec = self.dataset_entry(name);
            match prefix {
                "dataset" => spec.path = base.join(value),
                "has_context" => spec.has_context = Some(parse(key, value)?),
                "repeat" => spec.repeat = parse(key, value)?,
                _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "seeds" => self.seeds = value.split(',').map(|s| parse(key, s)).collect::<Result<_>>()?,
            "ablations" => self.ablations = value.split(',').map(str::parse).collect::<Result<_>>()?,
            "k" => self.k = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "mixed" => self.mixed = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "embed_seed" => self.embed_seed = parse(key, value)?,
            "embeddings" => self.embeddings = Some(base.join(value)),
            "output" => self.output = base.join(value),
            _ => {
                if !self.train.set(key, value)? {
                    return Err(Error::invalid(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    fn dataset_entry(&mut self, name: &str) -> &mut DatasetSpec {
        if let Some(i) = self.datasets.iter().position(|d| d.name == name) {
            return &mut self.datasets[i];
        }
        self.datasets.push(DatasetSpec {
            name: name.to_string(),
            path: PathBuf::new(),
            has_context: None,
            repeat: 1,
        });
        self.datasets.last_mut().expect("just pushed")
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::invalid("experiment needs at least one dataset"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("experiment needs at least one seed"));
        }
        if self.ablations.is_empty() {
            return Err(Error::invalid("experiment needs at least one ablation"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::invalid(format!("dataset `{}` listed twice", d.name)));
            }
            if d.name == MIXED || d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::invalid(format!("invalid dataset name `{}`", d.name)));
            }
            if d.repeat == 0 {
                return Err(Error::invalid(format!("repeat for `{}` must be at least 1", d.name)));
            }
        }
        self.train.validate()
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        for d in &self.datasets {
            let _ = writeln!(s, "dataset.{}={}", d.name, d.path.display());
            if let Some(h) = d.has_context {
                let _ = writeln!(s, "has_context.{}={h}", d.name);
            }
            let _ = writeln!(s, "repeat.{}={}", d.name, d.repeat);
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let ablations: Vec<&str> = self.ablations.iter().map(|a| a.name()).collect();
        let _ = writeln!(s, "seeds={}", seeds.join(","));
        let _ = writeln!(s, "ablations={}", ablations.join(","));
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "train_fraction={}", self.train_fraction);
        let _ = writeln!(s, "mixed={}", self.mixed);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "embed_seed={}", self.embed_seed);
        if let Some(e) = &self.embeddings {
            let _ = writeln!(s, "embeddings={}", e.display());
        }
        for line in self.train.echo().lines().filter(|l| !l.starts_with("seed=") && !l.starts_with("use_")) {
            let _ = writeln!(s, "{line}");
        }
        s
    }
}

/// One trained model: training combination, context switch and ablation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub with_context: bool,
    pub ablation: Option<Ablation>,
}

impl Variant {
    pub fn context_label(&self) -> &'static str {
        if self.with_context {
            "w/"
        } else {
            "w/o"
        }
    }

    pub fn ablation_label(&self) -> &'static str {
        self.ablation.map_or("none", Ablation::name)
    }

    pub fn mask(&self) -> AblationMask {
        match self.ablation {
            Some(a) if self.with_context => a.mask(),
            _ => AblationMask::no_context(),
        }
    }

    fn file_stem(&self) -> String {
        let ctx = if self.with_context { "with" } else { "without" };
        format!("{ctx}-{}", self.ablation_label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub train: String,
    pub variant: Variant,
    pub eval: String,
    pub seed: u64,
    pub ndcg: f64,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub k: usize,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("train\tcontext\tablation\teval\tseed\t{}\n", MetricsReport::header(self.k));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.train,
                r.variant.context_label(),
                r.variant.ablation_label(),
                r.eval,
                r.seed,
                format_row(r.ndcg, r.map, r.precision, r.recall)
            );
        }
        s
    }

    /// Seed means per (train, context, ablation, eval), in first-appearance order.
    pub fn summary(&self) -> Vec<ReportRow> {
        let mut keys: Vec<(String, Variant, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.train.clone(), r.variant.clone(), r.eval.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(train, variant, eval)| {
                let rows: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.train == train && r.variant == variant && r.eval == eval)
                    .collect();
                let n = rows.len() as f64;
                let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                ReportRow {
                    ndcg: avg(|r| r.ndcg),
                    map: avg(|r| r.map),
                    precision: avg(|r| r.precision),
                    recall: avg(|r| r.recall),
                    train,
                    variant,
                    eval,
                    seed: 0,
                }
            })
            .collect()
    }

    pub fn summary_tsv(&self) -> String {
        let summary = self.summary();
        let mut s = format!("train\tcontext\tablation\teval\tseeds\t{}\n", MetricsReport::header(self.k));
        for r in &summary {
            let seeds = self
                .rows
                .iter()
                .filter(|x| x.train == r.train && x.variant == r.variant && x.eval == r.eval)
                .count();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.train,
                r.variant.context_label(),
                r.variant.ablation_label(),
                r.eval,
                seeds,
                format_row(r.ndcg, r.map, r.precision, r.recall)
            );
        }
        s
    }

    /// Rows for one (train, variant, eval) combination across seeds.
    pub fn select(&self, train: &str, with_context: bool, ablation: Option<Ablation>, eval: &str) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| {
                r.train == train
                    && r.variant.with_context == with_context
                    && r.variant.ablation == ablation
                    && r.eval == eval
            })
            .collect()
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn split_manifest(train: &Dataset, test: &Dataset) -> String {
    let mut s = String::from("query_id\tsplit\n");
    for q in train.queries() {
        let _ = writeln!(s, "{}\ttrain", q.id);
    }
    for q in test.queries() {
        let _ = writeln!(s, "{}\ttest", q.id);
    }
    s
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker threads: {e}")))
}

/// Loads every dataset named in the config and runs [`run_loaded`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let datasets = config
        .datasets
        .iter()
        .map(|d| load_dataset(&d.path))
        .collect::<Result<Vec<_>>>()?;
    let embedder = match &config.embeddings {
        Some(path) => Embedder::with_store(load_embeddings(path)?, config.embed_seed)?,
        None => Embedder::hashed(config.embed_dim, config.embed_seed)?,
    };
    run_loaded(config, &datasets, &embedder)
}

struct Cell<'a> {
    seed: u64,
    train: String,
    members: Vec<usize>,
    variant: Variant,
    splits: &'a [(Dataset, Dataset)],
}

/// Runs the experiment on already-loaded datasets, aligned with `config.datasets`.
pub fn run_loaded(config: &ExperimentConfig, datasets: &[Dataset], embedder: &Embedder) -> Result<ExperimentReport> {
    config.validate()?;
    if datasets.len() != config.datasets.len() {
        return Err(Error::invalid("dataset list does not match the configuration"));
    }
    let schema = FeatureSchema::new(datasets[0].context_schema().to_vec());
    for (spec, ds) in config.datasets.iter().zip(datasets).skip(1) {
        if ds.context_schema() != schema.context_attrs() {
            return Err(Error::SchemaMismatch(format!(
                "dataset `{}` declares context attributes {:?}, `{}` declares {:?}",
                spec.name,
                ds.context_schema(),
                config.datasets[0].name,
                schema.context_attrs()
            )));
        }
    }
    let has_context: Vec<bool> = config
        .datasets
        .iter()
        .zip(datasets)
        .map(|(s, d)| s.has_context.unwrap_or_else(|| d.has_context()))
        .collect();

    let out = &config.output;
    write_file(&out.join("config.txt"), config.echo())?;

    let mut splits_per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut splits = Vec::with_capacity(datasets.len());
        for (spec, ds) in config.datasets.iter().zip(datasets) {
            let (train, test) = split_train_test(ds, config.train_fraction, seed)?;
            write_file(
                &out.join("splits").join(&spec.name).join(format!("seed{seed}.tsv")),
                split_manifest(&train, &test),
            )?;
            splits.push((train, test));
        }
        splits_per_seed.push(splits);
    }

    let mut combos: Vec<(String, Vec<usize>)> = config
        .datasets
        .iter()
        .enumerate()
        .map(|(i, d)| (d.name.clone(), vec![i]))
        .collect();
    if config.mixed && datasets.len() > 1 {
        combos.push((MIXED.to_string(), (0..datasets.len()).collect()));
    }
    let mut variants = vec![Variant {
        with_context: false,
        ablation: None,
    }];
    variants.extend(config.ablations.iter().map(|&a| Variant {
        with_context: true,
        ablation: Some(a),
    }));

    let mut cells = Vec::new();
    for (si, &seed) in config.seeds.iter().enumerate() {
        for (train, members) in &combos {
            for variant in &variants {
                cells.push(Cell {
                    seed,
                    train: train.clone(),
                    members: members.clone(),
                    variant: variant.clone(),
                    splits: &splits_per_seed[si],
                });
            }
        }
    }

    let ctx = RunContext {
        config,
        schema: &schema,
        embedder,
        has_context: &has_context,
    };
    let pool = thread_pool()?;
    let results: Vec<Result<Vec<ReportRow>>> = pool.install(|| cells.par_iter().map(|c| ctx.run_cell(c)).collect());
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }

    let report = ExperimentReport { k: config.k, rows };
    write_file(&out.join("report.tsv"), report.to_tsv())?;
    write_file(&out.join("summary.tsv"), report.summary_tsv())?;
    Ok(report)
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    schema: &'a FeatureSchema,
    embedder: &'a Embedder,
    has_context: &'a [bool],
}

impl RunContext<'_> {
    /// The variant's mask, with context forced off for context-free datasets.
    fn mask_for(&self, variant: &Variant, dataset: usize) -> AblationMask {
        if self.has_context[dataset] {
            variant.mask()
        } else {
            AblationMask::no_context()
        }
    }

    fn run_cell(&self, cell: &Cell<'_>) -> Result<Vec<ReportRow>> {
        let config = self.config;
        let mut groups: Vec<FeatureGroup> = Vec::new();
        for &m in &cell.members {
            let extractor = FeatureExtractor::new(&cell.splits[m].0, self.schema, self.embedder, config.train.bm25)?;
            let g = extract_groups(&extractor, self.mask_for(&cell.variant, m))?;
            for _ in 0..config.datasets[m].repeat {
                groups.extend(g.iter().cloned());
            }
        }
        let train_config = TrainConfig {
            seed: cell.seed,
            mask: cell.variant.mask(),
            ..config.train.clone()
        };
        let outcome = train_groups(&groups, self.schema, &train_config)?;
        let mut model: Model = outcome.model.clone();
        model.metadata.push_str(&format!("train_data={}\n", cell.train));

        let stem = format!("{}__{}__seed{}", cell.train, cell.variant.file_stem(), cell.seed);
        let out = &config.output;
        write_file(&out.join("models").join(format!("{stem}.ctxr")), model.to_bytes())?;
        write_file(&out.join("logs").join(format!("{stem}.loss.tsv")), outcome.loss_log())?;
        log::info!(
            "trained {stem}: final mean pair loss {:.6}",
            outcome.history.last().map_or(f64::NAN, |e| e.mean_loss)
        );

        let mut rows = Vec::new();
        for (i, spec) in config.datasets.iter().enumerate() {
            let test = &cell.splits[i].1;
            let extractor = FeatureExtractor::new(test, self.schema, self.embedder, model.bm25)?;
            let report = evaluate_with_mask(&model, &extractor, config.k, self.mask_for(&cell.variant, i))?;
            write_file(
                &out.join("eval").join(format!("{stem}__{}.tsv", spec.name)),
                report.to_tsv(),
            )?;
            let m = report.mean();
            rows.push(ReportRow {
                train: cell.train.clone(),
                variant: cell.variant.clone(),
                eval: spec.name.clone(),
                seed: cell.seed,
                ndcg: m.ndcg,
                map: m.map,
                precision: m.precision,
                recall: m.recall,
            });
        }
        Ok(rows)
    }
}
