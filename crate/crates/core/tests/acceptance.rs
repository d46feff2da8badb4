//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxrank_core::corpus::{gen_synthetic, split_train_test, Dataset, Document, SynthSpec};
use ctxrank_core::dcn::{Architecture, Dcn};
use ctxrank_core::embedding::Embedder;
use ctxrank_core::experiment::{run_loaded, Ablation, DatasetSpec, ExperimentConfig, THREADS_ENV};
use ctxrank_core::features::{AblationMask, FeatureExtractor, FeatureSchema};
use ctxrank_core::lexical::{Bm25Params, CorpusStats, Field};
use ctxrank_core::metrics::{
    average_precision, evaluate_dataset, evaluate_with_mask, ndcg_at_k, precision_at_k, recall_at_k,
};
use ctxrank_core::training::{
    extract_groups, grad_check, train, train_groups, FeatureGroup, GradCheckConfig, LossKind, TrainConfig,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Criterion = Box<dyn FnOnce(&mut Bench) -> Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Trained-and-evaluated NDCG@10 on the α=1 benchmark, memoized per (seed, mask, loss).
struct Bench {
    embedder: Embedder,
    splits: HashMap<u64, (Dataset, Dataset)>,
    results: HashMap<(u64, AblationMask, LossKind), f64>,
}

impl Bench {
    fn new() -> Self {
        Self {
            embedder: Embedder::hashed(64, 0).unwrap(),
            splits: HashMap::new(),
            results: HashMap::new(),
        }
    }

    fn ndcg(&mut self, seed: u64, mask: AblationMask, loss: LossKind) -> f64 {
        if let Some(&v) = self.results.get(&(seed, mask, loss)) {
            return v;
        }
        let (train_set, test_set) = self.splits.entry(seed).or_insert_with(|| {
            let ds = gen_synthetic(&SynthSpec {
                queries: 200,
                context_strength: 1.0,
                seed,
                ..SynthSpec::default()
            })
            .unwrap();
            split_train_test(&ds, 0.8, seed).unwrap()
        });
        let config = TrainConfig {
            seed,
            mask,
            loss,
            ..TrainConfig::default()
        };
        let model = train(train_set, &self.embedder, &config).unwrap().model;
        let v = evaluate_dataset(&model, test_set, &self.embedder, 10).unwrap().mean().ndcg;
        self.results.insert((seed, mask, loss), v);
        v
    }
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for loss in [LossKind::Hinge, LossKind::Logistic] {
        for seed in 0..100 {
            let r = grad_check(&GradCheckConfig {
                seed,
                loss,
                max_dim: 16,
                ..GradCheckConfig::default()
            })
            .unwrap();
            let a = &r.architecture;
            assert!(a.input_dim <= 16 && a.cross_layers <= 3 && a.hidden_widths.iter().all(|&w| w <= 8));
            worst = worst.max(r.max_rel_error);
            configs += 1;
        }
    }
    outcome(
        worst < 1e-4,
        format!("{configs} configurations (hinge + logistic), max relative error {worst:.2e}"),
    )
}

fn cross_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let p = rng.gen_range(1..=24);
        let layers = rng.gen_range(1..=3);
        let net = Dcn::zeros(Architecture::new(p, layers, vec![4])).unwrap();
        let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let y = net.cross_stack(&x).unwrap();
        if y.iter().zip(&x).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 vectors, {mismatches} not bit-identical"))
}

fn doc(id: &str, title: &str, body: &str) -> Document {
    Document {
        id: id.into(),
        title: title.into(),
        body: body.into(),
    }
}

// Direct evaluation of the scoring formula from raw counts.
fn bm25_by_definition(docs: &[Vec<&str>], d: usize, query: &[&str], k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avg = docs.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
    let len = docs[d].len() as f64;
    let unique: HashSet<&&str> = query.iter().collect();
    let mut score = 0.0;
    for t in unique {
        let tf = docs[d].iter().filter(|w| *w == t).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|ws| ws.contains(t)).count() as f64;
        let r = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let norm = if avg > 0.0 { len / avg } else { 1.0 };
        score += r * tf / (tf + k1 * ((1.0 - b) + b * norm));
    }
    score
}

fn bm25_oracle() -> Outcome {
    let corpus = [
        doc("d1", "benefits policy", "seattle engineer benefits overview"),
        doc("d2", "payroll form", "london sales payroll payroll deadline"),
        doc("d3", "benefits guide", "benefits for every engineer"),
        doc("d4", "visa", ""),
        doc("d5", "travel policy policy", "seattle travel approval process for sales"),
    ];
    let vocab = ["benefits", "policy", "seattle", "engineer", "payroll", "sales", "travel", "absent"];
    let params = Bm25Params::default();
    let mut queries: Vec<Vec<&str>> = vec![vec![]];
    for a in vocab {
        queries.push(vec![a]);
        for b in vocab {
            queries.push(vec![a, b]);
            for c in vocab {
                queries.push(vec![a, b, c]);
            }
        }
    }
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for field in [Field::Title, Field::Body, Field::TitleBody] {
        let stats = CorpusStats::build(&corpus, field).unwrap();
        let texts: Vec<String> = corpus
            .iter()
            .map(|d| match field {
                Field::Title => d.title.clone(),
                Field::Body => d.body.clone(),
                Field::TitleBody => format!("{} {}", d.title, d.body),
            })
            .collect();
        let tokens: Vec<Vec<&str>> = texts.iter().map(|t| t.split_whitespace().collect()).collect();
        for q in &queries {
            let terms: Vec<String> = q.iter().map(|s| s.to_string()).collect();
            for (i, d) in corpus.iter().enumerate() {
                let got = stats.bm25(&terms, &d.id, field, params).unwrap();
                let want = bm25_by_definition(&tokens, i, q, 1.2, 0.75);
                worst = worst.max((got - want).abs());
                cases += 1;
            }
        }
    }

    let small = [doc("d1", "", "a b"), doc("d2", "", "a c"), doc("d3", "", "b c")];
    let stats = CorpusStats::build(&small, Field::Body).unwrap();
    let worked = stats.bm25(&["a".to_string()], "d1", Field::Body, params).unwrap();
    let worked_ok = (worked - 0.21364).abs() < 5e-6;
    outcome(
        worst < 1e-9 && worked_ok,
        format!("{cases} (query, doc, field) cases, max abs error {worst:.1e}; worked example {worked:.5}"),
    )
}

fn permutations(items: &[u8]) -> Vec<Vec<u8>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn dcg_by_definition(labels: &[u8], k: usize) -> f64 {
    let mut s = 0.0;
    for rank in 1..=labels.len().min(k) {
        s += (2f64.powi(labels[rank - 1] as i32) - 1.0) / ((rank + 1) as f64).log2();
    }
    s
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    for n in 1..=6usize {
        // every label assignment for short lists, a sample for longer ones
        let assignments: Vec<Vec<u8>> = if n <= 3 {
            (0..4usize.pow(n as u32))
                .map(|mut code| {
                    (0..n)
                        .map(|_| {
                            let l = (code % 4) as u8;
                            code /= 4;
                            l
                        })
                        .collect()
                })
                .collect()
        } else {
            (0..12).map(|_| (0..n).map(|_| rng.gen_range(0..=3)).collect()).collect()
        };
        for labels in assignments {
            let perms = permutations(&labels);
            for k in [1, 2, 3, 5, 10] {
                let ideal = perms.iter().map(|p| dcg_by_definition(p, k)).fold(0.0, f64::max);
                for p in &perms {
                    let relevant: Vec<bool> = p.iter().map(|&l| l >= 2).collect();
                    let total_rel = relevant.iter().filter(|&&r| r).count();
                    let top = relevant.iter().take(k).filter(|&&r| r).count();

                    let ndcg = if ideal == 0.0 { 0.0 } else { dcg_by_definition(p, k) / ideal };
                    let mut ap = 0.0;
                    for r in 1..=p.len() {
                        if relevant[r - 1] {
                            let hits = relevant[..r].iter().filter(|&&x| x).count();
                            ap += hits as f64 / r as f64;
                        }
                    }
                    if total_rel > 0 {
                        ap /= total_rel as f64;
                    }
                    let prec = top as f64 / k as f64;
                    let rec = if total_rel == 0 { 0.0 } else { top as f64 / total_rel as f64 };

                    for (got, want) in [
                        (ndcg_at_k(p, k), ndcg),
                        (average_precision(p), ap),
                        (precision_at_k(p, k), prec),
                        (recall_at_k(p, k), rec),
                    ] {
                        worst = worst.max((got - want).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    outcome(
        cases >= 1000 && worst <= 1e-12,
        format!("{cases} (permutation, k) cases, max abs error {worst:.1e}"),
    )
}

fn context_lift(bench: &mut Bench) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let with = bench.ndcg(seed, AblationMask::combined(), LossKind::Hinge);
        let without = bench.ndcg(seed, AblationMask::no_context(), LossKind::Hinge);
        if with - without >= 0.15 {
            wins += 1;
        }
        parts.push(format!("{:+.3}", with - without));
    }
    outcome(
        wins >= 4,
        format!("lift w/ - w/o per seed [{}], {wins}/5 seeds >= 0.15", parts.join(", ")),
    )
}

fn mixed_neutrality() -> Outcome {
    let embedder = Embedder::hashed(64, 0).unwrap();
    let ctx = gen_synthetic(&SynthSpec {
        queries: 120,
        context_strength: 1.0,
        seed: 21,
        ..SynthSpec::default()
    })
    .unwrap();
    let plain = gen_synthetic(&SynthSpec {
        queries: 120,
        context_strength: 0.0,
        seed: 22,
        ..SynthSpec::default()
    })
    .unwrap();
    let (ctx_train, _) = split_train_test(&ctx, 0.8, 0).unwrap();
    let (plain_train, plain_test) = split_train_test(&plain, 0.8, 0).unwrap();
    let schema = FeatureSchema::new(ctx.context_schema().to_vec());
    let config = TrainConfig::default();

    let mut groups: Vec<FeatureGroup> = Vec::new();
    for ds in [&ctx_train, &plain_train] {
        let ex = FeatureExtractor::new(ds, &schema, &embedder, config.bm25).unwrap();
        groups.extend(extract_groups(&ex, AblationMask::combined()).unwrap());
    }
    let mixed = train_groups(&groups, &schema, &config).unwrap().model;
    let plain_only = train(&plain_train, &embedder, &config).unwrap().model;

    let ex = FeatureExtractor::new(&plain_test, &schema, &embedder, config.bm25).unwrap();
    let mut identical = true;
    let mut means = Vec::new();
    for model in [&mixed, &plain_only] {
        let on = evaluate_with_mask(model, &ex, 10, AblationMask::combined()).unwrap();
        let off = evaluate_with_mask(model, &ex, 10, AblationMask::no_context()).unwrap();
        let same_bits = on
            .per_query
            .iter()
            .zip(&off.per_query)
            .all(|(a, b)| {
                [a.ndcg, a.average_precision, a.precision, a.recall]
                    .iter()
                    .zip([b.ndcg, b.average_precision, b.precision, b.recall])
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        identical &= same_bits && on.to_tsv() == off.to_tsv();
        means.push(on.mean().ndcg);
    }

    // w/ and w/o models trained on the context-free data alone
    let without = train(
        &plain_train,
        &embedder,
        &TrainConfig {
            mask: AblationMask::no_context(),
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .model;
    let rows_equal = evaluate_with_mask(&plain_only, &ex, 10, AblationMask::combined()).unwrap().to_tsv()
        == evaluate_with_mask(&without, &ex, 10, AblationMask::no_context()).unwrap().to_tsv();

    outcome(
        identical && rows_equal,
        format!(
            "α=0 test tables bit-identical with context on/off (mixed model ndcg@10 {:.4}, α=0 model {:.4}); w/ and w/o α=0 models identical: {rows_equal}",
            means[0], means[1]
        ),
    )
}

fn ablation_ordering(bench: &mut Bench) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let c = bench.ndcg(seed, AblationMask::combined(), LossKind::Hinge);
        let l = bench.ndcg(seed, AblationMask::lexical_only(), LossKind::Hinge);
        let s = bench.ndcg(seed, AblationMask::semantic_only(), LossKind::Hinge);
        if c >= l && c >= s {
            ok += 1;
        }
        parts.push(format!("{c:.4}/{l:.4}/{s:.4}"));
    }
    outcome(
        ok >= 4,
        format!("combined/lexical/semantic per seed [{}], ordering holds in {ok}/5", parts.join(", ")),
    )
}

fn loss_swap(bench: &mut Bench) -> Outcome {
    let mut hinge = 0.0;
    let mut logistic = 0.0;
    for seed in SEEDS {
        hinge += bench.ndcg(seed, AblationMask::combined(), LossKind::Hinge) / SEEDS.len() as f64;
        logistic += bench.ndcg(seed, AblationMask::combined(), LossKind::Logistic) / SEEDS.len() as f64;
    }
    let delta = (hinge - logistic).abs();
    outcome(
        delta < 0.05,
        format!("mean ndcg@10 over 5 seeds: hinge {hinge:.4}, logistic {logistic:.4}, |Δ| {delta:.4}"),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn end_to_end_determinism() -> Outcome {
    let datasets = vec![
        gen_synthetic(&SynthSpec {
            queries: 60,
            context_strength: 1.0,
            seed: 31,
            ..SynthSpec::default()
        })
        .unwrap(),
        gen_synthetic(&SynthSpec {
            queries: 60,
            context_strength: 0.0,
            seed: 32,
            ..SynthSpec::default()
        })
        .unwrap(),
    ];
    let embedder = Embedder::hashed(64, 0).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut trees = Vec::new();
    for (dir, threads) in dirs.iter().zip(["1", "3"]) {
        std::env::set_var(THREADS_ENV, threads);
        let config = ExperimentConfig {
            datasets: ["ctx", "plain"]
                .iter()
                .map(|n| DatasetSpec {
                    name: n.to_string(),
                    path: Path::new("unused").to_path_buf(),
                    has_context: None,
                    repeat: 1,
                })
                .collect(),
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            ablations: vec![Ablation::Combined, Ablation::Lexical, Ablation::Semantic],
            seeds: vec![0, 1],
            output: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        run_loaded(&config, &datasets, &embedder).unwrap();
        trees.push(read_tree(dir.path()));
    }
    std::env::remove_var(THREADS_ENV);
    let models = trees[0].keys().filter(|k| k.ends_with(".ctxr")).count();
    let tsvs = trees[0].keys().filter(|k| k.ends_with(".tsv")).count();
    let same = trees[0] == trees[1];
    outcome(
        same && models == 24 && trees[0].contains_key("report.tsv"),
        format!("two runs (1 and 3 worker threads): {models} model files and {tsvs} TSV files, byte-identical: {same}"),
    )
}

fn main() {
    let mut bench = Bench::new();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient correctness", Box::new(|_| gradient_correctness())),
        ("cross-layer identity", Box::new(|_| cross_identity())),
        ("BM25 oracle", Box::new(|_| bm25_oracle())),
        ("metrics oracle", Box::new(|_| metrics_oracle())),
        ("context lift", Box::new(context_lift)),
        ("mixed-training neutrality", Box::new(|_| mixed_neutrality())),
        ("ablation ordering", Box::new(ablation_ordering)),
        ("loss-swap robustness", Box::new(loss_swap)),
        ("end-to-end determinism", Box::new(|_| end_to_end_determinism())),
    ];
    let total = criteria.len();
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check(&mut bench);
        let secs = start.elapsed().as_secs_f64();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", total - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
