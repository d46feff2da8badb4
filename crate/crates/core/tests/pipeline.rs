use std::collections::BTreeMap;

use ctxrank_core::corpus::{gen_synthetic, load_dataset, split_train_test, Dataset, Document, Query, SynthSpec};
use ctxrank_core::embedding::{context_key, cosine, load_embeddings, Embedder, EmbeddingStore};
use ctxrank_core::features::{AblationMask, FeatureExtractor, FeatureSchema};
use ctxrank_core::metrics::{evaluate_dataset, rank_documents};
use ctxrank_core::model::Model;
use ctxrank_core::training::{train, TrainConfig};

fn small(alpha: f64, seed: u64) -> Dataset {
    gen_synthetic(&SynthSpec {
        queries: 40,
        docs_per_query: 10,
        context_strength: alpha,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn files_round_trip_through_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(1.0, 3);
    ds.write(&dir.path().join("data")).unwrap();
    let loaded = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(loaded, ds);

    let (train_set, test_set) = split_train_test(&loaded, 0.8, 1).unwrap();
    let emb = Embedder::hashed(32, 0).unwrap();
    let config = TrainConfig {
        epochs: 8,
        hidden_widths: vec![16, 16],
        ..TrainConfig::default()
    };
    let outcome = train(&train_set, &emb, &config).unwrap();
    let path = dir.path().join("model.ctxr");
    outcome.model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, outcome.model);

    let a = evaluate_dataset(&outcome.model, &test_set, &emb, 10).unwrap();
    let b = evaluate_dataset(&back, &test_set, &emb, 10).unwrap();
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(a.per_query.len(), test_set.queries().len());
    let m = a.mean();
    for v in [m.ndcg, m.map, m.precision, m.recall] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn exported_store_reproduces_hash_features() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(1.0, 4);
    let hashed = Embedder::hashed(32, 9).unwrap();
    let mut store = EmbeddingStore::new(32).unwrap();
    let as_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    for d in ds.documents() {
        store.insert(d.id.clone(), as_f32(hashed.vector(&d.id, &d.full_text()))).unwrap();
    }
    let path = dir.path().join("vectors.emb");
    store.save(&path).unwrap();

    let loaded = load_embeddings(&path).unwrap();
    assert_eq!(loaded.dim(), 32);
    assert_eq!(loaded.len(), ds.documents().len());
    for d in ds.documents() {
        let v: Vec<f64> = loaded.get(&d.id).unwrap().iter().map(|&x| x as f64).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
    }

    // queries and context values are missing from the store and fall back to hashing
    let from_store = Embedder::with_store(loaded, 9).unwrap();
    let g = ds.groups().next().unwrap();
    let ctx = g.query.context.as_ref().unwrap();
    let (attr, value) = ctx.iter().next().unwrap();
    assert_eq!(
        from_store.vector(&context_key(attr, value), value),
        hashed.vector(&context_key(attr, value), value)
    );
    let schema = FeatureSchema::new(ds.context_schema().to_vec());
    let mask = AblationMask::combined();
    let ex_hash = FeatureExtractor::new(&ds, &schema, &hashed, Default::default()).unwrap();
    let ex_store = FeatureExtractor::new(&ds, &schema, &from_store, Default::default()).unwrap();
    for (doc, _) in &g.judged {
        let a = ex_hash.assemble(g.query, doc, mask).unwrap();
        let b = ex_store.assemble(g.query, doc, mask).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn engineer_in_seattle_prefers_context_matching_documents() {
    let emb = Embedder::hashed(64, 0).unwrap();
    let base = gen_synthetic(&SynthSpec::default()).unwrap();
    let model = train(&base, &emb, &TrainConfig::default()).unwrap().model;

    let mut docs = base.documents().to_vec();
    let mut add = |id: &str, title: &str, body: &str| {
        docs.push(Document {
            id: id.into(),
            title: title.into(),
            body: body.into(),
        });
        id.to_string()
    };
    let both = [
        add("x-both-1", "benefits policy", "page seattle team engineer information review"),
        add("x-both-2", "benefits guide", "engineer details process seattle office"),
        add("x-both-3", "benefits portal note", "seattle annual program help engineer summary"),
    ];
    let topic_only = [
        add("x-topic-1", "benefits policy", "page london team sales information review"),
        add("x-topic-2", "benefits guide", "finance details process tokyo office"),
        add("x-topic-3", "benefits portal note", "berlin annual program help legal summary"),
    ];
    let corpus = Dataset::new(
        docs,
        base.queries().to_vec(),
        base.judgments().to_vec(),
        base.context_schema().to_vec(),
    )
    .unwrap();

    let context: BTreeMap<String, String> = [("geo", "seattle"), ("job_family", "engineer")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let query = Query {
        id: "adhoc".into(),
        text: "benefits".into(),
        context: Some(context),
    };
    let ex = FeatureExtractor::new(&corpus, &model.schema, &emb, model.bm25).unwrap();
    let ranked = rank_documents(
        &model,
        &ex,
        &query,
        corpus.documents().iter().map(|d| (d, 0)),
        model.mask,
    )
    .unwrap();
    let rank_of = |id: &str| ranked.doc_ids.iter().position(|d| d == id).unwrap();
    let worst_both = both.iter().map(|d| rank_of(d)).max().unwrap();
    let best_topic = topic_only.iter().map(|d| rank_of(d)).min().unwrap();
    assert!(worst_both < best_topic, "both-context docs at worst {worst_both}, topic-only at best {best_topic}");

    // without context the context features are zero
    let plain = Query {
        context: None,
        ..query.clone()
    };
    let zeroed = rank_documents(
        &model,
        &ex,
        &plain,
        corpus.documents().iter().map(|d| (d, 0)),
        AblationMask::no_context(),
    )
    .unwrap();
    let unmasked = rank_documents(&model, &ex, &plain, corpus.documents().iter().map(|d| (d, 0)), model.mask).unwrap();
    assert_eq!(zeroed, unmasked);
}
