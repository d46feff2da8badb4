//! Ranking metrics over scored query groups.
//!
//! MAP, precision and recall treat a document as relevant when its label is
//! at least [`RELEVANT_LABEL`]. NDCG uses gain `2^label - 1` and discount
//! `log2(rank + 1)`. Rankings sort by descending score with ties broken by
//! ascending document id.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Dataset, Document, Query};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::features::{AblationMask, FeatureExtractor};
use crate::model::Model;

pub const RELEVANT_LABEL: u8 = 2;
pub const DEFAULT_K: usize = 10;

fn gain(label: u8) -> f64 {
    (1u64 << label) as f64 - 1.0
}

fn dcg(labels: &[u8], k: usize) -> f64 {
    labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| gain(l) / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(labels: &[u8], k: usize) -> f64 {
    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(labels, k) / idcg
    }
}

fn relevant(label: u8) -> bool {
    label >= RELEVANT_LABEL
}

pub fn average_precision(labels: &[u8]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if relevant(l) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Unweighted mean of per-query AP; 0 for no queries.
pub fn mean_average_precision(rankings: &[Vec<u8>]) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    rankings.iter().map(|l| average_precision(l)).sum::<f64>() / rankings.len() as f64
}

/// Relevant documents in the top `k`, divided by `k` even when the list is shorter.
pub fn precision_at_k(labels: &[u8], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    labels.iter().take(k).filter(|&&l| relevant(l)).count() as f64 / k as f64
}

pub fn recall_at_k(labels: &[u8], k: usize) -> f64 {
    let total = labels.iter().filter(|&&l| relevant(l)).count();
    if total == 0 {
        return 0.0;
    }
    labels.iter().take(k).filter(|&&l| relevant(l)).count() as f64 / total as f64
}

/// Documents of one query ordered by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RankedList {
    /// `entries` are `(doc_id, score, label)` in any order.
    pub fn new(query_id: impl Into<String>, mut entries: Vec<(String, f64, u8)>) -> Self {
        entries.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        let mut doc_ids = Vec::with_capacity(entries.len());
        let mut scores = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        for (d, s, l) in entries {
            doc_ids.push(d);
            scores.push(s);
            labels.push(l);
        }
        Self {
            query_id: query_id.into(),
            doc_ids,
            scores,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn metrics(&self, k: usize) -> QueryMetrics {
        QueryMetrics {
            query_id: self.query_id.clone(),
            ndcg: ndcg_at_k(&self.labels, k),
            average_precision: average_precision(&self.labels),
            precision: precision_at_k(&self.labels, k),
            recall: recall_at_k(&self.labels, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: f64,
    pub average_precision: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Query-averaged metric values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanMetrics {
    pub ndcg: f64,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub k: usize,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn from_rankings(rankings: &[RankedList], k: usize) -> Self {
        Self {
            k,
            per_query: rankings.iter().map(|r| r.metrics(k)).collect(),
        }
    }

    pub fn mean(&self) -> MeanMetrics {
        let n = self.per_query.len();
        if n == 0 {
            return MeanMetrics::default();
        }
        let avg = |f: fn(&QueryMetrics) -> f64| self.per_query.iter().map(f).sum::<f64>() / n as f64;
        MeanMetrics {
            ndcg: avg(|q| q.ndcg),
            map: avg(|q| q.average_precision),
            precision: avg(|q| q.precision),
            recall: avg(|q| q.recall),
        }
    }

    pub fn header(k: usize) -> String {
        format!("ndcg@{k}\tmap\tp@{k}\trecall@{k}")
    }

    /// One row per query and a final `MEAN` row.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("query_id\t{}\n", Self::header(self.k));
        for q in &self.per_query {
            let _ = writeln!(
                s,
                "{}\t{}",
                q.query_id,
                format_row(q.ndcg, q.average_precision, q.precision, q.recall)
            );
        }
        let m = self.mean();
        let _ = writeln!(s, "MEAN\t{}", format_row(m.ndcg, m.map, m.precision, m.recall));
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn format_row(ndcg: f64, map: f64, p: f64, r: f64) -> String {
    format!("{ndcg:.6}\t{map:.6}\t{p:.6}\t{r:.6}")
}

/// Scores `docs` for `query` and orders them. Labels come from `label_of`.
pub fn rank_documents<'d>(
    model: &Model,
    extractor: &FeatureExtractor<'_>,
    query: &Query,
    docs: impl IntoIterator<Item = (&'d Document, u8)>,
    mask: AblationMask,
) -> Result<RankedList> {
    let entries = docs
        .into_iter()
        .map(|(d, label)| {
            let x = extractor.assemble(query, d, mask)?;
            Ok((d.id.clone(), model.score(&x)?, label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::new(query.id.clone(), entries))
}

/// Ranks the judged documents of every query with the model's own mask.
pub fn evaluate(model: &Model, extractor: &FeatureExtractor<'_>, k: usize) -> Result<MetricsReport> {
    evaluate_with_mask(model, extractor, k, model.mask)
}

/// As [`evaluate`], assembling features under `mask` instead of the model's.
pub fn evaluate_with_mask(
    model: &Model,
    extractor: &FeatureExtractor<'_>,
    k: usize,
    mask: AblationMask,
) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if extractor.schema() != &model.schema {
        return Err(Error::SchemaMismatch(format!(
            "model expects context attributes {:?}, extractor has {:?}",
            model.schema.context_attrs(),
            extractor.schema().context_attrs()
        )));
    }
    let rankings = extractor
        .dataset()
        .groups()
        .map(|g| rank_documents(model, extractor, g.query, g.judged.iter().copied(), mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rankings(&rankings, k))
}

/// Builds an extractor from the model's schema and BM25 parameters, then evaluates.
pub fn evaluate_dataset(model: &Model, dataset: &Dataset, embedder: &Embedder, k: usize) -> Result<MetricsReport> {
    let extractor = FeatureExtractor::new(dataset, &model.schema, embedder, model.bm25)?;
    evaluate(model, &extractor, k)
}
