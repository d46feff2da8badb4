//! Feature vectors for (query, document, context) triples.
//!
//! Layout: eight base query/document features followed by a
//! `(lexical, semantic)` pair for every context attribute, in schema order.

use std::collections::HashMap;

use crate::corpus::{Context, Dataset, Document, Query};
use crate::embedding::{context_key, cosine, Embedder};
use crate::error::{Error, Result};
use crate::lexical::{tokenize, Bm25Params, CorpusStats, Field};

pub const SCHEMA_VERSION: u32 = 1;

pub const BASE_FEATURES: [&str; 8] = [
    "query_len",
    "title_len",
    "body_len",
    "bm25_query_title",
    "bm25_query_body",
    "cosine_query_doc",
    "query_coverage",
    "query_in_title",
];

pub const BASE_DIM: usize = BASE_FEATURES.len();

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    context_attrs: Vec<String>,
}

impl FeatureSchema {
    pub fn new(context_attrs: Vec<String>) -> Self {
        Self { context_attrs }
    }

    pub fn context_attrs(&self) -> &[String] {
        &self.context_attrs
    }

    pub fn total_dim(&self) -> usize {
        BASE_DIM + 2 * self.context_attrs.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = BASE_FEATURES.iter().map(|s| s.to_string()).collect();
        for a in &self.context_attrs {
            names.push(format!("lex:{a}"));
            names.push(format!("sem:{a}"));
        }
        names
    }
}

/// Which context feature families are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationMask {
    use_context: bool,
    use_lexical_context: bool,
    use_semantic_context: bool,
}

impl AblationMask {
    /// Disabling context disables both sub-families.
    pub fn new(use_context: bool, lexical: bool, semantic: bool) -> Self {
        Self {
            use_context,
            use_lexical_context: use_context && lexical,
            use_semantic_context: use_context && semantic,
        }
    }

    pub fn combined() -> Self {
        Self::new(true, true, true)
    }

    pub fn no_context() -> Self {
        Self::new(false, false, false)
    }

    pub fn lexical_only() -> Self {
        Self::new(true, true, false)
    }

    pub fn semantic_only() -> Self {
        Self::new(true, false, true)
    }

    pub fn use_context(&self) -> bool {
        self.use_context
    }

    pub fn use_lexical_context(&self) -> bool {
        self.use_lexical_context
    }

    pub fn use_semantic_context(&self) -> bool {
        self.use_semantic_context
    }
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::combined()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Per-field BM25 statistics for one corpus.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    pub title: CorpusStats,
    pub body: CorpusStats,
    pub full: CorpusStats,
}

impl LexicalIndex {
    pub fn build(documents: &[Document]) -> Result<Self> {
        Ok(Self {
            title: CorpusStats::build(documents, Field::Title)?,
            body: CorpusStats::build(documents, Field::Body)?,
            full: CorpusStats::build(documents, Field::TitleBody)?,
        })
    }
}

/// Computes features against one dataset's corpus.
pub struct FeatureExtractor<'a> {
    dataset: &'a Dataset,
    schema: FeatureSchema,
    index: LexicalIndex,
    embedder: &'a Embedder,
    bm25: Bm25Params,
    doc_vectors: HashMap<&'a str, Vec<f64>>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(
        dataset: &'a Dataset,
        schema: &FeatureSchema,
        embedder: &'a Embedder,
        bm25: Bm25Params,
    ) -> Result<Self> {
        if dataset.context_schema() != schema.context_attrs() {
            return Err(Error::SchemaMismatch(format!(
                "dataset declares context attributes {:?}, model expects {:?}",
                dataset.context_schema(),
                schema.context_attrs()
            )));
        }
        let index = LexicalIndex::build(dataset.documents())?;
        let doc_vectors = dataset
            .documents()
            .iter()
            .map(|d| (d.id.as_str(), embedder.vector(&d.id, &d.full_text())))
            .collect();
        Ok(Self {
            dataset,
            schema: schema.clone(),
            index,
            embedder,
            bm25,
            doc_vectors,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    fn doc_vector(&self, doc: &Document) -> Result<&[f64]> {
        self.doc_vectors
            .get(doc.id.as_str())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId {
                kind: "document",
                id: doc.id.clone(),
            })
    }

    /// `(lexical, semantic)` score per schema attribute, flattened. Absent
    /// context or absent attribute contributes zeros.
    pub fn context_scores(&self, context: Option<&Context>, doc: &Document) -> Result<Vec<f64>> {
        let attrs = self.schema.context_attrs();
        let mut out = vec![0.0; 2 * attrs.len()];
        let Some(context) = context else {
            return Ok(out);
        };
        if let Some(bad) = context.keys().find(|k| !attrs.contains(k)) {
            return Err(Error::UnknownAttribute(bad.clone()));
        }
        let doc_vec = self.doc_vector(doc)?;
        for (k, attr) in attrs.iter().enumerate() {
            let Some(value) = context.get(attr) else {
                continue;
            };
            let terms = tokenize(value);
            out[2 * k] = self.index.full.bm25(&terms, &doc.id, Field::TitleBody, self.bm25)?;
            let value_vec = self.embedder.vector(&context_key(attr, value), value);
            out[2 * k + 1] = cosine(&value_vec, doc_vec)?;
        }
        Ok(out)
    }

    pub fn assemble(&self, query: &Query, doc: &Document, mask: AblationMask) -> Result<FeatureVector> {
        let q_tokens = tokenize(&query.text);
        let title_tokens = tokenize(&doc.title);
        let body_tokens = tokenize(&doc.body);

        let mut values = Vec::with_capacity(self.schema.total_dim());
        values.push(q_tokens.len() as f64);
        values.push(title_tokens.len() as f64);
        values.push(body_tokens.len() as f64);
        values.push(self.index.title.bm25(&q_tokens, &doc.id, Field::Title, self.bm25)?);
        values.push(self.index.body.bm25(&q_tokens, &doc.id, Field::Body, self.bm25)?);
        let q_vec = self.embedder.vector(&query.id, &query.text);
        values.push(cosine(&q_vec, self.doc_vector(doc)?)?);

        let mut unique_q: Vec<&String> = q_tokens.iter().collect();
        unique_q.sort();
        unique_q.dedup();
        if unique_q.is_empty() {
            values.push(0.0);
            values.push(0.0);
        } else {
            let covered = unique_q
                .iter()
                .filter(|t| title_tokens.contains(t) || body_tokens.contains(t))
                .count();
            values.push(covered as f64 / unique_q.len() as f64);
            let in_title = unique_q.iter().all(|t| title_tokens.contains(t));
            values.push(if in_title { 1.0 } else { 0.0 });
        }

        let context = if mask.use_context() {
            query.context.as_ref()
        } else {
            None
        };
        let mut ctx = self.context_scores(context, doc)?;
        for pair in ctx.chunks_exact_mut(2) {
            if !mask.use_lexical_context() {
                pair[0] = 0.0;
            }
            if !mask.use_semantic_context() {
                pair[1] = 0.0;
            }
        }
        values.extend(ctx);
        debug_assert_eq!(values.len(), self.schema.total_dim());
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature {} for ({}, {})",
                self.schema.feature_names()[bad],
                query.id,
                doc.id
            )));
        }
        Ok(FeatureVector(values))
    }
}

/// Per-feature z-scoring fitted on training rows (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[FeatureVector]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "normalizer needs at least 2 rows, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.as_slice()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimMismatch {
                expected: mean.len(),
                actual: std.len(),
            });
        }
        if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::invalid("normalizer standard deviations must be positive"));
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &FeatureVector) -> Result<FeatureVector> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(FeatureVector(
            x.as_slice()
                .iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| (v - m) / s)
                .collect(),
        ))
    }
}
