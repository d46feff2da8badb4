//! Tokenization, per-field corpus statistics and Okapi BM25.
//!
//! The same scorer serves both query-document matching (against the title or
//! body field) and context-document matching (against title and body joined).

use std::collections::{HashMap, HashSet};

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Which part of a document a set of statistics was built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Title,
    Body,
    TitleBody,
}

impl Field {
    pub fn text(self, doc: &Document) -> String {
        match self {
            Field::Title => doc.title.clone(),
            Field::Body => doc.body.clone(),
            Field::TitleBody => format!("{} {}", doc.title, doc.body),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    k1: f64,
    b: f64,
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 > 0.0 && k1.is_finite()) {
            return Err(Error::invalid(format!("bm25 k1 must be positive, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("bm25 b must be in [0, 1], got {b}")));
        }
        Ok(Self { k1, b })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
struct DocEntry {
    len: usize,
    term_freq: HashMap<String, u32>,
}

/// Document frequencies, lengths and term counts for one field of a corpus.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    field: Field,
    n_docs: usize,
    doc_freq: HashMap<String, u32>,
    docs: HashMap<String, DocEntry>,
    avg_len: f64,
}

impl CorpusStats {
    pub fn build<'a, I>(documents: I, field: Field) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Document>,
    {
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        let mut docs = HashMap::new();
        let mut total_len = 0usize;
        for doc in documents {
            let tokens = tokenize(&field.text(doc));
            let mut term_freq: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *term_freq.entry(t.clone()).or_default() += 1;
            }
            for t in term_freq.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            total_len += tokens.len();
            docs.insert(
                doc.id.clone(),
                DocEntry {
                    len: tokens.len(),
                    term_freq,
                },
            );
        }
        if docs.is_empty() {
            return Err(Error::invalid("cannot build corpus statistics over zero documents"));
        }
        let n_docs = docs.len();
        Ok(Self {
            field,
            n_docs,
            doc_freq,
            docs,
            avg_len: total_len as f64 / n_docs as f64,
        })
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Number of documents containing `term`; 0 for unseen terms.
    pub fn doc_freq(&self, term: &str) -> u32 {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<usize> {
        self.docs.get(doc_id).map(|d| d.len)
    }

    pub fn term_freq(&self, doc_id: &str, term: &str) -> Option<u32> {
        self.docs
            .get(doc_id)
            .map(|d| d.term_freq.get(term).copied().unwrap_or(0))
    }

    /// Feedback-free Robertson-Sparck Jones weight, `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn rsj_weight(&self, term: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 of `terms` against `doc_id`. Repeated terms count once.
    pub fn bm25(&self, terms: &[String], doc_id: &str, field: Field, params: Bm25Params) -> Result<f64> {
        if field != self.field {
            return Err(Error::invalid(format!(
                "statistics were built for {:?}, scored against {:?}",
                self.field, field
            )));
        }
        let entry = self.docs.get(doc_id).ok_or_else(|| Error::UnknownId {
            kind: "document",
            id: doc_id.to_string(),
        })?;
        // All-empty fields give avg_len 0; every tf is then 0 as well.
        let len_ratio = if self.avg_len > 0.0 {
            entry.len as f64 / self.avg_len
        } else {
            1.0
        };
        let norm = params.k1 * ((1.0 - params.b) + params.b * len_ratio);
        let mut seen = HashSet::new();
        let mut score = 0.0;
        for term in terms {
            if !seen.insert(term.as_str()) {
                continue;
            }
            let Some(&tf) = entry.term_freq.get(term) else {
                continue;
            };
            let tf = tf as f64;
            score += self.rsj_weight(term) * tf / (tf + norm);
        }
        Ok(score)
    }
}
