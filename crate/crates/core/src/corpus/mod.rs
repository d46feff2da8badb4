//! Dataset model: documents, queries with optional user context, graded
//! judgments, and the newline-delimited JSON layout they are stored in.

mod split;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::split_train_test;
pub use synth::{default_pools, gen_synthetic, AttributePool, SynthSpec};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";

/// Upper bound on judged documents per query.
pub const MAX_DOCS_PER_QUERY: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub body: String,
}

impl Document {
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.body)
    }
}

/// User context, attribute name to value.
pub type Context = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Context>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub doc_id: String,
    pub label: u8,
}

/// Relevance grades, in increasing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Grade {
    Bad = 0,
    Fair = 1,
    Good = 2,
    Perfect = 3,
}

impl Grade {
    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(Grade::Bad),
            1 => Some(Grade::Fair),
            2 => Some(Grade::Good),
            3 => Some(Grade::Perfect),
            _ => None,
        }
    }

    pub fn label(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    context_attrs: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct JudgmentRecord {
    query_id: String,
    doc_id: String,
    label: i64,
}

/// A validated dataset. Construct through [`Dataset::new`] or [`load_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    documents: Vec<Document>,
    queries: Vec<Query>,
    judgments: Vec<Judgment>,
    context_schema: Vec<String>,
    doc_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
    // judgment indices per query, in query order
    groups: Vec<Vec<usize>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.documents == other.documents
            && self.queries == other.queries
            && self.judgments == other.judgments
            && self.context_schema == other.context_schema
    }
}

/// One query with its judged documents, in judgment order.
#[derive(Debug, Clone)]
pub struct QueryGroup<'a> {
    pub query: &'a Query,
    pub judged: Vec<(&'a Document, u8)>,
}

impl QueryGroup<'_> {
    pub fn labels(&self) -> Vec<u8> {
        self.judged.iter().map(|(_, l)| *l).collect()
    }
}

impl Dataset {
    pub fn new(
        documents: Vec<Document>,
        queries: Vec<Query>,
        judgments: Vec<Judgment>,
        context_schema: Vec<String>,
    ) -> Result<Self> {
        let mut seen_attrs = HashSet::new();
        for a in &context_schema {
            if a.is_empty() || !seen_attrs.insert(a.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "context attribute names must be non-empty and unique (`{a}`)"
                )));
            }
        }

        let mut doc_index = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if d.id.is_empty() {
                return Err(Error::InvalidDataset("document with empty id".into()));
            }
            if d.title.is_empty() && d.body.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "document `{}` has neither title nor body",
                    d.id
                )));
            }
            if doc_index.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "document",
                    id: d.id.clone(),
                });
            }
        }

        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.id.is_empty() {
                return Err(Error::InvalidDataset("query with empty id".into()));
            }
            if query_index.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "query",
                    id: q.id.clone(),
                });
            }
            if let Some(ctx) = &q.context {
                if let Some(bad) = ctx.keys().find(|k| !seen_attrs.contains(k.as_str())) {
                    return Err(Error::UnknownAttribute(bad.clone()));
                }
            }
        }

        let mut groups = vec![Vec::new(); queries.len()];
        let mut pairs = HashSet::with_capacity(judgments.len());
        for (i, j) in judgments.iter().enumerate() {
            let qi = *query_index.get(&j.query_id).ok_or_else(|| Error::UnknownId {
                kind: "query",
                id: j.query_id.clone(),
            })?;
            if !doc_index.contains_key(&j.doc_id) {
                return Err(Error::UnknownId {
                    kind: "document",
                    id: j.doc_id.clone(),
                });
            }
            if Grade::from_label(j.label).is_none() {
                return Err(Error::InvalidDataset(format!(
                    "label out of range: {} for ({}, {})",
                    j.label, j.query_id, j.doc_id
                )));
            }
            if !pairs.insert((j.query_id.as_str(), j.doc_id.as_str())) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate judgment ({}, {})",
                    j.query_id, j.doc_id
                )));
            }
            groups[qi].push(i);
        }
        for (q, g) in queries.iter().zip(&groups) {
            if g.is_empty() {
                return Err(Error::InvalidDataset(format!("query `{}` has no judgments", q.id)));
            }
            if g.len() > MAX_DOCS_PER_QUERY {
                return Err(Error::InvalidDataset(format!(
                    "query `{}` has {} judged documents (max {MAX_DOCS_PER_QUERY})",
                    q.id,
                    g.len()
                )));
            }
        }

        Ok(Self {
            documents,
            queries,
            judgments,
            context_schema,
            doc_index,
            query_index,
            groups,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }

    pub fn context_schema(&self) -> &[String] {
        &self.context_schema
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.doc_index.get(id).map(|&i| &self.documents[i])
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    /// True when at least one query carries a context.
    pub fn has_context(&self) -> bool {
        self.queries.iter().any(|q| q.context.is_some())
    }

    pub fn groups(&self) -> impl Iterator<Item = QueryGroup<'_>> + '_ {
        self.queries.iter().zip(&self.groups).map(|(query, idx)| QueryGroup {
            query,
            judged: idx
                .iter()
                .map(|&i| {
                    let j = &self.judgments[i];
                    (&self.documents[self.doc_index[&j.doc_id]], j.label)
                })
                .collect(),
        })
    }

    pub fn group(&self, query_id: &str) -> Option<QueryGroup<'_>> {
        let qi = *self.query_index.get(query_id)?;
        Some(QueryGroup {
            query: &self.queries[qi],
            judged: self.groups[qi]
                .iter()
                .map(|&i| {
                    let j = &self.judgments[i];
                    (&self.documents[self.doc_index[&j.doc_id]], j.label)
                })
                .collect(),
        })
    }

    /// Restricts to the given queries (kept in dataset order); all documents are retained.
    pub fn restrict_to(&self, query_ids: &HashSet<&str>) -> Result<Self> {
        let queries: Vec<Query> = self
            .queries
            .iter()
            .filter(|q| query_ids.contains(q.id.as_str()))
            .cloned()
            .collect();
        let judgments = self
            .judgments
            .iter()
            .filter(|j| query_ids.contains(j.query_id.as_str()))
            .cloned()
            .collect();
        Dataset::new(
            self.documents.clone(),
            queries,
            judgments,
            self.context_schema.clone(),
        )
    }

    /// Writes the four-file layout read by [`load_dataset`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(DOCUMENTS_FILE), &self.documents)?;
        write_jsonl(&dir.join(QUERIES_FILE), &self.queries)?;
        write_jsonl(&dir.join(JUDGMENTS_FILE), &self.judgments)?;
        let schema_path = dir.join(SCHEMA_FILE);
        let schema = SchemaFile {
            context_attrs: self.context_schema.clone(),
        };
        let mut text = serde_json::to_string(&schema).expect("schema serializes");
        text.push('\n');
        std::fs::write(&schema_path, text).map_err(|e| Error::io(&schema_path, e))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T, usize) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        check(&rec, line_no)?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema_path = dir.join(SCHEMA_FILE);
    let schema_text =
        std::fs::read_to_string(&schema_path).map_err(|e| Error::io(&schema_path, e))?;
    let schema: SchemaFile = serde_json::from_str(&schema_text).map_err(|e| Error::Malformed {
        path: schema_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;

    let documents: Vec<Document> = read_jsonl(&dir.join(DOCUMENTS_FILE), |_, _| Ok(()))?;
    let queries: Vec<Query> = read_jsonl(&dir.join(QUERIES_FILE), |_, _| Ok(()))?;

    let doc_ids: HashSet<&str> = documents.iter().map(|d| d.id.as_str()).collect();
    let query_ids: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    let judgments_path = dir.join(JUDGMENTS_FILE);
    let records: Vec<JudgmentRecord> = read_jsonl(&judgments_path, |r: &JudgmentRecord, line| {
        if !(0..=3).contains(&r.label) {
            return Err(Error::LabelOutOfRange {
                path: judgments_path.clone(),
                line,
                label: r.label,
            });
        }
        if !query_ids.contains(r.query_id.as_str()) {
            return Err(Error::UnknownId {
                kind: "query",
                id: r.query_id.clone(),
            });
        }
        if !doc_ids.contains(r.doc_id.as_str()) {
            return Err(Error::UnknownId {
                kind: "document",
                id: r.doc_id.clone(),
            });
        }
        Ok(())
    })?;
    let judgments = records
        .into_iter()
        .map(|r| Judgment {
            query_id: r.query_id,
            doc_id: r.doc_id,
            label: r.label as u8,
        })
        .collect();

    Dataset::new(documents, queries, judgments, schema.context_attrs)
}
