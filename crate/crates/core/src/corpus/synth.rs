//! Synthetic datasets with planted context-dependent relevance.
//!
//! Every query has a topic: a head word and a tail word, or for short queries
//! the head word alone. Candidate documents either share the topic or not, and
//! every document mentions one value per context attribute.
//! For a query with context the grade is
//!
//! * 3 when the topic matches and every attribute value appears in the document,
//! * 2 when the topic matches and some but not all attribute values appear,
//! * 1 when the topic matches and no attribute value appears,
//! * 0 when the topic does not match.
//!
//! Grades 3, 2 and 1 are indistinguishable from the query text alone. Queries
//! without context see every on-topic document as 3.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Context, Dataset, Document, Judgment, Query, MAX_DOCS_PER_QUERY};
use crate::error::{Error, Result};
use crate::lexical::tokenize;

pub(crate) const TOPIC_HEADS: &[&str] = &[
    "benefits", "payroll", "vacation", "expense", "laptop", "badge", "parking", "training",
    "insurance", "relocation", "onboarding", "promotion", "pension", "visa", "mentoring",
    "wellness", "travel", "security", "hiring", "equipment",
];

pub(crate) const TOPIC_TAILS: &[&str] = &[
    "policy", "form", "portal", "deadline", "request", "guide", "schedule", "contact",
    "eligibility", "approval",
];

const QUERY_FILLER: &[&str] = &[
    "how", "to", "find", "my", "the", "for", "update", "submit", "where", "is", "check", "new",
];

const DOC_FILLER: &[&str] = &[
    "page", "team", "information", "employees", "please", "review", "details", "process",
    "office", "internal", "help", "system", "annual", "program", "document", "section",
    "overview", "link", "note", "manager", "week", "month", "year", "summary", "item", "list",
    "account", "service", "change", "question", "answer", "step", "tool", "site", "record",
    "status", "plan", "group", "local", "global",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AttributePool {
    pub name: String,
    pub values: Vec<String>,
}

impl AttributePool {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub queries: usize,
    pub docs_per_query: usize,
    pub attrs: Vec<AttributePool>,
    /// Probability that a query carries a context; 0 gives a context-free dataset.
    pub context_strength: f64,
    /// Share of each group planted as Good (partial context match).
    pub good_fraction: f64,
    /// Probability that a query is its head word alone.
    pub short_query_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            queries: 200,
            docs_per_query: 20,
            attrs: default_pools(),
            context_strength: 1.0,
            good_fraction: 0.15,
            short_query_fraction: 0.2,
            seed: 7,
        }
    }
}

pub fn default_pools() -> Vec<AttributePool> {
    vec![
        AttributePool::new(
            "geo",
            &[
                "seattle", "london", "tokyo", "berlin", "austin", "sydney", "toronto", "dublin",
                "paris", "singapore",
            ],
        ),
        AttributePool::new(
            "job_family",
            &[
                "engineer", "sales", "finance", "legal", "marketing", "recruiter", "designer",
                "scientist", "analyst", "architect",
            ],
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plant {
    Perfect,
    Good,
    Fair,
    OffTopic,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one query"));
        }
        if self.docs_per_query < 2 || self.docs_per_query > MAX_DOCS_PER_QUERY {
            return Err(Error::invalid(format!(
                "docs per query must be in 2..={MAX_DOCS_PER_QUERY}, got {}",
                self.docs_per_query
            )));
        }
        if !(0.0..=1.0).contains(&self.context_strength) {
            return Err(Error::invalid("context strength must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.good_fraction) {
            return Err(Error::invalid("good fraction must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.short_query_fraction) {
            return Err(Error::invalid("short query fraction must be in [0, 1]"));
        }
        for pool in &self.attrs {
            if pool.values.is_empty() {
                return Err(Error::invalid(format!("empty value pool for `{}`", pool.name)));
            }
            if pool.values.len() < 2 {
                return Err(Error::invalid(format!(
                    "value pool for `{}` needs at least two values",
                    pool.name
                )));
            }
            if pool.values.iter().any(|v| tokenize(v).is_empty()) {
                return Err(Error::invalid(format!(
                    "value pool for `{}` contains a value without tokens",
                    pool.name
                )));
            }
        }
        // Planted grades rely on attribute tokens being unambiguous.
        let mut owner: HashMap<String, usize> = HashMap::new();
        for (i, pool) in self.attrs.iter().enumerate() {
            for (j, v) in pool.values.iter().enumerate() {
                for t in tokenize(v) {
                    let reserved = TOPIC_HEADS.contains(&t.as_str())
                        || TOPIC_TAILS.contains(&t.as_str())
                        || DOC_FILLER.contains(&t.as_str());
                    let id = i * 1_000_000 + j;
                    if reserved || owner.insert(t.clone(), id).is_some_and(|prev| prev != id) {
                        return Err(Error::invalid(format!(
                            "attribute value token `{t}` is not unique to one value"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn plan(&self) -> Vec<Plant> {
        let m = self.docs_per_query;
        let k = self.attrs.len();
        let perfect = (m / 5).max(1);
        let fair = (3 * m / 10).max(1);
        let good = if k >= 2 {
            ((self.good_fraction * m as f64).round() as usize).min(m - perfect - fair)
        } else {
            0
        };
        let off = m - perfect - fair - good;
        let mut plan = Vec::with_capacity(m);
        plan.extend(std::iter::repeat_n(Plant::Perfect, perfect));
        plan.extend(std::iter::repeat_n(Plant::Good, good));
        plan.extend(std::iter::repeat_n(Plant::Fair, fair));
        plan.extend(std::iter::repeat_n(Plant::OffTopic, off));
        plan
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn other_value<'a, R: Rng>(rng: &mut R, values: &'a [String], avoid: &str) -> &'a str {
    loop {
        let v = &values[rng.gen_range(0..values.len())];
        if v != avoid {
            return v;
        }
    }
}

fn filler<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    (0..n).map(|_| pick(rng, DOC_FILLER).to_string()).collect()
}

/// Generates a dataset obeying the planted relevance rule. Deterministic in `spec`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schema: Vec<String> = spec.attrs.iter().map(|a| a.name.clone()).collect();
    let plan = spec.plan();

    let mut documents = Vec::with_capacity(spec.queries * spec.docs_per_query);
    let mut queries = Vec::with_capacity(spec.queries);
    let mut judgments = Vec::with_capacity(spec.queries * spec.docs_per_query);

    for qi in 0..spec.queries {
        let head_idx = rng.gen_range(0..TOPIC_HEADS.len());
        let tail_idx = rng.gen_range(0..TOPIC_TAILS.len());
        let (head, tail) = (TOPIC_HEADS[head_idx], TOPIC_TAILS[tail_idx]);

        let short = rng.gen_bool(spec.short_query_fraction);
        let words: Vec<&str> = if short {
            vec![head]
        } else {
            let n_filler = rng.gen_range(4..=6);
            let mut words: Vec<&str> = (0..n_filler).map(|_| pick(&mut rng, QUERY_FILLER)).collect();
            let pos = rng.gen_range(0..=words.len());
            words.insert(pos, tail);
            words.insert(pos, head);
            words
        };

        // Values the documents are planted against; only exposed when the query carries context.
        let target: Vec<&str> = spec
            .attrs
            .iter()
            .map(|a| a.values[rng.gen_range(0..a.values.len())].as_str())
            .collect();
        let with_context = rng.gen_bool(spec.context_strength);
        let context: Option<Context> = with_context.then(|| {
            schema
                .iter()
                .zip(&target)
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect::<BTreeMap<_, _>>()
        });

        let query_id = format!("q{qi:05}");
        queries.push(Query {
            id: query_id.clone(),
            text: words.join(" "),
            context,
        });

        let mut group = plan.clone();
        group.shuffle(&mut rng);
        for plant in group {
            let (doc_head, doc_tail) = match plant {
                Plant::OffTopic => {
                    if !short && rng.gen_bool(0.5) {
                        // shares the head word only
                        let t = loop {
                            let t = pick(&mut rng, TOPIC_TAILS);
                            if t != tail {
                                break t;
                            }
                        };
                        (head, t)
                    } else {
                        let h = loop {
                            let h = pick(&mut rng, TOPIC_HEADS);
                            if h != head {
                                break h;
                            }
                        };
                        (h, pick(&mut rng, TOPIC_TAILS))
                    }
                }
                _ if short => (head, pick(&mut rng, TOPIC_TAILS)),
                _ => (head, tail),
            };

            let matched: Vec<bool> = match plant {
                Plant::Perfect => vec![true; spec.attrs.len()],
                Plant::Fair => vec![false; spec.attrs.len()],
                Plant::Good => {
                    // non-empty proper subset
                    let k = spec.attrs.len();
                    let n_match = rng.gen_range(1..k);
                    let mut m = vec![false; k];
                    let mut idx: Vec<usize> = (0..k).collect();
                    idx.shuffle(&mut rng);
                    for &i in &idx[..n_match] {
                        m[i] = true;
                    }
                    m
                }
                Plant::OffTopic => spec.attrs.iter().map(|_| rng.gen_bool(0.5)).collect(),
            };
            let values: Vec<&str> = spec
                .attrs
                .iter()
                .zip(&target)
                .zip(&matched)
                .map(|((pool, &t), &hit)| if hit { t } else { other_value(&mut rng, &pool.values, t) })
                .collect();

            let mut title = vec![doc_head.to_string(), doc_tail.to_string()];
            let n_title = rng.gen_range(0..=2);
            title.extend(filler(&mut rng, n_title));
            let n_body = rng.gen_range(8..=16);
            let mut body = filler(&mut rng, n_body);
            for v in &values {
                let at = rng.gen_range(0..=body.len());
                body.insert(at, v.to_string());
            }
            if rng.gen_bool(0.5) {
                let at = rng.gen_range(0..=body.len());
                body.insert(at, doc_head.to_string());
            }

            let label = match (plant, with_context) {
                (Plant::OffTopic, _) => 0,
                (_, false) => 3,
                (Plant::Perfect, true) => 3,
                (Plant::Good, true) => 2,
                (Plant::Fair, true) => 1,
            };
            let doc_id = format!("d{:06}", documents.len());
            judgments.push(Judgment {
                query_id: query_id.clone(),
                doc_id: doc_id.clone(),
                label,
            });
            documents.push(Document {
                id: doc_id,
                title: title.join(" "),
                body: body.join(" "),
            });
        }
    }

    Dataset::new(documents, queries, judgments, schema)
}
