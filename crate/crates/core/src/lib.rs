//! Contextual learning-to-rank.
//!
//! Queries carry optional user context (for example `geo` and `job_family`).
//! Each judged (query, document) pair becomes a feature vector that stacks
//! ordinary query-document signals with per-attribute context-document
//! scores, one BM25 and one embedding cosine per attribute. A deep cross
//! network scores the vectors and is trained with pairwise losses.

pub mod corpus;
pub mod dcn;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod features;
pub mod lexical;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
