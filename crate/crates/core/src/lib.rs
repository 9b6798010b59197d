//! Audits whether two text classifiers base their decisions on the same
//! input tokens.
//!
//! The pipeline runs in five stages, each with its own file format:
//!
//! 1. [`attribution`]: word-omission effects of every token under one model
//!    (`e(x_j) = f(x)_gold - f(x without token j)_gold`).
//! 2. [`agreement`]: pair a "main" and a "biased" model's vectors, select
//!    instances both classify correctly ("easy"), score cosine similarity.
//! 3. [`calibration`]: sample instances across the similarity scale for
//!    human judgment, then tune a similar/different threshold on the
//!    negative-class F1 and report AUC and inter-annotator agreement.
//! 4. [`report`]: easy/different tables, label distributions and token
//!    heatmap pages.
//!
//! Backends ([`backends`]) are anything that maps text to logits: analytic
//! lexicon models, a logit cache, or a remote server speaking the `/v1`
//! scoring protocol.

pub mod agreement;
pub mod annotation;
pub mod attribution;
pub mod backends;
pub mod calibration;
pub mod corpus;
pub mod exec;
pub mod jsonl;
pub mod report;

pub use exec::Execution;
