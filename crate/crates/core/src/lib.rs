//! Conformal factuality filtering for retrieval-augmented answers.
//!
//! Answers are decomposed into claims, each claim is scored against the query
//! through the retrieved documents, and a threshold calibrated on labeled data
//! removes low-relevance claims so that the surviving answer is entirely
//! factual with probability at least `1 - alpha`, overall or within each
//! query group.

pub mod annotate;
pub mod backend;
pub mod cli;
pub mod conformal;
pub mod corpus;
pub mod error;
pub mod hash;
pub mod pipeline;
pub mod prompt;
pub mod similarity;
pub mod synth;

pub use annotate::{Annotator, AnnotatorConfig};
pub use conformal::{
    calibrate_marginal, calibrate_mondrian, conformal_quantile, conformal_score, filter_claims,
    pinball_loss, threshold_for, CalibrationResult, FilterOutcome, GroupPolicy, Mode, Threshold,
};
pub use corpus::{AnswerRecord, ClaimRecord, DocumentItem, EmbeddingVector, Label, QueryItem};
pub use error::{Error, Result};
pub use similarity::{cosine, score_claims, EmbeddingProviderConfig};
