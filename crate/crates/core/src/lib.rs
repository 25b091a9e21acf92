//! Membership-inference evaluation for language models.
//!
//! The central score is the relative conditional log-likelihood: the ratio
//! of a target's log-likelihood when conditioned on a prefix of known
//! nonmember text to its unconditional log-likelihood. Members of the
//! training data tend to lose more likelihood under such a prefix, so their
//! ratio is higher. Six baseline attacks, ROC metrics, prefix construction
//! and token-level diagnostics sit around it, all over the
//! [`ScoringBackend`](scoring::ScoringBackend) trait. Two backends ship: an
//! embedded byte-level n-gram model ([`ngram`]) and a client for
//! OpenAI-compatible completion servers ([`remote`]).

pub mod error;
pub mod corpus;
pub mod scoring;
pub mod ngram;
pub mod attacks;
pub mod prefixes;
pub mod metrics;
pub mod remote;
pub mod analysis;
pub mod pipeline;

pub use error::{Error, Result};
