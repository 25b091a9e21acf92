//! Backend-independent scoring contract.
//!
//! A backend scores the tokens of a *target* string as they appear in the
//! concatenation `context ⊕ target`. Context tokens condition the
//! prediction but are never part of the returned scores, so an empty
//! context gives the unconditional log-likelihood `LL(x)` and a prefix
//! context gives `LL(x | P)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and population standard deviation of the log-probabilities over
/// the full vocabulary at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    tokens: Vec<String>,
    logprobs: Vec<f64>,
    moments: Option<Vec<Moments>>,
    context_len_tokens: usize,
    /// Tokens that began inside the context but extended into the target.
    straddling_tokens: usize,
    /// Target tokens the backend returned without a log-probability.
    dropped_tokens: usize,
    /// Last token is the end-of-sequence symbol.
    ends_with_eos: bool,
}

impl TokenScores {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>, context_len_tokens: usize) -> Result<Self> {
        if tokens.len() != logprobs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some((i, lp)) = logprobs.iter().enumerate().find(|(_, lp)| !(**lp <= 0.0)) {
            return Err(Error::InvalidArgument(format!("logprob {lp} at position {i} is not <= 0")));
        }
        Ok(TokenScores {
            tokens,
            logprobs,
            moments: None,
            context_len_tokens,
            straddling_tokens: 0,
            dropped_tokens: 0,
            ends_with_eos: false,
        })
    }

    /// Convenience constructor for tests and tools: tokens are named by index.
    pub fn from_logprobs(logprobs: Vec<f64>) -> Result<Self> {
        let tokens = (0..logprobs.len()).map(|i| format!("t{i}")).collect();
        Self::new(tokens, logprobs, 0)
    }

    pub fn with_moments(mut self, moments: Vec<Moments>) -> Result<Self> {
        if moments.len() != self.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "{} moments for {} tokens",
                moments.len(),
                self.tokens.len()
            )));
        }
        if let Some(m) = moments.iter().find(|m| !(m.sigma >= 0.0) || !m.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid moments {m:?}")));
        }
        self.moments = Some(moments);
        Ok(self)
    }

    pub fn with_eos(mut self, ends_with_eos: bool) -> Self {
        self.ends_with_eos = ends_with_eos;
        self
    }

    pub fn with_boundary_stats(mut self, straddling: usize, dropped: usize) -> Self {
        self.straddling_tokens = straddling;
        self.dropped_tokens = dropped;
        self
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn moments(&self) -> Option<&[Moments]> {
        self.moments.as_deref()
    }

    pub fn context_len_tokens(&self) -> usize {
        self.context_len_tokens
    }

    pub fn straddling_tokens(&self) -> usize {
        self.straddling_tokens
    }

    pub fn dropped_tokens(&self) -> usize {
        self.dropped_tokens
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ends_with_eos
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    /// Log-probabilities of the visible text, without the end-of-sequence token.
    pub fn visible_logprobs(&self) -> &[f64] {
        if self.ends_with_eos {
            &self.logprobs[..self.logprobs.len() - 1]
        } else {
            &self.logprobs
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceLL {
    pub sum_ll: f64,
    pub mean_ll: f64,
    pub token_count: usize,
}

impl SequenceLL {
    pub fn value(&self, mode: LlMode) -> f64 {
        match mode {
            LlMode::Mean => self.mean_ll,
            LlMode::Sum => self.sum_ll,
        }
    }
}

pub fn sequence_ll(ts: &TokenScores) -> Result<SequenceLL> {
    if ts.is_empty() {
        return Err(Error::InvalidArgument("cannot take the log-likelihood of zero tokens".into()));
    }
    let sum_ll: f64 = ts.logprobs.iter().sum();
    Ok(SequenceLL {
        sum_ll,
        mean_ll: sum_ll / ts.len() as f64,
        token_count: ts.len(),
    })
}

/// Which sequence log-likelihood enters ratio-based scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlMode {
    #[default]
    Mean,
    Sum,
}

/// How a token that starts in the context and ends in the target is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryRule {
    /// Straddling tokens are scored as target tokens.
    #[default]
    Include,
    /// Only tokens starting at or after the target start are scored.
    Exclude,
}

/// Result of locating the target span inside a tokenized `context ⊕ target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSpan {
    /// Index of the first target token.
    pub first: usize,
    /// One past the last token belonging to the prompt.
    pub end: usize,
    pub straddling: usize,
}

/// Finds the target tokens from per-token character offsets.
///
/// `offsets` are the start offsets of each token, `target_start` the
/// character offset where the target begins and `prompt_len` the total
/// character length of the prompt; tokens starting at or past `prompt_len`
/// are not part of the prompt.
pub fn locate_target_span(offsets: &[usize], target_start: usize, prompt_len: usize, rule: BoundaryRule) -> TargetSpan {
    let end = offsets.iter().position(|&o| o >= prompt_len).unwrap_or(offsets.len());
    let first_at_or_after = offsets[..end]
        .iter()
        .position(|&o| o >= target_start)
        .unwrap_or(end);
    // a token straddles when it starts before the target and the next token
    // (or the prompt end) lies strictly past the target start
    let straddles = first_at_or_after > 0 && {
        let prev_end = offsets.get(first_at_or_after).copied().filter(|_| first_at_or_after < end).unwrap_or(prompt_len);
        prev_end > target_start && offsets[first_at_or_after - 1] < target_start
    };
    match (rule, straddles) {
        (BoundaryRule::Include, true) => TargetSpan {
            first: first_at_or_after - 1,
            end,
            straddling: 1,
        },
        (BoundaryRule::Exclude, true) => TargetSpan {
            first: first_at_or_after,
            end,
            straddling: 1,
        },
        (_, false) => TargetSpan {
            first: first_at_or_after,
            end,
            straddling: 0,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilitySet {
    pub per_token_logprobs: bool,
    pub full_vocab_moments: bool,
    /// `None` means unlimited.
    pub max_context_tokens: Option<usize>,
}

/// A language model that can score target spans under a context.
///
/// Implementations must be safe to call concurrently.
pub trait ScoringBackend: Send + Sync {
    /// Short human-readable identity, used in reports and errors.
    fn name(&self) -> String;

    fn capabilities(&self) -> CapabilitySet;

    fn score_target(&self, context: &str, target: &str) -> Result<TokenScores>;

    /// Like [`score_target`](Self::score_target) but also fills full-vocabulary moments.
    fn score_target_with_moments(&self, context: &str, target: &str) -> Result<TokenScores> {
        let _ = (context, target);
        Err(Error::UnsupportedCapability {
            backend: self.name(),
            capability: "full_vocab_moments".into(),
        })
    }

    /// Score-affecting settings of this backend, recorded in reports.
    fn settings(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for &B {
    fn name(&self) -> String {
        (**self).name()
    }
    fn capabilities(&self) -> CapabilitySet {
        (**self).capabilities()
    }
    fn score_target(&self, context: &str, target: &str) -> Result<TokenScores> {
        (**self).score_target(context, target)
    }
    fn score_target_with_moments(&self, context: &str, target: &str) -> Result<TokenScores> {
        (**self).score_target_with_moments(context, target)
    }
    fn settings(&self) -> serde_json::Value {
        (**self).settings()
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for Box<B> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn capabilities(&self) -> CapabilitySet {
        (**self).capabilities()
    }
    fn score_target(&self, context: &str, target: &str) -> Result<TokenScores> {
        (**self).score_target(context, target)
    }
    fn score_target_with_moments(&self, context: &str, target: &str) -> Result<TokenScores> {
        (**self).score_target_with_moments(context, target)
    }
    fn settings(&self) -> serde_json::Value {
        (**self).settings()
    }
}

/// Uniform distribution over 256 byte values; every byte scores `ln(1/256)`.
/// Handy as a closed-form sanity backend.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformByteBackend;

impl ScoringBackend for UniformByteBackend {
    fn name(&self) -> String {
        "uniform-byte".into()
    }

    fn capabilities(&self) -> CapabilitySet {
        CapabilitySet {
            per_token_logprobs: true,
            full_vocab_moments: true,
            max_context_tokens: None,
        }
    }

    fn score_target(&self, context: &str, target: &str) -> Result<TokenScores> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        let lp = (1.0f64 / 256.0).ln();
        let tokens = target.bytes().map(crate::ngram::byte_token).collect();
        TokenScores::new(tokens, vec![lp; target.len()], context.len())
    }

    fn score_target_with_moments(&self, context: &str, target: &str) -> Result<TokenScores> {
        let ts = self.score_target(context, target)?;
        let m = Moments {
            mu: (1.0f64 / 256.0).ln(),
            sigma: 0.0,
        };
        let n = ts.len();
        ts.with_moments(vec![m; n])
    }
}
