//! Byte-level interpolated add-k n-gram language model.
//!
//! The output vocabulary is the 256 byte values plus an end-of-sequence
//! symbol (257 symbols). Histories are padded on the left with a
//! start-of-sequence marker that is never predicted, so the first bytes of
//! every training item are counted under their own start context.
//!
//! The probability of symbol `s` after history `h` is
//!
//! ```text
//! p(s | h) = Σ_{k=1..order} w_k · (c(h_k, s) + α) / (c(h_k, ·) + α·257)
//! ```
//!
//! where `h_k` is the last `k−1` symbols of the padded history and `α` is
//! the add-k smoothing constant.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{CapabilitySet, Moments, ScoringBackend, TokenScores};

pub const VOCAB_SIZE: usize = 257;
pub const END_SYMBOL: u16 = 256;
const START_SYMBOL: u16 = 257;

const FORMAT_NAME: &str = "recall-ngram";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Byte(u8),
    End,
}

impl Symbol {
    pub fn index(self) -> u16 {
        match self {
            Symbol::Byte(b) => b as u16,
            Symbol::End => END_SYMBOL,
        }
    }

    pub fn from_index(i: u16) -> Option<Symbol> {
        match i {
            0..=255 => Some(Symbol::Byte(i as u8)),
            END_SYMBOL => Some(Symbol::End),
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Symbol> {
        (0..VOCAB_SIZE as u16).map(|i| Symbol::from_index(i).unwrap())
    }
}

/// Surface string for a byte token.
pub fn byte_token(b: u8) -> String {
    if b.is_ascii() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

pub const END_TOKEN: &str = "</s>";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct HistoryCounts {
    total: u64,
    next: HashMap<u16, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    smoothing_k: f64,
    weights: Vec<f64>,
    counts: HashMap<Vec<u16>, HistoryCounts>,
}

/// Normalized `2^k` weights for `k = 1..order`: longer histories weigh more.
pub fn geometric_weights(order: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=order).map(|k| 2f64.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn validate_params(order: usize, smoothing_k: f64, weights: &[f64]) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidArgument("order must be at least 1".into()));
    }
    if !(smoothing_k > 0.0 && smoothing_k.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing constant {smoothing_k} must be > 0")));
    }
    if weights.len() != order {
        return Err(Error::InvalidArgument(format!(
            "{} interpolation weights for order {order}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("invalid interpolation weights {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("interpolation weights sum to {sum}, not 1")));
    }
    Ok(())
}

impl NgramModel {
    /// A model with no counts; every symbol gets `1/257`.
    pub fn untrained(order: usize, smoothing_k: f64, weights: Vec<f64>) -> Result<Self> {
        validate_params(order, smoothing_k, &weights)?;
        Ok(NgramModel {
            order,
            smoothing_k,
            weights,
            counts: HashMap::new(),
        })
    }

    /// Counts every k-gram (k = 1..order) of every item, each item followed
    /// by the end symbol.
    pub fn train<I, T>(corpus: I, order: usize, smoothing_k: f64, weights: Vec<f64>) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        let mut model = Self::untrained(order, smoothing_k, weights)?;
        let mut items = 0usize;
        for item in corpus {
            model.count_item(item.as_ref());
            items += 1;
        }
        if items == 0 {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        Ok(model)
    }

    fn count_item(&mut self, item: &[u8]) {
        let mut window = vec![START_SYMBOL; self.order - 1];
        let symbols = item.iter().map(|&b| b as u16).chain(std::iter::once(END_SYMBOL));
        for s in symbols {
            for k in 1..=self.order {
                let key = &window[window.len() - (k - 1)..];
                if !self.counts.contains_key(key) {
                    self.counts.insert(key.to_vec(), HistoryCounts::default());
                }
                let entry = self.counts.get_mut(key).expect("inserted above");
                entry.total += 1;
                *entry.next.entry(s).or_insert(0) += 1;
            }
            if !window.is_empty() {
                window.remove(0);
                window.push(s);
            }
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Raw count of `next` after exactly `history` (length `0..order`).
    /// Histories are plain bytes and do not include the start marker.
    pub fn count(&self, history: &[u8], next: Symbol) -> u64 {
        let key: Vec<u16> = history.iter().map(|&b| b as u16).collect();
        self.counts
            .get(&key)
            .and_then(|c| c.next.get(&next.index()).copied())
            .unwrap_or(0)
    }

    /// Total count of symbols observed after exactly `history`.
    pub fn history_total(&self, history: &[u8]) -> u64 {
        let key: Vec<u16> = history.iter().map(|&b| b as u16).collect();
        self.counts.get(&key).map_or(0, |c| c.total)
    }

    /// Last `order − 1` symbols of the start-padded history.
    fn window_for(&self, history: &[u8]) -> Vec<u16> {
        let n = self.order - 1;
        let mut window = Vec::with_capacity(n);
        let take = history.len().min(n);
        window.extend(std::iter::repeat_n(START_SYMBOL, n - take));
        window.extend(history[history.len() - take..].iter().map(|&b| b as u16));
        window
    }

    fn denominators<'a>(&'a self, window: &'a [u16]) -> impl Iterator<Item = (f64, Option<&'a HistoryCounts>)> + 'a {
        (1..=self.order).map(move |k| {
            let key = &window[window.len() - (k - 1)..];
            let counts = self.counts.get(key);
            let total = counts.map_or(0, |c| c.total) as f64;
            (total + self.smoothing_k * VOCAB_SIZE as f64, counts)
        })
    }

    fn prob_in_window(&self, window: &[u16], s: u16) -> f64 {
        let mut base = 0.0;
        let mut observed = Vec::with_capacity(self.order);
        for (k, (denom, counts)) in self.denominators(window).enumerate() {
            let w = self.weights[k];
            base += w * self.smoothing_k / denom;
            observed.push((w / denom, counts.and_then(|c| c.next.get(&s).copied()).unwrap_or(0)));
        }
        // same operation order as `distribution_in_window`
        let mut p = base;
        for (scale, c) in observed {
            if c > 0 {
                p += scale * c as f64;
            }
        }
        p
    }

    /// Probabilities of all 257 symbols after the given padded window.
    fn distribution_in_window(&self, window: &[u16]) -> Vec<f64> {
        let mut base = 0.0;
        let mut sparse = Vec::with_capacity(self.order);
        for (k, (denom, counts)) in self.denominators(window).enumerate() {
            let w = self.weights[k];
            base += w * self.smoothing_k / denom;
            sparse.push((w / denom, counts));
        }
        let mut dist = vec![base; VOCAB_SIZE];
        for (scale, counts) in sparse {
            if let Some(c) = counts {
                for (&s, &n) in &c.next {
                    dist[s as usize] += scale * n as f64;
                }
            }
        }
        dist
    }

    /// Natural-log probability of `next` after `history`.
    pub fn token_logprob(&self, history: &[u8], next: Symbol) -> f64 {
        let window = self.window_for(history);
        self.prob_in_window(&window, next.index()).ln()
    }

    /// Natural-log probabilities of all 257 symbols, indexed by [`Symbol::index`].
    pub fn log_distribution(&self, history: &[u8]) -> Vec<f64> {
        let window = self.window_for(history);
        self.distribution_in_window(&window).into_iter().map(f64::ln).collect()
    }

    /// Mean and population standard deviation of the log-probabilities over
    /// the whole vocabulary.
    pub fn vocab_moments(&self, history: &[u8]) -> Moments {
        moments_of(&self.log_distribution(history))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    fn to_file(&self) -> ModelFile {
        let mut histories: Vec<HistoryEntry> = self
            .counts
            .iter()
            .map(|(h, c)| {
                let mut next: Vec<(u16, u64)> = c.next.iter().map(|(&s, &n)| (s, n)).collect();
                next.sort_unstable();
                HistoryEntry {
                    history: h.clone(),
                    next: next.into_iter().flat_map(|(s, n)| [s as u64, n]).collect(),
                }
            })
            .collect();
        histories.sort_by(|a, b| a.history.len().cmp(&b.history.len()).then_with(|| a.history.cmp(&b.history)));
        ModelFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            order: self.order,
            smoothing_k: self.smoothing_k,
            weights: self.weights.clone(),
            vocab_size: VOCAB_SIZE,
            end_symbol: END_SYMBOL,
            start_symbol: START_SYMBOL,
            histories,
        }
    }

    fn from_file(f: ModelFile) -> Result<Self> {
        if f.format != FORMAT_NAME {
            return Err(Error::InvalidModel(format!("unknown format {:?}", f.format)));
        }
        if f.version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!("unsupported version {}", f.version)));
        }
        if f.vocab_size != VOCAB_SIZE || f.end_symbol != END_SYMBOL || f.start_symbol != START_SYMBOL {
            return Err(Error::InvalidModel("vocabulary layout mismatch".into()));
        }
        validate_params(f.order, f.smoothing_k, &f.weights).map_err(|e| Error::InvalidModel(e.to_string()))?;
        let mut counts = HashMap::with_capacity(f.histories.len());
        for entry in f.histories {
            if entry.history.len() >= f.order || entry.history.iter().any(|&s| s == END_SYMBOL || s > START_SYMBOL) {
                return Err(Error::InvalidModel(format!("bad history {:?}", entry.history)));
            }
            if entry.next.len() % 2 != 0 {
                return Err(Error::InvalidModel("odd-length count list".into()));
            }
            let mut hc = HistoryCounts::default();
            for pair in entry.next.chunks_exact(2) {
                let (s, n) = (pair[0], pair[1]);
                if s >= VOCAB_SIZE as u64 {
                    return Err(Error::InvalidModel(format!("symbol {s} out of range")));
                }
                hc.total += n;
                hc.next.insert(s as u16, n);
            }
            if counts.insert(entry.history, hc).is_some() {
                return Err(Error::InvalidModel("duplicate history".into()));
            }
        }
        Ok(NgramModel {
            order: f.order,
            smoothing_k: f.smoothing_k,
            weights: f.weights,
            counts,
        })
    }
}

pub(crate) fn moments_of(logprobs: &[f64]) -> Moments {
    let n = logprobs.len() as f64;
    // shifting by the minimum keeps identical inputs exactly centered
    let min = logprobs.iter().copied().fold(f64::INFINITY, f64::min);
    let mu = min + logprobs.iter().map(|x| x - min).sum::<f64>() / n;
    let var = logprobs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    Moments { mu, sigma: var.sqrt() }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    order: usize,
    smoothing_k: f64,
    weights: Vec<f64>,
    vocab_size: usize,
    end_symbol: u16,
    start_symbol: u16,
    histories: Vec<HistoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryEntry {
    #[serde(rename = "h")]
    history: Vec<u16>,
    /// Flattened `[symbol, count, symbol, count, ...]`, sorted by symbol.
    #[serde(rename = "n")]
    next: Vec<u64>,
}

/// Scoring backend over an [`NgramModel`]. Tokens are bytes.
#[derive(Debug, Clone)]
pub struct NgramBackend {
    model: Arc<NgramModel>,
    score_eos: bool,
    max_context_tokens: Option<usize>,
}

impl NgramBackend {
    pub fn new(model: impl Into<Arc<NgramModel>>) -> Self {
        NgramBackend {
            model: model.into(),
            score_eos: true,
            max_context_tokens: None,
        }
    }

    /// Whether the end-of-sequence symbol is scored after the target.
    pub fn score_eos(mut self, yes: bool) -> Self {
        self.score_eos = yes;
        self
    }

    pub fn max_context_tokens(mut self, limit: Option<usize>) -> Self {
        self.max_context_tokens = limit;
        self
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }

    fn check(&self, context: &str, target: &str) -> Result<()> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        if let Some(limit) = self.max_context_tokens {
            let target_tokens = target.len() + usize::from(self.score_eos);
            if context.len() + target_tokens > limit {
                return Err(Error::ContextOverflow {
                    context_tokens: context.len(),
                    target_tokens,
                    limit,
                    group: None,
                });
            }
        }
        Ok(())
    }

    fn symbols<'a>(&self, target: &'a str) -> impl Iterator<Item = u16> + 'a {
        let eos = self.score_eos.then_some(END_SYMBOL);
        target.bytes().map(u16::from).chain(eos)
    }

    fn tokens(&self, target: &str) -> Vec<String> {
        let mut tokens: Vec<String> = target.bytes().map(byte_token).collect();
        if self.score_eos {
            tokens.push(END_TOKEN.into());
        }
        tokens
    }
}

fn advance(window: &mut [u16], s: u16) {
    if !window.is_empty() {
        window.rotate_left(1);
        *window.last_mut().unwrap() = s;
    }
}

impl ScoringBackend for NgramBackend {
    fn name(&self) -> String {
        format!("ngram(order={}, k={})", self.model.order, self.model.smoothing_k)
    }

    fn capabilities(&self) -> CapabilitySet {
        CapabilitySet {
            per_token_logprobs: true,
            full_vocab_moments: true,
            max_context_tokens: self.max_context_tokens,
        }
    }

    fn score_target(&self, context: &str, target: &str) -> Result<TokenScores> {
        self.check(context, target)?;
        let mut window = self.model.window_for(context.as_bytes());
        let mut logprobs = Vec::with_capacity(target.len() + 1);
        for s in self.symbols(target) {
            logprobs.push(self.model.prob_in_window(&window, s).ln());
            advance(&mut window, s);
        }
        Ok(TokenScores::new(self.tokens(target), logprobs, context.len())?.with_eos(self.score_eos))
    }

    fn score_target_with_moments(&self, context: &str, target: &str) -> Result<TokenScores> {
        self.check(context, target)?;
        let mut window = self.model.window_for(context.as_bytes());
        let mut logprobs = Vec::with_capacity(target.len() + 1);
        let mut moments = Vec::with_capacity(target.len() + 1);
        for s in self.symbols(target) {
            let logs: Vec<f64> = self.model.distribution_in_window(&window).into_iter().map(f64::ln).collect();
            logprobs.push(logs[s as usize]);
            moments.push(moments_of(&logs));
            advance(&mut window, s);
        }
        TokenScores::new(self.tokens(target), logprobs, context.len())?
            .with_eos(self.score_eos)
            .with_moments(moments)
    }

    fn settings(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "ngram",
            "order": self.model.order,
            "smoothing_k": self.model.smoothing_k,
            "weights": self.model.weights,
            "vocab_size": VOCAB_SIZE,
            "score_eos": self.score_eos,
            "max_context_tokens": self.max_context_tokens,
        })
    }
}
