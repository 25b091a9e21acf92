//! Scoring through an OpenAI-compatible `/v1/completions` endpoint that
//! echoes prompt log-probabilities.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{locate_target_span, BoundaryRule, CapabilitySet, ScoringBackend, TokenScores};

pub const DEFAULT_API_KEY_ENV: &str = "RECALL_API_KEY";
pub const REQUEST_ID_HEADER: &str = "x-request-id";

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Connection and pacing settings. Durations serialize as milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(rename = "timeout_ms", with = "millis")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    #[serde(rename = "request_pause_ms", with = "millis")]
    pub request_pause: Duration,
    /// First retry delay; doubles on each further retry.
    #[serde(rename = "backoff_base_ms", with = "millis")]
    pub backoff_base: Duration,
    pub boundary_rule: BoundaryRule,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_context_tokens: Option<usize>,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            max_in_flight: 4,
            request_pause: Duration::ZERO,
            backoff_base: Duration::from_millis(500),
            boundary_rule: BoundaryRule::default(),
            max_context_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.trim().is_empty() {
            return Err(Error::InvalidArgument("base_url is empty".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(Error::InvalidArgument("model_name is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidArgument("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.base_url.trim_end_matches('/'))
    }
}

struct ApiKey(String);

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

/// Request body; field order is part of the wire contract.
#[derive(Debug, Serialize)]
pub struct CompletionRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub echo: bool,
    pub logprobs: u32,
    pub temperature: u32,
}

impl<'a> CompletionRequest<'a> {
    pub fn echo_only(model: &'a str, prompt: &'a str) -> Self {
        CompletionRequest {
            model,
            prompt,
            max_tokens: 0,
            echo: true,
            logprobs: 0,
            temperature: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
}

#[derive(Debug, Deserialize)]
struct LogprobBlock {
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

/// Echoed prompt tokens as returned by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoedPrompt {
    pub tokens: Vec<String>,
    pub logprobs: Vec<Option<f64>>,
    pub offsets: Vec<usize>,
}

fn parse_response(body: &str, backend: &str) -> Result<EchoedPrompt> {
    let resp: CompletionResponse =
        serde_json::from_str(body).map_err(|e| Error::Protocol(format!("malformed completions response: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::Protocol("response has no choices".into()))?;
    let unsupported = || Error::UnsupportedCapability {
        backend: backend.to_string(),
        capability: "echoed prompt logprobs".into(),
    };
    let block = choice.logprobs.ok_or_else(unsupported)?;
    let logprobs = block.token_logprobs.ok_or_else(unsupported)?;
    let tokens = block
        .tokens
        .ok_or_else(|| Error::Protocol("logprobs.tokens missing".into()))?;
    let offsets = block
        .text_offset
        .ok_or_else(|| Error::Protocol("logprobs.text_offset missing".into()))?;
    if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
        return Err(Error::Protocol(format!(
            "length mismatch: {} tokens, {} logprobs, {} offsets",
            tokens.len(),
            logprobs.len(),
            offsets.len()
        )));
    }
    if offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Protocol("text offsets are not monotone".into()));
    }
    Ok(EchoedPrompt {
        tokens,
        logprobs,
        offsets,
    })
}

/// Builds target-span scores from an echoed prompt. `context_chars` is the
/// character length of the context, `prompt_chars` of the whole prompt.
pub fn target_scores(
    echoed: &EchoedPrompt,
    context_chars: usize,
    prompt_chars: usize,
    rule: BoundaryRule,
) -> Result<TokenScores> {
    let span = locate_target_span(&echoed.offsets, context_chars, prompt_chars, rule);
    let mut tokens = Vec::with_capacity(span.end - span.first);
    let mut logprobs = Vec::with_capacity(span.end - span.first);
    let mut dropped = 0;
    for i in span.first..span.end {
        match echoed.logprobs[i] {
            Some(lp) => {
                tokens.push(echoed.tokens[i].clone());
                logprobs.push(lp);
            }
            None => dropped += 1,
        }
    }
    if logprobs.is_empty() {
        return Err(Error::Protocol(format!(
            "no scored target tokens in echoed prompt ({dropped} null logprobs dropped)"
        )));
    }
    Ok(TokenScores::new(tokens, logprobs, span.first)?.with_boundary_stats(span.straddling, dropped))
}

/// Counting semaphore for the in-flight bound.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(Error),
    Fatal(Error),
}

/// Completions client. Shareable across threads.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    key: Option<ApiKey>,
    client: reqwest::blocking::Client,
    gate: Gate,
    next_slot: Mutex<Option<Instant>>,
    next_id: AtomicU64,
    retries: AtomicU64,
    requests: AtomicU64,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("cfg", &self.cfg)
            .field("key", &self.key)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Reads the API key from the environment variable named in `cfg`; a
    /// missing variable means no authorization header is sent.
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: RemoteConfig, key: Option<String>) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build http client: {e}")))?;
        Ok(RemoteBackend {
            gate: Gate::new(cfg.max_in_flight),
            key: key.map(ApiKey),
            cfg,
            client,
            next_slot: Mutex::new(None),
            next_id: AtomicU64::new(1),
            retries: AtomicU64::new(0),
            requests: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    /// Total retries issued so far.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    /// Total HTTP requests sent so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn wait_for_slot(&self) {
        if self.cfg.request_pause.is_zero() {
            return;
        }
        let start = {
            let mut next = self.next_slot.lock().unwrap_or_else(|p| p.into_inner());
            let now = Instant::now();
            let start = next.map_or(now, |t| t.max(now));
            *next = Some(start + self.cfg.request_pause);
            start
        };
        let now = Instant::now();
        if start > now {
            std::thread::sleep(start - now);
        }
    }

    fn attempt(&self, body: &str, request_id: &str) -> Attempt {
        self.wait_for_slot();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self
            .client
            .post(self.cfg.endpoint())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .header(REQUEST_ID_HEADER, request_id)
            .body(body.to_string());
        if let Some(key) = &self.key {
            req = req.bearer_auth(&key.0);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(Error::Transport { attempts: 0, message: e.to_string() }),
        };
        let status = resp.status();
        let echoed_id = resp
            .headers()
            .get(REQUEST_ID_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Error::Transport { attempts: 0, message: e.to_string() }),
        };
        if status.is_success() {
            if let Some(id) = echoed_id.filter(|id| id != request_id) {
                return Attempt::Fatal(Error::Protocol(format!(
                    "response correlation id {id} does not match request {request_id}"
                )));
            }
            return Attempt::Done(text);
        }
        let err = Error::Http {
            status: status.as_u16(),
            attempts: 0,
            body: text.chars().take(500).collect(),
        };
        if status.is_server_error() || status.as_u16() == 429 {
            Attempt::Retry(err)
        } else {
            Attempt::Fatal(err)
        }
    }

    /// Sends one echo request for `prompt` and returns the echoed tokens.
    pub fn echo(&self, prompt: &str) -> Result<EchoedPrompt> {
        let body = serde_json::to_string(&CompletionRequest::echo_only(&self.cfg.model_name, prompt))?;
        let request_id = format!("recall-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let _permit = self.gate.acquire();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(&body, &request_id) {
                Attempt::Done(text) => return parse_response(&text, &self.name()),
                Attempt::Fatal(e) => return Err(with_attempts(e, attempts)),
                Attempt::Retry(e) if attempts > self.cfg.max_retries => return Err(with_attempts(e, attempts)),
                Attempt::Retry(e) => {
                    let delay = self.cfg.backoff_base.saturating_mul(1 << (attempts - 1).min(16));
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    log::warn!("{request_id}: attempt {attempts} failed ({e}), retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

fn with_attempts(e: Error, n: u32) -> Error {
    match e {
        Error::Transport { message, .. } => Error::Transport { attempts: n, message },
        Error::Http { status, body, .. } => Error::Http {
            status,
            attempts: n,
            body,
        },
        other => other,
    }
}

impl ScoringBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.cfg.model_name)
    }

    fn capabilities(&self) -> CapabilitySet {
        CapabilitySet {
            per_token_logprobs: true,
            full_vocab_moments: false,
            max_context_tokens: self.cfg.max_context_tokens,
        }
    }

    fn score_target(&self, context: &str, target: &str) -> Result<TokenScores> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        let prompt = format!("{context}{target}");
        let echoed = self.echo(&prompt)?;
        let context_chars = context.chars().count();
        let prompt_chars = context_chars + target.chars().count();
        let ts = target_scores(&echoed, context_chars, prompt_chars, self.cfg.boundary_rule)?;
        if let Some(limit) = self.cfg.max_context_tokens {
            let prompt_tokens = echoed.offsets.iter().filter(|&&o| o < prompt_chars).count();
            if prompt_tokens > limit {
                return Err(Error::ContextOverflow {
                    context_tokens: ts.context_len_tokens(),
                    target_tokens: prompt_tokens - ts.context_len_tokens(),
                    limit,
                    group: None,
                });
            }
        }
        Ok(ts)
    }

    fn settings(&self) -> serde_json::Value {
        serde_json::json!({
            "backend": "remote",
            "endpoint": self.cfg.endpoint(),
            "model": self.cfg.model_name,
            "boundary_rule": self.cfg.boundary_rule,
            "max_context_tokens": self.cfg.max_context_tokens,
            "max_retries": self.cfg.max_retries,
            "max_in_flight": self.cfg.max_in_flight,
            "request_pause_ms": self.cfg.request_pause.as_millis() as u64,
            "null_logprobs": "dropped and counted per target",
        })
    }
}
