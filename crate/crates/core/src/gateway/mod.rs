//! Access to a completion backend: sampling programs and scoring text.
//!
//! [`Gateway`] wraps any [`CompletionBackend`] with retries and an optional
//! content-addressed disk cache. Token boundaries always come from the
//! backend; this crate never tokenizes on its own except inside the mock.

mod cache;
mod http;
mod mock;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::prompt::Span;

pub use cache::DiskCache;
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use mock::{MockBackend, MockConfig, MockProgram, MockTask};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Connection-level failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no token boundary at byte {offset} of the echoed text")]
    TokenBoundary { offset: usize },
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("continuation must be non-empty")]
    EmptyContinuation,
    #[error("span {start}..{end} is outside text of length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("span {start}..{end} selects no tokens")]
    EmptySpan { start: usize, end: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend returned malformed scores: {0}")]
    Malformed(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub logprob: f64,
}

/// Text with per-token log-probabilities. Byte offsets index into `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub tokens: Vec<ScoredToken>,
}

impl ScoredText {
    /// Builds offsets from consecutive token strings.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = (S, f64)>) -> Self {
        let mut text = String::new();
        let tokens = tokens
            .into_iter()
            .map(|(t, logprob)| {
                let t = t.into();
                let start = text.len();
                text.push_str(&t);
                ScoredToken {
                    end: text.len(),
                    start,
                    text: t,
                    logprob,
                }
            })
            .collect();
        Self { text, tokens }
    }

    pub fn total_logprob(&self) -> f64 {
        self.tokens.iter().map(|t| t.logprob).sum()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks that tokens tile the text and every log-probability is a
    /// finite non-positive number.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut cursor = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.start != cursor || t.end < t.start || self.text.get(t.start..t.end) != Some(&t.text) {
                return Err(format!("token {i} does not continue the text at byte {cursor}"));
            }
            if !t.logprob.is_finite() || t.logprob > 0.0 {
                return Err(format!("token {i} has logprob {}", t.logprob));
            }
            cursor = t.end;
        }
        if cursor != self.text.len() {
            return Err(format!("tokens cover {cursor} of {} bytes", self.text.len()));
        }
        Ok(())
    }

    /// Cuts the text at byte `at`; a token straddling the cut keeps its
    /// log-probability and loses its tail.
    pub fn truncate(&mut self, at: usize) {
        if at >= self.text.len() {
            return;
        }
        self.text.truncate(at);
        self.tokens.retain(|t| t.start < at);
        if let Some(last) = self.tokens.last_mut() {
            if last.end > at {
                last.end = at;
                last.text.truncate(at - last.start);
            }
        }
    }

    /// Shifts offsets so they index into a text that starts `by` bytes
    /// earlier, dropping the first `skip` tokens.
    fn rebase(&self, skip: usize, by: usize) -> ScoredText {
        let tokens: Vec<ScoredToken> = self.tokens[skip..]
            .iter()
            .map(|t| ScoredToken {
                text: t.text.clone(),
                start: t.start - by,
                end: t.end - by,
                logprob: t.logprob,
            })
            .collect();
        ScoredText {
            text: self.text[by..].to_string(),
            tokens,
        }
    }
}

/// Sums log-probabilities of tokens whose first byte lies in the span.
pub fn aggregate_span(scored: &ScoredText, span: Span) -> Result<(f64, usize)> {
    if span.start > span.end || span.end > scored.text.len() {
        return Err(GatewayError::SpanOutOfRange {
            start: span.start,
            end: span.end,
            len: scored.text.len(),
        });
    }
    let (sum, count) = scored
        .tokens
        .iter()
        .filter(|t| t.start >= span.start && t.start < span.end)
        .fold((0.0, 0usize), |(s, n), t| (s + t.logprob, n + 1));
    if count == 0 {
        return Err(GatewayError::EmptySpan {
            start: span.start,
            end: span.end,
        });
    }
    Ok((sum, count))
}

/// A sampled program. `scored` is absent when the backend returned no
/// log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub scored: Option<ScoredText>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub n: usize,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.4;
pub const DEFAULT_MAX_TOKENS: usize = 300;

impl SampleRequest {
    pub fn new(prompt: impl Into<String>, n: usize) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            n,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.n == 0 {
            return Err(GatewayError::InvalidRequest("n must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Log-likelihood aggregates for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    /// log p(y|x): program tokens under the Coder prompt.
    pub coder_logp: f64,
    pub coder_len: usize,
    /// log p(x|y): instruction tokens under the Reviewer prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_logp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_len: Option<usize>,
    /// log p(y): program tokens under the docstring-free prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_logp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_len: Option<usize>,
}

impl ScoreBundle {
    pub fn coder(scored: &ScoredText) -> Self {
        Self {
            coder_logp: scored.total_logprob(),
            coder_len: scored.len(),
            reviewer_logp: None,
            reviewer_len: None,
            prior_logp: None,
            prior_len: None,
        }
    }

    pub fn reviewer(&self) -> Option<(f64, usize)> {
        self.reviewer_logp.zip(self.reviewer_len)
    }

    pub fn prior(&self) -> Option<(f64, usize)> {
        self.prior_logp.zip(self.prior_len)
    }
}

/// A completion service that can sample and score text.
pub trait CompletionBackend: Send + Sync {
    /// Stable identifier used in cache keys and run manifests.
    fn identity(&self) -> String;

    fn sample(&self, request: &SampleRequest) -> std::result::Result<Vec<Completion>, BackendError>;

    /// Log-probabilities of `continuation` given `prompt`; the returned text
    /// is exactly the continuation.
    fn score(&self, prompt: &str, continuation: &str) -> std::result::Result<ScoredText, BackendError>;

    /// Whole-text scoring, if the backend can echo its prompt with
    /// log-probabilities. The first token has no context and reports 0.
    fn echo(&self, _text: &str) -> std::result::Result<Option<ScoredText>, BackendError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut op: impl FnMut() -> std::result::Result<T, BackendError>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retriable() && attempt + 1 < self.attempts => {
                    log::warn!("backend attempt {} failed: {e}", attempt + 1);
                    thread::sleep(self.base_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other.map_err(GatewayError::from),
            }
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn CompletionBackend>,
    cache: Option<DiskCache>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    fn cached<T, F>(&self, key: serde_json::Value, fetch: F) -> Result<T>
    where
        T: Serialize + for<'de> Deserialize<'de>,
        F: FnOnce() -> Result<T>,
    {
        let Some(cache) = &self.cache else {
            return fetch();
        };
        let digest = DiskCache::key(&json!([self.backend.identity(), key]));
        if let Some(hit) = cache.get(&digest)? {
            return Ok(hit);
        }
        let value = fetch()?;
        cache.put(&digest, &value)?;
        Ok(value)
    }

    /// Samples `request.n` completions, each cut at its first stop sequence.
    pub fn sample(&self, request: &SampleRequest) -> Result<Vec<Completion>> {
        request.validate()?;
        let key = json!(["sample", request]);
        self.cached(key, || {
            let mut out = self.retry.run(|| self.backend.sample(request))?;
            if out.len() != request.n {
                return Err(GatewayError::Malformed(format!(
                    "requested {} samples, got {}",
                    request.n,
                    out.len()
                )));
            }
            for c in &mut out {
                truncate_at_stop(c, &request.stop_sequences);
                if let Some(s) = &c.scored {
                    s.validate().map_err(GatewayError::Malformed)?;
                }
            }
            Ok(out)
        })
    }

    pub fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<ScoredText> {
        if continuation.is_empty() {
            return Err(GatewayError::EmptyContinuation);
        }
        self.cached(json!(["score", prompt, continuation]), || {
            let scored = self.retry.run(|| self.backend.score(prompt, continuation))?;
            if scored.text != continuation {
                return Err(GatewayError::Malformed("scored text differs from continuation".into()));
            }
            scored.validate().map_err(GatewayError::Malformed)?;
            Ok(scored)
        })
    }

    fn echo(&self, text: &str) -> Result<Option<ScoredText>> {
        self.cached(json!(["echo", text]), || {
            let scored = self.retry.run(|| self.backend.echo(text))?;
            if let Some(s) = &scored {
                if s.text != text {
                    return Err(GatewayError::Malformed("echoed text differs from prompt".into()));
                }
                s.validate().map_err(GatewayError::Malformed)?;
            }
            Ok(scored)
        })
    }

    /// Log-probability sum and token count over `span` of `text`, each token
    /// conditioned on everything before it.
    ///
    /// Uses whole-text echo scoring when the backend offers it, otherwise
    /// scores `text[span.start..]` as a continuation of `text[..span.start]`.
    pub fn score_span(&self, text: &str, span: Span) -> Result<(f64, usize)> {
        if span.start > span.end || span.end > text.len() {
            return Err(GatewayError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: text.len(),
            });
        }
        if let Some(scored) = self.echo(text)? {
            return aggregate_span(&scored, span);
        }
        let continuation = &text[span.start..];
        let scored = self.score_continuation(&text[..span.start], continuation)?;
        aggregate_span(&scored, Span::new(0, span.end - span.start))
    }
}

fn truncate_at_stop(completion: &mut Completion, stops: &[String]) {
    let Some(cut) = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| completion.text.find(s.as_str()))
        .min()
    else {
        return;
    };
    completion.text.truncate(cut);
    if let Some(s) = &mut completion.scored {
        s.truncate(cut);
    }
}

/// Shared helper for backends that only expose echo scoring: splits a
/// scored `prompt + continuation` at the prompt boundary.
pub(crate) fn split_echo(full: &ScoredText, prompt_len: usize) -> std::result::Result<ScoredText, BackendError> {
    let skip = full.tokens.iter().take_while(|t| t.end <= prompt_len).count();
    match full.tokens.get(skip) {
        Some(t) if t.start == prompt_len => Ok(full.rebase(skip, prompt_len)),
        _ => Err(BackendError::TokenBoundary { offset: prompt_len }),
    }
}
