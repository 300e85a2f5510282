//! Deterministic in-process backend for tests and dry runs.
//!
//! Sampling draws from scripted program lists. Scoring uses a small
//! copy-augmented unigram model: each token's probability mixes a fixed base
//! rate (by token class and length) with the frequency of that exact token
//! earlier in the text. The copy term is what lets the mock reproduce the
//! familiar biases of real code models: short programs score high under the
//! Coder prompt, and a body that repeats the instruction makes the
//! instruction very likely under the Reviewer prompt.
//!
//! When a continuation is scored against a prompt that has scripted
//! programs, tokens that keep it on one of those programs also draw on the
//! programs' own next-token distribution, so the mock finds its typical
//! samples likely, as a real model would.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, Completion, CompletionBackend, SampleRequest, ScoredText};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProgram {
    pub text: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Scripted programs offered for every prompt containing `prompt_contains`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTask {
    pub prompt_contains: String,
    pub programs: Vec<MockProgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub name: String,
    /// Mixture weight of the copy distribution.
    pub copy_weight: f64,
    /// Base log-probability of an identifier or number: `-(word_cost + word_char_cost * chars)`.
    pub word_cost: f64,
    pub word_char_cost: f64,
    pub space_cost: f64,
    pub newline_cost: f64,
    pub symbol_cost: f64,
    /// Mixture weight of the scripted-program distribution while a
    /// continuation follows a scripted program.
    pub script_weight: f64,
    pub supports_echo: bool,
    pub supports_logprobs: bool,
    pub tasks: Vec<MockTask>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            name: "mock".into(),
            copy_weight: 0.8,
            word_cost: 8.0,
            word_char_cost: 0.3,
            space_cost: 0.2,
            newline_cost: 0.3,
            symbol_cost: 0.6,
            script_weight: 0.9,
            supports_echo: true,
            supports_logprobs: true,
            tasks: Vec::new(),
        }
    }
}

impl MockConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))
    }

    fn base_logprob(&self, token: &str) -> f64 {
        let first = token.chars().next().unwrap_or(' ');
        if token == "\n" {
            -self.newline_cost
        } else if first == ' ' || first == '\t' {
            -self.space_cost
        } else if first.is_alphanumeric() || first == '_' {
            -(self.word_cost + self.word_char_cost * token.chars().count() as f64)
        } else {
            -self.symbol_cost
        }
    }
}

pub struct MockBackend {
    config: MockConfig,
    identity: String,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(&config).expect("config serializes"));
        let identity = format!("mock:{}:{}", config.name, &hex::encode(digest)[..12]);
        Self {
            config,
            identity,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of backend requests served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Scores `tokens` in order, each conditioned on `history` plus the
    /// tokens before it. `script` holds the programs the prompt offers.
    fn score_tokens<'a>(&self, history: &[&'a str], tokens: &[&'a str], script: &[MockProgram]) -> ScoredText {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in history {
            *counts.entry(t).or_default() += 1;
        }
        let lambda = self.config.copy_weight;
        let mu = self.config.script_weight;
        let programs: Vec<(Vec<&str>, f64)> = script.iter().map(|p| (tokenize(&p.text), p.weight.max(0.0))).collect();
        let mut live: Vec<usize> = (0..programs.len()).filter(|&i| programs[i].1 > 0.0).collect();
        let mut scored = Vec::with_capacity(tokens.len());
        for (k, &t) in tokens.iter().enumerate() {
            let seen = history.len() + k;
            let base = self.config.base_logprob(t).exp();
            let mut p = if seen == 0 {
                base
            } else {
                let copy = *counts.get(t).unwrap_or(&0) as f64 / seen as f64;
                lambda * copy + (1.0 - lambda) * base
            };
            if !live.is_empty() {
                let total: f64 = live.iter().map(|&i| programs[i].1).sum();
                live.retain(|&i| programs[i].0.get(k) == Some(&t));
                let on: f64 = live.iter().map(|&i| programs[i].1).sum();
                if on > 0.0 {
                    p = mu * on / total + (1.0 - mu) * p;
                }
            }
            *counts.entry(t).or_default() += 1;
            scored.push((t, p.ln().min(0.0)));
        }
        ScoredText::from_tokens(scored)
    }

    fn programs_for(&self, prompt: &str) -> Result<&[MockProgram], BackendError> {
        self.config
            .tasks
            .iter()
            .find(|t| prompt.contains(&t.prompt_contains))
            .map(|t| t.programs.as_slice())
            .filter(|p| !p.is_empty())
            .ok_or_else(|| BackendError::Protocol("mock has no scripted programs for this prompt".into()))
    }
}

/// Identifier runs, horizontal whitespace runs, single newlines and single
/// other characters.
pub(crate) fn tokenize(text: &str) -> Vec<&str> {
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Word,
        Space,
        Other,
    }
    let class = |c: char| {
        if c.is_alphanumeric() || c == '_' {
            Class::Word
        } else if c == ' ' || c == '\t' {
            Class::Space
        } else {
            Class::Other
        }
    };
    let mut tokens = Vec::new();
    let mut start = 0;
    let mut current: Option<Class> = None;
    for (i, c) in text.char_indices() {
        let k = class(c);
        match current {
            Some(prev) if prev == k && k != Class::Other => {}
            Some(_) => {
                tokens.push(&text[start..i]);
                start = i;
            }
            None => {}
        }
        current = Some(k);
    }
    if start < text.len() {
        tokens.push(&text[start..]);
    }
    tokens
}

fn request_seed(request: &SampleRequest) -> u64 {
    let mut h = Sha256::new();
    h.update(request.prompt.as_bytes());
    h.update(request.seed.unwrap_or(0).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl CompletionBackend for MockBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn sample(&self, request: &SampleRequest) -> Result<Vec<Completion>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let programs = self.programs_for(&request.prompt)?;
        // Temperature sharpens or flattens the scripted weights.
        let weights: Vec<f64> = if request.temperature <= 0.0 {
            let max = programs.iter().map(|p| p.weight).fold(f64::MIN, f64::max);
            programs
                .iter()
                .map(|p| if p.weight == max { 1.0 } else { 0.0 })
                .collect()
        } else {
            programs
                .iter()
                .map(|p| p.weight.max(0.0).powf(1.0 / request.temperature))
                .collect()
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(BackendError::Protocol("scripted program weights sum to zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(request_seed(request));
        let prompt_tokens = tokenize(&request.prompt);
        (0..request.n)
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                let tokens = tokenize(&programs[pick].text);
                let kept = &tokens[..tokens.len().min(request.max_tokens)];
                let scored = self.score_tokens(&prompt_tokens, kept, programs);
                Ok(Completion {
                    text: scored.text.clone(),
                    scored: self.config.supports_logprobs.then_some(scored),
                })
            })
            .collect()
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoredText, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let script = self.programs_for(prompt).unwrap_or(&[]);
        Ok(self.score_tokens(&tokenize(prompt), &tokenize(continuation), script))
    }

    fn echo(&self, text: &str) -> Result<Option<ScoredText>, BackendError> {
        if !self.config.supports_echo {
            return Ok(None);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut scored = self.score_tokens(&[], &tokenize(text), &[]);
        if let Some(first) = scored.tokens.first_mut() {
            first.logprob = 0.0;
        }
        Ok(Some(scored))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, SampleRequest};
    use crate::prompt::Span;
    use std::sync::Arc;

    fn config() -> MockConfig {
        MockConfig {
            tasks: vec![MockTask {
                prompt_contains: "add".into(),
                programs: vec![
                    MockProgram {
                        text: "    return a + b\n".into(),
                        weight: 3.0,
                    },
                    MockProgram {
                        text: "    return a - b\n".into(),
                        weight: 1.0,
                    },
                    MockProgram {
                        text: "    x = a\n    return x + b\ndef other():\n    pass\n".into(),
                        weight: 1.0,
                    },
                ],
            }],
            ..Default::default()
        }
    }

    #[test]
    fn tokenizer_tiles_text() {
        let text = "def f(a_1, b):\n    return  a_1+b # ok\n";
        let tokens = tokenize(text);
        assert_eq!(tokens.concat(), text);
        assert_eq!(&tokens[..4], ["def", " ", "f", "("]);
        assert!(tokens.contains(&"\n"));
        assert!(tokens.contains(&"    "));
    }

    #[test]
    fn sampling_is_deterministic_for_fixed_seed() {
        let backend = MockBackend::new(config());
        let mut req = SampleRequest::new("def add(a, b):\n", 2);
        req.seed = Some(7);
        let a = backend.sample(&req).unwrap();
        let b = backend.sample(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn sampling_returns_n_candidates() {
        let backend = MockBackend::new(config());
        let out = backend.sample(&SampleRequest::new("def add(a, b):\n", 125)).unwrap();
        assert_eq!(out.len(), 125);
        assert!(out.iter().all(|c| c.scored.as_ref().unwrap().validate().is_ok()));
    }

    #[test]
    fn unmatched_prompt_is_protocol_error() {
        let backend = MockBackend::new(config());
        assert!(matches!(
            backend.sample(&SampleRequest::new("def mul(a, b):\n", 1)),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn stop_sequences_truncate_samples() {
        let gw = Gateway::new(Arc::new(MockBackend::new(config())));
        let mut req = SampleRequest::new("def add(a, b):\n", 40);
        req.stop_sequences = vec!["\ndef ".into()];
        for c in gw.sample(&req).unwrap() {
            assert!(!c.text.contains("def other"));
            let s = c.scored.unwrap();
            assert_eq!(s.text, c.text);
        }
    }

    #[test]
    fn max_tokens_bounds_length() {
        let backend = MockBackend::new(config());
        let mut req = SampleRequest::new("def add(a, b):\n", 10);
        req.max_tokens = 2;
        let prefixes: Vec<String> = backend
            .config()
            .tasks
            .iter()
            .flat_map(|t| &t.programs)
            .map(|p| tokenize(&p.text)[..2].concat())
            .collect();
        for c in backend.sample(&req).unwrap() {
            assert_eq!(tokenize(&c.text).len(), 2);
            assert!(prefixes.contains(&c.text), "{:?}", c.text);
        }
    }

    #[test]
    fn logprobs_can_be_withheld() {
        let mut cfg = config();
        cfg.supports_logprobs = false;
        let backend = MockBackend::new(cfg);
        let out = backend.sample(&SampleRequest::new("def add(a, b):\n", 3)).unwrap();
        assert!(out.iter().all(|c| c.scored.is_none() && !c.text.is_empty()));
    }

    #[test]
    fn copying_raises_likelihood() {
        let backend = MockBackend::new(MockConfig::default());
        let copied = backend.score("numbers numbers numbers ", "numbers").unwrap();
        let fresh = backend.score("numbers numbers numbers ", "elephant").unwrap();
        assert!(copied.total_logprob() > fresh.total_logprob());
        assert!(copied.tokens[0].logprob <= 0.0);
    }

    #[test]
    fn echo_and_continuation_routes_agree_on_spans() {
        let text = "def f(x):\n    return x\n# cue\n    \"\"\"Return x unchanged.\n";
        let start = text.find("Return").unwrap();
        let span = Span::new(start, start + "Return x unchanged.".len());

        let echo = Gateway::new(Arc::new(MockBackend::new(MockConfig::default())));
        let split = Gateway::new(Arc::new(MockBackend::new(MockConfig {
            supports_echo: false,
            ..MockConfig::default()
        })));
        let (a, n) = echo.score_span(text, span).unwrap();
        let (b, m) = split.score_span(text, span).unwrap();
        assert_eq!(n, m);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn scripted_programs_are_likely_continuations() {
        let backend = MockBackend::new(config());
        let prompt = "def add(a, b):\n";
        let on = backend.score(prompt, "    return a + b\n").unwrap().total_logprob();
        let off = backend.score(prompt, "    return b + a\n").unwrap().total_logprob();
        let rarer = backend.score(prompt, "    return a - b\n").unwrap().total_logprob();
        assert!(on > rarer && rarer > off, "{on} {rarer} {off}");
    }

    #[test]
    fn sample_scores_match_direct_scoring() {
        let backend = MockBackend::new(config());
        let prompt = "def add(a, b):\n";
        for c in backend.sample(&SampleRequest::new(prompt, 10)).unwrap() {
            let direct = backend.score(prompt, &c.text).unwrap();
            assert_eq!(c.scored.unwrap(), direct);
        }
    }
}
