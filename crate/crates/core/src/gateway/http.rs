//! Client for OpenAI-completions-compatible HTTP endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{split_echo, BackendError, Completion, CompletionBackend, SampleRequest, ScoredText};

/// Environment variable holding the bearer token for the endpoint.
pub const API_KEY_ENV: &str = "CODEREV_API_KEY";

/// Most completion endpoints accept at most four stop strings; extra ones
/// are applied client-side by the gateway.
const MAX_WIRE_STOPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionBody<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
    n: usize,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    stop: &'a [String],
    logprobs: u32,
    echo: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

impl Logprobs {
    /// Offsets are rebuilt from token strings rather than trusting the
    /// server's character offsets, which count code points.
    fn into_scored(self, text: &str) -> Option<ScoredText> {
        if self.tokens.len() != self.token_logprobs.len() || self.tokens.concat() != text {
            return None;
        }
        Some(ScoredText::from_tokens(
            self.tokens
                .into_iter()
                .zip(self.token_logprobs)
                .map(|(t, lp)| (t, lp.unwrap_or(0.0).min(0.0))),
        ))
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn post(&self, body: &CompletionBody<'_>) -> Result<CompletionResponse, BackendError> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => {
                serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))
            }
            429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Protocol(format!("HTTP {status}: {text}"))),
        }
    }

    fn echo_scored(&self, text: &str) -> Result<ScoredText, BackendError> {
        let body = CompletionBody {
            model: self.config.model.as_deref(),
            prompt: text,
            temperature: 0.0,
            max_tokens: 0,
            n: 1,
            stop: &[],
            logprobs: 0,
            echo: true,
            seed: None,
        };
        let choice = self
            .post(&body)?
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("empty choices".into()))?;
        if !choice.text.starts_with(text) {
            return Err(BackendError::Protocol("echo does not reproduce the prompt".into()));
        }
        let logprobs = choice
            .logprobs
            .ok_or_else(|| BackendError::Protocol("backend refused logprobs".into()))?;
        let mut scored = logprobs
            .into_scored(&choice.text)
            .ok_or_else(|| BackendError::Protocol("token list does not match echoed text".into()))?;
        scored.truncate(text.len());
        Ok(scored)
    }
}

impl CompletionBackend for HttpBackend {
    fn identity(&self) -> String {
        format!(
            "http:{}:{}",
            self.config.endpoint,
            self.config.model.as_deref().unwrap_or("default")
        )
    }

    fn sample(&self, request: &SampleRequest) -> Result<Vec<Completion>, BackendError> {
        let stops = &request.stop_sequences[..request.stop_sequences.len().min(MAX_WIRE_STOPS)];
        let body = CompletionBody {
            model: self.config.model.as_deref(),
            prompt: &request.prompt,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            n: request.n,
            stop: stops,
            logprobs: 0,
            echo: false,
            seed: request.seed,
        };
        Ok(self
            .post(&body)?
            .choices
            .into_iter()
            .map(|c| {
                let scored = c.logprobs.and_then(|l| l.into_scored(&c.text));
                Completion { text: c.text, scored }
            })
            .collect())
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ScoredText, BackendError> {
        let full = self.echo_scored(&format!("{prompt}{continuation}"))?;
        split_echo(&full, prompt.len())
    }

    fn echo(&self, text: &str) -> Result<Option<ScoredText>, BackendError> {
        self.echo_scored(text).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Serves one canned response per accepted connection and forwards the
    /// request bodies it received.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, serde_json::Value)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                tx.send((auth, serde_json::from_slice(&buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1/completions"), rx)
    }

    fn backend(endpoint: String) -> HttpBackend {
        HttpBackend::new(HttpConfig {
            endpoint,
            model: Some("code-model".into()),
            api_key: Some("secret".into()),
            timeout_secs: 10,
        })
    }

    #[test]
    fn sample_sends_completion_body_and_parses_logprobs() {
        let response = serde_json::json!({
            "choices": [
                {"text": "    return 1", "logprobs": {"tokens": ["    ", "return", " 1"], "token_logprobs": [-0.1, -0.2, -0.3], "text_offset": [0, 4, 10]}},
                {"text": "    pass", "logprobs": null}
            ]
        });
        let (url, rx) = serve(vec![(200, response.to_string())]);
        let mut req = SampleRequest::new("def f():\n", 2);
        req.stop_sequences = ["a", "b", "c", "d", "e"].map(String::from).to_vec();
        let out = backend(url).sample(&req).unwrap();
        let (auth, body) = rx.recv().unwrap();
        assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer secret");
        assert_eq!(body["prompt"], "def f():\n");
        assert_eq!(body["temperature"], 0.4);
        assert_eq!(body["max_tokens"], 300);
        assert_eq!(body["n"], 2);
        assert_eq!(body["echo"], false);
        assert_eq!(body["model"], "code-model");
        assert_eq!(body["stop"].as_array().unwrap().len(), 4);
        assert_eq!(out.len(), 2);
        let scored = out[0].scored.as_ref().unwrap();
        assert_eq!(scored.tokens[1].start, 4);
        assert!((scored.total_logprob() + 0.6).abs() < 1e-12);
        assert!(out[1].scored.is_none());
    }

    #[test]
    fn score_splits_echo_at_prompt_boundary() {
        let response = serde_json::json!({
            "choices": [{"text": "ab cd", "logprobs": {"tokens": ["ab", " cd"], "token_logprobs": [null, -1.5]}}]
        });
        let (url, rx) = serve(vec![(200, response.to_string())]);
        let scored = backend(url).score("ab", " cd").unwrap();
        let (_, body) = rx.recv().unwrap();
        assert_eq!(body["echo"], true);
        assert_eq!(body["max_tokens"], 0);
        assert_eq!(body["prompt"], "ab cd");
        assert_eq!(scored.text, " cd");
        assert_eq!(scored.total_logprob(), -1.5);
    }

    #[test]
    fn straddling_token_is_boundary_error() {
        let response = serde_json::json!({
            "choices": [{"text": "abcd", "logprobs": {"tokens": ["abcd"], "token_logprobs": [null]}}]
        });
        let (url, _rx) = serve(vec![(200, response.to_string())]);
        assert_eq!(
            backend(url).score("ab", "cd"),
            Err(BackendError::TokenBoundary { offset: 2 })
        );
    }

    #[test]
    fn server_errors_are_retriable_and_client_errors_are_not() {
        let (url, _rx) = serve(vec![(503, "{}".into()), (400, "{}".into())]);
        let b = backend(url);
        let first = b.sample(&SampleRequest::new("p", 1)).unwrap_err();
        assert!(first.is_retriable(), "{first:?}");
        let second = b.sample(&SampleRequest::new("p", 1)).unwrap_err();
        assert!(!second.is_retriable(), "{second:?}");
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = backend(format!("http://{addr}/v1/completions"))
            .sample(&SampleRequest::new("p", 1))
            .unwrap_err();
        assert!(err.is_retriable());
    }
}
