//! HTTP chat-completion client.
//!
//! Wire shapes (all JSON):
//!
//! Request body, POSTed to `{base_url}{path}`:
//! - `model`: string — model name from configuration.
//! - `messages`: array — prior QA context as alternating user/assistant
//!   messages, then the prompt as a final user message. Message `content`
//!   is an array of parts: `{"type":"text","text":...}` for text and
//!   `{"type":"image_url","image_url":{"url":<locator>}}` per attachment;
//!   locators are passed through, never inlined as bytes.
//! - `logprobs`: bool — whether token log-probabilities are requested.
//!
//! Response body, first choice only:
//! - `choices[0].message.content`: string — the completion text.
//! - `choices[0].logprobs.content[*].logprob`: number — optional per-token
//!   log-probabilities, validated finite and `<= 0` at the boundary.
//!
//! Authorization uses a bearer token from the `OCC_BACKEND_TOKEN`
//! environment variable.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{validate_token_logps, BackendRequest, BackendResponse, ModelBackend};
use crate::error::{Error, Result};

/// HTTP client configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub path: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Retry cap for transient failures (connect errors, timeouts, 429/5xx).
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    /// Bound on concurrent in-flight requests.
    pub max_in_flight: usize,
    pub auth_token: Option<String>,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path: "/v1/chat/completions".to_string(),
            model: model.into(),
            timeout_secs: 30,
            max_retries: 2,
            retry_base_delay_ms: 100,
            max_in_flight: 8,
            auth_token: std::env::var(super::BACKEND_TOKEN_ENV).ok(),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().unwrap() += 1;
        self.gate.available.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    gate: Gate,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogProbs>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogProbs {
    content: Vec<TokenLogProb>,
}

#[derive(Debug, Deserialize)]
struct TokenLogProb {
    logprob: f64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let gate = Gate::new(config.max_in_flight);
        Self {
            config,
            agent,
            gate,
        }
    }

    fn build_body(&self, request: &BackendRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        for qa in &request.context {
            messages.push(json!({
                "role": "user",
                "content": [{"type": "text", "text": qa.question}],
            }));
            messages.push(json!({
                "role": "assistant",
                "content": [{"type": "text", "text": qa.answer}],
            }));
        }
        let mut parts = vec![json!({"type": "text", "text": request.prompt_text})];
        for attachment in &request.attachments {
            parts.push(json!({"type": "image_url", "image_url": {"url": attachment}}));
        }
        messages.push(json!({"role": "user", "content": parts}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "logprobs": request.want_logprobs,
        })
    }

    fn send_once(&self, url: &str, body: &serde_json::Value) -> Result<ChatResponse> {
        let mut call = self.agent.post(url);
        if let Some(token) = &self.config.auth_token {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let response = call.send_json(body).map_err(|err| match err {
            ureq::Error::Status(code, response) => {
                let snippet = response
                    .into_string()
                    .unwrap_or_default()
                    .chars()
                    .take(200)
                    .collect::<String>();
                Error::Transport {
                    detail: format!("status {code}: {snippet}"),
                    transient: code == 429 || (500..600).contains(&code),
                }
            }
            ureq::Error::Transport(transport) => Error::Transport {
                detail: transport.to_string(),
                transient: true,
            },
        })?;
        response.into_json().map_err(|err| Error::Transport {
            detail: format!("malformed response body: {err}"),
            transient: false,
        })
    }
}

impl ModelBackend for HttpBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse> {
        request.validate()?;
        let _permit = self.gate.acquire();
        let url = format!("{}{}", self.config.base_url, self.config.path);
        let body = self.build_body(request);
        let start = Instant::now();

        let mut attempt = 0;
        let parsed = loop {
            match self.send_once(&url, &body) {
                Ok(parsed) => break parsed,
                Err(err) if err.is_transient() && attempt < self.config.max_retries => {
                    attempt += 1;
                    log::warn!(
                        "transient backend failure ({err}); retry {attempt}/{}",
                        self.config.max_retries
                    );
                    let delay = self.config.retry_base_delay_ms << (attempt - 1);
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(err) => return Err(err),
            }
        };
        // Retries are folded into the reported latency.
        let latency_ms = start.elapsed().as_millis() as u64;

        let choice = parsed.choices.into_iter().next().ok_or(Error::Transport {
            detail: "response carried no choices".to_string(),
            transient: false,
        })?;
        let token_logps = if request.want_logprobs {
            match choice.logprobs {
                Some(lp) => {
                    let logps: Vec<f64> = lp.content.iter().map(|t| t.logprob).collect();
                    validate_token_logps(&logps)?;
                    Some(logps)
                }
                None => None,
            }
        } else {
            None
        };
        Ok(BackendResponse {
            text: choice.message.content,
            token_logps,
            latency_ms,
        })
    }
}
