//! Pluggable model and expert backend contracts, with a deterministic mock,
//! a fixture-replay backend, an HTTP chat-completion client, and a mock
//! reconstruction expert.

mod fixture;
mod http;

pub use fixture::{load_fixture, FixtureBackend, FixtureLine};
pub use http::{HttpBackend, HttpConfig};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::{QaPair, Stage};

/// Environment variable holding the HTTP bearer token.
pub const BACKEND_TOKEN_ENV: &str = "OCC_BACKEND_TOKEN";

/// One completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub sample_id: String,
    pub stage: Stage,
    pub prompt_text: String,
    pub context: Vec<QaPair>,
    pub attachments: Vec<String>,
    pub want_logprobs: bool,
}

impl BackendRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_text.is_empty() {
            return Err(Error::invalid("prompt_text must be non-empty"));
        }
        Ok(())
    }
}

/// One completion response. `token_logps` is present only when requested
/// and supported by the backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub text: String,
    pub token_logps: Option<Vec<f64>>,
    pub latency_ms: u64,
}

/// Boundary validation: token log-probabilities must be finite and `<= 0`.
pub(crate) fn validate_token_logps(logps: &[f64]) -> Result<()> {
    if let Some(bad) = logps.iter().find(|v| !v.is_finite() || **v > 0.0) {
        return Err(Error::invalid(format!(
            "token logprob {bad} is not a finite value <= 0"
        )));
    }
    Ok(())
}

/// A conversational model backend. Implementations must tolerate concurrent
/// calls.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse>;
}

/// A 3D reconstruction expert. Takes an image locator, returns a locator for
/// the reconstruction output.
pub trait ExpertBackend: Send + Sync {
    fn reconstruct(&self, image_ref: &str) -> Result<String>;
}

/// Scripted answers keyed by `(sample_id, stage)`, with an optional default
/// making the lookup total.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: BTreeMap<(String, Stage), String>,
    default_text: Option<String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: &str, stage: Stage, text: &str) -> &mut Self {
        self.entries
            .insert((sample_id.to_string(), stage), text.to_string());
        self
    }

    pub fn remove(&mut self, sample_id: &str, stage: Stage) -> &mut Self {
        self.entries.remove(&(sample_id.to_string(), stage));
        self
    }

    pub fn with_default(mut self, text: &str) -> Self {
        self.default_text = Some(text.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, sample_id: &str, stage: Stage) -> Option<&str> {
        self.entries
            .get(&(sample_id.to_string(), stage))
            .or(self.default_text.as_ref())
            .map(String::as_str)
    }
}

/// Referentially transparent scripted backend: identical requests always get
/// identical responses at zero latency.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

impl ModelBackend for MockBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse> {
        request.validate()?;
        let text = self
            .script
            .lookup(&request.sample_id, request.stage)
            .ok_or_else(|| Error::MissingKey {
                sample_id: request.sample_id.clone(),
                stage: request.stage,
            })?;
        Ok(BackendResponse {
            text: text.to_string(),
            token_logps: None,
            latency_ms: 0,
        })
    }
}

/// FNV-1a over the seed and the input, mapped into `[0, 1)`. Stable across
/// runs and platforms, unlike the std hasher.
fn hash01(seed: u64, input: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(input.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic mock expert: maps `ref` to `ref#recon`, with a configurable
/// simulated failure rate for exercising the degrade path. Failures are a
/// pure function of the locator and the seed, so repeated calls agree.
#[derive(Debug, Clone)]
pub struct MockExpert {
    failure_rate: f64,
    seed: u64,
}

impl MockExpert {
    pub fn new(failure_rate: f64, seed: u64) -> Result<Self> {
        if !failure_rate.is_finite() || !(0.0..=1.0).contains(&failure_rate) {
            return Err(Error::invalid(format!(
                "failure rate {failure_rate} outside [0, 1]"
            )));
        }
        Ok(Self { failure_rate, seed })
    }

    pub fn never_failing() -> Self {
        Self {
            failure_rate: 0.0,
            seed: 0,
        }
    }

    pub fn always_failing() -> Self {
        Self {
            failure_rate: 1.0,
            seed: 0,
        }
    }
}

impl ExpertBackend for MockExpert {
    fn reconstruct(&self, image_ref: &str) -> Result<String> {
        if image_ref.is_empty() {
            return Err(Error::invalid("image_ref must be non-empty"));
        }
        if self.failure_rate > 0.0 && hash01(self.seed, image_ref) < self.failure_rate {
            return Err(Error::ExpertFailure {
                image_ref: image_ref.to_string(),
                detail: format!("simulated failure (rate {})", self.failure_rate),
            });
        }
        Ok(format!("{image_ref}#recon"))
    }
}
