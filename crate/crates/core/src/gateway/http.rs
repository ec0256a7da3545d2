//! Chat-completion HTTP backend.
//!
//! Wire mapping (the only place these field names appear):
//!
//! ```text
//! POST <endpoint>
//! Authorization: Bearer $VATE_LLM_API_KEY
//! { "model": <model>, "max_tokens": n, "temperature": t,
//!   "messages": [ { "role": "user", "content": [
//!       { "type": "text", "text": <prompt> },
//!       { "type": "image_url", "image_url": { "url": "data:<media>;base64,<payload>" } } ] } ] }
//!
//! 200 { "choices": [ { "message": { "content": <text> } } ],
//!       "usage": { "prompt_tokens": n, "completion_tokens": n } }
//! ```

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{estimate_tokens, Backend, CompletionRequest, CompletionResponse, GatewayError};

pub const API_KEY_ENV: &str = "VATE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_deadline_ms")]
    pub deadline_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_deadline_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    8
}

/// Counting semaphore bounding concurrent upstream calls.
struct InFlight {
    available: Mutex<usize>,
    released: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self { available: Mutex::new(limit.max(1)), released: Condvar::new() }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut available = self.available.lock().expect("in-flight lock poisoned");
        while *available == 0 {
            available = self.released.wait(available).expect("in-flight lock poisoned");
        }
        *available -= 1;
        InFlightPermit { owner: self }
    }
}

struct InFlightPermit<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.owner.available.lock().expect("in-flight lock poisoned") += 1;
        self.owner.released.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: InFlight,
    name: String,
}

enum Attempt {
    Done(CompletionResponse),
    TimedOut,
}

impl HttpBackend {
    /// Reads the API key from `VATE_LLM_API_KEY`.
    pub fn from_env(config: HttpBackendConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: HttpBackendConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.deadline_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: format!("http:{}", config.model),
            in_flight: InFlight::new(config.max_in_flight),
            config,
            api_key,
            agent,
        }
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut content = vec![json!({ "type": "text", "text": request.prompt })];
        if let Some(image) = &request.image {
            let payload = base64::engine::general_purpose::STANDARD.encode(image.bytes());
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{};base64,{}", image.media_type(), payload) }
            }));
        }
        json!({
            "model": self.config.model,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
            "messages": [ { "role": "user", "content": content } ],
        })
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<Attempt, GatewayError> {
        let stage = request.stage;
        let started = Instant::now();
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = match call.send_json(self.body(request)) {
            Ok(r) => r,
            Err(e) if is_unreachable(&e) => return Ok(Attempt::TimedOut),
            Err(e) => return Err(GatewayError::malformed(stage, e.to_string())),
        };
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::BackendRejected { stage, status });
        }
        let payload: WireResponse = match response.body_mut().read_json() {
            Ok(p) => p,
            Err(e) if is_unreachable(&e) => return Ok(Attempt::TimedOut),
            Err(e) => return Err(GatewayError::malformed(stage, e.to_string())),
        };
        let text = payload
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::malformed(stage, "response has no message content"))?;
        let usage = payload.usage.unwrap_or_default();
        Ok(Attempt::Done(CompletionResponse {
            input_tokens: usage.prompt_tokens.unwrap_or_else(|| estimate_tokens(&request.prompt)),
            output_tokens: usage.completion_tokens.unwrap_or_else(|| estimate_tokens(&text)),
            latency_ms: started.elapsed().as_millis() as u64,
            backend_name: self.name.clone(),
            text,
        }))
    }
}

fn is_unreachable(e: &ureq::Error) -> bool {
    matches!(
        e,
        ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound | ureq::Error::Io(_)
    )
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    /// One retry after a timeout, then `BackendTimeout`.
    fn call(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let _permit = self.in_flight.acquire();
        for _ in 0..2 {
            if let Attempt::Done(response) = self.attempt(request)? {
                return Ok(response);
            }
            log::warn!("{}: upstream call timed out", request.stage);
        }
        Err(GatewayError::BackendTimeout { stage: request.stage })
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}
