//! Model backend abstraction.
//!
//! Every call goes through [`Gateway::complete`], which validates the
//! request, dispatches it to a [`Backend`] and records usage under the
//! request's [`StageTag`]. Two backends ship with the crate: the
//! deterministic [`ScriptedBackend`] and the chat-completion [`HttpBackend`].

mod http;
pub mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DraftImage;

pub use http::{HttpBackend, HttpBackendConfig, API_KEY_ENV};
pub use scripted::{scripted_diagnose, ScriptedBackend, SlipLabel};

/// Pipeline stage a model call belongs to. Usage is accounted per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    DraftAnalysis,
    DraftQuality,
    ErrorAnalysis,
    Dialogue,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [
        StageTag::DraftAnalysis,
        StageTag::DraftQuality,
        StageTag::ErrorAnalysis,
        StageTag::Dialogue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::DraftAnalysis => "draft-analysis",
            StageTag::DraftQuality => "draft-quality",
            StageTag::ErrorAnalysis => "error-analysis",
            StageTag::Dialogue => "dialogue",
        }
    }

    /// Stages served by the multimodal model; only these may carry an image.
    pub fn is_multimodal(self) -> bool {
        matches!(self, StageTag::DraftAnalysis | StageTag::DraftQuality)
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: String,
    pub image: Option<DraftImage>,
    pub max_output_tokens: u32,
    pub temperature: f32,
    pub stage: StageTag,
}

impl CompletionRequest {
    pub fn text(stage: StageTag, prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            image: None,
            max_output_tokens: 1024,
            temperature: 0.0,
            stage,
        }
    }

    pub fn with_image(mut self, image: DraftImage) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output_tokens(mut self, max: u32) -> Self {
        self.max_output_tokens = max;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let reject = |detail: &str| GatewayError::InvalidRequest {
            stage: self.stage,
            detail: detail.to_owned(),
        };
        if self.max_output_tokens == 0 {
            return Err(reject("max_output_tokens must be positive"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(reject("temperature must be within [0, 2]"));
        }
        if self.image.is_some() && !self.stage.is_multimodal() {
            return Err(reject("images are only accepted by multimodal stages"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    pub backend_name: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("{stage}: backend deadline exceeded")]
    BackendTimeout { stage: StageTag },
    #[error("{stage}: backend rejected the request with status {status}")]
    BackendRejected { stage: StageTag, status: u16 },
    #[error("{stage}: malformed backend response: {detail}")]
    MalformedResponse { stage: StageTag, detail: String },
    #[error("{stage}: invalid request: {detail}")]
    InvalidRequest { stage: StageTag, detail: String },
}

impl GatewayError {
    pub fn stage(&self) -> StageTag {
        match self {
            GatewayError::BackendTimeout { stage }
            | GatewayError::BackendRejected { stage, .. }
            | GatewayError::MalformedResponse { stage, .. }
            | GatewayError::InvalidRequest { stage, .. } => *stage,
        }
    }

    pub fn malformed(stage: StageTag, detail: impl Into<String>) -> Self {
        GatewayError::MalformedResponse { stage, detail: detail.into() }
    }
}

/// A model endpoint. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub call_count: u64,
    pub total_input_tokens: u64,
    pub total_output_tokens: u64,
    pub total_latency_ms: u64,
}

/// Per-stage usage counters for successful calls.
#[derive(Debug, Default)]
pub struct UsageLedger {
    stages: Mutex<BTreeMap<StageTag, StageUsage>>,
}

impl UsageLedger {
    pub fn record(&self, stage: StageTag, response: &CompletionResponse) {
        let mut stages = self.stages.lock().expect("ledger lock poisoned");
        let usage = stages.entry(stage).or_default();
        usage.call_count += 1;
        usage.total_input_tokens += response.input_tokens;
        usage.total_output_tokens += response.output_tokens;
        usage.total_latency_ms += response.latency_ms;
    }

    pub fn snapshot(&self) -> BTreeMap<StageTag, StageUsage> {
        self.stages.lock().expect("ledger lock poisoned").clone()
    }

    pub fn stage(&self, stage: StageTag) -> StageUsage {
        self.snapshot().get(&stage).copied().unwrap_or_default()
    }

    pub fn calls(&self, stage: StageTag) -> u64 {
        self.stage(stage).call_count
    }

    pub fn total_calls(&self) -> u64 {
        self.snapshot().values().map(|u| u.call_count).sum()
    }
}

/// Shared entry point for model calls; cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    ledger: Arc<UsageLedger>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend, ledger: Arc::new(UsageLedger::default()) }
    }

    pub fn scripted() -> Self {
        Self::new(Arc::new(ScriptedBackend::new()))
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        request.validate()?;
        let response = self.backend.call(request)?;
        if response.text.trim().is_empty() {
            return Err(GatewayError::malformed(request.stage, "empty completion text"));
        }
        self.ledger.record(request.stage, &response);
        Ok(response)
    }
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("backend", &self.backend.name()).finish()
    }
}

/// Rough token estimate (four bytes per token) used where a backend does
/// not report usage itself.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed {
        responses: Mutex<Vec<CompletionResponse>>,
    }

    impl Backend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }

        fn call(&self, _: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
            Ok(self.responses.lock().unwrap().remove(0))
        }
    }

    #[test]
    fn rejects_invalid_requests_before_calling_backend() {
        let gw = Gateway::scripted();
        let bad_temp = CompletionRequest::text(StageTag::ErrorAnalysis, "x").with_temperature(2.5);
        assert!(matches!(gw.complete(&bad_temp), Err(GatewayError::InvalidRequest { .. })));
        let zero = CompletionRequest::text(StageTag::ErrorAnalysis, "x").with_max_output_tokens(0);
        assert!(gw.complete(&zero).is_err());
        let img = DraftImage::new(vec![1, 2, 3], "image/png").unwrap();
        let text_stage_image = CompletionRequest::text(StageTag::ErrorAnalysis, "x").with_image(img);
        assert!(gw.complete(&text_stage_image).is_err());
        assert_eq!(gw.ledger().total_calls(), 0);
    }

    #[test]
    fn empty_text_is_malformed() {
        let backend = Fixed {
            responses: Mutex::new(vec![CompletionResponse {
                text: "  ".into(),
                input_tokens: 1,
                output_tokens: 0,
                latency_ms: 1,
                backend_name: "fixed".into(),
            }]),
        };
        let gw = Gateway::new(Arc::new(backend));
        let err = gw.complete(&CompletionRequest::text(StageTag::Dialogue, "hi")).unwrap_err();
        assert_eq!(err.stage(), StageTag::Dialogue);
        assert!(matches!(err, GatewayError::MalformedResponse { .. }));
    }

    proptest! {
        #[test]
        fn ledger_totals_equal_sum_of_responses(
            calls in proptest::collection::vec((0usize..4, 0u64..5000, 0u64..500, 0u64..3000), 0..60)
        ) {
            let responses: Vec<CompletionResponse> = calls
                .iter()
                .map(|&(_, i, o, l)| CompletionResponse {
                    text: "ok".into(),
                    input_tokens: i,
                    output_tokens: o,
                    latency_ms: l,
                    backend_name: "fixed".into(),
                })
                .collect();
            let gw = Gateway::new(Arc::new(Fixed { responses: Mutex::new(responses) }));
            let mut expected: BTreeMap<StageTag, StageUsage> = BTreeMap::new();
            for &(s, i, o, l) in &calls {
                let stage = StageTag::ALL[s];
                gw.complete(&CompletionRequest::text(stage, "p")).unwrap();
                let e = expected.entry(stage).or_default();
                e.call_count += 1;
                e.total_input_tokens += i;
                e.total_output_tokens += o;
                e.total_latency_ms += l;
            }
            prop_assert_eq!(gw.ledger().snapshot(), expected);
        }
    }
}
