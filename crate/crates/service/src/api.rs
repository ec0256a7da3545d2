//! Wire representations. Field names are snake_case and pinned by
//! `docs/api-schema.json`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vate_core::analytics::{AblatedElement, AblationJudgment, LearningEvent, OutcomeReport, RepeatReport};
use vate_core::dialogue::{DialogueQuality, DialogueSession, GuardEvent, Speaker, Turn};
use vate_core::model::{
    AnalysisSource, ErrorCauseAnalysis, KnowledgePointId, LearningSessionRef, ProblemId, SessionId, StudentId,
    SubmissionId, Timestamp,
};
use vate_core::pipeline::{SubmissionOutcome, Verdict};

/// Largest accepted draft after base64 decoding.
pub const MAX_DRAFT_BYTES: usize = 5 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftPayload {
    /// Base64 (standard alphabet, padded) image bytes.
    pub data: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmissionRequest {
    pub student_id: StudentId,
    pub problem_id: ProblemId,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<DraftPayload>,
    /// Dialogue session this answer is given in; a correct answer marks it
    /// effective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_id: Option<SubmissionId>,
    /// Learning session on the hosting platform. Defaults to one per student.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_session_ref: Option<LearningSessionRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisView {
    pub cause: String,
    pub suggestion: String,
    pub source: AnalysisSource,
}

impl From<&ErrorCauseAnalysis> for AnalysisView {
    fn from(a: &ErrorCauseAnalysis) -> Self {
        Self { cause: a.cause.clone(), suggestion: a.suggestion.clone(), source: a.source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionResponse {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redo_reason: Option<String>,
    /// Present when the answer was given inside a dialogue session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective: Option<bool>,
}

impl SubmissionResponse {
    pub fn from_outcome(outcome: &SubmissionOutcome, effective: Option<bool>) -> Self {
        Self {
            verdict: outcome.verdict,
            analysis: outcome.analysis.as_ref().map(AnalysisView::from),
            session_id: outcome.session_id.clone(),
            redo_reason: outcome.redo_reason.clone(),
            effective,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnView {
    pub speaker: Speaker,
    pub text: String,
    pub at: Timestamp,
    #[serde(default)]
    pub guard_events: Vec<GuardEvent>,
}

impl From<&Turn> for TurnView {
    fn from(t: &Turn) -> Self {
        Self { speaker: t.speaker, text: t.text.clone(), at: t.at, guard_events: t.guard_events.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub student_id: StudentId,
    pub problem_id: ProblemId,
    pub effective: bool,
    pub closed: bool,
    pub turns: Vec<TurnView>,
}

impl From<&DialogueSession> for SessionView {
    fn from(s: &DialogueSession) -> Self {
        Self {
            session_id: s.session_id.clone(),
            student_id: s.student_id.clone(),
            problem_id: s.problem_id.clone(),
            effective: s.effective,
            closed: s.closed,
            turns: s.turns.iter().map(TurnView::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpSummary {
    pub knowledge_point_id: KnowledgePointId,
    pub niact: u32,
    pub nqct: u32,
    pub arct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryView {
    pub session_id: SessionId,
    pub student_id: StudentId,
    pub problem_id: ProblemId,
    pub study_duration_ms: u64,
    pub knowledge_points: Vec<KpSummary>,
    pub quality: DialogueQuality,
    pub effective: bool,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "snake_case")]
pub enum ReportView {
    Outcomes(OutcomeReport),
    Repeat(RepeatReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgmentBatch {
    pub judgments: Vec<AblationJudgment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventBatch {
    pub events: Vec<LearningEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: usize,
}

pub type WinRates = BTreeMap<AblatedElement, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    UnknownProblem,
    UnknownSession,
    SessionClosed,
    ProblemMismatch,
    BackendUnavailable,
    BadRequest,
    Unauthorized,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> u16 {
        match self {
            ErrorCode::UnknownProblem | ErrorCode::UnknownSession => 404,
            ErrorCode::SessionClosed | ErrorCode::ProblemMismatch => 409,
            ErrorCode::BackendUnavailable => 503,
            ErrorCode::BadRequest => 422,
            ErrorCode::Unauthorized => 401,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    /// Only backend outages are worth retrying.
    pub retriable: bool,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), retriable: code == ErrorCode::BackendUnavailable }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}
