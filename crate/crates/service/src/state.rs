use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use vate_core::analytics::{
    outcome_report_from, repeat_report_from, session_metrics, summarize_sessions, win_rate, AblationJudgment,
    AnalyticsError, EventKind, LearningEvent,
};
use vate_core::dialogue::{classify_dialogue_quality, DialogueError};
use vate_core::model::{DraftImage, LearningSessionRef, SessionId, StudentSubmission, SubmissionId};
use vate_core::par::Exec;
use vate_core::pipeline::{AnalysisPipeline, PipelineError, Verdict};
use vate_core::pool::PoolStats;

use crate::api::{
    ApiError, ErrorCode, KpSummary, ReportView, SessionView, SubmissionRequest, SubmissionResponse, SummaryView,
    TurnView, WinRates, MAX_DRAFT_BYTES,
};

pub const TOKEN_ENV: &str = "VATE_API_TOKEN";

type IdempotencySlot = Arc<Mutex<Option<(SubmissionRequest, SubmissionResponse)>>>;

/// Everything the handlers share. All methods are blocking and are called
/// from the runtime's blocking pool.
pub struct AppState {
    pipeline: AnalysisPipeline,
    token: String,
    events: Mutex<Vec<LearningEvent>>,
    links: Mutex<HashMap<SessionId, LearningSessionRef>>,
    judgments: Mutex<Vec<AblationJudgment>>,
    idempotency: Mutex<HashMap<String, IdempotencySlot>>,
    next_submission: AtomicU64,
}

pub(crate) fn from_pipeline_error(e: PipelineError) -> ApiError {
    let code = match &e {
        PipelineError::UnknownProblem(_) => ErrorCode::UnknownProblem,
        PipelineError::UnknownSession(_) => ErrorCode::UnknownSession,
        PipelineError::InvalidSubmission(_) => ErrorCode::BadRequest,
        PipelineError::Backend(_) => ErrorCode::BackendUnavailable,
        PipelineError::Dialogue(d) => match d {
            DialogueError::SessionClosed(_) => ErrorCode::SessionClosed,
            DialogueError::UnknownSession(_) => ErrorCode::UnknownSession,
            DialogueError::ProblemMismatch { .. } => ErrorCode::ProblemMismatch,
            DialogueError::EmptyMessage => ErrorCode::BadRequest,
            DialogueError::Gateway(_) => ErrorCode::BackendUnavailable,
            DialogueError::InvalidAnalysis(_) => ErrorCode::Internal,
        },
    };
    ApiError::new(code, e.to_string())
}

fn from_analytics_error(e: AnalyticsError) -> ApiError {
    ApiError::bad_request(e.to_string())
}

fn decode_draft(payload: &crate::api::DraftPayload) -> Result<DraftImage, ApiError> {
    // Reject oversized payloads before decoding them.
    if payload.data.len() / 4 * 3 > MAX_DRAFT_BYTES + 2 {
        return Err(ApiError::bad_request(format!("draft exceeds {MAX_DRAFT_BYTES} bytes")));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.data.trim())
        .map_err(|e| ApiError::bad_request(format!("draft is not valid base64: {e}")))?;
    if bytes.len() > MAX_DRAFT_BYTES {
        return Err(ApiError::bad_request(format!("draft exceeds {MAX_DRAFT_BYTES} bytes")));
    }
    DraftImage::new(bytes, &payload.media_type).map_err(|e| ApiError::bad_request(e.to_string()))
}

impl AppState {
    pub fn new(pipeline: AnalysisPipeline, token: impl Into<String>) -> Self {
        Self {
            pipeline,
            token: token.into(),
            events: Mutex::new(Vec::new()),
            links: Mutex::new(HashMap::new()),
            judgments: Mutex::new(Vec::new()),
            idempotency: Mutex::new(HashMap::new()),
            next_submission: AtomicU64::new(0),
        }
    }

    /// Reads the bearer token from `VATE_API_TOKEN`; refuses to build a
    /// state without one.
    pub fn with_env_token(pipeline: AnalysisPipeline) -> Result<Self, String> {
        match std::env::var(TOKEN_ENV) {
            Ok(token) if !token.trim().is_empty() => Ok(Self::new(pipeline, token.trim())),
            _ => Err(format!("{TOKEN_ENV} must be set to a non-empty token")),
        }
    }

    pub fn pipeline(&self) -> &AnalysisPipeline {
        &self.pipeline
    }

    pub(crate) fn token_matches(&self, presented: &str) -> bool {
        let (a, b) = (presented.as_bytes(), self.token.as_bytes());
        a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
    }

    fn learning_ref(req: &SubmissionRequest) -> LearningSessionRef {
        req.learning_session_ref.clone().unwrap_or_else(|| LearningSessionRef::new(format!("ls-{}", req.student_id)))
    }

    fn to_submission(&self, req: &SubmissionRequest) -> Result<StudentSubmission, ApiError> {
        let draft = req.draft.as_ref().map(decode_draft).transpose()?;
        let submission_id = req.submission_id.clone().unwrap_or_else(|| {
            let n = self.next_submission.fetch_add(1, Ordering::Relaxed) + 1;
            SubmissionId::new(format!("sub-{n:08}"))
        });
        Ok(StudentSubmission {
            submission_id,
            student_id: req.student_id.clone(),
            problem_id: req.problem_id.clone(),
            raw_answer: req.answer.clone(),
            draft,
            submitted_at: self.pipeline.clock().now(),
        })
    }

    /// Runs one submission. With an idempotency key, a repeat of an
    /// earlier successful request returns the stored response unchanged.
    pub fn submit(&self, req: SubmissionRequest, idempotency_key: Option<&str>) -> Result<SubmissionResponse, ApiError> {
        let Some(key) = idempotency_key else { return self.submit_once(&req) };
        let slot = {
            let mut map = self.idempotency.lock().expect("idempotency lock poisoned");
            Arc::clone(map.entry(key.to_owned()).or_default())
        };
        let mut slot = slot.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((first, response)) = slot.as_ref() {
            return if *first == req {
                Ok(response.clone())
            } else {
                Err(ApiError::bad_request("idempotency key was already used for a different request"))
            };
        }
        let response = self.submit_once(&req)?;
        *slot = Some((req, response.clone()));
        Ok(response)
    }

    fn submit_once(&self, req: &SubmissionRequest) -> Result<SubmissionResponse, ApiError> {
        let sub = self.to_submission(req)?;
        let (outcome, effective) = match &req.session_id {
            Some(sid) => {
                let r = self.pipeline.handle_resubmission(sid, &sub).map_err(from_pipeline_error)?;
                (r.outcome, Some(r.effective))
            }
            None => (self.pipeline.handle_submission(&sub).map_err(from_pipeline_error)?, None),
        };
        if outcome.verdict != Verdict::RedoRequested {
            let learning_ref = Self::learning_ref(req);
            let correct = outcome.verdict == Verdict::Correct;
            let problem = self.pipeline.problem(&sub.problem_id).map_err(from_pipeline_error)?;
            {
                let mut events = self.events.lock().expect("event lock poisoned");
                for kp in &problem.knowledge_point_ids {
                    events.push(LearningEvent {
                        student_id: sub.student_id.clone(),
                        session_ref: learning_ref.clone(),
                        at: sub.submitted_at,
                        kind: EventKind::Attempt {
                            problem_id: sub.problem_id.clone(),
                            knowledge_point_id: kp.clone(),
                            correct,
                        },
                    });
                }
            }
            if let Some(sid) = &outcome.session_id {
                self.links.lock().expect("link lock poisoned").insert(sid.clone(), learning_ref);
            }
        }
        Ok(SubmissionResponse::from_outcome(&outcome, effective))
    }

    pub fn message(&self, session_id: &SessionId, text: &str) -> Result<TurnView, ApiError> {
        let turn = self.pipeline.continue_dialogue(session_id, text).map_err(from_pipeline_error)?;
        Ok(TurnView::from(&turn))
    }

    pub fn session_view(&self, session_id: &SessionId) -> Result<SessionView, ApiError> {
        self.pipeline
            .session(session_id)
            .map(|s| SessionView::from(&s))
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("unknown session {session_id}")))
    }

    pub fn summary(&self, session_id: &SessionId) -> Result<SummaryView, ApiError> {
        let session = self
            .pipeline
            .session(session_id)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("unknown session {session_id}")))?;
        let problem = self.pipeline.problem(&session.problem_id).map_err(from_pipeline_error)?;
        let learning_ref = self.links.lock().expect("link lock poisoned").get(session_id).cloned();
        let events: Vec<LearningEvent> = match &learning_ref {
            Some(r) => self.events.lock().expect("event lock poisoned").iter().filter(|e| &e.session_ref == r).cloned().collect(),
            None => Vec::new(),
        };
        let metrics = session_metrics(&events).map_err(from_analytics_error)?;
        let knowledge_points = problem
            .knowledge_point_ids
            .iter()
            .map(|kp| {
                let m = metrics.kp(kp);
                KpSummary { knowledge_point_id: kp.clone(), niact: m.niact, nqct: m.nqct, arct: m.arct }
            })
            .collect();
        Ok(SummaryView {
            session_id: session.session_id.clone(),
            student_id: session.student_id.clone(),
            problem_id: session.problem_id.clone(),
            study_duration_ms: session.last_activity.saturating_elapsed_since(session.opened_at),
            knowledge_points,
            quality: classify_dialogue_quality(&session),
            effective: session.effective,
            closed: session.closed,
        })
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pipeline.pool().stats()
    }

    /// Recorded and posted events plus one dialogue link per tutoring
    /// session, reflecting its current state.
    fn all_events(&self) -> Vec<LearningEvent> {
        let mut events = self.events.lock().expect("event lock poisoned").clone();
        let links: Vec<(SessionId, LearningSessionRef)> =
            self.links.lock().expect("link lock poisoned").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut linked: Vec<LearningEvent> = links
            .into_iter()
            .filter_map(|(sid, learning_ref)| {
                let s = self.pipeline.session(&sid)?;
                let q = classify_dialogue_quality(&s);
                Some(LearningEvent {
                    student_id: s.student_id.clone(),
                    session_ref: learning_ref,
                    at: s.last_activity,
                    kind: EventKind::DialogueLink {
                        dialogue_session_id: sid,
                        effective: s.effective,
                        student_char_count: q.student_char_count,
                        student_turns: s.student_turns().count(),
                    },
                })
            })
            .collect();
        linked.sort_by(|a, b| a.session_ref.cmp(&b.session_ref).then(a.at.cmp(&b.at)));
        events.extend(linked);
        events
    }

    pub fn report(&self, group: &str) -> Result<ReportView, ApiError> {
        let summaries = summarize_sessions(Exec::Parallel, &self.all_events()).map_err(from_analytics_error)?;
        match group {
            "outcomes" => Ok(ReportView::Outcomes(outcome_report_from(&summaries))),
            "repeat" => Ok(ReportView::Repeat(repeat_report_from(&summaries))),
            other => Err(ApiError::bad_request(format!("unknown report group {other:?}; use outcomes or repeat"))),
        }
    }

    pub fn add_events(&self, events: Vec<LearningEvent>) -> usize {
        let n = events.len();
        self.events.lock().expect("event lock poisoned").extend(events);
        n
    }

    /// Adds a batch of judgments, all or nothing.
    pub fn add_judgments(&self, batch: Vec<AblationJudgment>) -> Result<usize, ApiError> {
        let mut stored = self.judgments.lock().expect("judgment lock poisoned");
        let mut combined = stored.clone();
        combined.extend(batch.iter().cloned());
        win_rate(&combined).map_err(from_analytics_error)?;
        stored.extend(batch.iter().cloned());
        Ok(batch.len())
    }

    pub fn winrates(&self) -> WinRates {
        win_rate(&self.judgments.lock().expect("judgment lock poisoned")).unwrap_or_default()
    }
}
