//! Second analysis stream and the submission flow around it.
//!
//! A submission is gated on its draft, checked against the correct answer,
//! and looked up in the error pool. Only a pool miss reaches the model: the
//! draft is transcribed and scored, the error prompt is assembled from six
//! labeled sections, and the resulting analysis is offered to the pool.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::dialogue::{DialogueConfig, DialogueEngine, DialogueError, DialogueSession, SessionStore, Turn};
use crate::draft::{analyze_draft, gate_submission, score_draft_quality, DraftAnalysis, GateConfig, GateVerdict, StageParams};
use crate::error::ModelError;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, StageTag};
use crate::model::{
    answers_equal, normalize_answer, AnalysisSource, ErrorCauseAnalysis, NormalizedAnswer, Problem, ProblemCatalog,
    ProblemId, SessionId, StudentSubmission,
};
use crate::pool::{ErrorPool, InsertOutcome, PoolKey};
use crate::prompt::{join_sections, labels, render_section};

/// Which input element to leave out of the error prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    DropDraft,
    DropProblem,
    DropSolution,
    DropAnswer,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::None, Ablation::DropDraft, Ablation::DropProblem, Ablation::DropSolution, Ablation::DropAnswer];

    /// Label of the section this ablation removes.
    pub fn dropped_label(self) -> Option<&'static str> {
        match self {
            Ablation::None => None,
            Ablation::DropDraft => Some(labels::DRAFT_ANALYSIS),
            Ablation::DropProblem => Some(labels::PROBLEM),
            Ablation::DropSolution => Some(labels::SOLUTION),
            Ablation::DropAnswer => Some(labels::STUDENT_INCORRECT_ANSWER),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::DropDraft => "drop_draft",
            Ablation::DropProblem => "drop_problem",
            Ablation::DropSolution => "drop_solution",
            Ablation::DropAnswer => "drop_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBundle {
    pub problem: Problem,
    pub student_answer: NormalizedAnswer,
    pub draft_analysis: DraftAnalysis,
    pub ablation: Ablation,
}

impl AnalysisBundle {
    pub fn new(problem: Problem, student_answer: NormalizedAnswer, draft_analysis: DraftAnalysis) -> Self {
        Self { problem, student_answer, draft_analysis, ablation: Ablation::None }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }
}

const ERROR_INSTRUCTIONS: &str = "You are reviewing a primary school student's incorrect answer. Using the material above, \
work out what mistake the student made and how they can avoid it next time. Base the cause on evidence from the \
draft analysis where it is available. Address the suggestion to the student.\n\
Reply with exactly two lines:\n\
Cause: <what went wrong>\n\
Suggestion: <what the student should do>";

const FORMAT_CORRECTION_TEXT: &str =
    "Your previous reply could not be read. Reply with one line starting with \"Cause:\" and one line starting with \"Suggestion:\".";

fn draft_section_body(draft: &DraftAnalysis) -> String {
    let mut body = draft.summary.trim().to_owned();
    if !draft.extracted_steps.is_empty() {
        body.push_str("\nSteps:");
        for (i, step) in draft.extracted_steps.iter().enumerate() {
            body.push_str(&format!("\n{}. {}", i + 1, step));
        }
    }
    body
}

/// Builds the error-analysis prompt. Every section is rendered the same way
/// whatever the ablation, so an ablated prompt is the full prompt minus one
/// section.
pub fn assemble_error_prompt(bundle: &AnalysisBundle) -> String {
    let p = &bundle.problem;
    let draft = draft_section_body(&bundle.draft_analysis);
    let sections = [
        (labels::PROBLEM, p.statement.as_str()),
        (labels::SOLUTION, p.solution.as_str()),
        (labels::CORRECT_ANSWER, p.correct_answer.as_str()),
        (labels::EXPLANATION, p.explanation.as_str()),
        (labels::STUDENT_INCORRECT_ANSWER, bundle.student_answer.canonical()),
        (labels::DRAFT_ANALYSIS, draft.as_str()),
    ];
    let dropped = bundle.ablation.dropped_label();
    join_sections(
        sections
            .into_iter()
            .filter(|(label, _)| Some(*label) != dropped)
            .map(|(label, body)| render_section(label, body.trim()))
            .chain(std::iter::once(render_section(labels::INSTRUCTIONS, ERROR_INSTRUCTIONS))),
    )
}

/// Pulls `Cause:` and `Suggestion:` out of a reply. Continuation lines after
/// a label belong to that label.
fn parse_error_analysis(text: &str) -> Option<(String, String)> {
    let mut cause: Option<String> = None;
    let mut suggestion: Option<String> = None;
    let mut current: Option<&mut Option<String>> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        let lower = trimmed.to_ascii_lowercase();
        if lower.starts_with("cause:") {
            cause = Some(trimmed["cause:".len()..].trim().to_owned());
            current = Some(&mut cause);
        } else if lower.starts_with("suggestion:") {
            suggestion = Some(trimmed["suggestion:".len()..].trim().to_owned());
            current = Some(&mut suggestion);
        } else if !trimmed.is_empty() {
            if let Some(Some(value)) = current.as_deref_mut() {
                value.push(' ');
                value.push_str(trimmed);
            }
        }
    }
    match (cause, suggestion) {
        (Some(c), Some(s)) if !c.is_empty() && !s.is_empty() => Some((c, s)),
        _ => None,
    }
}

/// Runs the error-analysis stage, reprompting once on an unreadable reply.
pub fn analyze_error(
    gateway: &Gateway,
    params: StageParams,
    bundle: &AnalysisBundle,
) -> Result<ErrorCauseAnalysis, GatewayError> {
    let base = assemble_error_prompt(bundle);
    let mut prompt = base.clone();
    for attempt in 0..2 {
        let request = CompletionRequest::text(StageTag::ErrorAnalysis, prompt.clone())
            .with_temperature(params.temperature)
            .with_max_output_tokens(params.max_output_tokens);
        let response = gateway.complete(&request)?;
        if let Some((cause, suggestion)) = parse_error_analysis(&response.text) {
            return Ok(ErrorCauseAnalysis {
                cause,
                suggestion,
                source: AnalysisSource::DualStream,
                backend_name: Some(response.backend_name),
            });
        }
        if attempt == 0 {
            prompt = join_sections([base.trim_end().to_owned(), render_section(labels::FORMAT_CORRECTION, FORMAT_CORRECTION_TEXT)]);
        }
    }
    Err(GatewayError::malformed(StageTag::ErrorAnalysis, "expected Cause and Suggestion lines"))
}

/// Analyses of one bundle under every ablation, full prompt first.
pub fn ablation_outputs(
    gateway: &Gateway,
    params: StageParams,
    bundle: &AnalysisBundle,
) -> Result<Vec<(Ablation, ErrorCauseAnalysis)>, GatewayError> {
    Ablation::ALL
        .iter()
        .map(|&a| analyze_error(gateway, params, &bundle.clone().with_ablation(a)).map(|r| (a, r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    RedoRequested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionOutcome {
    pub verdict: Verdict,
    pub analysis: Option<ErrorCauseAnalysis>,
    pub session_id: Option<SessionId>,
    /// Why a redo was requested.
    pub redo_reason: Option<String>,
    /// Pool decision on the miss path.
    pub pool_insert: Option<InsertOutcome>,
    /// Measured draft quality on the miss path.
    pub draft_quality: Option<f64>,
}

impl SubmissionOutcome {
    fn correct() -> Self {
        Self {
            verdict: Verdict::Correct,
            analysis: None,
            session_id: None,
            redo_reason: None,
            pool_insert: None,
            draft_quality: None,
        }
    }

    fn redo(reason: String) -> Self {
        Self { verdict: Verdict::RedoRequested, redo_reason: Some(reason), ..Self::correct() }
    }

    /// True when analysis and session are present exactly on an Incorrect verdict.
    pub fn is_consistent(&self) -> bool {
        let incorrect = self.verdict == Verdict::Incorrect;
        self.analysis.is_some() == incorrect && self.session_id.is_some() == incorrect
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("unknown problem {0}")]
    UnknownProblem(ProblemId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("invalid submission: {0}")]
    InvalidSubmission(#[from] ModelError),
    #[error("analysis failed, please retry: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

impl PipelineError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, PipelineError::Backend(_) | PipelineError::Dialogue(DialogueError::Gateway(_)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gate: GateConfig,
    pub draft_analysis: StageParams,
    pub draft_quality: StageParams,
    pub error_analysis: StageParams,
    pub dialogue: DialogueConfig,
}

/// Result of a resubmission inside a dialogue session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resubmission {
    pub effective: bool,
    pub outcome: SubmissionOutcome,
}

pub struct AnalysisPipeline {
    catalog: Arc<ProblemCatalog>,
    gateway: Gateway,
    pool: Arc<ErrorPool>,
    sessions: Arc<SessionStore>,
    dialogue: DialogueEngine,
    clock: Arc<dyn Clock>,
    config: PipelineConfig,
    in_flight: Mutex<HashMap<PoolKey, Arc<Mutex<()>>>>,
}

impl AnalysisPipeline {
    pub fn new(
        catalog: Arc<ProblemCatalog>,
        gateway: Gateway,
        pool: Arc<ErrorPool>,
        clock: Arc<dyn Clock>,
        config: PipelineConfig,
    ) -> Self {
        let dialogue = DialogueEngine::new(gateway.clone(), Arc::clone(&clock), config.dialogue);
        Self {
            catalog,
            gateway,
            pool,
            sessions: Arc::new(SessionStore::new()),
            dialogue,
            clock,
            config,
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    pub fn catalog(&self) -> &ProblemCatalog {
        &self.catalog
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn pool(&self) -> &ErrorPool {
        &self.pool
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub fn dialogue(&self) -> &DialogueEngine {
        &self.dialogue
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn problem(&self, id: &ProblemId) -> Result<&Problem, PipelineError> {
        self.catalog.get(id).ok_or_else(|| PipelineError::UnknownProblem(id.clone()))
    }

    pub fn handle_submission(&self, sub: &StudentSubmission) -> Result<SubmissionOutcome, PipelineError> {
        let problem = self.problem(&sub.problem_id)?;
        sub.validate()?;

        let gate = gate_submission(&self.config.gate, sub);
        if gate.verdict == GateVerdict::RequestRedo {
            return Ok(SubmissionOutcome::redo(gate.reason));
        }
        if answers_equal(&sub.raw_answer, &problem.correct_answer) {
            return Ok(SubmissionOutcome::correct());
        }
        let answer = normalize_answer(&sub.raw_answer);
        let key = PoolKey::new(problem.problem_id.clone(), answer.clone());

        // Concurrent misses on one key wait here, then find the first
        // caller's entry instead of repeating its model calls.
        let flight = {
            let mut map = self.in_flight.lock().expect("in-flight lock poisoned");
            Arc::clone(map.entry(key.clone()).or_default())
        };
        let result = {
            let _guard = flight.lock().unwrap_or_else(|e| e.into_inner());
            self.analyze_on_miss(problem, sub, key.clone(), answer.clone())
        };
        {
            let mut map = self.in_flight.lock().expect("in-flight lock poisoned");
            drop(flight);
            if map.get(&key).is_some_and(|f| Arc::strong_count(f) == 1) {
                map.remove(&key);
            }
        }
        let (analysis, pool_insert, draft_quality) = result?;

        let session_id = self.sessions.allocate_id();
        let session =
            self.dialogue.open_session(session_id.clone(), &analysis, problem, sub.student_id.clone(), answer)?;
        self.sessions.insert(session);
        Ok(SubmissionOutcome {
            verdict: Verdict::Incorrect,
            analysis: Some(analysis),
            session_id: Some(session_id),
            redo_reason: None,
            pool_insert,
            draft_quality,
        })
    }

    fn analyze_on_miss(
        &self,
        problem: &Problem,
        sub: &StudentSubmission,
        key: PoolKey,
        answer: NormalizedAnswer,
    ) -> Result<(ErrorCauseAnalysis, Option<InsertOutcome>, Option<f64>), PipelineError> {
        if let Some(entry) = self.pool.lookup(&key) {
            return Ok((entry.analysis.as_pooled(), None, None));
        }
        let draft = sub.draft.as_ref().expect("gate guarantees a draft");
        let draft_analysis = analyze_draft(&self.gateway, self.config.draft_analysis, problem, draft)?;
        let quality = score_draft_quality(&self.gateway, self.config.draft_quality, draft)?;
        let bundle = AnalysisBundle::new(problem.clone(), answer, draft_analysis);
        let analysis = analyze_error(&self.gateway, self.config.error_analysis, &bundle)?;
        let outcome = self.pool.try_insert(key, analysis.clone(), quality.overall, self.clock.now());
        Ok((analysis, Some(outcome), Some(quality.overall)))
    }

    /// Handles a new answer given inside an open dialogue session. A correct
    /// answer marks the session effective; an incorrect one is analyzed as a
    /// fresh submission.
    pub fn handle_resubmission(
        &self,
        session_id: &SessionId,
        sub: &StudentSubmission,
    ) -> Result<Resubmission, PipelineError> {
        let handle = self.sessions.get(session_id).ok_or_else(|| PipelineError::UnknownSession(session_id.clone()))?;
        self.problem(&sub.problem_id)?;
        let effective = {
            let mut session = handle.lock().expect("session lock poisoned");
            self.dialogue.mark_effectiveness(&mut session, sub)?
        };
        let outcome = if effective { SubmissionOutcome::correct() } else { self.handle_submission(sub)? };
        Ok(Resubmission { effective, outcome })
    }

    /// Adds a student message and the tutor's reply to a session.
    pub fn continue_dialogue(&self, session_id: &SessionId, message: &str) -> Result<Turn, PipelineError> {
        let handle = self.sessions.get(session_id).ok_or_else(|| PipelineError::UnknownSession(session_id.clone()))?;
        let mut session = handle.lock().expect("session lock poisoned");
        let problem = self.problem(&session.problem_id)?;
        Ok(self.dialogue.next_tutor_turn(&mut session, problem, message)?)
    }

    pub fn session(&self, session_id: &SessionId) -> Option<DialogueSession> {
        self.sessions.get(session_id).map(|h| h.lock().expect("session lock poisoned").clone())
    }
}
