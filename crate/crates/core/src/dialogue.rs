//! Multi-round guided tutoring on top of an error-cause analysis.
//!
//! Tutor replies are produced by the model under the pinned tutoring
//! rules in `fixtures/dialogue_constraints.txt` and are checked by
//! [`guard_tutor_message`] before they are committed, so the correct
//! answer is never shown while the session is still ineffective.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::draft::StageParams;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, StageTag};
use crate::model::{
    answers_equal, normalize_answer, ErrorCauseAnalysis, NormalizedAnswer, Problem, ProblemId, SessionId,
    StudentId, StudentSubmission, Timestamp,
};
use crate::prompt::{join_sections, labels, render_section};

/// The five tutoring rules embedded in every dialogue prompt.
pub const TUTORING_RULES: &str = include_str!("../fixtures/dialogue_constraints.txt");

pub const REDACTION_PLACEHOLDER: &str = "[answer hidden]";

pub const MODERATE_MIN_CHARS: usize = 15;
pub const MODERATE_MAX_CHARS: usize = 120;

pub const DEFAULT_IDLE_TIMEOUT_MS: i64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Student,
    Tutor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardEvent {
    LeakRedacted,
    Regenerated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub at: Timestamp,
    #[serde(default)]
    pub guard_events: Vec<GuardEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: SessionId,
    pub student_id: StudentId,
    pub problem_id: ProblemId,
    pub student_answer: NormalizedAnswer,
    pub correct_answer: NormalizedAnswer,
    pub analysis: ErrorCauseAnalysis,
    pub turns: Vec<Turn>,
    pub effective: bool,
    pub closed: bool,
    pub opened_at: Timestamp,
    pub last_activity: Timestamp,
}

impl DialogueSession {
    pub fn student_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::Student)
    }

    pub fn transcript(&self) -> String {
        self.turns
            .iter()
            .map(|t| {
                let who = match t.speaker {
                    Speaker::Student => "Student",
                    Speaker::Tutor => "Tutor",
                };
                format!("{who}: {}", t.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityBucket {
    NoDialogue,
    TooShort,
    Moderate,
    TooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueQuality {
    pub bucket: QualityBucket,
    pub student_char_count: usize,
}

/// Bucket for a dialogue whose student turns total `student_char_count`
/// characters. Moderate is the inclusive range 15..=120.
pub fn quality_bucket(has_student_turns: bool, student_char_count: usize) -> QualityBucket {
    if !has_student_turns {
        QualityBucket::NoDialogue
    } else if student_char_count < MODERATE_MIN_CHARS {
        QualityBucket::TooShort
    } else if student_char_count <= MODERATE_MAX_CHARS {
        QualityBucket::Moderate
    } else {
        QualityBucket::TooLong
    }
}

pub fn classify_dialogue_quality(session: &DialogueSession) -> DialogueQuality {
    let mut turns = 0usize;
    let mut chars = 0usize;
    for t in session.student_turns() {
        turns += 1;
        chars += t.text.chars().count();
    }
    DialogueQuality { bucket: quality_bucket(turns > 0, chars), student_char_count: chars }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DialogueError {
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("resubmission is for problem {got}, session is for {expected}")]
    ProblemMismatch { expected: ProblemId, got: ProblemId },
    #[error("session needs a completed analysis: {0}")]
    InvalidAnalysis(String),
    #[error("student message is empty")]
    EmptyMessage,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

static SIMPLE_TOKEN_ANSWER: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"^-?[\p{L}\p{N}]+([.,][\p{N}]+)*$").expect("valid regex"));

/// Byte ranges of every standalone occurrence of `correct` in `text`.
pub fn answer_occurrences(text: &str, correct: &NormalizedAnswer) -> Vec<(usize, usize)> {
    let canonical = correct.canonical();
    if canonical.is_empty() {
        return Vec::new();
    }
    if SIMPLE_TOKEN_ANSWER.is_match(canonical) {
        return tokens(text)
            .into_iter()
            .filter(|&(s, e)| normalize_answer(&text[s..e]).canonical() == canonical)
            .collect();
    }
    let body = canonical
        .split(' ')
        .map(regex::escape)
        .collect::<Vec<_>>()
        .join(r"\s+");
    let pattern = format!(r"(?i)(?:^|[^\p{{L}}\p{{N}}])({body})(?:$|[^\p{{L}}\p{{N}}])");
    let re = Regex::new(&pattern).expect("escaped answer pattern");
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(caps) = re.captures_at(text, from) {
        let m = caps.get(1).expect("group 1");
        found.push((m.start(), m.end()));
        from = m.end();
        if from >= text.len() {
            break;
        }
    }
    found
}

/// Alphanumeric runs, keeping `.`/`,` between digits and a leading minus
/// sign so `6,870` and `-687` stay single tokens.
fn tokens(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let starts_negative = c == '-'
            && chars.get(i + 1).is_some_and(|(_, n)| n.is_ascii_digit())
            && (i == 0 || !chars[i - 1].1.is_alphanumeric());
        if !c.is_alphanumeric() && !starts_negative {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() {
            let cj = chars[j].1;
            let joins_digits = (cj == '.' || cj == ',')
                && chars[j - 1].1.is_ascii_digit()
                && chars.get(j + 1).is_some_and(|(_, n)| n.is_ascii_digit());
            if cj.is_alphanumeric() || joins_digits {
                j += 1;
            } else {
                break;
            }
        }
        let end = chars.get(j).map_or(text.len(), |(b, _)| *b);
        out.push((start, end));
        i = j;
    }
    out
}

pub fn contains_answer(text: &str, correct: &NormalizedAnswer) -> bool {
    !answer_occurrences(text, correct).is_empty()
}

fn redact(text: &str, correct: &NormalizedAnswer) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (s, e) in answer_occurrences(text, correct) {
        out.push_str(&text[last..s]);
        out.push_str(REDACTION_PLACEHOLDER);
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

/// Keeps the correct answer out of tutor text until the student has earned
/// it. A leaking reply gets one regeneration; if that still leaks (or
/// fails), the answer tokens are replaced by a placeholder.
pub fn guard_tutor_message<F>(
    text: String,
    correct: &NormalizedAnswer,
    effective: bool,
    regenerate: F,
) -> (String, Vec<GuardEvent>)
where
    F: FnOnce() -> Result<String, GatewayError>,
{
    if effective || !contains_answer(&text, correct) {
        return (text, Vec::new());
    }
    let mut events = vec![GuardEvent::Regenerated];
    let candidate = match regenerate() {
        Ok(regenerated) if !regenerated.trim().is_empty() => regenerated,
        Ok(_) | Err(_) => text,
    };
    if contains_answer(&candidate, correct) {
        events.push(GuardEvent::LeakRedacted);
        (redact(&candidate, correct), events)
    } else {
        (candidate, events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    pub idle_timeout_ms: i64,
    pub params: StageParams,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self {
            idle_timeout_ms: DEFAULT_IDLE_TIMEOUT_MS,
            params: StageParams { temperature: 0.0, max_output_tokens: 512 },
        }
    }
}

const REVISION_TEXT: &str = "Your previous reply revealed the final answer. Rewrite it so that it does not state the answer; use a question or a hint instead.";

const REPLY_FORMAT: &str = "Reply with one short message to the student, written as the tutor. Do not include a speaker label.";

pub struct DialogueEngine {
    gateway: Gateway,
    clock: Arc<dyn Clock>,
    config: DialogueConfig,
}

impl DialogueEngine {
    pub fn new(gateway: Gateway, clock: Arc<dyn Clock>, config: DialogueConfig) -> Self {
        Self { gateway, clock, config }
    }

    pub fn config(&self) -> &DialogueConfig {
        &self.config
    }

    /// Starts a session with an open-ended opening question built from the
    /// analysis. The opener is templated, so opening a session costs no
    /// model call.
    pub fn open_session(
        &self,
        session_id: SessionId,
        analysis: &ErrorCauseAnalysis,
        problem: &Problem,
        student_id: StudentId,
        student_answer: NormalizedAnswer,
    ) -> Result<DialogueSession, DialogueError> {
        analysis.validate().map_err(|e| DialogueError::InvalidAnalysis(e.to_string()))?;
        let now = self.clock.now();
        let correct = problem.normalized_correct_answer();
        let opener = format!(
            "Let's take another look at this problem together. Start from your last step: does your work finish everything the problem asks for? \
             Here's something to keep in mind: {} What do you notice when you check that step again?",
            analysis.suggestion.trim()
        );
        let (text, guard_events) = guard_tutor_message(opener, &correct, false, || {
            Ok("Let's take another look at this problem together. Start from your last step: does your work finish everything the problem asks for? What do you notice when you check it again?".to_owned())
        });
        Ok(DialogueSession {
            session_id,
            student_id,
            problem_id: problem.problem_id.clone(),
            student_answer,
            correct_answer: correct,
            analysis: analysis.clone(),
            turns: vec![Turn { speaker: Speaker::Tutor, text, at: now, guard_events }],
            effective: false,
            closed: false,
            opened_at: now,
            last_activity: now,
        })
    }

    pub fn assemble_dialogue_prompt(session: &DialogueSession, problem: &Problem, student_message: &str) -> String {
        let analysis = format!(
            "Cause: {}\nSuggestion: {}",
            session.analysis.cause.trim(),
            session.analysis.suggestion.trim()
        );
        join_sections([
            render_section(labels::TUTORING_RULES, TUTORING_RULES),
            render_section(labels::PROBLEM, &problem.statement),
            render_section(labels::EXPLANATION, &problem.explanation),
            render_section(labels::STUDENT_ANSWER, session.student_answer.canonical()),
            render_section(labels::ERROR_ANALYSIS, &analysis),
            render_section(labels::CONVERSATION, &session.transcript()),
            render_section(labels::STUDENT_MESSAGE, student_message),
            render_section(labels::REPLY_FORMAT, REPLY_FORMAT),
        ])
    }

    /// Closes the session if it has been idle past the configured timeout.
    /// Returns whether it is (now) closed.
    pub fn expire_if_idle(&self, session: &mut DialogueSession) -> bool {
        if !session.closed {
            let idle = self.clock.now().0 - session.last_activity.0;
            if idle > self.config.idle_timeout_ms {
                session.closed = true;
            }
        }
        session.closed
    }

    /// Records the student's message and the tutor's guarded reply. On any
    /// failure the session is left unchanged.
    pub fn next_tutor_turn(
        &self,
        session: &mut DialogueSession,
        problem: &Problem,
        student_message: &str,
    ) -> Result<Turn, DialogueError> {
        if self.expire_if_idle(session) {
            return Err(DialogueError::SessionClosed(session.session_id.clone()));
        }
        if student_message.trim().is_empty() {
            return Err(DialogueError::EmptyMessage);
        }
        debug_assert_eq!(session.turns.last().map(|t| t.speaker), Some(Speaker::Tutor));

        let prompt = Self::assemble_dialogue_prompt(session, problem, student_message);
        let request = |prompt: String| {
            CompletionRequest::text(StageTag::Dialogue, prompt)
                .with_temperature(self.config.params.temperature)
                .with_max_output_tokens(self.config.params.max_output_tokens)
        };
        let reply = self.gateway.complete(&request(prompt.clone()))?.text;
        let (text, guard_events) = guard_tutor_message(reply, &session.correct_answer, session.effective, || {
            let revised = join_sections([
                prompt.trim_end().to_owned(),
                render_section(labels::REVISION_REQUEST, REVISION_TEXT),
            ]);
            self.gateway.complete(&request(revised)).map(|r| r.text)
        });

        let now = self.clock.now();
        session.turns.push(Turn {
            speaker: Speaker::Student,
            text: student_message.to_owned(),
            at: now,
            guard_events: Vec::new(),
        });
        let turn = Turn { speaker: Speaker::Tutor, text: text.trim().to_owned(), at: now, guard_events };
        session.turns.push(turn.clone());
        session.last_activity = now;
        Ok(turn)
    }

    /// Marks the session effective when the resubmitted answer is correct,
    /// closing it. Returns the resulting effectiveness.
    pub fn mark_effectiveness(
        &self,
        session: &mut DialogueSession,
        resubmission: &StudentSubmission,
    ) -> Result<bool, DialogueError> {
        if resubmission.problem_id != session.problem_id {
            return Err(DialogueError::ProblemMismatch {
                expected: session.problem_id.clone(),
                got: resubmission.problem_id.clone(),
            });
        }
        if self.expire_if_idle(session) && !session.effective {
            return Err(DialogueError::SessionClosed(session.session_id.clone()));
        }
        if answers_equal(&resubmission.raw_answer, session.correct_answer.canonical()) {
            session.effective = true;
            session.closed = true;
        }
        session.last_activity = self.clock.now();
        Ok(session.effective)
    }
}

/// In-memory session registry. Each session sits behind its own mutex so
/// requests for one session are serialized while distinct sessions run
/// concurrently.
#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<DialogueSession>>>>,
    next_id: AtomicU64,
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate_id(&self) -> SessionId {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        SessionId::new(format!("sess-{n:08}"))
    }

    pub fn insert(&self, session: DialogueSession) -> Arc<Mutex<DialogueSession>> {
        let id = session.session_id.clone();
        let handle = Arc::new(Mutex::new(session));
        self.sessions.write().expect("session lock poisoned").insert(id, Arc::clone(&handle));
        handle
    }

    pub fn get(&self, id: &SessionId) -> Option<Arc<Mutex<DialogueSession>>> {
        self.sessions.read().expect("session lock poisoned").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Closes every session idle longer than `idle_timeout_ms` as of `now`.
    pub fn close_idle(&self, now: Timestamp, idle_timeout_ms: i64) -> usize {
        let handles: Vec<_> = self.sessions.read().expect("session lock poisoned").values().cloned().collect();
        let mut closed = 0;
        for handle in handles {
            let mut s = handle.lock().expect("session lock poisoned");
            if !s.closed && now.0 - s.last_activity.0 > idle_timeout_ms {
                s.closed = true;
                closed += 1;
            }
        }
        closed
    }
}
