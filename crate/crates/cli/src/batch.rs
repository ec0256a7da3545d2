//! Offline replay of submissions through the same path as the HTTP API.
//!
//! Each input line is one JSON record:
//!
//! ```json
//! {"student_id":"s1","problem_id":"p-23x26-89","answer":"598","draft_path":"drafts/s1.png"}
//! ```
//!
//! `draft_path` is resolved against the batch file's directory. The media
//! type comes from `media_type` or, failing that, the file extension. The
//! optional `session_id`, `submission_id` and `learning_session_ref` fields
//! mean what they mean in a submission request.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use base64::Engine;
use serde::{Deserialize, Serialize};
use vate_core::model::{LearningSessionRef, ProblemId, SessionId, StudentId, SubmissionId};
use vate_service::api::{ApiError, DraftPayload, SubmissionRequest, SubmissionResponse};
use vate_service::AppState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchLine {
    pub student_id: StudentId,
    pub problem_id: ProblemId,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_id: Option<SubmissionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_session_ref: Option<LearningSessionRef>,
}

/// One output record per input line, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineOutcome {
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<SubmissionResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub lines: usize,
    pub succeeded: usize,
}

pub fn media_type_for(path: &Path) -> Option<&'static str> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => Some("image/png"),
        "jpg" | "jpeg" => Some("image/jpeg"),
        "webp" => Some("image/webp"),
        "gif" => Some("image/gif"),
        _ => None,
    }
}

fn to_request(line: BatchLine, base: &Path) -> Result<SubmissionRequest, ApiError> {
    let draft = match &line.draft_path {
        None => None,
        Some(rel) => {
            let path = base.join(rel);
            let bytes = std::fs::read(&path)
                .map_err(|e| ApiError::bad_request(format!("reading draft {}: {e}", path.display())))?;
            let media_type = line
                .media_type
                .clone()
                .or_else(|| media_type_for(&path).map(str::to_owned))
                .ok_or_else(|| ApiError::bad_request(format!("cannot tell the media type of {}", path.display())))?;
            Some(DraftPayload { data: base64::engine::general_purpose::STANDARD.encode(bytes), media_type })
        }
    };
    Ok(SubmissionRequest {
        student_id: line.student_id,
        problem_id: line.problem_id,
        answer: line.answer,
        draft,
        session_id: line.session_id,
        submission_id: line.submission_id,
        learning_session_ref: line.learning_session_ref,
    })
}

/// Runs one batch line. Blank lines yield `None`.
pub fn analyze_line(state: &AppState, text: &str, base: &Path) -> Option<Result<SubmissionResponse, ApiError>> {
    if text.trim().is_empty() {
        return None;
    }
    let result = serde_json::from_str::<BatchLine>(text)
        .map_err(|e| ApiError::bad_request(format!("invalid batch record: {e}")))
        .and_then(|line| to_request(line, base))
        .and_then(|req| state.submit(req, None));
    Some(result)
}

/// Analyzes every line of `reader`, writing one JSON outcome per
/// nonblank line to `out`.
pub fn analyze(state: &AppState, reader: impl BufRead, base: &Path, out: &mut dyn Write) -> anyhow::Result<BatchSummary> {
    let mut summary = BatchSummary::default();
    for (i, text) in reader.lines().enumerate() {
        let text = text.context("reading batch")?;
        let Some(result) = analyze_line(state, &text, base) else { continue };
        summary.lines += 1;
        let outcome = match result {
            Ok(response) => {
                summary.succeeded += 1;
                LineOutcome { line: i + 1, response: Some(response), error: None }
            }
            Err(error) => LineOutcome { line: i + 1, response: None, error: Some(error) },
        };
        writeln!(out, "{}", serde_json::to_string(&outcome)?)?;
    }
    Ok(summary)
}

pub fn analyze_file(state: &AppState, path: &Path, out: &mut dyn Write) -> anyhow::Result<BatchSummary> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    analyze(state, BufReader::new(file), base, out)
}
