//! First analysis stream: what the student's draft shows, how usable it is,
//! and whether a submission has a draft at all.

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway, GatewayError, StageTag};
use crate::model::{DraftImage, Problem, StudentSubmission};
use crate::prompt::{join_sections, labels, render_section};

/// Draft quality criteria, in scoring order.
pub const CRITERIA: [&str; 6] = [
    "clarity",
    "spatial_utilization",
    "organization",
    "consistency",
    "correction_traces",
    "neatness",
];

pub const MAX_CRITERION_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftAnalysis {
    pub summary: String,
    pub extracted_steps: Vec<String>,
    pub backend_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftQualityScore {
    pub clarity: u8,
    pub spatial_utilization: u8,
    pub organization: u8,
    pub consistency: u8,
    pub correction_traces: u8,
    pub neatness: u8,
    pub overall: f64,
}

impl DraftQualityScore {
    /// Builds a score from the six criteria in [`CRITERIA`] order.
    /// Returns `None` if any criterion exceeds the 0–5 scale.
    pub fn from_criteria(c: [u8; 6]) -> Option<Self> {
        if c.iter().any(|&s| s > MAX_CRITERION_SCORE) {
            return None;
        }
        let sum: u32 = c.iter().map(|&s| u32::from(s)).sum();
        Some(Self {
            clarity: c[0],
            spatial_utilization: c[1],
            organization: c[2],
            consistency: c[3],
            correction_traces: c[4],
            neatness: c[5],
            overall: f64::from(sum) / f64::from(6 * u32::from(MAX_CRITERION_SCORE)),
        })
    }

    pub fn criteria(&self) -> [u8; 6] {
        [
            self.clarity,
            self.spatial_utilization,
            self.organization,
            self.consistency,
            self.correction_traces,
            self.neatness,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVerdict {
    Proceed,
    RequestRedo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateDecision {
    pub verdict: GateVerdict,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Drafts smaller than this many bytes are treated as unreadable.
    pub min_draft_bytes: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { min_draft_bytes: 16 }
    }
}

/// Cheap pre-filter; never calls a backend.
pub fn gate_submission(config: &GateConfig, submission: &StudentSubmission) -> GateDecision {
    match &submission.draft {
        None => GateDecision {
            verdict: GateVerdict::RequestRedo,
            reason: "missing draft".into(),
        },
        Some(d) if d.byte_length() < config.min_draft_bytes => GateDecision {
            verdict: GateVerdict::RequestRedo,
            reason: "draft unreadable".into(),
        },
        Some(_) => GateDecision { verdict: GateVerdict::Proceed, reason: "draft present".into() },
    }
}

const DRAFT_TASK: &str = "You are reviewing a photo of a primary-school student's scratch work for the math problem below. \
Transcribe everything the student wrote, in the order it was written, and describe how the student went about solving the problem. \
Include every intermediate number, crossed-out attempt and correction you can see. Do not solve the problem yourself and do not judge whether the work is correct.";

const DRAFT_FORMAT: &str = "Reply in this layout:\n\
Summary: <one paragraph describing what the draft contains and how the student worked>\n\
Steps:\n\
1. <first written step>\n\
2. <next written step>\n\
Leave the list empty if no steps can be read.";

pub fn assemble_draft_prompt(problem: &Problem) -> String {
    join_sections([
        render_section(labels::TASK, DRAFT_TASK),
        render_section(labels::PROBLEM_STATEMENT, &problem.statement),
        render_section(labels::OUTPUT_FORMAT, DRAFT_FORMAT),
    ])
}

const QUALITY_TASK: &str = "Rate the photographed scratch work on six criteria, each an integer from 0 (worst) to 5 (best): \
clarity, spatial utilization, organization, consistency, correction traces and neatness. \
Judge only how usable the draft is as a record of the student's reasoning, not whether the mathematics is right.";

pub fn assemble_quality_prompt() -> String {
    let format = CRITERIA
        .iter()
        .map(|c| format!("{c}: <0-5>"))
        .collect::<Vec<_>>()
        .join("\n");
    join_sections([
        render_section(labels::TASK, QUALITY_TASK),
        render_section(labels::OUTPUT_FORMAT, &format!("Reply with exactly these six lines:\n{format}")),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl Default for StageParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_output_tokens: 1024 }
    }
}

fn empty_draft_error(stage: StageTag) -> GatewayError {
    GatewayError::InvalidRequest { stage, detail: "draft image is empty".into() }
}

pub fn analyze_draft(
    gateway: &Gateway,
    params: StageParams,
    problem: &Problem,
    draft: &DraftImage,
) -> Result<DraftAnalysis, GatewayError> {
    if draft.byte_length() == 0 {
        return Err(empty_draft_error(StageTag::DraftAnalysis));
    }
    let request = CompletionRequest::text(StageTag::DraftAnalysis, assemble_draft_prompt(problem))
        .with_image(draft.clone())
        .with_temperature(params.temperature)
        .with_max_output_tokens(params.max_output_tokens);
    let response = gateway.complete(&request)?;
    let (summary, extracted_steps) = parse_draft_analysis(&response.text)
        .ok_or_else(|| GatewayError::malformed(StageTag::DraftAnalysis, "missing Summary section"))?;
    Ok(DraftAnalysis { summary, extracted_steps, backend_name: response.backend_name })
}

fn parse_draft_analysis(text: &str) -> Option<(String, Vec<String>)> {
    let mut summary = None;
    let mut steps = Vec::new();
    let mut in_steps = false;
    for line in text.lines().map(str::trim) {
        if let Some(s) = line.strip_prefix("Summary:") {
            summary = Some(s.trim().to_owned());
            in_steps = false;
        } else if line.starts_with("Steps:") {
            in_steps = true;
        } else if in_steps && !line.is_empty() {
            let step = line
                .split_once(". ")
                .filter(|(n, _)| n.bytes().all(|b| b.is_ascii_digit()))
                .map(|(_, s)| s)
                .or_else(|| line.strip_prefix("- "))
                .unwrap_or(line);
            steps.push(step.trim().to_owned());
        }
    }
    summary.filter(|s| !s.is_empty()).map(|s| (s, steps))
}

/// Scores the draft, reprompting once if the reply does not contain six
/// parseable scores.
pub fn score_draft_quality(
    gateway: &Gateway,
    params: StageParams,
    draft: &DraftImage,
) -> Result<DraftQualityScore, GatewayError> {
    if draft.byte_length() == 0 {
        return Err(empty_draft_error(StageTag::DraftQuality));
    }
    let base = assemble_quality_prompt();
    let mut prompt = base.clone();
    for attempt in 0..2 {
        let request = CompletionRequest::text(StageTag::DraftQuality, prompt.clone())
            .with_image(draft.clone())
            .with_temperature(params.temperature)
            .with_max_output_tokens(params.max_output_tokens);
        let response = gateway.complete(&request)?;
        if let Some(score) = parse_quality(&response.text) {
            return Ok(score);
        }
        if attempt == 0 {
            prompt = join_sections([
                base.trim_end().to_owned(),
                render_section(
                    labels::FORMAT_CORRECTION,
                    "Your previous reply could not be read. Reply with the six criterion lines only, each ending in an integer from 0 to 5.",
                ),
            ]);
        }
    }
    Err(GatewayError::malformed(StageTag::DraftQuality, "expected six criterion scores"))
}

fn parse_quality(text: &str) -> Option<DraftQualityScore> {
    let mut scores: [Option<u8>; 6] = [None; 6];
    for line in text.lines() {
        let Some((name, value)) = line.split_once(':') else { continue };
        let name = name.trim().to_ascii_lowercase().replace(' ', "_");
        if let Some(i) = CRITERIA.iter().position(|c| *c == name) {
            scores[i] = value.trim().parse::<u8>().ok();
        }
    }
    let mut criteria = [0u8; 6];
    for (slot, score) in criteria.iter_mut().zip(scores) {
        *slot = score?;
    }
    DraftQualityScore::from_criteria(criteria)
}
