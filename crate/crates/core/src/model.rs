//! Domain types shared by every stage of the tutor, plus answer normalization.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Opaque problem identifier.
    ProblemId
);
id_type!(StudentId);
id_type!(SubmissionId);
id_type!(KnowledgePointId);
id_type!(
    /// Identifier of a tutoring dialogue session.
    SessionId
);
id_type!(
    /// Learning session on the hosting platform, which may span several
    /// problems and dialogues.
    LearningSessionRef
);

/// UTC wall-clock time in milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn saturating_elapsed_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0).max(0) as u64
    }
}

/// A problem together with the five pieces of reference material the
/// analysis prompts are built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: ProblemId,
    pub statement: String,
    pub solution: String,
    pub explanation: String,
    pub correct_answer: String,
    pub knowledge_point_ids: Vec<KnowledgePointId>,
}

impl Problem {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.problem_id.as_str().trim().is_empty() {
            return Err(ModelError::invalid("problem_id", "must be nonempty"));
        }
        if normalize_answer(&self.correct_answer).is_empty() {
            return Err(ModelError::invalid("correct_answer", "must be nonempty"));
        }
        if self.knowledge_point_ids.is_empty() {
            return Err(ModelError::invalid(
                "knowledge_point_ids",
                "at least one knowledge point is required",
            ));
        }
        Ok(())
    }

    pub fn normalized_correct_answer(&self) -> NormalizedAnswer {
        normalize_answer(&self.correct_answer)
    }
}

/// Problems indexed by id. Ids are unique within a catalog.
#[derive(Debug, Clone, Default)]
pub struct ProblemCatalog {
    problems: BTreeMap<ProblemId, Problem>,
}

impl ProblemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_problems(problems: impl IntoIterator<Item = Problem>) -> Result<Self, ModelError> {
        let mut catalog = Self::new();
        for problem in problems {
            catalog.insert(problem)?;
        }
        Ok(catalog)
    }

    /// Parses a JSON array of problems.
    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let problems: Vec<Problem> =
            serde_json::from_str(json).map_err(|e| ModelError::Parse(e.to_string()))?;
        Self::from_problems(problems)
    }

    pub fn insert(&mut self, problem: Problem) -> Result<(), ModelError> {
        problem.validate()?;
        if self.problems.contains_key(&problem.problem_id) {
            return Err(ModelError::DuplicateProblem(problem.problem_id));
        }
        self.problems.insert(problem.problem_id.clone(), problem);
        Ok(())
    }

    pub fn get(&self, id: &ProblemId) -> Option<&Problem> {
        self.problems.get(id)
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Problem> {
        self.problems.values()
    }
}

pub const ALLOWED_MEDIA_TYPES: &[&str] = &["image/png", "image/jpeg", "image/webp", "image/gif"];

/// Photograph or scan of a student's scratch work.
#[derive(Clone, PartialEq, Eq)]
pub struct DraftImage {
    bytes: Vec<u8>,
    media_type: String,
}

impl DraftImage {
    pub fn new(bytes: Vec<u8>, media_type: impl Into<String>) -> Result<Self, ModelError> {
        let media_type = media_type.into();
        if bytes.is_empty() {
            return Err(ModelError::invalid("draft", "image payload is empty"));
        }
        if !ALLOWED_MEDIA_TYPES.contains(&media_type.as_str()) {
            return Err(ModelError::invalid(
                "media_type",
                format!("unsupported media type {media_type:?}"),
            ));
        }
        Ok(Self { bytes, media_type })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> &str {
        &self.media_type
    }

    pub fn byte_length(&self) -> usize {
        self.bytes.len()
    }

    /// Hex SHA-256 of the payload.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(&self.bytes);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for DraftImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DraftImage")
            .field("media_type", &self.media_type)
            .field("byte_length", &self.bytes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentSubmission {
    pub submission_id: SubmissionId,
    pub student_id: StudentId,
    pub problem_id: ProblemId,
    pub raw_answer: String,
    pub draft: Option<DraftImage>,
    pub submitted_at: Timestamp,
}

impl StudentSubmission {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.raw_answer.trim().is_empty() && self.draft.is_none() {
            return Err(ModelError::invalid(
                "raw_answer",
                "an empty answer requires a draft",
            ));
        }
        Ok(())
    }
}

/// Where an error-cause analysis came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisSource {
    Pool,
    DualStream,
}

/// Diagnosis of why a student's answer is wrong and what to do about it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCauseAnalysis {
    pub cause: String,
    pub suggestion: String,
    pub source: AnalysisSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_name: Option<String>,
}

impl ErrorCauseAnalysis {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cause.trim().is_empty() || self.suggestion.trim().is_empty() {
            return Err(ModelError::invalid("analysis", "cause and suggestion must be nonempty"));
        }
        if self.source == AnalysisSource::Pool && self.backend_name.is_some() {
            return Err(ModelError::invalid("analysis", "pool analyses carry no backend name"));
        }
        Ok(())
    }

    /// The same analysis as served from the error pool.
    pub fn as_pooled(&self) -> Self {
        Self {
            cause: self.cause.clone(),
            suggestion: self.suggestion.clone(),
            source: AnalysisSource::Pool,
            backend_name: None,
        }
    }
}

/// Answer text reduced to a canonical form for equality checks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedAnswer {
    canonical: String,
}

impl NormalizedAnswer {
    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }
}

impl fmt::Display for NormalizedAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

/// Canonicalizes formatting only: whitespace is trimmed and collapsed,
/// letters are lowercased, and numeric tokens lose leading `+`, thousands
/// separators, redundant leading zeros and trailing fractional zeros.
/// `1/2` and `0.5` stay distinct.
pub fn normalize_answer(raw: &str) -> NormalizedAnswer {
    let lowered = raw.to_lowercase();
    let mut canonical = String::with_capacity(lowered.len());
    for token in lowered.split_whitespace() {
        if !canonical.is_empty() {
            canonical.push(' ');
        }
        match canonical_number(token) {
            Some(num) => canonical.push_str(&num),
            None => canonical.push_str(token),
        }
    }
    NormalizedAnswer { canonical }
}

pub fn answers_equal(a: &str, b: &str) -> bool {
    normalize_answer(a) == normalize_answer(b)
}

/// Returns the canonical spelling of `token` if it is a plain decimal
/// literal: optional sign, digits (optionally grouped by commas in threes),
/// optional fraction.
fn canonical_number(token: &str) -> Option<String> {
    let (negative, body) = match token.as_bytes().first()? {
        b'+' => (false, &token[1..]),
        b'-' => (true, &token[1..]),
        _ => (false, token),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = ungroup_integer(int_part)?;
    if let Some(f) = frac_part {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }

    let int_trimmed = digits.trim_start_matches('0');
    let int_trimmed = if int_trimmed.is_empty() { "0" } else { int_trimmed };
    let frac_trimmed = frac_part.map(|f| f.trim_end_matches('0')).unwrap_or("");

    let mut out = String::new();
    let is_zero = int_trimmed == "0" && frac_trimmed.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int_trimmed);
    if !frac_trimmed.is_empty() {
        out.push('.');
        out.push_str(frac_trimmed);
    }
    Some(out)
}

/// Strips thousands separators. Groups must be exactly three digits after
/// the first, otherwise the token is not treated as a number.
fn ungroup_integer(int_part: &str) -> Option<String> {
    if int_part.is_empty() {
        return None;
    }
    if !int_part.contains(',') {
        return int_part
            .bytes()
            .all(|b| b.is_ascii_digit())
            .then(|| int_part.to_owned());
    }
    let mut groups = int_part.split(',');
    let first = groups.next()?;
    if first.is_empty() || first.len() > 3 || !first.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut digits = first.to_owned();
    for group in groups {
        if group.len() != 3 || !group.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.push_str(group);
    }
    Some(digits)
}
