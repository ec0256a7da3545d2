use thiserror::Error;

use crate::model::ProblemId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("duplicate problem id {0}")]
    DuplicateProblem(ProblemId),
    #[error("parse error: {0}")]
    Parse(String),
}

impl ModelError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid { field, reason: reason.into() }
    }
}
