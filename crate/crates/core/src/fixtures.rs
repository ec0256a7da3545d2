//! Reference problems and drafts for tests, demos and the simulator.

use crate::gateway::scripted::{draft_fixture, DraftStyle};
use crate::model::{DraftImage, Problem, ProblemCatalog};

/// Problems shipped in `fixtures/problems.json`.
pub const PROBLEMS_JSON: &str = include_str!("../fixtures/problems.json");

pub fn catalog() -> ProblemCatalog {
    ProblemCatalog::from_json(PROBLEMS_JSON).expect("bundled problems are valid")
}

/// `23 × 26 + 89`, correct answer 687.
pub fn problem_23x26() -> Problem {
    catalog().get(&"p-23x26-89".into()).cloned().expect("bundled problem")
}

/// `12 × 15 + 345`, correct answer 525.
pub fn problem_12x15() -> Problem {
    catalog().get(&"p-12x15-345".into()).cloned().expect("bundled problem")
}

/// Neat draft of a student who stopped after the multiplication.
pub fn forgot_addition_draft() -> DraftImage {
    draft_fixture(DraftStyle::Neat, &["23 × 26", "= 598", "answer: 598"])
}

pub fn scribble_draft() -> DraftImage {
    draft_fixture(DraftStyle::Scribble, &["~~ 5?8 ~~"])
}

pub fn draft(style: DraftStyle, steps: &[&str]) -> DraftImage {
    draft_fixture(style, steps)
}
