//! Deterministic rule-based backend.
//!
//! The scripted backend stands in for both models. It understands problems
//! of the form `a×b+c` with integer operands and reads draft content from
//! fixture images built by [`draft_fixture`]: a PNG signature followed by a
//! `vate-draft` marker line, a `style:` line and one written step per line.
//! Output depends only on the prompt text and the image bytes.

use std::sync::LazyLock;

use regex::Regex;

use super::{estimate_tokens, Backend, CompletionRequest, CompletionResponse, GatewayError, StageTag};
use crate::model::{normalize_answer, DraftImage, NormalizedAnswer, Problem};
use crate::prompt::{find_section, labels};

pub const BACKEND_NAME: &str = "scripted";

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const FIXTURE_MARKER: &[u8] = b"vate-draft\n";

static ARITHMETIC: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+)\s*[×xX*]\s*(\d+)\s*\+\s*(\d+)").expect("valid regex"));
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

/// Slip classes the scripted diagnosis distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlipLabel {
    ForgotFinalAddition,
    PrecedenceError,
    CarryError,
    Unknown,
}

impl SlipLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SlipLabel::ForgotFinalAddition => "forgot-final-addition",
            SlipLabel::PrecedenceError => "precedence-error",
            SlipLabel::CarryError => "carry-error",
            SlipLabel::Unknown => "unknown",
        }
    }

    /// Recovers the label from a cause produced by the scripted backend.
    pub fn from_cause(cause: &str) -> SlipLabel {
        [
            SlipLabel::ForgotFinalAddition,
            SlipLabel::PrecedenceError,
            SlipLabel::CarryError,
        ]
        .into_iter()
        .find(|l| cause.contains(&format!("[{}]", l.as_str())))
        .unwrap_or(SlipLabel::Unknown)
    }
}

/// Operands of an `a×b+c` problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MulAdd {
    pub a: i64,
    pub b: i64,
    pub c: i64,
}

impl MulAdd {
    pub fn parse(statement: &str) -> Option<Self> {
        let caps = ARITHMETIC.captures(statement)?;
        let num = |i: usize| caps.get(i)?.as_str().parse::<i64>().ok();
        Some(MulAdd { a: num(1)?, b: num(2)?, c: num(3)? })
    }

    pub fn product(self) -> i64 {
        self.a * self.b
    }

    pub fn result(self) -> i64 {
        self.a * self.b + self.c
    }

    pub fn classify(self, wrong: i64) -> SlipLabel {
        let correct = self.result();
        if wrong == correct {
            return SlipLabel::Unknown;
        }
        if wrong == self.product() {
            return SlipLabel::ForgotFinalAddition;
        }
        if wrong == self.a * (self.b + self.c) {
            return SlipLabel::PrecedenceError;
        }
        let diff = (wrong - correct).unsigned_abs();
        if diff >= 10 && is_power_of_ten(diff) {
            return SlipLabel::CarryError;
        }
        SlipLabel::Unknown
    }
}

fn is_power_of_ten(mut n: u64) -> bool {
    while n >= 10 && n.is_multiple_of(10) {
        n /= 10;
    }
    n == 1
}

/// Scripted error diagnosis for `problem` answered with `wrong_answer`.
/// Returns the two-line `Cause:`/`Suggestion:` text the error stage emits.
pub fn scripted_diagnose(problem: &Problem, draft_summary: &str, wrong_answer: &NormalizedAnswer) -> String {
    diagnose(Some(&problem.statement), Some(draft_summary), Some(wrong_answer.canonical()))
}

fn diagnose(statement: Option<&str>, draft_summary: Option<&str>, wrong: Option<&str>) -> String {
    let parsed = statement.and_then(MulAdd::parse);
    let wrong_value = wrong.and_then(|w| w.parse::<i64>().ok());
    let (Some(m), Some(w)) = (parsed, wrong_value) else {
        return unknown_diagnosis();
    };
    let label = m.classify(w);
    let draft_note = match draft_summary {
        Some(summary) if mentions_number(summary, m.product()) => {
            format!(" The draft shows the intermediate product {}.", m.product())
        }
        _ => String::new(),
    };
    let (a, b, c) = (m.a, m.b, m.c);
    match label {
        SlipLabel::ForgotFinalAddition => format!(
            "Cause: [forgot-final-addition] The student computed {a} × {b} = {p} correctly but forgot to add the final {c}, submitting the product as the answer.{draft_note}\n\
             Suggestion: Don't forget to add after completing the multiplication; the + {c} still has to be applied to {p}.",
            p = m.product()
        ),
        SlipLabel::PrecedenceError => format!(
            "Cause: [precedence-error] The student added {b} + {c} before multiplying, computing {a} × ({b} + {c}) = {w} instead of following the order of operations.{draft_note}\n\
             Suggestion: Do the multiplication first and the addition second: work out {a} × {b} before adding {c}."
        ),
        SlipLabel::CarryError => format!(
            "Cause: [carry-error] The answer {w} differs from the correct result by a single place value, which points to a dropped or extra carry while multiplying {a} × {b}.{draft_note}\n\
             Suggestion: Redo {a} × {b} column by column and write each carried digit down before adding it to the next column."
        ),
        SlipLabel::Unknown => unknown_diagnosis(),
    }
}

fn unknown_diagnosis() -> String {
    "Cause: [unknown] The cause of this error could not be determined from the available work.\n\
     Suggestion: Review each step of your work carefully and compare it with the worked solution."
        .to_owned()
}

fn mentions_number(text: &str, n: i64) -> bool {
    let needle = n.to_string();
    NUMBER.find_iter(text).any(|m| m.as_str() == needle)
}

/// Presentation of a fixture draft, which drives scripted quality scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftStyle {
    /// Every criterion scores 4.
    Neat,
    /// Every criterion scores 1.
    Scribble,
    /// Every criterion scores the given value (clamped to 5).
    Uniform(u8),
}

impl DraftStyle {
    fn encode(self) -> String {
        match self {
            DraftStyle::Neat => "neat".into(),
            DraftStyle::Scribble => "scribble".into(),
            DraftStyle::Uniform(n) => format!("score {}", n.min(5)),
        }
    }

    fn decode(s: &str) -> Option<Self> {
        match s {
            "neat" => Some(DraftStyle::Neat),
            "scribble" => Some(DraftStyle::Scribble),
            other => other.strip_prefix("score ")?.parse::<u8>().ok().map(|n| DraftStyle::Uniform(n.min(5))),
        }
    }

    fn criterion_score(self) -> u8 {
        match self {
            DraftStyle::Neat => 4,
            DraftStyle::Scribble => 1,
            DraftStyle::Uniform(n) => n.min(5),
        }
    }
}

/// Builds a scripted-backend draft image containing the given written steps.
pub fn draft_fixture(style: DraftStyle, steps: &[&str]) -> DraftImage {
    let mut bytes = PNG_SIGNATURE.to_vec();
    bytes.extend_from_slice(FIXTURE_MARKER);
    bytes.extend_from_slice(format!("style: {}\n", style.encode()).as_bytes());
    for step in steps {
        bytes.extend_from_slice(step.replace('\n', " ").as_bytes());
        bytes.push(b'\n');
    }
    DraftImage::new(bytes, "image/png").expect("fixture payload is nonempty")
}

struct FixtureContent {
    style: Option<DraftStyle>,
    steps: Vec<String>,
}

fn read_fixture(image: &DraftImage) -> Option<FixtureContent> {
    let rest = image.bytes().strip_prefix(&PNG_SIGNATURE[..])?.strip_prefix(FIXTURE_MARKER)?;
    let text = std::str::from_utf8(rest).ok()?;
    let mut lines = text.lines();
    let style = lines
        .next()
        .and_then(|l| l.strip_prefix("style: "))
        .and_then(DraftStyle::decode);
    let steps = lines.map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
    Some(FixtureContent { style, steps })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ScriptedBackend;

impl ScriptedBackend {
    pub fn new() -> Self {
        Self
    }

    fn draft_analysis(&self, request: &CompletionRequest) -> String {
        let statement = find_section(&request.prompt, labels::PROBLEM_STATEMENT).unwrap_or_default();
        let content = request.image.as_ref().and_then(read_fixture);
        match content {
            Some(c) if !c.steps.is_empty() => {
                let values: Vec<&str> = {
                    let mut seen = Vec::new();
                    for step in &c.steps {
                        for m in NUMBER.find_iter(step) {
                            if !seen.contains(&m.as_str()) {
                                seen.push(m.as_str());
                            }
                        }
                    }
                    seen
                };
                let mut out = format!(
                    "Summary: While solving \"{}\", the student wrote {} step(s): {}. Values written: {}.\nSteps:",
                    statement.trim(),
                    c.steps.len(),
                    c.steps.join("; "),
                    if values.is_empty() { "none".to_owned() } else { values.join(", ") }
                );
                for (i, step) in c.steps.iter().enumerate() {
                    out.push_str(&format!("\n{}. {}", i + 1, step));
                }
                out
            }
            _ => "Summary: The draft could not be transcribed in detail; no intermediate steps were identified.\nSteps:".to_owned(),
        }
    }

    fn draft_quality(&self, request: &CompletionRequest) -> String {
        let scores: [u8; 6] = match request.image.as_ref() {
            None => [0; 6],
            Some(image) => match read_fixture(image).and_then(|c| c.style) {
                Some(style) => [style.criterion_score(); 6],
                None => {
                    let digest = image.digest();
                    let bytes = digest.as_bytes();
                    std::array::from_fn(|i| {
                        let hex = std::str::from_utf8(&bytes[2 * i..2 * i + 2]).unwrap_or("00");
                        (u8::from_str_radix(hex, 16).unwrap_or(0)) % 6
                    })
                }
            },
        };
        crate::draft::CRITERIA
            .iter()
            .zip(scores)
            .map(|(name, score)| format!("{name}: {score}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn error_analysis(&self, request: &CompletionRequest) -> String {
        let statement = find_section(&request.prompt, labels::PROBLEM);
        let wrong = find_section(&request.prompt, labels::STUDENT_INCORRECT_ANSWER)
            .map(|w| normalize_answer(&w).canonical().to_owned());
        let draft = find_section(&request.prompt, labels::DRAFT_ANALYSIS);
        diagnose(statement.as_deref(), draft.as_deref(), wrong.as_deref())
    }

    fn dialogue(&self, request: &CompletionRequest) -> String {
        let prompt = &request.prompt;
        let analysis = find_section(prompt, labels::ERROR_ANALYSIS).unwrap_or_default();
        let suggestion = analysis
            .lines()
            .find_map(|l| l.strip_prefix("Suggestion:"))
            .map(str::trim)
            .unwrap_or("Go back over each step of your work.")
            .to_owned();
        if find_section(prompt, labels::REVISION_REQUEST).is_some() {
            return format!(
                "Let's not jump to the final result yet. {suggestion} Try that step again and tell me what you get."
            );
        }
        let message = find_section(prompt, labels::STUDENT_MESSAGE).unwrap_or_default().to_lowercase();
        let statement = find_section(prompt, labels::PROBLEM).unwrap_or_default();

        const ASKS_ANSWER: &[&str] = &["answer", "solution", "tell me", "result", "give me"];
        const WANTS_EXPLANATION: &[&str] = &["explain", "why", "how do", "how does", "show me"];
        const ON_TOPIC: &[&str] = &[
            "add", "plus", "sum", "multipl", "times", "product", "minus", "subtract", "divid",
            "step", "carry", "number", "problem", "calculat", "equal", "+", "×", "*", "=",
        ];

        if ASKS_ANSWER.iter().any(|k| message.contains(k)) {
            return format!(
                "I won't hand you the answer, but here's a hint: {suggestion} What do you get when you try that?"
            );
        }
        if WANTS_EXPLANATION.iter().any(|k| message.contains(k)) {
            let explanation = find_section(prompt, labels::EXPLANATION).unwrap_or_default();
            return format!("Here is how this kind of problem works: {} Does that make sense?", explanation.trim());
        }
        let numbers: Vec<&str> = NUMBER.find_iter(&message).map(|m| m.as_str()).collect();
        if !numbers.is_empty() {
            return format!(
                "You mentioned {}. Check how you got there. {suggestion} What is your next step?",
                numbers.join(", ")
            );
        }
        if !ON_TOPIC.iter().any(|k| message.contains(k)) {
            return format!(
                "Let's stay focused on the problem: {}. Which step would you like to look at first?",
                statement.trim()
            );
        }
        format!("Good thinking. {suggestion} What do you think the next step should be?")
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        BACKEND_NAME
    }

    fn call(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let text = match request.stage {
            StageTag::DraftAnalysis => self.draft_analysis(request),
            StageTag::DraftQuality => self.draft_quality(request),
            StageTag::ErrorAnalysis => self.error_analysis(request),
            StageTag::Dialogue => self.dialogue(request),
        };
        let image_tokens = request.image.as_ref().map_or(0, |_| 85);
        Ok(CompletionResponse {
            input_tokens: estimate_tokens(&request.prompt) + image_tokens,
            output_tokens: estimate_tokens(&text),
            latency_ms: 0,
            backend_name: BACKEND_NAME.to_owned(),
            text,
        })
    }
}
