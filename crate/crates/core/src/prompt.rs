//! Labeled-section prompt layout shared by every stage.
//!
//! A prompt is a sequence of sections separated by one blank line. Each
//! section starts with a `### <label>` header line followed by its body.
//! Body lines that would themselves look like headers are indented by one
//! space so parsing stays unambiguous.

pub const HEADER_PREFIX: &str = "### ";

pub mod labels {
    pub const TASK: &str = "Task";
    pub const PROBLEM_STATEMENT: &str = "Problem Statement";
    pub const OUTPUT_FORMAT: &str = "Output Format";

    pub const PROBLEM: &str = "Problem";
    pub const SOLUTION: &str = "Solution";
    pub const CORRECT_ANSWER: &str = "Correct Answer";
    pub const EXPLANATION: &str = "Answer Explanation";
    pub const STUDENT_INCORRECT_ANSWER: &str = "Student's Incorrect Answer";
    pub const DRAFT_ANALYSIS: &str = "Draft Analysis";
    pub const INSTRUCTIONS: &str = "Instructions";

    pub const TUTORING_RULES: &str = "Tutoring Rules";
    pub const STUDENT_ANSWER: &str = "Student's Answer";
    pub const ERROR_ANALYSIS: &str = "Error Analysis";
    pub const CONVERSATION: &str = "Conversation So Far";
    pub const STUDENT_MESSAGE: &str = "Student Message";
    pub const REVISION_REQUEST: &str = "Revision Request";
    pub const REPLY_FORMAT: &str = "Reply Format";

    pub const FORMAT_CORRECTION: &str = "Format Correction";
}

pub fn render_section(label: &str, body: &str) -> String {
    let mut out = String::with_capacity(label.len() + body.len() + 8);
    out.push_str(HEADER_PREFIX);
    out.push_str(label);
    out.push('\n');
    let body = body.trim_end();
    if body.is_empty() {
        out.push_str("(none)");
    }
    for (i, line) in body.lines().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if line.starts_with("###") {
            out.push(' ');
        }
        out.push_str(line);
    }
    out
}

/// Joins rendered sections into a prompt.
pub fn join_sections<I, S>(sections: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = String::new();
    for section in sections {
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(section.as_ref());
    }
    out.push('\n');
    out
}

/// Splits a prompt back into `(label, body)` pairs in order.
pub fn parse_sections(prompt: &str) -> Vec<(String, String)> {
    let mut sections: Vec<(String, String)> = Vec::new();
    for line in prompt.lines() {
        if let Some(label) = line.strip_prefix(HEADER_PREFIX) {
            sections.push((label.to_owned(), String::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
    }
    for (_, body) in &mut sections {
        let trimmed = body.trim_end().len();
        body.truncate(trimmed);
    }
    sections
}

pub fn find_section(prompt: &str, label: &str) -> Option<String> {
    parse_sections(prompt)
        .into_iter()
        .find(|(l, _)| l == label)
        .map(|(_, body)| body)
}
