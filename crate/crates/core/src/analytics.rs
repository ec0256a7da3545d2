//! Learning-outcome metrics over event streams.
//!
//! Per knowledge point and learning session:
//!
//! - `niact`: incorrect attempts
//! - `nqct`: attempts
//! - `arct`: correct rate, `(nqct - niact) / nqct`, or 0 with no attempts
//! - `nvrs`: relearn events (rewatched videos)
//!
//! Events arrive as line-delimited JSON, one [`LearningEvent`] per line:
//!
//! ```text
//! {"student_id":"u1","session_ref":"ls-1","at":1000,"kind":"attempt","problem_id":"p1","knowledge_point_id":"kp1","correct":false}
//! {"student_id":"u1","session_ref":"ls-1","at":1500,"kind":"relearn","knowledge_point_id":"kp1"}
//! {"student_id":"u1","session_ref":"ls-1","at":2000,"kind":"dialogue_link","dialogue_session_id":"sess-1","effective":true,"student_char_count":40,"student_turns":3}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::dialogue::{quality_bucket, DialogueQuality, QualityBucket};
use crate::model::{KnowledgePointId, LearningSessionRef, ProblemId, SessionId, StudentId, Timestamp};
use crate::par::{self, Exec};
use crate::pipeline::Ablation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningEvent {
    pub student_id: StudentId,
    pub session_ref: LearningSessionRef,
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Attempt { problem_id: ProblemId, knowledge_point_id: KnowledgePointId, correct: bool },
    Relearn { knowledge_point_id: KnowledgePointId },
    /// A tutoring dialogue held during the learning session, with the
    /// figures the reports group by.
    DialogueLink {
        dialogue_session_id: SessionId,
        #[serde(default)]
        effective: bool,
        #[serde(default)]
        student_char_count: usize,
        #[serde(default)]
        student_turns: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("events span sessions {first} and {other}")]
    MixedSessions { first: LearningSessionRef, other: LearningSessionRef },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: timestamp goes backwards within session {session_ref}")]
    OutOfOrder { line: usize, session_ref: LearningSessionRef },
    #[error("duplicate judgment for record {record_id} ({ablated:?})")]
    DuplicateJudgment { record_id: String, ablated: AblatedElement },
    #[error("reading events: {0}")]
    Io(#[from] std::io::Error),
}

/// Reads line-delimited events, rejecting unparseable lines and timestamps
/// that go backwards within a session. Blank lines are ignored.
pub fn read_events(reader: impl BufRead) -> Result<Vec<LearningEvent>, AnalyticsError> {
    let mut events = Vec::new();
    let mut last_at: HashMap<LearningSessionRef, Timestamp> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: LearningEvent = serde_json::from_str(&line)
            .map_err(|e| AnalyticsError::Parse { line: line_no, message: e.to_string() })?;
        if let Some(prev) = last_at.get(&event.session_ref) {
            if event.at < *prev {
                return Err(AnalyticsError::OutOfOrder { line: line_no, session_ref: event.session_ref });
            }
        }
        last_at.insert(event.session_ref.clone(), event.at);
        events.push(event);
    }
    Ok(events)
}

pub fn parse_events(text: &str) -> Result<Vec<LearningEvent>, AnalyticsError> {
    read_events(text.as_bytes())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KpMetrics {
    pub niact: u32,
    pub nqct: u32,
    pub arct: f64,
    pub nvrs: u32,
}

impl KpMetrics {
    fn finish(mut self) -> Self {
        self.arct = if self.nqct > 0 { f64::from(self.nqct - self.niact) / f64::from(self.nqct) } else { 0.0 };
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub per_kp: BTreeMap<KnowledgePointId, KpMetrics>,
}

impl SessionMetrics {
    /// Metrics for one knowledge point; all zero if it saw no events.
    pub fn kp(&self, id: &KnowledgePointId) -> KpMetrics {
        self.per_kp.get(id).copied().unwrap_or_default()
    }
}

pub fn session_metrics(events: &[LearningEvent]) -> Result<SessionMetrics, AnalyticsError> {
    if let Some(first) = events.first() {
        if let Some(other) = events.iter().find(|e| e.session_ref != first.session_ref) {
            return Err(AnalyticsError::MixedSessions {
                first: first.session_ref.clone(),
                other: other.session_ref.clone(),
            });
        }
    }
    let mut per_kp: BTreeMap<KnowledgePointId, KpMetrics> = BTreeMap::new();
    for event in events {
        match &event.kind {
            EventKind::Attempt { knowledge_point_id, correct, .. } => {
                let m = per_kp.entry(knowledge_point_id.clone()).or_default();
                m.nqct += 1;
                if !correct {
                    m.niact += 1;
                }
            }
            EventKind::Relearn { knowledge_point_id } => {
                per_kp.entry(knowledge_point_id.clone()).or_default().nvrs += 1;
            }
            EventKind::DialogueLink { .. } => {}
        }
    }
    let per_kp = per_kp.into_iter().map(|(k, m)| (k, m.finish())).collect();
    Ok(SessionMetrics { per_kp })
}

/// One learning session reduced to what the reports group by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_ref: LearningSessionRef,
    pub student_id: StudentId,
    pub metrics: SessionMetrics,
    pub conversation: bool,
    pub effective: bool,
    pub quality: DialogueQuality,
}

fn summarize_one(events: &[LearningEvent]) -> Result<SessionSummary, AnalyticsError> {
    let metrics = session_metrics(events)?;
    let (mut conversation, mut effective, mut chars, mut turns) = (false, false, 0usize, 0usize);
    for event in events {
        if let EventKind::DialogueLink { effective: e, student_char_count, student_turns, .. } = &event.kind {
            conversation = true;
            effective |= *e;
            chars += student_char_count;
            turns += student_turns;
        }
    }
    let first = &events[0];
    Ok(SessionSummary {
        session_ref: first.session_ref.clone(),
        student_id: first.student_id.clone(),
        metrics,
        conversation,
        effective,
        quality: DialogueQuality { bucket: quality_bucket(turns > 0, chars), student_char_count: chars },
    })
}

/// Splits events by session and summarizes each, in order of first
/// appearance.
pub fn summarize_sessions(exec: Exec, events: &[LearningEvent]) -> Result<Vec<SessionSummary>, AnalyticsError> {
    let mut order: Vec<LearningSessionRef> = Vec::new();
    let mut groups: HashMap<LearningSessionRef, Vec<LearningEvent>> = HashMap::new();
    for event in events {
        groups
            .entry(event.session_ref.clone())
            .or_insert_with(|| {
                order.push(event.session_ref.clone());
                Vec::new()
            })
            .push(event.clone());
    }
    let grouped: Vec<Vec<LearningEvent>> = order.iter().map(|r| groups.remove(r).unwrap_or_default()).collect();
    par::map(exec, &grouped, |g| summarize_one(g)).into_iter().collect()
}

/// Order-independent mean: values are sorted before summation so any
/// permutation of the input gives a bit-identical result.
fn mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    Some(values.into_iter().sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub conversation: bool,
    pub effective: bool,
    /// Contributing (session, knowledge point) pairs.
    pub n: usize,
    /// Pairs with at least one attempt, which alone enter the ARCT mean.
    pub arct_n: usize,
    pub niact: Option<f64>,
    pub nqct: Option<f64>,
    pub arct: Option<f64>,
    pub nvrs: Option<f64>,
}

/// Means of the four metrics for sessions without dialogue, with
/// ineffective dialogue and with effective dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub rows: Vec<OutcomeRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"))
}

impl OutcomeReport {
    pub fn row(&self, conversation: bool, effective: bool) -> &OutcomeRow {
        self.rows
            .iter()
            .find(|r| r.conversation == conversation && r.effective == effective)
            .expect("canonical row")
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("conversation\teffective\tn\tniact\tnqct\tarct\tnvrs\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                mark(r.conversation),
                mark(r.effective),
                r.n,
                cell(r.niact),
                cell(r.nqct),
                cell(r.arct),
                cell(r.nvrs)
            );
        }
        out
    }
}

const OUTCOME_ROWS: [(bool, bool); 3] = [(false, false), (true, false), (true, true)];

/// Groups sessions by (conversation, effective). Without a conversation
/// the effective flag is meaningless, so such sessions all land in the
/// first row.
pub fn group_report(sessions: &[(SessionMetrics, bool, bool)]) -> OutcomeReport {
    let rows = OUTCOME_ROWS
        .iter()
        .map(|&(conversation, effective)| {
            let kps: Vec<KpMetrics> = sessions
                .iter()
                .filter(|(_, c, e)| *c == conversation && (!conversation || *e == effective))
                .flat_map(|(m, _, _)| m.per_kp.values().copied())
                .collect();
            let col = |f: fn(&KpMetrics) -> u32| mean(kps.iter().map(|m| f64::from(f(m))).collect());
            let arct: Vec<f64> = kps.iter().filter(|m| m.nqct > 0).map(|m| m.arct).collect();
            OutcomeRow {
                conversation,
                effective,
                n: kps.len(),
                arct_n: arct.len(),
                niact: col(|m| m.niact),
                nqct: col(|m| m.nqct),
                arct: mean(arct),
                nvrs: col(|m| m.nvrs),
            }
        })
        .collect();
    OutcomeReport { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub conversation: bool,
    pub effective: bool,
    pub quality: QualityBucket,
    pub n: usize,
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub rows: Vec<RepeatRow>,
}

impl RepeatReport {
    pub fn row(&self, quality: QualityBucket, effective: bool) -> &RepeatRow {
        self.rows
            .iter()
            .find(|r| r.quality == quality && (quality == QualityBucket::NoDialogue || r.effective == effective))
            .expect("canonical row")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("conversation\teffective\tquality\tn\taverage\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                mark(r.conversation),
                mark(r.effective),
                bucket_name(r.quality),
                r.n,
                cell(r.average)
            );
        }
        out
    }
}

pub fn bucket_name(b: QualityBucket) -> &'static str {
    match b {
        QualityBucket::NoDialogue => "no dialogue",
        QualityBucket::TooShort => "too short",
        QualityBucket::Moderate => "moderate",
        QualityBucket::TooLong => "too long",
    }
}

const REPEAT_ROWS: [(QualityBucket, bool); 7] = [
    (QualityBucket::NoDialogue, false),
    (QualityBucket::TooShort, false),
    (QualityBucket::TooShort, true),
    (QualityBucket::Moderate, false),
    (QualityBucket::Moderate, true),
    (QualityBucket::TooLong, false),
    (QualityBucket::TooLong, true),
];

/// Mean repeat-learning counts by dialogue quality and effectiveness. A
/// session without conversation, or whose dialogue had no student turns,
/// counts as no dialogue.
pub fn repeat_learning_report(sessions: &[(u32, bool, bool, DialogueQuality)]) -> RepeatReport {
    let rows = REPEAT_ROWS
        .iter()
        .map(|&(quality, effective)| {
            let values: Vec<f64> = sessions
                .iter()
                .filter(|(_, conversation, e, q)| {
                    let bucket = if *conversation { q.bucket } else { QualityBucket::NoDialogue };
                    bucket == quality && (quality == QualityBucket::NoDialogue || *e == effective)
                })
                .map(|(count, ..)| f64::from(*count))
                .collect();
            RepeatRow {
                conversation: quality != QualityBucket::NoDialogue,
                effective: quality != QualityBucket::NoDialogue && effective,
                quality,
                n: values.len(),
                average: mean(values),
            }
        })
        .collect();
    RepeatReport { rows }
}

pub fn outcome_report_from(summaries: &[SessionSummary]) -> OutcomeReport {
    let rows: Vec<_> = summaries.iter().map(|s| (s.metrics.clone(), s.conversation, s.effective)).collect();
    group_report(&rows)
}

/// Repeat counts are the relearn events per (session, knowledge point).
pub fn repeat_report_from(summaries: &[SessionSummary]) -> RepeatReport {
    let rows: Vec<_> = summaries
        .iter()
        .flat_map(|s| s.metrics.per_kp.values().map(move |m| (m.nvrs, s.conversation, s.effective, s.quality)))
        .collect();
    repeat_learning_report(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblatedElement {
    Draft,
    Problem,
    Solution,
    Answer,
}

impl AblatedElement {
    pub const ALL: [AblatedElement; 4] =
        [AblatedElement::Draft, AblatedElement::Problem, AblatedElement::Solution, AblatedElement::Answer];

    pub fn ablation(self) -> Ablation {
        match self {
            AblatedElement::Draft => Ablation::DropDraft,
            AblatedElement::Problem => Ablation::DropProblem,
            AblatedElement::Solution => Ablation::DropSolution,
            AblatedElement::Answer => Ablation::DropAnswer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Full,
    Ablated,
}

/// A judge's pick between the full-prompt analysis and one with an element
/// left out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationJudgment {
    pub record_id: String,
    pub ablated: AblatedElement,
    pub winner: Winner,
}

/// Share of judgments won by the full prompt, per ablated element. Elements
/// without judgments are absent.
pub fn win_rate(judgments: &[AblationJudgment]) -> Result<BTreeMap<AblatedElement, f64>, AnalyticsError> {
    let mut seen = HashSet::new();
    let mut tally: BTreeMap<AblatedElement, (u64, u64)> = BTreeMap::new();
    for j in judgments {
        if !seen.insert((j.record_id.as_str(), j.ablated)) {
            return Err(AnalyticsError::DuplicateJudgment { record_id: j.record_id.clone(), ablated: j.ablated });
        }
        let t = tally.entry(j.ablated).or_default();
        t.1 += 1;
        if j.winner == Winner::Full {
            t.0 += 1;
        }
    }
    Ok(tally.into_iter().map(|(k, (full, total))| (k, full as f64 / total as f64)).collect())
}
