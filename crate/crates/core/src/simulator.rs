//! Long-tail workload generator and cost accountant for the error pool.
//!
//! Synthetic `a × b + c` problems receive wrong answers whose category is
//! Zipf distributed. Every submission runs through the real pipeline with
//! the scripted backend, and the report counts the error-analysis calls
//! that actually reached the backend.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::clock::ManualClock;
use crate::draft::GateConfig;
use crate::gateway::scripted::{draft_fixture, DraftStyle};
use crate::gateway::{Gateway, StageTag};
use crate::model::{DraftImage, Problem, ProblemCatalog, ProblemId, StudentSubmission, SubmissionId, Timestamp};
use crate::par::{self, Exec};
use crate::pipeline::{AnalysisPipeline, PipelineConfig, PipelineError, Verdict};
use crate::pool::{ErrorPool, PoolConfig, DEFAULT_CAPACITY};

/// Category indices at or below this count as the head of the distribution.
pub const TOP_CATEGORIES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_problems: usize,
    pub distinct_answers_per_problem: usize,
    pub zipf_exponent: f64,
    pub n_submissions: usize,
    pub quality_pass_prob: f64,
    pub seed: u64,
    #[serde(default = "default_capacity")]
    pub pool_capacity: usize,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_problems: 10,
            distinct_answers_per_problem: 30,
            zipf_exponent: 1.1,
            n_submissions: 10_000,
            quality_pass_prob: 1.0,
            seed: 42,
            pool_capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_owned()));
        if self.n_problems == 0 {
            return bad("n_problems must be at least 1");
        }
        if self.distinct_answers_per_problem == 0 {
            return bad("distinct_answers_per_problem must be at least 1");
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be a positive number");
        }
        if self.n_submissions == 0 {
            return bad("n_submissions must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.quality_pass_prob) {
            return bad("quality_pass_prob must lie in [0, 1]");
        }
        if self.pool_capacity == 0 {
            return bad("pool_capacity must be at least 1");
        }
        Ok(())
    }
}

/// Draws category indices in `1..=distinct` with probability proportional
/// to `index^-exponent`.
#[derive(Debug, Clone, Copy)]
pub struct ZipfSampler {
    dist: Zipf<f64>,
}

impl ZipfSampler {
    pub fn new(exponent: f64, distinct: usize) -> Result<Self, SimError> {
        if distinct == 0 {
            return Err(SimError::InvalidConfig("distinct must be at least 1".into()));
        }
        let dist = Zipf::new(distinct as f64, exponent).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng) as usize
    }
}

pub fn sample_answer<R: Rng + ?Sized>(exponent: f64, distinct: usize, rng: &mut R) -> Result<usize, SimError> {
    Ok(ZipfSampler::new(exponent, distinct)?.sample(rng))
}

/// `n` draws, split into fixed chunks with their own ChaCha stream so the
/// result depends only on the seed, never on scheduling.
pub fn sample_many(exec: Exec, sampler: ZipfSampler, seed: u64, n: usize) -> Vec<usize> {
    const CHUNK: usize = 8192;
    let chunks = n.div_ceil(CHUNK);
    par::map_range(exec, chunks, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let len = CHUNK.min(n - i * CHUNK);
        (0..len).map(|_| sampler.sample(&mut rng)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Operands {
    a: i64,
    b: i64,
    c: i64,
}

impl Operands {
    fn correct(self) -> i64 {
        self.a * self.b + self.c
    }
}

fn synthetic_problem(index: usize, ops: Operands) -> Problem {
    let Operands { a, b, c } = ops;
    let p = a * b;
    Problem {
        problem_id: ProblemId::new(format!("sim-{index:04}")),
        statement: format!("Calculate {a} × {b} + {c}."),
        solution: format!("Multiply first: {a} × {b} = {p}. Then add: {p} + {c} = {}.", ops.correct()),
        explanation: format!("Multiplication comes before addition, so {a} × {b} + {c} = {}.", ops.correct()),
        correct_answer: ops.correct().to_string(),
        knowledge_point_ids: vec!["kp-order-of-operations".into()],
    }
}

/// Wrong answers by category: the two classic slips first, then values
/// drifting away from the correct answer, all distinct.
fn wrong_answers(ops: Operands, distinct: usize) -> Vec<i64> {
    let correct = ops.correct();
    let mut out: Vec<i64> = Vec::with_capacity(distinct);
    let push = |v: i64, out: &mut Vec<i64>| {
        if v != correct && !out.contains(&v) && out.len() < distinct {
            out.push(v);
        }
    };
    push(ops.a * ops.b, &mut out);
    push(ops.a * (ops.b + ops.c), &mut out);
    let mut step = 1;
    while out.len() < distinct {
        push(correct + step, &mut out);
        push(correct - step, &mut out);
        step += 1;
    }
    out
}

/// Ways a student may write the same number.
fn written_form(value: i64, variant: u8) -> String {
    if value < 0 {
        return value.to_string();
    }
    match variant % 4 {
        0 => value.to_string(),
        1 => format!(" {value} "),
        2 => format!("{value}.0"),
        _ => format!("0{value}"),
    }
}

#[derive(Debug, Clone)]
struct SimSubmission {
    problem: usize,
    category: usize,
    passes_quality: bool,
    variant: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Deterministic single-threaded loop.
    #[default]
    Sequential,
    /// Submissions processed in parallel to stress the pool. Counts still
    /// obey the bound but need not be identical across runs.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub mode: SimMode,
    pub n_submissions: usize,
    /// Error-analysis calls that reached the backend.
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub hit_rate: f64,
    pub inserts: u64,
    pub rejects_quality: u64,
    pub rejects_capacity: u64,
    /// Distinct wrong-answer categories drawn, per problem.
    pub per_problem_distinct_seen: Vec<usize>,
    pub distinct_seen_total: usize,
    /// Problems times distinct answers per problem.
    pub bound_nk: u64,
    /// Share of draws whose category index is at most [`TOP_CATEGORIES`].
    pub top40_coverage: f64,
}

impl SavingsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, String); 11] = [
            ("mode", format!("{:?}", self.mode).to_lowercase()),
            ("submissions", self.n_submissions.to_string()),
            ("backend calls", self.backend_calls.to_string()),
            ("cache hits", self.cache_hits.to_string()),
            ("hit rate", format!("{:.4}", self.hit_rate)),
            ("inserts", self.inserts.to_string()),
            ("quality rejects", self.rejects_quality.to_string()),
            ("capacity rejects", self.rejects_capacity.to_string()),
            ("distinct seen", self.distinct_seen_total.to_string()),
            ("bound N*K", self.bound_nk.to_string()),
            ("top-40 coverage", format!("{:.4}", self.top40_coverage)),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<18}{v:>12}");
        }
        out
    }
}

pub fn run_cost_sim(cfg: &SimConfig, mode: SimMode) -> Result<SavingsReport, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = ZipfSampler::new(cfg.zipf_exponent, cfg.distinct_answers_per_problem)?;

    let operands: Vec<Operands> = (0..cfg.n_problems)
        .map(|_| Operands { a: rng.random_range(11..=99), b: rng.random_range(11..=99), c: rng.random_range(10..=999) })
        .collect();
    let problems: Vec<Problem> = operands.iter().enumerate().map(|(i, &o)| synthetic_problem(i, o)).collect();
    let answers: Vec<Vec<i64>> = operands.iter().map(|&o| wrong_answers(o, cfg.distinct_answers_per_problem)).collect();
    let drafts: Vec<(DraftImage, DraftImage)> = operands
        .iter()
        .map(|o| {
            let steps = [format!("{} × {}", o.a, o.b)];
            let steps: Vec<&str> = steps.iter().map(String::as_str).collect();
            (draft_fixture(DraftStyle::Neat, &steps), draft_fixture(DraftStyle::Scribble, &steps))
        })
        .collect();

    let workload: Vec<SimSubmission> = (0..cfg.n_submissions)
        .map(|_| SimSubmission {
            problem: rng.random_range(0..cfg.n_problems),
            category: sampler.sample(&mut rng),
            passes_quality: rng.random_bool(cfg.quality_pass_prob),
            variant: rng.random_range(0..4),
        })
        .collect();

    let catalog = ProblemCatalog::from_problems(problems.clone()).expect("synthetic problems are valid");
    let gateway = Gateway::scripted();
    let pool = Arc::new(ErrorPool::in_memory(PoolConfig {
        capacity: cfg.pool_capacity,
        ..PoolConfig::default()
    }));
    let config = PipelineConfig { gate: GateConfig::default(), ..PipelineConfig::default() };
    let pipeline = AnalysisPipeline::new(
        Arc::new(catalog),
        gateway.clone(),
        Arc::clone(&pool),
        Arc::new(ManualClock::new(Timestamp(0))),
        config,
    );

    let submit = |(i, s): (usize, &SimSubmission)| -> Result<(), SimError> {
        let (neat, scribble) = &drafts[s.problem];
        let sub = StudentSubmission {
            submission_id: SubmissionId::new(format!("sim-sub-{i}")),
            student_id: format!("sim-student-{}", i % 1000).into(),
            problem_id: problems[s.problem].problem_id.clone(),
            raw_answer: written_form(answers[s.problem][s.category - 1], s.variant),
            draft: Some(if s.passes_quality { neat.clone() } else { scribble.clone() }),
            submitted_at: Timestamp(0),
        };
        let outcome = pipeline.handle_submission(&sub)?;
        debug_assert_eq!(outcome.verdict, Verdict::Incorrect);
        Ok(())
    };
    match mode {
        SimMode::Sequential => {
            for item in workload.iter().enumerate() {
                submit(item)?;
            }
        }
        SimMode::Concurrent => {
            let indexed: Vec<(usize, &SimSubmission)> = workload.iter().enumerate().collect();
            par::map(Exec::Parallel, &indexed, |&item| submit(item)).into_iter().collect::<Result<(), _>>()?;
        }
    }

    let mut seen = vec![vec![false; cfg.distinct_answers_per_problem]; cfg.n_problems];
    for s in &workload {
        seen[s.problem][s.category - 1] = true;
    }
    let per_problem_distinct_seen: Vec<usize> = seen.iter().map(|v| v.iter().filter(|&&b| b).count()).collect();
    let top = workload.iter().filter(|s| s.category <= TOP_CATEGORIES).count();
    let stats = pool.stats();
    Ok(SavingsReport {
        mode,
        n_submissions: cfg.n_submissions,
        backend_calls: gateway.ledger().calls(StageTag::ErrorAnalysis),
        cache_hits: stats.hits,
        hit_rate: stats.hit_rate,
        inserts: stats.inserts,
        rejects_quality: stats.rejects_quality,
        rejects_capacity: stats.rejects_capacity,
        distinct_seen_total: per_problem_distinct_seen.iter().sum(),
        per_problem_distinct_seen,
        bound_nk: (cfg.n_problems * cfg.distinct_answers_per_problem) as u64,
        top40_coverage: top as f64 / cfg.n_submissions as f64,
    })
}
