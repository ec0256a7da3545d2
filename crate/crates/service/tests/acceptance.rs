//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write as _};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vate_core::analytics::{
    outcome_report_from, parse_events, session_metrics, summarize_sessions, win_rate, AblatedElement,
    AblationJudgment, EventKind, LearningEvent, Winner,
};
use vate_core::clock::ManualClock;
use vate_core::config::VateConfig;
use vate_core::dialogue::{quality_bucket, QualityBucket, Speaker};
use vate_core::draft::DraftAnalysis;
use vate_core::fixtures;
use vate_core::gateway::scripted::{MulAdd, ScriptedBackend, SlipLabel};
use vate_core::gateway::{Backend, CompletionRequest, CompletionResponse, Gateway, GatewayError, StageTag};
use vate_core::model::{
    normalize_answer, AnalysisSource, ErrorCauseAnalysis, Problem, ProblemCatalog, ProblemId, StudentSubmission,
    SubmissionId, Timestamp,
};
use vate_core::par::Exec;
use vate_core::pipeline::{assemble_error_prompt, AnalysisBundle, AnalysisPipeline, PipelineConfig, Verdict};
use vate_core::pool::{ErrorPool, FsyncPolicy, InsertOutcome, PoolConfig, PoolKey, PoolRecord};
use vate_core::prompt::{labels, parse_sections};
use vate_core::simulator::{run_cost_sim, SimConfig, SimMode};
use vate_service::{AppState, BackgroundServer};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const CHILD_ENV: &str = "VATE_ACCEPTANCE_POOL_CHILD";
const CHILD_RECORDS: usize = 40;

fn main() {
    if let Some(path) = std::env::var_os(CHILD_ENV) {
        pool_child(Path::new(&path));
        return;
    }
    let criteria: [Criterion; 10] = [
        ("deduplication bound", c1_dedup_bound),
        ("per-problem capacity", c2_capacity),
        ("quality gate", c3_quality_gate),
        ("prompt assembly and ablations", c4_prompt_assembly),
        ("worked instance 23 x 26 + 89", c5_worked_instance),
        ("leakage guard fuzz", c6_leakage_guard),
        ("learning metrics", c7_metrics),
        ("win-rate aggregation", c8_win_rate),
        ("pool persistence across kill", c9_persistence),
        ("pipeline economics over HTTP", c10_economics),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// Shared helpers

fn pipeline_with(backend: Arc<dyn Backend>, catalog: ProblemCatalog, pool: ErrorPool) -> AnalysisPipeline {
    AnalysisPipeline::new(
        Arc::new(catalog),
        Gateway::new(backend),
        Arc::new(pool),
        Arc::new(ManualClock::new(Timestamp(1_000))),
        PipelineConfig::default(),
    )
}

fn scripted_pipeline() -> AnalysisPipeline {
    pipeline_with(Arc::new(ScriptedBackend::new()), fixtures::catalog(), ErrorPool::in_memory(PoolConfig::default()))
}

fn submission(n: usize, problem: &str, answer: &str, draft: vate_core::model::DraftImage) -> StudentSubmission {
    StudentSubmission {
        submission_id: SubmissionId::new(format!("acc-{n}")),
        student_id: format!("student-{n}").into(),
        problem_id: problem.into(),
        raw_answer: answer.to_owned(),
        draft: Some(draft),
        submitted_at: Timestamp(1_000),
    }
}

fn analysis(text: &str) -> ErrorCauseAnalysis {
    ErrorCauseAnalysis {
        cause: format!("cause {text}"),
        suggestion: format!("suggestion {text}"),
        source: AnalysisSource::DualStream,
        backend_name: Some("acceptance".into()),
    }
}

// 1

fn c1_dedup_bound() -> Outcome {
    let cfg = SimConfig {
        n_problems: 10,
        distinct_answers_per_problem: 30,
        quality_pass_prob: 1.0,
        n_submissions: 50_000,
        seed: 42,
        ..SimConfig::default()
    };
    let mut details = Vec::new();
    for mode in [SimMode::Sequential, SimMode::Concurrent] {
        let started = Instant::now();
        let report = run_cost_sim(&cfg, mode).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        check!(report.backend_calls <= 300, "{mode:?}: {} backend calls", report.backend_calls);
        check!(
            report.backend_calls == report.distinct_seen_total as u64,
            "{mode:?}: {} calls but {} distinct categories drawn",
            report.backend_calls,
            report.distinct_seen_total
        );
        check!(report.hit_rate >= 0.99, "{mode:?}: hit rate {}", report.hit_rate);
        check!(elapsed < Duration::from_secs(60), "{mode:?}: took {elapsed:?}");
        details.push(format!(
            "{mode:?} calls={} distinct={} hit_rate={:.4} in {:.2}s",
            report.backend_calls,
            report.distinct_seen_total,
            report.hit_rate,
            elapsed.as_secs_f64()
        ));
    }
    Ok(details.join("; "))
}

// 2

fn c2_capacity() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() });
    let strategy = proptest::collection::hash_set("[a-z]{1,8}", 150);
    runner
        .run(&strategy, |answers| {
            let pool = ErrorPool::in_memory(PoolConfig::default());
            let (mut inserted, mut rejected) = (0, 0);
            for a in &answers {
                let key = PoolKey::new("p-cap".into(), normalize_answer(a));
                match pool.try_insert(key, analysis(a), 1.0, Timestamp(0)) {
                    InsertOutcome::Inserted => inserted += 1,
                    InsertOutcome::RejectedCapacity => rejected += 1,
                    other => return Err(TestCaseError::fail(format!("unexpected {other:?}"))),
                }
                if pool.len() > 100 {
                    return Err(TestCaseError::fail("pool grew past capacity"));
                }
            }
            if (inserted, rejected) != (100, 50) {
                return Err(TestCaseError::fail(format!("{inserted} inserted, {rejected} rejected")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let pool = ErrorPool::in_memory(PoolConfig::default());
    let inserted = AtomicUsize::new(0);
    let max_seen = AtomicUsize::new(0);
    let done = std::sync::atomic::AtomicBool::new(false);
    let start = std::sync::Barrier::new(9);
    std::thread::scope(|s| {
        s.spawn(|| {
            start.wait();
            loop {
                let finished = done.load(Ordering::Acquire);
                let n = pool.stats().per_problem.get(&ProblemId::new("p-stress")).copied().unwrap_or(0);
                max_seen.fetch_max(n, Ordering::Relaxed);
                if finished {
                    break;
                }
            }
        });
        let writers: Vec<_> = (0..8)
            .map(|t| {
                let (pool, inserted, start) = (&pool, &inserted, &start);
                s.spawn(move || {
                    start.wait();
                    for i in 0..50 {
                        let key = PoolKey::new("p-stress".into(), normalize_answer(&format!("{}", t * 1000 + i)));
                        if pool.try_insert(key, analysis("x"), 1.0, Timestamp(0)) == InsertOutcome::Inserted {
                            inserted.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                })
            })
            .collect();
        for w in writers {
            w.join().expect("writer thread");
        }
        done.store(true, Ordering::Release);
    });
    let stats = pool.stats();
    check!(inserted.load(Ordering::Relaxed) == 100, "{} concurrent inserts won", inserted.load(Ordering::Relaxed));
    check!(stats.rejects_capacity == 300, "{} capacity rejects", stats.rejects_capacity);
    check!(max_seen.load(Ordering::Relaxed) <= 100, "observed {} entries", max_seen.load(Ordering::Relaxed));
    check!(pool.len() == 100, "final size {}", pool.len());
    Ok(format!(
        "48 random 150-key sets gave 100/50; 8x50 concurrent inserts kept size <= 100 (max observed {})",
        max_seen.load(Ordering::Relaxed)
    ))
}

// 3

fn c3_quality_gate() -> Outcome {
    let pool = ErrorPool::in_memory(PoolConfig::default());
    let key = PoolKey::new("p-23x26-89".into(), normalize_answer("598"));
    let outcome = pool.try_insert(key.clone(), analysis("low"), 0.59, Timestamp(0));
    check!(outcome == InsertOutcome::RejectedQuality, "low-quality insert gave {outcome:?}");
    check!(pool.lookup(&key).is_none() && pool.is_empty(), "rejected entry is visible");

    let pipeline = scripted_pipeline();
    let ledger = || pipeline.gateway().ledger().calls(StageTag::ErrorAnalysis);
    let mut sources = Vec::new();
    for n in 0..2 {
        let out = pipeline
            .handle_submission(&submission(n, "p-23x26-89", "598", fixtures::scribble_draft()))
            .map_err(|e| e.to_string())?;
        check!(out.pool_insert == Some(InsertOutcome::RejectedQuality), "scribble insert gave {:?}", out.pool_insert);
        sources.push(out.analysis.map(|a| a.source));
    }
    check!(ledger() == 2, "{} error-analysis calls for two low-quality submissions", ledger());
    check!(sources.iter().all(|s| *s == Some(AnalysisSource::DualStream)), "sources {sources:?}");

    for n in 2..4 {
        pipeline
            .handle_submission(&submission(n, "p-23x26-89", "598", fixtures::forgot_addition_draft()))
            .map_err(|e| e.to_string())?;
    }
    check!(ledger() == 3, "neat control made {} calls in total", ledger());
    Ok("quality 0.59 rejected; scribble repeat cost a second call; neat repeat hit the pool".into())
}

// 4

fn c4_prompt_assembly() -> Outcome {
    let bundle = AnalysisBundle::new(
        fixtures::problem_23x26(),
        normalize_answer("598"),
        DraftAnalysis {
            summary: "The student multiplied 23 × 26 and wrote 598, then stopped.".into(),
            extracted_steps: vec!["23 × 26".into(), "= 598".into()],
            backend_name: "scripted".into(),
        },
    );
    let full = assemble_error_prompt(&bundle);
    let golden_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden/error_prompt_full.txt");
    let golden = std::fs::read_to_string(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    check!(full == golden, "full prompt differs from the golden file");

    let full_sections = parse_sections(&full);
    let content = [
        labels::PROBLEM,
        labels::SOLUTION,
        labels::CORRECT_ANSWER,
        labels::EXPLANATION,
        labels::STUDENT_INCORRECT_ANSWER,
        labels::DRAFT_ANALYSIS,
    ];
    let labels_in: Vec<&str> = full_sections.iter().map(|(l, _)| l.as_str()).collect();
    check!(labels_in[..6] == content, "section order {labels_in:?}");

    let mut dropped_all = HashSet::new();
    for element in AblatedElement::ALL {
        let ablated = parse_sections(&assemble_error_prompt(&bundle.clone().with_ablation(element.ablation())));
        let missing: Vec<&(String, String)> = full_sections.iter().filter(|s| !ablated.contains(s)).collect();
        check!(missing.len() == 1, "{element:?} ablation removed {} sections", missing.len());
        check!(ablated.len() + 1 == full_sections.len(), "{element:?} ablation added sections");
        let kept: Vec<_> = full_sections.iter().filter(|s| *s != missing[0]).cloned().collect();
        check!(kept == ablated, "{element:?} ablation changed other sections");
        check!(content.contains(&missing[0].0.as_str()), "{element:?} removed {}", missing[0].0);
        dropped_all.insert(missing[0].0.clone());
    }
    check!(dropped_all.len() == 4, "ablations dropped {dropped_all:?}");
    let mut dropped: Vec<_> = dropped_all.into_iter().collect();
    dropped.sort();
    Ok(format!("golden match; ablations each drop one of {dropped:?}"))
}

// 5

fn c5_worked_instance() -> Outcome {
    let expected = 23 * 26 + 89;
    let problem = fixtures::problem_23x26();
    check!(problem.correct_answer == expected.to_string(), "catalog says {}", problem.correct_answer);

    let pipeline = scripted_pipeline();
    let out = pipeline
        .handle_submission(&submission(0, "p-23x26-89", "598", fixtures::forgot_addition_draft()))
        .map_err(|e| e.to_string())?;
    check!(out.verdict == Verdict::Incorrect, "598 judged {:?}", out.verdict);
    let a = out.analysis.ok_or("no analysis")?;
    check!(SlipLabel::from_cause(&a.cause) == SlipLabel::ForgotFinalAddition, "cause: {}", a.cause);
    let s = a.suggestion.to_lowercase();
    check!(
        s.contains("don't forget to add") && s.contains("after completing the multiplication"),
        "suggestion: {}",
        a.suggestion
    );

    let out = pipeline
        .handle_submission(&submission(1, "p-23x26-89", &expected.to_string(), fixtures::forgot_addition_draft()))
        .map_err(|e| e.to_string())?;
    check!(out.verdict == Verdict::Correct && out.analysis.is_none(), "687 judged {:?}", out.verdict);
    Ok(format!("cause tagged forgot-final-addition; {expected} accepted"))
}

// 6

/// Scripted replies with the correct answer spliced into most dialogue
/// turns, including regenerations.
struct LeakyBackend {
    inner: ScriptedBackend,
    rng: Mutex<ChaCha8Rng>,
}

fn leak_form(n: i64, pick: usize) -> String {
    let thousands = {
        let s = n.to_string();
        if s.len() > 3 { format!("{},{}", &s[..s.len() - 3], &s[s.len() - 3..]) } else { s }
    };
    match pick % 12 {
        0 => format!("{n}"),
        1 => format!("The answer is {n}."),
        2 => format!("so the total = {n}"),
        3 => format!("({n})"),
        4 => format!("that gives {n}.0 in the end"),
        5 => format!("0{n}"),
        6 => format!("**{n}**"),
        7 => format!("{n}!"),
        8 => format!("I got {n}, did you?"),
        9 => format!("{n}.00"),
        10 => format!("result:{n}\n"),
        _ => format!("roughly {thousands}"),
    }
}

impl Backend for LeakyBackend {
    fn name(&self) -> &str {
        "leaky-scripted"
    }

    fn call(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let mut response = self.inner.call(request)?;
        if request.stage == StageTag::Dialogue {
            let statement = vate_core::prompt::find_section(&request.prompt, labels::PROBLEM).unwrap_or_default();
            if let Some(m) = MulAdd::parse(&statement) {
                let mut rng = self.rng.lock().unwrap();
                if rng.random_bool(0.7) {
                    let leak = leak_form(m.result(), rng.random_range(0..12));
                    response.text = match rng.random_range(0..3) {
                        0 => format!("{leak} {}", response.text),
                        1 => format!("{} {leak}", response.text),
                        _ => leak,
                    };
                }
            }
        }
        Ok(response)
    }
}

/// Independent check: any numeric token, not glued to letters or digits,
/// whose value is the correct answer.
fn leaks(text: &str, answer: i64) -> bool {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() || (i > 0 && chars[i - 1].is_alphanumeric()) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len()
            && (chars[j].is_ascii_digit()
                || ((chars[j] == '.' || chars[j] == ',') && chars.get(j + 1).is_some_and(char::is_ascii_digit)))
        {
            j += 1;
        }
        let glued = chars.get(j).is_some_and(|c| c.is_alphanumeric());
        let token: String = chars[i..j].iter().collect();
        let grouped = token.contains(',')
            && token.split(',').skip(1).all(|g| g.len() == 3 && !g.contains('.'))
            && token.split(',').next().is_some_and(|g| !g.is_empty() && g.len() <= 3);
        let plain = if grouped { token.replace(',', "") } else { token.clone() };
        if !glued && !plain.contains(',') && plain.parse::<f64>().is_ok_and(|v| v == answer as f64) {
            return true;
        }
        i = j;
    }
    false
}

fn fuzz_catalog(rng: &mut ChaCha8Rng, n: usize) -> (ProblemCatalog, Vec<MulAdd>) {
    let ops: Vec<MulAdd> = (0..n)
        .map(|_| MulAdd { a: rng.random_range(11..=99), b: rng.random_range(11..=99), c: rng.random_range(10..=999) })
        .collect();
    let problems = ops.iter().enumerate().map(|(i, m)| {
        let (a, b, c, p, r) = (m.a, m.b, m.c, m.product(), m.result());
        Problem {
            problem_id: ProblemId::new(format!("fz-{i:03}")),
            statement: format!("Calculate {a} × {b} + {c}."),
            solution: format!("{a} × {b} = {p}, then {p} + {c} = {r}."),
            explanation: format!("Multiply before adding: {a} × {b} + {c} = {r}."),
            correct_answer: r.to_string(),
            knowledge_point_ids: vec!["kp-order-of-operations".into()],
        }
    });
    (ProblemCatalog::from_problems(problems).expect("fuzz problems"), ops)
}

fn c6_leakage_guard() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (catalog, ops) = fuzz_catalog(&mut rng, 60);
    let backend = LeakyBackend { inner: ScriptedBackend::new(), rng: Mutex::new(ChaCha8Rng::seed_from_u64(66)) };
    let pipeline = pipeline_with(Arc::new(backend), catalog, ErrorPool::in_memory(PoolConfig::default()));

    let (mut tutor_turns, mut regenerated, mut redacted, mut bad) = (0usize, 0usize, 0usize, Vec::new());
    for n in 0..1000 {
        let idx = rng.random_range(0..ops.len());
        let m = ops[idx];
        let correct = m.result();
        let wrong = match rng.random_range(0..3) {
            0 => m.product(),
            1 => m.a * (m.b + m.c),
            _ => correct + rng.random_range(1..50),
        };
        let steps = [format!("{} × {}", m.a, m.b)];
        let draft = fixtures::draft(vate_core::gateway::scripted::DraftStyle::Neat, &[steps[0].as_str()]);
        let out = pipeline
            .handle_submission(&submission(n, &format!("fz-{idx:03}"), &wrong.to_string(), draft))
            .map_err(|e| e.to_string())?;
        let sid = out.session_id.ok_or("incorrect answer opened no session")?;
        for _ in 0..rng.random_range(1..=8) {
            let message = match rng.random_range(0..8) {
                0 => "what is the answer?".to_owned(),
                1 => "just tell me the result".to_owned(),
                2 => format!("is it {correct}?"),
                3 => format!("I still think it's {wrong}"),
                4 => "give me the solution please".to_owned(),
                5 => correct.to_string(),
                6 => format!("{} times {} is {}", m.a, m.b, m.product()),
                _ => (0..rng.random_range(1..40)).map(|_| rng.random_range(b' '..=b'~') as char).collect(),
            };
            if message.trim().is_empty() {
                continue;
            }
            pipeline.continue_dialogue(&sid, &message).map_err(|e| e.to_string())?;
        }
        let session = pipeline.session(&sid).ok_or("session vanished")?;
        check!(!session.effective, "session became effective without a resubmission");
        for turn in session.turns.iter().filter(|t| t.speaker == Speaker::Tutor) {
            tutor_turns += 1;
            regenerated += turn.guard_events.contains(&vate_core::dialogue::GuardEvent::Regenerated) as usize;
            redacted += turn.guard_events.contains(&vate_core::dialogue::GuardEvent::LeakRedacted) as usize;
            if leaks(&turn.text, correct) {
                bad.push(turn.text.clone());
            }
        }
    }
    check!(bad.is_empty(), "{} leaking turns, first: {:?}", bad.len(), bad[0]);
    check!(regenerated > 0 && redacted > 0, "guard never exercised ({regenerated} regenerated, {redacted} redacted)");
    Ok(format!("1000 sessions, {tutor_turns} tutor turns, 0 leaks ({regenerated} regenerated, {redacted} redacted)"))
}

// 7

const FIXTURE_EVENTS: &str = r#"
{"student_id":"s1","session_ref":"ls-a","at":1,"kind":"attempt","problem_id":"p-23x26-89","knowledge_point_id":"kp-oo","correct":false}
{"student_id":"s1","session_ref":"ls-a","at":2,"kind":"attempt","problem_id":"p-23x26-89","knowledge_point_id":"kp-oo","correct":false}
{"student_id":"s1","session_ref":"ls-a","at":3,"kind":"relearn","knowledge_point_id":"kp-oo"}
{"student_id":"s1","session_ref":"ls-a","at":4,"kind":"attempt","problem_id":"p-12x15-345","knowledge_point_id":"kp-oo","correct":true}
{"student_id":"s1","session_ref":"ls-a","at":5,"kind":"attempt","problem_id":"p-23x26-89","knowledge_point_id":"kp-mul","correct":true}
{"student_id":"s2","session_ref":"ls-b","at":1,"kind":"attempt","problem_id":"p-23x26-89","knowledge_point_id":"kp-oo","correct":false}
{"student_id":"s2","session_ref":"ls-b","at":2,"kind":"dialogue_link","dialogue_session_id":"sess-1","effective":true,"student_char_count":40,"student_turns":2}
{"student_id":"s2","session_ref":"ls-b","at":3,"kind":"attempt","problem_id":"p-23x26-89","knowledge_point_id":"kp-oo","correct":true}
{"student_id":"s3","session_ref":"ls-c","at":1,"kind":"relearn","knowledge_point_id":"kp-oo"}
{"student_id":"s3","session_ref":"ls-c","at":2,"kind":"relearn","knowledge_point_id":"kp-oo"}
{"student_id":"s3","session_ref":"ls-c","at":3,"kind":"dialogue_link","dialogue_session_id":"sess-2","effective":false,"student_char_count":5,"student_turns":1}
"#;

fn c7_metrics() -> Outcome {
    let events = parse_events(FIXTURE_EVENTS).map_err(|e| e.to_string())?;
    let by = |r: &str| events.iter().filter(|e| e.session_ref.as_str() == r).cloned().collect::<Vec<_>>();
    let expect = [
        ("ls-a", "kp-oo", (2, 3, 1.0 / 3.0, 1)),
        ("ls-a", "kp-mul", (0, 1, 1.0, 0)),
        ("ls-b", "kp-oo", (1, 2, 0.5, 0)),
        ("ls-c", "kp-oo", (0, 0, 0.0, 2)),
    ];
    for (session, kp, (niact, nqct, arct, nvrs)) in expect {
        let m = session_metrics(&by(session)).map_err(|e| e.to_string())?.kp(&kp.into());
        check!(
            (m.niact, m.nqct, m.arct, m.nvrs) == (niact, nqct, arct, nvrs),
            "{session}/{kp}: got {m:?}"
        );
    }
    let report = outcome_report_from(&summarize_sessions(Exec::default(), &events).map_err(|e| e.to_string())?);
    let none = report.row(false, false);
    check!(
        none.n == 2 && none.niact == Some(1.0) && none.nqct == Some(2.0) && none.arct == Some(2.0 / 3.0) && none.nvrs == Some(0.5),
        "no-dialogue row {none:?}"
    );
    let ineffective = report.row(true, false);
    check!(ineffective.n == 1 && ineffective.arct_n == 0 && ineffective.arct.is_none() && ineffective.nvrs == Some(2.0), "ineffective row {ineffective:?}");
    let effective = report.row(true, true);
    check!(effective.n == 1 && effective.arct == Some(0.5) && effective.niact == Some(1.0), "effective row {effective:?}");

    // Arct identity on random sessions.
    const TOLERANCE: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0usize;
    for s in 0..10_000 {
        let mut events = Vec::new();
        let mut oracle = std::collections::BTreeMap::<String, (u32, u32, u32)>::new();
        for t in 0..rng.random_range(1..30) {
            let kp = format!("kp-{}", rng.random_range(0..4));
            let entry = oracle.entry(kp.clone()).or_default();
            let kind = if rng.random_bool(0.2) {
                entry.2 += 1;
                EventKind::Relearn { knowledge_point_id: kp.into() }
            } else {
                let correct = rng.random_bool(0.6);
                entry.1 += 1;
                entry.0 += (!correct) as u32;
                EventKind::Attempt { problem_id: "p".into(), knowledge_point_id: kp.into(), correct }
            };
            events.push(LearningEvent {
                student_id: "s".into(),
                session_ref: format!("ls-{s}").into(),
                at: Timestamp(t),
                kind,
            });
        }
        let metrics = session_metrics(&events).map_err(|e| e.to_string())?;
        for (kp, (niact, nqct, nvrs)) in oracle {
            let m = metrics.kp(&kp.as_str().into());
            check!((m.niact, m.nqct, m.nvrs) == (niact, nqct, nvrs), "session {s} {kp}: {m:?}");
            if nqct > 0 {
                let identity = 1.0 - f64::from(niact) / f64::from(nqct);
                check!((m.arct - identity).abs() <= TOLERANCE, "session {s} {kp}: arct {} vs {identity}", m.arct);
                checked += 1;
            }
        }
    }

    check!(quality_bucket(false, 0) == QualityBucket::NoDialogue, "empty dialogue bucket");
    for chars in 0..=10_000usize {
        let expected = if chars < 15 {
            QualityBucket::TooShort
        } else if chars <= 120 {
            QualityBucket::Moderate
        } else {
            QualityBucket::TooLong
        };
        check!(quality_bucket(true, chars) == expected, "{chars} chars bucketed {:?}", quality_bucket(true, chars));
    }
    Ok(format!("fixture exact; identity held on {checked} (session, kp) pairs; buckets 0..=10000"))
}

// 8

fn c8_win_rate() -> Outcome {
    let total = 418usize;
    let full = (0.61 * total as f64).round() as usize;
    check!(full == 255, "round(0.61 * 418) = {full}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut winners: Vec<Winner> = (0..total).map(|i| if i < full { Winner::Full } else { Winner::Ablated }).collect();
    for i in (1..winners.len()).rev() {
        winners.swap(i, rng.random_range(0..=i));
    }
    let judgments: Vec<AblationJudgment> = winners
        .into_iter()
        .enumerate()
        .map(|(i, winner)| AblationJudgment { record_id: format!("r-{i}"), ablated: AblatedElement::Draft, winner })
        .collect();
    let rates = win_rate(&judgments).map_err(|e| e.to_string())?;
    let draft = rates.get(&AblatedElement::Draft).copied().ok_or("no draft rate")?;
    check!((draft - 0.610).abs() <= 0.001, "draft win rate {draft}");
    Ok(format!("{full}/{total} = {draft:.4}"))
}

// 9

fn child_record(i: usize) -> (PoolKey, ErrorCauseAnalysis, f64) {
    let key = PoolKey::new(ProblemId::new(format!("p-{}", i % 4)), normalize_answer(&format!("{}", 100 + i)));
    (key, analysis(&format!("entry {i}")), 0.6 + (i % 5) as f64 * 0.1)
}

fn pool_child(path: &Path) {
    let config = PoolConfig { fsync: FsyncPolicy::Always, ..PoolConfig::default() };
    let (pool, _) = ErrorPool::open(config, path).expect("child opens pool");
    for i in 0..CHILD_RECORDS {
        let (key, a, q) = child_record(i);
        assert_eq!(pool.try_insert(key, a, q, Timestamp(i as i64)), InsertOutcome::Inserted);
    }
    println!("ready");
    std::io::stdout().flush().expect("flush");
    loop {
        std::thread::sleep(Duration::from_secs(60));
    }
}

fn c9_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("pool.ndjson");
    let mut child = Command::new(std::env::current_exe().map_err(|e| e.to_string())?)
        .env(CHILD_ENV, &path)
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().ok_or("no child stdout")?).read_line(&mut line).map_err(|e| e.to_string())?;
    check!(line.trim() == "ready", "child said {line:?}");
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;

    let expected: Vec<PoolRecord> = (0..CHILD_RECORDS)
        .map(|i| {
            let (key, analysis, q) = child_record(i);
            PoolRecord {
                problem_id: key.problem_id.as_str().to_owned(),
                answer: key.answer.canonical().to_owned(),
                cause: analysis.cause,
                suggestion: analysis.suggestion,
                backend_name: analysis.backend_name,
                draft_quality: q,
                created_at: i as i64,
            }
        })
        .collect();
    let (pool, report) = ErrorPool::open(PoolConfig::default(), &path).map_err(|e| e.to_string())?;
    check!(pool.records() == expected, "rebuilt pool differs after kill ({} records)", pool.len());
    check!(report.skipped_lines.is_empty() && report.truncated_bytes == 0, "clean log reported {report:?}");
    drop(pool);

    let torn = br#"{"problem_id":"p-9","answer":"12","cau"#;
    std::fs::OpenOptions::new().append(true).open(&path).and_then(|mut f| f.write_all(torn)).map_err(|e| e.to_string())?;
    let (pool, report) = ErrorPool::open(PoolConfig::default(), &path).map_err(|e| e.to_string())?;
    check!(pool.records() == expected, "torn tail changed the pool");
    check!(report.truncated_bytes == torn.len() as u64, "truncated {} bytes", report.truncated_bytes);

    let (key, a, q) = child_record(CHILD_RECORDS);
    check!(pool.try_insert(key, a, q, Timestamp(CHILD_RECORDS as i64)) == InsertOutcome::Inserted, "append after repair");
    drop(pool);
    let (pool, report) = ErrorPool::open(PoolConfig::default(), &path).map_err(|e| e.to_string())?;
    check!(pool.len() == CHILD_RECORDS + 1 && report.skipped_lines.is_empty(), "log after repair: {report:?}");
    Ok(format!("{CHILD_RECORDS} records survived SIGKILL; {}-byte torn tail cut", torn.len()))
}

// 10

fn c10_economics() -> Outcome {
    let (pipeline, _) =
        VateConfig::default().build_pipeline(Arc::new(ManualClock::new(Timestamp(0)))).map_err(|e| e.to_string())?;
    let state = Arc::new(AppState::new(pipeline, "acceptance-token"));
    let server = BackgroundServer::start(Arc::clone(&state), "127.0.0.1:0").map_err(|e| e.to_string())?;
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let draft = fixtures::forgot_addition_draft();
    let post = |student: &str| -> Result<Value, String> {
        let body = json!({
            "student_id": student,
            "problem_id": "p-23x26-89",
            "answer": "598",
            "draft": {
                "data": base64::engine::general_purpose::STANDARD.encode(draft.bytes()),
                "media_type": draft.media_type(),
            },
        });
        let mut resp = agent
            .post(server.url("/v1/submissions"))
            .header("Authorization", "Bearer acceptance-token")
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        check!(resp.status().as_u16() == 200, "status {}", resp.status());
        resp.body_mut().read_json::<Value>().map_err(|e| e.to_string())
    };
    let ledger = state.pipeline().gateway().ledger();
    let first = post("s-1")?;
    let after_first = ledger.total_calls();
    check!(first["analysis"]["source"] == "dual_stream", "first source {}", first["analysis"]["source"]);
    check!(after_first > 0, "first submission made no backend calls");
    let second = post("s-2")?;
    let after_second = ledger.total_calls();
    check!(second["analysis"]["source"] == "pool", "second source {}", second["analysis"]["source"]);
    check!(after_second == after_first, "second submission made {} calls", after_second - after_first);
    check!(first["analysis"]["cause"] == second["analysis"]["cause"], "pooled cause differs");
    Ok(format!("first cost {after_first} calls, second 0 (ledger {after_first} -> {after_second})"))
}
