//! Sequential against data-parallel execution for the three bulk paths:
//! Zipf workload sampling, session analytics and the cost simulator.
//! Without the `parallel` feature both arms run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vate_core::analytics::{summarize_sessions, EventKind, LearningEvent};
use vate_core::model::Timestamp;
use vate_core::par::Exec;
use vate_core::simulator::{run_cost_sim, sample_many, SimConfig, SimMode, ZipfSampler};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn zipf_sampling(c: &mut Criterion) {
    let n = 1_000_000;
    let sampler = ZipfSampler::new(1.1, 200).unwrap();
    let mut group = c.benchmark_group("zipf_sampling");
    group.throughput(Throughput::Elements(n as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, n), &exec, |b, &exec| b.iter(|| sample_many(exec, sampler, 7, n)));
    }
    group.finish();
}

fn events(sessions: usize) -> Vec<LearningEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for s in 0..sessions {
        for t in 0..rng.random_range(5..40) {
            let kp = format!("kp-{}", rng.random_range(0..6));
            let kind = if rng.random_bool(0.15) {
                EventKind::Relearn { knowledge_point_id: kp.into() }
            } else {
                EventKind::Attempt { problem_id: "p".into(), knowledge_point_id: kp.into(), correct: rng.random_bool(0.6) }
            };
            out.push(LearningEvent {
                student_id: format!("s-{s}").into(),
                session_ref: format!("ls-{s}").into(),
                at: Timestamp(t),
                kind,
            });
        }
    }
    out
}

fn session_analytics(c: &mut Criterion) {
    let sessions = 20_000;
    let events = events(sessions);
    let mut group = c.benchmark_group("session_analytics");
    group.throughput(Throughput::Elements(events.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, sessions), &exec, |b, &exec| {
            b.iter(|| summarize_sessions(exec, &events).unwrap())
        });
    }
    group.finish();
}

fn cost_simulation(c: &mut Criterion) {
    let cfg = SimConfig { n_submissions: 20_000, ..SimConfig::default() };
    let mut group = c.benchmark_group("cost_simulation");
    group.sample_size(10);
    group.throughput(Throughput::Elements(cfg.n_submissions as u64));
    for (name, mode) in [("sequential", SimMode::Sequential), ("parallel", SimMode::Concurrent)] {
        group.bench_with_input(BenchmarkId::new(name, cfg.n_submissions), &mode, |b, &mode| {
            b.iter(|| run_cost_sim(&cfg, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, zipf_sampling, session_analytics, cost_simulation);
criterion_main!(benches);
