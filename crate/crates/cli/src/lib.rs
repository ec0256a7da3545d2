//! `vate` command line: serve the API, run the cost simulator, replay
//! submission batches, inspect the error pool and compute learning metrics.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

pub mod batch;

use std::ffi::OsString;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vate_core::analytics::{outcome_report_from, read_events, repeat_report_from, summarize_sessions};
use vate_core::clock::SystemClock;
use vate_core::config::VateConfig;
use vate_core::par::Exec;
use vate_core::pool::ErrorPool;
use vate_core::simulator::{run_cost_sim, SimConfig, SimMode};
use vate_service::api::ReportView;
use vate_service::AppState;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vate", version, about = "Virtual math tutor: error analysis, guided dialogue and learning metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API. Requires VATE_API_TOKEN.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate a long-tail workload against the scripted backend.
    Simulate(SimulateArgs),
    /// Analyze a file of submissions, one JSON record per line.
    Analyze {
        batch: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Read the error pool log.
    Pool {
        #[command(subcommand)]
        action: PoolAction,
    },
    /// Learning metrics over an event file.
    Metrics {
        #[command(subcommand)]
        action: MetricsAction,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    pub problems: usize,
    #[arg(long, default_value_t = 30)]
    pub distinct: usize,
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
    #[arg(long, default_value_t = 10_000)]
    pub submissions: usize,
    #[arg(long = "quality-pass", default_value_t = 1.0)]
    pub quality_pass: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long = "pool-capacity", default_value_t = vate_core::pool::DEFAULT_CAPACITY)]
    pub pool_capacity: usize,
    /// Submit from a thread pool to stress the pool under races.
    #[arg(long)]
    pub concurrent: bool,
}

impl SimulateArgs {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_problems: self.problems,
            distinct_answers_per_problem: self.distinct,
            zipf_exponent: self.zipf,
            n_submissions: self.submissions,
            quality_pass_prob: self.quality_pass,
            seed: self.seed,
            pool_capacity: self.pool_capacity,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum PoolAction {
    /// Print pool statistics rebuilt from the log.
    Inspect(PoolArgs),
    /// Print the pool's records in log format.
    Export(PoolArgs),
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Log file; overrides `pool.log_path` from the config.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MetricsAction {
    Compute {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportKind::Outcomes)]
        report: ReportKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Outcomes,
    Repeat,
}

/// Parses `argv` and runs the command, writing to the given streams.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<i32> {
    match command {
        Command::Serve { config } => serve(&load_config(config.as_deref())?, out),
        Command::Simulate(args) => simulate(&args, out),
        Command::Analyze { batch, config } => {
            let config = load_config(config.as_deref())?;
            let (pipeline, _) = config.build_pipeline(Arc::new(SystemClock))?;
            let state = AppState::new(pipeline, "");
            let summary = batch::analyze_file(&state, &batch, out)?;
            Ok(if summary.lines > 0 && summary.succeeded == 0 { EXIT_DOMAIN } else { EXIT_OK })
        }
        Command::Pool { action } => pool(action, out),
        Command::Metrics { action: MetricsAction::Compute { events, report } } => metrics(&events, report, out),
    }
}

/// Loads the config, resolving relative paths against the config file's
/// directory. Without a file every key takes its default.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<VateConfig> {
    let Some(path) = path else { return Ok(VateConfig::default()) };
    let mut config = VateConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [config.pool.log_path.as_mut(), config.catalog.problems_path.as_mut()].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

fn serve(config: &VateConfig, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (pipeline, replay) = config.build_pipeline(Arc::new(SystemClock))?;
    if !replay.records.is_empty() || replay.truncated_bytes > 0 {
        log::info!(
            "pool log replayed: {} records, {} corrupt lines skipped, {} torn bytes cut",
            replay.records.len(),
            replay.skipped_lines.len(),
            replay.truncated_bytes
        );
    }
    let state = Arc::new(AppState::with_env_token(pipeline).map_err(anyhow::Error::msg)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.server.listen_addr)
            .await
            .with_context(|| format!("binding {}", config.server.listen_addr))?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        vate_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;
    Ok(EXIT_OK)
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let mode = if args.concurrent { SimMode::Concurrent } else { SimMode::Sequential };
    let report = run_cost_sim(&args.sim_config(), mode)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    write!(out, "{}", report.to_table())?;
    Ok(EXIT_OK)
}

fn pool(action: PoolAction, out: &mut dyn Write) -> anyhow::Result<i32> {
    let (PoolAction::Inspect(args) | PoolAction::Export(args)) = &action;
    let config = load_config(args.config.as_deref())?;
    let Some(path) = args.log.clone().or(config.pool.log_path.clone()) else {
        bail!("no pool log: pass --log or set pool.log_path in the config");
    };
    let (pool, replay) = ErrorPool::load_read_only(config.pool_config(), &path)?;
    match action {
        PoolAction::Inspect(_) => {
            let stats = pool.stats();
            writeln!(out, "{}", serde_json::to_string(&stats)?)?;
            writeln!(out, "log\t{}", path.display())?;
            writeln!(out, "records\t{}", replay.records.len())?;
            writeln!(out, "skipped_lines\t{}", replay.skipped_lines.len())?;
            writeln!(out, "torn_bytes\t{}", replay.truncated_bytes)?;
            writeln!(out, "entries\t{}", stats.entries)?;
            writeln!(out, "problem_id\tentries")?;
            for (problem, n) in &stats.per_problem {
                writeln!(out, "{problem}\t{n}")?;
            }
        }
        PoolAction::Export(_) => {
            for record in pool.records() {
                writeln!(out, "{}", record.to_line())?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn metrics(events: &Path, kind: ReportKind, out: &mut dyn Write) -> anyhow::Result<i32> {
    let file = std::fs::File::open(events).with_context(|| format!("opening {}", events.display()))?;
    let events = read_events(BufReader::new(file)).with_context(|| format!("reading {}", events.display()))?;
    let summaries = summarize_sessions(Exec::default(), &events)?;
    let (view, table) = match kind {
        ReportKind::Outcomes => {
            let report = outcome_report_from(&summaries);
            let table = report.to_tsv();
            (ReportView::Outcomes(report), table)
        }
        ReportKind::Repeat => {
            let report = repeat_report_from(&summaries);
            let table = report.to_tsv();
            (ReportView::Repeat(report), table)
        }
    };
    writeln!(out, "{}", serde_json::to_string(&view)?)?;
    write!(out, "{table}")?;
    Ok(EXIT_OK)
}
