//! The error pool: a per-problem bounded, quality-gated cache from
//! (problem id, normalized answer) to an error-cause analysis.
//!
//! Entries are never overwritten or evicted. Once a problem holds
//! `capacity` entries, new answers for it are still analyzed by the
//! pipeline but are not cached.

mod log;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorCauseAnalysis, NormalizedAnswer, ProblemId, Timestamp};

pub use self::log::{read_log, FsyncPolicy, PoolLog, PoolRecord, ReplayReport};

pub const DEFAULT_CAPACITY: usize = 100;
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolKey {
    pub problem_id: ProblemId,
    pub answer: NormalizedAnswer,
}

impl PoolKey {
    pub fn new(problem_id: ProblemId, answer: NormalizedAnswer) -> Self {
        Self { problem_id, answer }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub key: PoolKey,
    pub analysis: ErrorCauseAnalysis,
    pub draft_quality: f64,
    pub created_at: Timestamp,
    pub hit_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    Inserted,
    AlreadyPresent,
    RejectedQuality,
    RejectedCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Maximum entries per problem.
    pub capacity: usize,
    /// Minimum overall draft quality for an analysis to be cached.
    pub quality_threshold: f64,
    #[serde(default)]
    pub fsync: FsyncPolicy,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
            quality_threshold: DEFAULT_QUALITY_THRESHOLD,
            fsync: FsyncPolicy::Never,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub per_problem: BTreeMap<ProblemId, usize>,
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub already_present: u64,
    pub rejects_quality: u64,
    pub rejects_capacity: u64,
    pub storage_failures: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("pool log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

struct Slot {
    analysis: ErrorCauseAnalysis,
    draft_quality: f64,
    created_at: Timestamp,
    seq: u64,
    hits: AtomicU64,
}

impl Slot {
    fn entry(&self, key: PoolKey) -> PoolEntry {
        PoolEntry {
            key,
            analysis: self.analysis.clone(),
            draft_quality: self.draft_quality,
            created_at: self.created_at,
            hit_count: self.hits.load(Ordering::Relaxed),
        }
    }
}

#[derive(Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    inserts: AtomicU64,
    already_present: AtomicU64,
    rejects_quality: AtomicU64,
    rejects_capacity: AtomicU64,
    storage_failures: AtomicU64,
}

#[derive(Default)]
struct Table {
    problems: HashMap<ProblemId, HashMap<NormalizedAnswer, Slot>>,
    next_seq: u64,
}

pub struct ErrorPool {
    config: PoolConfig,
    table: RwLock<Table>,
    counters: Counters,
    log: Option<Mutex<PoolLog>>,
}

impl ErrorPool {
    /// In-memory pool without persistence.
    pub fn in_memory(config: PoolConfig) -> Self {
        Self { config, table: RwLock::default(), counters: Counters::default(), log: None }
    }

    /// Opens a pool backed by the append log at `path`, replaying it first.
    pub fn open(config: PoolConfig, path: impl AsRef<Path>) -> Result<(Self, ReplayReport), StorageError> {
        let path = path.as_ref();
        let (log, report) = PoolLog::open(path, config.fsync)
            .map_err(|source| StorageError::Io { path: path.display().to_string(), source })?;
        let mut pool = Self::in_memory(config);
        pool.replay(&report.records);
        pool.log = Some(Mutex::new(log));
        Ok((pool, report))
    }

    /// Rebuilds the pool a log describes without touching the file. The
    /// result has no log attached.
    pub fn load_read_only(config: PoolConfig, path: impl AsRef<Path>) -> Result<(Self, ReplayReport), StorageError> {
        let path = path.as_ref();
        let report = read_log(path).map_err(|source| StorageError::Io { path: path.display().to_string(), source })?;
        let mut pool = Self::in_memory(config);
        pool.replay(&report.records);
        Ok((pool, report))
    }

    /// Applies logged records with the same first-writer and capacity rules
    /// as live inserts.
    fn replay(&mut self, records: &[PoolRecord]) {
        let capacity = self.config.capacity;
        let table = self.table.get_mut().expect("pool lock poisoned");
        for record in records {
            let entry = record.clone().into_entry();
            let answers = table.problems.entry(entry.key.problem_id.clone()).or_default();
            if answers.contains_key(&entry.key.answer) || answers.len() >= capacity {
                continue;
            }
            let seq = table.next_seq;
            table.next_seq += 1;
            answers.insert(
                entry.key.answer,
                Slot {
                    analysis: entry.analysis,
                    draft_quality: entry.draft_quality,
                    created_at: entry.created_at,
                    seq,
                    hits: AtomicU64::new(0),
                },
            );
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn lookup(&self, key: &PoolKey) -> Option<PoolEntry> {
        let table = self.table.read().expect("pool lock poisoned");
        let slot = table.problems.get(&key.problem_id).and_then(|a| a.get(&key.answer));
        match slot {
            Some(slot) => {
                slot.hits.fetch_add(1, Ordering::Relaxed);
                self.counters.hits.fetch_add(1, Ordering::Relaxed);
                Some(slot.entry(key.clone()))
            }
            None => {
                self.counters.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Caches `analysis` for `key` if the key is new, the draft quality
    /// clears the threshold and the problem has room. Rejections leave the
    /// pool untouched. Inserted entries are appended to the log, if any.
    pub fn try_insert(
        &self,
        key: PoolKey,
        analysis: ErrorCauseAnalysis,
        draft_quality: f64,
        now: Timestamp,
    ) -> InsertOutcome {
        debug_assert!(analysis.validate().is_ok(), "pool analyses must be nonempty");
        let mut table = self.table.write().expect("pool lock poisoned");
        let cached = table.problems.get(&key.problem_id);
        let outcome = if cached.is_some_and(|a| a.contains_key(&key.answer)) {
            InsertOutcome::AlreadyPresent
        } else if draft_quality.is_nan() || draft_quality < self.config.quality_threshold {
            InsertOutcome::RejectedQuality
        } else if cached.map_or(0, HashMap::len) >= self.config.capacity {
            InsertOutcome::RejectedCapacity
        } else {
            InsertOutcome::Inserted
        };
        let counter = match outcome {
            InsertOutcome::Inserted => &self.counters.inserts,
            InsertOutcome::AlreadyPresent => &self.counters.already_present,
            InsertOutcome::RejectedQuality => &self.counters.rejects_quality,
            InsertOutcome::RejectedCapacity => &self.counters.rejects_capacity,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        if outcome != InsertOutcome::Inserted {
            return outcome;
        }

        let seq = table.next_seq;
        table.next_seq += 1;
        let entry = PoolEntry {
            key: key.clone(),
            analysis: analysis.clone(),
            draft_quality,
            created_at: now,
            hit_count: 0,
        };
        table.problems.entry(key.problem_id).or_default().insert(
            key.answer,
            Slot { analysis, draft_quality, created_at: now, seq, hits: AtomicU64::new(0) },
        );
        // Appending under the table lock keeps log order equal to insert order.
        if let Err(e) = self.persist_append(&entry) {
            self.counters.storage_failures.fetch_add(1, Ordering::Relaxed);
            ::log::error!("error pool entry kept in memory only: {e}");
        }
        outcome
    }

    /// Appends one record to the pool log. A no-op for in-memory pools.
    pub fn persist_append(&self, entry: &PoolEntry) -> Result<(), StorageError> {
        let Some(log) = &self.log else { return Ok(()) };
        let mut log = log.lock().expect("pool log lock poisoned");
        log.append(&PoolRecord::from_entry(entry))
            .map_err(|source| StorageError::Io { path: log.path().display().to_string(), source })
    }

    pub fn stats(&self) -> PoolStats {
        let table = self.table.read().expect("pool lock poisoned");
        let per_problem: BTreeMap<ProblemId, usize> =
            table.problems.iter().map(|(p, a)| (p.clone(), a.len())).collect();
        let c = &self.counters;
        let hits = c.hits.load(Ordering::Relaxed);
        let misses = c.misses.load(Ordering::Relaxed);
        let lookups = hits + misses;
        PoolStats {
            entries: per_problem.values().sum(),
            per_problem,
            hits,
            misses,
            inserts: c.inserts.load(Ordering::Relaxed),
            already_present: c.already_present.load(Ordering::Relaxed),
            rejects_quality: c.rejects_quality.load(Ordering::Relaxed),
            rejects_capacity: c.rejects_capacity.load(Ordering::Relaxed),
            storage_failures: c.storage_failures.load(Ordering::Relaxed),
            hit_rate: if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 },
        }
    }

    pub fn len(&self) -> usize {
        let table = self.table.read().expect("pool lock poisoned");
        table.problems.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in insertion order.
    pub fn entries(&self) -> Vec<PoolEntry> {
        let table = self.table.read().expect("pool lock poisoned");
        let mut slots: Vec<(u64, PoolEntry)> = table
            .problems
            .iter()
            .flat_map(|(p, answers)| {
                answers
                    .iter()
                    .map(move |(a, s)| (s.seq, s.entry(PoolKey::new(p.clone(), a.clone()))))
            })
            .collect();
        slots.sort_by_key(|(seq, _)| *seq);
        slots.into_iter().map(|(_, e)| e).collect()
    }

    /// Log records for every entry, in insertion order. Two pools with the
    /// same records hold the same cached analyses.
    pub fn records(&self) -> Vec<PoolRecord> {
        self.entries().iter().map(PoolRecord::from_entry).collect()
    }
}
