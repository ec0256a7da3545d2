//! Line-delimited JSON log of pool inserts.
//!
//! One record per line, fields in this order:
//! `problem_id`, `answer`, `cause`, `suggestion`, `backend_name` (nullable),
//! `draft_quality`, `created_at` (UTC ms). See `docs/pool-log-format.md`.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PoolEntry, PoolKey};
use crate::model::{normalize_answer, AnalysisSource, ErrorCauseAnalysis, ProblemId, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub problem_id: String,
    pub answer: String,
    pub cause: String,
    pub suggestion: String,
    pub backend_name: Option<String>,
    pub draft_quality: f64,
    pub created_at: i64,
}

impl PoolRecord {
    pub fn from_entry(entry: &PoolEntry) -> Self {
        Self {
            problem_id: entry.key.problem_id.as_str().to_owned(),
            answer: entry.key.answer.canonical().to_owned(),
            cause: entry.analysis.cause.clone(),
            suggestion: entry.analysis.suggestion.clone(),
            backend_name: entry.analysis.backend_name.clone(),
            draft_quality: entry.draft_quality,
            created_at: entry.created_at.0,
        }
    }

    pub fn into_entry(self) -> PoolEntry {
        PoolEntry {
            key: PoolKey::new(ProblemId::new(self.problem_id), normalize_answer(&self.answer)),
            analysis: ErrorCauseAnalysis {
                cause: self.cause,
                suggestion: self.suggestion,
                source: AnalysisSource::DualStream,
                backend_name: self.backend_name,
            },
            draft_quality: self.draft_quality,
            created_at: Timestamp(self.created_at),
            hit_count: 0,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("pool record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsyncPolicy {
    /// fsync after every appended record.
    Always,
    /// Leave flushing to the OS.
    #[default]
    Never,
}

#[derive(Debug, Default)]
pub struct ReplayReport {
    pub records: Vec<PoolRecord>,
    /// Line numbers (1-based) that failed to parse and were skipped.
    pub skipped_lines: Vec<usize>,
    /// Bytes of a trailing partial record removed from the file.
    pub truncated_bytes: u64,
}

/// Replays a log without modifying it. A torn tail is reported, not cut.
pub fn read_log(path: impl AsRef<Path>) -> io::Result<ReplayReport> {
    let path = path.as_ref();
    Ok(scan(&File::open(path)?, path)?.0)
}

/// Parses every complete line; returns the report and the byte length of
/// the complete prefix.
fn scan(file: &File, path: &Path) -> io::Result<(ReplayReport, u64)> {
    let mut report = ReplayReport::default();
    let mut reader = BufReader::new(file);
    let mut offset: u64 = 0;
    let mut line_no = 0usize;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            log::warn!("{}: dropping torn trailing record at line {line_no}", path.display());
            report.truncated_bytes = n as u64;
            break;
        }
        offset += n as u64;
        let line = String::from_utf8_lossy(&buf[..n - 1]);
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PoolRecord>(&line) {
            Ok(record) => report.records.push(record),
            Err(e) => {
                log::warn!("{}: skipping corrupt record at line {line_no}: {e}", path.display());
                report.skipped_lines.push(line_no);
            }
        }
    }
    Ok((report, offset))
}

pub struct PoolLog {
    path: PathBuf,
    file: File,
    fsync: FsyncPolicy,
}

impl PoolLog {
    /// Opens (creating if needed) the log, replays its records and positions
    /// the writer at the end. A trailing record without its newline is
    /// treated as torn and cut off so later appends start on a clean line.
    pub fn open(path: impl AsRef<Path>, fsync: FsyncPolicy) -> io::Result<(Self, ReplayReport)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let (report, clean_len) = scan(&file, &path)?;
        if report.truncated_bytes > 0 {
            file.set_len(clean_len)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok((Self { path, file, fsync }, report))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    #[cfg(test)]
    pub(super) fn replace_file_for_test(&mut self, file: File) {
        self.file = file;
    }

    pub fn append(&mut self, record: &PoolRecord) -> io::Result<()> {
        let mut line = record.to_line();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        if self.fsync == FsyncPolicy::Always {
            self.file.sync_data()?;
        }
        Ok(())
    }
}
