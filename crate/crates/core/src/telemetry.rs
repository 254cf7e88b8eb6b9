//! Session event log and the engagement metrics computed from it.
//!
//! The log is append-only JSON Lines, one [`SessionEvent`] per line, each
//! carrying a schema version `v`. Every metric here is a pure function of the
//! events, so replaying a log always gives the same numbers.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code_model::BlockId;
use crate::puzzle_engine::{AdaptationAction, Target};
use crate::solution_forge::Provenance;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FAST_FINISHER_MINUTES: f64 = 2.0;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("malformed log at event {index}: {reason}")]
    MalformedLog { index: usize, reason: String },
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema version {found} at line {line}")]
    SchemaVersion { line: usize, found: u32 },
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Help is a personalized Parsons puzzle.
    PC,
    /// Help is the full personalized solution.
    CC,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::PC => "PC",
            Condition::CC => "CC",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    SessionStart,
    QuestionOpen,
    Run,
    HelpRequest,
    PuzzleMove,
    PuzzleCheck,
    Adaptation,
    Regenerate,
    CopyAnswer,
    Submit,
    QuestionComplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HelpKind {
    Puzzle,
    FullSolution,
}

/// Event kind together with its kind-specific payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    SessionStart {
        problem_order: Vec<String>,
        /// SHA-256 of the bearer token, hex.
        token_sha256: String,
    },
    QuestionOpen,
    Run {
        code: String,
        passed: usize,
        total: usize,
    },
    HelpRequest {
        code: String,
        help: HelpKind,
        provenance: Provenance,
        attempts_used: u32,
        closeness: usize,
        solution: String,
        puzzle_seed: Option<u64>,
    },
    PuzzleMove {
        block_id: BlockId,
        target: Target,
    },
    PuzzleCheck {
        correct: bool,
        first_error_position: Option<usize>,
    },
    Adaptation {
        action: AdaptationAction,
    },
    Regenerate {
        code: String,
        provenance: Provenance,
        attempts_used: u32,
        closeness: usize,
        solution: String,
        puzzle_seed: u64,
    },
    CopyAnswer {
        text: String,
    },
    Submit {
        code: String,
        passed: usize,
        total: usize,
    },
    QuestionComplete,
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::SessionStart { .. } => EventKind::SessionStart,
            EventBody::QuestionOpen => EventKind::QuestionOpen,
            EventBody::Run { .. } => EventKind::Run,
            EventBody::HelpRequest { .. } => EventKind::HelpRequest,
            EventBody::PuzzleMove { .. } => EventKind::PuzzleMove,
            EventBody::PuzzleCheck { .. } => EventKind::PuzzleCheck,
            EventBody::Adaptation { .. } => EventKind::Adaptation,
            EventBody::Regenerate { .. } => EventKind::Regenerate,
            EventBody::CopyAnswer { .. } => EventKind::CopyAnswer,
            EventBody::Submit { .. } => EventKind::Submit,
            EventBody::QuestionComplete => EventKind::QuestionComplete,
        }
    }

    /// Code the student had when this event happened, if the event carries it.
    pub fn code_snapshot(&self) -> Option<&str> {
        match self {
            EventBody::Run { code, .. }
            | EventBody::HelpRequest { code, .. }
            | EventBody::Regenerate { code, .. }
            | EventBody::Submit { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub v: u32,
    pub session_id: String,
    pub student_id: String,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

/// Parses JSON Lines text. Blank lines are skipped.
pub fn parse_log(text: &str) -> Result<Vec<SessionEvent>, TelemetryError> {
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: SessionEvent = serde_json::from_str(line).map_err(|e| TelemetryError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if event.v != SCHEMA_VERSION {
            return Err(TelemetryError::SchemaVersion {
                line: n + 1,
                found: event.v,
            });
        }
        events.push(event);
    }
    Ok(events)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<SessionEvent>, TelemetryError> {
    let file = File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_log(&text)
}

/// Single writer for an append-only log file. Each append is flushed.
#[derive(Debug)]
pub struct EventLogWriter {
    out: BufWriter<File>,
}

impl EventLogWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TelemetryError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLogWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, event: &SessionEvent) -> Result<(), TelemetryError> {
        self.out.write_all(event.to_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Checks per-session timestamp order and that completions follow opens.
pub fn validate_log(log: &[SessionEvent]) -> Result<(), TelemetryError> {
    let mut last_ts: HashMap<&str, u64> = HashMap::new();
    let mut opened: HashMap<(&str, &str), bool> = HashMap::new();
    for (index, e) in log.iter().enumerate() {
        let prev = last_ts.entry(&e.session_id).or_insert(e.timestamp_ms);
        if e.timestamp_ms < *prev {
            return Err(TelemetryError::MalformedLog {
                index,
                reason: format!(
                    "timestamp {} precedes {} in session {}",
                    e.timestamp_ms, prev, e.session_id
                ),
            });
        }
        *prev = e.timestamp_ms;
        let Some(q) = e.question_id.as_deref() else {
            continue;
        };
        match e.kind() {
            EventKind::QuestionOpen => {
                opened.insert((&e.session_id, q), true);
            }
            EventKind::QuestionComplete if !opened.contains_key(&(e.session_id.as_str(), q)) => {
                return Err(TelemetryError::MalformedLog {
                    index,
                    reason: format!("question {q} completed before it was opened"),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingOptions {
    /// When set, gaps between consecutive events longer than this count only up to it.
    pub idle_cap_ms: Option<u64>,
}

/// Milliseconds spent on each question: from its first open to its last
/// completion, or to the last event on it when never completed.
pub fn question_spans(
    log: &[SessionEvent],
    opts: TimingOptions,
) -> Result<BTreeMap<(String, String), u64>, TelemetryError> {
    validate_log(log)?;
    let mut by_question: BTreeMap<(String, String), Vec<&SessionEvent>> = BTreeMap::new();
    for e in log {
        if let Some(q) = &e.question_id {
            by_question
                .entry((e.student_id.clone(), q.clone()))
                .or_default()
                .push(e);
        }
    }
    Ok(by_question
        .into_iter()
        .map(|(key, events)| {
            let start = events
                .iter()
                .position(|e| e.kind() == EventKind::QuestionOpen)
                .unwrap_or(0);
            let end = events
                .iter()
                .rposition(|e| e.kind() == EventKind::QuestionComplete)
                .unwrap_or(events.len() - 1)
                .max(start);
            let window = &events[start..=end];
            let span = match opts.idle_cap_ms {
                None => window[window.len() - 1].timestamp_ms - window[0].timestamp_ms,
                Some(cap) => window
                    .windows(2)
                    .map(|w| (w[1].timestamp_ms - w[0].timestamp_ms).min(cap))
                    .sum(),
            };
            (key, span)
        })
        .collect())
}

/// Per-student practice time in minutes: the sum of per-question spans.
pub fn practice_time(log: &[SessionEvent], opts: TimingOptions) -> Result<BTreeMap<String, f64>, TelemetryError> {
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for e in log {
        totals.entry(e.student_id.clone()).or_insert(0);
    }
    for ((student, _), ms) in question_spans(log, opts)? {
        *totals.entry(student).or_insert(0) += ms;
    }
    Ok(totals
        .into_iter()
        .map(|(s, ms)| (s, ms as f64 / 60_000.0))
        .collect())
}

/// Per-student count of Run, Submit and PuzzleCheck events.
pub fn count_attempts(log: &[SessionEvent]) -> Result<BTreeMap<String, u64>, TelemetryError> {
    validate_log(log)?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for e in log {
        let c = counts.entry(e.student_id.clone()).or_insert(0);
        if matches!(e.kind(), EventKind::Run | EventKind::Submit | EventKind::PuzzleCheck) {
            *c += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub student_id: String,
    pub condition: Condition,
    pub practice_minutes: f64,
    pub attempts: u64,
    pub fast_finisher: bool,
}

pub fn flag_fast_finishers(
    mut records: Vec<EngagementRecord>,
    threshold_minutes: f64,
) -> Result<Vec<EngagementRecord>, TelemetryError> {
    if !(threshold_minutes > 0.0) {
        return Err(TelemetryError::InvalidThreshold(threshold_minutes));
    }
    for r in &mut records {
        r.fast_finisher = r.practice_minutes < threshold_minutes;
    }
    Ok(records)
}

/// One record per student in the log, ordered by student id.
pub fn engagement_records(
    log: &[SessionEvent],
    opts: TimingOptions,
    threshold_minutes: f64,
) -> Result<Vec<EngagementRecord>, TelemetryError> {
    let minutes = practice_time(log, opts)?;
    let attempts = count_attempts(log)?;
    let mut condition: BTreeMap<&str, Condition> = BTreeMap::new();
    for e in log {
        condition.entry(&e.student_id).or_insert(e.condition);
    }
    let records = minutes
        .into_iter()
        .map(|(student, practice_minutes)| EngagementRecord {
            condition: condition[student.as_str()],
            attempts: attempts.get(&student).copied().unwrap_or(0),
            student_id: student,
            practice_minutes,
            fast_finisher: false,
        })
        .collect();
    flag_fast_finishers(records, threshold_minutes)
}

/// Latest code snapshot per `(session, question)`.
pub fn code_snapshots(log: &[SessionEvent]) -> BTreeMap<(String, String), String> {
    let mut out = BTreeMap::new();
    for e in log {
        if let (Some(q), Some(code)) = (&e.question_id, e.body.code_snapshot()) {
            out.insert((e.session_id.clone(), q.clone()), code.to_string());
        }
    }
    out
}
