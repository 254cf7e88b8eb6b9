//! Plays a [`SimScript`] against an in-process service on a virtual clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use parsons_core::exec_harness::{ExecError, Limits, TestReport, TestRunner, TestStatus};
use parsons_core::problem::{ProblemBank, TestCase};
use parsons_core::provider::ProviderPort;
use parsons_core::code_model::BlockId;
use parsons_core::puzzle_engine::{EngineError, Move, PuzzleView};
use parsons_core::telemetry::{Condition, EngagementRecord, HelpKind, SessionEvent};
use parsons_service::{
    NewSession, ScaffoldService, ServiceError, ServiceParts, ServiceSettings, SessionSnapshot, TokenMode,
    VirtualClock,
};
use serde::{Deserialize, Serialize};

use crate::script::{Action, SimScript};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("student `{student}` at {at_ms} ms ({action}): {source}")]
    Step {
        student: String,
        at_ms: u64,
        action: &'static str,
        #[source]
        source: ServiceError,
    },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("cannot write log {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Remembers reports for code it has already run. The harness is
/// deterministic and copied answers repeat a lot.
pub struct MemoRunner<R> {
    inner: R,
    seen: Mutex<HashMap<(String, String, u64, Option<u64>), TestReport>>,
}

impl<R> MemoRunner<R> {
    pub fn new(inner: R) -> Self {
        MemoRunner {
            inner,
            seen: Mutex::new(HashMap::new()),
        }
    }
}

impl<R: TestRunner> TestRunner for MemoRunner<R> {
    fn run_tests(&self, source: &str, tests: &[TestCase], limits: Limits) -> Result<TestReport, ExecError> {
        let key = (
            source.to_string(),
            serde_json::to_string(tests).expect("tests serialize"),
            limits.timeout_ms,
            limits.memory_hint_mb,
        );
        if let Some(hit) = self.seen.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let report = self.inner.run_tests(source, tests, limits)?;
        // A timeout may be load rather than the code, so try those again.
        let timed_out = report
            .results
            .iter()
            .any(|r| r.status == TestStatus::Error && r.detail == "timeout");
        if !timed_out {
            self.seen
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(key, report.clone());
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSummary {
    pub student_id: String,
    pub session_id: String,
    pub condition: Condition,
    pub practice_minutes: f64,
    pub attempts: u64,
    pub fast_finisher: bool,
}

/// A scripted step the service turned down. Nothing was logged for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedStep {
    pub student_id: String,
    pub problem_id: String,
    pub at_ms: u64,
    pub action: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelpCounts {
    pub puzzles: usize,
    pub full_solutions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub students: Vec<StudentSummary>,
    pub events: usize,
    /// Help payloads actually returned, per condition.
    pub help: BTreeMap<Condition, HelpCounts>,
    pub rejected: Vec<RejectedStep>,
}

impl SimSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<4} {:>9} {:>8}  fast", "student", "cond", "minutes", "attempts");
        for s in &self.students {
            let _ = writeln!(
                out,
                "{:<16} {:<4} {:>9.1} {:>8}  {}",
                s.student_id,
                s.condition,
                s.practice_minutes,
                s.attempts,
                if s.fast_finisher { "yes" } else { "" }
            );
        }
        let count = |c| self.students.iter().filter(|s| s.condition == c).count();
        let _ = writeln!(
            out,
            "{} students ({} PC, {} CC), {} events, {} fast finishers, {} rejected steps",
            self.students.len(),
            count(Condition::PC),
            count(Condition::CC),
            self.events,
            self.students.iter().filter(|s| s.fast_finisher).count(),
            self.rejected.len()
        );
        out
    }
}

pub struct SimOutcome {
    pub events: Vec<SessionEvent>,
    pub summary: SimSummary,
    /// Engagement as the live service computed it.
    pub records: Vec<EngagementRecord>,
    /// Final state of every session, in script order.
    pub sessions: Vec<SessionSnapshot>,
}

impl SimOutcome {
    pub fn log_text(&self) -> String {
        self.events.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        let fail = |source| SimError::Write {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(fail)?;
        file.write_all(self.log_text().as_bytes()).map_err(fail)?;
        file.sync_all().map_err(fail)
    }
}

pub struct Simulator {
    pub bank: ProblemBank,
    pub provider: Arc<dyn ProviderPort>,
    pub runner: Arc<dyn TestRunner>,
    pub settings: ServiceSettings,
}

/// Errors that mean "the student clicked something that does not apply
/// right now". The simulation records them and carries on.
fn is_refusal(e: &ServiceError) -> bool {
    matches!(
        e,
        ServiceError::WrongCondition(_)
            | ServiceError::NoActivePuzzle(_)
            | ServiceError::NoSolutionYet(_)
            | ServiceError::UnknownProblem(_)
            | ServiceError::Engine(_)
    )
}

enum Outcome {
    Done,
    /// Run this step again after the given delay.
    Continue(u64),
}

impl Simulator {
    pub fn run(&self, script: &SimScript) -> Result<SimOutcome, SimError> {
        let clock = Arc::new(VirtualClock::new(script.start_ms));
        let service = ScaffoldService::open(ServiceParts {
            bank: self.bank.clone(),
            provider: self.provider.clone(),
            runner: self.runner.clone(),
            clock: clock.clone(),
            settings: ServiceSettings {
                seed: script.seed,
                tokens: TokenMode::Seeded,
                ..self.settings
            },
            data_dir: None,
        })?;

        let mut sessions = Vec::with_capacity(script.students.len());
        for s in &script.students {
            let ticket = service.create_session(NewSession {
                student_id: s.student_id.clone(),
                seed: None,
                condition: s.condition,
            })?;
            sessions.push(ticket.session_id);
        }

        let mut editors: HashMap<(usize, usize), String> = HashMap::new();
        let mut help = BTreeMap::<Condition, HelpCounts>::new();
        let mut rejected = Vec::new();
        let mut queue: BinaryHeap<Reverse<(u64, usize, usize, usize, u32)>> = script
            .timeline()
            .into_iter()
            .map(|(t, si, qi, k)| Reverse((t, si, qi, k, 0)))
            .collect();

        while let Some(Reverse((t, si, qi, k, round))) = queue.pop() {
            clock.set(t);
            let student = &script.students[si];
            let question = &student.questions[qi];
            let action = &question.steps[k].action;
            let sid = sessions[si].as_str();
            let pid = question.problem_id.as_str();
            let editor = editors.entry((si, qi)).or_default();
            let result = Self::play(
                &service, sid, pid, action, editor, &mut help);
            match result {
                Ok(Outcome::Done) => {}
                Ok(Outcome::Continue(delay)) => queue.push(Reverse((t + delay, si, qi, k, round + 1))),
                Err(e) if is_refusal(&e) => rejected.push(RejectedStep {
                    student_id: student.student_id.clone(),
                    problem_id: pid.to_string(),
                    at_ms: t - script.start_ms,
                    action: action.name().to_string(),
                    reason: e.to_string(),
                }),
                Err(source) => {
                    return Err(SimError::Step {
                        student: student.student_id.clone(),
                        at_ms: t - script.start_ms,
                        action: action.name(),
                        source,
                    })
                }
            }
        }

        let events = service.events();
        let records = service.engagement()?;
        let summary = SimSummary {
            students: summarize(&script.students.iter().map(|s| s.student_id.as_str()).collect::<Vec<_>>(), &sessions, &records),
            events: events.len(),
            help,
            rejected,
        };
        let sessions = sessions
            .iter()
            .map(|sid| service.snapshot(sid))
            .collect::<Result<_, _>>()?;
        Ok(SimOutcome {
            events,
            summary,
            records,
            sessions,
        })
    }

    fn play(
        service: &ScaffoldService,
        sid: &str,
        pid: &str,
        action: &Action,
        editor: &mut String,
        help: &mut BTreeMap<Condition, HelpCounts>,
    ) -> Result<Outcome, ServiceError> {
        match action {
            Action::Open => {
                service.open_question(sid, pid)?;
            }
            Action::Write { code } => *editor = code.clone(),
            Action::Run => {
                service.save_and_run(sid, pid, editor)?;
            }
            Action::Submit => {
                service.submit(sid, pid, editor)?;
            }
            Action::Help | Action::Regenerate => {
                let payload = if matches!(action, Action::Help) {
                    service.request_help(sid, pid, editor)?
                } else {
                    service.regenerate(sid, pid, editor)?
                };
                let condition = service.snapshot(sid)?.condition;
                let counts = help.entry(condition).or_default();
                match payload.kind {
                    HelpKind::Puzzle => counts.puzzles += 1,
                    HelpKind::FullSolution => counts.full_solutions += 1,
                }
            }
            Action::Move { tray_index, position } => {
                let id = visible(service, sid, pid, |v| &v.tray, *tray_index)?;
                service.puzzle_move(sid, pid, &Move::to_area(id, *position))?;
            }
            Action::Unplace { area_index } => {
                let id = visible(service, sid, pid, |v| &v.area, *area_index)?;
                service.puzzle_move(sid, pid, &Move::to_tray(id))?;
            }
            Action::Check => {
                service.puzzle_check(sid, pid)?;
            }
            Action::HelpMe => {
                service.puzzle_help_me(sid, pid)?;
            }
            Action::Solve { step_ms } => {
                // One move per round so other students keep their place in time.
                let script = service.puzzle_solution_script(sid, pid)?;
                match script.first() {
                    Some(m) => {
                        service.puzzle_move(sid, pid, m)?;
                        return Ok(Outcome::Continue(*step_ms));
                    }
                    None => {
                        service.puzzle_check(sid, pid)?;
                    }
                }
            }
            Action::Copy => *editor = service.copy_answer(sid, pid)?,
        }
        Ok(Outcome::Done)
    }
}

/// The block at `index` of the tray or area the student currently sees.
fn visible(
    service: &ScaffoldService,
    sid: &str,
    pid: &str,
    side: impl FnOnce(&PuzzleView) -> &Vec<BlockId>,
    index: usize,
) -> Result<BlockId, ServiceError> {
    let snap = service.snapshot(sid)?;
    let view = snap
        .problems
        .get(pid)
        .and_then(|p| p.puzzle.as_ref())
        .ok_or_else(|| ServiceError::NoActivePuzzle(pid.to_string()))?;
    let blocks = side(view);
    blocks.get(index).cloned().ok_or(ServiceError::Engine(EngineError::PositionOutOfRange {
        position: index,
        len: blocks.len(),
    }))
}

fn summarize(students: &[&str], sessions: &[String], records: &[EngagementRecord]) -> Vec<StudentSummary> {
    let by_id: BTreeMap<&str, &EngagementRecord> = records.iter().map(|r| (r.student_id.as_str(), r)).collect();
    students
        .iter()
        .zip(sessions)
        .filter_map(|(s, sid)| {
            by_id.get(s).map(|r| StudentSummary {
                student_id: r.student_id.clone(),
                session_id: sid.clone(),
                condition: r.condition,
                practice_minutes: r.practice_minutes,
                attempts: r.attempts,
                fast_finisher: r.fast_finisher,
            })
        })
        .collect()
}
