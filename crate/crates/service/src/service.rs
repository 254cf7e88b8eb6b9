//! The session service: problem bank, sessions, the help branch and the event log.
//!
//! Every method is synchronous. Commands on one session are serialized by
//! that session's mutex; different sessions run in parallel. All events go
//! through one writer. With a data directory the service persists the
//! problem bank as `problems.json` and the log as `events.jsonl`, and a
//! restart rebuilds every session by replaying the log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use parsons_core::analytics::{condition_report, Metric, StatReport, StatsError};
use parsons_core::code_model::CodeModelError;
use parsons_core::exec_harness::{ExecError, TestReport, TestRunner};
use parsons_core::problem::{BankError, Problem, ProblemBank, PublicProblem};
use parsons_core::provider::ProviderPort;
use parsons_core::puzzle_engine::{AdaptationAction, EngineError, Feedback, Move, PuzzleState, PuzzleView};
use parsons_core::puzzle_gen::{make_puzzle, PuzzleConfig};
use parsons_core::solution_forge::{generate_solution, ForgeConfig, ForgeError, Provenance, VerifiedSolution};
use parsons_core::telemetry::{
    engagement_records, read_log, Condition, EngagementRecord, EventBody, EventLogWriter, HelpKind, SessionEvent,
    TelemetryError, TimingOptions, DEFAULT_FAST_FINISHER_MINUTES, SCHEMA_VERSION,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;

pub const PROBLEMS_FILE: &str = "problems.json";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("student `{0}` already has a session")]
    DuplicateSession(String),
    #[error("{0} sessions cannot do that")]
    WrongCondition(Condition),
    #[error("no active puzzle for problem `{0}`")]
    NoActivePuzzle(String),
    #[error("no solution has been shown for problem `{0}` yet")]
    NoSolutionYet(String),
    #[error("missing or invalid session token")]
    Unauthorized,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Puzzle(#[from] CodeModelError),
    #[error("cannot replay event log: {0}")]
    Replay(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How bearer tokens are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TokenMode {
    /// From the operating system's generator. Use this for real deployments.
    #[default]
    Random,
    /// From the service seed, so simulated logs are reproducible.
    Seeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceSettings {
    /// Drives condition assignment, session ids and puzzle seeds.
    pub seed: u64,
    pub min_attempts: u32,
    pub puzzle: PuzzleConfig,
    pub forge: ForgeConfig,
    pub timing: TimingOptions,
    pub fast_finisher_minutes: f64,
    pub tokens: TokenMode,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            seed: 0,
            min_attempts: parsons_core::puzzle_engine::DEFAULT_MIN_ATTEMPTS,
            puzzle: PuzzleConfig::default(),
            forge: ForgeConfig::default(),
            timing: TimingOptions::default(),
            fast_finisher_minutes: DEFAULT_FAST_FINISHER_MINUTES,
            tokens: TokenMode::Random,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSession {
    pub student_id: String,
    /// Seeds this student's condition draw instead of the service generator.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Forces the condition. Simulation only; not exposed over HTTP.
    #[serde(skip)]
    pub condition: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTicket {
    pub session_id: String,
    /// Shown once; only its hash is kept.
    pub token: String,
    pub condition: Condition,
    pub problem_order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelpPayload {
    pub kind: HelpKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub puzzle: Option<PuzzleView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution_text: Option<String>,
    pub provenance: Provenance,
    pub attempts_used: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResponse {
    pub feedback: Feedback,
    pub puzzle: PuzzleView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptResponse {
    pub action: AdaptationAction,
    pub puzzle: PuzzleView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub report: TestReport,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub problem_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSnapshot {
    pub code: String,
    pub opened: bool,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub puzzle: Option<PuzzleView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub student_id: String,
    pub condition: Condition,
    pub problem_order: Vec<String>,
    pub created_at_ms: u64,
    pub problems: BTreeMap<String, ProblemSnapshot>,
}

#[derive(Debug, Clone, Default)]
struct Progress {
    code: String,
    opened: bool,
    completed: bool,
    /// Puzzles and solutions generated so far; feeds the puzzle seed.
    generation: u32,
    puzzle: Option<PuzzleState>,
    /// Latest full solution shown (CC only).
    solution: Option<String>,
    /// Provenance and attempt count of the latest help.
    last_help: Option<(Provenance, u32)>,
}

#[derive(Debug)]
struct Session {
    session_id: String,
    student_id: String,
    condition: Condition,
    problem_order: Vec<String>,
    token_sha256: String,
    created_at_ms: u64,
    last_ts: u64,
    progress: BTreeMap<String, Progress>,
}

impl Session {
    fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            session_id: self.session_id.clone(),
            student_id: self.student_id.clone(),
            condition: self.condition,
            problem_order: self.problem_order.clone(),
            created_at_ms: self.created_at_ms,
            problems: self
                .progress
                .iter()
                .map(|(pid, p)| {
                    (
                        pid.clone(),
                        ProblemSnapshot {
                            code: p.code.clone(),
                            opened: p.opened,
                            completed: p.completed,
                            puzzle: p.puzzle.as_ref().map(PuzzleState::view),
                            solution_text: p.solution.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Default)]
struct Registry {
    sessions: BTreeMap<String, Arc<Mutex<Session>>>,
    by_student: BTreeMap<String, String>,
}

#[derive(Debug, Default)]
struct EventSink {
    writer: Option<EventLogWriter>,
    events: Vec<SessionEvent>,
}

/// Everything the service needs from the outside.
pub struct ServiceParts {
    pub bank: ProblemBank,
    pub provider: Arc<dyn ProviderPort>,
    pub runner: Arc<dyn TestRunner>,
    pub clock: Arc<dyn Clock>,
    pub settings: ServiceSettings,
    pub data_dir: Option<PathBuf>,
}

pub struct ScaffoldService {
    bank: Mutex<ProblemBank>,
    provider: Arc<dyn ProviderPort>,
    runner: Arc<dyn TestRunner>,
    clock: Arc<dyn Clock>,
    settings: ServiceSettings,
    data_dir: Option<PathBuf>,
    rng: Mutex<ChaCha8Rng>,
    registry: Mutex<Registry>,
    sink: Mutex<EventSink>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panic while holding a lock leaves plain data behind; keep serving.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Puzzle seed for one generation of one problem in one session.
pub fn derive_puzzle_seed(base: u64, session_id: &str, problem_id: &str, generation: u32) -> u64 {
    let digest = Sha256::digest(format!("{base}/{session_id}/{problem_id}/{generation}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// The fixed set of draws every new session takes from the service generator.
struct SessionDraw {
    pc: bool,
    id: u64,
    token: [u8; 16],
}

impl SessionDraw {
    fn take(rng: &mut ChaCha8Rng) -> Self {
        let pc = rng.random_bool(0.5);
        let id = rng.next_u64();
        let mut token = [0u8; 16];
        rng.fill_bytes(&mut token);
        SessionDraw { pc, id, token }
    }
}

fn condition_of(pc: bool) -> Condition {
    if pc {
        Condition::PC
    } else {
        Condition::CC
    }
}

impl ScaffoldService {
    /// Builds the service. With a data directory, a missing bank is loaded
    /// from it and an existing event log is replayed before new events are
    /// appended to it.
    pub fn open(parts: ServiceParts) -> Result<Self, ServiceError> {
        let mut bank = parts.bank;
        if let Some(dir) = &parts.data_dir {
            std::fs::create_dir_all(dir)?;
            let stored = dir.join(PROBLEMS_FILE);
            if bank.problems.is_empty() && stored.exists() {
                bank = ProblemBank::load(&stored)?;
            }
        }
        let service = ScaffoldService {
            bank: Mutex::new(bank),
            provider: parts.provider,
            runner: parts.runner,
            clock: parts.clock,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(parts.settings.seed)),
            settings: parts.settings,
            data_dir: parts.data_dir,
            registry: Mutex::new(Registry::default()),
            sink: Mutex::new(EventSink::default()),
        };
        if let Some(dir) = &service.data_dir {
            let path = dir.join(EVENTS_FILE);
            if path.exists() {
                let events = read_log(&path)?;
                service.replay(events)?;
            }
            lock(&service.sink).writer = Some(EventLogWriter::open(&path)?);
        }
        Ok(service)
    }

    pub fn settings(&self) -> &ServiceSettings {
        &self.settings
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    // ---- problem bank ----

    pub fn problems(&self) -> Vec<PublicProblem> {
        lock(&self.bank).problems.iter().map(PublicProblem::from).collect()
    }

    pub fn problem(&self, id: &str) -> Result<PublicProblem, ServiceError> {
        lock(&self.bank)
            .get(id)
            .map(PublicProblem::from)
            .ok_or_else(|| ServiceError::UnknownProblem(id.to_string()))
    }

    fn full_problem(&self, id: &str) -> Result<Problem, ServiceError> {
        lock(&self.bank)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownProblem(id.to_string()))
    }

    pub fn ingest_path(&self, path: impl AsRef<Path>) -> Result<IngestReport, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        self.ingest_problems(&text)
    }

    /// Verifies each reference solution against its own tests. Problems
    /// that fail are reported and left out; the rest are added (replacing
    /// problems with the same id) and the bank is persisted.
    pub fn ingest_problems(&self, text: &str) -> Result<IngestReport, ServiceError> {
        let incoming = ProblemBank::parse(text)?;
        let mut report = IngestReport::default();
        let mut accepted = Vec::new();
        for problem in incoming.problems {
            let verdict = self
                .runner
                .run_tests(&problem.reference_solution, &problem.tests, self.settings.forge.limits)?;
            if verdict.all_passed {
                report.accepted.push(problem.id.clone());
                accepted.push(problem);
            } else {
                let failing: Vec<String> = verdict
                    .results
                    .iter()
                    .filter(|r| r.status != parsons_core::exec_harness::TestStatus::Pass)
                    .map(|r| format!("{} ({:?}: {})", r.test_id, r.status, r.detail))
                    .collect();
                report.rejected.push(Rejection {
                    problem_id: problem.id.clone(),
                    reason: format!("reference solution fails: {}", failing.join("; ")),
                });
            }
        }
        let mut bank = lock(&self.bank);
        for problem in accepted {
            match bank.problems.iter_mut().find(|p| p.id == problem.id) {
                Some(slot) => *slot = problem,
                None => bank.problems.push(problem),
            }
        }
        if let Some(dir) = &self.data_dir {
            let json = serde_json::to_string_pretty(&*bank).expect("bank serializes");
            std::fs::write(dir.join(PROBLEMS_FILE), json)?;
        }
        Ok(report)
    }

    // ---- sessions ----

    pub fn create_session(&self, request: NewSession) -> Result<SessionTicket, ServiceError> {
        let mut registry = lock(&self.registry);
        if registry.by_student.contains_key(&request.student_id) {
            return Err(ServiceError::DuplicateSession(request.student_id));
        }
        let draw = SessionDraw::take(&mut lock(&self.rng));
        let condition = match (request.condition, request.seed) {
            (Some(c), _) => c,
            (None, Some(seed)) => condition_of(ChaCha8Rng::seed_from_u64(seed).random_bool(0.5)),
            (None, None) => condition_of(draw.pc),
        };
        let session_id = format!("s{:016x}", draw.id);
        if registry.sessions.contains_key(&session_id) {
            return Err(ServiceError::DuplicateSession(request.student_id));
        }
        let token_bytes = match self.settings.tokens {
            TokenMode::Seeded => draw.token,
            TokenMode::Random => rand::random(),
        };
        let token: String = token_bytes.iter().map(|b| format!("{b:02x}")).collect();
        let problem_order: Vec<String> = lock(&self.bank).problems.iter().map(|p| p.id.clone()).collect();
        let now = self.clock.now_ms();
        let mut session = Session {
            session_id: session_id.clone(),
            student_id: request.student_id.clone(),
            condition,
            problem_order: problem_order.clone(),
            token_sha256: sha256_hex(token.as_bytes()),
            created_at_ms: now,
            last_ts: now,
            progress: BTreeMap::new(),
        };
        let body = EventBody::SessionStart {
            problem_order: problem_order.clone(),
            token_sha256: session.token_sha256.clone(),
        };
        self.emit(&mut session, None, body)?;
        registry
            .by_student
            .insert(request.student_id, session_id.clone());
        registry
            .sessions
            .insert(session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(SessionTicket {
            session_id,
            token,
            condition,
            problem_order,
        })
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        lock(&self.registry)
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    pub fn authorize(&self, session_id: &str, token: &str) -> Result<(), ServiceError> {
        let session = self.session(session_id)?;
        let expected = lock(&session).token_sha256.clone();
        let given = sha256_hex(token.as_bytes());
        // Compare every byte regardless of where the first mismatch is.
        let diff = expected
            .bytes()
            .zip(given.bytes())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b));
        if diff == 0 && expected.len() == given.len() {
            Ok(())
        } else {
            Err(ServiceError::Unauthorized)
        }
    }

    pub fn session_ids(&self) -> Vec<String> {
        lock(&self.registry).sessions.keys().cloned().collect()
    }

    pub fn snapshot(&self, session_id: &str) -> Result<SessionSnapshot, ServiceError> {
        let session = self.session(session_id)?;
        let snapshot = lock(&session).snapshot();
        Ok(snapshot)
    }

    fn emit(&self, session: &mut Session, question: Option<&str>, body: EventBody) -> Result<(), ServiceError> {
        let ts = self.clock.now_ms().max(session.last_ts);
        session.last_ts = ts;
        let event = SessionEvent {
            v: SCHEMA_VERSION,
            session_id: session.session_id.clone(),
            student_id: session.student_id.clone(),
            condition: session.condition,
            question_id: question.map(str::to_string),
            timestamp_ms: ts,
            body,
        };
        let mut sink = lock(&self.sink);
        if let Some(w) = sink.writer.as_mut() {
            w.append(&event)?;
        }
        sink.events.push(event);
        Ok(())
    }

    /// Runs `f` with the session locked and the question opened. A question
    /// touched for the first time gets an implicit `QuestionOpen` first.
    fn with_question<R>(
        &self,
        session_id: &str,
        problem_id: &str,
        f: impl FnOnce(&Self, &mut Session, &Problem) -> Result<R, ServiceError>,
    ) -> Result<R, ServiceError> {
        let handle = self.session(session_id)?;
        let mut session = lock(&handle);
        if !session.problem_order.iter().any(|p| p == problem_id) {
            return Err(ServiceError::UnknownProblem(problem_id.to_string()));
        }
        let problem = self.full_problem(problem_id)?;
        if !session.progress.get(problem_id).is_some_and(|p| p.opened) {
            self.emit(&mut session, Some(problem_id), EventBody::QuestionOpen)?;
            session.progress.entry(problem_id.to_string()).or_default().opened = true;
        }
        f(self, &mut session, &problem)
    }

    pub fn open_question(&self, session_id: &str, problem_id: &str) -> Result<ProblemSnapshot, ServiceError> {
        let handle = self.session(session_id)?;
        let mut session = lock(&handle);
        if !session.problem_order.iter().any(|p| p == problem_id) {
            return Err(ServiceError::UnknownProblem(problem_id.to_string()));
        }
        self.emit(&mut session, Some(problem_id), EventBody::QuestionOpen)?;
        session.progress.entry(problem_id.to_string()).or_default().opened = true;
        Ok(session.snapshot().problems.remove(problem_id).unwrap_or_default())
    }

    pub fn save_and_run(&self, session_id: &str, problem_id: &str, code: &str) -> Result<TestReport, ServiceError> {
        self.with_question(session_id, problem_id, |svc, s, problem| {
            let report = svc.runner.run_tests(code, &problem.tests, svc.settings.forge.limits)?;
            progress(s, problem_id).code = code.to_string();
            let body = EventBody::Run {
                code: code.to_string(),
                passed: report.passed(),
                total: report.results.len(),
            };
            svc.emit(s, Some(problem_id), body)?;
            Ok(report)
        })
    }

    /// Runs the tests and, the first time they all pass, completes the question.
    pub fn submit(&self, session_id: &str, problem_id: &str, code: &str) -> Result<SubmitResponse, ServiceError> {
        self.with_question(session_id, problem_id, |svc, s, problem| {
            let report = svc.runner.run_tests(code, &problem.tests, svc.settings.forge.limits)?;
            progress(s, problem_id).code = code.to_string();
            let body = EventBody::Submit {
                code: code.to_string(),
                passed: report.passed(),
                total: report.results.len(),
            };
            svc.emit(s, Some(problem_id), body)?;
            if report.all_passed && !progress(s, problem_id).completed {
                svc.emit(s, Some(problem_id), EventBody::QuestionComplete)?;
                progress(s, problem_id).completed = true;
            }
            let completed = progress(s, problem_id).completed;
            Ok(SubmitResponse { report, completed })
        })
    }

    fn forge(&self, problem: &Problem, code: &str, session_id: &str) -> Result<VerifiedSolution, ServiceError> {
        Ok(generate_solution(
            problem,
            code,
            session_id,
            self.provider.as_ref(),
            self.runner.as_ref(),
            self.settings.forge,
        )?)
    }

    /// The Help button. Both conditions get a solution personalized to
    /// `code`; PC sees it as a puzzle, CC sees the text. A PC student with
    /// an unfinished puzzle gets that puzzle back unchanged.
    pub fn request_help(&self, session_id: &str, problem_id: &str, code: &str) -> Result<HelpPayload, ServiceError> {
        self.with_question(session_id, problem_id, |svc, s, problem| {
            if s.condition == Condition::PC {
                let p = progress(s, problem_id);
                if let (Some(state), Some((provenance, attempts_used))) =
                    (p.puzzle.as_ref().filter(|st| !st.solved), p.last_help)
                {
                    return Ok(HelpPayload {
                        kind: HelpKind::Puzzle,
                        puzzle: Some(state.view()),
                        solution_text: None,
                        provenance,
                        attempts_used,
                    });
                }
            }
            let solution = svc.forge(problem, code, &s.session_id)?;
            let generation = progress(s, problem_id).generation + 1;
            let (payload, seed) = svc.present(s, problem_id, code, &solution, generation)?;
            let p = progress(s, problem_id);
            p.code = code.to_string();
            p.generation = generation;
            p.last_help = Some((solution.provenance, solution.attempts_used));
            let body = EventBody::HelpRequest {
                code: code.to_string(),
                help: payload.kind,
                provenance: solution.provenance,
                attempts_used: solution.attempts_used,
                closeness: solution.closeness,
                solution: solution.source,
                puzzle_seed: seed,
            };
            svc.emit(s, Some(problem_id), body)?;
            Ok(payload)
        })
    }

    /// Builds the condition-specific payload and installs the puzzle or solution.
    fn present(
        &self,
        s: &mut Session,
        problem_id: &str,
        code: &str,
        solution: &VerifiedSolution,
        generation: u32,
    ) -> Result<(HelpPayload, Option<u64>), ServiceError> {
        match s.condition {
            Condition::PC => {
                let seed = derive_puzzle_seed(self.settings.seed, &s.session_id, problem_id, generation);
                let puzzle = make_puzzle(solution, code, &self.settings.puzzle, seed)?;
                let state = PuzzleState::new(puzzle);
                let view = state.view();
                progress(s, problem_id).puzzle = Some(state);
                Ok((
                    HelpPayload {
                        kind: HelpKind::Puzzle,
                        puzzle: Some(view),
                        solution_text: None,
                        provenance: solution.provenance,
                        attempts_used: solution.attempts_used,
                    },
                    Some(seed),
                ))
            }
            Condition::CC => {
                progress(s, problem_id).solution = Some(solution.source.clone());
                Ok((
                    HelpPayload {
                        kind: HelpKind::FullSolution,
                        puzzle: None,
                        solution_text: Some(solution.source.clone()),
                        provenance: solution.provenance,
                        attempts_used: solution.attempts_used,
                    },
                    None,
                ))
            }
        }
    }

    /// Replaces the PC puzzle with one built from fresh code and a new seed.
    pub fn regenerate(&self, session_id: &str, problem_id: &str, code: &str) -> Result<HelpPayload, ServiceError> {
        self.with_question(session_id, problem_id, |svc, s, problem| {
            if s.condition != Condition::PC {
                return Err(ServiceError::WrongCondition(s.condition));
            }
            if progress(s, problem_id).generation == 0 {
                return Err(ServiceError::NoActivePuzzle(problem_id.to_string()));
            }
            let solution = svc.forge(problem, code, &s.session_id)?;
            let generation = progress(s, problem_id).generation + 1;
            let (payload, seed) = svc.present(s, problem_id, code, &solution, generation)?;
            let p = progress(s, problem_id);
            p.code = code.to_string();
            p.generation = generation;
            p.last_help = Some((solution.provenance, solution.attempts_used));
            let body = EventBody::Regenerate {
                code: code.to_string(),
                provenance: solution.provenance,
                attempts_used: solution.attempts_used,
                closeness: solution.closeness,
                solution: solution.source,
                puzzle_seed: seed.expect("PC payloads carry a seed"),
            };
            svc.emit(s, Some(problem_id), body)?;
            Ok(payload)
        })
    }

    fn with_puzzle<R>(
        &self,
        session_id: &str,
        problem_id: &str,
        f: impl FnOnce(&mut PuzzleState) -> Result<(R, EventBody), EngineError>,
    ) -> Result<R, ServiceError> {
        self.with_question(session_id, problem_id, |svc, s, _| {
            let state = progress(s, problem_id)
                .puzzle
                .as_mut()
                .ok_or_else(|| ServiceError::NoActivePuzzle(problem_id.to_string()))?;
            let (out, body) = f(state)?;
            svc.emit(s, Some(problem_id), body)?;
            Ok(out)
        })
    }

    pub fn puzzle_move(&self, session_id: &str, problem_id: &str, m: &Move) -> Result<PuzzleView, ServiceError> {
        self.with_puzzle(session_id, problem_id, |state| {
            state.apply_move(m)?;
            let body = EventBody::PuzzleMove {
                block_id: m.block_id.clone(),
                target: m.target.clone(),
            };
            Ok((state.view(), body))
        })
    }

    pub fn puzzle_check(&self, session_id: &str, problem_id: &str) -> Result<CheckResponse, ServiceError> {
        self.with_puzzle(session_id, problem_id, |state| {
            let feedback = state.check()?;
            let body = EventBody::PuzzleCheck {
                correct: feedback.correct,
                first_error_position: feedback.first_error_position,
            };
            Ok((
                CheckResponse {
                    feedback,
                    puzzle: state.view(),
                },
                body,
            ))
        })
    }

    pub fn puzzle_help_me(&self, session_id: &str, problem_id: &str) -> Result<AdaptResponse, ServiceError> {
        let min_attempts = self.settings.min_attempts;
        self.with_puzzle(session_id, problem_id, |state| {
            let action = state.help_me(min_attempts)?;
            let body = EventBody::Adaptation { action: action.clone() };
            Ok((
                AdaptResponse {
                    action,
                    puzzle: state.view(),
                },
                body,
            ))
        })
    }

    /// Moves that would solve the active puzzle from its current arrangement.
    /// For simulated students and tests; not exposed over HTTP. Logs nothing.
    pub fn puzzle_solution_script(&self, session_id: &str, problem_id: &str) -> Result<Vec<Move>, ServiceError> {
        let handle = self.session(session_id)?;
        let session = lock(&handle);
        session
            .progress
            .get(problem_id)
            .and_then(|p| p.puzzle.as_ref())
            .map(PuzzleState::solution_script)
            .ok_or_else(|| ServiceError::NoActivePuzzle(problem_id.to_string()))
    }

    /// Text for the copy button: the assembled puzzle (PC, once solved) or
    /// the latest full solution (CC). The server never edits student code.
    pub fn copy_answer(&self, session_id: &str, problem_id: &str) -> Result<String, ServiceError> {
        self.with_question(session_id, problem_id, |svc, s, _| {
            let condition = s.condition;
            let p = progress(s, problem_id);
            let text = match condition {
                Condition::PC => p
                    .puzzle
                    .as_ref()
                    .ok_or_else(|| ServiceError::NoActivePuzzle(problem_id.to_string()))?
                    .assemble()?,
                Condition::CC => p
                    .solution
                    .clone()
                    .ok_or_else(|| ServiceError::NoSolutionYet(problem_id.to_string()))?,
            };
            svc.emit(s, Some(problem_id), EventBody::CopyAnswer { text: text.clone() })?;
            Ok(text)
        })
    }

    // ---- telemetry and analytics ----

    pub fn events(&self) -> Vec<SessionEvent> {
        lock(&self.sink).events.clone()
    }

    pub fn engagement(&self) -> Result<Vec<EngagementRecord>, ServiceError> {
        Ok(engagement_records(
            &self.events(),
            self.settings.timing,
            self.settings.fast_finisher_minutes,
        )?)
    }

    pub fn report(&self, metric: Metric) -> Result<StatReport, ServiceError> {
        Ok(condition_report(&self.engagement()?, metric)?)
    }

    /// Rebuilds sessions from a log. Puzzles are regenerated from the logged
    /// solution, code and seed, then the logged moves are applied again.
    fn replay(&self, events: Vec<SessionEvent>) -> Result<(), ServiceError> {
        for (index, e) in events.iter().enumerate() {
            let fail = |msg: String| ServiceError::Replay(format!("event {index}: {msg}"));
            if let EventBody::SessionStart {
                problem_order,
                token_sha256,
            } = &e.body
            {
                // Keep the generator in step with the original run.
                SessionDraw::take(&mut lock(&self.rng));
                let session = Session {
                    session_id: e.session_id.clone(),
                    student_id: e.student_id.clone(),
                    condition: e.condition,
                    problem_order: problem_order.clone(),
                    token_sha256: token_sha256.clone(),
                    created_at_ms: e.timestamp_ms,
                    last_ts: e.timestamp_ms,
                    progress: BTreeMap::new(),
                };
                let mut registry = lock(&self.registry);
                registry
                    .by_student
                    .insert(e.student_id.clone(), e.session_id.clone());
                registry
                    .sessions
                    .insert(e.session_id.clone(), Arc::new(Mutex::new(session)));
                continue;
            }
            let handle = self
                .session(&e.session_id)
                .map_err(|_| fail(format!("session {} has no start", e.session_id)))?;
            let mut s = lock(&handle);
            s.last_ts = s.last_ts.max(e.timestamp_ms);
            let Some(q) = e.question_id.as_deref() else {
                continue;
            };
            let condition = s.condition;
            let p = progress(&mut s, q);
            match &e.body {
                EventBody::SessionStart { .. } => unreachable!(),
                EventBody::QuestionOpen => p.opened = true,
                EventBody::Run { code, .. } | EventBody::Submit { code, .. } => p.code = code.clone(),
                EventBody::QuestionComplete => p.completed = true,
                EventBody::HelpRequest {
                    code,
                    solution,
                    puzzle_seed,
                    provenance,
                    attempts_used,
                    ..
                } => {
                    p.code = code.clone();
                    p.generation += 1;
                    p.last_help = Some((*provenance, *attempts_used));
                    match (condition, puzzle_seed) {
                        (Condition::PC, Some(seed)) => {
                            p.puzzle = Some(self.rebuild_puzzle(solution, code, *seed).map_err(fail)?);
                        }
                        (Condition::CC, None) => p.solution = Some(solution.clone()),
                        _ => return Err(fail("help payload does not match the condition".into())),
                    }
                }
                EventBody::Regenerate {
                    code,
                    solution,
                    puzzle_seed,
                    provenance,
                    attempts_used,
                    ..
                } => {
                    p.code = code.clone();
                    p.generation += 1;
                    p.last_help = Some((*provenance, *attempts_used));
                    p.puzzle = Some(self.rebuild_puzzle(solution, code, *puzzle_seed).map_err(fail)?);
                }
                EventBody::PuzzleMove { block_id, target } => {
                    let m = Move {
                        block_id: block_id.clone(),
                        target: target.clone(),
                    };
                    puzzle_of(p)
                        .map_err(fail)?
                        .apply_move(&m)
                        .map_err(|e| fail(e.to_string()))?;
                }
                EventBody::PuzzleCheck { correct, .. } => {
                    let feedback = puzzle_of(p).map_err(fail)?.check().map_err(|e| fail(e.to_string()))?;
                    if feedback.correct != *correct {
                        return Err(fail("check result differs from the log".into()));
                    }
                }
                EventBody::Adaptation { action } => {
                    let again = puzzle_of(p)
                        .map_err(fail)?
                        .help_me(0)
                        .map_err(|e| fail(e.to_string()))?;
                    if &again != action {
                        return Err(fail("adaptation differs from the log".into()));
                    }
                }
                EventBody::CopyAnswer { .. } => {}
            }
        }
        lock(&self.sink).events = events;
        Ok(())
    }

    fn rebuild_puzzle(&self, solution: &str, code: &str, seed: u64) -> Result<PuzzleState, String> {
        let verified = VerifiedSolution {
            source: solution.to_string(),
            passed_all_tests: true,
            provenance: Provenance::Generated,
            attempts_used: 0,
            closeness: 0,
        };
        make_puzzle(&verified, code, &self.settings.puzzle, seed)
            .map(PuzzleState::new)
            .map_err(|e| e.to_string())
    }
}

fn progress<'a>(s: &'a mut Session, problem_id: &str) -> &'a mut Progress {
    s.progress.entry(problem_id.to_string()).or_default()
}

fn puzzle_of(p: &mut Progress) -> Result<&mut PuzzleState, String> {
    p.puzzle.as_mut().ok_or_else(|| "puzzle event without a puzzle".to_string())
}
