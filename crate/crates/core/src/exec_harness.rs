//! Runs code against unit tests in external interpreter processes.
//!
//! Each test gets a fresh process started in its own temporary working
//! directory with an empty environment. The directory holds:
//!
//! - `solution.py`: the code under test
//! - `tests.json`: the submitted test cases
//! - `driver.py`: loads the solution, runs one test, writes one result line
//!
//! The driver writes `<id>\t<status>\t<detail>` to `result.tsv`; the harness
//! parses that line. A child that outlives `timeout_ms` is killed and its test
//! reported as `Error` with detail `timeout`.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::problem::{validate_tests, TestCase};

const DRIVER: &str = include_str!("driver.py");

pub const RUNNER_ENV: &str = "PARSONS_RUNNER";
pub const DEFAULT_TIMEOUT_MS: u64 = 5000;
pub const DEFAULT_MAX_CONCURRENCY: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("runner `{0}` not found")]
    RunnerMissing(String),
    #[error("malformed test: {0}")]
    MalformedTest(String),
    #[error("harness i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for ExecError {
    fn from(e: std::io::Error) -> Self {
        ExecError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_id: String,
    pub status: TestStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestReport {
    pub results: Vec<TestResult>,
    pub all_passed: bool,
    pub duration_ms: u64,
}

impl TestReport {
    pub fn passed(&self) -> usize {
        self.results
            .iter()
            .filter(|r| r.status == TestStatus::Pass)
            .count()
    }

    pub fn statuses(&self) -> Vec<TestStatus> {
        self.results.iter().map(|r| r.status).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub timeout_ms: u64,
    /// Address-space cap for the child, in MiB.
    pub memory_hint_mb: Option<u64>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            memory_hint_mb: None,
        }
    }
}

/// Anything that can execute code against tests.
pub trait TestRunner: Send + Sync {
    fn run_tests(&self, source: &str, tests: &[TestCase], limits: Limits) -> Result<TestReport, ExecError>;
}

impl<T: TestRunner + ?Sized> TestRunner for Arc<T> {
    fn run_tests(&self, source: &str, tests: &[TestCase], limits: Limits) -> Result<TestReport, ExecError> {
        (**self).run_tests(source, tests, limits)
    }
}

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessConfig {
    /// Interpreter command line, e.g. `["python3", "-I"]`.
    pub runner: Vec<String>,
    pub max_concurrency: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            runner: vec!["python3".into(), "-I".into()],
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
        }
    }
}

impl HarnessConfig {
    /// Parses a whitespace-separated command line.
    pub fn with_runner_command(command: &str) -> Self {
        HarnessConfig {
            runner: command.split_whitespace().map(String::from).collect(),
            ..Self::default()
        }
    }

    /// Default config, with the runner taken from `PARSONS_RUNNER` when set.
    pub fn from_env() -> Self {
        match std::env::var(RUNNER_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Self::with_runner_command(&cmd),
            _ => Self::default(),
        }
    }
}

/// Process-per-test harness. Cloning shares the concurrency cap.
#[derive(Debug, Clone)]
pub struct ExecHarness {
    config: HarnessConfig,
    slots: Arc<Semaphore>,
}

impl ExecHarness {
    pub fn new(config: HarnessConfig) -> Self {
        let slots = Arc::new(Semaphore::new(config.max_concurrency));
        ExecHarness { config, slots }
    }

    pub fn config(&self) -> &HarnessConfig {
        &self.config
    }

    fn resolve_runner(&self) -> Result<PathBuf, ExecError> {
        let program = self
            .config
            .runner
            .first()
            .ok_or_else(|| ExecError::RunnerMissing(String::new()))?;
        find_program(program).ok_or_else(|| ExecError::RunnerMissing(program.clone()))
    }

    fn run_one(
        &self,
        program: &Path,
        source: &str,
        tests_json: &str,
        index: usize,
        test_id: &str,
        limits: Limits,
    ) -> Result<TestResult, ExecError> {
        let dir = tempfile::Builder::new().prefix("parsons-run-").tempdir()?;
        std::fs::write(dir.path().join("solution.py"), source)?;
        std::fs::write(dir.path().join("tests.json"), tests_json)?;
        std::fs::write(dir.path().join("driver.py"), DRIVER)?;
        let result_path = dir.path().join("result.tsv");

        let _permit = self.slots.acquire();
        let mut child = Command::new(program)
            .args(&self.config.runner[1..])
            .arg("driver.py")
            .arg("tests.json")
            .arg(index.to_string())
            .arg("result.tsv")
            .current_dir(dir.path())
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()?;

        let status = match child.wait_timeout(Duration::from_millis(limits.timeout_ms))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Ok(TestResult {
                    test_id: test_id.to_string(),
                    status: TestStatus::Error,
                    detail: "timeout".into(),
                });
            }
        };

        let line = std::fs::read_to_string(&result_path).unwrap_or_default();
        Ok(parse_result_line(line.lines().next().unwrap_or(""), test_id).unwrap_or_else(|| TestResult {
            test_id: test_id.to_string(),
            status: TestStatus::Error,
            detail: format!("runner exited without a result ({status})"),
        }))
    }
}

impl Default for ExecHarness {
    fn default() -> Self {
        ExecHarness::new(HarnessConfig::default())
    }
}

impl TestRunner for ExecHarness {
    fn run_tests(&self, source: &str, tests: &[TestCase], limits: Limits) -> Result<TestReport, ExecError> {
        validate_tests(tests).map_err(ExecError::MalformedTest)?;
        let program = self.resolve_runner()?;
        let started = Instant::now();

        let tests_json = serde_json::json!({
            "memory_mb": limits.memory_hint_mb,
            "tests": tests,
        })
        .to_string();

        let results: Vec<Result<TestResult, ExecError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = tests
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let (program, tests_json) = (&program, &tests_json);
                    scope.spawn(move || self.run_one(program, source, tests_json, i, &t.id, limits))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("test thread panicked")).collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let all_passed = results.iter().all(|r| r.status == TestStatus::Pass);
        Ok(TestReport {
            results,
            all_passed,
            duration_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Parses one `<id>\t<status>\t<detail>` line; the id must match.
pub fn parse_result_line(line: &str, expected_id: &str) -> Option<TestResult> {
    let mut parts = line.splitn(3, '\t');
    let id = parts.next()?;
    let status = match parts.next()? {
        "pass" => TestStatus::Pass,
        "fail" => TestStatus::Fail,
        "error" => TestStatus::Error,
        _ => return None,
    };
    let detail = parts.next().unwrap_or("").trim_end().to_string();
    (id == expected_id).then(|| TestResult {
        test_id: id.to_string(),
        status,
        detail,
    })
}

fn find_program(program: &str) -> Option<PathBuf> {
    let candidate = Path::new(program);
    if program.contains(std::path::MAIN_SEPARATOR) {
        return candidate.is_file().then(|| candidate.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|p| p.is_file())
}
