//! The `parsons` operator tool: serve the API, ingest problem banks,
//! simulate scripted cohorts and report on event logs.
//!
//! Each subcommand is a plain function here so tests can call it without a
//! process boundary.

pub mod cohort;
pub mod script;
pub mod simulate;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use parsons_core::analytics::{condition_report, Metric, StatReport, StatsError};
use parsons_core::exec_harness::{ExecHarness, TestRunner};
use parsons_core::problem::{BankError, ProblemBank};
use parsons_core::provider::{ProviderPort, ScriptedProvider};
use parsons_core::telemetry::{
    engagement_records, read_log, TelemetryError, TimingOptions, DEFAULT_FAST_FINISHER_MINUTES,
};
use parsons_service::http::{router, AppState};
use parsons_service::{
    ConfigError, IngestReport, ScaffoldService, ServiceConfig, ServiceError, ServiceParts, ServiceSettings, SystemClock,
};

pub use script::{ScriptError, SimScript};
pub use simulate::{MemoRunner, SimError, SimOutcome, SimSummary, Simulator};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Log(#[from] TelemetryError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Script(_) | CliError::Bank(_) => 4,
            CliError::Log(_) => 5,
            CliError::Stats(_) => 6,
            CliError::Simulation(_) | CliError::Service(_) => 7,
            CliError::Io { .. } => 8,
        }
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn runner_for(config: Option<&ServiceConfig>) -> ExecHarness {
    match config {
        Some(c) => ExecHarness::new(c.harness.clone()),
        None => ExecHarness::default(),
    }
}

/// Verifies a bank and stores the accepted problems in the data directory.
pub fn cmd_ingest(config: &ServiceConfig, bank_path: &Path) -> Result<IngestReport, CliError> {
    if config.data_dir.is_none() {
        return Err(CliError::Usage("ingest needs `data_dir` in the config".into()));
    }
    let service = open_service(config)?;
    Ok(service.ingest_path(bank_path)?)
}

fn open_service(config: &ServiceConfig) -> Result<ScaffoldService, CliError> {
    if let Some(dir) = &config.data_dir {
        std::fs::create_dir_all(dir).map_err(io(format!("cannot create {}", dir.display())))?;
    }
    let existing = match &config.data_dir {
        Some(dir) if dir.join(parsons_service::service::PROBLEMS_FILE).exists() => {
            ProblemBank::load(dir.join(parsons_service::service::PROBLEMS_FILE))?
        }
        _ => ProblemBank::default(),
    };
    let provider = config.build_provider(&existing)?;
    Ok(ScaffoldService::open(ServiceParts {
        bank: ProblemBank::default(),
        provider,
        runner: Arc::new(runner_for(Some(config))),
        clock: Arc::new(SystemClock),
        settings: config.settings,
        data_dir: config.data_dir.clone(),
    })?)
}

/// Runs the HTTP API until Ctrl-C. `ready` receives the bound address.
pub async fn cmd_serve(
    config: ServiceConfig,
    ready: impl FnOnce(std::net::SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), CliError> {
    let admin_token = match &config.admin_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| {
            CliError::Config(ConfigError::InvalidValue {
                key: "admin_token_env",
                message: format!("environment variable `{var}` is not set"),
            })
        })?),
        None => None,
    };
    let service = tokio::task::block_in_place(|| open_service(&config))?;
    let app = router(AppState {
        service: Arc::new(service),
        admin_token,
    });
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(io(format!("cannot bind {}", config.bind)))?;
    let addr = listener.local_addr().map_err(io("no local address"))?;
    ready(addr);
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(io("server failed"))?;
    // Every append is flushed as it happens, so there is nothing left to write.
    Ok(())
}

/// Where a simulation gets its problems, model and settings from.
pub struct SimInputs {
    pub bank: ProblemBank,
    pub provider: Arc<dyn ProviderPort>,
    pub runner: Arc<dyn TestRunner>,
    pub settings: ServiceSettings,
}

impl SimInputs {
    /// Problems from `bank_path` when given, else from the config's data
    /// directory. Without a config the model answers with references.
    pub fn resolve(config: Option<&ServiceConfig>, bank_path: Option<&Path>) -> Result<Self, CliError> {
        let bank_file: PathBuf = match (bank_path, config.and_then(|c| c.data_dir.as_ref())) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(dir)) => dir.join(parsons_service::service::PROBLEMS_FILE),
            (None, None) => {
                return Err(CliError::Usage(
                    "simulate needs --bank or a config whose data_dir holds ingested problems".into(),
                ))
            }
        };
        let bank = ProblemBank::load(&bank_file)?;
        let provider: Arc<dyn ProviderPort> = match config {
            Some(c) => c.build_provider(&bank)?,
            None => Arc::new(ScriptedProvider::echo_references(&bank)),
        };
        Ok(SimInputs {
            runner: Arc::new(MemoRunner::new(runner_for(config))),
            settings: config.map(|c| c.settings).unwrap_or_default(),
            bank,
            provider,
        })
    }

    pub fn simulator(&self) -> Simulator {
        Simulator {
            bank: self.bank.clone(),
            provider: self.provider.clone(),
            runner: self.runner.clone(),
            settings: self.settings,
        }
    }
}

/// Plays a script and writes its event log to `out`.
pub fn cmd_simulate(inputs: &SimInputs, script: &SimScript, out: &Path) -> Result<SimSummary, CliError> {
    let outcome = inputs.simulator().run(script)?;
    outcome.write_log(out)?;
    Ok(outcome.summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub metric: Metric,
    pub timing: TimingOptions,
    pub fast_finisher_minutes: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            metric: Metric::PracticeTime,
            timing: TimingOptions::default(),
            fast_finisher_minutes: DEFAULT_FAST_FINISHER_MINUTES,
        }
    }
}

/// Condition report for one metric of a log file.
pub fn cmd_report(log_path: &Path, options: ReportOptions) -> Result<StatReport, CliError> {
    let log = read_log(log_path)?;
    let records = engagement_records(&log, options.timing, options.fast_finisher_minutes)?;
    Ok(condition_report(&records, options.metric)?)
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
