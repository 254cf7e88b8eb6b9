//! Service configuration: a TOML file, then environment overrides.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! data_dir = "data"
//! seed = 7
//!
//! [runner]
//! command = "python3 -I"
//!
//! [provider]
//! kind = "http"
//! endpoint = "http://localhost:8000/v1/chat/completions"
//!
//! [puzzle]
//! min_attempts = 3
//! distractor_cap = 3
//! ```
//!
//! Environment variables win over the file: `PARSONS_BIND`, `PARSONS_DATA_DIR`,
//! `PARSONS_SEED`, `PARSONS_RUNNER`, `PARSONS_PROVIDER_ENDPOINT` (switches the
//! provider to `http`), `PARSONS_MIN_ATTEMPTS`, `PARSONS_DISTRACTOR_CAP`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use parsons_core::exec_harness::{HarnessConfig, Limits};
use parsons_core::problem::ProblemBank;
use parsons_core::provider::{HttpProvider, HttpProviderConfig, ProviderPort, ScriptedProvider};
use parsons_core::puzzle_engine::DEFAULT_MIN_ATTEMPTS;
use parsons_core::puzzle_gen::{PuzzleConfig, DEFAULT_DISTRACTOR_CAP};
use parsons_core::solution_forge::{ForgeConfig, DEFAULT_RETRY_BUDGET};
use parsons_core::telemetry::{TimingOptions, DEFAULT_FAST_FINISHER_MINUTES};
use serde::Deserialize;
use thiserror::Error;

use crate::service::{ServiceSettings, TokenMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: &'static str, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    bind: Option<String>,
    data_dir: Option<PathBuf>,
    seed: Option<u64>,
    admin_token_env: Option<String>,
    #[serde(default)]
    runner: RawRunner,
    #[serde(default)]
    provider: RawProvider,
    #[serde(default)]
    puzzle: RawPuzzle,
    #[serde(default)]
    analytics: RawAnalytics,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunner {
    command: Option<String>,
    max_concurrency: Option<usize>,
    timeout_ms: Option<u64>,
    memory_mb: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProvider {
    kind: Option<String>,
    endpoint: Option<String>,
    model: Option<String>,
    token_env: Option<String>,
    temperature: Option<f64>,
    timeout_ms: Option<u64>,
    script_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPuzzle {
    min_attempts: Option<u32>,
    distractor_cap: Option<usize>,
    retry_budget: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalytics {
    fast_finisher_minutes: Option<f64>,
    idle_cap_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderChoice {
    Http(HttpProviderConfig),
    /// Responses from a directory; `None` answers with each problem's reference solution.
    Scripted(Option<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: Option<PathBuf>,
    pub harness: HarnessConfig,
    pub provider: ProviderChoice,
    pub settings: ServiceSettings,
    /// Environment variable holding the token for analytics endpoints.
    pub admin_token_env: Option<String>,
}

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

fn parse_env<T: std::str::FromStr>(key: &'static str, value: String) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key,
        message: e.to_string(),
    })
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, |k| std::env::var(k).ok())
    }

    /// Parses `text` and applies overrides looked up through `env`.
    pub fn from_toml_str(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;

        if let Some(v) = env("PARSONS_BIND") {
            raw.bind = Some(v);
        }
        if let Some(v) = env("PARSONS_DATA_DIR") {
            raw.data_dir = Some(v.into());
        }
        if let Some(v) = env("PARSONS_SEED") {
            raw.seed = Some(parse_env("seed", v)?);
        }
        if let Some(v) = env("PARSONS_RUNNER") {
            raw.runner.command = Some(v);
        }
        if let Some(v) = env("PARSONS_PROVIDER_ENDPOINT") {
            raw.provider.kind = Some("http".into());
            raw.provider.endpoint = Some(v);
        }
        if let Some(v) = env("PARSONS_MIN_ATTEMPTS") {
            raw.puzzle.min_attempts = Some(parse_env("puzzle.min_attempts", v)?);
        }
        if let Some(v) = env("PARSONS_DISTRACTOR_CAP") {
            raw.puzzle.distractor_cap = Some(parse_env("puzzle.distractor_cap", v)?);
        }

        let command = raw
            .runner
            .command
            .filter(|c| !c.trim().is_empty())
            .ok_or(ConfigError::MissingKey("runner.command"))?;
        let mut harness = HarnessConfig::with_runner_command(&command);
        if let Some(n) = raw.runner.max_concurrency {
            if n == 0 {
                return Err(ConfigError::InvalidValue {
                    key: "runner.max_concurrency",
                    message: "must be at least 1".into(),
                });
            }
            harness.max_concurrency = n;
        }
        let mut limits = Limits::default();
        if let Some(t) = raw.runner.timeout_ms {
            limits.timeout_ms = t;
        }
        limits.memory_hint_mb = raw.runner.memory_mb;

        let provider = match raw.provider.kind.as_deref().unwrap_or("scripted") {
            "http" => {
                let endpoint = raw
                    .provider
                    .endpoint
                    .ok_or(ConfigError::MissingKey("provider.endpoint"))?;
                let mut http = HttpProviderConfig::new(endpoint);
                if let Some(m) = raw.provider.model {
                    http.model = m;
                }
                if let Some(t) = raw.provider.token_env {
                    http.token_env = t;
                }
                if let Some(t) = raw.provider.temperature {
                    http.temperature = t;
                }
                if let Some(t) = raw.provider.timeout_ms {
                    http.timeout_ms = t;
                }
                ProviderChoice::Http(http)
            }
            "scripted" => ProviderChoice::Scripted(raw.provider.script_dir),
            other => {
                return Err(ConfigError::InvalidValue {
                    key: "provider.kind",
                    message: format!("expected `http` or `scripted`, got `{other}`"),
                })
            }
        };

        let retry_budget = raw.puzzle.retry_budget.unwrap_or(DEFAULT_RETRY_BUDGET);
        if retry_budget == 0 {
            return Err(ConfigError::InvalidValue {
                key: "puzzle.retry_budget",
                message: "must be at least 1".into(),
            });
        }
        let fast_finisher_minutes = raw
            .analytics
            .fast_finisher_minutes
            .unwrap_or(DEFAULT_FAST_FINISHER_MINUTES);
        if !(fast_finisher_minutes > 0.0) {
            return Err(ConfigError::InvalidValue {
                key: "analytics.fast_finisher_minutes",
                message: "must be positive".into(),
            });
        }

        let settings = ServiceSettings {
            seed: raw.seed.unwrap_or(0),
            min_attempts: raw.puzzle.min_attempts.unwrap_or(DEFAULT_MIN_ATTEMPTS),
            puzzle: PuzzleConfig {
                distractor_cap: raw.puzzle.distractor_cap.unwrap_or(DEFAULT_DISTRACTOR_CAP),
                ..PuzzleConfig::default()
            },
            forge: ForgeConfig { retry_budget, limits },
            timing: TimingOptions {
                idle_cap_ms: raw.analytics.idle_cap_ms,
            },
            fast_finisher_minutes,
            tokens: TokenMode::Random,
        };

        Ok(ServiceConfig {
            bind: raw.bind.unwrap_or_else(|| DEFAULT_BIND.to_string()),
            data_dir: raw.data_dir,
            harness,
            provider,
            settings,
            admin_token_env: raw.admin_token_env,
        })
    }

    pub fn build_provider(&self, bank: &ProblemBank) -> Result<Arc<dyn ProviderPort>, ConfigError> {
        Ok(match &self.provider {
            ProviderChoice::Http(c) => Arc::new(HttpProvider::new(c.clone())),
            ProviderChoice::Scripted(None) => Arc::new(ScriptedProvider::echo_references(bank)),
            ProviderChoice::Scripted(Some(dir)) => {
                Arc::new(ScriptedProvider::from_dir(dir).map_err(|source| ConfigError::Io {
                    path: dir.clone(),
                    source,
                })?)
            }
        })
    }
}
