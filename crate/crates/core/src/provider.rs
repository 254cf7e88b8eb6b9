//! Text-generation providers.
//!
//! A provider answers one prompt with one text response. [`HttpProvider`]
//! speaks the common chat-completions JSON shape; [`ScriptedProvider`] replays
//! canned responses keyed by `(problem id, attempt number)` and is what the
//! tests and simulations use.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::ProblemBank;
use crate::solution_forge::PromptBundle;

pub const DEFAULT_TOKEN_ENV: &str = "PARSONS_PROVIDER_TOKEN";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider transport failure: {0}")]
    Transport(String),
    #[error("provider returned an unusable response: {0}")]
    BadResponse(String),
}

/// Synchronous request/response text generation. `attempt` is 1-based.
pub trait ProviderPort: Send + Sync {
    fn complete(&self, prompt: &PromptBundle, attempt: u32) -> Result<String, ProviderError>;
}

impl<T: ProviderPort + ?Sized> ProviderPort for std::sync::Arc<T> {
    fn complete(&self, prompt: &PromptBundle, attempt: u32) -> Result<String, ProviderError> {
        (**self).complete(prompt, attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_provider_timeout")]
    pub timeout_ms: u64,
}

fn default_model() -> String {
    "gpt-4".into()
}

fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.into()
}

fn default_provider_timeout() -> u64 {
    60_000
}

impl HttpProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpProviderConfig {
            endpoint: endpoint.into(),
            model: default_model(),
            token_env: default_token_env(),
            temperature: 0.0,
            timeout_ms: default_provider_timeout(),
        }
    }
}

/// Chat-completions client: posts `{model, temperature, messages}` and reads
/// `choices[0].message.content`.
pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        HttpProvider { config, agent }
    }

    pub fn request_body(&self, prompt: &PromptBundle, attempt: u32) -> serde_json::Value {
        serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                { "role": "system", "content": prompt.system_text },
                { "role": "user", "content": prompt.user_text },
            ],
            "metadata": {
                "problem_id": prompt.problem_id,
                "session_id": prompt.session_id,
                "attempt": attempt,
            },
        })
    }
}

impl ProviderPort for HttpProvider {
    fn complete(&self, prompt: &PromptBundle, attempt: u32) -> Result<String, ProviderError> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Ok(token) = std::env::var(&self.config.token_env) {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(self.request_body(prompt, attempt))
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let body: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| ProviderError::BadResponse("missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Scripted {
    Text(String),
    Failure,
}

/// Replays canned responses.
///
/// Lookup order for a request: the exact `(problem, attempt)` entry, then the
/// problem's default entry; anything else is a transport failure.
///
/// On disk, responses live at `<dir>/<problem id>/<attempt>.txt` and
/// `<dir>/<problem id>/default.txt`; an `<attempt>.fail` file scripts a
/// transport failure for that attempt.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    responses: BTreeMap<(String, u32), Scripted>,
    defaults: BTreeMap<String, String>,
    calls: Mutex<Vec<(String, u32)>>,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, problem_id: &str, attempt: u32, text: impl Into<String>) -> Self {
        self.responses
            .insert((problem_id.to_string(), attempt), Scripted::Text(text.into()));
        self
    }

    pub fn with_failure(mut self, problem_id: &str, attempt: u32) -> Self {
        self.responses
            .insert((problem_id.to_string(), attempt), Scripted::Failure);
        self
    }

    pub fn with_default(mut self, problem_id: &str, text: impl Into<String>) -> Self {
        self.defaults.insert(problem_id.to_string(), text.into());
        self
    }

    /// Answers every problem with its own reference solution, fenced.
    pub fn echo_references(bank: &ProblemBank) -> Self {
        bank.problems.iter().fold(Self::new(), |p, problem| {
            p.with_default(
                &problem.id,
                format!("```python\n{}\n```", problem.reference_solution.trim_end()),
            )
        })
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut provider = Self::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let problem_id = entry.file_name().to_string_lossy().into_owned();
            for file in std::fs::read_dir(entry.path())? {
                let path = file?.path();
                let (Some(stem), Some(ext)) = (
                    path.file_stem().and_then(|s| s.to_str()),
                    path.extension().and_then(|s| s.to_str()),
                ) else {
                    continue;
                };
                match (stem.parse::<u32>(), ext) {
                    (Ok(n), "txt") => {
                        provider = provider.with_response(&problem_id, n, std::fs::read_to_string(&path)?)
                    }
                    (Ok(n), "fail") => provider = provider.with_failure(&problem_id, n),
                    (Err(_), "txt") if stem == "default" => {
                        provider = provider.with_default(&problem_id, std::fs::read_to_string(&path)?)
                    }
                    _ => {}
                }
            }
        }
        Ok(provider)
    }

    /// Every `(problem id, attempt)` requested so far, in order.
    pub fn calls(&self) -> Vec<(String, u32)> {
        self.calls.lock().unwrap().clone()
    }
}

impl ProviderPort for ScriptedProvider {
    fn complete(&self, prompt: &PromptBundle, attempt: u32) -> Result<String, ProviderError> {
        self.calls
            .lock()
            .unwrap()
            .push((prompt.problem_id.clone(), attempt));
        match self.responses.get(&(prompt.problem_id.clone(), attempt)) {
            Some(Scripted::Text(t)) => Ok(t.clone()),
            Some(Scripted::Failure) => Err(ProviderError::Transport(format!(
                "scripted failure for {} attempt {attempt}",
                prompt.problem_id
            ))),
            None => self.defaults.get(&prompt.problem_id).cloned().ok_or_else(|| {
                ProviderError::Transport(format!(
                    "no scripted response for {} attempt {attempt}",
                    prompt.problem_id
                ))
            }),
        }
    }
}
