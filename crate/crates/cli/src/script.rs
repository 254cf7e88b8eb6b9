//! Simulation scripts: who the students are and what they do, when.
//!
//! Times are milliseconds after the script's `start_ms`. Steps of all
//! students are merged into one timeline before they are played.

use std::collections::BTreeSet;
use std::path::Path;

use parsons_core::telemetry::Condition;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("script does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("student `{student}`: {message}")]
    Invalid { student: String, message: String },
    #[error("script lists student `{0}` twice")]
    DuplicateStudent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimScript {
    /// Service seed. The command line may override it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start_ms: u64,
    pub students: Vec<StudentScript>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentScript {
    pub student_id: String,
    /// Drawn by the service when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    #[serde(default)]
    pub questions: Vec<QuestionScript>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionScript {
    pub problem_id: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Open,
    /// Replaces the editor contents.
    Write { code: String },
    Run,
    Help,
    /// Moves the tray block at `tray_index` into the area at `position`.
    Move { tray_index: usize, position: usize },
    /// Moves the area block at `area_index` back to the tray.
    Unplace { area_index: usize },
    Check,
    HelpMe,
    Regenerate,
    /// Finishes the active puzzle with the fewest moves, `step_ms` apart,
    /// then checks it.
    Solve {
        #[serde(default = "default_step_ms")]
        step_ms: u64,
    },
    /// Copies the answer into the editor.
    Copy,
    Submit,
}

fn default_step_ms() -> u64 {
    2_000
}

impl Action {
    /// Actions that only make sense with a puzzle on screen.
    pub fn needs_puzzle(&self) -> bool {
        matches!(
            self,
            Action::Move { .. }
                | Action::Unplace { .. }
                | Action::Check
                | Action::HelpMe
                | Action::Regenerate
                | Action::Solve { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Action::Open => "open",
            Action::Write { .. } => "write",
            Action::Run => "run",
            Action::Help => "help",
            Action::Move { .. } => "move",
            Action::Unplace { .. } => "unplace",
            Action::Check => "check",
            Action::HelpMe => "help_me",
            Action::Regenerate => "regenerate",
            Action::Solve { .. } => "solve",
            Action::Copy => "copy",
            Action::Submit => "submit",
        }
    }
}

impl SimScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let script: SimScript = serde_json::from_str(&text)?;
        script.validate()?;
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scripts always serialize")
    }

    /// Unique students, time-ordered questions, and puzzle actions only for
    /// students known to be in PC.
    pub fn validate(&self) -> Result<(), ScriptError> {
        let mut seen = BTreeSet::new();
        for s in &self.students {
            let invalid = |message: String| ScriptError::Invalid {
                student: s.student_id.clone(),
                message,
            };
            if s.student_id.trim().is_empty() {
                return Err(invalid("empty student id".into()));
            }
            if !seen.insert(s.student_id.as_str()) {
                return Err(ScriptError::DuplicateStudent(s.student_id.clone()));
            }
            for q in &s.questions {
                if let Some(w) = q.steps.windows(2).find(|w| w[1].at_ms < w[0].at_ms) {
                    return Err(invalid(format!(
                        "{}: step at {} ms comes after one at {} ms",
                        q.problem_id, w[1].at_ms, w[0].at_ms
                    )));
                }
                if let Some(step) = q.steps.iter().find(|st| st.action.needs_puzzle()) {
                    match s.condition {
                        Some(Condition::PC) => {}
                        Some(Condition::CC) => {
                            return Err(invalid(format!(
                                "{}: `{}` is a puzzle action but the student is CC",
                                q.problem_id,
                                step.action.name()
                            )))
                        }
                        None => {
                            return Err(invalid(format!(
                                "{}: `{}` is a puzzle action, so the condition must be given",
                                q.problem_id,
                                step.action.name()
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Every step as `(time, student index, question index, step index)`,
    /// in the order they are played.
    pub fn timeline(&self) -> Vec<(u64, usize, usize, usize)> {
        let mut out: Vec<_> = self
            .students
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                s.questions.iter().enumerate().flat_map(move |(qi, q)| {
                    q.steps
                        .iter()
                        .enumerate()
                        .map(move |(k, st)| (self.start_ms + st.at_ms, si, qi, k))
                })
            })
            .collect();
        out.sort();
        out
    }
}
