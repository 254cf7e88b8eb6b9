//! Practice problems and the problem-bank file format.
//!
//! A bank is a JSON document:
//!
//! ```json
//! { "problems": [ { "id": "...", "title": "...", "topic": "...",
//!                   "prompt": "...", "reference_solution": "...",
//!                   "tests": [ { "id": "t1", "invocation": "f({})",
//!                                "expected": "{}", "comparison": "equal" } ] } ] }
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Evaluate `invocation` as an expression and compare canonical literals.
    #[default]
    Equal,
    /// Execute `invocation` as statements and compare captured stdout.
    Stdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub invocation: String,
    pub expected: String,
    #[serde(default)]
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub title: String,
    pub prompt: String,
    pub reference_solution: String,
    pub tests: Vec<TestCase>,
    #[serde(default)]
    pub topic: String,
}

/// What a student is allowed to see: no reference solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicProblem {
    pub id: String,
    pub title: String,
    pub prompt: String,
    pub topic: String,
    pub tests: Vec<TestCase>,
}

impl From<&Problem> for PublicProblem {
    fn from(p: &Problem) -> Self {
        PublicProblem {
            id: p.id.clone(),
            title: p.title.clone(),
            prompt: p.prompt.clone(),
            topic: p.topic.clone(),
            tests: p.tests.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("cannot read problem bank {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("problem bank is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate problem id `{0}`")]
    DuplicateId(String),
    #[error("problem `{id}` is malformed: {reason}")]
    Malformed { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ProblemBank {
    pub problems: Vec<Problem>,
}

impl ProblemBank {
    pub fn parse(text: &str) -> Result<Self, BankError> {
        let bank: ProblemBank = serde_json::from_str(text)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BankError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == id)
    }

    /// Structural checks only; reference solutions are verified by running them.
    pub fn validate(&self) -> Result<(), BankError> {
        let mut seen = BTreeSet::new();
        for p in &self.problems {
            if !seen.insert(p.id.as_str()) {
                return Err(BankError::DuplicateId(p.id.clone()));
            }
            let malformed = |reason: &str| BankError::Malformed {
                id: p.id.clone(),
                reason: reason.to_string(),
            };
            if p.id.trim().is_empty() {
                return Err(malformed("empty id"));
            }
            if p.prompt.trim().is_empty() {
                return Err(malformed("empty prompt"));
            }
            if p.tests.is_empty() {
                return Err(malformed("no unit tests"));
            }
            if let Err(reason) = validate_tests(&p.tests) {
                return Err(malformed(&reason));
            }
        }
        Ok(())
    }
}

/// Checks test ids are unique and every field is usable by the driver.
pub fn validate_tests(tests: &[TestCase]) -> Result<(), String> {
    if tests.is_empty() {
        return Err("no unit tests".into());
    }
    let mut ids = BTreeSet::new();
    for t in tests {
        if t.id.is_empty() || t.id.contains(['\t', '\n', '\r']) {
            return Err(format!("invalid test id {:?}", t.id));
        }
        if !ids.insert(t.id.as_str()) {
            return Err(format!("duplicate test id `{}`", t.id));
        }
        if t.invocation.trim().is_empty() {
            return Err(format!("test `{}` has an empty invocation", t.id));
        }
        if t.comparison == Comparison::Equal && t.expected.trim().is_empty() {
            return Err(format!("test `{}` has an empty expected literal", t.id));
        }
    }
    Ok(())
}
