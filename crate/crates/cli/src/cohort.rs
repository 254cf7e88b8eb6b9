//! Synthetic cohorts: scripted PC and CC students, some of whom rush.
//!
//! Regular students spend at least a minute and a half on every question.
//! Rushing CC students open, ask for help, copy and submit within half a
//! minute per question, so with [`MAX_QUESTIONS`] questions they stay under
//! two minutes in total. Rushing PC students do the same with a fast solve.

use std::collections::BTreeSet;

use parsons_core::problem::ProblemBank;
use parsons_core::telemetry::Condition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::script::{Action, QuestionScript, SimScript, Step, StudentScript};

pub const MAX_QUESTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSpec {
    pub pc: usize,
    pub cc: usize,
    pub fast_pc: usize,
    pub fast_cc: usize,
    /// Questions per student, taken in bank order.
    pub questions: usize,
    pub seed: u64,
    pub start_ms: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            pc: 51,
            cc: 67,
            fast_pc: 0,
            fast_cc: 6,
            questions: MAX_QUESTIONS,
            seed: 7,
            start_ms: 1_700_000_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub script: SimScript,
    /// Students scripted to finish in under two minutes.
    pub rushed: BTreeSet<String>,
}

const SEC: u64 = 1_000;

struct Clock<'a> {
    t: u64,
    rng: &'a mut ChaCha8Rng,
    steps: Vec<Step>,
}

impl Clock<'_> {
    fn after(&mut self, lo_s: u64, hi_s: u64, action: Action) {
        self.t += self.rng.random_range(lo_s * SEC..=hi_s * SEC);
        self.steps.push(Step { at_ms: self.t, action });
    }
}

/// A first attempt: some leading lines of the reference, maybe with a typo.
fn partial_attempt(rng: &mut ChaCha8Rng, reference: &str) -> String {
    let lines: Vec<&str> = reference.lines().filter(|l| !l.trim().is_empty()).collect();
    let keep = rng.random_range(1..lines.len().max(2));
    let mut out: Vec<String> = lines[..keep].iter().map(|l| l.to_string()).collect();
    if keep > 1 && rng.random_bool(0.5) {
        let k = rng.random_range(1..keep);
        let indent: String = out[k].chars().take_while(|c| c.is_whitespace()).collect();
        out.insert(k, format!("{indent}print(result)"));
    }
    out.join("\n")
}

fn regular_question(rng: &mut ChaCha8Rng, t0: u64, reference: &str, condition: Condition) -> (Vec<Step>, u64) {
    let attempt = partial_attempt(rng, reference);
    let mut c = Clock { t: t0, rng, steps: Vec::new() };
    c.after(0, 0, Action::Open);
    c.after(60, 240, Action::Write { code: attempt });
    c.after(5, 10, Action::Run);
    c.after(30, 120, Action::Help);
    match condition {
        Condition::PC => {
            if c.rng.random_bool(0.3) {
                c.after(5, 15, Action::Move { tray_index: 0, position: 0 });
                for _ in 0..3 {
                    c.after(5, 15, Action::Check);
                }
                c.after(5, 10, Action::HelpMe);
            }
            let step_s = c.rng.random_range(4..=8);
            c.after(5, 10, Action::Solve { step_ms: step_s * SEC });
            // Leave room for every move before copying: each solution line
            // may need one, plus one per distractor.
            let moves = reference.lines().filter(|l| !l.trim().is_empty()).count() as u64 + 4;
            c.t += moves * step_s * SEC;
            c.after(5, 20, Action::Copy);
        }
        Condition::CC => {
            c.after(60, 180, Action::Copy);
        }
    }
    c.after(5, 30, Action::Submit);
    (c.steps, c.t)
}

fn rushed_question(rng: &mut ChaCha8Rng, t0: u64, condition: Condition) -> (Vec<Step>, u64) {
    let mut c = Clock { t: t0, rng, steps: Vec::new() };
    c.after(0, 0, Action::Open);
    c.after(3, 8, Action::Help);
    if condition == Condition::PC {
        c.after(1, 2, Action::Solve { step_ms: 300 });
        c.t += 5 * SEC;
    }
    c.after(2, 5, Action::Copy);
    c.after(1, 3, Action::Submit);
    (c.steps, c.t)
}

pub fn generate(spec: &CohortSpec, bank: &ProblemBank) -> Cohort {
    assert!(spec.fast_pc <= spec.pc && spec.fast_cc <= spec.cc, "more rushers than students");
    let questions = spec.questions.min(MAX_QUESTIONS).min(bank.problems.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut students = Vec::new();
    let mut rushed = BTreeSet::new();
    let groups = [
        (Condition::PC, "pc", spec.pc, spec.fast_pc),
        (Condition::CC, "cc", spec.cc, spec.fast_cc),
    ];
    for (condition, prefix, n, fast) in groups {
        for i in 0..n {
            let student_id = format!("{prefix}-{:03}", i + 1);
            let rush = i < fast;
            if rush {
                rushed.insert(student_id.clone());
            }
            // Arrivals spread over the first ten minutes of the session.
            let mut t = rng.random_range(0..600 * SEC);
            let mut qs = Vec::new();
            for problem in bank.problems.iter().take(questions) {
                let (steps, end) = if rush {
                    rushed_question(&mut rng, t, condition)
                } else {
                    regular_question(&mut rng, t, &problem.reference_solution, condition)
                };
                t = end + rng.random_range(5 * SEC..=30 * SEC);
                qs.push(QuestionScript {
                    problem_id: problem.id.clone(),
                    steps,
                });
            }
            students.push(StudentScript {
                student_id,
                condition: Some(condition),
                questions: qs,
            });
        }
    }
    Cohort {
        script: SimScript {
            seed: spec.seed,
            start_ms: spec.start_ms,
            students,
        },
        rushed,
    }
}
