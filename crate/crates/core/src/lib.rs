//! Personalized Parsons-puzzle scaffolding for write-code practice.
//!
//! The pieces, bottom-up:
//!
//! - [`code_model`]: line normalization, block segmentation, LCS alignment
//! - [`exec_harness`]: runs code against unit tests in sandboxed processes
//! - [`provider`] and [`solution_forge`]: verified, student-tailored solutions
//! - [`puzzle_gen`]: turns a solution plus student code into a puzzle
//! - [`puzzle_engine`]: the interactive move/check/help state machine
//! - [`telemetry`]: the session event log and engagement metrics
//! - [`analytics`]: Mann–Whitney U, p-values, CLES and condition reports
//!
//! The `book/` directory at the repository root walks through each concept;
//! its Rust snippets are compiled and run as doctests of this crate.

pub mod analytics;
pub mod code_model;
pub mod exec_harness;
pub mod problem;
pub mod provider;
pub mod puzzle_engine;
pub mod puzzle_gen;
pub mod solution_forge;
pub mod telemetry;

pub use code_model::{align_lines, segment_blocks, Alignment, Block, BlockId, BlockSequence, SegmentPolicy};
pub use exec_harness::{ExecHarness, HarnessConfig, Limits, TestReport, TestRunner, TestStatus};
pub use problem::{Comparison, Problem, ProblemBank, TestCase};
pub use provider::{HttpProvider, HttpProviderConfig, ProviderPort, ScriptedProvider};
pub use puzzle_engine::{Feedback, Move, PuzzleState, Target};
pub use puzzle_gen::{make_puzzle, Puzzle, PuzzleConfig};
pub use solution_forge::{generate_solution, ForgeConfig, Provenance, VerifiedSolution};
pub use telemetry::{Condition, EngagementRecord, EventBody, SessionEvent};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/puzzles.md")]
    mod puzzles {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/telemetry.md")]
    mod telemetry {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
}
