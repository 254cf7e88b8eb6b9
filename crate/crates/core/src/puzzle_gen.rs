//! Builds a personalized Parsons puzzle from a verified solution.
//!
//! Personalization happens at the block level: solution blocks the student
//! already wrote correctly start out in the solution area, the student's own
//! incorrect lines become distractors, and everything else is shuffled into
//! the tray.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::code_model::{
    align_lines_with, segment_blocks, Block, BlockId, BlockSequence, CodeModelError, SegmentPolicy,
};
use crate::solution_forge::VerifiedSolution;

pub const DEFAULT_DISTRACTOR_CAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleConfig {
    pub distractor_cap: usize,
    pub segment: SegmentPolicy,
}

impl Default for PuzzleConfig {
    fn default() -> Self {
        PuzzleConfig {
            distractor_cap: DEFAULT_DISTRACTOR_CAP,
            segment: SegmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Puzzle {
    /// Correct order.
    pub solution_blocks: BlockSequence,
    pub distractors: Vec<Block>,
    /// Ids of solution blocks that start in the solution area, in solution order.
    pub preplaced: Vec<BlockId>,
    pub tray_order: Vec<BlockId>,
    pub seed: u64,
    pub source_solution: String,
}

impl Puzzle {
    pub fn block(&self, id: &BlockId) -> Option<&Block> {
        self.solution_blocks
            .iter()
            .chain(self.distractors.iter())
            .find(|b| &b.id == id)
    }

    pub fn is_distractor(&self, id: &BlockId) -> bool {
        self.distractors.iter().any(|b| &b.id == id)
    }

    pub fn solution_ids(&self) -> Vec<BlockId> {
        self.solution_blocks.iter().map(|b| b.id.clone()).collect()
    }

    pub fn block_count(&self) -> usize {
        self.solution_blocks.len() + self.distractors.len()
    }
}

/// Seeded Fisher–Yates. Returns the permutation as indices into `len` items.
pub fn shuffle_tray(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn mint_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<BlockId> {
    let mut seen = HashSet::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    while ids.len() < n {
        let id = format!("k{:08x}", rng.next_u32());
        if seen.insert(id.clone()) {
            ids.push(BlockId(id));
        }
    }
    ids
}

/// Pure function of its inputs: the same arguments always give the same puzzle.
pub fn make_puzzle(
    solution: &VerifiedSolution,
    student_code: &str,
    config: &PuzzleConfig,
    seed: u64,
) -> Result<Puzzle, CodeModelError> {
    let mut blocks = segment_blocks(&solution.source, config.segment)?;
    let alignment = align_lines_with(student_code, &solution.source, config.segment.tab_width);

    // Blocks and alignment both walk the non-blank solution lines in order.
    let mut line_idx = 0;
    let fully_paired: Vec<bool> = blocks
        .iter()
        .map(|b| {
            let range = line_idx..line_idx + b.lines.len();
            line_idx = range.end;
            range.into_iter().all(|i| alignment.is_solution_line_paired(i))
        })
        .collect();

    let solution_keys: HashSet<&str> = blocks.iter().flat_map(|b| b.keys()).collect();
    let mut distractor_keys = BTreeSet::new();
    let mut distractor_lines = Vec::new();
    for &i in &alignment.student_unmatched {
        if distractor_lines.len() == config.distractor_cap {
            break;
        }
        let line = &alignment.student_lines[i];
        if line.is_comment_only || solution_keys.contains(line.key.as_str()) {
            continue;
        }
        if distractor_keys.insert(line.key.clone()) {
            distractor_lines.push(line.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = mint_ids(&mut rng, blocks.len() + distractor_lines.len());
    let (solution_ids, distractor_ids) = ids.split_at(blocks.len());
    for (block, id) in blocks.blocks.iter_mut().zip(solution_ids) {
        block.id = id.clone();
    }
    let distractors: Vec<Block> = distractor_lines
        .into_iter()
        .zip(distractor_ids)
        .map(|(line, id)| Block {
            id: id.clone(),
            indent: line.indent,
            lines: vec![line],
        })
        .collect();

    let preplaced: Vec<BlockId> = blocks
        .iter()
        .zip(&fully_paired)
        .filter(|(_, &p)| p)
        .map(|(b, _)| b.id.clone())
        .collect();
    let loose: Vec<BlockId> = blocks
        .iter()
        .zip(&fully_paired)
        .filter(|(_, &p)| !p)
        .map(|(b, _)| b.id.clone())
        .chain(distractors.iter().map(|d| d.id.clone()))
        .collect();
    let tray_order = shuffle_tray(loose.len(), rng.next_u64())
        .into_iter()
        .map(|i| loose[i].clone())
        .collect();

    Ok(Puzzle {
        solution_blocks: blocks,
        distractors,
        preplaced,
        tray_order,
        seed,
        source_solution: solution.source.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solution_forge::Provenance;

    fn verified(source: &str) -> VerifiedSolution {
        VerifiedSolution {
            source: source.into(),
            passed_all_tests: true,
            provenance: Provenance::Generated,
            attempts_used: 1,
            closeness: 0,
        }
    }

    const SOL: &str = "def merge(a, b):\n    out = {}\n    for k in a:\n        out[k] = a[k]\n    for k in b:\n        out[k] = b[k]\n    return out";

    #[test]
    fn full_match_preplaces_everything() {
        let p = make_puzzle(&verified(SOL), SOL, &PuzzleConfig::default(), 1).unwrap();
        assert_eq!(p.preplaced, p.solution_ids());
        assert!(p.tray_order.is_empty());
        assert!(p.distractors.is_empty());
    }

    #[test]
    fn empty_progress_is_fully_movable() {
        let p = make_puzzle(&verified(SOL), "", &PuzzleConfig::default(), 1).unwrap();
        assert!(p.preplaced.is_empty());
        assert!(p.distractors.is_empty());
        assert_eq!(p.tray_order.len(), 7);
        let mut tray = p.tray_order.clone();
        tray.sort();
        let mut all = p.solution_ids();
        all.sort();
        assert_eq!(tray, all);
    }

    #[test]
    fn distractors_deduplicated_filtered_and_capped() {
        let student = "def merge(a, b):\n    out = []\n    out = []\n    return out\n    # comment\n    x = 1\n    y = 2\n    z = 3";
        let cfg = PuzzleConfig::default();
        let p = make_puzzle(&verified(SOL), student, &cfg, 9).unwrap();
        let keys: Vec<_> = p.distractors.iter().map(|d| d.lines[0].key.as_str()).collect();
        assert_eq!(keys, ["out = []", "x = 1", "y = 2"]);

        let none = PuzzleConfig {
            distractor_cap: 0,
            ..cfg
        };
        assert!(make_puzzle(&verified(SOL), student, &none, 9).unwrap().distractors.is_empty());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = PuzzleConfig::default();
        let a = make_puzzle(&verified(SOL), "    out = {}", &cfg, 42).unwrap();
        let b = make_puzzle(&verified(SOL), "    out = {}", &cfg, 42).unwrap();
        let c = make_puzzle(&verified(SOL), "    out = {}", &cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.solution_ids(), c.solution_ids());
    }

    #[test]
    fn shuffle_examples() {
        assert_eq!(shuffle_tray(1, 77), vec![0]);
        assert!(shuffle_tray(0, 77).is_empty());
        assert_eq!(shuffle_tray(5, 3), shuffle_tray(5, 3));
    }

    #[test]
    fn empty_solution_propagates() {
        assert_eq!(
            make_puzzle(&verified("\n\n"), "", &PuzzleConfig::default(), 0),
            Err(CodeModelError::EmptySolution)
        );
    }
}
