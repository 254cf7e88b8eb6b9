//! State machine for one interactive puzzle.
//!
//! Blocks live in exactly one of two containers, the tray or the solution
//! area. Students move blocks, ask for a check, and after enough checks may
//! ask for help, which removes a distractor or merges two adjacent solution
//! blocks. Indentation belongs to the blocks, so a check only looks at order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code_model::{Block, BlockId};
use crate::puzzle_gen::Puzzle;

pub const DEFAULT_MIN_ATTEMPTS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("unknown block `{0}`")]
    UnknownBlock(BlockId),
    #[error("position {position} is outside the solution area (length {len})")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("puzzle is already solved")]
    PuzzleAlreadySolved,
    #[error("help is available after {required} checks ({attempts} so far)")]
    TooFewAttempts { attempts: u32, required: u32 },
    #[error("nothing left to simplify")]
    NothingToAdapt,
    #[error("puzzle is not solved yet")]
    NotSolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "container", rename_all = "snake_case")]
pub enum Target {
    Tray,
    Area { position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub block_id: BlockId,
    pub target: Target,
}

impl Move {
    pub fn to_area(block_id: BlockId, position: usize) -> Self {
        Move {
            block_id,
            target: Target::Area { position },
        }
    }

    pub fn to_tray(block_id: BlockId) -> Self {
        Move {
            block_id,
            target: Target::Tray,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub correct: bool,
    pub first_error_position: Option<usize>,
    pub distractor_flagged: Option<BlockId>,
    /// Solution blocks still in the tray.
    pub missing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationKind {
    RemoveDistractor,
    CombineBlocks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationAction {
    pub kind: AdaptationKind,
    pub affected: Vec<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleState {
    pub puzzle: Puzzle,
    pub tray: Vec<BlockId>,
    pub area: Vec<BlockId>,
    pub attempts: u32,
    pub adaptations: Vec<AdaptationAction>,
    pub solved: bool,
    /// Blocks produced by merging.
    #[serde(default)]
    pub combined: BTreeSet<BlockId>,
}

/// Client-facing rendering of a block; does not say whether it is a distractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockView {
    pub id: BlockId,
    pub lines: Vec<String>,
    pub indent: usize,
}

/// What a student sees. Blocks are listed by id, which carries no order information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleView {
    pub blocks: Vec<BlockView>,
    pub tray: Vec<BlockId>,
    pub area: Vec<BlockId>,
    pub attempts: u32,
    pub solved: bool,
    pub adaptations: Vec<AdaptationAction>,
}

impl PuzzleState {
    pub fn new(puzzle: Puzzle) -> Self {
        PuzzleState {
            area: puzzle.preplaced.clone(),
            tray: puzzle.tray_order.clone(),
            attempts: 0,
            adaptations: Vec::new(),
            solved: false,
            combined: BTreeSet::new(),
            puzzle,
        }
    }

    fn block(&self, id: &BlockId) -> Result<&Block, EngineError> {
        self.puzzle
            .block(id)
            .ok_or_else(|| EngineError::UnknownBlock(id.clone()))
    }

    pub fn apply_move(&mut self, m: &Move) -> Result<(), EngineError> {
        if self.solved {
            return Err(EngineError::PuzzleAlreadySolved);
        }
        self.block(&m.block_id)?;
        if let Target::Area { position } = m.target {
            if position > self.area.len() {
                return Err(EngineError::PositionOutOfRange {
                    position,
                    len: self.area.len(),
                });
            }
        }
        let in_tray = self.tray.iter().position(|b| b == &m.block_id);
        let in_area = self.area.iter().position(|b| b == &m.block_id);
        match (&m.target, in_tray, in_area) {
            (Target::Tray, Some(_), _) => {}
            (Target::Tray, None, Some(i)) => {
                let id = self.area.remove(i);
                self.tray.push(id);
            }
            (Target::Area { position }, tray_idx, area_idx) => {
                let id = match (tray_idx, area_idx) {
                    (Some(i), _) => self.tray.remove(i),
                    (None, Some(i)) => self.area.remove(i),
                    (None, None) => return Err(EngineError::UnknownBlock(m.block_id.clone())),
                };
                let at = (*position).min(self.area.len());
                self.area.insert(at, id);
            }
            (Target::Tray, None, None) => return Err(EngineError::UnknownBlock(m.block_id.clone())),
        }
        Ok(())
    }

    /// Scans the area against the solution order. Blocks with identical
    /// rendered text are interchangeable.
    pub fn evaluate(&self) -> Feedback {
        let expected: Vec<String> = self.puzzle.solution_blocks.iter().map(Block::render).collect();
        let mut next = 0;
        for (i, id) in self.area.iter().enumerate() {
            if self.puzzle.is_distractor(id) {
                return Feedback {
                    correct: false,
                    first_error_position: Some(i),
                    distractor_flagged: Some(id.clone()),
                    missing: self.missing(),
                };
            }
            let text = self.puzzle.block(id).map(Block::render).unwrap_or_default();
            if expected.get(next) != Some(&text) {
                return Feedback {
                    correct: false,
                    first_error_position: Some(i),
                    distractor_flagged: None,
                    missing: self.missing(),
                };
            }
            next += 1;
        }
        let missing = self.missing();
        Feedback {
            correct: missing == 0 && next == expected.len(),
            first_error_position: None,
            distractor_flagged: None,
            missing,
        }
    }

    fn missing(&self) -> usize {
        self.tray
            .iter()
            .filter(|id| !self.puzzle.is_distractor(id))
            .count()
    }

    pub fn check(&mut self) -> Result<Feedback, EngineError> {
        if self.solved {
            return Err(EngineError::PuzzleAlreadySolved);
        }
        self.attempts += 1;
        let feedback = self.evaluate();
        self.solved = feedback.correct;
        Ok(feedback)
    }

    pub fn help_me(&mut self, min_attempts: u32) -> Result<AdaptationAction, EngineError> {
        if self.solved {
            return Err(EngineError::PuzzleAlreadySolved);
        }
        if self.attempts < min_attempts {
            return Err(EngineError::TooFewAttempts {
                attempts: self.attempts,
                required: min_attempts,
            });
        }
        let action = if !self.puzzle.distractors.is_empty() {
            self.remove_distractor()
        } else if self.puzzle.solution_blocks.len() >= 2 {
            self.combine_blocks()
        } else {
            return Err(EngineError::NothingToAdapt);
        };
        self.adaptations.push(action.clone());
        Ok(action)
    }

    fn forget(&mut self, id: &BlockId) {
        self.tray.retain(|b| b != id);
        self.area.retain(|b| b != id);
        self.puzzle.tray_order.retain(|b| b != id);
        self.puzzle.preplaced.retain(|b| b != id);
    }

    fn remove_distractor(&mut self) -> AdaptationAction {
        let order = &self.puzzle.tray_order;
        let is_d = |id: &&BlockId| self.puzzle.is_distractor(id);
        let unplaced = order.iter().filter(is_d).find(|id| self.tray.contains(id));
        let placed = order.iter().filter(is_d).find(|id| self.area.contains(id));
        let victim = unplaced
            .or(placed)
            .or_else(|| self.puzzle.distractors.first().map(|d| &d.id))
            .cloned()
            .expect("caller checked distractors exist");
        self.puzzle.distractors.retain(|d| d.id != victim);
        self.forget(&victim);
        AdaptationAction {
            kind: AdaptationKind::RemoveDistractor,
            affected: vec![victim],
        }
    }

    fn combine_blocks(&mut self) -> AdaptationAction {
        let blocks = &self.puzzle.solution_blocks.blocks;
        let fresh = |i: usize| !self.combined.contains(&blocks[i].id);
        let j = (0..blocks.len() - 1)
            .find(|&j| fresh(j) && fresh(j + 1))
            .unwrap_or(0);
        let later = self.puzzle.solution_blocks.blocks.remove(j + 1);
        let earlier = &mut self.puzzle.solution_blocks.blocks[j];
        earlier.lines.extend(later.lines);
        let keep = earlier.id.clone();
        self.combined.insert(keep.clone());
        self.combined.remove(&later.id);
        self.forget(&later.id);
        AdaptationAction {
            kind: AdaptationKind::CombineBlocks,
            affected: vec![keep, later.id],
        }
    }

    /// Assembled program text for copy-out. Only available once solved.
    pub fn assemble(&self) -> Result<String, EngineError> {
        if !self.solved {
            return Err(EngineError::NotSolved);
        }
        Ok(self
            .area
            .iter()
            .filter_map(|id| self.puzzle.block(id))
            .map(Block::render)
            .collect::<Vec<_>>()
            .join("\n"))
    }

    /// Moves that take the current arrangement to the solution: distractors
    /// back to the tray, then each solution block to its slot.
    pub fn solution_script(&self) -> Vec<Move> {
        let mut sim = self.clone();
        let mut moves = Vec::new();
        let placed: Vec<BlockId> = sim
            .area
            .iter()
            .filter(|id| sim.puzzle.is_distractor(id))
            .cloned()
            .collect();
        for id in placed {
            let m = Move::to_tray(id);
            sim.apply_move(&m).expect("valid move");
            moves.push(m);
        }
        for (k, id) in self.puzzle.solution_ids().into_iter().enumerate() {
            if sim.area.get(k) == Some(&id) {
                continue;
            }
            let m = Move::to_area(id, k);
            sim.apply_move(&m).expect("valid move");
            moves.push(m);
        }
        moves
    }

    pub fn view(&self) -> PuzzleView {
        let mut blocks: Vec<BlockView> = self
            .puzzle
            .solution_blocks
            .iter()
            .chain(self.puzzle.distractors.iter())
            .map(|b| BlockView {
                id: b.id.clone(),
                lines: b.lines.iter().map(|l| l.text().to_string()).collect(),
                indent: b.indent,
            })
            .collect();
        blocks.sort_by(|a, b| a.id.cmp(&b.id));
        PuzzleView {
            blocks,
            tray: self.tray.clone(),
            area: self.area.clone(),
            attempts: self.attempts,
            solved: self.solved,
            adaptations: self.adaptations.clone(),
        }
    }

    /// Every block id currently in play.
    pub fn universe(&self) -> BTreeSet<BlockId> {
        self.puzzle
            .solution_blocks
            .iter()
            .chain(self.puzzle.distractors.iter())
            .map(|b| b.id.clone())
            .collect()
    }
}
