//! Line normalization, block segmentation and student-to-solution alignment.
//!
//! Everything here works on lines, not tokens. Two lines are "the same" when
//! their normalized keys are equal: indentation and trailing whitespace are
//! ignored, everything else is significant (`x+=1` and `x = x + 1` differ).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TAB_WIDTH: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodeModelError {
    #[error("solution has no non-blank lines")]
    EmptySolution,
}

/// One source line split into its comparison key and indentation width.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedLine {
    pub raw: String,
    pub key: String,
    pub indent: usize,
    pub is_blank: bool,
    pub is_comment_only: bool,
}

impl NormalizedLine {
    /// The line as it should be rendered: original indentation, no trailing whitespace.
    pub fn text(&self) -> &str {
        self.raw.trim_end()
    }
}

/// Normalizes a single line. `raw` must not contain a newline.
///
/// ```
/// use parsons_core::code_model::normalize_line;
///
/// let line = normalize_line("\tif k in d:", 4);
/// assert_eq!(line.key, "if k in d:");
/// assert_eq!(line.indent, 4);
/// ```
pub fn normalize_line(raw: &str, tab_width: usize) -> NormalizedLine {
    debug_assert!(!raw.contains('\n'), "normalize_line takes a single line");
    let key = raw.trim().to_string();
    let is_blank = key.is_empty();
    let indent = if is_blank {
        0
    } else {
        raw.chars()
            .take_while(|c| c.is_whitespace())
            .map(|c| if c == '\t' { tab_width } else { 1 })
            .sum()
    };
    NormalizedLine {
        raw: raw.to_string(),
        is_comment_only: key.starts_with('#'),
        key,
        indent,
        is_blank,
    }
}

/// Splits text into normalized lines (all lines, blanks included).
pub fn normalize_text(text: &str, tab_width: usize) -> Vec<NormalizedLine> {
    text.lines().map(|l| normalize_line(l, tab_width)).collect()
}

/// Drops blank lines and trailing whitespace and joins with `\n` (no final newline).
///
/// This is the form in which verified solutions are stored, so that a solved
/// puzzle assembles back to exactly the same bytes.
pub fn canonical_source(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub String);

impl BlockId {
    pub fn new(id: impl Into<String>) -> Self {
        BlockId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A draggable unit: one or more lines whose indentation is fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub lines: Vec<NormalizedLine>,
    pub indent: usize,
}

impl Block {
    /// Lines rendered with their original indentation.
    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(NormalizedLine::text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().map(|l| l.key.as_str())
    }

    /// Keys of the lines that carry code (comments excluded).
    pub fn code_keys(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| !l.is_comment_only)
            .map(|l| l.key.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockSequence {
    pub blocks: Vec<Block>,
}

impl BlockSequence {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Block> {
        self.blocks.iter()
    }

    /// Concatenates the blocks back into source text.
    pub fn join(&self) -> String {
        self.blocks
            .iter()
            .map(Block::render)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// How source text is cut into blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPolicy {
    pub tab_width: usize,
    /// Comment-only lines join the next code line instead of forming blocks.
    pub attach_comments: bool,
}

impl Default for SegmentPolicy {
    fn default() -> Self {
        SegmentPolicy {
            tab_width: DEFAULT_TAB_WIDTH,
            attach_comments: true,
        }
    }
}

/// Cuts a solution into one block per non-blank logical line.
///
/// Blank lines are dropped. With `attach_comments`, a run of comment-only
/// lines is prepended to the following code line; a trailing run with no
/// following code is appended to the previous block (or forms the only block
/// if the text is all comments). Block ids are positional: `b0`, `b1`, ...
pub fn segment_blocks(solution: &str, policy: SegmentPolicy) -> Result<BlockSequence, CodeModelError> {
    let lines: Vec<NormalizedLine> = normalize_text(solution, policy.tab_width)
        .into_iter()
        .filter(|l| !l.is_blank)
        .collect();
    if lines.is_empty() {
        return Err(CodeModelError::EmptySolution);
    }

    let mut groups: Vec<Vec<NormalizedLine>> = Vec::new();
    let mut pending: Vec<NormalizedLine> = Vec::new();
    for line in lines {
        if policy.attach_comments && line.is_comment_only {
            pending.push(line);
            continue;
        }
        pending.push(line);
        groups.push(std::mem::take(&mut pending));
    }
    if !pending.is_empty() {
        match groups.last_mut() {
            Some(last) => last.extend(pending),
            None => groups.push(pending),
        }
    }

    let blocks = groups
        .into_iter()
        .enumerate()
        .map(|(i, lines)| {
            // Indent of the first code line; a leading comment may sit elsewhere.
            let indent = lines
                .iter()
                .find(|l| !l.is_comment_only)
                .unwrap_or(&lines[0])
                .indent;
            Block {
                id: BlockId(format!("b{i}")),
                lines,
                indent,
            }
        })
        .collect();
    Ok(BlockSequence { blocks })
}

/// A maximum common subsequence between the non-blank lines of two texts.
///
/// Indices refer to positions among *non-blank* lines; `student_line_numbers`
/// and `solution_line_numbers` map them back to 0-based line numbers in the
/// original texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
    pub student_unmatched: BTreeSet<usize>,
    pub solution_unmatched: BTreeSet<usize>,
    pub student_lines: Vec<NormalizedLine>,
    pub solution_lines: Vec<NormalizedLine>,
    pub student_line_numbers: Vec<usize>,
    pub solution_line_numbers: Vec<usize>,
}

impl Alignment {
    /// Number of paired lines.
    pub fn closeness(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_solution_line_paired(&self, solution_idx: usize) -> bool {
        !self.solution_unmatched.contains(&solution_idx)
    }
}

fn non_blank(text: &str, tab_width: usize) -> (Vec<NormalizedLine>, Vec<usize>) {
    normalize_text(text, tab_width)
        .into_iter()
        .enumerate()
        .filter(|(_, l)| !l.is_blank)
        .map(|(n, l)| (l, n))
        .unzip()
}

/// Longest common subsequence of normalized keys.
///
/// Among all maximum alignments the one whose solution indices are
/// lexicographically smallest is returned (ties on that broken by the
/// smallest student indices), so results are reproducible.
pub fn align_lines(student: &str, solution: &str) -> Alignment {
    align_lines_with(student, solution, DEFAULT_TAB_WIDTH)
}

pub fn align_lines_with(student: &str, solution: &str, tab_width: usize) -> Alignment {
    let (student_lines, student_line_numbers) = non_blank(student, tab_width);
    let (solution_lines, solution_line_numbers) = non_blank(solution, tab_width);
    let a: Vec<&str> = student_lines.iter().map(|l| l.key.as_str()).collect();
    let b: Vec<&str> = solution_lines.iter().map(|l| l.key.as_str()).collect();
    let (n, m) = (a.len(), b.len());

    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }

    let mut pairs = Vec::with_capacity(suffix[0][0]);
    let (mut i, mut j) = (0, 0);
    let mut remaining = suffix[0][0];
    while remaining > 0 {
        let next = (j..m)
            .find_map(|jj| {
                (i..n)
                    .find(|&ii| a[ii] == b[jj] && suffix[ii + 1][jj + 1] + 1 == remaining)
                    .map(|ii| (ii, jj))
            })
            .expect("suffix table guarantees a continuation");
        pairs.push(next);
        i = next.0 + 1;
        j = next.1 + 1;
        remaining -= 1;
    }

    let student_paired: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let solution_paired: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    Alignment {
        student_unmatched: (0..n).filter(|x| !student_paired.contains(x)).collect(),
        solution_unmatched: (0..m).filter(|x| !solution_paired.contains(x)).collect(),
        pairs,
        student_lines,
        solution_lines,
        student_line_numbers,
        solution_line_numbers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineLabel {
    Correct,
    Incorrect,
}

/// One label per non-blank student line, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineClassification {
    pub labels: Vec<LineLabel>,
}

impl LineClassification {
    pub fn count(&self, label: LineLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

pub fn classify_student_lines(alignment: &Alignment) -> LineClassification {
    let labels = (0..alignment.student_lines.len())
        .map(|i| {
            if alignment.student_unmatched.contains(&i) {
                LineLabel::Incorrect
            } else {
                LineLabel::Correct
            }
        })
        .collect();
    LineClassification { labels }
}
