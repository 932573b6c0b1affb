//! Set-prediction loss for masked tags.
//!
//! Masked tag tokens are an unordered set, so the loss is evaluated at the
//! assignment of targets to masked slots that minimizes the bounded cost
//! `1 - p(target)`. Tokens of one tag keep their order: a k-token tag can only
//! fill a k-slot span, and tags of equal length permute among themselves.
//! Each equal-length group is an ordinary assignment problem solved with the
//! Kuhn-Munkres algorithm.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

use crate::batch::MaskSlot;
use crate::tokenizer::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum MatchingError {
    #[error("cost matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("cost matrix entry ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("no masked slots")]
    EmptyPlan,
    #[error("block {block}: {slots} masked slots for a {len}-token tag")]
    BlockLengthMismatch {
        block: usize,
        slots: usize,
        len: usize,
    },
    #[error("slot at position {0} belongs to no tag block")]
    MissingBlock(usize),
    #[error("{probs} distributions for {slots} slots")]
    SlotCount { probs: usize, slots: usize },
    #[error("target id {0} outside the distribution")]
    TargetOutOfRange(TokenId),
}

/// Square matrix of finite assignment costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MatchingError> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(MatchingError::NonSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            for (j, v) in row.into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(MatchingError::NonFinite(i, j));
                }
                values.push(v);
            }
        }
        Ok(Self { n, values })
    }

    pub fn from_fn(
        n: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, MatchingError> {
        Self::new((0..n).map(|i| (0..n).map(|j| f(i, j)).collect()).collect())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    /// Sum of the chosen entries, accumulated in row order.
    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `perm[i]` is the column (target) assigned to row (prediction) `i`.
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect assignment in `O(n^3)`.
///
/// Among optimal assignments the lexicographically smallest permutation is
/// returned: rows are fixed in order to the smallest column that still admits
/// an optimal completion.
pub fn hungarian(cost: &CostMatrix) -> AssignmentResult {
    let n = cost.size();
    if n == 0 {
        return AssignmentResult {
            perm: Vec::new(),
            total_cost: 0.0,
        };
    }
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..n).collect();
    let (optimum, first) = solve(cost, &rows, &cols);
    let scale = 1.0 + (0..n * n).map(|k| cost.values[k].abs()).fold(0.0, f64::max) * n as f64;
    let tol = 1e-12 * scale;
    let mut perm = Vec::with_capacity(n);
    let mut free_cols = cols;
    let mut remaining = optimum;
    #[allow(clippy::needless_range_loop)]
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (k, &col) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let completion = if rest_rows.is_empty() {
                0.0
            } else {
                solve(cost, &rest_rows, &rest_cols).0
            };
            let total = cost.get(row, col) + completion;
            if total <= remaining + tol {
                chosen = Some((k, total - cost.get(row, col)));
                break;
            }
        }
        // the solver's own assignment is always an optimal completion
        let (k, completion) = chosen.unwrap_or_else(|| {
            let col = first[row];
            let k = free_cols
                .iter()
                .position(|&c| c == col)
                .expect("column free");
            (k, remaining - cost.get(row, col))
        });
        perm.push(free_cols.remove(k));
        remaining = completion;
    }
    AssignmentResult {
        total_cost: cost.cost_of(&perm),
        perm,
    }
}

/// Shortest augmenting path with potentials over the sub-matrix
/// `rows x cols` (equal lengths). Returns the optimal value and, for each
/// row index of the full matrix in `rows`, its assigned full column.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let c = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // 1-based; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let reduced = c(i0, j) - u[i0] - v[j];
                    if reduced < min_to[j] {
                        min_to[j] = reduced;
                        way[j] = j0;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; rows.len()];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    let value = (0..n).map(|i| cost.get(rows[i], cols[assignment[i]])).sum();
    let mut full = vec![usize::MAX; cost.size()];
    for (i, &j) in assignment.iter().enumerate() {
        full[rows[i]] = cols[j];
    }
    (value, full)
}

/// Matching of one group of equal-length tag blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    /// Token length shared by every block in the group.
    pub block_len: usize,
    /// Block ids whose slot spans are filled, in block-id order.
    pub slot_blocks: Vec<usize>,
    /// `assignment.perm[i]` indexes `slot_blocks`: the target block placed
    /// into the span of `slot_blocks[i]`.
    pub assignment: AssignmentResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VivoLoss {
    /// `sum -ln p(matched target)` over all masked slots.
    pub loss: f64,
    /// `sum (1 - p(matched target))`, the minimized objective.
    pub total_cost: f64,
    /// Matched target per slot, aligned with the input slots.
    pub slot_targets: Vec<TokenId>,
    pub groups: Vec<GroupAssignment>,
}

fn prob(dist: ArrayView1<'_, f64>, target: TokenId) -> Result<f64, MatchingError> {
    dist.get(target as usize)
        .copied()
        .ok_or(MatchingError::TargetOutOfRange(target))
}

/// Hungarian-matched masked tag loss.
///
/// `probs[s]` is the predicted distribution at `slots[s]`; `block_lens[b]` is
/// the token count of tag block `b`. Every block that has a masked slot must
/// be masked completely.
pub fn vivo_loss(
    probs: &[Array1<f64>],
    slots: &[MaskSlot],
    block_lens: &[usize],
) -> Result<VivoLoss, MatchingError> {
    if slots.is_empty() {
        return Err(MatchingError::EmptyPlan);
    }
    if probs.len() != slots.len() {
        return Err(MatchingError::SlotCount {
            probs: probs.len(),
            slots: slots.len(),
        });
    }
    // block id -> slot indices ordered by position
    let mut spans: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, slot) in slots.iter().enumerate() {
        let block = slot
            .block
            .ok_or(MatchingError::MissingBlock(slot.position))?;
        spans.entry(block).or_default().push(s);
    }
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&block, members) in spans.iter_mut() {
        members.sort_by_key(|&s| slots[s].position);
        let len = block_lens.get(block).copied().unwrap_or(0);
        if members.len() != len {
            return Err(MatchingError::BlockLengthMismatch {
                block,
                slots: members.len(),
                len,
            });
        }
        by_len.entry(len).or_default().push(block);
    }

    let mut slot_targets = vec![0; slots.len()];
    let mut groups = Vec::with_capacity(by_len.len());
    let mut loss = 0.0;
    let mut total_cost = 0.0;
    for (block_len, blocks) in by_len {
        let targets: Vec<Vec<TokenId>> = blocks
            .iter()
            .map(|b| spans[b].iter().map(|&s| slots[s].target_id).collect())
            .collect();
        let mut rows = Vec::with_capacity(blocks.len());
        for span_block in &blocks {
            let span = &spans[span_block];
            let mut row = Vec::with_capacity(blocks.len());
            for target in &targets {
                let mut c = 0.0;
                for (k, &s) in span.iter().enumerate() {
                    c += 1.0 - prob(probs[s].view(), target[k])?;
                }
                row.push(c);
            }
            rows.push(row);
        }
        let assignment = hungarian(&CostMatrix::new(rows)?);
        for (i, &m) in assignment.perm.iter().enumerate() {
            for (k, &s) in spans[&blocks[i]].iter().enumerate() {
                let t = targets[m][k];
                slot_targets[s] = t;
                loss -= prob(probs[s].view(), t)?.ln();
            }
        }
        total_cost += assignment.total_cost;
        groups.push(GroupAssignment {
            block_len,
            slot_blocks: blocks,
            assignment,
        });
    }
    Ok(VivoLoss {
        loss,
        total_cost,
        slot_targets,
        groups,
    })
}

/// Ordered masked-token loss: every slot is scored against its own target.
pub fn mlm_loss(probs: &[Array1<f64>], slots: &[MaskSlot]) -> Result<f64, MatchingError> {
    if slots.is_empty() {
        return Err(MatchingError::EmptyPlan);
    }
    if probs.len() != slots.len() {
        return Err(MatchingError::SlotCount {
            probs: probs.len(),
            slots: slots.len(),
        });
    }
    let mut loss = 0.0;
    for (p, slot) in probs.iter().zip(slots) {
        loss -= prob(p.view(), slot.target_id)?.ln();
    }
    Ok(loss)
}
