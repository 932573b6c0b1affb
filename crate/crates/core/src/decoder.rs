//! Caption generation by mask insertion.
//!
//! A prefix `[CLS] w1 .. wn` is extended by appending `[MASK]`, reading the
//! next-token distribution at that position and replacing the mask with the
//! chosen token. Generation stops at `[SEP]` or after `max_len` tokens.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, VecDeque};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchBuilder, BatchError, Region};
use crate::encoder::{self, EncoderError, Parameters};
use crate::tokenizer::{TagBlock, TokenId};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("constraint {0} is empty")]
    EmptyConstraint(usize),
    #[error("at most {max} constraints are supported, got {got}")]
    TooManyConstraints { max: usize, got: usize },
    #[error("beam search ended without a finished hypothesis")]
    NoHypothesis,
    #[error("invalid decoding configuration: {0}")]
    BadConfig(String),
}

/// Next-token log probabilities for a partial caption.
pub trait Scorer {
    /// `prefix` holds the emitted tokens, without `[CLS]` or `[MASK]`.
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Array1<f64>, DecodeError>;
}

/// Scores prefixes with a trained encoder for one image. Special tokens
/// other than `[SEP]` are excluded from the distribution.
pub struct EncoderScorer<'a> {
    params: &'a Parameters,
    builder: &'a BatchBuilder,
    blocks: &'a [TagBlock],
    regions: &'a [Region],
}

impl<'a> EncoderScorer<'a> {
    pub fn new(
        params: &'a Parameters,
        builder: &'a BatchBuilder,
        blocks: &'a [TagBlock],
        regions: &'a [Region],
    ) -> Self {
        Self {
            params,
            builder,
            blocks,
            regions,
        }
    }
}

impl Scorer for EncoderScorer<'_> {
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Array1<f64>, DecodeError> {
        let special = self.builder.special();
        let mut ids = Vec::with_capacity(prefix.len() + 2);
        ids.push(special.cls);
        ids.extend_from_slice(prefix);
        ids.push(special.mask);
        let batch = self
            .builder
            .build_infer_batch(&ids, self.blocks, self.regions)?;
        let fwd = encoder::forward(self.params, &batch)?;
        let mut logits = fwd.logits_at(prefix.len() + 1).to_owned();
        for id in [special.pad, special.cls, special.mask] {
            logits[id as usize] = f64::NEG_INFINITY;
        }
        Ok(encoder::log_softmax(logits.view()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub beam_width: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: 20,
            beam_width: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Caption tokens, without `[SEP]`.
    pub token_ids: Vec<TokenId>,
    /// Log probability of every emitted token, including a final `[SEP]`.
    pub token_logprobs: Vec<f64>,
    pub logprob: f64,
}

/// Repeatedly emits the most probable token (lowest id on ties).
pub fn greedy_decode(
    scorer: &dyn Scorer,
    sep: TokenId,
    max_len: usize,
) -> Result<Decoded, DecodeError> {
    let mut out = Decoded {
        token_ids: Vec::new(),
        token_logprobs: Vec::new(),
        logprob: 0.0,
    };
    while out.token_ids.len() < max_len {
        let lp = scorer.log_probs(&out.token_ids)?;
        let t = encoder::argmax(lp.view()) as TokenId;
        out.token_logprobs.push(lp[t as usize]);
        out.logprob += lp[t as usize];
        if t == sep {
            break;
        }
        out.token_ids.push(t);
    }
    Ok(out)
}

/// Greedy decoding with a trained encoder for one image.
pub fn greedy_caption(
    params: &Parameters,
    builder: &BatchBuilder,
    blocks: &[TagBlock],
    regions: &[Region],
    max_len: usize,
) -> Result<Decoded, DecodeError> {
    let scorer = EncoderScorer::new(params, builder, blocks, regions);
    greedy_decode(&scorer, builder.special().sep, max_len)
}

const MAX_CONSTRAINTS: usize = 64;

/// Deterministic automaton tracking which constraints (contiguous token
/// sequences) have occurred in the emitted text.
///
/// A state is the set of satisfied constraints together with, for every
/// unsatisfied constraint, the length of its longest prefix that ends the
/// text. Satisfied constraints carry no progress, which keeps the automaton
/// free of equivalent states. Tokens outside every constraint share one
/// transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintFsm {
    constraints: Vec<Vec<TokenId>>,
    satisfied: Vec<u64>,
    transitions: Vec<HashMap<TokenId, usize>>,
    other: Vec<usize>,
}

impl ConstraintFsm {
    pub fn num_states(&self) -> usize {
        self.satisfied.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn next(&self, state: usize, token: TokenId) -> usize {
        self.transitions[state]
            .get(&token)
            .copied()
            .unwrap_or(self.other[state])
    }

    /// Bit `c` is set when constraint `c` has been observed.
    pub fn satisfied_mask(&self, state: usize) -> u64 {
        self.satisfied[state]
    }

    pub fn satisfied_count(&self, state: usize) -> usize {
        self.satisfied[state].count_ones() as usize
    }

    pub fn is_accepting(&self, state: usize) -> bool {
        self.satisfied_count(state) == self.constraints.len()
    }

    /// Runs the automaton over a token sequence from the start state.
    pub fn run(&self, tokens: &[TokenId]) -> usize {
        tokens.iter().fold(self.start(), |s, &t| self.next(s, t))
    }
}

/// Longest proper border of every prefix of `pattern` (KMP failure table).
fn failure(pattern: &[TokenId]) -> Vec<usize> {
    let mut f = vec![0; pattern.len()];
    let mut k = 0;
    for i in 1..pattern.len() {
        while k > 0 && pattern[i] != pattern[k] {
            k = f[k - 1];
        }
        if pattern[i] == pattern[k] {
            k += 1;
        }
        f[i] = k;
    }
    f
}

fn advance(
    pattern: &[TokenId],
    fail: &[usize],
    mut progress: usize,
    token: Option<TokenId>,
) -> usize {
    let Some(token) = token else { return 0 };
    loop {
        if pattern[progress] == token {
            return progress + 1;
        }
        if progress == 0 {
            return 0;
        }
        progress = fail[progress - 1];
    }
}

pub fn build_fsm(constraints: &[Vec<TokenId>]) -> Result<ConstraintFsm, DecodeError> {
    if constraints.len() > MAX_CONSTRAINTS {
        return Err(DecodeError::TooManyConstraints {
            max: MAX_CONSTRAINTS,
            got: constraints.len(),
        });
    }
    if let Some(i) = constraints.iter().position(Vec::is_empty) {
        return Err(DecodeError::EmptyConstraint(i));
    }
    let fails: Vec<Vec<usize>> = constraints.iter().map(|c| failure(c)).collect();
    let mut alphabet: Vec<TokenId> = constraints.iter().flatten().copied().collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    type Key = (u64, Vec<usize>);
    let start: Key = (0, vec![0; constraints.len()]);
    let mut index: HashMap<Key, usize> = HashMap::from([(start.clone(), 0)]);
    let mut keys = vec![start];
    let mut queue = VecDeque::from([0usize]);
    let mut transitions = Vec::new();
    let mut other = Vec::new();
    let step = |key: &Key, token: Option<TokenId>| -> Key {
        let (mut mask, mut progress) = key.clone();
        for (c, pattern) in constraints.iter().enumerate() {
            if mask & (1 << c) != 0 {
                continue;
            }
            let p = advance(pattern, &fails[c], progress[c], token);
            if p == pattern.len() {
                mask |= 1 << c;
                progress[c] = 0;
            } else {
                progress[c] = p;
            }
        }
        (mask, progress)
    };
    while let Some(s) = queue.pop_front() {
        let key = keys[s].clone();
        let mut intern = |k: Key, keys: &mut Vec<Key>, queue: &mut VecDeque<usize>| -> usize {
            *index.entry(k.clone()).or_insert_with(|| {
                keys.push(k);
                queue.push_back(keys.len() - 1);
                keys.len() - 1
            })
        };
        let mut row = HashMap::new();
        for &t in &alphabet {
            let target = intern(step(&key, Some(t)), &mut keys, &mut queue);
            row.insert(t, target);
        }
        let o = intern(step(&key, None), &mut keys, &mut queue);
        // states are processed in creation order, so rows line up with ids
        debug_assert_eq!(transitions.len(), s);
        transitions.push(row);
        other.push(o);
    }
    Ok(ConstraintFsm {
        constraints: constraints.to_vec(),
        satisfied: keys.iter().map(|k| k.0).collect(),
        transitions,
        other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, including a final `[SEP]` when finished by one.
    pub token_ids: Vec<TokenId>,
    pub token_logprobs: Vec<f64>,
    pub logprob: f64,
    pub fsm_state: usize,
    pub finished: bool,
}

impl Hypothesis {
    fn into_decoded(self, sep: TokenId) -> Decoded {
        let mut token_ids = self.token_ids;
        if token_ids.last() == Some(&sep) {
            token_ids.pop();
        }
        Decoded {
            token_ids,
            token_logprobs: self.token_logprobs,
            logprob: self.logprob,
        }
    }
}

/// Higher log probability first, then the lexicographically smaller
/// sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob
        .total_cmp(&a.logprob)
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

/// Constrained beam search: `beam_width` hypotheses are kept for every
/// automaton state. The best finished hypothesis in an accepting state is
/// returned; without one, the finished hypothesis satisfying the most
/// constraints wins, ties by log probability. The greedy path always
/// competes among the finished hypotheses.
pub fn cbs_decode(
    scorer: &dyn Scorer,
    sep: TokenId,
    fsm: &ConstraintFsm,
    config: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    if config.beam_width == 0 {
        return Err(DecodeError::BadConfig(
            "beam_width must be at least 1".into(),
        ));
    }
    let mut beams: BTreeMap<usize, Vec<Hypothesis>> = BTreeMap::from([(
        fsm.start(),
        vec![Hypothesis {
            token_ids: Vec::new(),
            token_logprobs: Vec::new(),
            logprob: 0.0,
            fsm_state: fsm.start(),
            finished: false,
        }],
    )]);
    let mut finished: Vec<Hypothesis> = Vec::new();
    let greedy = greedy_decode(scorer, sep, config.max_len)?;
    let mut greedy_ids = greedy.token_ids.clone();
    if greedy.token_logprobs.len() > greedy.token_ids.len() {
        greedy_ids.push(sep);
    }
    finished.push(Hypothesis {
        fsm_state: fsm.run(&greedy.token_ids),
        token_ids: greedy_ids,
        token_logprobs: greedy.token_logprobs,
        logprob: greedy.logprob,
        finished: true,
    });

    while !beams.is_empty() {
        let mut candidates: BTreeMap<usize, Vec<Hypothesis>> = BTreeMap::new();
        for hyp in beams.values().flatten() {
            let lp = scorer.log_probs(&hyp.token_ids)?;
            for (t, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let t = t as TokenId;
                let mut next = hyp.clone();
                next.token_ids.push(t);
                next.token_logprobs.push(l);
                next.logprob += l;
                if t == sep {
                    next.finished = true;
                } else {
                    next.fsm_state = fsm.next(hyp.fsm_state, t);
                    next.finished = next.token_ids.len() == config.max_len;
                }
                candidates.entry(next.fsm_state).or_default().push(next);
            }
        }
        // finished candidates take beam slots, so width 1 follows the greedy path
        for group in candidates.values_mut() {
            group.sort_by(rank);
            group.truncate(config.beam_width);
            let (done, open): (Vec<_>, Vec<_>) = group.drain(..).partition(|h| h.finished);
            finished.extend(done);
            *group = open;
        }
        candidates.retain(|_, g| !g.is_empty());
        beams = candidates;
    }

    let best_accepting = finished
        .iter()
        .filter(|h| fsm.is_accepting(h.fsm_state))
        .min_by(|a, b| rank(a, b));
    let best = match best_accepting {
        Some(h) => h,
        None => finished
            .iter()
            .min_by(|a, b| {
                fsm.satisfied_count(b.fsm_state)
                    .cmp(&fsm.satisfied_count(a.fsm_state))
                    .then_with(|| rank(a, b))
            })
            .ok_or(DecodeError::NoHypothesis)?,
    };
    Ok(best.clone().into_decoded(sep))
}

/// Constrained beam search with a trained encoder for one image.
pub fn cbs_caption(
    params: &Parameters,
    builder: &BatchBuilder,
    blocks: &[TagBlock],
    regions: &[Region],
    fsm: &ConstraintFsm,
    config: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    let scorer = EncoderScorer::new(params, builder, blocks, regions);
    cbs_decode(&scorer, builder.special().sep, fsm, config)
}

/// Token sequences of the given tags, for use as constraints.
pub fn tag_constraints(blocks: &[TagBlock]) -> Vec<Vec<TokenId>> {
    blocks.iter().map(|b| b.token_ids().to_vec()).collect()
}

/// Whether `needle` occurs contiguously in `haystack`.
pub fn contains_sequence(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests;
