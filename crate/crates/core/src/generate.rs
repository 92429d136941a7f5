//! Conditional next-brick generation.
//!
//! Decoding appends one MASK at the next slot and reads the model's
//! distribution there, restricted to the slot's token kind. A candidate
//! placement is scored jointly as `P(position token) * P(brick token |
//! position token appended)`, and only placements that are legal against
//! the current build survive.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brick::{Placement, RelativeOffset};
use crate::error::{Error, Result};
use crate::neural::{predict_rows, LMParams};
use crate::seed;
use crate::tokenize::{brick_token, content_tokens, TokenKind, Vocabulary, BOS, MASK};
use crate::validity::{validate_prefix, Occupancy, PreparedModel};

/// A partially built model with token and occupancy caches kept in step
/// with the committed prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub model: Arc<PreparedModel>,
    pub vocab: Arc<Vocabulary>,
    pub prefix: Vec<usize>,
    pub occupancy: Occupancy,
    /// BOS followed by the content tokens of `prefix`.
    pub tokens: Vec<u32>,
}

impl SessionState {
    pub fn new(model: Arc<PreparedModel>, vocab: Arc<Vocabulary>) -> Self {
        let occupancy = Occupancy::new(model.len());
        Self { model, vocab, prefix: Vec::new(), occupancy, tokens: vec![BOS] }
    }

    pub fn from_prefix(model: Arc<PreparedModel>, vocab: Arc<Vocabulary>, prefix: &[usize]) -> Result<Self> {
        let mut state = Self::new(model, vocab);
        for &idx in prefix {
            commit_step(&mut state, idx)?;
        }
        Ok(state)
    }

    pub fn is_complete(&self) -> bool {
        self.occupancy.is_complete()
    }

    pub fn step(&self) -> usize {
        self.prefix.len()
    }

    pub fn frontier(&self) -> Vec<usize> {
        self.occupancy.frontier(&self.model)
    }

    /// Recomputes both caches from the prefix and compares.
    pub fn caches_consistent(&self) -> bool {
        let Ok(fresh) = Self::from_prefix(self.model.clone(), self.vocab.clone(), &self.prefix) else {
            return false;
        };
        fresh.occupancy == self.occupancy && fresh.tokens == self.tokens
    }
}

pub fn commit_step(state: &mut SessionState, choice: usize) -> Result<()> {
    if let Some(kind) = state.occupancy.check(&state.model, choice) {
        return Err(Error::InvalidChoice(format!("brick {choice} cannot be placed now: {kind:?}")));
    }
    let pm = state.model.clone();
    if let Some(&last) = state.prefix.last() {
        let (toks, _) = content_tokens(&pm.model, &[last, choice], &state.vocab);
        state.tokens.extend_from_slice(&toks[1..]);
    } else {
        let (toks, _) = content_tokens(&pm.model, &[choice], &state.vocab);
        state.tokens.extend_from_slice(&toks);
    }
    state.occupancy.place(&pm, choice);
    state.prefix.push(choice);
    Ok(())
}

/// Reverts the most recent commit and returns the brick it removed.
pub fn undo_step(state: &mut SessionState) -> Result<usize> {
    let idx = state.prefix.pop().ok_or_else(|| Error::InvalidChoice("nothing to undo".into()))?;
    let pm = state.model.clone();
    state.occupancy.remove(&pm, idx);
    let keep = if state.prefix.is_empty() { 1 } else { state.tokens.len() - 2 };
    state.tokens.truncate(keep);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDistribution {
    pub kind: TokenKind,
    /// First token id of the sub-vocabulary; `probs[i]` belongs to `base + i`.
    pub base: u32,
    pub probs: Vec<f64>,
}

impl SlotDistribution {
    pub fn prob(&self, id: u32) -> f64 {
        id.checked_sub(self.base).and_then(|i| self.probs.get(i as usize)).copied().unwrap_or(0.0)
    }
}

/// Distribution at a MASK appended to `tokens`, restricted to `kind` tokens.
pub fn slot_distribution(
    params: &LMParams,
    tokens: &[u32],
    kind: TokenKind,
    vocab: &Vocabulary,
) -> Result<SlotDistribution> {
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.extend_from_slice(tokens);
    ids.push(MASK);
    let row = predict_rows(params, &ids, &[ids.len() - 1])?;
    let range = match kind {
        TokenKind::Brick => vocab.brick_range(),
        _ => vocab.position_range(),
    };
    let mut probs: Vec<f64> = range.clone().map(|id| row[[0, id as usize]]).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(SlotDistribution { kind, base: range.start, probs })
}

/// Distribution over the next slot of `state`: brick tokens for the first
/// brick, otherwise the position token that precedes the next brick.
pub fn next_token_distribution(params: &LMParams, state: &SessionState) -> Result<SlotDistribution> {
    let kind = if state.prefix.is_empty() { TokenKind::Brick } else { TokenKind::Position };
    slot_distribution(params, &state.tokens, kind, &state.vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub placement: Placement,
    pub prob: f64,
    pub position_token: Option<u32>,
    pub brick_token: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub truncated: bool,
}

fn rank(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        b.prob
            .total_cmp(&a.prob)
            .then_with(|| a.placement.zyx_key().cmp(&b.placement.zyx_key()))
            .then(a.index.cmp(&b.index))
    });
}

fn offset_between(pm: &PreparedModel, from: usize, to: usize) -> RelativeOffset {
    let a = pm.placement(from).pos;
    let b = pm.placement(to).pos;
    RelativeOffset([b[0] - a[0], b[1] - a[1], b[2] - a[2]])
}

/// Up to `k` legal next placements ranked by joint model probability.
///
/// Position classes are visited in descending probability and a class is
/// skipped once its own probability falls below the current k-th best joint
/// score, which cannot change the returned top k. A completed build yields
/// an empty set.
pub fn next_brick_candidates(params: &LMParams, state: &SessionState, k: usize) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::InvalidChoice("k must be at least 1".into()));
    }
    if state.is_complete() {
        return Ok(CandidateSet::default());
    }
    let frontier = state.frontier();
    if frontier.is_empty() {
        return Err(Error::NoValidCandidate);
    }
    let pm = &state.model;
    let vocab = &state.vocab;
    let mut out: Vec<Candidate> = Vec::new();
    let mut truncated = false;

    match state.prefix.last() {
        None => {
            let dist = slot_distribution(params, &state.tokens, TokenKind::Brick, vocab)?;
            for &idx in &frontier {
                if let Some(bt) = brick_token(&pm.model, idx, vocab) {
                    out.push(Candidate {
                        index: idx,
                        placement: *pm.placement(idx),
                        prob: dist.prob(bt).max(f64::MIN_POSITIVE),
                        position_token: None,
                        brick_token: bt,
                    });
                }
            }
        }
        Some(&last) => {
            let pos_dist = slot_distribution(params, &state.tokens, TokenKind::Position, vocab)?;
            let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for &idx in &frontier {
                groups.entry(vocab.offset_token(offset_between(pm, last, idx))).or_default().push(idx);
            }
            let mut ordered: Vec<(u32, Vec<usize>)> = groups.into_iter().collect();
            ordered.sort_by(|a, b| pos_dist.prob(b.0).total_cmp(&pos_dist.prob(a.0)).then(a.0.cmp(&b.0)));
            let mut tokens = state.tokens.clone();
            for (pos_token, members) in ordered {
                let p_pos = pos_dist.prob(pos_token);
                if out.len() >= k {
                    rank(&mut out);
                    if p_pos < out[k - 1].prob {
                        truncated = true;
                        break;
                    }
                }
                tokens.truncate(state.tokens.len());
                tokens.push(pos_token);
                let brick_dist = slot_distribution(params, &tokens, TokenKind::Brick, vocab)?;
                for idx in members {
                    if let Some(bt) = brick_token(&pm.model, idx, vocab) {
                        out.push(Candidate {
                            index: idx,
                            placement: *pm.placement(idx),
                            prob: (p_pos * brick_dist.prob(bt)).max(f64::MIN_POSITIVE),
                            position_token: Some(pos_token),
                            brick_token: bt,
                        });
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidCandidate);
    }
    rank(&mut out);
    if out.len() > k {
        out.truncate(k);
        truncated = true;
    }
    Ok(CandidateSet { candidates: out, truncated })
}

/// Oracle frontier as a candidate set. With parameters, placements are
/// ranked by the model's brick-token score at the slot after an unknown
/// position; without, every legal placement gets equal probability.
pub fn frontier_candidates(params: Option<&LMParams>, state: &SessionState, k: usize) -> CandidateSet {
    let frontier = state.frontier();
    let pm = &state.model;
    let mut tokens = state.tokens.clone();
    if !state.prefix.is_empty() {
        tokens.push(MASK);
    }
    let dist = params.and_then(|p| slot_distribution(p, &tokens, TokenKind::Brick, &state.vocab).ok());
    let mut out: Vec<Candidate> = frontier
        .iter()
        .map(|&idx| {
            let bt = brick_token(&pm.model, idx, &state.vocab).unwrap_or(crate::tokenize::UNK);
            let score = dist.as_ref().map_or(1.0, |d| d.prob(bt).max(f64::MIN_POSITIVE));
            Candidate {
                index: idx,
                placement: *pm.placement(idx),
                prob: score,
                position_token: state.prefix.last().map(|&l| state.vocab.offset_token(offset_between(pm, l, idx))),
                brick_token: bt,
            }
        })
        .collect();
    let total: f64 = out.iter().map(|c| c.prob).sum();
    out.iter_mut().for_each(|c| c.prob /= total);
    rank(&mut out);
    let truncated = out.len() > k;
    out.truncate(k);
    CandidateSet { candidates: out, truncated }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sampled(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Prefix followed by the generated continuation.
    pub sequence: Vec<usize>,
    pub prefix_len: usize,
    /// Set when generation stopped early without completing the model.
    pub truncated: bool,
}

impl Generation {
    pub fn continuation(&self) -> &[usize] {
        &self.sequence[self.prefix_len..]
    }
}

/// Extends `prefix` by up to `horizon` bricks.
pub fn generate_conditional(
    params: &LMParams,
    model: Arc<PreparedModel>,
    vocab: Arc<Vocabulary>,
    prefix: &[usize],
    horizon: usize,
    decode: Decode,
) -> Result<Generation> {
    let report = validate_prefix(prefix, &model);
    if !report.ok {
        return Err(Error::InvalidChoice(format!("prefix is not a legal partial build: {:?}", report.first_violation)));
    }
    let mut state = SessionState::from_prefix(model, vocab, prefix)?;
    let mut rng = match decode {
        Decode::Sampled(s) => Some(seed::rng(s, "decode", 0)),
        Decode::Greedy => None,
    };
    let k = if rng.is_some() { usize::MAX } else { 1 };
    let mut truncated = false;
    for _ in 0..horizon {
        if state.is_complete() {
            break;
        }
        let set = match next_brick_candidates(params, &state, k) {
            Ok(set) => set,
            Err(Error::NoValidCandidate | Error::SequenceTooLong { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let choice = match rng.as_mut() {
            None => set.candidates[0].index,
            Some(rng) => {
                let total: f64 = set.candidates.iter().map(|c| c.prob).sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = set.candidates[set.candidates.len() - 1].index;
                for c in &set.candidates {
                    if u < c.prob {
                        pick = c.index;
                        break;
                    }
                    u -= c.prob;
                }
                pick
            }
        };
        commit_step(&mut state, choice)?;
    }
    Ok(Generation { sequence: state.prefix, prefix_len: prefix.len(), truncated })
}
