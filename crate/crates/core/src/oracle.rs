//! Model-free insertion combinatorics: subsequence sampling, slot candidates,
//! candidate weighting, gold slot distributions and the balanced-tree schedule.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::ModelError;
use crate::parse_ir::{TargetSequence, TargetToken};

/// An order-preserving subsequence of a target, BOS/EOS included.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hypothesis {
    tokens: Vec<TargetToken>,
}

impl Hypothesis {
    pub fn new(tokens: Vec<TargetToken>) -> Self {
        Hypothesis { tokens }
    }

    /// `[BOS, EOS]`.
    pub fn empty() -> Self {
        Hypothesis { tokens: vec![TargetToken::Bos, TargetToken::Eos] }
    }

    pub fn from_body(body: impl IntoIterator<Item = TargetToken>) -> Self {
        Hypothesis { tokens: TargetSequence::from_body(body).into_tokens() }
    }

    pub fn tokens(&self) -> &[TargetToken] {
        &self.tokens
    }

    /// Length `T`, BOS/EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slot_count(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn body(&self) -> &[TargetToken] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn into_sequence(self) -> TargetSequence {
        TargetSequence::from_tokens(self.tokens)
    }

    /// Inserts `tok` into slot `slot` for each pair; slots index the gaps of `self`.
    pub fn insert(&self, insertions: &[(usize, TargetToken)]) -> Hypothesis {
        let mut out = Vec::with_capacity(self.tokens.len() + insertions.len());
        let mut pending = insertions.iter().peekable();
        for (i, tok) in self.tokens.iter().enumerate() {
            out.push(tok.clone());
            while let Some((slot, new)) = pending.peek() {
                if *slot == i {
                    out.push(new.clone());
                    pending.next();
                } else {
                    break;
                }
            }
        }
        Hypothesis { tokens: out }
    }
}

/// The target tokens that may be inserted into one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotCandidates {
    pub slot: usize,
    pub candidates: Vec<TargetToken>,
}

impl SlotCandidates {
    pub fn count(&self) -> usize {
        self.candidates.len()
    }
}

/// Builds the hypothesis keeping body `positions` (sorted, distinct) of `target`,
/// with the candidates of every slot.
pub fn subsequence_at(target: &TargetSequence, positions: &[usize]) -> (Hypothesis, Vec<SlotCandidates>) {
    let body = target.body();
    debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    let mut tokens = Vec::with_capacity(positions.len() + 2);
    tokens.push(TargetToken::Bos);
    tokens.extend(positions.iter().map(|&p| body[p].clone()));
    tokens.push(TargetToken::Eos);
    let mut slots = Vec::with_capacity(positions.len() + 1);
    let mut lo = 0;
    for (slot, hi) in positions.iter().copied().chain(std::iter::once(body.len())).enumerate() {
        slots.push(SlotCandidates { slot, candidates: body[lo..hi].to_vec() });
        lo = hi + 1;
    }
    (Hypothesis { tokens }, slots)
}

/// Uniform k in `0..=n`, then a uniform k-subset of body positions.
pub fn sample_subsequence<R: Rng + ?Sized>(target: &TargetSequence, rng: &mut R) -> (Hypothesis, Vec<SlotCandidates>) {
    let n = target.len();
    let k = rng.random_range(0..=n);
    let mut positions = rand::seq::index::sample(rng, n, k).into_vec();
    positions.sort_unstable();
    subsequence_at(target, &positions)
}

/// Like [`sample_subsequence`] but always keeps every body position matching
/// `keep`; the remaining positions are sampled the same way.
pub fn sample_subsequence_keeping<R, F>(target: &TargetSequence, keep: F, rng: &mut R) -> (Hypothesis, Vec<SlotCandidates>)
where
    R: Rng + ?Sized,
    F: Fn(&TargetToken) -> bool,
{
    let (fixed, free): (Vec<usize>, Vec<usize>) = (0..target.len()).partition(|&p| keep(&target.body()[p]));
    let k = rng.random_range(0..=free.len());
    let mut positions: Vec<usize> = rand::seq::index::sample(rng, free.len(), k).into_iter().map(|i| free[i]).collect();
    positions.extend(fixed);
    positions.sort_unstable();
    subsequence_at(target, &positions)
}

/// Candidate weighting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    /// Softmax over negative distance to the centre of the candidate run.
    Tree { tau: f64 },
    Uniform,
}

impl Weighting {
    pub fn weights(&self, i: usize) -> Result<Vec<f64>, ModelError> {
        match *self {
            Weighting::Tree { tau } => tree_weights(i, tau),
            Weighting::Uniform => uniform_weights(i),
        }
    }
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Tree { tau: 1.0 }
    }
}

/// `w(j) ∝ exp(-|j - (i-1)/2| / tau)` over `i` candidates.
pub fn tree_weights(i: usize, tau: f64) -> Result<Vec<f64>, ModelError> {
    if i == 0 {
        return Err(ModelError::Domain("tree_weights needs at least one candidate".into()));
    }
    if !(tau > 0.0) {
        return Err(ModelError::Domain(format!("tau must be positive, got {tau}")));
    }
    let center = (i as f64 - 1.0) / 2.0;
    let dist: Vec<f64> = (0..i).map(|j| (j as f64 - center).abs()).collect();
    let dmin = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = dist.iter().map(|d| (-(d - dmin) / tau).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / z).collect())
}

pub fn uniform_weights(i: usize) -> Result<Vec<f64>, ModelError> {
    if i == 0 {
        return Err(ModelError::Domain("uniform_weights needs at least one candidate".into()));
    }
    Ok(vec![1.0 / i as f64; i])
}

/// Gold distribution for one slot, keyed by joint-space column.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotTargetDistribution {
    pub probs: BTreeMap<usize, f64>,
    pub weighting: Weighting,
}

impl SlotTargetDistribution {
    /// Dense row of width `width` (`V + m`).
    pub fn dense(&self, width: usize) -> Vec<f64> {
        let mut row = vec![0.0; width];
        for (&k, &p) in &self.probs {
            row[k] += p;
        }
        row
    }
}

/// Point mass on NO_INSERT for an empty slot; otherwise positional weights
/// accumulated per token identity.
pub fn build_slot_distribution(cands: &SlotCandidates, weighting: Weighting, vocab: &Vocabulary) -> SlotTargetDistribution {
    let mut probs = BTreeMap::new();
    if cands.candidates.is_empty() {
        probs.insert(vocab.no_insert(), 1.0);
    } else {
        let weights = weighting.weights(cands.count()).expect("candidate count is positive");
        let unk = vocab.tag_id(&TargetToken::Unk).expect("vocab has <unk>");
        for (tok, w) in cands.candidates.iter().zip(weights) {
            let id = vocab.joint_index(tok).unwrap_or(unk);
            *probs.entry(id).or_insert(0.0) += w;
        }
    }
    SlotTargetDistribution { probs, weighting }
}

/// One step of the balanced-tree schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleStep {
    /// `(slot in the previous hypothesis, token)` pairs, left to right.
    pub insertions: Vec<(usize, TargetToken)>,
    pub hypothesis: Hypothesis,
}

/// Ideal parallel order: each step inserts the median of every non-empty
/// candidate run (left median for even runs).
pub fn oracle_schedule(target: &TargetSequence) -> Vec<ScheduleStep> {
    let body = target.body();
    let mut kept: Vec<usize> = Vec::new();
    let mut steps = Vec::new();
    loop {
        let mut insertions = Vec::new();
        let mut added = Vec::new();
        let mut lo = 0;
        for (slot, hi) in kept.iter().copied().chain(std::iter::once(body.len())).enumerate() {
            if hi > lo {
                let mid = lo + (hi - lo - 1) / 2;
                insertions.push((slot, body[mid].clone()));
                added.push(mid);
            }
            lo = hi + 1;
        }
        if insertions.is_empty() {
            return steps;
        }
        kept.extend(added);
        kept.sort_unstable();
        let (hypothesis, _) = subsequence_at(target, &kept);
        steps.push(ScheduleStep { insertions, hypothesis });
    }
}

/// `ceil(log2(n + 1))`: parallel steps needed to fill a body of length `n`.
pub fn steps_lower_bound(n: usize) -> usize {
    (usize::BITS - n.leading_zeros()) as usize
}

/// Embeds `hyp_body` into `target_body` choosing, among all valid embeddings,
/// one that minimizes the largest remaining schedule depth over its gaps.
/// Ties go to the earliest positions. `None` if `hyp_body` is not a subsequence.
pub fn balanced_alignment(hyp_body: &[TargetToken], target_body: &[TargetToken]) -> Option<Vec<usize>> {
    let k = hyp_body.len();
    let n = target_body.len();
    if k == 0 {
        return Some(Vec::new());
    }
    const NONE: usize = usize::MAX;
    // cost[j][p]: best max-gap depth with hyp[j] placed at p
    let mut cost = vec![vec![NONE; n]; k];
    let mut back = vec![vec![NONE; n]; k];
    for p in 0..n {
        if target_body[p] == hyp_body[0] {
            cost[0][p] = steps_lower_bound(p);
        }
    }
    for j in 1..k {
        for p in j..n {
            if target_body[p] != hyp_body[j] {
                continue;
            }
            for q in (j - 1)..p {
                let prev = cost[j - 1][q];
                if prev == NONE {
                    continue;
                }
                let c = prev.max(steps_lower_bound(p - q - 1));
                if c < cost[j][p] {
                    cost[j][p] = c;
                    back[j][p] = q;
                }
            }
        }
    }
    let mut best = (NONE, NONE);
    for p in 0..n {
        if cost[k - 1][p] != NONE {
            let c = cost[k - 1][p].max(steps_lower_bound(n - 1 - p));
            if c < best.0 {
                best = (c, p);
            }
        }
    }
    if best.0 == NONE {
        return None;
    }
    let mut out = vec![0; k];
    let mut p = best.1;
    for j in (0..k).rev() {
        out[j] = p;
        p = back[j][p];
    }
    Some(out)
}
