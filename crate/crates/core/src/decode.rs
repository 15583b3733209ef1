//! Decoding primitives: Top-PK filtering, beam search, top-k sampling,
//! Shannon entropy and the e-step lookahead entropy.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::{apply_temperature, Policy, ProbDist};
use crate::vocab::{SequenceState, TokenId};

/// Candidate actions, by descending probability then ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSet(Vec<TokenId>);

impl ActionSet {
    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }
}

/// Keep the most probable tokens until their cumulative mass reaches `p`,
/// but never more than `k` of them. Zero-probability tokens are never kept.
pub fn top_pk(dist: &ProbDist, p: f64, k: usize) -> Result<ActionSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidFilter(format!("p must be in (0, 1], got {p}")));
    }
    if k < 1 {
        return Err(Error::InvalidFilter("k must be >= 1".into()));
    }
    let ranked = dist.ranked();
    let mut cumulative = 0.0;
    let mut cut = ranked.len();
    for (i, &t) in ranked.iter().enumerate() {
        cumulative += dist.prob(t);
        if cumulative >= p {
            cut = i + 1;
            break;
        }
    }
    let mut ids = ranked;
    ids.truncate(cut.min(k));
    Ok(ActionSet(ids))
}

/// The `k` most probable tokens, ignoring cumulative mass.
pub fn top_k(dist: &ProbDist, k: usize) -> Result<ActionSet> {
    if k < 1 {
        return Err(Error::InvalidFilter("k must be >= 1".into()));
    }
    let mut ids = dist.ranked();
    ids.truncate(k);
    Ok(ActionSet(ids))
}

/// Every token with positive probability.
pub fn full_support(dist: &ProbDist) -> ActionSet {
    ActionSet(dist.ranked())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &ProbDist) -> f64 {
    let h: f64 = dist
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    state: SequenceState,
    score: f64,
}

/// Beam search on cumulative log-probability. Finished hypotheses stay in the
/// beam and compete with open ones; the search ends once every survivor is
/// terminal. Ties go to the lexicographically smaller id sequence.
pub fn beam_search<P: Policy + ?Sized>(
    policy: &P,
    prefix: &SequenceState,
    beam: usize,
    horizon: usize,
) -> Result<Vec<SequenceState>> {
    if prefix.is_terminal() {
        return Err(Error::TerminalState);
    }
    if beam < 1 {
        return Err(Error::InvalidFilter("beam width must be >= 1".into()));
    }
    let mut hyps = vec![Hypothesis {
        state: prefix.clone(),
        score: 0.0,
    }];
    while hyps.iter().any(|h| !h.state.is_terminal()) {
        let mut next = Vec::new();
        for h in hyps {
            if h.state.is_terminal() {
                next.push(h);
                continue;
            }
            let dist = policy.next_dist(&h.state)?;
            for (t, &p) in dist.probs().iter().enumerate() {
                if p > 0.0 {
                    next.push(Hypothesis {
                        state: h.state.extend(t as TokenId, horizon),
                        score: h.score + p.ln(),
                    });
                }
            }
        }
        next.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.state.token_ids().cmp(b.state.token_ids()))
        });
        next.truncate(beam);
        hyps = next;
    }
    Ok(hyps.into_iter().map(|h| h.state).collect())
}

/// Argmax decoding to a terminal state.
pub fn greedy_decode<P: Policy + ?Sized>(
    policy: &P,
    prefix: &SequenceState,
    horizon: usize,
) -> Result<SequenceState> {
    let mut state = prefix.clone();
    while !state.is_terminal() {
        let t = policy.next_dist(&state)?.argmax();
        state = state.extend(t, horizon);
    }
    Ok(state)
}

/// Sample to a terminal state, drawing each token from the renormalized top
/// `k` of the policy.
pub fn sample_topk<P: Policy + ?Sized>(
    policy: &P,
    prefix: &SequenceState,
    k: usize,
    horizon: usize,
    rng_seed: u64,
) -> Result<SequenceState> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_topk_with(policy, prefix, k, horizon, &mut rng)
}

pub fn sample_topk_with<P: Policy + ?Sized, R: Rng>(
    policy: &P,
    prefix: &SequenceState,
    k: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<SequenceState> {
    let mut state = prefix.clone();
    while !state.is_terminal() {
        let dist = policy.next_dist(&state)?;
        let support = top_k(&dist, k)?;
        let total: f64 = support.iter().map(|t| dist.prob(t)).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = support.as_slice()[support.len() - 1];
        for t in support.iter() {
            u -= dist.prob(t);
            if u < 0.0 {
                pick = t;
                break;
            }
        }
        state = state.extend(pick, horizon);
    }
    Ok(state)
}

/// Settings for [`lookahead_entropy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookaheadParams {
    pub steps: usize,
    pub tau: f64,
    pub horizon: usize,
    /// Restrict each entropy to the renormalized Top-PK set `(p, k)`.
    pub top_pk: Option<(f64, usize)>,
    /// Divide each entropy by `ln V`.
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MemoEntry {
    entropy: f64,
    greedy: TokenId,
}

/// Per-state entropy of `π_τ` and its greedy successor, for one search.
#[derive(Debug, Default)]
pub struct EntropyMemo {
    entries: HashMap<Vec<TokenId>, MemoEntry>,
}

impl EntropyMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, state: &SequenceState) -> Option<f64> {
        self.entries.get(state.token_ids()).map(|e| e.entropy)
    }

    fn lookup<P: Policy + ?Sized>(
        &mut self,
        policy: &P,
        state: &SequenceState,
        params: &LookaheadParams,
    ) -> Result<MemoEntry> {
        if let Some(e) = self.entries.get(state.token_ids()) {
            return Ok(*e);
        }
        let entry = step_entropy(policy, state, params)?;
        self.entries.insert(state.token_ids().to_vec(), entry);
        Ok(entry)
    }
}

fn step_entropy<P: Policy + ?Sized>(
    policy: &P,
    state: &SequenceState,
    params: &LookaheadParams,
) -> Result<MemoEntry> {
    let dist = apply_temperature(&policy.next_dist(state)?, params.tau)?;
    let greedy = dist.argmax();
    let mut h = match params.top_pk {
        None => entropy(&dist),
        Some((p, k)) => {
            let kept = top_pk(&dist, p, k)?;
            let mut w = vec![0.0; dist.len()];
            for t in kept.iter() {
                w[t as usize] = dist.prob(t);
            }
            entropy(&ProbDist::from_weights(w)?)
        }
    };
    if params.normalized {
        let max = (dist.len() as f64).ln();
        h = if max > 0.0 { h / max } else { 0.0 };
    }
    Ok(MemoEntry { entropy: h, greedy })
}

/// Mean entropy of `π_τ` along a greedy walk of up to `steps` states starting
/// at `child`. Zero steps yields the neutral factor 1; a terminal child
/// yields 0. The walk stops early at a terminal state.
pub fn lookahead_entropy<P: Policy + ?Sized>(
    policy: &P,
    child: &SequenceState,
    params: &LookaheadParams,
    memo: &mut EntropyMemo,
) -> Result<f64> {
    if params.steps == 0 {
        return Ok(1.0);
    }
    if child.is_terminal() {
        return Ok(0.0);
    }
    let mut state = child.clone();
    let mut sum = 0.0;
    let mut recorded = 0usize;
    for _ in 0..params.steps {
        let entry = memo.lookup(policy, &state, params)?;
        sum += entry.entropy;
        recorded += 1;
        state = state.extend(entry.greedy, params.horizon);
        if state.is_terminal() {
            break;
        }
    }
    Ok(sum / recorded as f64)
}
