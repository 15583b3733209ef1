//! Next-token policies.
//!
//! Every policy reports raw (possibly unnormalized) next-token weights for a
//! prefix; [`Policy::next_dist`] turns those into a [`ProbDist`] with the BOS
//! entry masked out.

mod ngram;
mod remote;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{SequenceState, TokenId, BOS};

pub use ngram::{NGramPolicy, NGRAM_FORMAT_VERSION};
pub use remote::RemotePolicyClient;

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Wrap an already-normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("bad entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(ProbDist(probs))
    }

    /// Normalize non-negative weights.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!("bad weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("no positive mass".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(ProbDist(weights))
    }

    /// Normalize log-probabilities (any finite offset).
    pub fn from_logprobs(logprobs: &[f64]) -> Result<Self> {
        if logprobs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::InvalidDistribution("non-finite log-probability".into()));
        }
        let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidDistribution("no positive mass".into()));
        }
        ProbDist::from_weights(logprobs.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn uniform(len: usize) -> Self {
        ProbDist(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.0.get(id as usize).copied().unwrap_or(0.0)
    }

    /// Highest-probability id; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Ids with positive mass, by descending probability then ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.0.len() as TokenId)
            .filter(|&i| self.0[i as usize] > 0.0)
            .collect();
        ids.sort_by(|&a, &b| {
            self.0[b as usize]
                .total_cmp(&self.0[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }
}

/// `π_τ(a) ∝ π(a)^{1/τ}`, computed in log space. Zero entries stay zero.
pub fn apply_temperature(dist: &ProbDist, tau: f64) -> Result<ProbDist> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if tau == 1.0 {
        return Ok(dist.clone());
    }
    let max_log = dist
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights = dist
        .probs()
        .iter()
        .map(|&p| {
            if p > 0.0 {
                ((p.ln() - max_log) / tau).exp()
            } else {
                0.0
            }
        })
        .collect();
    ProbDist::from_weights(weights)
}

/// The next-token policy contract.
pub trait Policy: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Non-negative weights over the vocabulary for the token following
    /// `prefix`. Need not be normalized; the BOS entry is ignored.
    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;

    fn next_dist(&self, state: &SequenceState) -> Result<ProbDist> {
        if state.is_terminal() {
            return Err(Error::TerminalState);
        }
        let mut weights = self.raw_probs(state.token_ids())?;
        if weights.len() != self.vocab_size() {
            return Err(Error::InvalidDistribution(format!(
                "policy returned {} entries for vocab of {}",
                weights.len(),
                self.vocab_size()
            )));
        }
        weights[BOS as usize] = 0.0;
        ProbDist::from_weights(weights)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).raw_probs(prefix)
    }
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).raw_probs(prefix)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).raw_probs(prefix)
    }
}

/// Equal weight on every token.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    vocab_size: usize,
}

impl UniformPolicy {
    pub fn new(vocab_size: usize) -> Self {
        UniformPolicy { vocab_size }
    }
}

impl Policy for UniformPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn raw_probs(&self, _prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(vec![1.0; self.vocab_size])
    }
}

/// Explicit prefix → weights table with a fallback row. Used for toy
/// environments and tests.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    vocab_size: usize,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
    fallback: Vec<f64>,
}

impl TablePolicy {
    /// A table whose unlisted prefixes fall back to `fallback`.
    pub fn new(fallback: Vec<f64>) -> Self {
        TablePolicy {
            vocab_size: fallback.len(),
            rows: HashMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, prefix: Vec<TokenId>, weights: Vec<f64>) -> &mut Self {
        assert_eq!(weights.len(), self.vocab_size, "row width must match vocab");
        self.rows.insert(prefix, weights);
        self
    }

    pub fn with(mut self, prefix: Vec<TokenId>, weights: Vec<f64>) -> Self {
        self.insert(prefix, weights);
        self
    }

    pub fn row(&self, prefix: &[TokenId]) -> &[f64] {
        self.rows.get(prefix).unwrap_or(&self.fallback)
    }
}

impl Policy for TablePolicy {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.row(prefix).to_vec())
    }
}
