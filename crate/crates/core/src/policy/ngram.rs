use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Policy;
use crate::error::{Error, Result};
use crate::vocab::{SequenceState, TokenId, Vocabulary, BOS};

pub const NGRAM_FORMAT_VERSION: u32 = 1;

/// Additive-k smoothed n-gram model:
/// `P(y | ctx) = (count(ctx∘y) + k) / (count(ctx∘·) + k·V)`, where `ctx` is the
/// last `n−1` tokens, left-padded with BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramPolicy {
    order: usize,
    k: f64,
    vocab: Vocabulary,
    counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>,
    totals: BTreeMap<Vec<TokenId>, u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NGramFile {
    format_version: u32,
    n: usize,
    k: f64,
    vocab: Vocabulary,
    counts: Vec<ContextCounts>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextCounts {
    context: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

impl NGramPolicy {
    pub fn train(corpus: &[SequenceState], vocab: &Vocabulary, n: usize, k: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::config("n", "n-gram order must be >= 1"));
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::config("k", "smoothing must be > 0"));
        }
        if corpus.is_empty() {
            return Err(Error::CorpusEmpty);
        }
        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
        for state in corpus {
            if !state.has_eos() {
                return Err(Error::config("corpus", "training sequences must end in EOS"));
            }
            let ids = state.token_ids();
            if let Some(position) = ids.iter().position(|&t| t as usize >= vocab.len()) {
                return Err(Error::UnknownToken { position });
            }
            for t in 1..ids.len() {
                let ctx = context_of(&ids[..t], n);
                *counts.entry(ctx).or_default().entry(ids[t]).or_insert(0) += 1;
            }
        }
        let totals = counts
            .iter()
            .map(|(ctx, next)| (ctx.clone(), next.values().sum()))
            .collect();
        Ok(NGramPolicy {
            order: n,
            k,
            vocab: vocab.clone(),
            counts,
            totals,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Raw smoothed estimate `P(token | prefix)` before BOS masking.
    pub fn prob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        let ctx = context_of(prefix, self.order);
        let v = self.vocab.len() as f64;
        let seen = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&token))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        (seen + self.k) / (total + self.k * v)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = NGramFile {
            format_version: NGRAM_FORMAT_VERSION,
            n: self.order,
            k: self.k,
            vocab: self.vocab.clone(),
            counts: self
                .counts
                .iter()
                .map(|(ctx, next)| ContextCounts {
                    context: ctx.clone(),
                    next: next.iter().map(|(&t, &c)| (t, c)).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::config("format_version", "missing"))? as u32;
        if found != NGRAM_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found,
                expected: NGRAM_FORMAT_VERSION,
            });
        }
        let file: NGramFile = serde_json::from_value(value)?;
        let mut counts = BTreeMap::new();
        for entry in file.counts {
            counts.insert(entry.context, entry.next.into_iter().collect::<BTreeMap<_, _>>());
        }
        let totals = counts
            .iter()
            .map(|(ctx, next): (&Vec<TokenId>, &BTreeMap<TokenId, u64>)| {
                (ctx.clone(), next.values().sum())
            })
            .collect();
        if file.n < 1 || !(file.k > 0.0) {
            return Err(Error::config("policy", "invalid n or k in policy file"));
        }
        Ok(NGramPolicy {
            order: file.n,
            k: file.k,
            vocab: file.vocab,
            counts,
            totals,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        NGramPolicy::from_json(&std::fs::read_to_string(path)?)
    }
}

fn context_of(prefix: &[TokenId], n: usize) -> Vec<TokenId> {
    let width = n - 1;
    let take = prefix.len().min(width);
    let mut ctx = vec![BOS; width - take];
    ctx.extend_from_slice(&prefix[prefix.len() - take..]);
    ctx
}

impl Policy for NGramPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok((0..self.vocab.len() as TokenId)
            .map(|t| self.prob(prefix, t))
            .collect())
    }
}
