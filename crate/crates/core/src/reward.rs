//! Multi-critic normalized reward.
//!
//! A complete sequence is scored by every critic, each raw score is min-max
//! normalized onto `[0, 1]` (mirrored for critics that minimize), and the
//! normalized values are summed. Sequences rejected by the validator, and
//! sequences truncated at the length cap, score 0.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::vocab::{SequenceState, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Raw scoring behavior of one critic.
pub trait CriticEval: Send + Sync + fmt::Debug {
    fn score(&self, sequence: &str) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct CriticSpec {
    pub name: String,
    pub direction: Direction,
    pub bound_min: f64,
    pub bound_max: f64,
    pub evaluator: Arc<dyn CriticEval>,
}

impl CriticSpec {
    pub fn new(
        name: impl Into<String>,
        direction: Direction,
        bound_min: f64,
        bound_max: f64,
        evaluator: Arc<dyn CriticEval>,
    ) -> Result<Self> {
        let name = name.into();
        if !(bound_min < bound_max) || !bound_min.is_finite() || !bound_max.is_finite() {
            return Err(Error::InvalidCritic(format!(
                "{name}: bounds must satisfy min < max, got [{bound_min}, {bound_max}]"
            )));
        }
        Ok(CriticSpec {
            name,
            direction,
            bound_min,
            bound_max,
            evaluator,
        })
    }
}

/// Min-max normalize a raw score onto `[0, 1]`, clamping out-of-range values.
pub fn normalize(raw: f64, spec: &CriticSpec) -> f64 {
    let span = spec.bound_max - spec.bound_min;
    let x = match spec.direction {
        Direction::Maximize => (raw - spec.bound_min) / span,
        Direction::Minimize => (spec.bound_max - raw) / span,
    };
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Well-formedness check for SMILES-like strings: balanced parentheses,
/// paired ring-closure labels (single digits and `%NN`), closed non-empty
/// bracket atoms, and a non-empty string.
pub fn validity_check(smiles: &str) -> bool {
    if smiles.is_empty() {
        return false;
    }
    let bytes = smiles.as_bytes();
    let mut depth = 0i64;
    let mut open_rings = [false; 100];
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            b'[' => match smiles[i + 1..].find([']', '[']) {
                Some(0) | None => return false,
                Some(off) if bytes[i + 1 + off] == b'[' => return false,
                Some(off) => i += off + 1,
            },
            b']' => return false,
            b'%' => {
                let label = match (bytes.get(i + 1), bytes.get(i + 2)) {
                    (Some(a), Some(b)) if a.is_ascii_digit() && b.is_ascii_digit() => {
                        ((a - b'0') * 10 + (b - b'0')) as usize
                    }
                    _ => return false,
                };
                open_rings[label] = !open_rings[label];
                i += 2;
            }
            d if d.is_ascii_digit() => {
                let label = (d - b'0') as usize;
                open_rings[label] = !open_rings[label];
            }
            _ => {}
        }
        i += 1;
    }
    depth == 0 && open_rings.iter().all(|open| !open)
}

/// Decides whether a complete sequence is eligible for a non-zero reward.
#[derive(Clone, Default)]
pub enum Validator {
    #[default]
    Smiles,
    AcceptAll,
    Custom(Arc<dyn Fn(&str) -> bool + Send + Sync>),
}

impl Validator {
    pub fn accepts(&self, sequence: &str) -> bool {
        match self {
            Validator::Smiles => validity_check(sequence),
            Validator::AcceptAll => true,
            Validator::Custom(f) => f(sequence),
        }
    }
}

impl fmt::Debug for Validator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Validator::Smiles => f.write_str("Smiles"),
            Validator::AcceptAll => f.write_str("AcceptAll"),
            Validator::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RewardSpec {
    critics: Vec<CriticSpec>,
    validator: Validator,
}

/// Per-critic detail behind one combined reward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardBreakdown {
    pub total: f64,
    pub valid: bool,
    /// Raw critic scores in critic order; `None` where the critic failed or
    /// the sequence was rejected.
    pub raw: Vec<Option<f64>>,
    pub normalized: Vec<f64>,
    pub errors: Vec<String>,
}

impl RewardSpec {
    pub fn new(critics: Vec<CriticSpec>, validator: Validator) -> Result<Self> {
        if critics.is_empty() {
            return Err(Error::InvalidCritic("at least one critic is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &critics {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidCritic(format!("duplicate critic name `{}`", c.name)));
            }
        }
        Ok(RewardSpec { critics, validator })
    }

    pub fn critics(&self) -> &[CriticSpec] {
        &self.critics
    }

    pub fn validator(&self) -> &Validator {
        &self.validator
    }

    /// Score a complete sequence given as text. `complete` is false for
    /// sequences cut off at the length cap.
    pub fn evaluate(&self, text: &str, complete: bool) -> RewardBreakdown {
        let n = self.critics.len();
        if !complete || !self.validator.accepts(text) {
            return RewardBreakdown {
                total: 0.0,
                valid: false,
                raw: vec![None; n],
                normalized: vec![0.0; n],
                errors: Vec::new(),
            };
        }
        let mut out = RewardBreakdown {
            valid: true,
            ..Default::default()
        };
        for critic in &self.critics {
            match critic.evaluator.score(text) {
                Ok(raw) if raw.is_finite() => {
                    let x = normalize(raw, critic);
                    out.raw.push(Some(raw));
                    out.normalized.push(x);
                    out.total += x;
                }
                Ok(raw) => {
                    out.raw.push(None);
                    out.normalized.push(0.0);
                    out.errors.push(format!("{}: non-finite score {raw}", critic.name));
                }
                Err(e) => {
                    out.raw.push(None);
                    out.normalized.push(0.0);
                    out.errors.push(format!("{}: {e}", critic.name));
                }
            }
        }
        out
    }
}

/// Reward of a terminal sequence under `spec`.
pub fn combined_reward(
    state: &SequenceState,
    vocab: &Vocabulary,
    spec: &RewardSpec,
) -> Result<RewardBreakdown> {
    if !state.is_terminal() {
        return Err(Error::config("sequence", "reward requires a terminal sequence"));
    }
    let text = vocab.detokenize(state)?;
    Ok(spec.evaluate(&text, state.has_eos()))
}

/// A finished sequence handed to a reward function.
#[derive(Debug, Clone, Copy)]
pub struct Completion<'a> {
    pub state: &'a SequenceState,
    pub text: &'a str,
}

/// Total reward over terminal sequences, as consumed by the search.
pub trait RewardFn: Send + Sync {
    fn reward(&self, completion: Completion<'_>) -> f64;
}

impl RewardFn for RewardSpec {
    fn reward(&self, completion: Completion<'_>) -> f64 {
        let b = self.evaluate(completion.text, completion.state.has_eos());
        for e in &b.errors {
            log::warn!("critic failed on `{}`: {e}", completion.text);
        }
        b.total
    }
}

impl<F> RewardFn for F
where
    F: Fn(Completion<'_>) -> f64 + Send + Sync,
{
    fn reward(&self, completion: Completion<'_>) -> f64 {
        self(completion)
    }
}


/// `−|len − target|`, length in characters.
#[derive(Debug, Clone)]
pub struct LengthWindow {
    pub target: f64,
}

impl CriticEval for LengthWindow {
    fn score(&self, sequence: &str) -> Result<f64> {
        Ok(-(sequence.chars().count() as f64 - self.target).abs())
    }
}

/// Overlapping occurrences of a substring.
#[derive(Debug, Clone)]
pub struct MotifCount {
    pub motif: String,
}

impl CriticEval for MotifCount {
    fn score(&self, sequence: &str) -> Result<f64> {
        let count = sequence
            .char_indices()
            .filter(|(i, _)| sequence[*i..].starts_with(&self.motif))
            .count();
        Ok(count as f64)
    }
}

/// Fraction of characters equal to `ch` (0 for the empty string).
#[derive(Debug, Clone)]
pub struct CharBalance {
    pub ch: char,
}

impl CriticEval for CharBalance {
    fn score(&self, sequence: &str) -> Result<f64> {
        let total = sequence.chars().count();
        if total == 0 {
            return Ok(0.0);
        }
        Ok(sequence.chars().filter(|&c| c == self.ch).count() as f64 / total as f64)
    }
}

/// Fixed sequence → score table; unlisted sequences get `default`.
#[derive(Debug, Clone)]
pub struct TableLookup {
    pub table: BTreeMap<String, f64>,
    pub default: f64,
}

impl CriticEval for TableLookup {
    fn score(&self, sequence: &str) -> Result<f64> {
        Ok(self.table.get(sequence).copied().unwrap_or(self.default))
    }
}

/// Scores sequences with `POST /v1/score`.
#[derive(Debug, Clone)]
pub struct RemoteCritic {
    http: JsonClient,
}

impl RemoteCritic {
    pub fn new(endpoint: &str, timeout_ms: u64, retries: u32) -> Result<Self> {
        Ok(RemoteCritic {
            http: JsonClient::new(endpoint, timeout_ms, retries)?,
        })
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    sequence: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl CriticEval for RemoteCritic {
    fn score(&self, sequence: &str) -> Result<f64> {
        let body = self.http.post("/v1/score", &ScoreRequest { sequence })?;
        let r: ScoreResponse = serde_json::from_value(body)
            .map_err(|e| Error::Protocol(format!("bad score payload: {e}")))?;
        Ok(r.score)
    }
}

/// Declarative critic description, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub name: String,
    pub kind: String,
    pub direction: Direction,
    pub min: f64,
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motif: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ch: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retries: Option<u32>,
}

impl CriticConfig {
    pub fn new(name: &str, kind: &str, direction: Direction, min: f64, max: f64) -> Self {
        CriticConfig {
            name: name.into(),
            kind: kind.into(),
            direction,
            min,
            max,
            target: None,
            motif: None,
            ch: None,
            table: None,
            endpoint: None,
            timeout_ms: None,
            retries: None,
        }
    }

    /// Build the critic, including the `remote` kind.
    pub fn build(&self) -> Result<CriticSpec> {
        if self.kind == "remote" {
            let endpoint = self
                .endpoint
                .as_deref()
                .ok_or_else(|| self.missing("endpoint"))?;
            return remote_critic(
                &self.name,
                self.direction,
                self.min,
                self.max,
                endpoint,
                self.timeout_ms.unwrap_or(10_000),
                self.retries.unwrap_or(2),
            );
        }
        builtin_critic(&self.kind, self)
    }

    fn missing(&self, field: &str) -> Error {
        Error::InvalidCritic(format!("{}: kind `{}` requires `{field}`", self.name, self.kind))
    }
}

/// Build one of the desk-scale critics: `length_window`, `motif_count`,
/// `char_balance` or `table_lookup`.
pub fn builtin_critic(kind: &str, params: &CriticConfig) -> Result<CriticSpec> {
    let evaluator: Arc<dyn CriticEval> = match kind {
        "length_window" => Arc::new(LengthWindow {
            target: params.target.ok_or_else(|| params.missing("target"))?,
        }),
        "motif_count" => {
            let motif = params.motif.clone().ok_or_else(|| params.missing("motif"))?;
            if motif.is_empty() {
                return Err(Error::InvalidCritic(format!("{}: empty motif", params.name)));
            }
            Arc::new(MotifCount { motif })
        }
        "char_balance" => Arc::new(CharBalance {
            ch: params.ch.ok_or_else(|| params.missing("ch"))?,
        }),
        "table_lookup" => Arc::new(TableLookup {
            table: params.table.clone().ok_or_else(|| params.missing("table"))?,
            default: params.min,
        }),
        other => {
            return Err(Error::InvalidCritic(format!(
                "{}: unknown critic kind `{other}`",
                params.name
            )))
        }
    };
    CriticSpec::new(params.name.clone(), params.direction, params.min, params.max, evaluator)
}

pub fn remote_critic(
    name: &str,
    direction: Direction,
    bound_min: f64,
    bound_max: f64,
    endpoint: &str,
    timeout_ms: u64,
    retries: u32,
) -> Result<CriticSpec> {
    CriticSpec::new(
        name,
        direction,
        bound_min,
        bound_max,
        Arc::new(RemoteCritic::new(endpoint, timeout_ms, retries)?),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValidatorKind {
    #[default]
    Smiles,
    Any,
}

impl From<ValidatorKind> for Validator {
    fn from(k: ValidatorKind) -> Self {
        match k {
            ValidatorKind::Smiles => Validator::Smiles,
            ValidatorKind::Any => Validator::AcceptAll,
        }
    }
}
