//! Vocabulary, tokenization and sequence-state semantics.
//!
//! Token ids are dense `0..V`. Ids 0 and 1 are always reserved for the
//! begin- and end-of-sequence markers; the remaining units are sorted
//! lexicographically by surface form so that vocabularies built from the
//! same corpus are identical.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BOS_TEXT: &str = "<s>";
pub const EOS_TEXT: &str = "</s>";

/// How raw text is cut into vocabulary units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizeMode {
    Char,
    Smiles,
}

impl std::str::FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizeMode::Char),
            "smiles" => Ok(TokenizeMode::Smiles),
            other => Err(Error::config("mode", format!("unknown tokenize mode `{other}`"))),
        }
    }
}

/// Split `text` into units.
///
/// In SMILES mode, bracket atoms `[...]`, the two-letter elements `Cl`/`Br`
/// and `%NN` ring labels are kept whole; everything else is one character.
/// An unterminated `[` is emitted as a single unit.
pub fn split_units(text: &str, mode: TokenizeMode) -> Vec<&str> {
    let mut units = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let len = match mode {
            TokenizeMode::Char => c.len_utf8(),
            TokenizeMode::Smiles => smiles_unit_len(rest),
        };
        units.push(&rest[..len]);
        rest = &rest[len..];
    }
    units
}

fn smiles_unit_len(s: &str) -> usize {
    let b = s.as_bytes();
    match b[0] {
        b'[' => match s.find(']') {
            Some(end) => end + 1,
            None => 1,
        },
        b'C' if b.get(1) == Some(&b'l') => 2,
        b'B' if b.get(1) == Some(&b'r') => 2,
        b'%' if b.len() >= 3 && b[1].is_ascii_digit() && b[2].is_ascii_digit() => 3,
        _ => s.chars().next().map_or(1, char::len_utf8),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub text: String,
}

/// An ordered set of units with reserved BOS/EOS ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    mode: TokenizeMode,
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    mode: TokenizeMode,
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocabulary::from_tokens(repr.mode, repr.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            mode: v.mode,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Build a vocabulary from every distinct unit in `corpus_lines`.
    pub fn build<S: AsRef<str>>(corpus_lines: &[S], mode: TokenizeMode) -> Result<Self> {
        if corpus_lines.is_empty() {
            return Err(Error::CorpusEmpty);
        }
        let units: BTreeSet<&str> = corpus_lines
            .iter()
            .flat_map(|line| split_units(line.as_ref(), mode))
            .collect();
        let tokens = [BOS_TEXT, EOS_TEXT]
            .into_iter()
            .chain(units)
            .map(str::to_owned)
            .collect();
        Vocabulary::from_tokens(mode, tokens)
    }

    /// Rebuild a vocabulary from an explicit ordered token list. The first two
    /// entries must be the BOS and EOS markers.
    pub fn from_tokens(mode: TokenizeMode, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != BOS_TEXT || tokens[1] != EOS_TEXT {
            return Err(Error::config("vocab", "first two tokens must be BOS and EOS"));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, text) in tokens.iter().enumerate() {
            if text.is_empty() {
                return Err(Error::config("vocab", "empty token surface form"));
            }
            if lookup.insert(text.clone(), id as TokenId).is_some() {
                return Err(Error::config("vocab", format!("duplicate token `{text}`")));
            }
        }
        Ok(Vocabulary {
            mode,
            tokens,
            lookup,
        })
    }

    pub fn mode(&self) -> TokenizeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, text: &str) -> Option<TokenId> {
        self.lookup.get(text).copied()
    }

    pub fn text(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.tokens.iter().enumerate().map(|(id, text)| Token {
            id: id as TokenId,
            text: text.clone(),
        })
    }

    /// Ids of every non-special token, ascending.
    pub fn unit_ids(&self) -> impl Iterator<Item = TokenId> {
        2..self.tokens.len() as TokenId
    }

    /// `[BOS] ∘ units ∘ [EOS]`.
    pub fn tokenize(&self, text: &str) -> Result<SequenceState> {
        let units = split_units(text, self.mode);
        let mut ids = Vec::with_capacity(units.len() + 2);
        ids.push(BOS);
        for (position, unit) in units.iter().enumerate() {
            match self.lookup.get(*unit) {
                Some(&id) if id != BOS && id != EOS => ids.push(id),
                _ => return Err(Error::UnknownToken { position }),
            }
        }
        ids.push(EOS);
        Ok(SequenceState {
            token_ids: ids,
            terminal: true,
        })
    }

    /// Concatenate surface forms, dropping the leading BOS and trailing EOS.
    pub fn detokenize(&self, state: &SequenceState) -> Result<String> {
        let mut out = String::new();
        for (position, &id) in state.token_ids.iter().enumerate() {
            let text = self
                .text(id)
                .ok_or(Error::UnknownToken { position })?;
            if id != BOS && id != EOS {
                out.push_str(text);
            }
        }
        Ok(out)
    }
}

/// A token sequence rooted at BOS. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SequenceState {
    token_ids: Vec<TokenId>,
    terminal: bool,
}

impl SequenceState {
    /// The single initial state `[BOS]`.
    pub fn root() -> Self {
        SequenceState {
            token_ids: vec![BOS],
            terminal: false,
        }
    }

    /// Validate and wrap an explicit id list. `horizon` decides length
    /// truncation.
    pub fn from_ids(token_ids: Vec<TokenId>, horizon: usize) -> Result<Self> {
        if token_ids.first() != Some(&BOS) {
            return Err(Error::config("state", "sequence must start with BOS"));
        }
        let last = token_ids.len() - 1;
        for (i, &id) in token_ids.iter().enumerate().skip(1) {
            if id == BOS || (id == EOS && i != last) {
                return Err(Error::UnknownToken { position: i });
            }
        }
        let terminal = is_terminal(&token_ids, horizon);
        Ok(SequenceState {
            token_ids,
            terminal,
        })
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Ended by EOS (as opposed to truncated at the length cap).
    pub fn has_eos(&self) -> bool {
        self.token_ids.len() > 1 && self.token_ids.last() == Some(&EOS)
    }

    /// Tokens after BOS, excluding a trailing EOS.
    pub fn interior(&self) -> &[TokenId] {
        let end = if self.has_eos() {
            self.token_ids.len() - 1
        } else {
            self.token_ids.len()
        };
        &self.token_ids[1..end]
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `self ∘ token`. Panics on a terminal state or a BOS token.
    pub fn extend(&self, token: TokenId, horizon: usize) -> SequenceState {
        assert!(!self.terminal, "cannot extend a terminal state");
        assert_ne!(token, BOS, "BOS may only appear at position 0");
        let mut token_ids = Vec::with_capacity(self.token_ids.len() + 1);
        token_ids.extend_from_slice(&self.token_ids);
        token_ids.push(token);
        let terminal = is_terminal(&token_ids, horizon);
        SequenceState {
            token_ids,
            terminal,
        }
    }

    pub fn starts_with(&self, prefix: &SequenceState) -> bool {
        self.token_ids.starts_with(&prefix.token_ids)
    }
}

impl fmt::Display for SequenceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.token_ids)
    }
}

/// A sequence is terminal once it ends in EOS or carries more than `horizon`
/// tokens after BOS. The latter is a truncation: the state holds `horizon`
/// interior tokens plus one token that was not EOS.
pub fn is_terminal(token_ids: &[TokenId], horizon: usize) -> bool {
    (token_ids.len() > 1 && token_ids.last() == Some(&EOS)) || token_ids.len() >= horizon.saturating_add(2)
}

/// Read a corpus file: one sequence per line, blank lines ignored.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}
