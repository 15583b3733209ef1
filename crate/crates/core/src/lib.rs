//! Entropy-reinforced tree search for guided sequence decoding.
//!
//! A next-token [`Policy`] is steered toward sequences that maximize a
//! multi-critic reward. The search ([`search`]) grows a tree over token
//! prefixes, scores children with UCT, P-UCT or PH-UCT (the prior-weighted
//! bonus scaled by a short lookahead entropy), completes leaves with beam
//! search, and backs up the best completion reward.
//!
//! ```
//! use erp_core::{run_search, RewardSpec, SearchConfig, SequenceState, UniformPolicy, Vocabulary};
//! use erp_core::reward::{CriticConfig, Direction, Validator};
//! use erp_core::vocab::TokenizeMode;
//!
//! let vocab = Vocabulary::build(&["ab"], TokenizeMode::Char).unwrap();
//! let mut critic = CriticConfig::new("a", "motif_count", Direction::Maximize, 0.0, 4.0);
//! critic.motif = Some("a".into());
//! let spec = RewardSpec::new(vec![critic.build().unwrap()], Validator::AcceptAll).unwrap();
//! let cfg = SearchConfig { rollouts: 64, horizon: 4, ..Default::default() };
//! let policy = UniformPolicy::new(vocab.len());
//! let result = run_search(SequenceState::root(), &cfg, &policy, &vocab, &spec).unwrap();
//! assert_eq!(result.molecules[0].sequence, "aaaa");
//! ```

pub mod bench;
pub mod config;
pub mod decode;
pub mod error;
pub(crate) mod http;
pub mod io;
pub mod policy;
pub mod reward;
pub mod search;
#[cfg(test)]
mod testutil;
pub mod vocab;

pub use bench::{brute_force_oracle, compute_metrics, make_fig2_env, Metrics};
pub use config::RunConfig;
pub use decode::{beam_search, entropy, lookahead_entropy, top_pk, ActionSet};
pub use error::{Error, Result};
pub use policy::{apply_temperature, NGramPolicy, Policy, ProbDist, TablePolicy, UniformPolicy};
pub use reward::{normalize, validity_check, CriticSpec, RewardSpec};
pub use search::{
    p_ucb_score, ph_ucb_score, run_search, ucb_score, Algorithm, RunResult, Search, SearchConfig,
};
pub use vocab::{SequenceState, TokenId, Vocabulary};
