//! Tree search over token sequences.
//!
//! Each rollout selects a leaf by repeatedly taking the best-scoring child
//! (UCT, P-UCT or PH-UCT), expands it with the filtered policy
//! distribution, evaluates it by beam-search completion against a reward
//! cache, and pushes the best completion reward back up the path with a max
//! update.
//!
//! Visit counts follow one convention throughout: a node is created with
//! one visit, and each later pass through an edge adds one visit to both the
//! edge and its parent, so `N(s) = 1 + Σ_a N(s, a)` holds at every node.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bench::Metrics;
use crate::decode::{
    beam_search, full_support, lookahead_entropy, top_k, top_pk, ActionSet, EntropyMemo,
    LookaheadParams,
};
use crate::error::{Error, Result};
use crate::policy::{apply_temperature, Policy, ProbDist};
use crate::reward::{Completion, RewardFn};
use crate::vocab::{SequenceState, TokenId, Vocabulary};

pub const RUN_FORMAT_VERSION: u32 = 1;

/// `Q + c_p·sqrt(ln N(s) / N(s,a))`; unvisited edges score `+∞`.
pub fn ucb_score(q: f64, n_s: u64, n_sa: u64, c_p: f64) -> f64 {
    if n_sa == 0 {
        return f64::INFINITY;
    }
    q + c_p * ((n_s as f64).ln() / n_sa as f64).sqrt()
}

fn prior_bonus(n_s: u64, n_sa: u64, c_p: f64, prior: f64) -> f64 {
    c_p * ((n_s as f64).ln().sqrt() / (1.0 + n_sa as f64)) * prior
}

/// `Q + c_p·π_τ(a|s)·sqrt(ln N(s)) / (1 + N(s,a))`.
pub fn p_ucb_score(q: f64, n_s: u64, n_sa: u64, c_p: f64, prior: f64) -> f64 {
    q + prior_bonus(n_s, n_sa, c_p, prior)
}

/// The P-UCB bonus scaled by the lookahead entropy factor. A factor of exactly
/// 1 reproduces [`p_ucb_score`] bit for bit.
pub fn ph_ucb_score(q: f64, n_s: u64, n_sa: u64, c_p: f64, prior: f64, lookahead: f64) -> f64 {
    q + prior_bonus(n_s, n_sa, c_p, prior) * lookahead
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Uct,
    PUct,
    PhUct,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Uct => "uct",
            Algorithm::PUct => "p_uct",
            Algorithm::PhUct => "ph_uct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionFilter {
    TopPk,
    TopKOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub rollouts: usize,
    pub c_p: f64,
    pub tau: f64,
    pub e: usize,
    pub p: f64,
    pub k: usize,
    pub b: usize,
    pub horizon: usize,
    pub rng_seed: u64,
    pub expansion_filter: ExpansionFilter,
    pub entropy_normalized: bool,
    /// Compute lookahead entropies over the Top-PK set instead of the full
    /// vocabulary.
    pub entropy_top_pk: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            algorithm: Algorithm::PhUct,
            rollouts: 256,
            c_p: 4.0,
            tau: 1.0,
            e: 2,
            p: 0.95,
            k: 15,
            b: 8,
            horizon: 64,
            rng_seed: 0,
            expansion_filter: ExpansionFilter::TopPk,
            entropy_normalized: false,
            entropy_top_pk: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts < 1 {
            return Err(Error::config("rollouts", "must be >= 1"));
        }
        if !(self.c_p >= 0.0) || !self.c_p.is_finite() {
            return Err(Error::config("c_p", "must be a finite value >= 0"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config("p", format!("must be in (0, 1], got {}", self.p)));
        }
        if self.k < 1 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if self.b < 1 {
            return Err(Error::config("b", "must be >= 1"));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        Ok(())
    }

    fn lookahead_params(&self) -> LookaheadParams {
        LookaheadParams {
            steps: self.e,
            tau: self.tau,
            horizon: self.horizon,
            top_pk: self.entropy_top_pk.then_some((self.p, self.k)),
            normalized: self.entropy_normalized,
        }
    }

    fn filter(&self, dist: &ProbDist) -> Result<ActionSet> {
        match self.expansion_filter {
            ExpansionFilter::TopPk => top_pk(dist, self.p, self.k),
            ExpansionFilter::TopKOnly => top_k(dist, self.k),
            ExpansionFilter::Full => Ok(full_support(dist)),
        }
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeStats {
    pub visits: u64,
    /// Best downstream reward seen through this edge.
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub action: TokenId,
    pub child: NodeId,
    pub stats: EdgeStats,
    /// `π_τ(action | parent)`.
    pub prior: f64,
    /// Lookahead entropy factor, filled on first use.
    pub lookahead: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub state: SequenceState,
    pub visits: u64,
    pub children: Vec<Edge>,
    /// `π_τ(·|state)` once expanded.
    pub dist: Option<ProbDist>,
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<TreeNode>,
}

impl SearchTree {
    pub fn new(root: SequenceState) -> Self {
        SearchTree {
            nodes: vec![TreeNode {
                state: root,
                visits: 1,
                children: Vec::new(),
                dist: None,
            }],
        }
    }

    pub const ROOT: NodeId = 0;

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut TreeNode {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &TreeNode)> {
        self.nodes.iter().enumerate()
    }

    /// Attach a child for `action` with zeroed statistics.
    pub fn add_child(&mut self, parent: NodeId, action: TokenId, prior: f64, horizon: usize) -> NodeId {
        let state = self.nodes[parent].state.extend(action, horizon);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            state,
            visits: 1,
            children: Vec::new(),
            dist: None,
        });
        self.nodes[parent].children.push(Edge {
            action,
            child: id,
            stats: EdgeStats::default(),
            prior,
            lookahead: None,
        });
        id
    }

    /// First node whose visit count differs from `1 + Σ N(s,a)`.
    pub fn conservation_violation(&self) -> Option<NodeId> {
        self.nodes.iter().position(|n| {
            n.visits != 1 + n.children.iter().map(|e| e.stats.visits).sum::<u64>()
        })
    }
}

/// One step of a selection path: the parent node and the index of the edge
/// taken out of it.
pub type PathStep = (NodeId, usize);

/// Descend from the root to a childless node, taking the best-scoring edge at
/// each level (ties to the lowest token id). For PH-UCT, `lookahead` is asked
/// for the entropy factor of each child state the first time it is scored.
pub fn select<F>(tree: &mut SearchTree, cfg: &SearchConfig, mut lookahead: F) -> Result<Vec<PathStep>>
where
    F: FnMut(&SequenceState) -> Result<f64>,
{
    let mut path = Vec::new();
    let mut node = SearchTree::ROOT;
    while !tree.nodes[node].children.is_empty() {
        if cfg.algorithm == Algorithm::PhUct {
            for i in 0..tree.nodes[node].children.len() {
                if tree.nodes[node].children[i].lookahead.is_none() {
                    let child = tree.nodes[node].children[i].child;
                    let h = lookahead(&tree.nodes[child].state)?;
                    tree.nodes[node].children[i].lookahead = Some(h);
                }
            }
        }
        let parent = &tree.nodes[node];
        let mut best: Option<(usize, f64, TokenId)> = None;
        for (i, edge) in parent.children.iter().enumerate() {
            let s = edge_score(cfg, parent.visits, edge);
            let better = match best {
                None => true,
                Some((_, bs, ba)) => s > bs || (s == bs && edge.action < ba),
            };
            if better {
                best = Some((i, s, edge.action));
            }
        }
        let (i, _, _) = best.expect("non-empty children");
        path.push((node, i));
        node = parent.children[i].child;
    }
    Ok(path)
}

fn edge_score(cfg: &SearchConfig, n_s: u64, edge: &Edge) -> f64 {
    let EdgeStats { visits, q } = edge.stats;
    match cfg.algorithm {
        Algorithm::Uct => ucb_score(q, n_s, visits, cfg.c_p),
        Algorithm::PUct => p_ucb_score(q, n_s, visits, cfg.c_p, edge.prior),
        Algorithm::PhUct => {
            ph_ucb_score(q, n_s, visits, cfg.c_p, edge.prior, edge.lookahead.unwrap_or(1.0))
        }
    }
}

/// The node a path ends at.
pub fn path_leaf(tree: &SearchTree, path: &[PathStep]) -> NodeId {
    match path.last() {
        Some(&(parent, i)) => tree.nodes[parent].children[i].child,
        None => SearchTree::ROOT,
    }
}

/// Create one child per token surviving the configured filter of `π_τ`.
pub fn expand<P: Policy + ?Sized>(
    tree: &mut SearchTree,
    node: NodeId,
    policy: &P,
    cfg: &SearchConfig,
) -> Result<()> {
    let n = &tree.nodes[node];
    if n.state.is_terminal() {
        return Err(Error::TerminalState);
    }
    if !n.children.is_empty() {
        return Err(Error::config("node", "already expanded"));
    }
    let dist = apply_temperature(&policy.next_dist(&n.state)?, cfg.tau)?;
    let actions = cfg.filter(&dist)?;
    for a in actions.iter() {
        tree.add_child(node, a, dist.prob(a), cfg.horizon);
    }
    tree.nodes[node].dist = Some(dist);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub state: SequenceState,
    pub reward: f64,
    pub rollout: usize,
}

/// Complete sequence → reward, in insertion order. Entries are never
/// overwritten.
#[derive(Debug, Clone, Default)]
pub struct RewardCache {
    entries: Vec<CacheEntry>,
    index: HashMap<String, usize>,
}

impl RewardCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.index.get(key).map(|&i| self.entries[i].reward)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    /// Insert unless present; returns whether the entry is new.
    pub fn insert(&mut self, entry: CacheEntry) -> bool {
        if self.index.contains_key(&entry.key) {
            return false;
        }
        self.index.insert(entry.key.clone(), self.entries.len());
        self.entries.push(entry);
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn best(&self) -> f64 {
        self.entries.iter().map(|e| e.reward).fold(0.0, f64::max)
    }

    /// Entries by descending reward, then insertion order.
    pub fn ranked(&self) -> Vec<&CacheEntry> {
        let mut v: Vec<&CacheEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.reward.total_cmp(&a.reward));
        v
    }
}

/// Score a node: complete it by beam search (or take it as is when
/// terminal), reward each completion not yet cached, and return the best
/// cached reward among the completions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<P: Policy + ?Sized>(
    state: &SequenceState,
    policy: &P,
    cfg: &SearchConfig,
    vocab: &Vocabulary,
    reward: &dyn RewardFn,
    cache: &mut RewardCache,
    rollout: usize,
) -> Result<f64> {
    let completions = if state.is_terminal() {
        vec![state.clone()]
    } else {
        beam_search(policy, state, cfg.b, cfg.horizon)?
    };
    let mut best = f64::NEG_INFINITY;
    for c in completions {
        let key = vocab.detokenize(&c)?;
        let r = match cache.get(&key) {
            Some(r) => r,
            None => {
                let r = reward.reward(Completion {
                    state: &c,
                    text: &key,
                });
                cache.insert(CacheEntry {
                    key,
                    state: c,
                    reward: r,
                    rollout,
                });
                r
            }
        };
        best = best.max(r);
    }
    Ok(best)
}

/// Max-update every edge on the path with `reward` and count the visit.
pub fn backpropagate(tree: &mut SearchTree, path: &[PathStep], reward: f64) {
    for &(node, i) in path {
        let n = &mut tree.nodes[node];
        let edge = &mut n.children[i];
        edge.stats.q = edge.stats.q.max(reward);
        edge.stats.visits += 1;
        n.visits += 1;
    }
}

/// Counts every next-token distribution request made through it.
pub(crate) struct QueryCounter<'a> {
    inner: &'a dyn Policy,
    queries: AtomicU64,
}

impl<'a> QueryCounter<'a> {
    pub(crate) fn new(inner: &'a dyn Policy) -> Self {
        QueryCounter {
            inner,
            queries: AtomicU64::new(0),
        }
    }

    pub(crate) fn count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

impl Policy for QueryCounter<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.raw_probs(prefix)
    }

    fn next_dist(&self, state: &SequenceState) -> Result<ProbDist> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.next_dist(state)
    }
}

/// What one rollout did.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Actions chosen during selection.
    pub actions: Vec<TokenId>,
    pub leaf: SequenceState,
    pub reward: f64,
}

/// A single search instance: tree, cache, entropy memo and counters.
pub struct Search<'a> {
    cfg: SearchConfig,
    policy: QueryCounter<'a>,
    vocab: &'a Vocabulary,
    reward: &'a dyn RewardFn,
    tree: SearchTree,
    memo: EntropyMemo,
    cache: RewardCache,
    best_so_far: Vec<f64>,
    tokens_sampled: Vec<u64>,
}

impl<'a> Search<'a> {
    pub fn new(
        root: SequenceState,
        cfg: SearchConfig,
        policy: &'a dyn Policy,
        vocab: &'a Vocabulary,
        reward: &'a dyn RewardFn,
    ) -> Result<Self> {
        cfg.validate()?;
        if policy.vocab_size() != vocab.len() {
            return Err(Error::config(
                "policy",
                format!(
                    "policy vocab size {} does not match vocabulary size {}",
                    policy.vocab_size(),
                    vocab.len()
                ),
            ));
        }
        Ok(Search {
            cfg,
            policy: QueryCounter::new(policy),
            vocab,
            reward,
            tree: SearchTree::new(root),
            memo: EntropyMemo::new(),
            cache: RewardCache::new(),
            best_so_far: Vec::new(),
            tokens_sampled: Vec::new(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn cache(&self) -> &RewardCache {
        &self.cache
    }

    pub fn tokens_sampled(&self) -> u64 {
        self.policy.count()
    }

    pub fn rollouts_done(&self) -> usize {
        self.best_so_far.len()
    }

    pub fn rollout(&mut self) -> Result<RolloutRecord> {
        let index = self.best_so_far.len();
        let params = self.cfg.lookahead_params();
        let (policy, memo) = (&self.policy, &mut self.memo);
        let path = select(&mut self.tree, &self.cfg, |child| {
            lookahead_entropy(policy, child, &params, memo)
        })?;
        let leaf = path_leaf(&self.tree, &path);
        if !self.tree.nodes[leaf].state.is_terminal() {
            expand(&mut self.tree, leaf, &self.policy, &self.cfg)?;
        }
        let state = self.tree.nodes[leaf].state.clone();
        let reward = evaluate(
            &state,
            &self.policy,
            &self.cfg,
            self.vocab,
            self.reward,
            &mut self.cache,
            index,
        )?;
        backpropagate(&mut self.tree, &path, reward);
        let best = self.cache.best().max(self.best_so_far.last().copied().unwrap_or(0.0));
        self.best_so_far.push(best);
        self.tokens_sampled.push(self.tokens_sampled());
        Ok(RolloutRecord {
            actions: path
                .iter()
                .map(|&(n, i)| self.tree.nodes[n].children[i].action)
                .collect(),
            leaf: state,
            reward,
        })
    }

    /// Run the remaining configured rollouts.
    pub fn run(&mut self) -> Result<()> {
        while self.rollouts_done() < self.cfg.rollouts {
            self.rollout()?;
        }
        Ok(())
    }

    pub fn result(&self) -> RunResult {
        RunResult {
            format_version: RUN_FORMAT_VERSION,
            method: self.cfg.algorithm.as_str().to_owned(),
            config: self.cfg.clone(),
            molecules: molecules_of(&self.cache),
            best_so_far: self.best_so_far.clone(),
            tokens_sampled: self.tokens_sampled.clone(),
            root_edges: self
                .tree
                .node(SearchTree::ROOT)
                .children
                .iter()
                .map(|e| RootEdge {
                    token: self.vocab.text(e.action).unwrap_or_default().to_owned(),
                    visits: e.stats.visits,
                    q: e.stats.q,
                })
                .collect(),
            metrics: None,
        }
    }
}

/// Run a full search from `root`.
pub fn run_search(
    root: SequenceState,
    cfg: &SearchConfig,
    policy: &dyn Policy,
    vocab: &Vocabulary,
    reward: &dyn RewardFn,
) -> Result<RunResult> {
    let mut search = Search::new(root, cfg.clone(), policy, vocab, reward)?;
    search.run()?;
    Ok(search.result())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Molecule {
    pub sequence: String,
    pub reward: f64,
    pub rollout_discovered: usize,
    /// Ended by EOS rather than cut at the length cap.
    pub complete: bool,
}

pub(crate) fn molecules_of(cache: &RewardCache) -> Vec<Molecule> {
    cache
        .ranked()
        .into_iter()
        .map(|e| Molecule {
            sequence: e.key.clone(),
            reward: e.reward,
            rollout_discovered: e.rollout,
            complete: e.state.has_eos(),
        })
        .collect()
}

/// Output of one search or baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub format_version: u32,
    pub method: String,
    pub config: SearchConfig,
    /// Reward cache, best first.
    pub molecules: Vec<Molecule>,
    pub best_so_far: Vec<f64>,
    /// Cumulative next-token distribution queries after each rollout.
    pub tokens_sampled: Vec<u64>,
    /// Statistics of the root's outgoing edges; empty for baselines.
    #[serde(default)]
    pub root_edges: Vec<RootEdge>,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootEdge {
    pub token: String,
    pub visits: u64,
    pub q: f64,
}

impl RunResult {
    /// Share of root edge visits that went through the edge for `token`.
    pub fn root_visit_share(&self, token: &str) -> f64 {
        let total: u64 = self.root_edges.iter().map(|e| e.visits).sum();
        if total == 0 {
            return 0.0;
        }
        let mine: u64 = self
            .root_edges
            .iter()
            .filter(|e| e.token == token)
            .map(|e| e.visits)
            .sum();
        mine as f64 / total as f64
    }
}

impl RunResult {
    pub fn tokens_sampled_total(&self) -> u64 {
        self.tokens_sampled.last().copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != RUN_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found,
                expected: RUN_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}
