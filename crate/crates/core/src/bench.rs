//! Oracles, metrics and multi-seed experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, sample_topk_with};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::policy::{Policy, TablePolicy};
use crate::reward::{
    combined_reward, Completion, CriticConfig, Direction, RewardFn, RewardSpec, Validator,
};
use crate::search::{
    molecules_of, Algorithm, CacheEntry, QueryCounter, RewardCache, RunResult, Search,
    SearchConfig, RUN_FORMAT_VERSION,
};
use crate::vocab::{SequenceState, TokenId, TokenizeMode, Vocabulary, BOS, EOS};

/// Largest `V^H` the brute-force oracle will enumerate.
pub const ORACLE_GUARD: u64 = 1_000_000;

pub const CSV_HEADER: &str =
    "algorithm,seed,rollouts,e,c_p,p,k,b,best,avg_valid,avg_top10,unique_valid,tokens_sampled,wall_ms";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub best_norm_reward: f64,
    pub avg_valid_norm_reward: f64,
    pub avg_top10_norm_reward: f64,
    pub unique_valid_count: usize,
    /// Mean raw score per critic over valid entries.
    pub per_critic_means: BTreeMap<String, f64>,
    pub tokens_sampled_total: u64,
}

/// Summarize a run's reward cache. Valid means complete and accepted by the
/// validator; the top-10% mean covers the `ceil(0.1·n)` best valid entries.
pub fn compute_metrics(result: &RunResult, spec: &RewardSpec) -> Metrics {
    let best = result.molecules.iter().map(|m| m.reward).fold(0.0, f64::max);
    let mut valid: Vec<(f64, &str)> = result
        .molecules
        .iter()
        .filter(|m| m.complete && spec.validator().accepts(&m.sequence))
        .map(|m| (m.reward, m.sequence.as_str()))
        .collect();
    let n = valid.len();
    let mut metrics = Metrics {
        best_norm_reward: best,
        unique_valid_count: n,
        tokens_sampled_total: result.tokens_sampled_total(),
        ..Default::default()
    };
    let mut sums = vec![(0.0, 0usize); spec.critics().len()];
    for &(_, text) in &valid {
        for (slot, raw) in sums.iter_mut().zip(spec.evaluate(text, true).raw) {
            if let Some(x) = raw {
                slot.0 += x;
                slot.1 += 1;
            }
        }
    }
    for (critic, (sum, count)) in spec.critics().iter().zip(sums) {
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        metrics.per_critic_means.insert(critic.name.clone(), mean);
    }
    if n == 0 {
        return metrics;
    }
    metrics.avg_valid_norm_reward = valid.iter().map(|v| v.0).sum::<f64>() / n as f64;
    valid.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = (n as f64 * 0.1).ceil() as usize;
    metrics.avg_top10_norm_reward = valid[..top].iter().map(|v| v.0).sum::<f64>() / top as f64;
    metrics
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub sequence: String,
    pub token_ids: Vec<TokenId>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub best: OracleRow,
    /// Every EOS-terminated sequence, shortest first, then by token ids.
    pub rows: Vec<OracleRow>,
}

impl OracleTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,token_ids,reward\n");
        for r in &self.rows {
            let ids: Vec<String> = r.token_ids.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{},{},{}", csv_field(&r.sequence), ids.join(" "), r.reward);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Score every EOS-terminated sequence with at most `horizon` interior tokens.
/// The optimum breaks ties toward the lexicographically smallest id sequence.
pub fn brute_force_oracle(vocab: &Vocabulary, horizon: usize, spec: &RewardSpec) -> Result<OracleTable> {
    let v = vocab.len() as f64;
    let size = v.powi(horizon as i32);
    if size > ORACLE_GUARD as f64 {
        return Err(Error::SpaceTooLarge {
            size,
            guard: ORACLE_GUARD,
        });
    }
    let units: Vec<TokenId> = vocab.unit_ids().collect();
    let mut rows = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![BOS]];
    for depth in 0..=horizon {
        for prefix in &frontier {
            let mut ids = prefix.clone();
            ids.push(EOS);
            let state = SequenceState::from_ids(ids, horizon)?;
            let reward = combined_reward(&state, vocab, spec)?.total;
            rows.push(OracleRow {
                sequence: vocab.detokenize(&state)?,
                token_ids: state.token_ids().to_vec(),
                reward,
            });
        }
        if depth == horizon {
            break;
        }
        frontier = frontier
            .iter()
            .flat_map(|p| {
                units.iter().map(move |&u| {
                    let mut q = p.clone();
                    q.push(u);
                    q
                })
            })
            .collect();
    }
    let best = rows
        .iter()
        .fold(None::<&OracleRow>, |acc, r| match acc {
            None => Some(r),
            Some(b) if r.reward > b.reward || (r.reward == b.reward && r.token_ids < b.token_ids) => {
                Some(r)
            }
            keep => keep,
        })
        .expect("at least the empty sequence")
        .clone();
    Ok(OracleTable { best, rows })
}

/// A deceptive two-branch environment over the tokens `l` and `r`.
#[derive(Debug, Clone)]
pub struct Fig2Env {
    pub vocab: Vocabulary,
    pub policy: TablePolicy,
    pub spec: RewardSpec,
    /// Interior length of every leaf.
    pub depth: usize,
    pub hidden_leaf: String,
    pub hidden_reward: f64,
}

impl Fig2Env {
    pub const LEFT: TokenId = 2;
    pub const RIGHT: TokenId = 3;

    pub fn horizon(&self) -> usize {
        self.depth
    }
}

/// Root splits evenly between `l` and `r`. Below `l` the policy keeps
/// choosing `l` with probability 0.98 and every leaf is worth 30% of the
/// hidden reward; below `r` it is uniform and only the all-`r` leaf pays.
pub fn make_fig2_env(depth: usize, hidden_reward: f64) -> Result<Fig2Env> {
    build_fig2(depth, hidden_reward, 0.98, "r".repeat(depth))
}

/// [`make_fig2_env`] with the left-branch sharpness and the position of the
/// hidden leaf drawn from `seed`.
pub fn make_fig2_env_seeded(depth: usize, hidden_reward: f64, seed: u64) -> Result<Fig2Env> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sharp = rng.gen_range(0.9..0.99);
    let mut hidden = String::from("r");
    for _ in 1..depth {
        hidden.push(if rng.gen_bool(0.5) { 'l' } else { 'r' });
    }
    build_fig2(depth, hidden_reward, sharp, hidden)
}

/// Deepest environment the table can hold.
const FIG2_MAX_DEPTH: usize = 16;

fn build_fig2(depth: usize, hidden_reward: f64, sharp: f64, hidden: String) -> Result<Fig2Env> {
    if !(2..=FIG2_MAX_DEPTH).contains(&depth) {
        return Err(Error::config("depth", format!("must be in 2..={FIG2_MAX_DEPTH}")));
    }
    if !(hidden_reward > 0.0) || !hidden_reward.is_finite() {
        return Err(Error::config("hidden_reward", "must be > 0"));
    }
    let vocab = Vocabulary::build(&["lr"], TokenizeMode::Char)?;
    let (l, r) = (Fig2Env::LEFT, Fig2Env::RIGHT);
    let mut policy = TablePolicy::new(vec![0.0, 1.0, 0.0, 0.0]);
    policy.insert(vec![BOS], vec![0.0, 0.0, 0.5, 0.5]);
    let mut table = BTreeMap::new();
    let mut frontier = vec![vec![BOS, l], vec![BOS, r]];
    for len in 1..=depth {
        let mut next = Vec::new();
        for prefix in frontier {
            let left = prefix[1] == l;
            if len == depth {
                let text: String = prefix[1..].iter().map(|&t| if t == l { 'l' } else { 'r' }).collect();
                if left {
                    table.insert(text, 0.3 * hidden_reward);
                }
                continue;
            }
            let row = if left {
                vec![0.0, 0.0, sharp, 1.0 - sharp]
            } else {
                vec![0.0, 0.0, 0.5, 0.5]
            };
            policy.insert(prefix.clone(), row);
            for t in [l, r] {
                let mut p = prefix.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    table.insert(hidden.clone(), hidden_reward);
    let mut critic = CriticConfig::new("leaf_value", "table_lookup", Direction::Maximize, 0.0, hidden_reward);
    critic.table = Some(table);
    let spec = RewardSpec::new(vec![critic.build()?], Validator::AcceptAll)?;
    Ok(Fig2Env {
        vocab,
        policy,
        spec,
        depth,
        hidden_leaf: hidden,
        hidden_reward,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uct,
    PUct,
    PhUct,
    /// Independent top-k samples, one per rollout.
    Sampling,
    /// A single beam search of width `b`.
    Beam,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Uct => "uct",
            Method::PUct => "p_uct",
            Method::PhUct => "ph_uct",
            Method::Sampling => "sampling",
            Method::Beam => "beam",
        }
    }

    fn algorithm(self) -> Option<Algorithm> {
        match self {
            Method::Uct => Some(Algorithm::Uct),
            Method::PUct => Some(Algorithm::PUct),
            Method::PhUct => Some(Algorithm::PhUct),
            Method::Sampling | Method::Beam => None,
        }
    }
}

impl From<Algorithm> for Method {
    fn from(a: Algorithm) -> Self {
        match a {
            Algorithm::Uct => Method::Uct,
            Algorithm::PUct => Method::PUct,
            Algorithm::PhUct => Method::PhUct,
        }
    }
}

/// Independent top-k sampling from `root`, one sample per rollout.
pub fn run_sampling(
    root: SequenceState,
    cfg: &SearchConfig,
    policy: &dyn Policy,
    vocab: &Vocabulary,
    reward: &dyn RewardFn,
) -> Result<RunResult> {
    cfg.validate()?;
    let counter = QueryCounter::new(policy);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut cache = RewardCache::new();
    let (mut best_so_far, mut tokens) = (Vec::new(), Vec::new());
    for i in 0..cfg.rollouts {
        let s = sample_topk_with(&counter, &root, cfg.k, cfg.horizon, &mut rng)?;
        score_into(&mut cache, s, vocab, reward, i)?;
        best_so_far.push(cache.best());
        tokens.push(counter.count());
    }
    Ok(baseline_result(Method::Sampling, cfg, &cache, best_so_far, tokens))
}

/// One beam search of width `b` from `root`.
pub fn run_beam(
    root: SequenceState,
    cfg: &SearchConfig,
    policy: &dyn Policy,
    vocab: &Vocabulary,
    reward: &dyn RewardFn,
) -> Result<RunResult> {
    cfg.validate()?;
    let counter = QueryCounter::new(policy);
    let mut cache = RewardCache::new();
    for s in beam_search(&counter, &root, cfg.b, cfg.horizon)? {
        score_into(&mut cache, s, vocab, reward, 0)?;
    }
    let best = vec![cache.best()];
    Ok(baseline_result(Method::Beam, cfg, &cache, best, vec![counter.count()]))
}

fn score_into(
    cache: &mut RewardCache,
    state: SequenceState,
    vocab: &Vocabulary,
    reward: &dyn RewardFn,
    rollout: usize,
) -> Result<()> {
    let key = vocab.detokenize(&state)?;
    if !cache.contains(&key) {
        let r = reward.reward(Completion {
            state: &state,
            text: &key,
        });
        cache.insert(CacheEntry {
            key,
            state,
            reward: r,
            rollout,
        });
    }
    Ok(())
}

fn baseline_result(
    method: Method,
    cfg: &SearchConfig,
    cache: &RewardCache,
    best_so_far: Vec<f64>,
    tokens_sampled: Vec<u64>,
) -> RunResult {
    RunResult {
        format_version: RUN_FORMAT_VERSION,
        method: method.as_str().to_owned(),
        config: cfg.clone(),
        molecules: molecules_of(cache),
        best_so_far,
        tokens_sampled,
        root_edges: Vec::new(),
        metrics: None,
    }
}

/// Run one method from the root of an environment.
pub fn run_method(method: Method, cfg: &SearchConfig, env: &Environment) -> Result<RunResult> {
    let root = env.root.clone();
    let reward: &dyn RewardFn = &*env.reward;
    match method.algorithm() {
        Some(algorithm) => {
            let cfg = SearchConfig {
                algorithm,
                ..cfg.clone()
            };
            let mut search = Search::new(root, cfg, &*env.policy, &env.vocab, reward)?;
            search.run()?;
            Ok(search.result())
        }
        None if method == Method::Sampling => run_sampling(root, cfg, &*env.policy, &env.vocab, reward),
        None => run_beam(root, cfg, &*env.policy, &env.vocab, reward),
    }
}

/// Everything a cell needs besides its configuration.
#[derive(Clone)]
pub struct Environment {
    pub vocab: Vocabulary,
    pub policy: Arc<dyn Policy>,
    pub reward: Arc<RewardSpec>,
    pub root: SequenceState,
}

impl Environment {
    pub fn new(vocab: Vocabulary, policy: Arc<dyn Policy>, reward: Arc<RewardSpec>) -> Self {
        Environment {
            vocab,
            policy,
            reward,
            root: SequenceState::root(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    /// Name used in file names and the CSV `algorithm` column.
    pub label: String,
    pub config: SearchConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    pub output_dir: PathBuf,
    /// Cap on concurrently running cells; `None` uses every core.
    pub jobs: Option<usize>,
    /// Record wall-clock time per cell. Off by default so that reports are
    /// byte-for-byte reproducible.
    pub timing: bool,
}

impl ExperimentPlan {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        ExperimentPlan {
            cells: Vec::new(),
            output_dir: output_dir.into(),
            jobs: None,
            timing: false,
        }
    }

    /// Add one cell per seed for `method`.
    pub fn add(&mut self, method: Method, label: Option<&str>, config: &SearchConfig, seeds: &[u64]) -> &mut Self {
        let label = label.unwrap_or(method.as_str());
        for &seed in seeds {
            self.cells.push(Cell {
                method,
                label: label.to_owned(),
                config: SearchConfig {
                    rng_seed: seed,
                    ..config.clone()
                },
                seed,
            });
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("cells", "plan has no cells"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.cells {
            c.config.validate()?;
            if c.label.is_empty() || c.label.contains(['/', '\\']) {
                return Err(Error::config("label", format!("unusable label `{}`", c.label)));
            }
            if !seen.insert((c.label.as_str(), c.seed)) {
                return Err(Error::config(
                    "seeds",
                    format!("seed {} repeated for `{}`", c.seed, c.label),
                ));
            }
        }
        if self.jobs == Some(0) {
            return Err(Error::config("jobs", "must be >= 1"));
        }
        Ok(())
    }

    pub fn json_path(&self, cell: &Cell) -> PathBuf {
        self.output_dir.join(format!("{}_seed{}.json", cell.label, cell.seed))
    }

    pub fn csv_path(&self) -> PathBuf {
        self.output_dir.join("summary.csv")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    /// One result per cell, in plan order.
    pub results: Vec<RunResult>,
    pub json_paths: Vec<PathBuf>,
    pub csv_path: PathBuf,
}

/// Run every cell and write one RunResult JSON per cell plus a summary CSV.
/// `env_for_seed` supplies the environment of each cell; plans that share
/// one environment can return clones of it.
pub fn run_experiment<F>(plan: &ExperimentPlan, env_for_seed: F) -> Result<ExperimentReport>
where
    F: Fn(u64) -> Result<Environment> + Sync,
{
    plan.validate()?;
    std::fs::create_dir_all(&plan.output_dir).map_err(|source| Error::ReportWrite {
        path: plan.output_dir.clone(),
        source,
    })?;
    let run_cell = |cell: &Cell| -> Result<(RunResult, u128)> {
        let env = env_for_seed(cell.seed)?;
        let start = Instant::now();
        let mut result = run_method(cell.method, &cell.config, &env)?;
        let wall = start.elapsed().as_millis();
        result.metrics = Some(compute_metrics(&result, &env.reward));
        log::info!(
            "{} seed {}: best {:.6}",
            cell.label,
            cell.seed,
            result.metrics.as_ref().map_or(0.0, |m| m.best_norm_reward)
        );
        Ok((result, if plan.timing { wall } else { 0 }))
    };
    let outcomes: Vec<Result<(RunResult, u128)>> = match plan.jobs {
        Some(1) => plan.cells.iter().map(run_cell).collect(),
        jobs => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(|e| Error::config("jobs", e.to_string()))?;
            pool.install(|| plan.cells.par_iter().map(run_cell).collect())
        }
    };
    let mut results = Vec::with_capacity(outcomes.len());
    let mut walls = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (r, w) = o?;
        results.push(r);
        walls.push(w);
    }
    let mut json_paths = Vec::new();
    let mut csv = format!("{CSV_HEADER}\n");
    for ((cell, result), wall) in plan.cells.iter().zip(&results).zip(walls) {
        let path = plan.json_path(cell);
        write_atomic(&path, result.to_json()?.as_bytes())?;
        json_paths.push(path);
        csv.push_str(&csv_row(cell, result, wall));
        csv.push('\n');
    }
    let csv_path = plan.csv_path();
    write_atomic(&csv_path, csv.as_bytes())?;
    Ok(ExperimentReport {
        results,
        json_paths,
        csv_path,
    })
}

/// One data row of the summary CSV.
pub fn csv_row(cell: &Cell, result: &RunResult, wall_ms: u128) -> String {
    let m = result.metrics.clone().unwrap_or_default();
    let c = &cell.config;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        csv_field(&cell.label),
        cell.seed,
        c.rollouts,
        c.e,
        c.c_p,
        c.p,
        c.k,
        c.b,
        m.best_norm_reward,
        m.avg_valid_norm_reward,
        m.avg_top10_norm_reward,
        m.unique_valid_count,
        result.tokens_sampled_total(),
        wall_ms
    )
}

/// Read the data rows of a summary CSV, header excluded.
pub fn csv_data_rows(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().skip(1).map(str::to_owned).collect())
}
