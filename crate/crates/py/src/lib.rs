//! Python bindings: vocabularies, n-gram policies, the scoring and
//! decoding primitives, and config-driven search and oracle runs.

use std::path::{Path, PathBuf};

use erp_core::bench::{self, Fig2Env as CoreFig2Env, Method};
use erp_core::config::RunConfig;
use erp_core::reward::{CriticConfig, Direction};
use erp_core::vocab::{read_corpus, TokenizeMode};
use erp_core::{Error, Policy, ProbDist, SearchConfig, SequenceState, TokenId};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig { .. }
        | Error::InvalidCritic(_)
        | Error::InvalidTemperature(_)
        | Error::InvalidFilter(_)
        | Error::InvalidDistribution(_)
        | Error::FormatVersion { .. }
        | Error::SpaceTooLarge { .. }
        | Error::CorpusEmpty
        | Error::UnknownToken { .. }
        | Error::TerminalState => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<TokenizeMode> {
    mode.parse().map_err(to_py)
}

fn dist(probs: Vec<f64>) -> PyResult<ProbDist> {
    ProbDist::new(probs).map_err(to_py)
}

/// Ordered token set with BOS at id 0 and EOS at id 1.
#[pyclass(name = "Vocabulary", module = "erp", frozen)]
struct PyVocabulary {
    inner: erp_core::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (lines, mode = "smiles"))]
    fn new(lines: Vec<String>, mode: &str) -> PyResult<Self> {
        let inner = erp_core::Vocabulary::build(&lines, parse_mode(mode)?).map_err(to_py)?;
        Ok(PyVocabulary { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary(size={})", self.inner.len())
    }

    /// Token texts in id order.
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().map(|t| t.text).collect()
    }

    /// `[BOS, units..., EOS]` ids for `text`.
    fn tokenize(&self, text: &str) -> PyResult<Vec<TokenId>> {
        Ok(self.inner.tokenize(text).map_err(to_py)?.token_ids().to_vec())
    }

    fn detokenize(&self, ids: Vec<TokenId>) -> PyResult<String> {
        let state = SequenceState::from_ids(ids, usize::MAX).map_err(to_py)?;
        self.inner.detokenize(&state).map_err(to_py)
    }
}

/// Smoothed n-gram next-token policy.
#[pyclass(name = "NGramPolicy", module = "erp", frozen)]
struct PyNGramPolicy {
    inner: erp_core::NGramPolicy,
}

#[pymethods]
impl PyNGramPolicy {
    /// Train on corpus lines with order `n` and additive smoothing `k`.
    #[staticmethod]
    #[pyo3(signature = (lines, n = 3, k = 0.1, mode = "smiles"))]
    fn train(lines: Vec<String>, n: usize, k: f64, mode: &str) -> PyResult<Self> {
        let vocab = erp_core::Vocabulary::build(&lines, parse_mode(mode)?).map_err(to_py)?;
        let states = lines
            .iter()
            .map(|l| vocab.tokenize(l))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        let inner = erp_core::NGramPolicy::train(&states, &vocab, n, k).map_err(to_py)?;
        Ok(PyNGramPolicy { inner })
    }

    /// Train on a corpus file, one sequence per line.
    #[staticmethod]
    #[pyo3(signature = (path, n = 3, k = 0.1, mode = "smiles"))]
    fn train_file(path: PathBuf, n: usize, k: f64, mode: &str) -> PyResult<Self> {
        let lines = read_corpus(&path).map_err(to_py)?;
        Self::train(lines, n, k, mode)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = erp_core::NGramPolicy::load(&path).map_err(to_py)?;
        Ok(PyNGramPolicy { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn vocab(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.inner.vocab().clone(),
        }
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    /// Next-token distribution after `prefix` (ids starting with BOS).
    fn next_dist(&self, prefix: Vec<TokenId>) -> PyResult<Vec<f64>> {
        let state = SequenceState::from_ids(prefix, usize::MAX).map_err(to_py)?;
        Ok(self.inner.next_dist(&state).map_err(to_py)?.probs().to_vec())
    }
}

/// Two-branch trap environment: a sharp prior leads left to mediocre
/// leaves while one leaf on the flat right branch holds the best reward.
#[pyclass(name = "Fig2Env", module = "erp", frozen)]
struct PyFig2Env {
    inner: CoreFig2Env,
}

#[pymethods]
impl PyFig2Env {
    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn hidden_leaf(&self) -> String {
        self.inner.hidden_leaf.clone()
    }

    #[getter]
    fn hidden_reward(&self) -> f64 {
        self.inner.hidden_reward
    }

    /// Run `method` with search settings given as JSON; returns the
    /// RunResult JSON.
    #[pyo3(signature = (method, search_json = "{}"))]
    fn run(&self, py: Python<'_>, method: &str, search_json: &str) -> PyResult<String> {
        let method = parse_method(method)?;
        let cfg = parse_search(search_json)?;
        let env = bench::Environment::new(
            self.inner.vocab.clone(),
            std::sync::Arc::new(self.inner.policy.clone()),
            std::sync::Arc::new(self.inner.spec.clone()),
        );
        py.detach(|| run_with_metrics(method, &cfg, &env))
    }
}

fn parse_method(method: &str) -> PyResult<Method> {
    serde_json::from_value(serde_json::Value::String(method.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown method `{method}`")))
}

fn parse_search(json: &str) -> PyResult<SearchConfig> {
    let cfg: SearchConfig =
        serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("search config: {e}")))?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn run_with_metrics(method: Method, cfg: &SearchConfig, env: &bench::Environment) -> PyResult<String> {
    let mut result = bench::run_method(method, cfg, env).map_err(to_py)?;
    result.metrics = Some(bench::compute_metrics(&result, &env.reward));
    result.to_json().map_err(to_py)
}

fn load_config(config_json: &str, base_dir: Option<PathBuf>) -> PyResult<RunConfig> {
    let base = base_dir.unwrap_or_else(|| PathBuf::from("."));
    let loaded = RunConfig::parse(config_json, Path::new(&base)).map_err(to_py)?;
    Ok(loaded.config)
}

#[pyfunction]
fn make_fig2_env(depth: usize, hidden_reward: f64) -> PyResult<PyFig2Env> {
    let inner = bench::make_fig2_env(depth, hidden_reward).map_err(to_py)?;
    Ok(PyFig2Env { inner })
}

/// Run one search (or baseline) from a full run config given as JSON.
/// Relative paths resolve against `base_dir`. Returns the RunResult JSON.
#[pyfunction]
#[pyo3(signature = (config_json, base_dir = None, method = None))]
fn generate(
    py: Python<'_>,
    config_json: &str,
    base_dir: Option<PathBuf>,
    method: Option<&str>,
) -> PyResult<String> {
    let config = load_config(config_json, base_dir)?;
    let method = match method {
        Some(m) => parse_method(m)?,
        None => Method::from(config.search.algorithm),
    };
    py.detach(|| {
        let env = config.environment().map_err(to_py)?;
        run_with_metrics(method, &config.search, &env)
    })
}

/// Exhaustive search over every sequence up to the config's horizon.
/// Returns `(sequence, token_ids, reward)` rows, best first.
#[pyfunction]
#[pyo3(signature = (config_json, base_dir = None))]
fn oracle(
    py: Python<'_>,
    config_json: &str,
    base_dir: Option<PathBuf>,
) -> PyResult<Vec<(String, Vec<TokenId>, f64)>> {
    let config = load_config(config_json, base_dir)?;
    py.detach(|| {
        let env = config.environment().map_err(to_py)?;
        let table = bench::brute_force_oracle(&env.vocab, config.search.horizon, &env.reward)
            .map_err(to_py)?;
        let mut rows: Vec<_> = table
            .rows
            .into_iter()
            .map(|r| (r.sequence, r.token_ids, r.reward))
            .collect();
        rows.sort_by(|a, b| b.2.total_cmp(&a.2));
        Ok(rows)
    })
}

#[pyfunction]
fn ucb_score(q: f64, n_s: u64, n_sa: u64, c_p: f64) -> f64 {
    erp_core::ucb_score(q, n_s, n_sa, c_p)
}

#[pyfunction]
fn p_ucb_score(q: f64, n_s: u64, n_sa: u64, c_p: f64, prior: f64) -> f64 {
    erp_core::p_ucb_score(q, n_s, n_sa, c_p, prior)
}

#[pyfunction]
fn ph_ucb_score(q: f64, n_s: u64, n_sa: u64, c_p: f64, prior: f64, lookahead: f64) -> f64 {
    erp_core::ph_ucb_score(q, n_s, n_sa, c_p, prior, lookahead)
}

/// Ids of the smallest set of most likely tokens whose mass reaches `p`,
/// capped at `k`.
#[pyfunction]
fn top_pk(probs: Vec<f64>, p: f64, k: usize) -> PyResult<Vec<TokenId>> {
    Ok(erp_core::top_pk(&dist(probs)?, p, k).map_err(to_py)?.into_vec())
}

/// Shannon entropy in nats.
#[pyfunction]
fn entropy(probs: Vec<f64>) -> PyResult<f64> {
    Ok(erp_core::entropy(&dist(probs)?))
}

#[pyfunction]
fn apply_temperature(probs: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    let d = erp_core::apply_temperature(&dist(probs)?, tau).map_err(to_py)?;
    Ok(d.probs().to_vec())
}

#[pyfunction]
fn validity_check(smiles: &str) -> bool {
    erp_core::validity_check(smiles)
}

/// Min-max normalize `raw` onto `[0, 1]` for a critic with the given
/// bounds and direction (`maximize` or `minimize`).
#[pyfunction]
#[pyo3(signature = (raw, bound_min, bound_max, direction = "maximize"))]
fn normalize(raw: f64, bound_min: f64, bound_max: f64, direction: &str) -> PyResult<f64> {
    let direction: Direction = serde_json::from_value(serde_json::Value::String(direction.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown direction `{direction}`")))?;
    let mut params = CriticConfig::new("critic", "table_lookup", direction, bound_min, bound_max);
    params.table = Some(Default::default());
    let spec = params.build().map_err(to_py)?;
    Ok(erp_core::normalize(raw, &spec))
}

#[pymodule]
fn erp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyNGramPolicy>()?;
    m.add_class::<PyFig2Env>()?;
    m.add_function(wrap_pyfunction!(make_fig2_env, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(ucb_score, m)?)?;
    m.add_function(wrap_pyfunction!(p_ucb_score, m)?)?;
    m.add_function(wrap_pyfunction!(ph_ucb_score, m)?)?;
    m.add_function(wrap_pyfunction!(top_pk, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(apply_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(validity_check, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    Ok(())
}
