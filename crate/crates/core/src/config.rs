//! Run configuration files.
//!
//! A config is a JSON object with a top-level `format_version`. Unknown keys
//! are rejected at every level. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::{Environment, ExperimentPlan, Method};
use crate::error::{Error, Result};
use crate::policy::{NGramPolicy, Policy, RemotePolicyClient};
use crate::reward::{CriticConfig, RewardSpec, ValidatorKind};
use crate::search::{Algorithm, SearchConfig};
use crate::vocab::{read_corpus, TokenizeMode, Vocabulary, BOS_TEXT, EOS_TEXT};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySource {
    /// Train an n-gram model on a corpus at load time.
    Corpus {
        path: PathBuf,
        #[serde(default = "default_order")]
        n: usize,
        #[serde(default = "default_smoothing")]
        k: f64,
        #[serde(default = "default_mode")]
        mode: TokenizeMode,
    },
    /// A saved n-gram model.
    File { path: PathBuf },
    /// A policy server. `tokens` lists the vocabulary after BOS and EOS, in
    /// id order.
    Remote {
        endpoint: String,
        tokens: Vec<String>,
        #[serde(default = "default_mode")]
        mode: TokenizeMode,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_order() -> usize {
    3
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_mode() -> TokenizeMode {
    TokenizeMode::Smiles
}
fn default_timeout() -> u64 {
    10_000
}
fn default_retries() -> u32 {
    2
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCell {
    pub method: Method,
    #[serde(default)]
    pub label: Option<String>,
    pub seeds: Vec<u64>,
    /// Search settings overriding the top-level ones for this cell.
    #[serde(default)]
    pub search: Option<serde_json::Map<String, Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub cells: Vec<BenchCell>,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub search: SearchConfig,
    pub policy: PolicySource,
    pub critics: Vec<CriticConfig>,
    #[serde(default)]
    pub validator: ValidatorKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
}

/// A parsed config together with any non-fatal findings.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Parse and validate. Relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<LoadedConfig> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("config", format!("not valid JSON: {e}")))?;
        let found = value
            .get("format_version")
            .ok_or_else(|| Error::config("format_version", "missing"))?
            .as_u64()
            .ok_or_else(|| Error::config("format_version", "must be an integer"))? as u32;
        if found != CONFIG_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found,
                expected: CONFIG_FORMAT_VERSION,
            });
        }
        let mut warnings = Vec::new();
        let e_given = value
            .get("search")
            .and_then(|s| s.get("e"))
            .is_some();
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config("config", e.to_string()))?;
        if e_given && config.search.algorithm != Algorithm::PhUct {
            warnings.push(format!(
                "`e` is ignored by algorithm {}",
                config.search.algorithm.as_str()
            ));
        }
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(LoadedConfig { config, warnings })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.policy {
            PolicySource::Corpus { path, .. } | PolicySource::File { path } => join(path),
            PolicySource::Remote { .. } => {}
        }
        join(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        match &self.policy {
            PolicySource::Corpus { path, n, k, .. } => {
                if !path.is_file() {
                    return Err(Error::config("policy.corpus.path", format!("{} not found", path.display())));
                }
                if *n < 1 {
                    return Err(Error::config("policy.corpus.n", "must be >= 1"));
                }
                if !(*k > 0.0) || !k.is_finite() {
                    return Err(Error::config("policy.corpus.k", "must be > 0"));
                }
            }
            PolicySource::File { path } => {
                if !path.is_file() {
                    return Err(Error::config("policy.file.path", format!("{} not found", path.display())));
                }
            }
            PolicySource::Remote { tokens, timeout_ms, .. } => {
                if tokens.is_empty() {
                    return Err(Error::config("policy.remote.tokens", "must not be empty"));
                }
                if *timeout_ms == 0 {
                    return Err(Error::config("policy.remote.timeout_ms", "must be > 0"));
                }
            }
        }
        self.reward_spec()?;
        if let Some(bench) = &self.bench {
            self.plan_from(bench, None, None, None)?.validate()?;
        }
        Ok(())
    }

    pub fn reward_spec(&self) -> Result<RewardSpec> {
        let critics = self
            .critics
            .iter()
            .map(CriticConfig::build)
            .collect::<Result<Vec<_>>>()?;
        RewardSpec::new(critics, self.validator.into())
    }

    /// Load or train the policy and assemble the search environment.
    pub fn environment(&self) -> Result<Environment> {
        let (vocab, policy): (Vocabulary, Arc<dyn Policy>) = match &self.policy {
            PolicySource::Corpus { path, n, k, mode } => {
                let lines = read_corpus(path)?;
                let vocab = Vocabulary::build(&lines, *mode)?;
                let corpus = lines
                    .iter()
                    .map(|l| vocab.tokenize(l))
                    .collect::<Result<Vec<_>>>()?;
                let policy = NGramPolicy::train(&corpus, &vocab, *n, *k)?;
                (vocab, Arc::new(policy))
            }
            PolicySource::File { path } => {
                let policy = NGramPolicy::load(path)?;
                (policy.vocab().clone(), Arc::new(policy))
            }
            PolicySource::Remote {
                endpoint,
                tokens,
                mode,
                timeout_ms,
                retries,
            } => {
                let all = [BOS_TEXT, EOS_TEXT]
                    .into_iter()
                    .map(str::to_owned)
                    .chain(tokens.iter().cloned())
                    .collect();
                let vocab = Vocabulary::from_tokens(*mode, all)?;
                let client = RemotePolicyClient::new(endpoint, vocab.len(), *timeout_ms, *retries)?;
                (vocab, Arc::new(client))
            }
        };
        Ok(Environment::new(vocab, policy, Arc::new(self.reward_spec()?)))
    }

    /// The experiment plan described by the `bench` section.
    pub fn experiment_plan(
        &self,
        output_dir: Option<&Path>,
        seed: Option<u64>,
        jobs: Option<usize>,
    ) -> Result<ExperimentPlan> {
        let bench = self
            .bench
            .as_ref()
            .ok_or_else(|| Error::config("bench", "config has no bench section"))?;
        let plan = self.plan_from(bench, output_dir, seed, jobs)?;
        plan.validate()?;
        Ok(plan)
    }

    fn plan_from(
        &self,
        bench: &BenchSection,
        output_dir: Option<&Path>,
        seed: Option<u64>,
        jobs: Option<usize>,
    ) -> Result<ExperimentPlan> {
        let mut plan = ExperimentPlan::new(output_dir.unwrap_or(&self.output_dir));
        plan.jobs = jobs.or(bench.jobs);
        plan.timing = bench.timing;
        let base = serde_json::to_value(&self.search)?;
        for cell in &bench.cells {
            let mut merged = base.clone();
            if let (Some(over), Value::Object(m)) = (&cell.search, &mut merged) {
                for (k, v) in over {
                    m.insert(k.clone(), v.clone());
                }
            }
            let cfg: SearchConfig = serde_json::from_value(merged)
                .map_err(|e| Error::config("bench.cells.search", e.to_string()))?;
            if cell.seeds.is_empty() {
                return Err(Error::config("bench.cells.seeds", "must not be empty"));
            }
            let seeds = match seed {
                Some(s) => vec![s],
                None => cell.seeds.clone(),
            };
            let mut distinct = seeds.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() != seeds.len() {
                return Err(Error::config("bench.cells.seeds", "seeds must be distinct within a cell"));
            }
            plan.add(cell.method, cell.label.as_deref(), &cfg, &seeds);
        }
        Ok(plan)
    }
}
