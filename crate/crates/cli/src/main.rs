//! `erp`: train n-gram policies, run searches and benchmarks, enumerate
//! oracles and check configs.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or
//! usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use erp_core::bench::{brute_force_oracle, compute_metrics, run_experiment, Metrics};
use erp_core::config::{LoadedConfig, PolicySource, RunConfig};
use erp_core::io::write_atomic;
use erp_core::search::Search;
use erp_core::vocab::{read_corpus, split_units, TokenizeMode, Vocabulary};
use erp_core::{Error, NGramPolicy};

#[derive(Parser, Debug)]
#[command(name = "erp", version, about = "Entropy-reinforced tree search for guided decoding")]
struct Cli {
    /// Run config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed; overrides the config's rng_seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Maximum number of benchmark cells run at once.
    #[arg(long, global = true, value_name = "INT")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an n-gram policy and save it as `policy.json` under --out.
    Train {
        /// Corpus file, one sequence per line. Defaults to the config's
        /// corpus policy source.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// N-gram order.
        #[arg(long, default_value_t = 3)]
        order: usize,
        /// Additive smoothing constant.
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
        /// Tokenizer: `char` or `smiles`.
        #[arg(long, default_value = "smiles")]
        mode: TokenizeMode,
    },
    /// Run one search and write `run.json`.
    Generate,
    /// Run the config's benchmark plan.
    Bench,
    /// Enumerate every sequence up to the horizon and write `oracle.csv`.
    Oracle,
    /// Check a config without running anything.
    Validate,
}

/// A failure tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ERP_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.jobs == Some(0) {
        return Err(usage(anyhow!("--jobs must be >= 1")));
    }
    match &cli.command {
        Command::Train {
            corpus,
            order,
            smoothing,
            mode,
        } => train(cli, corpus.as_deref(), *order, *smoothing, *mode),
        Command::Generate => generate(cli),
        Command::Bench => bench(cli),
        Command::Oracle => oracle(cli),
        Command::Validate => {
            let loaded = load(cli)?;
            println!("config ok");
            if loaded.config.bench.is_some() {
                let plan = loaded
                    .config
                    .experiment_plan(cli.out.as_deref(), cli.seed, cli.jobs)
                    .map_err(usage)?;
                println!("bench cells: {}", plan.cells.len());
            }
            Ok(())
        }
    }
}

fn load(cli: &Cli) -> Result<LoadedConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| usage(anyhow!("--config is required")))?;
    let mut loaded = RunConfig::load(path).map_err(usage)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    if let Some(seed) = cli.seed {
        loaded.config.search.rng_seed = seed;
    }
    if let Some(out) = &cli.out {
        loaded.config.output_dir = out.clone();
    }
    Ok(loaded)
}

fn train(
    cli: &Cli,
    corpus: Option<&Path>,
    order: usize,
    smoothing: f64,
    mode: TokenizeMode,
) -> Result<(), Failure> {
    let (corpus, order, smoothing, mode, out_dir) = match (corpus, &cli.config) {
        (Some(path), _) => (
            path.to_path_buf(),
            order,
            smoothing,
            mode,
            cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        ),
        (None, Some(_)) => {
            let loaded = load(cli)?;
            match loaded.config.policy {
                PolicySource::Corpus { path, n, k, mode } => (path, n, k, mode, loaded.config.output_dir),
                _ => return Err(usage(anyhow!("config policy source is not a corpus"))),
            }
        }
        (None, None) => return Err(usage(anyhow!("train needs --corpus or --config"))),
    };
    let lines = read_corpus(&corpus)
        .with_context(|| format!("cannot read corpus {}", corpus.display()))
        .map_err(usage)?;
    let vocab = Vocabulary::build(&lines, mode).map_err(usage)?;
    let states = lines
        .iter()
        .map(|l| vocab.tokenize(l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let policy = NGramPolicy::train(&states, &vocab, order, smoothing).map_err(usage)?;
    let path = out_dir.join("policy.json");
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    policy.save(&path).map_err(runtime)?;

    let lengths: Vec<usize> = lines.iter().map(|l| split_units(l, mode).len()).collect();
    let min = lengths.iter().min().copied().unwrap_or(0);
    let max = lengths.iter().max().copied().unwrap_or(0);
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    println!("vocab size: {}", vocab.len());
    println!("sequences: {}", lines.len());
    println!("length min/mean/max: {min} / {mean:.6} / {max}");
    println!("policy written to {}", path.display());
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("best_norm_reward: {:.6}", m.best_norm_reward);
    println!("avg_valid_norm_reward: {:.6}", m.avg_valid_norm_reward);
    println!("avg_top10_norm_reward: {:.6}", m.avg_top10_norm_reward);
    println!("unique_valid_count: {}", m.unique_valid_count);
    for (name, mean) in &m.per_critic_means {
        println!("mean {name}: {mean:.6}");
    }
    println!("tokens_sampled_total: {}", m.tokens_sampled_total);
}

fn generate(cli: &Cli) -> Result<(), Failure> {
    let config = load(cli)?.config;
    let env = config.environment().map_err(classify)?;
    let mut search = Search::new(
        env.root.clone(),
        config.search.clone(),
        &*env.policy,
        &env.vocab,
        &*env.reward,
    )
    .map_err(usage)?;
    search.run().map_err(runtime)?;
    let mut result = search.result();
    let metrics = compute_metrics(&result, &env.reward);
    result.metrics = Some(metrics.clone());
    let path = config.output_dir.join("run.json");
    std::fs::create_dir_all(&config.output_dir).map_err(runtime)?;
    write_atomic(&path, result.to_json().map_err(runtime)?.as_bytes()).map_err(runtime)?;
    println!("algorithm: {}", result.method);
    println!("rollouts: {}", result.best_so_far.len());
    print_metrics(&metrics);
    if let Some(top) = result.molecules.first() {
        println!("top sequence: {} ({:.6})", top.sequence, top.reward);
    }
    println!("result written to {}", path.display());
    Ok(())
}

fn bench(cli: &Cli) -> Result<(), Failure> {
    let config = load(cli)?.config;
    let plan = config
        .experiment_plan(cli.out.as_deref(), cli.seed, cli.jobs)
        .map_err(usage)?;
    let env = config.environment().map_err(classify)?;
    let report = run_experiment(&plan, |_| Ok(env.clone())).map_err(classify)?;
    for (cell, r) in plan.cells.iter().zip(&report.results) {
        let best = r.metrics.as_ref().map_or(0.0, |m| m.best_norm_reward);
        println!("{} seed {}: best {best:.6}, tokens {}", cell.label, cell.seed, r.tokens_sampled_total());
    }
    println!("{} results and {} written", report.json_paths.len(), report.csv_path.display());
    Ok(())
}

fn oracle(cli: &Cli) -> Result<(), Failure> {
    let config = load(cli)?.config;
    let env = config.environment().map_err(classify)?;
    let table = brute_force_oracle(&env.vocab, config.search.horizon, &env.reward).map_err(classify)?;
    let path = config.output_dir.join("oracle.csv");
    std::fs::create_dir_all(&config.output_dir).map_err(runtime)?;
    write_atomic(&path, table.to_csv().as_bytes()).map_err(runtime)?;
    println!("sequences: {}", table.rows.len());
    println!("optimum: {} ({:.6})", table.best.sequence, table.best.reward);
    println!("table written to {}", path.display());
    Ok(())
}

/// Configuration-shaped errors exit 2, everything else 1.
fn classify(e: Error) -> Failure {
    match e {
        Error::InvalidConfig { .. }
        | Error::InvalidCritic(_)
        | Error::FormatVersion { .. }
        | Error::SpaceTooLarge { .. }
        | Error::CorpusEmpty
        | Error::UnknownToken { .. } => usage(e),
        _ => runtime(e),
    }
}
