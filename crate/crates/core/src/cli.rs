//! Command-line front end: `run`, `compare` and `privacy`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::ClientShard;
use crate::dp::{self, PrivacyLedger};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, Algorithm, CosineSummary, ExperimentResult, RoundMetrics};
use crate::metrics::Scores;

pub const METRICS_HEADER: &str =
    "round,epsilon,train_loss,test_acc,test_recall,test_f1,projections,wall_ms";
pub const COMPARISON_HEADER: &str =
    "algorithm,seed,rounds,epsilon,test_acc,test_recall,test_f1,projections,shard_hash,params_sha256";

#[derive(Debug, Parser)]
#[command(
    name = "gcfl",
    version,
    about = "Differentially private federated learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one algorithm over every configured seed.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory; defaults to the `out_dir` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several algorithms on identical seeds and partitions.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated algorithm names.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        algos: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the privacy cost after each round.
    Privacy {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_file(&self.config, &self.overrides)
    }
}

/// Executes a parsed command line, returning the text destined for stdout.
pub fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Run { common, out } => {
            let cfg = common.load()?;
            let out = out.as_ref().unwrap_or(&cfg.out_dir);
            let summary = run(&cfg, out)?;
            Ok(format!(
                "wrote {} seed(s) to {}; mean test accuracy {:.6}\n",
                summary.seeds.len(),
                out.display(),
                summary.mean.accuracy
            ))
        }
        Command::Compare { common, algos, out } => {
            let algorithms = algos
                .iter()
                .map(|a| a.trim())
                .filter(|a| !a.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<Algorithm>>>()?;
            let cfg = common.load()?;
            let out = out.as_ref().unwrap_or(&cfg.out_dir);
            let rows = compare(&cfg, &algorithms, out)?;
            Ok(format!(
                "wrote {} row(s) to {}\n",
                rows.len(),
                out.join("comparison.csv").display()
            ))
        }
        Command::Privacy { common } => privacy_report(&common.load()?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub rounds_completed: usize,
    pub stopped_by_budget: bool,
    pub initial: Scores,
    #[serde(rename = "final")]
    pub final_scores: Scores,
    pub final_epsilon: f64,
    pub final_params_sha256: String,
    pub correction: CosineSummary,
    pub shard_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanSummary {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub epsilon: f64,
    pub projections: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub seeds: Vec<SeedSummary>,
    pub mean: MeanSummary,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub epsilon: f64,
    pub scores: Scores,
    pub projections: usize,
    pub shard_hash: String,
    pub params_sha256: String,
}

/// Formats per-round metrics with a fixed column order and six decimals.
pub fn metrics_csv(rounds: &[RoundMetrics]) -> String {
    let mut s = String::with_capacity(64 * (rounds.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for m in rounds {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            m.round,
            m.epsilon_spent,
            m.train_loss,
            m.test_accuracy,
            m.test_macro_recall,
            m.test_macro_f1,
            m.projections_applied,
            m.wall_millis
        );
    }
    s
}

/// One digest over every shard's content hash, in client order.
pub fn partition_hash(shards: &[ClientShard]) -> String {
    let mut h = Sha256::new();
    for s in shards {
        h.update(s.content_hash().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn seed_summary(result: &ExperimentResult, shards: &[ClientShard]) -> SeedSummary {
    SeedSummary {
        seed: result.seed,
        rounds_completed: result.rounds.len(),
        stopped_by_budget: result.stopped_by_budget,
        initial: result.initial,
        final_scores: result.final_scores,
        final_epsilon: result.final_epsilon,
        final_params_sha256: result.final_params_sha256.clone(),
        correction: result.correction_totals,
        shard_hashes: shards.iter().map(ClientShard::content_hash).collect(),
    }
}

fn mean_of(seeds: &[SeedSummary]) -> MeanSummary {
    let n = seeds.len().max(1) as f64;
    let sum = |f: &dyn Fn(&SeedSummary) -> f64| seeds.iter().map(f).sum::<f64>() / n;
    MeanSummary {
        accuracy: sum(&|s| s.final_scores.accuracy),
        macro_recall: sum(&|s| s.final_scores.macro_recall),
        macro_f1: sum(&|s| s.final_scores.macro_f1),
        epsilon: sum(&|s| s.final_epsilon),
        projections: sum(&|s| s.correction.projections as f64),
    }
}

/// Runs the configured algorithm for every seed, writing
/// `metrics_seed<k>.csv` files and `summary.json` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    ensure_dir(out)?;
    let (train, test) = cfg.load_data()?;
    let algorithm = cfg.federation.algorithm;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let setup = cfg.build_setup(&train, &test, seed)?;
        let result = run_experiment(
            &setup,
            &cfg.federation_for(seed, algorithm),
            &cfg.dp,
            &cfg.correction,
        )?;
        write_file(
            &out.join(format!("metrics_seed{seed}.csv")),
            &metrics_csv(&result.rounds),
        )?;
        seeds.push(seed_summary(&result, &setup.shards));
    }
    let summary = RunSummary {
        algorithm,
        mean: mean_of(&seeds),
        seeds,
        config: cfg.clone(),
    };
    write_file(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(summary)
}

/// Runs each algorithm on the same seeds and partitions and writes
/// `comparison.csv`. Partitions are rebuilt per algorithm and checked against
/// the first algorithm's hash.
pub fn compare(
    cfg: &ExperimentConfig,
    algorithms: &[Algorithm],
    out: &Path,
) -> Result<Vec<ComparisonRow>> {
    if algorithms.is_empty() {
        return Err(Error::validation("algos", "a nonempty list"));
    }
    ensure_dir(out)?;
    let (train, test) = cfg.load_data()?;
    let mut rows = Vec::with_capacity(algorithms.len() * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut expected: Option<String> = None;
        for &algorithm in algorithms {
            let setup = cfg.build_setup(&train, &test, seed)?;
            let shard_hash = partition_hash(&setup.shards);
            match &expected {
                None => expected = Some(shard_hash.clone()),
                Some(h) if *h != shard_hash => {
                    return Err(Error::InvalidPartition(format!(
                        "seed {seed}: partition for {algorithm} differs from the other algorithms"
                    )))
                }
                Some(_) => {}
            }
            let result = run_experiment(
                &setup,
                &cfg.federation_for(seed, algorithm),
                &cfg.dp,
                &cfg.correction,
            )?;
            rows.push(ComparisonRow {
                algorithm,
                seed,
                rounds: result.rounds.len(),
                epsilon: result.final_epsilon,
                scores: result.final_scores,
                projections: result.correction_totals.projections,
                shard_hash,
                params_sha256: result.final_params_sha256,
            });
        }
    }
    rows.sort_by_key(|r| {
        (
            Algorithm::ALL.iter().position(|a| *a == r.algorithm),
            r.seed,
        )
    });
    write_file(&out.join("comparison.csv"), &comparison_csv(&rows))?;
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.algorithm,
            r.seed,
            r.rounds,
            r.epsilon,
            r.scores.accuracy,
            r.scores.macro_recall,
            r.scores.macro_f1,
            r.projections,
            r.shard_hash,
            r.params_sha256
        );
    }
    s
}

/// Privacy cost after each round, assuming every round consumes
/// `local_steps` accountant steps.
pub fn privacy_table(cfg: &ExperimentConfig) -> Result<Vec<(usize, u64, f64, f64)>> {
    let mut ledger = PrivacyLedger::new(cfg.dp);
    let mut rows = Vec::with_capacity(cfg.federation.rounds);
    for round in 1..=cfg.federation.rounds {
        ledger.record_steps(cfg.federation.local_steps as u64);
        let (eps, alpha) = ledger.epsilon_spent()?;
        rows.push((round, ledger.steps_taken(), eps, alpha));
    }
    Ok(rows)
}

fn privacy_report(cfg: &ExperimentConfig) -> Result<String> {
    let mut s = String::from("round,steps,epsilon,alpha\n");
    for (round, steps, eps, alpha) in privacy_table(cfg)? {
        let _ = writeln!(s, "{round},{steps},{eps:.6},{alpha}");
    }
    if let Some(target) = cfg.federation.target_epsilon {
        let steps = dp::steps_for_budget(&cfg.dp, target)?;
        let _ = writeln!(s, "# steps within epsilon {target}: {steps}");
    }
    Ok(s)
}
