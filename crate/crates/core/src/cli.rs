//! `coselect` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every flag and
//! config file is parsed and validated before any stage runs.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench::{gen_synthetic, run_bench, BenchConfig, Strategy, SyntheticData, SyntheticSpec, ORDERING_PAIRS};
use crate::dataset::{format_scores, load_dataset, read_scores, Dataset};
use crate::error::Error;
use crate::fsio::StagedWrites;
use crate::objective::LossMode;
use crate::pipeline::{
    prepare, run_pipeline, scored_entries, select_entries, train_prepared, TrainConfig, CHECKPOINT_FILE,
    CLUSTERS_FILE, SCORES_FILE, SELECTION_FILE,
};
use crate::scorer::{infer_all_scores, ScorerCheckpoint};
use crate::verify::run_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const PLANTED_FILE: &str = "planted.tsv";
pub const TRAINING_FILE: &str = "training.json";
pub const BENCH_FILE: &str = "bench.tsv";

#[derive(Debug, Parser)]
#[command(name = "coselect", version, about = "Coupled importance/diversity data selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic pool and a clean held-out set.
    Gen(GenArgs),
    /// Sample the training subset and cluster it.
    Cluster(RunArgs),
    /// Co-train the scorer and write its checkpoint.
    Train(RunArgs),
    /// Score every sample of a dataset with a trained checkpoint.
    Score(ScoreArgs),
    /// Keep the lowest-scoring fraction of each task from a score file.
    Select(SelectArgs),
    /// Train, score and select in one go.
    Pipeline(RunArgs),
    /// Compare selection strategies on synthetic pools.
    Bench(BenchArgs),
    /// Run the built-in invariant checks.
    Verify,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file; falls back to `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Percentage of the pool used for training.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    loss_mode: Option<LossMode>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Score file (`id<TAB>task<TAB>score`).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Restrict to these strategies (repeatable).
    #[arg(long)]
    strategy: Vec<Strategy>,
}

/// A runtime failure tagged with the operation that raised it.
struct Failure {
    op: &'static str,
    error: Error,
}

trait Op<T> {
    fn op(self, op: &'static str) -> Result<T, Failure>;
}

impl<T> Op<T> for crate::Result<T> {
    fn op(self, op: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { op, error })
    }
}

fn usage(msg: impl Display) -> i32 {
    eprintln!("error: {msg}");
    eprintln!("\nFor more information, try '--help'.");
    EXIT_USAGE
}

/// Parses `argv` (without the program name) and runs one subcommand.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("coselect")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let planned = match plan(cli.command) {
        Ok(p) => p,
        Err(msg) => return usage(msg),
    };
    match execute(planned) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {} failed: {}", f.op, f.error);
            EXIT_RUNTIME
        }
    }
}

/// A fully validated invocation.
enum Plan {
    Gen { spec: SyntheticSpec, seed: u64, out: PathBuf },
    Cluster { config: TrainConfig, data: PathBuf, out: PathBuf },
    Train { config: TrainConfig, data: PathBuf, out: PathBuf },
    Score { data: PathBuf, checkpoint: PathBuf, out: PathBuf },
    Select { scores: PathBuf, gamma: f64, out: PathBuf },
    Pipeline { config: TrainConfig, data: PathBuf, out: PathBuf },
    Bench { config: BenchConfig, out: PathBuf },
    Verify,
}

fn read_toml(path: &Path) -> Result<toml::Table, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    text.parse::<toml::Table>()
        .map_err(|e| format!("config {}: {e}", path.display()))
}

fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table, path: &Path) -> Result<T, String> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| format!("config {}: {e}", path.display()))
}

/// Training config plus the optional `data` key, resolved against the
/// config file's directory.
fn load_run_config(path: Option<&Path>) -> Result<(TrainConfig, Option<PathBuf>), String> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), None));
    };
    let mut table = read_toml(path)?;
    let data = match table.remove("data") {
        None => None,
        Some(toml::Value::String(s)) => {
            let p = PathBuf::from(s);
            Some(if p.is_relative() {
                path.parent().unwrap_or(Path::new("")).join(p)
            } else {
                p
            })
        }
        Some(other) => return Err(format!("config {}: `data` must be a path string, got {other}", path.display())),
    };
    Ok((from_table(table, path)?, data))
}

fn run_plan(args: RunArgs) -> Result<(TrainConfig, PathBuf, PathBuf), String> {
    let (mut config, config_data) = load_run_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(g) = args.gamma {
        config.gamma = g;
    }
    if let Some(p) = args.p {
        config.p = p;
    }
    if let Some(m) = args.clusters {
        config.clusters = m;
    }
    if let Some(mode) = args.loss_mode {
        config.loss_mode = mode;
    }
    config.validate().map_err(|e| e.to_string())?;
    let data = args
        .data
        .or(config_data)
        .ok_or("no dataset: pass --data or set `data` in the config")?;
    Ok((config, data, args.common.out))
}

fn plan(command: Command) -> Result<Plan, String> {
    Ok(match command {
        Command::Gen(args) => {
            let spec = match &args.common.config {
                Some(path) => from_table(read_toml(path)?, path)?,
                None => SyntheticSpec::default(),
            };
            spec.validate().map_err(|e| e.to_string())?;
            Plan::Gen {
                spec,
                seed: args.common.seed.unwrap_or(0),
                out: args.common.out,
            }
        }
        Command::Cluster(args) => {
            let (config, data, out) = run_plan(args)?;
            Plan::Cluster { config, data, out }
        }
        Command::Train(args) => {
            let (config, data, out) = run_plan(args)?;
            Plan::Train { config, data, out }
        }
        Command::Pipeline(args) => {
            let (config, data, out) = run_plan(args)?;
            Plan::Pipeline { config, data, out }
        }
        Command::Score(args) => Plan::Score {
            data: args.data,
            checkpoint: args.checkpoint,
            out: args.out,
        },
        Command::Select(args) => {
            if !(args.gamma > 0.0 && args.gamma <= 1.0) {
                return Err(format!("--gamma must lie in (0, 1], got {}", args.gamma));
            }
            Plan::Select {
                scores: args.scores,
                gamma: args.gamma,
                out: args.out,
            }
        }
        Command::Bench(args) => {
            let mut config: BenchConfig = match &args.common.config {
                Some(path) => from_table(read_toml(path)?, path)?,
                None => BenchConfig::default(),
            };
            if let Some(seed) = args.common.seed {
                config.seeds = vec![seed];
            }
            if let Some(g) = args.gamma {
                config.gamma = g;
            }
            if let Some(m) = args.clusters {
                config.train.clusters = m;
            }
            if !args.strategy.is_empty() {
                config.strategies = args.strategy;
            }
            if !(config.gamma > 0.0 && config.gamma <= 1.0) {
                return Err(format!("bench gamma must lie in (0, 1], got {}", config.gamma));
            }
            if config.seeds.is_empty() {
                return Err("bench needs at least one seed".into());
            }
            config.spec.validate().map_err(|e| e.to_string())?;
            config.train.validate().map_err(|e| e.to_string())?;
            Plan::Bench {
                config,
                out: args.common.out,
            }
        }
        Command::Verify => Plan::Verify,
    })
}

fn create_dir(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
        .op("fsio::create_dir")
}

fn planted_tsv(data: &SyntheticData) -> String {
    let mut out = String::from("id\tgroup\tnoisy\thard\n");
    for (i, s) in data.dataset.samples().iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.id, data.planted[i], data.noisy[i] as u8, data.hard[i] as u8
        ));
    }
    out
}

fn load(data: &Path) -> Result<Dataset, Failure> {
    load_dataset(data).op("dataset::load_dataset")
}

fn execute(plan: Plan) -> Result<i32, Failure> {
    match plan {
        Plan::Gen { spec, seed, out } => {
            let data = gen_synthetic(&spec, seed).op("bench::gen_synthetic")?;
            create_dir(&out)?;
            let mut staged = StagedWrites::new();
            staged
                .stage(&out.join(DATASET_FILE), data.dataset.to_jsonl().as_bytes())
                .op("fsio::stage")?;
            staged
                .stage(&out.join(HELDOUT_FILE), data.heldout.to_jsonl().as_bytes())
                .op("fsio::stage")?;
            staged
                .stage(&out.join(PLANTED_FILE), planted_tsv(&data).as_bytes())
                .op("fsio::stage")?;
            staged.commit().op("fsio::commit")?;
            println!(
                "wrote {} samples and {} held-out samples to {}",
                data.dataset.len(),
                data.heldout.len(),
                out.display()
            );
        }
        Plan::Cluster { config, data, out } => {
            let dataset = load(&data)?;
            let prepared = prepare(&config, &dataset).op("pipeline::prepare")?;
            let mut dump = String::new();
            for (&i, c) in prepared.subset.iter().zip(&prepared.clusters.assignment) {
                dump.push_str(&format!("{}\t{c}\n", dataset.samples()[i].id));
            }
            create_dir(&out)?;
            crate::fsio::write_atomic(&out.join(CLUSTERS_FILE), dump.as_bytes()).op("fsio::write_atomic")?;
            println!(
                "clustered {} training samples into sizes {:?}",
                prepared.len(),
                prepared.clusters.counts
            );
        }
        Plan::Train { config, data, out } => {
            let dataset = load(&data)?;
            let prepared = prepare(&config, &dataset).op("pipeline::prepare")?;
            let state = train_prepared(&config, &prepared).op("pipeline::train_prepared")?;
            let checkpoint = ScorerCheckpoint::new(&state.scorer, state.stats, config.fingerprint());
            let u = state.uncertainty();
            let summary = serde_json::json!({
                "config_fingerprint": config.fingerprint(),
                "config": config,
                "train_size": prepared.len(),
                "steps": state.trajectories.len(),
                "final_s_i": u.s_i,
                "final_s_d": u.s_d,
                "final_lambda": state.balance.lambda(),
                "trajectories": state.trajectories,
            });
            let summary = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::NonFinite(e.to_string()))
                .op("cli::train_summary")?;
            create_dir(&out)?;
            let mut staged = StagedWrites::new();
            staged
                .stage(&out.join(CHECKPOINT_FILE), checkpoint.to_json().as_bytes())
                .op("fsio::stage")?;
            staged
                .stage(&out.join(TRAINING_FILE), (summary + "\n").as_bytes())
                .op("fsio::stage")?;
            staged.commit().op("fsio::commit")?;
            println!(
                "trained {} steps on {} samples; s_I {:.4}, s_D {:.4}",
                state.trajectories.len(),
                prepared.len(),
                u.s_i,
                u.s_d
            );
        }
        Plan::Score { data, checkpoint, out } => {
            let ckpt = ScorerCheckpoint::load(&checkpoint).op("scorer::load_checkpoint")?;
            let scorer = ckpt.scorer().op("scorer::load_checkpoint")?;
            let dataset = load(&data)?;
            let scores = infer_all_scores(&scorer, &dataset, &ckpt.norm_stats).op("scorer::infer_all_scores")?;
            let entries = scored_entries(&scores, &dataset).op("pipeline::scored_entries")?;
            create_dir(&out)?;
            crate::fsio::write_atomic(&out.join(SCORES_FILE), format_scores(&entries).as_bytes())
                .op("fsio::write_atomic")?;
            println!("scored {} samples", entries.len());
        }
        Plan::Select { scores, gamma, out } => {
            let entries = read_scores(&scores).op("dataset::read_scores")?;
            let selection = select_entries(entries, gamma).op("pipeline::select_entries")?;
            create_dir(&out)?;
            crate::fsio::write_atomic(&out.join(SELECTION_FILE), selection.to_tsv().as_bytes())
                .op("fsio::write_atomic")?;
            println!("selected {} samples: {:?}", selection.len(), selection.per_task_counts());
        }
        Plan::Pipeline { config, data, out } => {
            let report = run_pipeline(&config, &data, &out).op("pipeline::run_pipeline")?;
            println!(
                "selected {} of {} samples into {}",
                report.selected_total,
                report.dataset_size,
                out.display()
            );
        }
        Plan::Bench { config, out } => {
            let result = run_bench(&config).op("bench::run_bench")?;
            let pairs: Vec<_> = ORDERING_PAIRS
                .iter()
                .copied()
                .filter(|(a, b)| config.strategies.contains(a) && config.strategies.contains(b))
                .collect();
            let tsv = result.to_tsv(&pairs);
            create_dir(&out)?;
            crate::fsio::write_atomic(&out.join(BENCH_FILE), tsv.as_bytes()).op("fsio::write_atomic")?;
            for line in tsv.lines().filter(|l| !l.starts_with("row")) {
                println!("{line}");
            }
        }
        Plan::Verify => {
            let results = run_suite();
            let mut ok = true;
            for c in &results {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                eprintln!("error: verify::run_suite failed");
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(EXIT_OK)
}
