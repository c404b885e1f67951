//! The `pmp` command line: dataset generation, oracle self-test, training,
//! evaluation and comparison.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{self, generate, read_dataset, rollout_rng, write_dataset, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::eval::{compare, evaluate, read_reports, write_reports};
use crate::model::{Mode, ModelKind, ModelParams};
use crate::pst::check_against_brute_force;
use crate::train::{train_with, write_metrics, MetricsRow, TrainConfig, TrainObserver};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "PMP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pmp", about = "Persistent message passing on persistent segment trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a rollout dataset as JSONL.
    Gen(GenArgs),
    /// Check historical queries against brute force.
    OracleTest(OracleTestArgs),
    /// Train a model with teacher forcing.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Tabulate evaluation reports across models and seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    /// Array size.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    updates: usize,
    #[arg(long)]
    queries: usize,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OracleTestArgs {
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 10)]
    updates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics and the effective config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Free,
    TeacherForced,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Must match the checkpoint's model.
    #[arg(long)]
    model: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Free)]
    mode: ModeArg,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| invalid!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn header(command: &str, pairs: &[(&str, String)]) {
    println!("# pmp {command}");
    for (k, v) in pairs {
        println!("# {k} = {v}");
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::OracleTest(a) => oracle_test(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    header(
        "gen",
        &[
            ("seed", a.seed.to_string()),
            ("k", a.k.to_string()),
            ("updates", a.updates.to_string()),
            ("queries", a.queries.to_string()),
            ("count", a.count.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let spec = DatasetSpec {
        seed: a.seed,
        array_len: a.k,
        updates: a.updates,
        queries: a.queries,
        count: a.count,
    };
    let data = generate(&spec)?;
    write_dataset(&data, &a.out)?;
    println!("wrote {} rollouts, sha256 {}", data.len(), dataset::fingerprint(&data)?);
    Ok(())
}

fn oracle_test(a: OracleTestArgs) -> Result<()> {
    header(
        "oracle-test",
        &[
            ("k_max", a.k_max.to_string()),
            ("trials", a.trials.to_string()),
            ("updates", a.updates.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    if a.k_max == 0 {
        return Err(invalid!("--k-max must be at least 1"));
    }
    let mut checked = 0;
    for k in 1..=a.k_max {
        for t in 0..a.trials {
            let mut rng = rollout_rng(a.seed.wrapping_add(k as u64), t);
            let r = dataset::sample_rollout(k, a.updates, 0, &mut rng)?;
            let updates: Vec<(usize, u8)> = r
                .ops
                .iter()
                .filter_map(|op| match *op {
                    dataset::Operation::Update { k, x } => Some((k, x)),
                    dataset::Operation::Query { .. } => None,
                })
                .collect();
            checked += check_against_brute_force(&r.initial_array, &updates)?;
        }
    }
    println!("checked {checked} (version, range) queries");
    println!("all snapshot queries match brute force");
    Ok(())
}

struct CliObserver<'a> {
    out: &'a Path,
}

impl TrainObserver for CliObserver<'_> {
    fn on_log(&mut self, row: &MetricsRow) {
        let eval = row
            .eval_query_accuracy
            .map(|a| format!(" eval_query_accuracy {a:.4}"))
            .unwrap_or_default();
        println!(
            "iter {:>6} loss {:.5} (answer {:.4} relevance {:.4} persistency {:.4} node {:.4}){eval}",
            row.iteration,
            row.loss.total(),
            row.loss.answer_bce,
            row.loss.relevance_bce,
            row.loss.persistency_bce,
            row.loss.node_value_bce
        );
    }

    fn on_checkpoint(&mut self, iteration: usize, params: &ModelParams) -> Result<()> {
        params.save(&self.out.join(format!("checkpoint_{iteration:06}.txt")))
    }

    fn on_abort(&mut self, params: &ModelParams, error: &Error) {
        let path = self.out.join("abort_checkpoint.txt");
        eprintln!("{error}; parameters before the failing step saved to {}", path.display());
        let _ = params.save(&path);
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::profile(crate::train::Profile::Desk),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let data = read_dataset(&a.data)?;
    if config.train_rollouts > data.len() {
        return Err(invalid!(
            "{} holds {} rollouts, config asks for train_rollouts = {}",
            a.data.display(),
            data.len(),
            config.train_rollouts
        ));
    }
    let eval = config.eval_data.as_deref().map(read_dataset).transpose()?;
    println!("# pmp train");
    println!("# data = {}", a.data.display());
    for line in config.to_text().lines() {
        println!("# {line}");
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let config_path = a.out.join("config.txt");
    fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let outcome = train_with(&config, &data, eval.as_deref(), &mut CliObserver { out: &a.out })?;
    write_metrics(&outcome.log, &a.out.join("metrics.csv"))?;
    let ckpt = a.out.join("checkpoint.txt");
    outcome.params.save(&ckpt)?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model: ModelKind = a.model.parse()?;
    let mode = match a.mode {
        ModeArg::Free => Mode::Free,
        ModeArg::TeacherForced => Mode::TeacherForced,
    };
    header(
        "eval",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("model", model.to_string()),
            ("mode", format!("{mode:?}")),
            ("out", a.out.display().to_string()),
        ],
    );
    let params = ModelParams::load(&a.checkpoint)?;
    if params.kind != model {
        return Err(invalid!(
            "checkpoint {} holds a {} model, --model says {model}",
            a.checkpoint.display(),
            params.kind
        ));
    }
    let data = read_dataset(&a.data)?;
    let report = evaluate(&params, &data, mode)?;
    write_reports(std::slice::from_ref(&report), &a.out)?;
    println!(
        "{} on {}: query accuracy {:.4}, bit accuracy {:.4}, mean final states {:.2}",
        report.model, report.dataset, report.query_accuracy, report.bit_accuracy, report.mean_final_states
    );
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let shown: Vec<String> = a.reports.iter().map(|p| p.display().to_string()).collect();
    header("compare", &[("reports", shown.join(" "))]);
    let mut reports = Vec::new();
    for p in &a.reports {
        reports.extend(read_reports(p)?);
    }
    let table = compare(&reports)?.to_string();
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out, &table).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}
