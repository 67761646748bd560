use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use symae::bottleneck::DbVariant;
use symae::experiment::{cmd_eval, cmd_generate, cmd_train, ExperimentConfig, TaskConfig};
use symae::metrics::EvalReport;
use symae::training::Strategy;
use symae::vocab::Side;

#[derive(Parser)]
#[command(name = "symae", version, about = "Paired sequence transducers with a discrete bottleneck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a corpus (and optionally its split) to a directory.
    Generate(GenerateArgs),
    /// Train from a config file; flags override its values.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a parallel corpus.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    MiniScan,
    MiniPcfgSet,
    Copy,
}

#[derive(Args)]
struct GenerateArgs {
    /// Take the task from this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    task: Option<TaskKind>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the parallel / x-only / z-only split.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    db: Option<DbVariant>,
    /// joint, unsup-then-sup or sup-then-unsup.
    #[arg(long)]
    schedule: Option<Strategy>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    #[value(name = "x-z")]
    XZ,
    #[value(name = "z-x")]
    ZX,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tab-separated `x<TAB>z` lines.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "x-z")]
    direction: Direction,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let mut task = match args.task {
        None => config.task,
        Some(TaskKind::MiniScan) => TaskConfig::MiniScan { size: 2000, full_grammar: false },
        Some(TaskKind::MiniPcfgSet) => TaskConfig::MiniPcfgSet { size: 2000, depth: 2, grammar: Default::default() },
        Some(TaskKind::Copy) => TaskConfig::Copy { size: 1000, symbols: 4, min_len: 1, max_len: 4 },
    };
    if let Some(n) = args.size {
        match &mut task {
            TaskConfig::MiniScan { size, .. } | TaskConfig::MiniPcfgSet { size, .. } | TaskConfig::Copy { size, .. } => *size = n,
            TaskConfig::Files { .. } => bail!("--size does not apply to a file corpus"),
        }
    }
    let seed = args.seed.unwrap_or(config.seed);
    let corpus = cmd_generate(&task, seed, args.eta, &args.out)?;
    println!("wrote {} pairs to {}", corpus.pairs.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(eta) = args.eta {
        config.eta = eta;
    }
    if let Some(db) = args.db {
        config.db = db;
    }
    if let Some(strategy) = args.schedule {
        config.schedule.strategy = strategy;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(out) = args.out {
        config.out = out;
    }
    let problems = config.problems();
    if !problems.is_empty() {
        bail!("invalid config:\n  {}", problems.join("\n  "));
    }
    let result = cmd_train(&config)?;
    if !args.quiet {
        if let Some((xz, zx)) = result.last_reports() {
            println!("{xz}\n{zx}");
        }
    }
    println!("run written to {}", config.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let source = match args.direction {
        Direction::XZ => Side::X,
        Direction::ZX => Side::Z,
    };
    let report = cmd_eval(&args.checkpoint, &args.corpus, source, args.batch_size)?;
    println!("{report}");
    println!("{}", EvalReport::CSV_HEADER.join(","));
    println!("{}", report.csv_record().join(","));
    if let Some(path) = args.csv {
        std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
