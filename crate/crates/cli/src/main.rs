//! Command-line front end: generate datasets, train policies, evaluate
//! checkpoints, solve instances, run classical baselines, and compute
//! exact optima with caching.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including bad
//! flags), 3 when a request exceeds a documented size bound, 4 when
//! training diverges, and 1 for everything else.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attnroute::error::Error;
use attnroute::problems::{PrizeMode, Problem};
use attnroute::train::BaselineKind;

#[derive(Parser)]
#[command(name = "attnroute", version, about = "Construction policies for routing problems")]
struct Cli {
    /// Worker threads for instance-parallel commands; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a reproducible dataset of random instances.
    Generate(GenerateArgs),
    /// Train a policy, checkpointing after every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Decode routes for a dataset and print or store them.
    Solve(SolveArgs),
    /// Run a classical construction heuristic over a dataset.
    Baseline(BaselineArgs),
    /// Compute exact optima for a dataset, caching results next to it.
    Oracle(OracleArgs),
}

/// Decode strategy: pick the argmax action everywhere, or sample `k`
/// complete solutions and keep the best.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Greedy => "greedy",
            Mode::Sample => "sample",
        }
    }
}

/// Classical construction methods.
#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Nearest-neighbor tours.
    Nn,
    /// Cheapest-position insertion, nearest node first.
    InsertionNearest,
    /// Cheapest-position insertion, farthest node first.
    InsertionFarthest,
    /// Cheapest-position insertion in input order.
    InsertionRandom,
    /// Distance-discounted prize chasing, argmax variant.
    TsiliGreedy,
    /// Distance-discounted prize chasing, sampling variant.
    TsiliSample,
    /// Replan after executing the whole current plan.
    ReplanAll,
    /// Replan after executing half of the current plan.
    ReplanHalf,
    /// Replan after every single visit.
    ReplanFirst,
}

fn parse_prize_mode(s: &str) -> Result<PrizeMode, String> {
    match s {
        "const" | "constant" => Ok(PrizeMode::Constant),
        "unif" | "uniform" => Ok(PrizeMode::Uniform),
        "dist" | "distance" => Ok(PrizeMode::Distance),
        other => Err(format!("unknown prize mode {other}; expected const, unif, or dist")),
    }
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    match s {
        "exp" | "exponential" => Ok(BaselineKind::Exponential),
        "critic" => Ok(BaselineKind::Critic),
        "rollout" => Ok(BaselineKind::Rollout),
        "none" => Ok(BaselineKind::None),
        other => Err(format!("unknown baseline {other}; expected exp, critic, rollout, or none")),
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// One of tsp, cvrp, sdvrp, op, pctsp, spctsp.
    #[arg(long)]
    problem: Problem,
    /// Customers per instance.
    #[arg(long)]
    n: usize,
    /// Instances to generate.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prize scheme for the orienteering problem: const, unif, or dist.
    #[arg(long, value_parser = parse_prize_mode)]
    prize_mode: Option<PrizeMode>,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of tsp, cvrp, sdvrp, op, pctsp, spctsp.
    #[arg(long)]
    problem: Option<Problem>,
    /// Customers per training instance.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Gradient steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    /// Instances per gradient step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch multiplicative learning-rate decay.
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Significance level for baseline replacement.
    #[arg(long)]
    alpha: Option<f64>,
    /// One of exp, critic, rollout, none.
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<BaselineKind>,
    /// Run the first rollout-baseline epoch on the exponential baseline.
    #[arg(long)]
    warmup: Option<bool>,
    /// Prize scheme for the orienteering problem: const, unif, or dist.
    #[arg(long, value_parser = parse_prize_mode)]
    prize_mode: Option<PrizeMode>,
    /// Instances held out for baseline-replacement tests.
    #[arg(long)]
    eval_set_size: Option<usize>,
    /// Instances held out for per-epoch validation.
    #[arg(long)]
    val_set_size: Option<usize>,
    /// Directory for the checkpoint and history log.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Continue from a checkpoint; its stored configuration wins, so no
    /// other configuration flags may be given.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    mode: Mode,
    /// Samples per instance in sample mode.
    #[arg(long, default_value_t = 1280)]
    k: usize,
    /// Seed for the sampling streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compute exact optima where possible (extending the dataset's oracle
    /// cache) so the report carries optimality gaps.
    #[arg(long)]
    oracle: bool,
    /// Write the full report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset of instances to solve.
    #[arg(long)]
    data: PathBuf,
    /// Solve only the instance at this zero-based index.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    mode: Mode,
    /// Samples per instance in sample mode.
    #[arg(long, default_value_t = 1280)]
    k: usize,
    /// Seed for the sampling streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write routes here, one object per line; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Dataset to run the heuristic on.
    #[arg(long)]
    data: PathBuf,
    /// Seed for sampling heuristics.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compute exact optima where possible so the report carries gaps.
    #[arg(long)]
    oracle: bool,
    /// Write the full report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Dataset to solve exactly.
    #[arg(long)]
    data: PathBuf,
    /// Write the full report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Capacity(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if cli.workers > 0 {
        // Ignore the error: the pool can only be configured once and a
        // second configuration attempt means it is already running.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Solve(args) => commands::solve(args),
        Command::Baseline(args) => commands::baseline(args),
        Command::Oracle(args) => commands::oracle(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
