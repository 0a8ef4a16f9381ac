//! Command implementations. Every command is deterministic for a fixed
//! seed: instance-level work runs in parallel but each instance draws from
//! its own derived random stream, so the worker count never changes a
//! result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use attnroute::error::{Error, Result};
use attnroute::heuristics::{
    insertion, nearest_neighbor, spctsp_replan_exact, tsiligirides, InsertionVariant, ReplanStrategy,
};
use attnroute::io::{
    instance_digest, load_dataset, save_dataset, save_history, write_atomic, Checkpoint, EvalReport, EvalRow,
};
use attnroute::model::Policy;
use attnroute::oracle::{brute_force_op, brute_force_pctsp, held_karp, optimality_gap};
use attnroute::problems::{generate_instance, Instance, Problem, Solution};
use attnroute::rng::{derive_rng, STREAM_DATASET, STREAM_SAMPLE};
use attnroute::rollout::{greedy_rollout, sample_best_of, RolloutMode};
use attnroute::train::{EpochRecord, TrainConfig, Trainer};

use crate::{BaselineArgs, EvalArgs, GenerateArgs, Method, Mode, OracleArgs, SolveArgs, TrainArgs};

pub fn generate(args: GenerateArgs) -> Result<()> {
    match (args.problem, args.prize_mode) {
        (Problem::Op, None) => {
            return Err(Error::Config("the orienteering problem needs --prize-mode".into()))
        }
        (p, Some(_)) if p != Problem::Op => {
            return Err(Error::Config(format!("--prize-mode does not apply to {p}")))
        }
        _ => {}
    }
    let mut rng = derive_rng(args.seed, &[STREAM_DATASET]);
    let instances: Vec<Instance> = (0..args.count)
        .map(|_| generate_instance(args.problem, args.n, args.prize_mode, &mut rng))
        .collect::<Result<_>>()?;
    save_dataset(&args.out, &instances, Some(args.seed), args.prize_mode)?;
    println!("wrote {} {} instances (n={}) to {}", args.count, args.problem, args.n, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Optional TOML mirror of [`TrainConfig`]; any field present overrides the
/// default, and explicit flags override the file in turn.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    problem: Option<String>,
    n: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    alpha: Option<f64>,
    baseline: Option<String>,
    warmup: Option<bool>,
    prize_mode: Option<String>,
    eval_set_size: Option<usize>,
    val_set_size: Option<usize>,
    model: Option<FileModel>,
}

#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileModel {
    d_h: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    tanh_clip: Option<f64>,
    critic_hidden: Option<usize>,
}

fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let file_problem = file.problem.as_deref().map(str::parse).transpose()?;
    let problem = args
        .problem
        .or(file_problem)
        .ok_or_else(|| Error::Config("--problem is required (flag or config file)".into()))?;
    let n = args
        .n
        .or(file.n)
        .ok_or_else(|| Error::Config("--n is required (flag or config file)".into()))?;

    let mut cfg = TrainConfig::defaults(problem, n);
    if let Some(m) = &file.model {
        let model = &mut cfg.model;
        model.d_h = m.d_h.unwrap_or(model.d_h);
        model.n_layers = m.n_layers.unwrap_or(model.n_layers);
        model.n_heads = m.n_heads.unwrap_or(model.n_heads);
        model.d_ff = m.d_ff.unwrap_or(model.d_ff);
        model.tanh_clip = m.tanh_clip.unwrap_or(model.tanh_clip);
        model.critic_hidden = m.critic_hidden.unwrap_or(model.critic_hidden);
    }
    let file_baseline = file.baseline.as_deref().map(crate::parse_baseline).transpose().map_err(Error::Config)?;
    let file_prize = file.prize_mode.as_deref().map(crate::parse_prize_mode).transpose().map_err(Error::Config)?;

    cfg.seed = args.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.epochs = args.epochs.or(file.epochs).unwrap_or(cfg.epochs);
    cfg.steps_per_epoch = args.steps.or(file.steps).unwrap_or(cfg.steps_per_epoch);
    cfg.batch_size = args.batch.or(file.batch).unwrap_or(cfg.batch_size);
    cfg.lr = args.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.lr_decay = args.lr_decay.or(file.lr_decay).or(cfg.lr_decay);
    cfg.alpha = args.alpha.or(file.alpha).unwrap_or(cfg.alpha);
    cfg.baseline = args.baseline.or(file_baseline).unwrap_or(cfg.baseline);
    cfg.warmup = args.warmup.or(file.warmup).unwrap_or(cfg.warmup);
    if problem == Problem::Op {
        cfg.prize_mode = args.prize_mode.or(file_prize).or(cfg.prize_mode);
    } else if let Some(mode) = args.prize_mode.or(file_prize) {
        return Err(Error::Config(format!("prize mode {mode} does not apply to {problem}")));
    }
    cfg.eval_set_size = args.eval_set_size.or(file.eval_set_size).unwrap_or(cfg.eval_set_size);
    cfg.val_set_size = args.val_set_size.or(file.val_set_size).unwrap_or(cfg.val_set_size);
    Ok(cfg)
}

fn print_record(record: &EpochRecord) {
    let gap = match record.val_gap {
        Some(g) => format!("{:6.2}%", 100.0 * g),
        None => "      -".into(),
    };
    println!(
        "epoch {:>4}  train {:>9.4}  val {:>9.4}  gap {gap}  replaced {}  {:.1}s",
        record.epoch,
        record.train_cost,
        record.val_cost,
        if record.baseline_replaced { "yes" } else { " no" },
        record.seconds,
    );
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut trainer = if let Some(resume) = &args.resume {
        let overriding = args.config.is_some()
            || args.problem.is_some()
            || args.n.is_some()
            || args.seed.is_some()
            || args.epochs.is_some()
            || args.steps.is_some()
            || args.batch.is_some()
            || args.lr.is_some()
            || args.lr_decay.is_some()
            || args.alpha.is_some()
            || args.baseline.is_some()
            || args.warmup.is_some()
            || args.prize_mode.is_some()
            || args.eval_set_size.is_some()
            || args.val_set_size.is_some();
        if overriding {
            return Err(Error::Config(
                "--resume continues under the checkpoint's stored configuration; configuration flags cannot be combined with it".into(),
            ));
        }
        Checkpoint::load(resume)?.into_trainer()?
    } else {
        Trainer::new(build_config(&args)?)?
    };

    std::fs::create_dir_all(&args.out_dir)?;
    let checkpoint_path = args.out_dir.join("checkpoint.ckpt");
    let history_path = args.out_dir.join("history.jsonl");
    let cfg = trainer.config().clone();
    println!(
        "training {} n={} with the {} baseline: {} epochs of {} steps, batch {}",
        cfg.problem(),
        cfg.n,
        cfg.baseline,
        cfg.epochs,
        cfg.steps_per_epoch,
        cfg.batch_size,
    );
    for r in trainer.history() {
        print_record(r);
    }
    while trainer.epochs_done() < cfg.epochs {
        trainer.run_epoch()?;
        Checkpoint::from_trainer(&trainer).save(&checkpoint_path)?;
        save_history(&history_path, trainer.history())?;
        print_record(trainer.history().last().expect("epoch just recorded"));
    }
    // A zero-epoch run still leaves a loadable checkpoint behind.
    Checkpoint::from_trainer(&trainer).save(&checkpoint_path)?;
    save_history(&history_path, trainer.history())?;
    println!("checkpoint at {}", checkpoint_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared evaluation plumbing
// ---------------------------------------------------------------------------

fn load_instances(path: &Path) -> Result<Vec<Instance>> {
    let instances = load_dataset(path)?;
    if instances.is_empty() {
        return Err(Error::Config(format!("{} holds no instances", path.display())));
    }
    Ok(instances)
}

fn dataset_problem(instances: &[Instance]) -> Result<Problem> {
    let problem = instances[0].problem;
    if let Some(other) = instances.iter().find(|i| i.problem != problem) {
        return Err(Error::Format(format!("dataset mixes {problem} and {} instances", other.problem)));
    }
    Ok(problem)
}

fn load_policy(path: &Path) -> Result<Policy> {
    Ok(Checkpoint::load(path)?.policy)
}

fn decode_one(policy: &Policy, instance: &Instance, mode: Mode, k: usize, seed: u64, index: u64) -> Result<Solution> {
    match mode {
        Mode::Greedy => Ok(greedy_rollout(policy, std::slice::from_ref(instance))?.remove(0)),
        Mode::Sample => sample_best_of(policy, instance, k, seed, index),
    }
}

/// Exact optimum for problems that have a small-instance solver.
fn oracle_cost(instance: &Instance) -> Result<f64> {
    match instance.problem {
        Problem::Tsp => held_karp(instance).map(|r| r.cost),
        Problem::Op => brute_force_op(instance).map(|r| r.cost),
        Problem::Pctsp => brute_force_pctsp(instance).map(|r| r.cost),
        other => Err(Error::Capacity(format!("no exact solver for {other}"))),
    }
}

/// Exact optima for a dataset, cached beside it as a digest-to-cost map so
/// repeated evaluations never recompute a solved instance.
struct OracleCache {
    path: PathBuf,
    entries: BTreeMap<String, f64>,
}

impl OracleCache {
    fn for_dataset(data: &Path) -> Result<Self> {
        let path = PathBuf::from(format!("{}.oracle.json", data.display()));
        let entries = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(OracleCache { path, entries })
    }

    /// Solves every uncached instance (in parallel) and persists the cache.
    /// Returns how many instances were newly solved.
    fn ensure(&mut self, instances: &[Instance]) -> Result<usize> {
        let missing: Vec<(String, &Instance)> = instances
            .iter()
            .map(|inst| (instance_digest(inst), inst))
            .filter(|(digest, _)| !self.entries.contains_key(digest))
            .collect();
        let solved: Vec<(String, f64)> = missing
            .into_par_iter()
            .map(|(digest, inst)| oracle_cost(inst).map(|c| (digest, c)))
            .collect::<Result<_>>()?;
        let count = solved.len();
        self.entries.extend(solved);
        if count > 0 {
            let mut bytes = serde_json::to_vec_pretty(&self.entries).map_err(|e| Error::Format(e.to_string()))?;
            bytes.push(b'\n');
            write_atomic(&self.path, &bytes)?;
        }
        Ok(count)
    }

    fn gap(&self, instance: &Instance, cost: f64) -> Result<Option<f64>> {
        match self.entries.get(&instance_digest(instance)) {
            Some(&optimal) => optimality_gap(instance.problem, cost, optimal).map(Some),
            None => Ok(None),
        }
    }
}

/// Gap column for a set of solved instances: computed optima when `solve`
/// is set, otherwise whatever an existing cache already knows.
fn gap_column(data: &Path, instances: &[Instance], costs: &[f64], solve: bool) -> Result<Vec<Option<f64>>> {
    let mut cache = OracleCache::for_dataset(data)?;
    if solve {
        let solved = cache.ensure(instances)?;
        if solved > 0 {
            println!("solved {solved} instances exactly; cache at {}", cache.path.display());
        }
    }
    instances.iter().zip(costs).map(|(inst, &cost)| cache.gap(inst, cost)).collect()
}

fn print_report(report: &EvalReport) {
    let gap = match report.mean_gap {
        Some(g) => format!(", mean gap {:.2}%", 100.0 * g),
        None => String::new(),
    };
    println!(
        "{} {} ({}, k={}): {} instances, mean cost {:.4}{gap}, {:.1}s",
        report.problem,
        report.method,
        report.decode_mode,
        report.sample_count,
        report.rows.len(),
        report.mean_cost,
        report.seconds,
    );
}

fn finish_report(
    args_out: Option<&Path>,
    data: &Path,
    instances: &[Instance],
    costs: Vec<f64>,
    with_oracle: bool,
    method: &str,
    decode_mode: &str,
    sample_count: usize,
    seconds: f64,
) -> Result<()> {
    let problem = dataset_problem(instances)?;
    let gaps = gap_column(data, instances, &costs, with_oracle)?;
    let rows = costs
        .into_iter()
        .zip(gaps)
        .enumerate()
        .map(|(index, (cost, gap))| EvalRow { index, cost, gap })
        .collect();
    let report = EvalReport::from_rows(problem, method, decode_mode, sample_count, rows, seconds);
    print_report(&report);
    if let Some(out) = args_out {
        report.save(out)?;
        println!("report at {}", out.display());
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let policy = load_policy(&args.checkpoint)?;
    let instances = load_instances(&args.data)?;
    let problem = dataset_problem(&instances)?;
    if problem != policy.cfg.problem {
        return Err(Error::Contract(format!(
            "checkpoint solves {} but the dataset holds {problem}",
            policy.cfg.problem
        )));
    }
    let k = match args.mode {
        Mode::Greedy => 1,
        Mode::Sample => args.k.max(1),
    };
    let start = Instant::now();
    let costs: Vec<f64> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| decode_one(&policy, inst, args.mode, k, args.seed, i as u64).map(|s| s.cost))
        .collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();
    finish_report(
        args.out.as_deref(),
        &args.data,
        &instances,
        costs,
        args.oracle,
        "policy",
        args.mode.name(),
        k,
        seconds,
    )
}

// ---------------------------------------------------------------------------
// Solving
// ---------------------------------------------------------------------------

/// One solved instance. Only the route and its objective value: the hidden
/// realized prizes of stochastic instances stay hidden.
#[derive(Serialize)]
struct Route {
    index: usize,
    actions: Vec<usize>,
    cost: f64,
}

pub fn solve(args: SolveArgs) -> Result<()> {
    let policy = load_policy(&args.checkpoint)?;
    let instances = load_instances(&args.data)?;
    let problem = dataset_problem(&instances)?;
    if problem != policy.cfg.problem {
        return Err(Error::Contract(format!(
            "checkpoint solves {} but the dataset holds {problem}",
            policy.cfg.problem
        )));
    }
    let picked: Vec<(usize, &Instance)> = match args.index {
        Some(i) => {
            let inst = instances
                .get(i)
                .ok_or_else(|| Error::Config(format!("--index {i} outside a dataset of {}", instances.len())))?;
            vec![(i, inst)]
        }
        None => instances.iter().enumerate().collect(),
    };
    let k = match args.mode {
        Mode::Greedy => 1,
        Mode::Sample => args.k.max(1),
    };
    let routes: Vec<Route> = picked
        .into_par_iter()
        .map(|(index, inst)| {
            decode_one(&policy, inst, args.mode, k, args.seed, index as u64)
                .map(|s| Route { index, actions: s.actions, cost: s.cost })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for route in &routes {
        serde_json::to_writer(&mut out, route).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    match &args.out {
        Some(path) => {
            write_atomic(path, &out)?;
            println!("wrote {} routes to {}", routes.len(), path.display());
        }
        None => print!("{}", String::from_utf8(out).expect("json is utf-8")),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Classical baselines and oracles
// ---------------------------------------------------------------------------

pub fn baseline(args: BaselineArgs) -> Result<()> {
    let instances = load_instances(&args.data)?;
    let run = |(i, inst): (usize, &Instance)| -> Result<f64> {
        let solution = match args.method {
            Method::Nn => nearest_neighbor(inst)?,
            Method::InsertionNearest => insertion(inst, InsertionVariant::Nearest)?,
            Method::InsertionFarthest => insertion(inst, InsertionVariant::Farthest)?,
            Method::InsertionRandom => insertion(inst, InsertionVariant::Random)?,
            Method::TsiliGreedy => {
                tsiligirides(inst, RolloutMode::Greedy, &mut derive_rng(args.seed, &[STREAM_SAMPLE, i as u64]))?
            }
            Method::TsiliSample => {
                tsiligirides(inst, RolloutMode::Sample, &mut derive_rng(args.seed, &[STREAM_SAMPLE, i as u64]))?
            }
            Method::ReplanAll => spctsp_replan_exact(inst, ReplanStrategy::All)?.solution,
            Method::ReplanHalf => spctsp_replan_exact(inst, ReplanStrategy::Half)?.solution,
            Method::ReplanFirst => spctsp_replan_exact(inst, ReplanStrategy::First)?.solution,
        };
        Ok(solution.cost)
    };
    let start = Instant::now();
    let costs: Vec<f64> = instances.par_iter().enumerate().map(run).collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let (method, decode_mode) = match args.method {
        Method::Nn => ("nn", "greedy"),
        Method::InsertionNearest => ("insertion-nearest", "greedy"),
        Method::InsertionFarthest => ("insertion-farthest", "greedy"),
        Method::InsertionRandom => ("insertion-random", "greedy"),
        Method::TsiliGreedy => ("tsili-greedy", "greedy"),
        Method::TsiliSample => ("tsili-sample", "sample"),
        Method::ReplanAll => ("replan-all", "greedy"),
        Method::ReplanHalf => ("replan-half", "greedy"),
        Method::ReplanFirst => ("replan-first", "greedy"),
    };
    finish_report(args.out.as_deref(), &args.data, &instances, costs, args.oracle, method, decode_mode, 1, seconds)
}

pub fn oracle(args: OracleArgs) -> Result<()> {
    let instances = load_instances(&args.data)?;
    let problem = dataset_problem(&instances)?;
    let start = Instant::now();
    let mut cache = OracleCache::for_dataset(&args.data)?;
    let solved = cache.ensure(&instances)?;
    let seconds = start.elapsed().as_secs_f64();
    let rows = instances
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            let cost = *cache.entries.get(&instance_digest(inst)).expect("ensure covered every instance");
            EvalRow { index, cost, gap: None }
        })
        .collect();
    let report = EvalReport::from_rows(problem, "oracle", "exact", 1, rows, seconds);
    println!("{solved} newly solved; cache at {}", cache.path.display());
    print_report(&report);
    if let Some(out) = &args.out {
        report.save(out)?;
        println!("report at {}", out.display());
    }
    Ok(())
}
