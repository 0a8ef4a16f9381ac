//! Policy-gradient training: sampled rollouts scored against one of four
//! baselines (none, exponential moving average, learned value head, greedy
//! rollout of a frozen copy), Adam updates, and the epoch loop that promotes
//! the training policy to baseline policy when a paired t-test says its
//! greedy performance improved significantly.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::decoder::DecoderCache;
use crate::model::encoder::{encode_batch, BnMode};
use crate::model::{register_critic, BnStats, ModelConfig, Policy, PolicyVars};
use crate::optim::{adam_step, AdamConfig, Grads};
use crate::oracle::{brute_force_op, brute_force_pctsp, held_karp, optimality_gap};
use crate::problems::{generate_instance, Instance, Problem, PrizeMode};
use crate::rng::{derive_rng, STREAM_EVAL_SET, STREAM_INSTANCES, STREAM_SAMPLE, STREAM_VALIDATION};
use crate::rollout::{episode, greedy_rollout, Driver};
use crate::tape::{Tape, Var};

/// Decay of the exponential moving-average baseline.
pub const EXP_BETA: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    None,
    Exponential,
    Critic,
    Rollout,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::Exponential => "exponential",
            BaselineKind::Critic => "critic",
            BaselineKind::Rollout => "rollout",
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Customers per generated instance.
    pub n: usize,
    /// Prize scheme; required for the OP, rejected elsewhere.
    pub prize_mode: Option<PrizeMode>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay, if any.
    pub lr_decay: Option<f64>,
    /// Significance level of the baseline-replacement t-test.
    pub alpha: f64,
    pub baseline: BaselineKind,
    /// With the rollout baseline, run the first epoch on the exponential
    /// baseline to stabilize initial learning.
    pub warmup: bool,
    pub eval_set_size: usize,
    pub val_set_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale settings. Desk-scale runs shrink the sizes.
    pub fn defaults(problem: Problem, n: usize) -> Self {
        TrainConfig {
            model: ModelConfig::defaults(problem),
            n,
            prize_mode: (problem == Problem::Op).then_some(PrizeMode::Distance),
            epochs: 100,
            steps_per_epoch: 2500,
            batch_size: 512,
            lr: 1e-4,
            lr_decay: None,
            alpha: 0.05,
            baseline: BaselineKind::Rollout,
            warmup: true,
            eval_set_size: 10_000,
            val_set_size: 10_000,
            seed: 0,
        }
    }

    pub fn problem(&self) -> Problem {
        self.model.problem
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n == 0 {
            return Err(Error::Config("instance size must be at least 1".into()));
        }
        if (self.problem() == Problem::Op) != self.prize_mode.is_some() {
            return Err(Error::Config(format!(
                "prize mode {} for {}",
                if self.prize_mode.is_some() { "given" } else { "missing" },
                self.problem()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("learning-rate decay {d} must lie in (0, 1]")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("significance {} must lie in (0, 1)", self.alpha)));
        }
        if self.baseline == BaselineKind::Rollout && self.eval_set_size < 2 {
            return Err(Error::Config("rollout baseline needs at least two evaluation instances".into()));
        }
        if self.val_set_size == 0 {
            return Err(Error::Config("validation set must not be empty".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.map_or(1.0, |d| d.powi(epoch as i32))
    }
}

/// One history line per epoch, the unit the CLI logs and plots work from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean sampled cost over all training episodes in the epoch.
    pub train_cost: f64,
    /// Mean greedy cost on the held-out validation set.
    pub val_cost: f64,
    /// Mean optimality gap on the validation set, when an exact solver
    /// covers the problem and size.
    pub val_gap: Option<f64>,
    pub baseline_replaced: bool,
    pub seconds: f64,
}

/// Mean of the batch-mean cost recurrence: the first batch seeds the
/// average, later batches fold in with weight 1 - beta. The updated value
/// is also the baseline for the batch that produced `batch_mean`.
pub fn exponential_baseline(m: Option<f64>, batch_mean: f64, beta: f64) -> f64 {
    match m {
        None => batch_mean,
        Some(v) => beta * v + (1.0 - beta) * batch_mean,
    }
}

/// Builds the sampled-rollout surrogate whose gradient is the
/// policy-gradient estimator: mean over the batch of
/// (cost - baseline) * log-probability, with the advantage entering as a
/// constant. `log_probs[i]` is instance i's summed log-probability, a 1x1
/// variable on the tape.
pub fn reinforce_surrogate(
    tape: &mut Tape,
    log_probs: &[Var],
    costs: &[f64],
    baselines: &[f64],
) -> Result<Var> {
    if log_probs.len() != costs.len() || costs.len() != baselines.len() {
        return Err(Error::Shape(format!(
            "{} log-probs, {} costs, {} baselines",
            log_probs.len(),
            costs.len(),
            baselines.len()
        )));
    }
    if log_probs.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let lp = tape.concat_cols(log_probs)?;
    let adv: Vec<f64> = costs.iter().zip(baselines).map(|(c, b)| c - b).collect();
    let adv = tape.leaf(Array::row_vec(adv)?);
    let weighted = tape.mul(lp, adv)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, 1.0 / costs.len() as f64))
}

/// Value-head readout: mean node embedding through one hidden ReLU layer
/// to a scalar prediction of the episode cost.
pub fn critic_head(tape: &mut Tape, vars: &PolicyVars, graph: Var) -> Result<Var> {
    let w0 = vars.get("critic.head.w0")?;
    let b0 = vars.get("critic.head.b0")?;
    let w1 = vars.get("critic.head.w1")?;
    let b1 = vars.get("critic.head.b1")?;
    let h = tape.matmul_nt(graph, w0)?;
    let h = tape.add(h, b0)?;
    let h = tape.relu(h);
    let out = tape.matmul_nt(h, w1)?;
    tape.add(out, b1)
}

/// Deterministic value prediction for one instance, using the critic's own
/// encoder in eval mode with `stats` as its running statistics.
pub fn critic_value(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    instance: &Instance,
    stats: &BnStats,
) -> Result<Var> {
    let out = encode_batch(tape, cfg, vars, "critic.", std::slice::from_ref(instance), BnMode::Eval(stats))?;
    critic_head(tape, vars, out.embeddings[0].graph)
}

/// One-sided paired t-test: the p-value for the hypothesis that the
/// candidate's mean cost is lower than the incumbent's, from per-instance
/// cost pairs. Zero-variance differences degenerate to p = 0 when the mean
/// favors the candidate and p = 1 otherwise, so an exactly unchanged
/// policy is never promoted.
pub fn paired_t_test(candidate: &[f64], incumbent: &[f64]) -> Result<f64> {
    if candidate.len() != incumbent.len() {
        return Err(Error::Shape(format!(
            "{} candidate vs {} incumbent costs",
            candidate.len(),
            incumbent.len()
        )));
    }
    let n = candidate.len();
    if n < 2 {
        return Err(Error::Contract("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = candidate.iter().zip(incumbent).map(|(c, b)| c - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean < 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Contract(format!("t-distribution: {e}")))?;
    Ok(dist.cdf(t))
}

/// The training batch for (epoch, step): a stream keyed only by the seed
/// and position, so runs that differ in baseline kind still consume
/// identical instances.
pub fn training_batch(cfg: &TrainConfig, epoch: usize, step: usize) -> Result<Vec<Instance>> {
    let mut rng = derive_rng(cfg.seed, &[STREAM_INSTANCES, epoch as u64, step as u64]);
    (0..cfg.batch_size)
        .map(|_| generate_instance(cfg.problem(), cfg.n, cfg.prize_mode, &mut rng))
        .collect()
}

fn instance_set(cfg: &TrainConfig, stream: u64, salt: u64, count: usize) -> Result<Vec<Instance>> {
    let mut rng = derive_rng(cfg.seed, &[stream, salt]);
    (0..count).map(|_| generate_instance(cfg.problem(), cfg.n, cfg.prize_mode, &mut rng)).collect()
}

/// Exact cost when a solver covers this problem at a size cheap enough for
/// per-epoch validation.
fn exact_cost(instance: &Instance) -> Option<f64> {
    match instance.problem {
        Problem::Tsp if instance.n() <= 13 => held_karp(instance).ok().map(|r| r.cost),
        Problem::Op if instance.n() <= 9 => brute_force_op(instance).ok().map(|r| r.cost),
        Problem::Pctsp if instance.n() <= 9 => brute_force_pctsp(instance).ok().map(|r| r.cost),
        _ => None,
    }
}

enum BaselineState {
    None,
    Exponential,
    Critic {
        stats: BnStats,
    },
    Rollout {
        policy: Policy,
        eval_set: Vec<Instance>,
        /// Greedy costs of `policy` on `eval_set`, cached while both are
        /// frozen.
        eval_costs: Vec<f64>,
        /// How many times the eval set has been resampled; keys its RNG
        /// stream.
        generation: u64,
    },
}

pub struct Trainer {
    cfg: TrainConfig,
    policy: Policy,
    baseline: BaselineState,
    /// Exponential-baseline register, also used by the rollout baseline
    /// during its warm-up epoch.
    exp_mean: Option<f64>,
    /// Completed epochs.
    epoch: usize,
    history: Vec<EpochRecord>,
    val_set: Vec<Instance>,
    val_exact: Option<Vec<f64>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut policy = Policy::init(cfg.model, cfg.seed)?;
        if cfg.baseline == BaselineKind::Critic {
            register_critic(
                &mut policy.store,
                &cfg.model,
                &mut derive_rng(cfg.seed, &[crate::rng::STREAM_PARAMS, 1]),
            )?;
        }
        Self::assemble(cfg, policy, None, None, 0, None, 0, Vec::new())
    }

    /// Rebuilds a trainer from persisted state. The eval and validation
    /// sets are regenerated from their seed streams rather than stored, so
    /// a rebuilt trainer continues the exact trajectory of the original.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cfg: TrainConfig,
        policy: Policy,
        critic_stats: Option<BnStats>,
        baseline_policy: Option<Policy>,
        eval_generation: u64,
        exp_mean: Option<f64>,
        epochs_done: usize,
        history: Vec<EpochRecord>,
    ) -> Result<Self> {
        cfg.validate()?;
        if history.len() != epochs_done {
            return Err(Error::Contract(format!(
                "{} history records for {epochs_done} completed epochs",
                history.len()
            )));
        }
        Self::assemble(cfg, policy, critic_stats, baseline_policy, eval_generation, exp_mean, epochs_done, history)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        policy: Policy,
        critic_stats: Option<BnStats>,
        baseline_policy: Option<Policy>,
        eval_generation: u64,
        exp_mean: Option<f64>,
        epochs_done: usize,
        history: Vec<EpochRecord>,
    ) -> Result<Self> {
        let baseline = match cfg.baseline {
            BaselineKind::None => BaselineState::None,
            BaselineKind::Exponential => BaselineState::Exponential,
            BaselineKind::Critic => {
                if !policy.store.contains("critic.head.w1") {
                    return Err(Error::Contract("critic baseline without critic parameters".into()));
                }
                BaselineState::Critic { stats: critic_stats.unwrap_or_else(|| BnStats::new(&cfg.model)) }
            }
            BaselineKind::Rollout => {
                let policy_bl = baseline_policy.unwrap_or_else(|| policy.clone());
                let eval_set = instance_set(&cfg, STREAM_EVAL_SET, eval_generation, cfg.eval_set_size)?;
                let eval_costs = greedy_costs(&policy_bl, &eval_set)?;
                BaselineState::Rollout { policy: policy_bl, eval_set, eval_costs, generation: eval_generation }
            }
        };
        let val_set = instance_set(&cfg, STREAM_VALIDATION, 0, cfg.val_set_size)?;
        let val_exact = val_set.iter().map(exact_cost).collect();
        Ok(Trainer { cfg, policy, baseline, exp_mean, epoch: epochs_done, history, val_set, val_exact })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn exp_mean(&self) -> Option<f64> {
        self.exp_mean
    }

    pub fn critic_stats(&self) -> Option<&BnStats> {
        match &self.baseline {
            BaselineState::Critic { stats } => Some(stats),
            _ => None,
        }
    }

    pub fn baseline_policy(&self) -> Option<&Policy> {
        match &self.baseline {
            BaselineState::Rollout { policy, .. } => Some(policy),
            _ => None,
        }
    }

    pub fn eval_generation(&self) -> u64 {
        match &self.baseline {
            BaselineState::Rollout { generation, .. } => *generation,
            _ => 0,
        }
    }

    fn warming_up(&self) -> bool {
        self.cfg.warmup && self.cfg.baseline == BaselineKind::Rollout && self.epoch == 0
    }

    /// Runs one epoch: `steps_per_epoch` gradient steps, the baseline
    /// promotion test, and a greedy validation pass. Returns the history
    /// record it appended.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let mut cost_sum = 0.0;
        for step in 0..self.cfg.steps_per_epoch {
            let batch = training_batch(&self.cfg, self.epoch, step)?;
            cost_sum += self.train_step(step, &batch)?;
        }
        let episodes = self.cfg.steps_per_epoch * self.cfg.batch_size;
        let train_cost = if episodes > 0 { cost_sum / episodes as f64 } else { f64::NAN };

        let baseline_replaced = self.maybe_replace_baseline()?;

        let val_costs = greedy_costs(&self.policy, &self.val_set)?;
        let val_cost = val_costs.iter().sum::<f64>() / val_costs.len() as f64;
        let val_gap = self.val_exact.as_ref().and_then(|exact| {
            let gaps: Option<Vec<f64>> = val_costs
                .iter()
                .zip(exact)
                .map(|(&c, &opt)| optimality_gap(self.cfg.problem(), c, opt).ok())
                .collect();
            gaps.map(|g| g.iter().sum::<f64>() / g.len() as f64)
        });

        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            train_cost,
            val_cost,
            val_gap,
            baseline_replaced,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// One gradient step on `batch`. Returns the summed sampled cost.
    fn train_step(&mut self, step: usize, batch: &[Instance]) -> Result<f64> {
        if !self.policy.store.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters entering epoch {} step {step}",
                self.epoch + 1
            )));
        }
        // Baseline rollouts run first, in pure inference mode, so the
        // recording tape below never holds them.
        let rollout_baselines: Option<Vec<f64>> = match (&self.baseline, self.warming_up()) {
            (BaselineState::Rollout { policy, .. }, false) => Some(greedy_costs(policy, batch)?),
            _ => None,
        };

        let model = self.cfg.model;
        let mut tape = Tape::new();
        let vars = PolicyVars::load(&mut tape, &self.policy.store);
        let out = encode_batch(&mut tape, &model, &vars, "", batch, BnMode::Train)?;
        let mut log_probs = Vec::with_capacity(batch.len());
        let mut costs = Vec::with_capacity(batch.len());
        for (i, instance) in batch.iter().enumerate() {
            let cache = DecoderCache::build(&mut tape, &vars, &out.embeddings[i])?;
            let mut rng = derive_rng(
                self.cfg.seed,
                &[STREAM_SAMPLE, self.epoch as u64, step as u64, i as u64],
            );
            let ep = episode(&mut tape, &model, &vars, &cache, instance, Driver::Sample(&mut rng))?;
            let joined = tape.concat_cols(&ep.log_prob_terms)?;
            log_probs.push(tape.sum_all(joined));
            costs.push(ep.cost);
        }
        let batch_sum: f64 = costs.iter().sum();
        let batch_mean = batch_sum / costs.len() as f64;

        let mut critic_loss = None;
        let warming = self.warming_up();
        let baselines: Vec<f64> = match (&mut self.baseline, warming) {
            (BaselineState::None, _) => vec![0.0; costs.len()],
            (BaselineState::Exponential, _) | (BaselineState::Rollout { .. }, true) => {
                let m = exponential_baseline(self.exp_mean, batch_mean, EXP_BETA);
                self.exp_mean = Some(m);
                vec![m; costs.len()]
            }
            (BaselineState::Rollout { .. }, false) => {
                rollout_baselines.expect("rollout baselines computed above")
            }
            (BaselineState::Critic { stats }, _) => {
                let cout = encode_batch(&mut tape, &model, &vars, "critic.", batch, BnMode::Train)?;
                let mut values = Vec::with_capacity(batch.len());
                for emb in &cout.embeddings {
                    values.push(critic_head(&mut tape, &vars, emb.graph)?);
                }
                let predicted: Result<Vec<f64>> =
                    values.iter().map(|&v| tape.value(v).item()).collect();
                let vrow = tape.concat_cols(&values)?;
                let target = tape.leaf(Array::row_vec(costs.clone())?);
                let diff = tape.sub(vrow, target)?;
                let sq = tape.mul(diff, diff)?;
                let total = tape.sum_all(sq);
                critic_loss = Some(tape.scale(total, 1.0 / costs.len() as f64));
                stats.fold_all(&cout.batch_stats, cout.rows)?;
                predicted?
            }
        };

        let surrogate = reinforce_surrogate(&mut tape, &log_probs, &costs, &baselines)?;
        let root = match critic_loss {
            Some(mse) => tape.add(surrogate, mse)?,
            None => surrogate,
        };
        tape.backward(root)?;
        let mut grads = Grads::new();
        vars.collect_grads(&tape, &mut grads)?;
        if !grads.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient in epoch {} step {step}",
                self.epoch + 1
            )));
        }
        let adam = AdamConfig { lr: self.cfg.lr_at(self.epoch), ..AdamConfig::default() };
        adam_step(&mut self.policy.store, &grads, &adam)?;
        if !self.policy.store.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after epoch {} step {step}",
                self.epoch + 1
            )));
        }
        self.policy.stats.fold_all(&out.batch_stats, out.rows)?;
        Ok(batch_sum)
    }

    /// End-of-epoch baseline promotion: greedy-decode the current policy on
    /// the frozen eval set and replace the baseline policy if the paired
    /// t-test finds it significantly better. Replacement also resamples the
    /// eval set, so the next comparison cannot overfit to the old one.
    fn maybe_replace_baseline(&mut self) -> Result<bool> {
        let BaselineState::Rollout { policy: incumbent, eval_set, eval_costs, generation } =
            &mut self.baseline
        else {
            return Ok(false);
        };
        let candidate_costs = greedy_costs(&self.policy, eval_set)?;
        let p = paired_t_test(&candidate_costs, eval_costs)?;
        if p >= self.cfg.alpha {
            return Ok(false);
        }
        *incumbent = self.policy.clone();
        *generation += 1;
        *eval_set = instance_set(&self.cfg, STREAM_EVAL_SET, *generation, self.cfg.eval_set_size)?;
        *eval_costs = greedy_costs(incumbent, eval_set)?;
        Ok(true)
    }
}

fn greedy_costs(policy: &Policy, instances: &[Instance]) -> Result<Vec<f64>> {
    Ok(greedy_rollout(policy, instances)?.into_iter().map(|s| s.cost).collect())
}

/// Runs the full configured schedule from scratch.
pub fn train(cfg: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg)?;
    while trainer.epoch < trainer.cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer)
}
