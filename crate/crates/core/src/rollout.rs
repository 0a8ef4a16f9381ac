//! Runs the policy over instances: greedy decoding, sampling, best-of-k
//! sampling, and teacher-forced log-probability evaluation, all through a
//! single episode loop so recorded and replayed probabilities agree
//! exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::decoder::{output_logits, DecoderCache};
use crate::model::encoder::{encode, Embeddings};
use crate::model::{ModelConfig, Policy, PolicyVars};
use crate::problems::{
    apply_action, feasible_mask, solution_cost, DecodeState, Instance, Problem, Solution,
};
use crate::rng::{derive_rng, STREAM_SAMPLE};
use crate::tape::{softmax_row, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    /// Samples per instance in sampling mode; the best one is kept.
    pub sample_count: usize,
    pub seed: u64,
}

impl RolloutConfig {
    pub fn greedy() -> Self {
        RolloutConfig { mode: RolloutMode::Greedy, sample_count: 1, seed: 0 }
    }

    pub fn sampling(seed: u64) -> Self {
        RolloutConfig { mode: RolloutMode::Sample, sample_count: 1280, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the episode loop picks each action.
pub enum Driver<'a> {
    /// Highest-probability feasible action, lowest index on ties.
    Greedy,
    /// Inverse-CDF draw from the step distribution, one uniform per step.
    Sample(&'a mut ChaCha8Rng),
    /// Replay a fixed action sequence (teacher forcing).
    Forced(&'a [usize]),
}

/// A decoded episode. `log_prob_terms` holds the per-step log-probability
/// variables in order, still attached to the caller's tape, so training
/// can build a surrogate loss from them; `log_prob` is their realized sum.
pub struct Episode {
    pub actions: Vec<usize>,
    pub cost: f64,
    pub log_prob: f64,
    pub log_prob_terms: Vec<Var>,
}

impl Episode {
    pub fn into_solution(self) -> Solution {
        Solution { actions: self.actions, cost: self.cost, log_prob: Some(self.log_prob) }
    }
}

fn step_budget(instance: &Instance) -> usize {
    let n = instance.n();
    match instance.problem {
        Problem::Tsp => n,
        Problem::Cvrp => 2 * n,
        Problem::Sdvrp => 3 * n + 1,
        Problem::Op | Problem::Pctsp | Problem::Spctsp => n + 1,
    }
}

fn greedy_pick(logits: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, (&u, &keep)) in logits.iter().zip(mask).enumerate() {
        if keep && best.is_none_or(|(_, b)| u > b) {
            best = Some((j, u));
        }
    }
    best.map(|(j, _)| j).ok_or_else(|| Error::InvalidMask("no feasible action".into()))
}

fn sample_pick(probs: &[f64], mask: &[bool], rng: &mut ChaCha8Rng) -> Result<usize> {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_kept = None;
    for (j, (&p, &keep)) in probs.iter().zip(mask).enumerate() {
        if keep {
            cum += p;
            last_kept = Some(j);
            if u < cum {
                return Ok(j);
            }
        }
    }
    // The cumulative sum can fall a few ulps short of 1.
    last_kept.ok_or_else(|| Error::InvalidMask("no feasible action".into()))
}

/// Decodes one episode on the given tape, reusing the instance's cache.
/// The loop runs until the state is terminal; every step's
/// log-probability is recorded through the same masked softmax the action
/// choice uses.
pub fn episode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    cache: &DecoderCache,
    instance: &Instance,
    mut driver: Driver<'_>,
) -> Result<Episode> {
    let mut state = DecodeState::new(instance);
    let mut terms = Vec::new();
    let mut log_prob = 0.0;
    let budget = step_budget(instance);
    while !state.terminal {
        if state.sequence.len() > budget {
            return Err(Error::Contract(format!(
                "episode exceeded {budget} steps on n={}",
                instance.n()
            )));
        }
        let mask = feasible_mask(instance, &state)?;
        let logits = output_logits(tape, cfg, vars, cache, instance, &state, &mask)?;
        let action = match &mut driver {
            Driver::Greedy => greedy_pick(tape.value(logits).row(0), &mask)?,
            Driver::Sample(rng) => {
                let probs = softmax_row(tape.value(logits).row(0), Some(&mask))?;
                sample_pick(&probs, &mask, rng)?
            }
            Driver::Forced(rest) => {
                let (&next, tail) = rest
                    .split_first()
                    .ok_or_else(|| Error::Contract("forced actions ran out mid-episode".into()))?;
                *rest = tail;
                next
            }
        };
        let lp = tape.log_prob_at(logits, &mask, action)?;
        log_prob += tape.value(lp).item()?;
        terms.push(lp);
        apply_action(instance, &mut state, action)?;
    }
    if let Driver::Forced(rest) = driver {
        if !rest.is_empty() {
            return Err(Error::Contract(format!(
                "{} forced actions left after the episode ended",
                rest.len()
            )));
        }
    }
    let cost = solution_cost(instance, &state.sequence)?;
    Ok(Episode { actions: state.sequence, cost, log_prob, log_prob_terms: terms })
}

/// Inference harness: one tape, parameters loaded once, per-instance
/// encode/decode sections truncated away after use.
struct Runner<'a> {
    policy: &'a Policy,
    tape: Tape,
    vars: PolicyVars,
    base: usize,
}

impl<'a> Runner<'a> {
    fn new(policy: &'a Policy) -> Self {
        let mut tape = Tape::inference();
        let vars = PolicyVars::load(&mut tape, &policy.store);
        let base = tape.mark();
        Runner { policy, tape, vars, base }
    }

    fn encode(&mut self, instance: &Instance) -> Result<(Embeddings, DecoderCache)> {
        let emb = encode(&mut self.tape, &self.policy.cfg, &self.vars, instance, &self.policy.stats)?;
        let cache = DecoderCache::build(&mut self.tape, &self.vars, &emb)?;
        Ok((emb, cache))
    }

    fn run(&mut self, instance: &Instance, driver: Driver<'_>) -> Result<Episode> {
        let (_, cache) = self.encode(instance)?;
        episode(&mut self.tape, &self.policy.cfg, &self.vars, &cache, instance, driver)
    }

    fn reset(&mut self) {
        self.tape.truncate(self.base);
    }
}

/// Greedy or best-of-k sampled solutions for a batch of instances.
/// Sampling draws each instance's samples from streams derived from
/// (seed, instance index, sample index), so results do not depend on
/// batch composition or evaluation order.
pub fn rollout(policy: &Policy, instances: &[Instance], cfg: &RolloutConfig) -> Result<Vec<Solution>> {
    cfg.validate()?;
    let mut runner = Runner::new(policy);
    let mut out = Vec::with_capacity(instances.len());
    for (idx, instance) in instances.iter().enumerate() {
        let solution = match cfg.mode {
            RolloutMode::Greedy => runner.run(instance, Driver::Greedy)?.into_solution(),
            RolloutMode::Sample => {
                let (_, cache) = runner.encode(instance)?;
                let decoded = runner.tape.mark();
                let mut best: Option<Solution> = None;
                for s in 0..cfg.sample_count {
                    runner.tape.truncate(decoded);
                    let mut rng = derive_rng(cfg.seed, &[STREAM_SAMPLE, idx as u64, s as u64]);
                    let ep = episode(
                        &mut runner.tape,
                        &policy.cfg,
                        &runner.vars,
                        &cache,
                        instance,
                        Driver::Sample(&mut rng),
                    )?;
                    if best.as_ref().is_none_or(|b| ep.cost < b.cost) {
                        best = Some(ep.into_solution());
                    }
                }
                best.expect("sample_count >= 1")
            }
        };
        runner.reset();
        out.push(solution);
    }
    Ok(out)
}

/// Greedy solutions for a batch (the baseline rollout).
pub fn greedy_rollout(policy: &Policy, instances: &[Instance]) -> Result<Vec<Solution>> {
    rollout(policy, instances, &RolloutConfig::greedy())
}

/// One sampled solution per instance.
pub fn sample_rollout(policy: &Policy, instances: &[Instance], seed: u64) -> Result<Vec<Solution>> {
    rollout(
        policy,
        instances,
        &RolloutConfig { mode: RolloutMode::Sample, sample_count: 1, seed },
    )
}

/// Best of k independent samples for a single instance. `instance_index`
/// keeps the sample streams aligned with [`rollout`] over a batch.
pub fn sample_best_of(
    policy: &Policy,
    instance: &Instance,
    k: usize,
    seed: u64,
    instance_index: u64,
) -> Result<Solution> {
    let mut runner = Runner::new(policy);
    let (_, cache) = runner.encode(instance)?;
    let decoded = runner.tape.mark();
    let mut best: Option<Solution> = None;
    for s in 0..k.max(1) {
        runner.tape.truncate(decoded);
        let mut rng = derive_rng(seed, &[STREAM_SAMPLE, instance_index, s as u64]);
        let ep = episode(&mut runner.tape, &policy.cfg, &runner.vars, &cache, instance, Driver::Sample(&mut rng))?;
        if best.as_ref().is_none_or(|b| ep.cost < b.cost) {
            best = Some(ep.into_solution());
        }
    }
    Ok(best.expect("k >= 1"))
}

/// Teacher-forced log-probability of a complete action sequence, exactly
/// the value a rollout would have recorded for the same actions.
pub fn log_prob(policy: &Policy, instance: &Instance, actions: &[usize]) -> Result<f64> {
    let mut runner = Runner::new(policy);
    Ok(runner.run(instance, Driver::Forced(actions))?.log_prob)
}
