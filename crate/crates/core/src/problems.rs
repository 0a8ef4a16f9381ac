//! Routing problem definitions: instance generation, decode-time state,
//! feasibility masks, transitions, and objectives.
//!
//! Six problems share one action convention. For the TSP every node is a
//! customer and actions are indices `0..n`. Every other problem adds a depot
//! as action 0 with customers at `1..=n`, so customer `i` lives at
//! `coords[i-1]`. Episodes for depot problems start at the depot without
//! consuming an action.
//!
//! All constants and distributions follow the same recipes for every n, with
//! size-dependent constants (vehicle capacity, length budget, penalty scale)
//! taken from a piecewise-linear fit through their reference sizes 20, 50,
//! and 100, extrapolated along the end segments for other n.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Feasibility slack for replay checks; covers accumulated rounding in
/// counter updates, never a real constraint violation.
pub const FEAS_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Tsp,
    Cvrp,
    Sdvrp,
    Op,
    Pctsp,
    Spctsp,
}

impl Problem {
    pub const ALL: [Problem; 6] =
        [Problem::Tsp, Problem::Cvrp, Problem::Sdvrp, Problem::Op, Problem::Pctsp, Problem::Spctsp];

    pub fn has_depot(self) -> bool {
        self != Problem::Tsp
    }

    pub fn name(self) -> &'static str {
        match self {
            Problem::Tsp => "tsp",
            Problem::Cvrp => "cvrp",
            Problem::Sdvrp => "sdvrp",
            Problem::Op => "op",
            Problem::Pctsp => "pctsp",
            Problem::Spctsp => "spctsp",
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown problem {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrizeMode {
    /// Every customer is worth the same.
    Constant,
    /// Prizes on the grid {0.01, ..., 1.00}, uniformly.
    Uniform,
    /// Prizes grow with the distance from the depot; the farthest customer
    /// is worth exactly 1.
    Distance,
}

impl PrizeMode {
    pub fn name(self) -> &'static str {
        match self {
            PrizeMode::Constant => "constant",
            PrizeMode::Uniform => "uniform",
            PrizeMode::Distance => "distance",
        }
    }
}

impl fmt::Display for PrizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PrizeMode::Constant, PrizeMode::Uniform, PrizeMode::Distance]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prize mode {s}")))
    }
}

fn piecewise(anchors: &[(f64, f64); 3], x: f64) -> f64 {
    let seg = if x <= anchors[1].0 { (anchors[0], anchors[1]) } else { (anchors[1], anchors[2]) };
    let ((x0, y0), (x1, y1)) = seg;
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}

/// Vehicle capacity for a size-n instance: 30, 40, 50 at n = 20, 50, 100.
pub fn vrp_capacity(n: usize) -> f64 {
    piecewise(&[(20.0, 30.0), (50.0, 40.0), (100.0, 50.0)], n as f64)
}

/// Route length budget for a size-n instance: 2, 3, 4 at n = 20, 50, 100.
pub fn op_max_length(n: usize) -> f64 {
    piecewise(&[(20.0, 2.0), (50.0, 3.0), (100.0, 4.0)], n as f64)
}

/// Penalty scale K for a size-n instance: 2, 3, 4 at n = 20, 50, 100;
/// penalties are drawn from Uniform(0, 3K/n).
pub fn pctsp_penalty_scale(n: usize) -> f64 {
    piecewise(&[(20.0, 2.0), (50.0, 3.0), (100.0, 4.0)], n as f64)
}

pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// One problem instance. Customer-indexed fields (`coords`, `demands`,
/// `prizes`, `penalties`, `real_prizes`) have length n; fields a problem
/// does not use stay empty or `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub problem: Problem,
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depot: Option<[f64; 2]>,
    /// Demands already normalized by the vehicle capacity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demands: Vec<f64>,
    /// The raw capacity the demands were normalized by.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
    /// Normalized prizes in (0, 1].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prizes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub penalties: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<f64>,
    /// Realized prizes, one per customer; drawn up front but only to be
    /// revealed on visit. Solvers must not read these directly.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub real_prizes: Vec<f64>,
}

impl Instance {
    /// Number of customers (for TSP: nodes).
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Size of the action space: customers plus the depot where present.
    pub fn num_actions(&self) -> usize {
        self.n() + self.problem.has_depot() as usize
    }

    /// Coordinates of an action index.
    pub fn node_xy(&self, action: usize) -> [f64; 2] {
        if self.problem.has_depot() {
            if action == 0 {
                self.depot.expect("depot problems carry depot coordinates")
            } else {
                self.coords[action - 1]
            }
        } else {
            self.coords[action]
        }
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        euclid(self.node_xy(a), self.node_xy(b))
    }

    /// Customer index (0-based) of an action, or None for the depot.
    pub fn customer_of(&self, action: usize) -> Option<usize> {
        if self.problem.has_depot() {
            action.checked_sub(1)
        } else {
            Some(action)
        }
    }

    /// Structural sanity of the fields; used after deserialization.
    pub fn check(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Contract("instance without customers".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for c in self.coords.iter().chain(self.depot.iter()) {
            if !unit(c[0]) || !unit(c[1]) {
                return Err(Error::Contract(format!("coordinate ({}, {}) outside unit square", c[0], c[1])));
            }
        }
        if self.problem.has_depot() != self.depot.is_some() {
            return Err(Error::Contract(format!("{} depot mismatch", self.problem)));
        }
        let want = |field: &str, present: bool, needed: bool| {
            if present != needed {
                Err(Error::Contract(format!("{} {field} mismatch", self.problem)))
            } else {
                Ok(())
            }
        };
        let p = self.problem;
        let vrp = matches!(p, Problem::Cvrp | Problem::Sdvrp);
        want("demands", self.demands.len() == n, vrp)?;
        want("capacity", self.capacity.is_some(), vrp)?;
        let prized = matches!(p, Problem::Op | Problem::Pctsp | Problem::Spctsp);
        want("prizes", self.prizes.len() == n, prized)?;
        want("penalties", self.penalties.len() == n, matches!(p, Problem::Pctsp | Problem::Spctsp))?;
        want("max_length", self.max_length.is_some(), p == Problem::Op)?;
        want("real_prizes", self.real_prizes.len() == n, p == Problem::Spctsp)?;
        for &d in &self.demands {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Contract(format!("demand {d} outside (0, 1]")));
            }
        }
        if p == Problem::Op {
            for &r in &self.prizes {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::Contract(format!("prize {r} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }
}

fn unit_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.gen::<f64>(), rng.gen::<f64>()]
}

/// Uniform draw from (0, 1); a raw 0 is redrawn so downstream quantities
/// stay strictly positive.
fn positive_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Samples an instance. `prize_mode` is required for the OP and rejected for
/// every other problem (PCTSP prizes always follow one scheme).
pub fn generate_instance(
    problem: Problem,
    n: usize,
    prize_mode: Option<PrizeMode>,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    if n == 0 {
        return Err(Error::Contract("instance size must be at least 1".into()));
    }
    if (problem == Problem::Op) != prize_mode.is_some() {
        return Err(Error::Contract(match prize_mode {
            Some(m) => format!("prize mode {m} given for {problem}"),
            None => "orienteering requires a prize mode".into(),
        }));
    }
    let depot = problem.has_depot().then(|| unit_point(rng));
    let coords: Vec<[f64; 2]> = (0..n).map(|_| unit_point(rng)).collect();
    let mut inst = Instance {
        problem,
        coords,
        depot,
        demands: Vec::new(),
        capacity: None,
        prizes: Vec::new(),
        penalties: Vec::new(),
        max_length: None,
        real_prizes: Vec::new(),
    };
    match problem {
        Problem::Tsp => {}
        Problem::Cvrp | Problem::Sdvrp => {
            let cap = vrp_capacity(n);
            inst.demands = (0..n).map(|_| rng.gen_range(1..=9) as f64 / cap).collect();
            inst.capacity = Some(cap);
        }
        Problem::Op => {
            inst.prizes = match prize_mode.expect("checked above") {
                PrizeMode::Constant => vec![1.0; n],
                PrizeMode::Uniform => {
                    (0..n).map(|_| rng.gen_range(1..=100) as f64 / 100.0).collect()
                }
                PrizeMode::Distance => {
                    let depot = inst.depot.expect("depot present");
                    let d: Vec<f64> = inst.coords.iter().map(|&c| euclid(depot, c)).collect();
                    let dmax = d.iter().cloned().fold(0.0f64, f64::max);
                    d.iter()
                        .map(|&di| {
                            let ratio = if dmax > 0.0 { di / dmax } else { 0.0 };
                            (1.0 + (99.0 * ratio).floor()) / 100.0
                        })
                        .collect()
                }
            };
            inst.max_length = Some(op_max_length(n));
        }
        Problem::Pctsp | Problem::Spctsp => {
            inst.prizes = (0..n).map(|_| positive_unit(rng) * 4.0 / n as f64).collect();
            let scale = 3.0 * pctsp_penalty_scale(n) / n as f64;
            inst.penalties = (0..n).map(|_| positive_unit(rng) * scale).collect();
            if problem == Problem::Spctsp {
                inst.real_prizes =
                    inst.prizes.iter().map(|&r| rng.gen::<f64>() * 2.0 * r).collect();
            }
        }
    }
    Ok(inst)
}

/// The realized prize of a customer, looked up at visit time. The draw
/// happened at generation, so repeated queries agree and paired solvers on
/// the same instance see the same randomness.
pub fn reveal_prize(instance: &Instance, customer: usize) -> Result<f64> {
    if instance.problem != Problem::Spctsp {
        return Err(Error::Contract(format!(
            "real prizes exist only for spctsp, not {}",
            instance.problem
        )));
    }
    instance
        .real_prizes
        .get(customer)
        .copied()
        .ok_or_else(|| Error::Contract(format!("customer {customer} out of range")))
}

/// Mutable rollout state. Counters the problem does not use stay at their
/// neutral values.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    /// Actions taken so far.
    pub sequence: Vec<usize>,
    /// Per customer; a VRP customer counts as visited from its first visit.
    pub visited: Vec<bool>,
    /// VRP remaining capacity, starting at 1.
    pub capacity_left: f64,
    /// VRP per-customer remaining demand.
    pub remaining_demand: Vec<f64>,
    /// OP remaining length budget.
    pub length_left: f64,
    /// PCTSP remaining prize to collect before the depot opens up.
    pub prize_left: f64,
    pub terminal: bool,
}

impl DecodeState {
    pub fn new(instance: &Instance) -> Self {
        DecodeState {
            sequence: Vec::new(),
            visited: vec![false; instance.n()],
            capacity_left: 1.0,
            remaining_demand: instance.demands.clone(),
            length_left: instance.max_length.unwrap_or(0.0),
            prize_left: match instance.problem {
                Problem::Pctsp | Problem::Spctsp => 1.0,
                _ => 0.0,
            },
            terminal: false,
        }
    }

    /// Number of actions taken.
    pub fn t(&self) -> usize {
        self.sequence.len()
    }

    /// The action the rollout currently stands on. Depot problems start at
    /// the depot; the TSP has no position before the first step.
    pub fn last_action(&self, instance: &Instance) -> Option<usize> {
        match self.sequence.last() {
            Some(&a) => Some(a),
            None => instance.problem.has_depot().then_some(0),
        }
    }

    pub fn all_visited(&self) -> bool {
        self.visited.iter().all(|&v| v)
    }
}

/// Feasible actions for the next step, true = selectable. Every problem's
/// rules guarantee at least one feasible action in a non-terminal state.
///
/// - TSP: unvisited nodes.
/// - CVRP: depot unless this is the first step or the previous action was
///   the depot; customer i unless its demand is served or exceeds the
///   remaining capacity.
/// - SDVRP: depot as CVRP; customer i while demand remains, except with an
///   empty vehicle, where a visit would deliver nothing and every customer
///   is closed so the depot is forced. Demand and capacity residues at
///   rounding-noise scale count as exhausted so no visit ever delivers a
///   meaningless sliver.
/// - OP: the depot is always open; customer j only if unvisited and the
///   detour d(last, j) + d(j, depot) still fits the remaining budget.
/// - PCTSP/SPCTSP: the depot is closed while prize remains to be collected
///   and some customer is unvisited; customers close once visited.
pub fn feasible_mask(instance: &Instance, state: &DecodeState) -> Result<Vec<bool>> {
    if state.terminal {
        return Err(Error::Contract("mask requested for a terminal state".into()));
    }
    let n = instance.n();
    match instance.problem {
        Problem::Tsp => Ok(state.visited.iter().map(|&v| !v).collect()),
        Problem::Cvrp | Problem::Sdvrp => {
            let split = instance.problem == Problem::Sdvrp;
            let mut mask = vec![false; n + 1];
            let at_depot = state.last_action(instance) == Some(0);
            mask[0] = state.t() > 0 && !at_depot;
            for i in 0..n {
                let d = state.remaining_demand[i];
                mask[i + 1] = if split {
                    d > FEAS_EPS && state.capacity_left > FEAS_EPS
                } else {
                    d > 0.0 && d <= state.capacity_left
                };
            }
            Ok(mask)
        }
        Problem::Op => {
            let last = state.last_action(instance).expect("depot problem");
            let mut mask = vec![false; n + 1];
            mask[0] = true;
            for i in 0..n {
                let j = i + 1;
                mask[j] = !state.visited[i]
                    && instance.dist(last, j) + instance.dist(j, 0) <= state.length_left;
            }
            Ok(mask)
        }
        Problem::Pctsp | Problem::Spctsp => {
            let mut mask = vec![false; n + 1];
            mask[0] = !(state.prize_left > 0.0 && !state.all_visited());
            for i in 0..n {
                mask[i + 1] = !state.visited[i];
            }
            Ok(mask)
        }
    }
}

/// Applies one action, updating counters and the terminal flag.
///
/// Episode lengths are bounded: TSP exactly n steps; OP and PCTSP at most
/// n + 1 (each step visits a fresh customer or ends at the depot); CVRP at
/// most 2n (customer visits never repeat and depot visits never chain);
/// SDVRP at most 3n + 1 (every customer visit zeroes a demand or empties
/// the vehicle, and every full trip delivers a unit of capacity).
pub fn apply_action(instance: &Instance, state: &mut DecodeState, action: usize) -> Result<()> {
    let mask = feasible_mask(instance, state)?;
    if action >= mask.len() || !mask[action] {
        return Err(Error::Infeasible(format!(
            "action {action} infeasible at step {}",
            state.t()
        )));
    }
    match instance.problem {
        Problem::Tsp => {
            state.visited[action] = true;
            state.terminal = state.t() + 1 == instance.n();
        }
        Problem::Cvrp | Problem::Sdvrp => {
            if action == 0 {
                state.capacity_left = 1.0;
                state.terminal = state.remaining_demand.iter().all(|&d| d <= FEAS_EPS);
            } else {
                let i = action - 1;
                let demand = state.remaining_demand[i];
                state.remaining_demand[i] = (demand - state.capacity_left).max(0.0);
                state.capacity_left = (state.capacity_left - demand).max(0.0);
                state.visited[i] = true;
            }
        }
        Problem::Op => {
            let last = state.last_action(instance).expect("depot problem");
            state.length_left -= instance.dist(last, action);
            if action == 0 {
                state.terminal = true;
            } else {
                state.visited[action - 1] = true;
            }
        }
        Problem::Pctsp | Problem::Spctsp => {
            if action == 0 {
                state.terminal = true;
            } else {
                let i = action - 1;
                let prize = if instance.problem == Problem::Spctsp {
                    reveal_prize(instance, i)?
                } else {
                    instance.prizes[i]
                };
                state.prize_left = (state.prize_left - prize).max(0.0);
                state.visited[i] = true;
            }
        }
    }
    state.sequence.push(action);
    Ok(())
}

/// A finished rollout: the action sequence, its objective value, and the
/// summed log-probability when produced by a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub actions: Vec<usize>,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
}

fn route_length(instance: &Instance, actions: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut prev = 0;
    for &a in actions {
        total += instance.dist(prev, a);
        prev = a;
    }
    total
}

fn visited_customers(instance: &Instance, actions: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; instance.n()];
    for &a in actions {
        if let Some(i) = instance.customer_of(a) {
            seen[i] = true;
        }
    }
    seen
}

/// Checks a complete action sequence directly against the problem
/// constraints, replaying counters from scratch rather than reusing the
/// mask machinery, so construction bugs cannot hide themselves.
pub fn validate_solution(instance: &Instance, actions: &[usize]) -> Result<()> {
    let n = instance.n();
    let fail = |msg: String| Err(Error::Infeasible(msg));
    for &a in actions {
        if a >= instance.num_actions() {
            return fail(format!("action {a} out of range"));
        }
    }
    match instance.problem {
        Problem::Tsp => {
            if actions.len() != n {
                return fail(format!("tour of {} steps over {n} nodes", actions.len()));
            }
            let mut seen = vec![false; n];
            for &a in actions {
                if seen[a] {
                    return fail(format!("node {a} visited twice"));
                }
                seen[a] = true;
            }
        }
        Problem::Cvrp | Problem::Sdvrp => {
            if actions.first() == Some(&0) || actions.last() != Some(&0) {
                return fail("routes must start at a customer and end at the depot".into());
            }
            for w in actions.windows(2) {
                if w == [0, 0] {
                    return fail("consecutive depot visits".into());
                }
            }
            if instance.problem == Problem::Cvrp {
                let mut seen = vec![false; n];
                let mut load = 0.0;
                for &a in actions {
                    match instance.customer_of(a) {
                        None => load = 0.0,
                        Some(i) => {
                            if seen[i] {
                                return fail(format!("customer {i} visited twice"));
                            }
                            seen[i] = true;
                            load += instance.demands[i];
                            if load > 1.0 + FEAS_EPS {
                                return fail(format!("route load {load} exceeds capacity"));
                            }
                        }
                    }
                }
                if let Some(i) = seen.iter().position(|&s| !s) {
                    return fail(format!("customer {i} never visited"));
                }
            } else {
                let mut remaining = instance.demands.clone();
                let mut cap = 1.0;
                for &a in actions {
                    match instance.customer_of(a) {
                        None => cap = 1.0,
                        Some(i) => {
                            let delivered = remaining[i].min(cap);
                            if delivered <= FEAS_EPS {
                                return fail(format!("visit to customer {i} delivers nothing"));
                            }
                            remaining[i] -= delivered;
                            cap -= delivered;
                        }
                    }
                }
                if let Some(i) = remaining.iter().position(|&d| d > FEAS_EPS) {
                    return fail(format!("customer {i} has unserved demand"));
                }
            }
        }
        Problem::Op | Problem::Pctsp | Problem::Spctsp => {
            if actions.last() != Some(&0) {
                return fail("route must end at the depot".into());
            }
            if actions[..actions.len() - 1].contains(&0) {
                return fail("depot appears before the end".into());
            }
            let mut seen = vec![false; n];
            for &a in &actions[..actions.len() - 1] {
                let i = a - 1;
                if seen[i] {
                    return fail(format!("customer {i} visited twice"));
                }
                seen[i] = true;
            }
            match instance.problem {
                Problem::Op => {
                    let len = route_length(instance, actions);
                    let budget = instance.max_length.expect("op carries max_length");
                    if len > budget + FEAS_EPS {
                        return fail(format!("route length {len} exceeds budget {budget}"));
                    }
                }
                _ => {
                    let prizes = if instance.problem == Problem::Spctsp {
                        &instance.real_prizes
                    } else {
                        &instance.prizes
                    };
                    let collected: f64 = seen
                        .iter()
                        .zip(prizes)
                        .filter_map(|(&s, &p)| s.then_some(p))
                        .sum();
                    if collected < 1.0 - FEAS_EPS && !seen.iter().all(|&s| s) {
                        return fail(format!(
                            "collected prize {collected} below the required total"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Objective value of a feasible action sequence; lower is better for every
/// problem (prize collection enters negated).
pub fn solution_cost(instance: &Instance, actions: &[usize]) -> Result<f64> {
    validate_solution(instance, actions)?;
    Ok(match instance.problem {
        Problem::Tsp => {
            let mut total = 0.0;
            for w in actions.windows(2) {
                total += instance.dist(w[0], w[1]);
            }
            total + instance.dist(actions[actions.len() - 1], actions[0])
        }
        Problem::Cvrp | Problem::Sdvrp => route_length(instance, actions),
        Problem::Op => {
            let seen = visited_customers(instance, actions);
            -seen
                .iter()
                .zip(&instance.prizes)
                .filter_map(|(&s, &p)| s.then_some(p))
                .sum::<f64>()
        }
        Problem::Pctsp | Problem::Spctsp => {
            let seen = visited_customers(instance, actions);
            let penalty: f64 = seen
                .iter()
                .zip(&instance.penalties)
                .filter_map(|(&s, &b)| (!s).then_some(b))
                .sum();
            route_length(instance, actions) + penalty
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, STREAM_INSTANCES};

    fn rng(seed: u64) -> ChaCha8Rng {
        derive_rng(seed, &[STREAM_INSTANCES])
    }

    fn gen(problem: Problem, n: usize, seed: u64) -> Instance {
        let mode = (problem == Problem::Op).then_some(PrizeMode::Constant);
        generate_instance(problem, n, mode, &mut rng(seed)).unwrap()
    }

    /// Uniform random choice over feasible actions; exercises the full
    /// state machine without a policy.
    fn random_rollout(instance: &Instance, seed: u64) -> Vec<usize> {
        let mut r = derive_rng(seed, &[99]);
        let mut state = DecodeState::new(instance);
        while !state.terminal {
            let mask = feasible_mask(instance, &state).unwrap();
            let open: Vec<usize> =
                (0..mask.len()).filter(|&a| mask[a]).collect();
            assert!(!open.is_empty(), "dead end at step {}", state.t());
            let a = open[r.gen_range(0..open.len())];
            apply_action(instance, &mut state, a).unwrap();
        }
        state.sequence
    }

    #[test]
    fn constants_hit_their_anchors() {
        assert_eq!(vrp_capacity(20), 30.0);
        assert_eq!(vrp_capacity(50), 40.0);
        assert_eq!(vrp_capacity(100), 50.0);
        assert_eq!(op_max_length(20), 2.0);
        assert_eq!(op_max_length(100), 4.0);
        assert_eq!(pctsp_penalty_scale(50), 3.0);
        // Interpolated and extrapolated sizes stay on the segments.
        assert!((vrp_capacity(35) - 35.0).abs() < 1e-12);
        assert!((op_max_length(75) - 3.5).abs() < 1e-12);
        assert!(vrp_capacity(10) > 9.0, "capacity must exceed the largest demand");
        assert!(op_max_length(5) > 0.0);
    }

    #[test]
    fn generation_is_bit_reproducible() {
        for p in Problem::ALL {
            assert_eq!(gen(p, 12, 5), gen(p, 12, 5));
        }
        assert_ne!(gen(Problem::Tsp, 12, 5), gen(Problem::Tsp, 12, 6));
    }

    #[test]
    fn coords_live_in_the_unit_square() {
        for p in Problem::ALL {
            let inst = gen(p, 40, 3);
            inst.check().unwrap();
        }
    }

    #[test]
    fn vrp_demands_sit_on_the_ninth_grid() {
        let inst = gen(Problem::Cvrp, 20, 11);
        assert_eq!(inst.capacity, Some(30.0));
        for &d in &inst.demands {
            let raw = d * 30.0;
            assert!((raw - raw.round()).abs() < 1e-12);
            assert!((1.0..=9.0).contains(&raw.round()));
        }
    }

    #[test]
    fn op_constant_prizes_are_all_one() {
        let inst = gen(Problem::Op, 15, 2);
        assert!(inst.prizes.iter().all(|&r| r == 1.0));
        assert_eq!(inst.max_length, Some(op_max_length(15)));
    }

    #[test]
    fn op_uniform_prizes_sit_on_the_percent_grid() {
        let inst =
            generate_instance(Problem::Op, 200, Some(PrizeMode::Uniform), &mut rng(4)).unwrap();
        for &r in &inst.prizes {
            let raw = r * 100.0;
            assert!((raw - raw.round()).abs() < 1e-9);
            assert!((1.0..=100.0).contains(&raw.round()));
        }
    }

    #[test]
    fn op_distance_prizes_peak_at_the_farthest_customer() {
        let inst =
            generate_instance(Problem::Op, 30, Some(PrizeMode::Distance), &mut rng(8)).unwrap();
        let depot = inst.depot.unwrap();
        let far = (0..30)
            .max_by(|&a, &b| {
                euclid(depot, inst.coords[a]).total_cmp(&euclid(depot, inst.coords[b]))
            })
            .unwrap();
        assert_eq!(inst.prizes[far], 1.0);
        assert!(inst.prizes.iter().all(|&r| (0.01..=1.0).contains(&r)));
    }

    #[test]
    fn pctsp_scales_match_the_size() {
        let inst = gen(Problem::Pctsp, 20, 7);
        for &r in &inst.prizes {
            assert!(r > 0.0 && r < 0.2, "prize {r}");
        }
        for &b in &inst.penalties {
            assert!(b > 0.0 && b < 0.3, "penalty {b}");
        }
    }

    #[test]
    fn prize_mode_is_op_only() {
        assert!(generate_instance(Problem::Op, 5, None, &mut rng(0)).is_err());
        assert!(generate_instance(
            Problem::Tsp,
            5,
            Some(PrizeMode::Uniform),
            &mut rng(0)
        )
        .is_err());
    }

    #[test]
    fn real_prizes_stay_below_twice_the_expectation() {
        let inst = gen(Problem::Spctsp, 25, 9);
        for (&real, &exp) in inst.real_prizes.iter().zip(&inst.prizes) {
            assert!((0.0..2.0 * exp).contains(&real));
        }
        assert_eq!(reveal_prize(&inst, 3).unwrap(), inst.real_prizes[3]);
        assert_eq!(reveal_prize(&inst, 3).unwrap(), reveal_prize(&inst, 3).unwrap());
        let tsp = gen(Problem::Tsp, 5, 1);
        assert!(reveal_prize(&tsp, 0).is_err());
    }

    #[test]
    fn real_prizes_average_to_the_expected_prize() {
        // E[real] = expected prize; check the ratio over many draws.
        let mut sum_real = 0.0;
        let mut sum_exp = 0.0;
        for seed in 0..100_000u64 {
            let inst = gen(Problem::Spctsp, 1, seed);
            sum_real += inst.real_prizes[0];
            sum_exp += inst.prizes[0];
        }
        let ratio = sum_real / sum_exp;
        assert!((ratio - 1.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn tsp_mask_is_the_unvisited_pattern() {
        let inst = gen(Problem::Tsp, 4, 3);
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        apply_action(&inst, &mut state, 3).unwrap();
        assert_eq!(feasible_mask(&inst, &state).unwrap(), vec![true, false, true, false]);
    }

    #[test]
    fn vrp_depot_is_closed_first_and_after_itself() {
        let inst = gen(Problem::Cvrp, 5, 4);
        let mut state = DecodeState::new(&inst);
        assert!(!feasible_mask(&inst, &state).unwrap()[0]);
        apply_action(&inst, &mut state, 2).unwrap();
        assert!(feasible_mask(&inst, &state).unwrap()[0]);
        apply_action(&inst, &mut state, 0).unwrap();
        assert!(!state.terminal);
        assert!(!feasible_mask(&inst, &state).unwrap()[0]);
    }

    #[test]
    fn cvrp_masks_demands_beyond_capacity() {
        let mut inst = gen(Problem::Cvrp, 3, 5);
        inst.demands = vec![0.6, 0.5, 0.3];
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        // Capacity 0.4 left: only the 0.3 customer fits.
        let mask = feasible_mask(&inst, &state).unwrap();
        assert_eq!(mask, vec![true, false, false, true]);
        assert!((state.capacity_left - 0.4).abs() < 1e-15);
    }

    #[test]
    fn vrp_capacity_example_roundtrip() {
        let mut inst = gen(Problem::Cvrp, 2, 6);
        inst.demands = vec![0.3, 0.2];
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        assert!((state.capacity_left - 0.7).abs() < 1e-15);
        apply_action(&inst, &mut state, 0).unwrap();
        assert_eq!(state.capacity_left, 1.0);
        assert!(!state.terminal, "demand remains");
    }

    #[test]
    fn sdvrp_splits_a_delivery_across_trips() {
        let mut inst = gen(Problem::Sdvrp, 2, 7);
        inst.demands = vec![0.8, 0.5];
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        // 0.2 capacity left against remaining demand 0.5: deliver 0.2.
        apply_action(&inst, &mut state, 2).unwrap();
        assert!((state.remaining_demand[1] - 0.3).abs() < 1e-15);
        assert_eq!(state.capacity_left, 0.0);
        // Empty vehicle: customers close, depot is the only way on.
        assert_eq!(feasible_mask(&inst, &state).unwrap(), vec![true, false, false]);
        apply_action(&inst, &mut state, 0).unwrap();
        apply_action(&inst, &mut state, 2).unwrap();
        assert_eq!(state.remaining_demand[1], 0.0);
        apply_action(&inst, &mut state, 0).unwrap();
        assert!(state.terminal);
    }

    #[test]
    fn op_masks_unreachable_customers() {
        let mut inst = gen(Problem::Op, 2, 8);
        inst.depot = Some([0.0, 0.0]);
        inst.coords = vec![[0.3, 0.0], [0.0, 0.9]];
        inst.max_length = Some(1.0);
        let state = DecodeState::new(&inst);
        // Customer 2 needs 1.8 of budget; the depot is always open.
        assert_eq!(feasible_mask(&inst, &state).unwrap(), vec![true, true, false]);
    }

    #[test]
    fn op_budget_shrinks_by_the_travelled_distance() {
        let mut inst = gen(Problem::Op, 2, 8);
        inst.depot = Some([0.0, 0.0]);
        inst.coords = vec![[0.3, 0.0], [0.6, 0.0]];
        inst.max_length = Some(2.0);
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        assert!((state.length_left - 1.7).abs() < 1e-15);
        apply_action(&inst, &mut state, 2).unwrap();
        assert!((state.length_left - 1.4).abs() < 1e-15);
        apply_action(&inst, &mut state, 0).unwrap();
        assert!(state.terminal);
        assert!((state.length_left - 0.8).abs() < 1e-15);
    }

    #[test]
    fn pctsp_prize_clamps_at_zero_and_opens_the_depot() {
        let mut inst = gen(Problem::Pctsp, 3, 9);
        inst.prizes = vec![0.6, 0.6, 0.1];
        let mut state = DecodeState::new(&inst);
        assert!(!feasible_mask(&inst, &state).unwrap()[0]);
        apply_action(&inst, &mut state, 1).unwrap();
        assert!((state.prize_left - 0.4).abs() < 1e-15);
        assert!(!feasible_mask(&inst, &state).unwrap()[0]);
        apply_action(&inst, &mut state, 2).unwrap();
        assert_eq!(state.prize_left, 0.0);
        assert!(feasible_mask(&inst, &state).unwrap()[0]);
        apply_action(&inst, &mut state, 0).unwrap();
        assert!(state.terminal);
    }

    #[test]
    fn pctsp_low_total_prize_keeps_depot_closed_until_all_visited() {
        let mut inst = gen(Problem::Pctsp, 2, 10);
        inst.prizes = vec![0.2, 0.3];
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 2).unwrap();
        assert!(!feasible_mask(&inst, &state).unwrap()[0], "prize still short");
        apply_action(&inst, &mut state, 1).unwrap();
        assert!(state.prize_left > 0.0);
        assert!(feasible_mask(&inst, &state).unwrap()[0], "everything visited");
    }

    #[test]
    fn spctsp_constraint_consumes_real_prizes() {
        let mut inst = gen(Problem::Spctsp, 2, 11);
        inst.prizes = vec![0.7, 0.7];
        inst.real_prizes = vec![0.4, 0.9];
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        assert!((state.prize_left - 0.6).abs() < 1e-15);
        apply_action(&inst, &mut state, 2).unwrap();
        assert_eq!(state.prize_left, 0.0);
    }

    #[test]
    fn terminal_state_rejects_further_queries() {
        let inst = gen(Problem::Tsp, 2, 12);
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 0).unwrap();
        apply_action(&inst, &mut state, 1).unwrap();
        assert!(state.terminal);
        assert!(matches!(feasible_mask(&inst, &state), Err(Error::Contract(_))));
        assert!(matches!(apply_action(&inst, &mut state, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn infeasible_actions_are_rejected() {
        let inst = gen(Problem::Tsp, 3, 13);
        let mut state = DecodeState::new(&inst);
        apply_action(&inst, &mut state, 1).unwrap();
        assert!(matches!(apply_action(&inst, &mut state, 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn random_rollouts_terminate_within_bounds_and_validate() {
        for p in Problem::ALL {
            for seed in 0..40u64 {
                let n = 6 + (seed as usize % 7);
                let inst = gen(p, n, seed);
                let actions = random_rollout(&inst, seed * 31 + 1);
                let bound = match p {
                    Problem::Tsp => n,
                    Problem::Cvrp => 2 * n,
                    Problem::Sdvrp => 3 * n + 1,
                    _ => n + 1,
                };
                assert!(
                    actions.len() <= bound,
                    "{p} rollout of {} steps exceeds {bound}",
                    actions.len()
                );
                validate_solution(&inst, &actions)
                    .unwrap_or_else(|e| panic!("{p} seed {seed}: {e}"));
            }
        }
    }

    #[test]
    fn sdvrp_deliveries_conserve_demand() {
        for seed in 0..20u64 {
            let inst = gen(Problem::Sdvrp, 8, seed);
            let actions = random_rollout(&inst, seed + 1000);
            let mut remaining = inst.demands.clone();
            let mut cap = 1.0;
            for &a in &actions {
                match inst.customer_of(a) {
                    None => cap = 1.0,
                    Some(i) => {
                        let d = remaining[i].min(cap);
                        remaining[i] -= d;
                        cap -= d;
                    }
                }
            }
            assert!(remaining.iter().all(|&d| d.abs() <= FEAS_EPS));
        }
    }

    #[test]
    fn op_and_pctsp_counters_never_increase() {
        for (p, seed) in [(Problem::Op, 3u64), (Problem::Pctsp, 4)] {
            let inst = gen(p, 10, seed);
            let mut r = derive_rng(seed, &[7]);
            let mut state = DecodeState::new(&inst);
            let mut last_len = state.length_left;
            let mut last_prize = state.prize_left;
            while !state.terminal {
                let mask = feasible_mask(&inst, &state).unwrap();
                let open: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                apply_action(&inst, &mut state, open[r.gen_range(0..open.len())]).unwrap();
                assert!(state.length_left <= last_len);
                assert!(state.prize_left <= last_prize);
                last_len = state.length_left;
                last_prize = state.prize_left;
            }
        }
    }

    #[test]
    fn four_corners_tour_costs_four() {
        let inst = Instance {
            problem: Problem::Tsp,
            coords: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            depot: None,
            demands: Vec::new(),
            capacity: None,
            prizes: Vec::new(),
            penalties: Vec::new(),
            max_length: None,
            real_prizes: Vec::new(),
        };
        assert!((solution_cost(&inst, &[0, 1, 2, 3]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn op_empty_route_costs_nothing() {
        let inst = gen(Problem::Op, 5, 14);
        assert_eq!(solution_cost(&inst, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn op_cost_is_negated_prize() {
        let mut inst = gen(Problem::Op, 3, 15);
        inst.prizes = vec![0.5, 0.25, 1.0];
        inst.max_length = Some(10.0);
        let cost = solution_cost(&inst, &[2, 3, 0]).unwrap();
        assert!((cost + 1.25).abs() < 1e-12);
    }

    #[test]
    fn pctsp_visiting_everything_waives_penalties() {
        let inst = gen(Problem::Pctsp, 4, 16);
        let actions = [1, 2, 3, 4, 0];
        let cost = solution_cost(&inst, &actions).unwrap();
        assert!((cost - route_length(&inst, &actions)).abs() < 1e-12);
    }

    #[test]
    fn pctsp_penalties_count_the_skipped() {
        let mut inst = gen(Problem::Pctsp, 3, 17);
        inst.prizes = vec![1.5, 0.1, 0.2];
        inst.penalties = vec![0.05, 0.3, 0.4];
        let cost = solution_cost(&inst, &[1, 0]).unwrap();
        assert!((cost - (route_length(&inst, &[1, 0]) + 0.7)).abs() < 1e-12);
    }

    #[test]
    fn cost_rejects_infeasible_sequences() {
        let inst = gen(Problem::Tsp, 4, 18);
        assert!(solution_cost(&inst, &[0, 1, 1, 2]).is_err());
        let vrp = gen(Problem::Cvrp, 3, 19);
        assert!(solution_cost(&vrp, &[1, 2, 3]).is_err(), "must end at the depot");
        let mut op = gen(Problem::Op, 2, 20);
        op.max_length = Some(0.1);
        assert!(solution_cost(&op, &[1, 0]).is_err(), "budget exceeded");
    }

    #[test]
    fn instances_roundtrip_through_json() {
        for p in Problem::ALL {
            let inst = gen(p, 9, 21);
            let text = serde_json::to_string(&inst).unwrap();
            let back: Instance = serde_json::from_str(&text).unwrap();
            assert_eq!(inst, back);
        }
    }

    #[test]
    fn problem_names_roundtrip() {
        for p in Problem::ALL {
            assert_eq!(p.name().parse::<Problem>().unwrap(), p);
        }
        assert!("sptsp".parse::<Problem>().is_err());
        assert_eq!("distance".parse::<PrizeMode>().unwrap(), PrizeMode::Distance);
    }
}
