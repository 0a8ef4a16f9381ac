//! Non-learned construction baselines: nearest neighbor and the insertion
//! family for the TSP, the Tsiligirides score-based construction for the
//! orienteering problem, and the plan-execute-replan harness for the
//! stochastic prize-collecting TSP.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{plan_pctsp_path, PlanNode};
use crate::problems::{solution_cost, Instance, Problem, Solution, FEAS_EPS};
use crate::rollout::RolloutMode;

fn require(instance: &Instance, problem: Problem) -> Result<()> {
    if instance.problem != problem {
        return Err(Error::Contract(format!(
            "{problem} heuristic on a {} instance",
            instance.problem
        )));
    }
    Ok(())
}

fn finish(instance: &Instance, actions: Vec<usize>) -> Result<Solution> {
    let cost = solution_cost(instance, &actions)?;
    Ok(Solution { actions, cost, log_prob: None })
}

/// Grows a path from node 0, always stepping to the nearest unvisited
/// node (lowest index on ties), then closes the tour.
pub fn nearest_neighbor(instance: &Instance) -> Result<Solution> {
    require(instance, Problem::Tsp)?;
    let n = instance.n();
    let mut visited = vec![false; n];
    let mut tour = Vec::with_capacity(n);
    let mut at = 0;
    visited[0] = true;
    tour.push(0);
    for _ in 1..n {
        let mut next = None;
        let mut best = f64::INFINITY;
        for (j, &seen) in visited.iter().enumerate() {
            if !seen {
                let d = instance.dist(at, j);
                if d < best {
                    best = d;
                    next = Some(j);
                }
            }
        }
        at = next.expect("unvisited node exists");
        visited[at] = true;
        tour.push(at);
    }
    finish(instance, tour)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionVariant {
    Nearest,
    Farthest,
    Random,
}

impl InsertionVariant {
    pub const ALL: [InsertionVariant; 3] =
        [InsertionVariant::Nearest, InsertionVariant::Farthest, InsertionVariant::Random];
}

/// Cost of inserting `i` between adjacent tour nodes `j` and `k`.
fn insertion_cost(instance: &Instance, j: usize, i: usize, k: usize) -> f64 {
    instance.dist(j, i) + instance.dist(i, k) - instance.dist(j, k)
}

/// Builds a tour by repeated cheapest-position insertion. The variant
/// picks which node enters next: the one nearest to the partial tour, the
/// one farthest from it, or simply the nodes in input order (the input is
/// already random). The initial partial tour is node 0 alone.
pub fn insertion(instance: &Instance, variant: InsertionVariant) -> Result<Solution> {
    require(instance, Problem::Tsp)?;
    let n = instance.n();
    let mut tour = vec![0usize];
    let mut in_tour = vec![false; n];
    in_tour[0] = true;
    // Distance from each outside node to the partial tour, kept fresh
    // incrementally for the nearest/farthest selectors.
    let mut to_tour: Vec<f64> = (0..n).map(|j| instance.dist(0, j)).collect();
    for _ in 1..n {
        let selected = match variant {
            InsertionVariant::Random => {
                (0..n).find(|&j| !in_tour[j]).expect("unvisited node exists")
            }
            InsertionVariant::Nearest | InsertionVariant::Farthest => {
                let mut pick = None;
                let mut best = f64::INFINITY;
                if variant == InsertionVariant::Farthest {
                    best = f64::NEG_INFINITY;
                }
                for j in 0..n {
                    if in_tour[j] {
                        continue;
                    }
                    let closer = if variant == InsertionVariant::Nearest {
                        to_tour[j] < best
                    } else {
                        to_tour[j] > best
                    };
                    if closer {
                        best = to_tour[j];
                        pick = Some(j);
                    }
                }
                pick.expect("unvisited node exists")
            }
        };
        // Cheapest position: minimize d(j,i) + d(i,k) - d(j,k) over tour
        // edges, scanning in tour order so ties go to the first edge.
        let mut at = 0;
        let mut best = f64::INFINITY;
        for p in 0..tour.len() {
            let j = tour[p];
            let k = tour[(p + 1) % tour.len()];
            let c = insertion_cost(instance, j, selected, k);
            if c < best {
                best = c;
                at = p;
            }
        }
        tour.insert(at + 1, selected);
        in_tour[selected] = true;
        for j in 0..n {
            if !in_tour[j] {
                to_tour[j] = to_tour[j].min(instance.dist(selected, j));
            }
        }
    }
    finish(instance, tour)
}

/// The manually engineered orienteering score: prize over distance from
/// the current node, raised to the fourth power. Coincident points score
/// infinity and win outright.
pub fn tsiligirides_score(prize: f64, dist: f64) -> f64 {
    if dist <= 0.0 {
        f64::INFINITY
    } else {
        (prize / dist).powi(4)
    }
}

/// Top candidates at the current step: feasible unvisited nodes ranked by
/// score (index breaks ties), truncated to at most four.
fn tsili_candidates(
    instance: &Instance,
    visited: &[bool],
    at: usize,
    length_left: f64,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..instance.n())
        .filter(|&j| {
            !visited[j]
                && instance.dist(at, j + 1) + instance.dist(j + 1, 0) <= length_left + FEAS_EPS
        })
        .map(|j| (j, tsiligirides_score(instance.prizes[j], instance.dist(at, j + 1))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(4);
    scored
}

/// Score-guided orienteering construction: repeatedly pick among the top
/// four feasible nodes by score, greedily or by sampling proportional to
/// score, until nothing fits in the remaining length budget.
pub fn tsiligirides(
    instance: &Instance,
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> Result<Solution> {
    require(instance, Problem::Op)?;
    let mut visited = vec![false; instance.n()];
    let mut actions = Vec::new();
    let mut at = 0usize;
    let mut length_left = instance.max_length.expect("op carries max_length");
    loop {
        let candidates = tsili_candidates(instance, &visited, at, length_left);
        let Some(&(first, top_score)) = candidates.first() else { break };
        let pick = match mode {
            RolloutMode::Greedy => first,
            RolloutMode::Sample => {
                if top_score.is_infinite() {
                    // An unbeatable score takes the whole mass; the sort
                    // already put the lowest such index first.
                    first
                } else {
                    let total: f64 = candidates.iter().map(|c| c.1).sum();
                    let u: f64 = rng.gen::<f64>() * total;
                    let mut cum = 0.0;
                    let mut chosen = first;
                    for &(j, s) in &candidates {
                        cum += s;
                        chosen = j;
                        if u < cum {
                            break;
                        }
                    }
                    chosen
                }
            }
        };
        visited[pick] = true;
        length_left -= instance.dist(at, pick + 1);
        at = pick + 1;
        actions.push(at);
    }
    actions.push(0);
    finish(instance, actions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplanStrategy {
    /// Execute every planned visit, replanning only if the prize
    /// constraint is still unmet.
    All,
    /// Execute half of the planned visits (rounded down, at least one).
    Half,
    /// Execute one visit per plan: maximum adaptivity.
    First,
}

impl ReplanStrategy {
    pub const ALL: [ReplanStrategy; 3] =
        [ReplanStrategy::All, ReplanStrategy::Half, ReplanStrategy::First];

    fn prefix(&self, planned: usize) -> usize {
        match self {
            ReplanStrategy::All => planned,
            ReplanStrategy::Half => (planned / 2).max(1),
            ReplanStrategy::First => 1,
        }
    }
}

pub struct ReplanOutcome {
    pub solution: Solution,
    pub plan_calls: usize,
}

/// Plan-execute-replan for the stochastic prize-collecting TSP. Plans use
/// the expected prizes; execution reveals the real prize of each visited
/// customer and shrinks the outstanding requirement accordingly. The
/// planner maps (start point, available customers, required prize) to a
/// visit order; planning treats the start as an asymmetric pseudo-depot,
/// leaving return distances untouched.
pub fn spctsp_replan(
    instance: &Instance,
    strategy: ReplanStrategy,
    planner: &mut dyn FnMut([f64; 2], &[PlanNode], f64) -> Result<Vec<usize>>,
) -> Result<ReplanOutcome> {
    require(instance, Problem::Spctsp)?;
    let n = instance.n();
    let mut visited = vec![false; n];
    let mut actions = Vec::new();
    let mut required = 1.0f64;
    let mut at = instance.depot.expect("depot problems carry depot coordinates");
    let mut plan_calls = 0;
    loop {
        if required <= FEAS_EPS || visited.iter().all(|&v| v) {
            break;
        }
        let available: Vec<PlanNode> = (0..n)
            .filter(|&j| !visited[j])
            .map(|j| PlanNode {
                id: j,
                xy: instance.coords[j],
                prize: instance.prizes[j],
                penalty: instance.penalties[j],
            })
            .collect();
        let plan = planner(at, &available, required).map_err(|e| {
            Error::Contract(format!(
                "planner failed after {} visits ({} plans): {e}",
                actions.len(),
                plan_calls
            ))
        })?;
        plan_calls += 1;
        if plan.is_empty() {
            break;
        }
        for &j in plan.iter().take(strategy.prefix(plan.len())) {
            debug_assert!(!visited[j], "planner revisited customer {j}");
            visited[j] = true;
            actions.push(j + 1);
            at = instance.coords[j];
            required = (required - instance.real_prizes[j]).max(0.0);
        }
    }
    actions.push(0);
    let cost = solution_cost(instance, &actions)?;
    Ok(ReplanOutcome { solution: Solution { actions, cost, log_prob: None }, plan_calls })
}

/// Replanning with the exact open-route planner; instances up to the
/// prize oracle's size cap.
pub fn spctsp_replan_exact(instance: &Instance, strategy: ReplanStrategy) -> Result<ReplanOutcome> {
    let depot = instance.depot.expect("depot problems carry depot coordinates");
    spctsp_replan(instance, strategy, &mut |start, nodes, required| {
        plan_pctsp_path(start, depot, nodes, required).map(|(_, order)| order)
    })
}
