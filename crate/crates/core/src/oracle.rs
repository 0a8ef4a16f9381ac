//! Exact solvers for small instances, used to ground optimality gaps and
//! brute-force equivalence tests.
//!
//! The tour solver is the classic subset dynamic program over
//! (visited set, end node). Memory grows as n * 2^n, so it is hard-capped
//! at n = 22 (about 350 MB of table); the prize-collecting solvers cap at
//! n = 10 where subset enumeration stays trivial.

use crate::error::{Error, Result};
use crate::problems::{euclid, solution_cost, Instance, Problem, FEAS_EPS};

pub const TOUR_ORACLE_MAX_N: usize = 22;
pub const PRIZE_ORACLE_MAX_N: usize = 10;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub cost: f64,
    pub actions: Vec<usize>,
    /// Dynamic-program states examined; a cheap effort measure.
    pub explored: u64,
}

/// Optimal closed cycle through `pts`, anchored at `pts[0]`. Returns the
/// cycle cost, the visit order of the remaining points (by their index in
/// `pts`), and the state count.
fn cycle_dp(pts: &[[f64; 2]]) -> (f64, Vec<usize>, u64) {
    let m = pts.len();
    if m <= 1 {
        return (0.0, Vec::new(), 1);
    }
    if m == 2 {
        return (2.0 * euclid(pts[0], pts[1]), vec![1], 1);
    }
    let k = m - 1;
    let full: usize = (1 << k) - 1;
    let mut dist = vec![0.0f64; m * m];
    for a in 0..m {
        for b in 0..m {
            dist[a * m + b] = euclid(pts[a], pts[b]);
        }
    }
    let mut dp = vec![f64::INFINITY; (full + 1) * k];
    let mut parent = vec![u8::MAX; (full + 1) * k];
    for j in 0..k {
        dp[(1 << j) * k + j] = dist[j + 1];
    }
    let mut explored = 0u64;
    for mask in 1..=full {
        let base = mask * k;
        let mut inside = mask;
        while inside != 0 {
            let j = inside.trailing_zeros() as usize;
            inside &= inside - 1;
            let here = dp[base + j];
            if !here.is_finite() {
                continue;
            }
            explored += 1;
            let mut outside = full & !mask;
            while outside != 0 {
                let t = outside.trailing_zeros() as usize;
                outside &= outside - 1;
                let next = here + dist[(j + 1) * m + (t + 1)];
                let slot = (mask | (1 << t)) * k + t;
                if next < dp[slot] {
                    dp[slot] = next;
                    parent[slot] = j as u8;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut best_end = 0;
    for j in 0..k {
        let total = dp[full * k + j] + dist[(j + 1) * m];
        if total < best {
            best = total;
            best_end = j;
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut mask = full;
    let mut end = best_end;
    loop {
        order.push(end + 1);
        let p = parent[mask * k + end];
        mask &= !(1 << end);
        if mask == 0 {
            break;
        }
        end = p as usize;
    }
    order.reverse();
    (best, order, explored)
}

/// Optimal closed tour for a TSP instance, n <= 22.
pub fn held_karp(instance: &Instance) -> Result<OracleResult> {
    if instance.problem != Problem::Tsp {
        return Err(Error::Contract(format!(
            "tour oracle on a {} instance",
            instance.problem
        )));
    }
    let n = instance.n();
    if n > TOUR_ORACLE_MAX_N {
        return Err(Error::Capacity(format!(
            "tour oracle handles n <= {TOUR_ORACLE_MAX_N}, got {n}"
        )));
    }
    let (cost, order, explored) = cycle_dp(&instance.coords);
    let mut actions = Vec::with_capacity(n);
    actions.push(0);
    actions.extend(order);
    debug_assert!((solution_cost(instance, &actions)? - cost).abs() < 1e-9);
    Ok(OracleResult { cost, actions, explored })
}

/// Maximum-prize route within the length budget, n <= 10, by dynamic
/// programming over (visited subset, end customer). States whose return
/// leg no longer fits are dropped; under the Euclidean triangle
/// inequality they cannot recover.
pub fn brute_force_op(instance: &Instance) -> Result<OracleResult> {
    if instance.problem != Problem::Op {
        return Err(Error::Contract(format!(
            "orienteering oracle on a {} instance",
            instance.problem
        )));
    }
    let n = instance.n();
    if n > PRIZE_ORACLE_MAX_N {
        return Err(Error::Capacity(format!(
            "prize oracles handle n <= {PRIZE_ORACLE_MAX_N}, got {n}"
        )));
    }
    let budget = instance.max_length.expect("op carries max_length") + FEAS_EPS;
    let full: usize = (1 << n) - 1;
    let mut dp = vec![f64::INFINITY; (full + 1) * n];
    let mut parent = vec![u8::MAX; (full + 1) * n];
    let d0: Vec<f64> = (1..=n).map(|a| instance.dist(0, a)).collect();
    for j in 0..n {
        if 2.0 * d0[j] <= budget {
            dp[(1 << j) * n + j] = d0[j];
        }
    }
    let mut prize = vec![0.0f64; full + 1];
    for mask in 1..=full {
        let j = mask.trailing_zeros() as usize;
        prize[mask] = prize[mask & (mask - 1)] + instance.prizes[j];
    }
    let mut explored = 1u64;
    let mut best_prize = 0.0;
    let mut best_state: Option<(usize, usize)> = None;
    for mask in 1..=full {
        let base = mask * n;
        let mut inside = mask;
        while inside != 0 {
            let j = inside.trailing_zeros() as usize;
            inside &= inside - 1;
            let here = dp[base + j];
            if !here.is_finite() {
                continue;
            }
            explored += 1;
            if prize[mask] > best_prize {
                best_prize = prize[mask];
                best_state = Some((mask, j));
            }
            let mut outside = full & !mask;
            while outside != 0 {
                let t = outside.trailing_zeros() as usize;
                outside &= outside - 1;
                let next = here + instance.dist(j + 1, t + 1);
                if next + d0[t] > budget {
                    continue;
                }
                let slot = (mask | (1 << t)) * n + t;
                if next < dp[slot] {
                    dp[slot] = next;
                    parent[slot] = j as u8;
                }
            }
        }
    }
    let mut actions = Vec::new();
    if let Some((mut mask, mut end)) = best_state {
        let mut tail = Vec::new();
        loop {
            tail.push(end + 1);
            let p = parent[mask * n + end];
            mask &= !(1 << end);
            if mask == 0 {
                break;
            }
            end = p as usize;
        }
        tail.reverse();
        actions = tail;
    }
    actions.push(0);
    let cost = -best_prize;
    debug_assert!((solution_cost(instance, &actions)? - cost).abs() < 1e-9);
    Ok(OracleResult { cost, actions, explored })
}

/// Optimal prize-collecting route, n <= 10: every customer subset that
/// meets the prize requirement (plus the full set, which is always
/// allowed) is routed optimally by the cycle solver, and the complement
/// pays its penalties.
pub fn brute_force_pctsp(instance: &Instance) -> Result<OracleResult> {
    if instance.problem != Problem::Pctsp {
        return Err(Error::Contract(format!(
            "prize-collecting oracle on a {} instance",
            instance.problem
        )));
    }
    let n = instance.n();
    if n > PRIZE_ORACLE_MAX_N {
        return Err(Error::Capacity(format!(
            "prize oracles handle n <= {PRIZE_ORACLE_MAX_N}, got {n}"
        )));
    }
    let depot = instance.depot.expect("depot problems carry depot coordinates");
    let full: usize = (1 << n) - 1;
    let total_penalty: f64 = instance.penalties.iter().sum();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut explored = 0u64;
    for mask in 0..=full {
        let mut prize = 0.0;
        let mut penalty_kept = 0.0;
        for j in 0..n {
            if mask & (1 << j) != 0 {
                prize += instance.prizes[j];
                penalty_kept += instance.penalties[j];
            }
        }
        if prize < 1.0 - FEAS_EPS && mask != full {
            continue;
        }
        let mut pts = Vec::with_capacity(mask.count_ones() as usize + 1);
        pts.push(depot);
        let mut members = Vec::new();
        for j in 0..n {
            if mask & (1 << j) != 0 {
                pts.push(instance.coords[j]);
                members.push(j);
            }
        }
        let (length, order, states) = cycle_dp(&pts);
        explored += states;
        let cost = length + (total_penalty - penalty_kept);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            let mut actions: Vec<usize> =
                order.into_iter().map(|p| members[p - 1] + 1).collect();
            actions.push(0);
            best = Some((cost, actions));
        }
    }
    let (cost, actions) =
        best.ok_or_else(|| Error::Contract("no admissible subset".into()))?;
    debug_assert!((solution_cost(instance, &actions)? - cost).abs() < 1e-9);
    Ok(OracleResult { cost, actions, explored })
}

/// A customer available to the open-path planner.
#[derive(Clone, Copy, Debug)]
pub struct PlanNode {
    pub id: usize,
    pub xy: [f64; 2],
    pub prize: f64,
    pub penalty: f64,
}

/// Exact open-route prize-collecting plan: from `start` through a subset
/// of `customers` to `depot`, collecting at least `required` prize (or
/// everything, when the total falls short), minimizing path length plus
/// the penalties of skipped customers. Returns the cost and the visit
/// order by customer id. At most 10 customers.
pub fn plan_pctsp_path(
    start: [f64; 2],
    depot: [f64; 2],
    customers: &[PlanNode],
    required: f64,
) -> Result<(f64, Vec<usize>)> {
    let k = customers.len();
    if k > PRIZE_ORACLE_MAX_N {
        return Err(Error::Capacity(format!(
            "prize oracles handle n <= {PRIZE_ORACLE_MAX_N}, got {k}"
        )));
    }
    let total_penalty: f64 = customers.iter().map(|c| c.penalty).sum();
    if k == 0 {
        return Ok((euclid(start, depot), Vec::new()));
    }
    let full: usize = (1 << k) - 1;
    let mut dp = vec![f64::INFINITY; (full + 1) * k];
    let mut parent = vec![u8::MAX; (full + 1) * k];
    for j in 0..k {
        dp[(1 << j) * k + j] = euclid(start, customers[j].xy);
    }
    for mask in 1..=full {
        let base = mask * k;
        let mut inside = mask;
        while inside != 0 {
            let j = inside.trailing_zeros() as usize;
            inside &= inside - 1;
            let here = dp[base + j];
            if !here.is_finite() {
                continue;
            }
            let mut outside = full & !mask;
            while outside != 0 {
                let t = outside.trailing_zeros() as usize;
                outside &= outside - 1;
                let next = here + euclid(customers[j].xy, customers[t].xy);
                let slot = (mask | (1 << t)) * k + t;
                if next < dp[slot] {
                    dp[slot] = next;
                    parent[slot] = j as u8;
                }
            }
        }
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for mask in 0..=full {
        let mut prize = 0.0;
        let mut kept = 0.0;
        for j in 0..k {
            if mask & (1 << j) != 0 {
                prize += customers[j].prize;
                kept += customers[j].penalty;
            }
        }
        if prize < required - FEAS_EPS && mask != full {
            continue;
        }
        let penalty = total_penalty - kept;
        if mask == 0 {
            let cost = euclid(start, depot) + penalty;
            if best.is_none_or(|(b, _, _)| cost < b) {
                best = Some((cost, 0, usize::MAX));
            }
            continue;
        }
        for j in 0..k {
            if mask & (1 << j) == 0 || !dp[mask * k + j].is_finite() {
                continue;
            }
            let cost = dp[mask * k + j] + euclid(customers[j].xy, depot) + penalty;
            if best.as_ref().is_none_or(|(b, _, _)| cost < *b) {
                best = Some((cost, mask, j));
            }
        }
    }
    let (cost, mut mask, end) = best.expect("the full set is always admissible");
    let mut order = Vec::new();
    if end != usize::MAX {
        let mut j = end;
        loop {
            order.push(customers[j].id);
            let p = parent[mask * k + j];
            mask &= !(1 << j);
            if mask == 0 {
                break;
            }
            j = p as usize;
        }
        order.reverse();
    }
    Ok((cost, order))
}

/// Relative optimality gap, nonnegative for any feasible solution. For
/// minimization problems this is (cost - optimal) / optimal; for the
/// orienteering problem, where the objective is a negated prize, the gap
/// is taken on prizes as (optimal prize - achieved prize) / optimal
/// prize, keeping the same orientation.
pub fn optimality_gap(problem: Problem, cost: f64, optimal: f64) -> Result<f64> {
    if problem == Problem::Op {
        let best = -optimal;
        if !(best > 0.0) {
            return Err(Error::Contract(format!(
                "optimal prize {best} must be positive for a gap"
            )));
        }
        return Ok((best - (-cost)) / best);
    }
    if !(optimal > 0.0) {
        return Err(Error::Contract(format!(
            "optimal cost {optimal} must be positive for a gap"
        )));
    }
    Ok((cost - optimal) / optimal)
}
