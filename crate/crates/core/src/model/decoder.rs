//! Decoder: turns the encoder's embeddings plus the rolling construction
//! state into a masked distribution over next actions.
//!
//! Per instance, the key and value projections over node embeddings are
//! computed once and cached; every step then builds a context embedding,
//! applies one masked multi-head glimpse, and scores nodes with a single
//! clipped dot-product head. For the split-delivery VRP the cached keys
//! and values are adjusted each step with projections of the remaining
//! demands so the scores can track deliveries.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::problems::{DecodeState, Instance, Problem};
use crate::tape::{Tape, Var};

use super::encoder::{multi_head_mix, Embeddings};
use super::{ModelConfig, PolicyVars};

/// Per-instance projections that stay fixed over a decode, plus the
/// handles needed each step.
pub struct DecoderCache {
    pub nodes: Var,
    pub graph: Var,
    k_glimpse: Var,
    v_glimpse: Var,
    k_out: Var,
    num_actions: usize,
}

impl DecoderCache {
    /// Projects the node embeddings once. Decode steps only add
    /// context-sized work on top of this.
    pub fn build(tape: &mut Tape, vars: &PolicyVars, emb: &Embeddings) -> Result<Self> {
        let wk = vars.get("dec.glimpse.wk")?;
        let wv = vars.get("dec.glimpse.wv")?;
        let wk_out = vars.get("dec.out.wk")?;
        let k_glimpse = tape.matmul_nt(emb.nodes, wk)?;
        let v_glimpse = tape.matmul_nt(emb.nodes, wv)?;
        let k_out = tape.matmul_nt(emb.nodes, wk_out)?;
        Ok(DecoderCache {
            nodes: emb.nodes,
            graph: emb.graph,
            k_glimpse,
            v_glimpse,
            k_out,
            num_actions: tape.value(emb.nodes).rows(),
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// Builds the step context row. TSP: graph, last node, first node
/// (learned placeholders before the first move). Depot problems: graph,
/// last node (the depot embedding at the start), and the problem's state
/// scalar: remaining capacity, remaining length budget, or remaining
/// prize requirement.
pub fn context_embedding(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    cache: &DecoderCache,
    instance: &Instance,
    state: &DecodeState,
) -> Result<Var> {
    let ctx = match cfg.problem {
        Problem::Tsp => {
            let (last, first) = match (state.sequence.first(), state.sequence.last()) {
                (Some(&f), Some(&l)) => (
                    tape.select_row(cache.nodes, l)?,
                    tape.select_row(cache.nodes, f)?,
                ),
                _ => (
                    vars.get("dec.placeholder.last")?,
                    vars.get("dec.placeholder.first")?,
                ),
            };
            tape.concat_cols(&[cache.graph, last, first])?
        }
        _ => {
            let last = state
                .last_action(instance)
                .ok_or_else(|| Error::Contract("depot problems always have a last action".into()))?;
            let h_last = tape.select_row(cache.nodes, last)?;
            let scalar = match cfg.problem {
                Problem::Cvrp | Problem::Sdvrp => state.capacity_left,
                Problem::Op => state.length_left,
                Problem::Pctsp | Problem::Spctsp => state.prize_left,
                Problem::Tsp => unreachable!(),
            };
            let s = tape.leaf_scalar(scalar);
            tape.concat_cols(&[cache.graph, h_last, s])?
        }
    };
    debug_assert_eq!(tape.value(ctx).cols(), cfg.ctx_dim());
    Ok(ctx)
}

/// Remaining demands as a column, depot first with a zero entry. Only the
/// split-delivery decoder feeds this through its adjustment projections.
fn demand_column(tape: &mut Tape, instance: &Instance, state: &DecodeState) -> Result<Var> {
    let mut col = Vec::with_capacity(instance.num_actions());
    col.push(0.0);
    col.extend_from_slice(&state.remaining_demand);
    Ok(tape.leaf(Array::col_vec(col)?))
}

/// One decode step: glimpse then clipped single-head scores. Returns the
/// masked logits row (masking happens downstream in the softmax; the row
/// itself holds the clipped values for every action).
pub fn output_logits(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    cache: &DecoderCache,
    instance: &Instance,
    state: &DecodeState,
    mask: &[bool],
) -> Result<Var> {
    if mask.len() != cache.num_actions {
        return Err(Error::Shape(format!(
            "mask of {} entries over {} actions",
            mask.len(),
            cache.num_actions
        )));
    }
    let ctx = context_embedding(tape, cfg, vars, cache, instance, state)?;
    let wq_g = vars.get("dec.glimpse.wq")?;
    let q_full = tape.matmul_nt(ctx, wq_g)?;
    let (mut k_g, mut v_g, mut k_o) = (cache.k_glimpse, cache.v_glimpse, cache.k_out);
    if cfg.problem == Problem::Sdvrp {
        let delta = demand_column(tape, instance, state)?;
        let wdk = vars.get("dec.glimpse.wdk")?;
        let wdv = vars.get("dec.glimpse.wdv")?;
        let wdo = vars.get("dec.out.wdk")?;
        // delta is a column, the adjustments are stored as rows: the
        // products broadcast one projected row per node.
        let dk = tape.matmul(delta, wdk)?;
        let dv = tape.matmul(delta, wdv)?;
        let dko = tape.matmul(delta, wdo)?;
        k_g = tape.add(k_g, dk)?;
        v_g = tape.add(v_g, dv)?;
        k_o = tape.add(k_o, dko)?;
    }
    let wo = vars.get("dec.glimpse.wo")?;
    let glimpse = multi_head_mix(tape, cfg, q_full, k_g, v_g, wo, Some(mask))?;
    let wq_o = vars.get("dec.out.wq")?;
    let q_out = tape.matmul_nt(glimpse, wq_o)?;
    let scores = tape.matmul_nt(q_out, k_o)?;
    let scaled = tape.scale(scores, 1.0 / (cfg.d_h as f64).sqrt());
    let squashed = tape.tanh(scaled);
    Ok(tape.scale(squashed, cfg.tanh_clip))
}

/// The step distribution with its feasibility mask resolved: probabilities
/// over actions (masked entries exactly zero) and the logits variable for
/// log-probability readouts.
pub struct StepDistribution {
    pub logits: Var,
    pub probs: Vec<f64>,
}

pub fn step_distribution(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    cache: &DecoderCache,
    instance: &Instance,
    state: &DecodeState,
    mask: &[bool],
) -> Result<StepDistribution> {
    let logits = output_logits(tape, cfg, vars, cache, instance, state, mask)?;
    let probs = crate::tape::softmax_row(tape.value(logits).row(0), Some(mask))?;
    Ok(StepDistribution { logits, probs })
}
