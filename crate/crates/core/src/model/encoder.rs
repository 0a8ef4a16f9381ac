//! Graph encoder: an initial linear node embedding followed by stacked
//! multi-head self-attention layers with residual connections and
//! batch normalization.
//!
//! A whole batch of instances is encoded on one tape. Attention runs per
//! instance (nodes only attend within their own graph), while batchnorm
//! and the feed-forward sublayer run on the flattened (sum of instance
//! sizes) x d_h matrix, so train-mode statistics pool every node row in
//! the batch. Eval-mode normalization only uses running statistics, which
//! makes each instance's embeddings independent of its batch company.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::problems::{Instance, Problem};
use crate::tape::{BnBatch, Tape, Var};

use super::{BnStats, ModelConfig, PolicyVars, BN_EPS};

/// Encoded instance: final per-node embeddings (`num_actions x d_h`, depot
/// first where present) and their mean as the graph embedding.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub nodes: Var,
    pub graph: Var,
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the given running statistics.
    Eval(&'a BnStats),
}

pub struct EncodeOutput {
    pub embeddings: Vec<Embeddings>,
    /// Train mode only: one entry per batchnorm site, in site order.
    pub batch_stats: Vec<BnBatch>,
    /// Rows the statistics were pooled over (total nodes in the batch).
    pub rows: usize,
}

/// Multi-head attention readout from already-projected queries, keys and
/// values, each laid out as `rows x (heads * head_dim)`. The optional mask
/// (one flag per query-key pair, row-major, true = attend) is shared by
/// every head. Returns `q_rows x d_h` after the output projection.
pub fn multi_head_mix(
    tape: &mut Tape,
    cfg: &ModelConfig,
    q_full: Var,
    k_full: Var,
    v_full: Var,
    wo: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (d_k, d_v) = (cfg.d_k(), cfg.d_v());
    let inv_sqrt = 1.0 / (d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for m in 0..cfg.n_heads {
        let q = tape.slice_cols(q_full, m * d_k, d_k)?;
        let k = tape.slice_cols(k_full, m * d_k, d_k)?;
        let v = tape.slice_cols(v_full, m * d_v, d_v)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax_last(scaled, mask)?;
        heads.push(tape.matmul(attn, v)?);
    }
    let mixed = tape.concat_cols(&heads)?;
    tape.matmul_nt(mixed, wo)
}

/// Self-attention over one instance's node embeddings with the given
/// layer's projections. `mask` follows [`multi_head_mix`]; encoding passes
/// `None` for the fully connected graph (self-loops included).
pub fn mha(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    prefix: &str,
    layer: usize,
    h: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let wq = vars.get(&format!("{prefix}enc{layer}.mha.wq"))?;
    let wk = vars.get(&format!("{prefix}enc{layer}.mha.wk"))?;
    let wv = vars.get(&format!("{prefix}enc{layer}.mha.wv"))?;
    let wo = vars.get(&format!("{prefix}enc{layer}.mha.wo"))?;
    let q_full = tape.matmul_nt(h, wq)?;
    let k_full = tape.matmul_nt(h, wk)?;
    let v_full = tape.matmul_nt(h, wv)?;
    multi_head_mix(tape, cfg, q_full, k_full, v_full, wo, mask)
}

fn feature_rows(cfg: &ModelConfig, instance: &Instance) -> Result<Array> {
    let n = instance.n();
    let d_x = cfg.d_x();
    let mut feats = Array::zeros(n, d_x);
    for i in 0..n {
        feats.set(i, 0, instance.coords[i][0]);
        feats.set(i, 1, instance.coords[i][1]);
        match cfg.problem {
            Problem::Tsp => {}
            Problem::Cvrp | Problem::Sdvrp => feats.set(i, 2, instance.demands[i]),
            Problem::Op => feats.set(i, 2, instance.prizes[i]),
            Problem::Pctsp | Problem::Spctsp => {
                feats.set(i, 2, instance.prizes[i]);
                feats.set(i, 3, instance.penalties[i]);
            }
        }
    }
    Ok(feats)
}

/// Initial embedding: one linear map per customer row, and a separate
/// linear map for the depot where the problem has one. Depot first.
pub fn init_embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    prefix: &str,
    instance: &Instance,
) -> Result<Var> {
    if instance.problem != cfg.problem {
        return Err(Error::Contract(format!(
            "model built for {} got a {} instance",
            cfg.problem, instance.problem
        )));
    }
    let x = tape.leaf(feature_rows(cfg, instance)?);
    let w = vars.get(&format!("{prefix}embed.w"))?;
    let b = vars.get(&format!("{prefix}embed.b"))?;
    let customers = tape.linear(x, w, b)?;
    if !cfg.problem.has_depot() {
        return Ok(customers);
    }
    let depot = instance
        .depot
        .ok_or_else(|| Error::Contract("depot problem without depot coordinates".into()))?;
    let x0 = tape.leaf(Array::row_vec(depot.to_vec())?);
    let w0 = vars.get(&format!("{prefix}embed.depot.w"))?;
    let b0 = vars.get(&format!("{prefix}embed.depot.b"))?;
    let h0 = tape.linear(x0, w0, b0)?;
    tape.concat_rows(&[h0, customers])
}

fn apply_bn(
    tape: &mut Tape,
    vars: &PolicyVars,
    name: &str,
    x: Var,
    site: usize,
    mode: &BnMode<'_>,
    stats_out: &mut Vec<BnBatch>,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.w"))?;
    let b = vars.get(&format!("{name}.b"))?;
    match mode {
        BnMode::Train => {
            let (y, batch) = tape.batchnorm_train(x, w, b, BN_EPS)?;
            debug_assert_eq!(stats_out.len(), site);
            stats_out.push(batch);
            Ok(y)
        }
        BnMode::Eval(stats) => {
            let run = stats
                .sites
                .get(site)
                .ok_or_else(|| Error::Contract(format!("no running statistics for site {site}")))?;
            tape.batchnorm_eval(x, w, b, &run.mean, &run.var, BN_EPS)
        }
    }
}

/// Encodes a batch of same-problem instances. `prefix` selects the
/// parameter family (`""` for the policy, `"critic."` for the value head);
/// running statistics passed through `mode` must come from the same family.
pub fn encode_batch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    prefix: &str,
    instances: &[Instance],
    mode: BnMode<'_>,
) -> Result<EncodeOutput> {
    if instances.is_empty() {
        return Err(Error::Contract("encoding an empty batch".into()));
    }
    let mut offsets = Vec::with_capacity(instances.len());
    let mut parts = Vec::with_capacity(instances.len());
    let mut total = 0;
    for instance in instances {
        let rows = instance.num_actions();
        parts.push(init_embed(tape, cfg, vars, prefix, instance)?);
        offsets.push((total, rows));
        total += rows;
    }
    let mut h_cat = tape.concat_rows(&parts)?;
    let mut batch_stats = Vec::new();
    for l in 0..cfg.n_layers {
        let mut att_parts = Vec::with_capacity(offsets.len());
        for &(off, rows) in &offsets {
            let h_i = tape.slice_rows(h_cat, off, rows)?;
            let a_i = mha(tape, cfg, vars, prefix, l, h_i, None)?;
            att_parts.push(tape.add(h_i, a_i)?);
        }
        let res1 = tape.concat_rows(&att_parts)?;
        let h1 = apply_bn(tape, vars, &format!("{prefix}enc{l}.bn1"), res1, 2 * l, &mode, &mut batch_stats)?;
        let w0 = vars.get(&format!("{prefix}enc{l}.ff.w0"))?;
        let b0 = vars.get(&format!("{prefix}enc{l}.ff.b0"))?;
        let w1 = vars.get(&format!("{prefix}enc{l}.ff.w1"))?;
        let b1 = vars.get(&format!("{prefix}enc{l}.ff.b1"))?;
        let z = tape.linear(h1, w0, b0)?;
        let zr = tape.relu(z);
        let f = tape.linear(zr, w1, b1)?;
        let res2 = tape.add(h1, f)?;
        h_cat = apply_bn(tape, vars, &format!("{prefix}enc{l}.bn2"), res2, 2 * l + 1, &mode, &mut batch_stats)?;
    }
    let mut embeddings = Vec::with_capacity(offsets.len());
    for &(off, rows) in &offsets {
        let nodes = tape.slice_rows(h_cat, off, rows)?;
        let graph = tape.mean_rows(nodes);
        embeddings.push(Embeddings { nodes, graph });
    }
    Ok(EncodeOutput { embeddings, batch_stats, rows: total })
}

/// Encodes one instance with running statistics (the inference path).
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &PolicyVars,
    instance: &Instance,
    stats: &BnStats,
) -> Result<Embeddings> {
    let out = encode_batch(tape, cfg, vars, "", std::slice::from_ref(instance), BnMode::Eval(stats))?;
    Ok(out.embeddings[0])
}
