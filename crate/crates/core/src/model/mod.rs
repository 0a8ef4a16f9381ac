//! The attention policy: configuration, parameter layout, and the bridge
//! between stored parameters and tape variables.
//!
//! Parameter names double as the checkpoint layout, so registration order
//! and naming here are a compatibility contract:
//!
//! - `embed.w`, `embed.b`, and for depot problems `embed.depot.w/b`
//! - per encoder layer L: `encL.mha.{wq,wk,wv,wo}`, `encL.bn1.{w,b}`,
//!   `encL.ff.{w0,b0,w1,b1}`, `encL.bn2.{w,b}`
//! - decoder: `dec.glimpse.{wq,wk,wv,wo}`, `dec.out.{wq,wk}`
//! - TSP placeholders: `dec.placeholder.last`, `dec.placeholder.first`
//! - split-delivery adjustments: `dec.glimpse.{wdk,wdv}`, `dec.out.wdk`
//! - optional value head under `critic.` with the same encoder shape plus
//!   `critic.head.{w0,b0,w1,b1}`
//!
//! Weights are `out x in` so every projection is a `matmul_nt`. All weights
//! draw from Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); batchnorm affine
//! parameters start at identity (weight 1, bias 0).

pub mod decoder;
pub mod encoder;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::optim::{Grads, ParamStore};
use crate::problems::Problem;
use crate::tape::{BnBatch, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub problem: Problem,
    /// Node embedding width.
    pub d_h: usize,
    /// Encoder attention layers.
    pub n_layers: usize,
    /// Attention heads; per-head key/value width is d_h / n_heads.
    pub n_heads: usize,
    /// Feed-forward hidden width inside each encoder layer.
    pub d_ff: usize,
    /// Logit clip C: the output layer emits C * tanh(score).
    pub tanh_clip: f64,
    /// Hidden width of the value head.
    pub critic_hidden: usize,
}

impl ModelConfig {
    pub fn defaults(problem: Problem) -> Self {
        ModelConfig {
            problem,
            d_h: 128,
            n_layers: 3,
            n_heads: 8,
            d_ff: 512,
            tanh_clip: 10.0,
            critic_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of {} heads",
                self.d_h, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.critic_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.tanh_clip > 0.0) {
            return Err(Error::Config(format!("logit clip {} must be positive", self.tanh_clip)));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_h / self.n_heads
    }

    pub fn d_v(&self) -> usize {
        self.d_h / self.n_heads
    }

    /// Customer feature width: coordinates plus the problem's static
    /// per-node scalars.
    pub fn d_x(&self) -> usize {
        match self.problem {
            Problem::Tsp => 2,
            Problem::Cvrp | Problem::Sdvrp | Problem::Op => 3,
            Problem::Pctsp | Problem::Spctsp => 4,
        }
    }

    /// Decoder context width: graph plus last plus first embedding for the
    /// TSP; graph plus last embedding plus one state scalar elsewhere.
    pub fn ctx_dim(&self) -> usize {
        if self.problem == Problem::Tsp {
            3 * self.d_h
        } else {
            2 * self.d_h + 1
        }
    }
}

/// Running statistics for one batchnorm site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics for a whole encoder: two batchnorm sites per layer,
/// indexed 2L (after attention) and 2L+1 (after feed-forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub sites: Vec<BnRunning>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BnStats {
    pub fn new(cfg: &ModelConfig) -> Self {
        let fresh = || BnRunning { mean: vec![0.0; cfg.d_h], var: vec![1.0; cfg.d_h] };
        BnStats { sites: (0..2 * cfg.n_layers).map(|_| fresh()).collect() }
    }

    /// Folds one train-mode batch into the running estimates. The variance
    /// enters with the unbiased n/(n-1) correction when the population
    /// allows it.
    pub fn fold(&mut self, site: usize, batch: &BnBatch, rows: usize) {
        let run = &mut self.sites[site];
        let corr = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
        for (r, &b) in run.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in run.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * corr;
        }
    }

    /// Folds one batch per site, in site order, each computed over `rows`
    /// flattened rows.
    pub fn fold_all(&mut self, batches: &[BnBatch], rows: usize) -> Result<()> {
        if batches.len() != self.sites.len() {
            return Err(Error::Contract(format!(
                "{} batch statistics for {} sites",
                batches.len(),
                self.sites.len()
            )));
        }
        for (site, batch) in batches.iter().enumerate() {
            self.fold(site, batch, rows);
        }
        Ok(())
    }
}

fn register_encoder(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d_h = cfg.d_h;
    let d_qk = cfg.n_heads * cfg.d_k();
    let d_mv = cfg.n_heads * cfg.d_v();
    store.register_uniform(&format!("{prefix}embed.w"), d_h, cfg.d_x(), cfg.d_x(), rng)?;
    store.register_uniform(&format!("{prefix}embed.b"), 1, d_h, cfg.d_x(), rng)?;
    if cfg.problem.has_depot() {
        store.register_uniform(&format!("{prefix}embed.depot.w"), d_h, 2, 2, rng)?;
        store.register_uniform(&format!("{prefix}embed.depot.b"), 1, d_h, 2, rng)?;
    }
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}enc{l}");
        store.register_uniform(&format!("{p}.mha.wq"), d_qk, d_h, d_h, rng)?;
        store.register_uniform(&format!("{p}.mha.wk"), d_qk, d_h, d_h, rng)?;
        store.register_uniform(&format!("{p}.mha.wv"), d_mv, d_h, d_h, rng)?;
        store.register_uniform(&format!("{p}.mha.wo"), d_h, d_mv, d_mv, rng)?;
        store.register(&format!("{p}.bn1.w"), Array::full(1, d_h, 1.0))?;
        store.register(&format!("{p}.bn1.b"), Array::zeros(1, d_h))?;
        store.register_uniform(&format!("{p}.ff.w0"), cfg.d_ff, d_h, d_h, rng)?;
        store.register_uniform(&format!("{p}.ff.b0"), 1, cfg.d_ff, d_h, rng)?;
        store.register_uniform(&format!("{p}.ff.w1"), d_h, cfg.d_ff, cfg.d_ff, rng)?;
        store.register_uniform(&format!("{p}.ff.b1"), 1, d_h, cfg.d_ff, rng)?;
        store.register(&format!("{p}.bn2.w"), Array::full(1, d_h, 1.0))?;
        store.register(&format!("{p}.bn2.b"), Array::zeros(1, d_h))?;
    }
    Ok(())
}

/// Registers the full policy in canonical order.
pub fn register_policy(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d_h = cfg.d_h;
    let d_qk = cfg.n_heads * cfg.d_k();
    let d_mv = cfg.n_heads * cfg.d_v();
    register_encoder(store, "", cfg, rng)?;
    store.register_uniform("dec.glimpse.wq", d_qk, cfg.ctx_dim(), cfg.ctx_dim(), rng)?;
    store.register_uniform("dec.glimpse.wk", d_qk, d_h, d_h, rng)?;
    store.register_uniform("dec.glimpse.wv", d_mv, d_h, d_h, rng)?;
    store.register_uniform("dec.glimpse.wo", d_h, d_mv, d_mv, rng)?;
    store.register_uniform("dec.out.wq", d_h, d_h, d_h, rng)?;
    store.register_uniform("dec.out.wk", d_h, d_h, d_h, rng)?;
    if cfg.problem == Problem::Tsp {
        store.register_uniform("dec.placeholder.last", 1, d_h, d_h, rng)?;
        store.register_uniform("dec.placeholder.first", 1, d_h, d_h, rng)?;
    }
    if cfg.problem == Problem::Sdvrp {
        store.register_uniform("dec.glimpse.wdk", 1, d_qk, 1, rng)?;
        store.register_uniform("dec.glimpse.wdv", 1, d_mv, 1, rng)?;
        store.register_uniform("dec.out.wdk", 1, d_h, 1, rng)?;
    }
    Ok(())
}

/// Registers the value head: its own encoder plus a two-layer perceptron
/// from the mean node embedding to a scalar.
pub fn register_critic(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    register_encoder(store, "critic.", cfg, rng)?;
    let h = cfg.critic_hidden;
    store.register_uniform("critic.head.w0", h, cfg.d_h, cfg.d_h, rng)?;
    store.register_uniform("critic.head.b0", 1, h, cfg.d_h, rng)?;
    store.register_uniform("critic.head.w1", 1, h, h, rng)?;
    store.register_uniform("critic.head.b1", 1, 1, h, rng)?;
    Ok(())
}

/// A runnable policy: configuration, parameters, and the batchnorm running
/// statistics that eval-mode encoding needs. Training may register the
/// value head's parameters in the same store under `critic.`; its encoder
/// keeps separate running statistics owned by the trainer.
#[derive(Clone)]
pub struct Policy {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub stats: BnStats,
}

impl Policy {
    /// Fresh policy with parameters drawn from the seed's parameter stream.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        register_policy(&mut store, &cfg, &mut crate::rng::derive_rng(seed, &[crate::rng::STREAM_PARAMS]))?;
        Ok(Policy { cfg, store, stats: BnStats::new(&cfg) })
    }
}

/// Every stored parameter loaded onto a tape as a leaf, by name. Load once
/// per tape; forward passes look parameters up here, and after a backward
/// pass the gradients flow back out to a [`Grads`] keyed by the same names.
pub struct PolicyVars {
    vars: IndexMap<String, Var>,
}

impl PolicyVars {
    pub fn load(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut vars = IndexMap::with_capacity(store.len());
        for (name, p) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(p.value.clone()));
        }
        PolicyVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not loaded")))
    }

    /// Accumulates this tape's gradients into `grads`, in registration
    /// order. Parameters the root did not depend on contribute nothing.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut Grads) -> Result<()> {
        for (name, &var) in &self.vars {
            if let Some(g) = tape.grad(var) {
                grads.accumulate(name, g)?;
            }
        }
        Ok(())
    }
}
