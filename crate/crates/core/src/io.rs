//! On-disk formats: line-delimited instance datasets, binary training
//! checkpoints, evaluation reports, and history logs.
//!
//! Datasets are text so they diff and grep cleanly; one self-describing
//! object per line, numeric fields round-tripping exactly through the
//! shortest representation that recovers the same 64-bit value. Checkpoints
//! are binary so that save, load, save is byte-identical: parameter values,
//! optimizer moments, and running statistics are stored as raw
//! little-endian doubles in canonical registration order. Random streams
//! are derived from the config seed plus counters, so a checkpoint carries
//! sampler state implicitly in its epoch count and eval-set generation.
//!
//! All writes go to a temporary file in the target directory first and are
//! renamed into place, so readers never observe a half-written file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{register_critic, register_policy, BnRunning, BnStats, Policy};
use crate::optim::ParamStore;
use crate::problems::{Instance, PrizeMode, Problem};
use crate::rng::{derive_rng, STREAM_PARAMS};
use crate::train::{BaselineKind, EpochRecord, TrainConfig, Trainer};

/// Writes `bytes` to `path` atomically: a temporary sibling file is filled,
/// flushed, and renamed over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One dataset line. Mirrors [`Instance`] plus how it was generated; the
/// realized prizes of stochastic instances are stored under an explicit
/// `hidden_` name as a reminder that solvers may not read them up front.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    problem: Problem,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depot: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    demands: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    prizes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prize_mode: Option<PrizeMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    penalties: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_prize: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    hidden_real_prizes: Vec<f64>,
}

impl DatasetRecord {
    fn from_instance(inst: &Instance, seed: Option<u64>, prize_mode: Option<PrizeMode>) -> Self {
        let needs_prize = matches!(inst.problem, Problem::Pctsp | Problem::Spctsp);
        DatasetRecord {
            problem: inst.problem,
            n: inst.n(),
            seed,
            coords: inst.coords.clone(),
            depot: inst.depot,
            demands: inst.demands.clone(),
            capacity: inst.capacity,
            prizes: inst.prizes.clone(),
            prize_mode,
            penalties: inst.penalties.clone(),
            max_length: inst.max_length,
            min_prize: needs_prize.then_some(1.0),
            hidden_real_prizes: inst.real_prizes.clone(),
        }
    }

    fn into_instance(self) -> Result<Instance> {
        if self.n != self.coords.len() {
            return Err(Error::Format(format!(
                "record claims {} customers but carries {} coordinates",
                self.n,
                self.coords.len()
            )));
        }
        // Prizes are stored normalized, so the collection requirement is
        // always exactly one; any other stated minimum is unrepresentable.
        if let Some(mp) = self.min_prize {
            if mp != 1.0 {
                return Err(Error::Format(format!("unsupported minimum prize {mp}; prizes are normalized to a requirement of 1")));
            }
        }
        let inst = Instance {
            problem: self.problem,
            coords: self.coords,
            depot: self.depot,
            demands: self.demands,
            capacity: self.capacity,
            prizes: self.prizes,
            penalties: self.penalties,
            max_length: self.max_length,
            real_prizes: self.hidden_real_prizes,
        };
        inst.check()?;
        Ok(inst)
    }
}

/// Saves instances as line-delimited text, one object per line. `seed` and
/// `prize_mode` are recorded on every line when known, so a dataset can be
/// regenerated from its own header fields.
pub fn save_dataset(
    path: &Path,
    instances: &[Instance],
    seed: Option<u64>,
    prize_mode: Option<PrizeMode>,
) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        inst.check()?;
        let record = DatasetRecord::from_instance(inst, seed, prize_mode);
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Loads a line-delimited dataset, validating every instance.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path)?;
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}, line {}: {e}", path.display(), i + 1)))?;
        instances.push(record.into_instance()?);
    }
    Ok(instances)
}

/// Content hash of an instance, hex-encoded; keys oracle result caches.
pub fn instance_digest(inst: &Instance) -> String {
    let bytes = serde_json::to_vec(inst).expect("instances always serialize");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("writing to a string never fails");
    }
    hex
}

// ---------------------------------------------------------------------------
// History logs
// ---------------------------------------------------------------------------

/// Rewrites the whole history log, one record per line. Called once per
/// epoch; atomic, so a crash never leaves a torn log.
pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in history {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn load_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    let mut history = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}, line {}: {e}", path.display(), i + 1)))?;
        history.push(record);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"ARCP";
const CHECKPOINT_VERSION: u32 = 1;

/// Full training state at an epoch boundary. Everything a [`Trainer`] needs
/// to continue exactly where it stopped: parameters with their optimizer
/// moments, running statistics, the frozen comparison policy, the counters
/// that key the derived random streams, and the history so far.
#[derive(Clone)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub policy: Policy,
    pub critic_stats: Option<BnStats>,
    pub baseline: Option<Policy>,
    pub eval_generation: u64,
    pub exp_mean: Option<f64>,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            cfg: trainer.config().clone(),
            policy: trainer.policy().clone(),
            critic_stats: trainer.critic_stats().cloned(),
            baseline: trainer.baseline_policy().cloned(),
            eval_generation: trainer.eval_generation(),
            exp_mean: trainer.exp_mean(),
            epochs_done: trainer.epochs_done(),
            history: trainer.history().to_vec(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::from_parts(
            self.cfg,
            self.policy,
            self.critic_stats,
            self.baseline,
            self.eval_generation,
            self.exp_mean,
            self.epochs_done,
            self.history,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(&cfg);
        put_params(&mut out, &self.policy.store, true);
        put_stats(&mut out, &self.policy.stats);
        match &self.critic_stats {
            Some(stats) => {
                out.push(1);
                put_stats(&mut out, stats);
            }
            None => out.push(0),
        }
        match &self.baseline {
            Some(policy) => {
                out.push(1);
                // The frozen policy is never optimized, so its moments are
                // identically zero and only values are stored.
                put_params(&mut out, &policy.store, false);
                put_stats(&mut out, &policy.stats);
            }
            None => out.push(0),
        }
        put_u64(&mut out, self.eval_generation);
        put_opt_f64(&mut out, self.exp_mean);
        put_u64(&mut out, self.epochs_done as u64);
        put_u64(&mut out, self.history.len() as u64);
        for record in &self.history {
            put_u64(&mut out, record.epoch as u64);
            put_f64(&mut out, record.train_cost);
            put_f64(&mut out, record.val_cost);
            put_opt_f64(&mut out, record.val_gap);
            out.push(record.baseline_replaced as u8);
            put_f64(&mut out, record.seconds);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u64()? as usize;
        let cfg: TrainConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Format(format!("checkpoint configuration: {e}")))?;
        cfg.validate()?;

        let store = read_params(&mut r, true)?;
        check_layout(&store, &cfg, cfg.baseline == BaselineKind::Critic)?;
        let stats = read_stats(&mut r)?;
        check_stats(&stats, &cfg, "policy")?;
        let policy = Policy { cfg: cfg.model, store, stats };

        let critic_stats = if r.u8()? != 0 {
            let stats = read_stats(&mut r)?;
            check_stats(&stats, &cfg, "critic")?;
            Some(stats)
        } else {
            None
        };
        let baseline = if r.u8()? != 0 {
            let store = read_params(&mut r, false)?;
            check_layout(&store, &cfg, false)?;
            let stats = read_stats(&mut r)?;
            check_stats(&stats, &cfg, "baseline")?;
            Some(Policy { cfg: cfg.model, store, stats })
        } else {
            None
        };
        let eval_generation = r.u64()?;
        let exp_mean = read_opt_f64(&mut r)?;
        let epochs_done = r.u64()? as usize;
        let count = r.u64()? as usize;
        let mut history = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            history.push(EpochRecord {
                epoch: r.u64()? as usize,
                train_cost: r.f64()?,
                val_cost: r.f64()?,
                val_gap: read_opt_f64(&mut r)?,
                baseline_replaced: r.u8()? != 0,
                seconds: r.f64()?,
            });
        }
        r.finish()?;
        Ok(Checkpoint {
            cfg,
            policy,
            critic_stats,
            baseline,
            eval_generation,
            exp_mean,
            epochs_done,
            history,
        })
    }
}

/// Fails loudly when stored parameters do not match the layout the
/// configuration would register: same names, same order, same shapes.
fn check_layout(store: &ParamStore, cfg: &TrainConfig, with_critic: bool) -> Result<()> {
    let mut expected = ParamStore::new();
    let mut rng = derive_rng(0, &[STREAM_PARAMS]);
    register_policy(&mut expected, &cfg.model, &mut rng)?;
    if with_critic {
        register_critic(&mut expected, &cfg.model, &mut rng)?;
    }
    let mismatch = |detail: String| Err(Error::Format(format!("checkpoint does not match its configuration: {detail}")));
    if store.len() != expected.len() {
        return mismatch(format!("{} parameters stored, {} expected", store.len(), expected.len()));
    }
    for ((got_name, got), (want_name, want)) in store.iter().zip(expected.iter()) {
        if got_name != want_name {
            return mismatch(format!("parameter {got_name} where {want_name} belongs"));
        }
        if got.value.shape() != want.value.shape() {
            return mismatch(format!(
                "{got_name} has shape {:?}, expected {:?}",
                got.value.shape(),
                want.value.shape()
            ));
        }
    }
    Ok(())
}

fn check_stats(stats: &BnStats, cfg: &TrainConfig, which: &str) -> Result<()> {
    let sites = 2 * cfg.model.n_layers;
    if stats.sites.len() != sites {
        return Err(Error::Format(format!(
            "{which} statistics cover {} sites, expected {sites}",
            stats.sites.len()
        )));
    }
    for site in &stats.sites {
        if site.mean.len() != cfg.model.d_h || site.var.len() != cfg.model.d_h {
            return Err(Error::Format(format!("{which} statistics have the wrong width")));
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_opt_f64(out: &mut Vec<u8>, v: Option<f64>) {
    match v {
        Some(x) => {
            out.push(1);
            put_f64(out, x);
        }
        None => out.push(0),
    }
}

fn read_opt_f64(r: &mut ByteReader) -> Result<Option<f64>> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.f64()?)),
        other => Err(Error::Format(format!("invalid optional tag {other}"))),
    }
}

fn put_slice(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        put_f64(out, v);
    }
}

fn put_params(out: &mut Vec<u8>, store: &ParamStore, with_moments: bool) {
    put_u64(out, store.len() as u64);
    for (name, param) in store.iter() {
        put_u64(out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        let (rows, cols) = param.value.shape();
        put_u64(out, rows as u64);
        put_u64(out, cols as u64);
        put_slice(out, param.value.data());
        if with_moments {
            put_slice(out, param.m.data());
            put_slice(out, param.v.data());
            put_u64(out, param.t);
        }
    }
}

fn put_stats(out: &mut Vec<u8>, stats: &BnStats) {
    put_u64(out, stats.sites.len() as u64);
    for site in &stats.sites {
        put_u64(out, site.mean.len() as u64);
        put_slice(out, &site.mean);
        put_slice(out, &site.var);
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn str(&mut self) -> Result<&'a str> {
        let len = self.u64()? as usize;
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::Format("invalid name encoding".into()))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_params(r: &mut ByteReader, with_moments: bool) -> Result<ParamStore> {
    let count = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?.to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
            .ok_or_else(|| Error::Format(format!("parameter {name} has an implausible shape")))?;
        let value = crate::array::Array::from_vec(rows, cols, r.f64_vec(len)?)?;
        store.register(&name, value)?;
        if with_moments {
            let m = crate::array::Array::from_vec(rows, cols, r.f64_vec(len)?)?;
            let v = crate::array::Array::from_vec(rows, cols, r.f64_vec(len)?)?;
            let t = r.u64()?;
            let param = store.entry_mut(&name).expect("just registered");
            param.m = m;
            param.v = v;
            param.t = t;
        }
    }
    Ok(store)
}

fn read_stats(r: &mut ByteReader) -> Result<BnStats> {
    let count = r.u64()? as usize;
    let mut sites = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let width = r.u64()? as usize;
        if width.checked_mul(16).is_none_or(|b| b > r.buf.len()) {
            return Err(Error::Format("implausible statistics width".into()));
        }
        let mean = r.f64_vec(width)?;
        let var = r.f64_vec(width)?;
        sites.push(BnRunning { mean, var });
    }
    Ok(BnStats { sites })
}

// ---------------------------------------------------------------------------
// Evaluation reports
// ---------------------------------------------------------------------------

/// One evaluated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
}

/// Evaluation summary; aggregate fields are always derivable from the rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problem: Problem,
    pub method: String,
    pub decode_mode: String,
    pub sample_count: usize,
    pub mean_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_gap: Option<f64>,
    pub seconds: f64,
    pub rows: Vec<EvalRow>,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

impl EvalReport {
    /// Builds a report with aggregates computed from the rows. The mean gap
    /// appears only when every row carries one.
    pub fn from_rows(
        problem: Problem,
        method: &str,
        decode_mode: &str,
        sample_count: usize,
        rows: Vec<EvalRow>,
        seconds: f64,
    ) -> Self {
        let mean_cost = mean(rows.iter().map(|r| r.cost));
        let gaps: Option<Vec<f64>> = rows.iter().map(|r| r.gap).collect();
        let mean_gap = gaps.filter(|g| !g.is_empty()).map(|g| mean(g.into_iter()));
        EvalReport {
            problem,
            method: method.to_string(),
            decode_mode: decode_mode.to_string(),
            sample_count,
            mean_cost,
            mean_gap,
            seconds,
            rows,
        }
    }

    /// Verifies the aggregates against a recomputation from the rows.
    pub fn check(&self) -> Result<()> {
        let fresh = EvalReport::from_rows(
            self.problem,
            &self.method,
            &self.decode_mode,
            self.sample_count,
            self.rows.clone(),
            self.seconds,
        );
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        let gap_ok = match (self.mean_gap, fresh.mean_gap) {
            (Some(a), Some(b)) => same(a, b),
            (None, None) => true,
            _ => false,
        };
        if !same(self.mean_cost, fresh.mean_cost) || !gap_ok {
            return Err(Error::Format("report aggregates do not match their rows".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: EvalReport = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        report.check()?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::problems::generate_instance;
    use crate::rng::{derive_rng, STREAM_DATASET};

    fn sample_instances(problem: Problem, n: usize, count: usize, seed: u64) -> Vec<Instance> {
        let mode = (problem == Problem::Op).then_some(PrizeMode::Uniform);
        let mut rng = derive_rng(seed, &[STREAM_DATASET]);
        (0..count).map(|_| generate_instance(problem, n, mode, &mut rng).unwrap()).collect()
    }

    fn tiny_config(problem: Problem, baseline: BaselineKind) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_h: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                critic_hidden: 8,
                ..ModelConfig::defaults(problem)
            },
            n: 4,
            prize_mode: (problem == Problem::Op).then_some(PrizeMode::Uniform),
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 3,
            lr: 1e-3,
            lr_decay: None,
            alpha: 0.05,
            baseline,
            warmup: true,
            eval_set_size: 8,
            val_set_size: 8,
            seed: 11,
        }
    }

    #[test]
    fn datasets_round_trip_for_every_problem() {
        let dir = tempfile::tempdir().unwrap();
        for problem in Problem::ALL {
            let instances = sample_instances(problem, 7, 25, 3);
            let path = dir.path().join(format!("{problem}.jsonl"));
            let mode = (problem == Problem::Op).then_some(PrizeMode::Uniform);
            save_dataset(&path, &instances, Some(3), mode).unwrap();
            let loaded = load_dataset(&path).unwrap();
            assert_eq!(loaded, instances, "{problem} dataset changed across a round trip");
        }
    }

    #[test]
    fn dataset_files_are_reproducible_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let instances = sample_instances(Problem::Cvrp, 9, 40, 5);
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_dataset(&a, &instances, Some(5), None).unwrap();
        save_dataset(&b, &instances, Some(5), None).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn empty_dataset_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_dataset(&path, &[], Some(1), None).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_dataset_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");

        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

        let inst = &sample_instances(Problem::Pctsp, 5, 1, 7)[0];
        let mut record = serde_json::to_value(DatasetRecord::from_instance(inst, None, None)).unwrap();
        record["min_prize"] = serde_json::json!(2.0);
        fs::write(&path, format!("{record}\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

        let mut record = serde_json::to_value(DatasetRecord::from_instance(inst, None, None)).unwrap();
        record["n"] = serde_json::json!(99);
        fs::write(&path, format!("{record}\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

        let mut bad = inst.clone();
        bad.coords[0] = [1.5, 0.5];
        let record = serde_json::to_value(DatasetRecord::from_instance(&bad, None, None)).unwrap();
        fs::write(&path, format!("{record}\n")).unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let instances = sample_instances(Problem::Tsp, 6, 2, 9);
        let a = instance_digest(&instances[0]);
        assert_eq!(a.len(), 64);
        assert_eq!(a, instance_digest(&instances[0].clone()));
        assert_ne!(a, instance_digest(&instances[1]));
        let mut tweaked = instances[0].clone();
        tweaked.coords[0][0] = tweaked.coords[0][0].next_up();
        assert_ne!(a, instance_digest(&tweaked));
    }

    #[test]
    fn history_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let history = vec![
            EpochRecord {
                epoch: 1,
                train_cost: 4.25,
                val_cost: 4.1,
                val_gap: Some(0.07),
                baseline_replaced: false,
                seconds: 1.5,
            },
            EpochRecord {
                epoch: 2,
                train_cost: 4.05,
                val_cost: 3.9,
                val_gap: None,
                baseline_replaced: true,
                seconds: 1.4,
            },
        ];
        save_history(&path, &history).unwrap();
        assert_eq!(load_history(&path).unwrap(), history);
    }

    #[test]
    fn checkpoints_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        for (problem, baseline) in [
            (Problem::Tsp, BaselineKind::Rollout),
            (Problem::Op, BaselineKind::Critic),
            (Problem::Pctsp, BaselineKind::Exponential),
        ] {
            let mut trainer = Trainer::new(tiny_config(problem, baseline)).unwrap();
            trainer.run_epoch().unwrap();
            let checkpoint = Checkpoint::from_trainer(&trainer);
            let path = dir.path().join(format!("{problem}.ckpt"));
            checkpoint.save(&path).unwrap();
            let first = fs::read(&path).unwrap();
            let reloaded = Checkpoint::load(&path).unwrap();
            assert_eq!(reloaded.to_bytes().unwrap(), first, "{problem} checkpoint changed across a round trip");

            // Passing through a live trainer must also preserve the state.
            let revived = Checkpoint::from_trainer(&reloaded.into_trainer().unwrap());
            assert_eq!(revived.to_bytes().unwrap(), first, "{problem} checkpoint changed across a trainer rebuild");
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_training() {
        let mut cfg = tiny_config(Problem::Tsp, BaselineKind::Rollout);
        cfg.epochs = 2;
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        straight.run_epoch().unwrap();
        straight.run_epoch().unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run_epoch().unwrap();
        let bytes = Checkpoint::from_trainer(&first).to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer().unwrap();
        resumed.run_epoch().unwrap();

        let expect = Checkpoint::from_trainer(&straight).to_bytes().unwrap();
        let got = Checkpoint::from_trainer(&resumed).to_bytes().unwrap();
        assert_eq!(got.len(), expect.len());
        // Wall-clock fields differ between runs; compare with history
        // seconds zeroed on both sides.
        let mut a = Checkpoint::from_bytes(&expect).unwrap();
        let mut b = Checkpoint::from_bytes(&got).unwrap();
        for r in a.history.iter_mut().chain(b.history.iter_mut()) {
            r.seconds = 0.0;
        }
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn mismatched_configuration_fails_loudly() {
        let mut trainer = Trainer::new(tiny_config(Problem::Tsp, BaselineKind::Exponential)).unwrap();
        trainer.run_epoch().unwrap();
        let mut checkpoint = Checkpoint::from_trainer(&trainer);
        checkpoint.cfg.model.n_layers = 2;
        let bytes = checkpoint.to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("does not match"), "unexpected message: {msg}"),
            Err(other) => panic!("expected a format error, got {other}"),
            Ok(_) => panic!("mismatched configuration was accepted"),
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut trainer = Trainer::new(tiny_config(Problem::Tsp, BaselineKind::Exponential)).unwrap();
        trainer.run_epoch().unwrap();
        let bytes = Checkpoint::from_trainer(&trainer).to_bytes().unwrap();

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"BOGUS!!!"), Err(Error::Format(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Format(_))));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));
    }

    #[test]
    fn report_aggregates_match_rows() {
        let rows = vec![
            EvalRow { index: 0, cost: 4.0, gap: Some(0.10) },
            EvalRow { index: 1, cost: 5.0, gap: Some(0.20) },
            EvalRow { index: 2, cost: 6.0, gap: Some(0.00) },
        ];
        let report = EvalReport::from_rows(Problem::Tsp, "nn", "greedy", 1, rows.clone(), 0.25);
        assert_eq!(report.mean_cost, 5.0);
        assert_eq!(report.mean_gap, Some((0.10 + 0.20 + 0.00) / 3.0));
        report.check().unwrap();

        let mut tampered = report.clone();
        tampered.mean_cost = 4.9;
        assert!(tampered.check().is_err());

        let partial = EvalReport::from_rows(
            Problem::Tsp,
            "nn",
            "greedy",
            1,
            vec![EvalRow { index: 0, cost: 4.0, gap: None }, EvalRow { index: 1, cost: 5.0, gap: Some(0.2) }],
            0.1,
        );
        assert_eq!(partial.mean_gap, None);
        partial.check().unwrap();

        let empty = EvalReport::from_rows(Problem::Tsp, "nn", "greedy", 1, Vec::new(), 0.0);
        assert_eq!(empty.mean_cost, 0.0);
        assert_eq!(empty.mean_gap, None);
        empty.check().unwrap();
    }

    #[test]
    fn reports_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = EvalReport::from_rows(
            Problem::Op,
            "policy",
            "sample",
            1280,
            vec![EvalRow { index: 0, cost: -5.25, gap: Some(0.125) }],
            2.5,
        );
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);
    }
}
