//! Training loops (linear SSM scan, sequential GTF, GTF with parallel Newton
//! solves), Adam, the cosine learning-rate schedule, checkpoint/resume and
//! free-running generation.
//!
//! Configuration files are flat `key = value` text. Keys are the field names
//! of [`TrainConfig`]; nested solver and penalty fields are addressed as
//! `deer.<field>` and `reg.<field>`. Values are JSON scalars or arrays, bare
//! words are read as strings and `none` clears an optional field.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adjoint::{gtf_deer_gradient, gtf_sequential_gradient, lssm_forward, lssm_gradient};
use crate::deer::DeerConfig;
use crate::error::{Error, Result};
use crate::forcing::{ForcingPlan, Projector};
use crate::model::checkpoint::{Checkpoint, NamedArray};
use crate::model::{LssmDims, LssmParams, Model, Parameters, ShplrnnDims, ShplrnnParams};
use crate::numerics::{norm2, stream, DenseMatrix, Rng};
use crate::objective::{mar_penalty_lssm, shplrnn_penalties, LossBreakdown, RegConfig};
use crate::pscan::ScanMode;

/// Latent norm above which a free-running rollout counts as diverged.
pub const GENERATION_DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    LssmScan,
    GtfSequential,
    GtfDeer,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Rank of a factored `W`; `None` keeps it dense.
    pub rank: Option<usize>,
    pub kappa: f64,
    /// Data columns used for training; empty means all.
    pub observed: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Defaults to `seq_len / 2`.
    pub warmup_len: Option<usize>,
    pub alpha: f64,
    pub updates: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: Optimizer,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub seed: u64,
    /// Batch-level worker threads; 0 uses every core.
    pub workers: usize,
    /// Checkpoint interval in updates; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Upper bound on the working set of one update, in MiB.
    pub memory_budget_mb: usize,
    pub deer: DeerConfig,
    pub reg: RegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::GtfDeer,
            latent_dim: 5,
            hidden_dim: 50,
            rank: None,
            kappa: 0.9,
            observed: Vec::new(),
            batch_size: 16,
            seq_len: 256,
            warmup_len: None,
            alpha: 0.15,
            updates: 1000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            optimizer: Optimizer::Adam,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            seed: 0,
            workers: 0,
            checkpoint_every: 0,
            memory_budget_mb: 4096,
            deer: DeerConfig::default(),
            reg: RegConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
        return Value::Null;
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("{key}: '{}' is not a section", parts[..i].join(".")))?;
        if !obj.contains_key(*part) {
            return Err(format!("{key}: unknown key"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).unwrap();
    }
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), "none".into())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl TrainConfig {
    /// Applies `key = value` overrides on top of `self`. Every bad key or
    /// value is reported, one line each.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let mut problems = Vec::new();
        for (key, raw) in pairs {
            let key = key.trim();
            let mut trial = root.clone();
            if let Err(e) = set_path(&mut trial, key, parse_value(raw)) {
                problems.push(e);
                continue;
            }
            match serde_json::from_value::<TrainConfig>(trial.clone()) {
                Ok(_) => root = trial,
                Err(e) => problems.push(format!("{key} = {}: {e}", raw.trim())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(serde_json::from_value(root)?)
    }

    /// Parses flat `key = value` text (`#` starts a comment) over `base`.
    pub fn parse_onto(base: &Self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut problems = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k, v)),
                None => problems.push(format!("line {}: expected key = value", lineno + 1)),
            }
        }
        let merged = base.with_overrides(pairs);
        match merged {
            Ok(cfg) if problems.is_empty() => Ok(cfg),
            Ok(_) => Err(Error::Config(problems)),
            Err(Error::Config(more)) => {
                problems.extend(more);
                Err(Error::Config(problems))
            }
            Err(e) => Err(e),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(&Self::default(), text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, in the config file syntax.
    pub fn dump(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut pairs);
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup_len.unwrap_or(self.seq_len / 2)
    }

    /// Rough working-set estimate of one update in bytes.
    pub fn estimated_bytes(&self) -> usize {
        let m = self.latent_dim;
        let per_step = match self.mode {
            TrainMode::LssmScan => 6 * m + 2 * self.hidden_dim,
            TrainMode::GtfSequential => 4 * m,
            TrainMode::GtfDeer => match self.deer.jacobian_mode {
                crate::deer::JacobianMode::Full => m * m + 6 * m,
                crate::deer::JacobianMode::Diagonal => 7 * m,
            },
        };
        8 * self.batch_size * (self.seq_len + 1) * per_step
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.latent_dim == 0 {
            p.push("latent_dim must be >= 1".to_string());
        }
        if self.hidden_dim == 0 {
            p.push("hidden_dim must be >= 1".to_string());
        }
        if let Some(r) = self.rank {
            if self.mode == TrainMode::LssmScan {
                p.push("rank applies to the shPLRNN only".to_string());
            }
            if r == 0 || r > self.latent_dim.min(self.hidden_dim) {
                p.push(format!("rank {r} must lie in 1..=min(latent_dim, hidden_dim)"));
            }
        }
        if !(0.0..1.0).contains(&self.kappa) {
            p.push(format!("kappa must lie in [0, 1) (got {})", self.kappa));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".to_string());
        }
        if self.seq_len == 0 {
            p.push("seq_len must be >= 1".to_string());
        }
        if self.effective_warmup() >= self.seq_len {
            p.push(format!(
                "warmup_len {} must be < seq_len {}",
                self.effective_warmup(),
                self.seq_len
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            p.push(format!("alpha must lie in [0, 1] (got {})", self.alpha));
        }
        if self.updates == 0 {
            p.push("updates must be >= 1".to_string());
        }
        if !(self.lr_start > 0.0) {
            p.push(format!("lr_start must be > 0 (got {})", self.lr_start));
        }
        if !(self.lr_end >= 0.0) {
            p.push(format!("lr_end must be >= 0 (got {})", self.lr_end));
        }
        for (i, b) in self.adam_betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                p.push(format!("adam_betas[{i}] must lie in [0, 1) (got {b})"));
            }
        }
        if !(self.adam_eps > 0.0) {
            p.push(format!("adam_eps must be > 0 (got {})", self.adam_eps));
        }
        if self.estimated_bytes() > self.memory_budget_mb << 20 {
            p.push(format!(
                "batch_size x seq_len needs ~{} MiB, above memory_budget_mb = {}",
                self.estimated_bytes() >> 20,
                self.memory_budget_mb
            ));
        }
        for r in [self.deer.validate(), self.reg.validate(self.latent_dim)] {
            if let Err(Error::Config(more)) = r {
                p.extend(more);
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Fresh model for observation width `obs_dim`.
    pub fn init_model(&self, obs_dim: usize) -> Result<Model> {
        let mut rng = stream(self.seed, 0);
        Ok(match self.mode {
            TrainMode::LssmScan => Model::Lssm(LssmParams::init(
                LssmDims {
                    latent: self.latent_dim,
                    hidden: self.hidden_dim,
                    obs: obs_dim,
                    inputs: 0,
                    m_reg: self.reg.m_reg,
                },
                self.kappa,
                &mut rng,
            )?),
            _ => Model::Shplrnn(ShplrnnParams::init(
                ShplrnnDims {
                    latent: self.latent_dim,
                    hidden: self.hidden_dim,
                    obs: obs_dim,
                    inputs: 0,
                    rank: self.rank,
                    m_reg: self.reg.m_reg,
                },
                self.kappa,
                &mut rng,
            )?),
        })
    }

    /// The training columns of `data`.
    pub fn select_observed(&self, data: &DenseMatrix) -> Result<DenseMatrix> {
        if self.observed.is_empty() {
            return Ok(data.clone());
        }
        if let Some(c) = self.observed.iter().find(|c| **c >= data.cols()) {
            return Err(Error::InvalidArgument(format!(
                "observed column {c} out of range for {} columns",
                data.cols()
            )));
        }
        Ok(DenseMatrix::from_fn(data.rows(), self.observed.len(), |r, c| {
            data[(r, self.observed[c])]
        }))
    }
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `updates`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let frac = step.min(cfg.updates) as f64 / cfg.updates.max(1) as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub starts: Vec<usize>,
    /// One `(T + 1) × N` window per start.
    pub sequences: Vec<DenseMatrix>,
}

/// `batch_size` windows `x_{s … s+T}` with uniform, independent starts.
pub fn sample_batch(data: &DenseMatrix, batch_size: usize, seq_len: usize, rng: &mut Rng) -> Result<Batch> {
    if seq_len + 1 > data.rows() {
        return Err(Error::InvalidArgument(format!(
            "trajectory of {} rows is too short for windows of {} rows",
            data.rows(),
            seq_len + 1
        )));
    }
    let n_starts = data.rows() - seq_len;
    let n = data.cols();
    let starts: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n_starts)).collect();
    let sequences = starts
        .iter()
        .map(|&s| {
            DenseMatrix::from_vec(seq_len + 1, n, data.data()[s * n..(s + seq_len + 1) * n].to_vec())
                .expect("window shape")
        })
        .collect();
    Ok(Batch { starts, sequences })
}

/// Adam with bias-corrected moments on a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, betas: [f64; 2], eps: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Mean Newton iterations over the batch (1 for the non-Newton modes).
    pub deer_iters: f64,
    pub wall_ns: u64,
    pub converged: bool,
}

pub const LOG_HEADER: &str = "update,loss,mse,mar,l1,l2,lr,deer_iters,wall_ns,converged";

impl UpdateRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.loss.total,
            self.loss.mse,
            self.loss.mar,
            self.loss.l1,
            self.loss.l2,
            self.lr,
            self.deer_iters,
            self.wall_ns,
            self.converged
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<UpdateRecord>,
    /// Updates skipped because a forward solve did not converge.
    pub divergence_events: Vec<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss.total).collect()
    }

    pub fn deer_iters(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.deer_iters).collect()
    }

    pub fn wall_ns(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.wall_ns).collect()
    }
}

struct SeqResult<P> {
    grad: P,
    mse: f64,
    iterations: usize,
    converged: bool,
}

fn mean_grad<P: Parameters>(results: &[SeqResult<P>]) -> P {
    let mut total = results[0].grad.zeros_like();
    for r in results {
        total.add_scaled(1.0, &r.grad);
    }
    total.scale(1.0 / results.len() as f64);
    total
}

/// Owns the model, optimizer state and update counter of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub update: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let wants_lssm = cfg.mode == TrainMode::LssmScan;
        if wants_lssm != matches!(model, Model::Lssm(_)) {
            return Err(Error::Config(vec![format!(
                "mode {:?} does not match the model family",
                cfg.mode
            )]));
        }
        if model.latent_dim() != cfg.latent_dim {
            return Err(Error::Config(vec![format!(
                "latent_dim = {} but the model has {}",
                cfg.latent_dim,
                model.latent_dim()
            )]));
        }
        let n = match &model {
            Model::Shplrnn(p) => p.num_values(),
            Model::Lssm(p) => p.num_values(),
        };
        let adam = Adam::new(n, cfg.adam_betas, cfg.adam_eps);
        Ok(Self {
            model,
            cfg,
            adam,
            update: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.model.clone(), cfg)?;
        t.update = ckpt.step as usize;
        let find = |name: &str| ckpt.extra.iter().find(|a| a.name == name);
        if let (Some(m), Some(v), Some(step)) = (find("adam_m"), find("adam_v"), find("adam_t")) {
            if m.values.len() != t.adam.m.len() || v.values.len() != t.adam.v.len() {
                return Err(Error::format("checkpoint", "optimizer state size mismatch"));
            }
            t.adam.m = m.values.clone();
            t.adam.v = v.values.clone();
            t.adam.t = step.values.first().copied().unwrap_or(0.0) as u64;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let arr = |name: &str, values: Vec<f64>| NamedArray {
            name: name.to_string(),
            rows: 1,
            cols: values.len(),
            values,
        };
        Checkpoint {
            model: self.model.clone(),
            kappa: self.cfg.kappa,
            seed: self.cfg.seed,
            step: self.update as u64,
            extra: vec![
                arr("adam_m", self.adam.m.clone()),
                arr("adam_v", self.adam.v.clone()),
                arr("adam_t", vec![self.adam.t as f64]),
            ],
        }
    }

    fn scan_mode(&self) -> ScanMode {
        self.cfg.deer.scan_mode()
    }

    /// One parameter update on a batch drawn from `data` (already restricted
    /// to the observed columns).
    pub fn step(&mut self, data: &DenseMatrix) -> Result<UpdateRecord> {
        let start = Instant::now();
        let update = self.update;
        let mut rng = stream(self.cfg.seed, 1 + update as u64);
        let batch = sample_batch(data, self.cfg.batch_size, self.cfg.seq_len, &mut rng)?;
        let lr = lr_at(update, &self.cfg);
        let warmup = self.cfg.effective_warmup();
        let reg = &self.cfg.reg;

        let (loss, iters, converged, flat_grad) = match &self.model {
            Model::Shplrnn(p) => {
                let projector = Projector::new(&p.readout, self.cfg.alpha)?;
                let results: Vec<SeqResult<ShplrnnParams>> = batch
                    .sequences
                    .par_iter()
                    .map(|x| {
                        let g = match self.cfg.mode {
                            TrainMode::GtfDeer => gtf_deer_gradient(p, &projector, x, warmup, None, &self.cfg.deer)?,
                            _ => gtf_sequential_gradient(p, &projector, x, warmup, None)?,
                        };
                        Ok(SeqResult {
                            grad: g.bundle.grad,
                            mse: g.bundle.loss_value,
                            iterations: g.iterations,
                            converged: g.converged,
                        })
                    })
                    .collect::<Result<_>>()?;
                let mut grad = mean_grad(&results);
                let (mar, l1, l2) = shplrnn_penalties(p, reg, Some(&mut grad))?;
                let mse = results.iter().map(|r| r.mse).sum::<f64>() / results.len() as f64;
                let iters = results.iter().map(|r| r.iterations as f64).sum::<f64>() / results.len() as f64;
                let conv = results.iter().all(|r| r.converged);
                (LossBreakdown::new(mse, mar, l1, l2), iters, conv, grad.to_flat())
            }
            Model::Lssm(p) => {
                let mode = self.scan_mode();
                let results: Vec<SeqResult<LssmParams>> = batch
                    .sequences
                    .par_iter()
                    .map(|x| {
                        let pass = lssm_gradient(p, x, warmup, None, mode)?;
                        Ok(SeqResult {
                            grad: pass.bundle.grad,
                            mse: pass.bundle.loss_value,
                            iterations: 1,
                            converged: true,
                        })
                    })
                    .collect::<Result<_>>()?;
                let mut grad = mean_grad(&results);
                let mar = mar_penalty_lssm(p, reg, Some(&mut grad));
                let mse = results.iter().map(|r| r.mse).sum::<f64>() / results.len() as f64;
                (LossBreakdown::new(mse, mar, 0.0, 0.0), 1.0, true, grad.to_flat())
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { update });
        }
        if converged {
            let mut theta = match &self.model {
                Model::Shplrnn(p) => p.to_flat(),
                Model::Lssm(p) => p.to_flat(),
            };
            self.adam.step(&mut theta, &flat_grad, lr);
            match &mut self.model {
                Model::Shplrnn(p) => p.set_flat(&theta),
                Model::Lssm(p) => p.set_flat(&theta),
            }
        }
        self.update += 1;
        Ok(UpdateRecord {
            update,
            loss,
            lr,
            deer_iters: iters,
            wall_ns: start.elapsed().as_nanos() as u64,
            converged,
        })
    }

    /// Runs until `cfg.updates`. With `out_dir`, writes `train_log.csv`,
    /// `config.txt` and `checkpoint.bin`; a non-finite loss saves the last
    /// good state to `checkpoint_last_good.bin` before returning the error.
    pub fn run(&mut self, data: &DenseMatrix, out_dir: Option<&Path>) -> Result<TrainReport> {
        let data = self.cfg.select_observed(data)?;
        if data.cols() != self.model.obs_dim() {
            return Err(Error::shape(format!(
                "data has {} columns, model expects {}",
                data.cols(),
                self.model.obs_dim()
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::Pool(e.to_string()))?;
        pool.install(|| self.run_inner(&data, out_dir))
    }

    fn run_inner(&mut self, data: &DenseMatrix, out_dir: Option<&Path>) -> Result<TrainReport> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.txt"), self.cfg.dump())?;
                let path = dir.join("train_log.csv");
                let resume = self.update > 0 && path.exists();
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(resume)
                    .truncate(!resume)
                    .open(&path)?;
                let mut w = BufWriter::new(file);
                if !resume {
                    writeln!(w, "{LOG_HEADER}")?;
                }
                Some(w)
            }
            None => None,
        };
        let ckpt_path = out_dir.map(|d| d.join("checkpoint.bin"));
        let mut report = TrainReport {
            records: Vec::new(),
            divergence_events: Vec::new(),
            checkpoint_path: None,
        };
        while self.update < self.cfg.updates {
            let rec = match self.step(data) {
                Ok(r) => r,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(dir.join("checkpoint_last_good.bin"))?;
                    }
                    if let Some(w) = log.as_mut() {
                        w.flush()?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if !rec.converged {
                report.divergence_events.push(rec.update);
            }
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", rec.csv_row())?;
            }
            report.records.push(rec);
            if let Some(path) = &ckpt_path {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.update.is_multiple_of(every) {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(path) = ckpt_path {
            self.checkpoint().save(&path)?;
            report.checkpoint_path = Some(path);
        }
        Ok(report)
    }
}

/// Fresh model from `cfg`, trained on `data`.
pub fn train(data: &DenseMatrix, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(Model, TrainReport)> {
    let obs = if cfg.observed.is_empty() {
        data.cols()
    } else {
        cfg.observed.len()
    };
    let mut trainer = Trainer::new(cfg.init_model(obs)?, cfg.clone())?;
    let report = trainer.run(data, out_dir)?;
    Ok((trainer.model, report))
}

/// `(B, T)` pairs with `B·T = product` for every power-of-two `T` in range.
pub fn constant_product_grid(product: usize, t_min: usize, t_max: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = t_min.max(1).next_power_of_two();
    while t <= t_max.min(product) {
        if product.is_multiple_of(t) {
            out.push((product / t, t));
        }
        t *= 2;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Generated observations; truncated at divergence.
    pub observations: DenseMatrix,
    pub final_state: Vec<f64>,
    /// Step at which the latent norm left the finite range.
    pub diverged_at: Option<usize>,
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Latent state aligned with the sample after `history`: the shPLRNN is
/// fully forced through the history, the linear SSM is fed the data
/// through its input matrix.
pub fn warm_start(model: &Model, history: &DenseMatrix) -> Result<Vec<f64>> {
    if history.rows() == 0 {
        return Err(Error::InvalidArgument("warm-up history is empty".into()));
    }
    if history.cols() != model.obs_dim() {
        return Err(Error::shape("warm-up history width differs from the model's N"));
    }
    match model {
        Model::Shplrnn(p) => {
            let projector = Projector::new(&p.readout, 1.0)?;
            let plan = ForcingPlan::new(projector, history, history.rows())?;
            let z = crate::deer::sequential_rollout(p, &plan, plan.targets.row(0), None)?;
            let last = history.rows() - 1;
            let forced = crate::forcing::force_state(&plan, z.row(last), last);
            Ok(p.step(&forced, None))
        }
        Model::Lssm(p) => {
            let mut padded = DenseMatrix::zeros(history.rows() + 1, history.cols());
            padded.data_mut()[..history.data().len()].copy_from_slice(history.data());
            let z = lssm_forward(p, &padded, None, ScanMode::Sequential)?;
            Ok(z.row(history.rows()).to_vec())
        }
    }
}

/// Observations `G(z_first), G(F(z_first)), …`, `n_steps` rows.
pub fn generate_from(model: &Model, z_first: &[f64], n_steps: usize) -> Rollout {
    let n = model.obs_dim();
    let mut obs = Vec::with_capacity(n_steps * n);
    let mut z = z_first.to_vec();
    let mut diverged_at = None;
    for k in 0..n_steps {
        if k > 0 {
            z = model.free_step(&z, None);
        }
        let norm = norm2(&z);
        if !(norm <= GENERATION_DIVERGENCE_NORM) {
            diverged_at = Some(k);
            break;
        }
        obs.extend(model.readout(&z));
    }
    let rows = obs.len() / n.max(1);
    Rollout {
        observations: DenseMatrix::from_vec(rows, n, obs).expect("rollout shape"),
        final_state: z,
        diverged_at,
    }
}

/// `n_steps` unforced steps from `z0`; row `k` is `G(F^{k+1}(z0))`.
pub fn generate(model: &Model, z0: &[f64], n_steps: usize) -> Rollout {
    generate_from(model, &model.free_step(z0, None), n_steps)
}

/// Warm-up on `history`, then `n_steps` predictions of the following samples.
pub fn generate_after_warmup(model: &Model, history: &DenseMatrix, n_steps: usize) -> Result<Rollout> {
    Ok(generate_from(model, &warm_start(model, history)?, n_steps))
}

/// Writes a rollout as CSV with generic column names.
pub fn write_rollout_csv(path: impl AsRef<Path>, rollout: &Rollout) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = rollout.observations.cols();
    let header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..rollout.observations.rows() {
        let row: Vec<String> = rollout.observations.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deer::JacobianMode;
    use crate::systems::{integrate, OdeSpec, Standardization};

    fn lorenz_data(rows: usize) -> DenseMatrix {
        let run = integrate(&OdeSpec::lorenz63(), &[1.0, 1.0, 20.0], 0.0, rows + 500).unwrap();
        let tail = DenseMatrix::from_fn(rows, 3, |r, c| run.states[(r + 500, c)]);
        Standardization::fit(&tail).apply(&tail)
    }

    fn small_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            latent_dim: 4,
            hidden_dim: 8,
            batch_size: 4,
            seq_len: 64,
            warmup_len: Some(16),
            updates: 20,
            lr_start: 1e-3,
            lr_end: 1e-4,
            workers: 1,
            reg: RegConfig {
                m_reg: 1,
                ..RegConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            lr_start: 5e-5,
            lr_end: 1e-6,
            updates: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 5e-5);
        assert!((lr_at(1000, &cfg) - 1e-6).abs() < 1e-20);
        assert!((lr_at(500, &cfg) - 2.55e-5).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=1000 {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_matches_hand_computed_steps() {
        let mut adam = Adam::new(1, [0.9, 0.999], 1e-8);
        let mut theta = [1.0];
        let grads = [0.5, -0.2, 0.1];
        let lr = 0.1;
        // reference recurrence written out
        let (mut m, mut v, mut th) = (0.0_f64, 0.0_f64, 1.0_f64);
        for (k, g) in grads.iter().enumerate() {
            adam.step(&mut theta, &[*g], lr);
            let t = (k + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            th -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((theta[0] - th).abs() < 1e-15);
        }
        // first step moves by lr·sign(g) up to eps
        let mut a = Adam::new(1, [0.9, 0.999], 1e-8);
        let mut x = [0.0];
        a.step(&mut x, &[3.0], 0.01);
        assert!((x[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn full_window_batch_and_determinism() {
        let data = DenseMatrix::from_fn(50, 2, |r, c| (r * 2 + c) as f64);
        let b = sample_batch(&data, 1, 49, &mut stream(3, 1)).unwrap();
        assert_eq!(b.starts, vec![0]);
        assert_eq!(b.sequences[0], data);
        let x = sample_batch(&data, 8, 10, &mut stream(3, 2)).unwrap();
        let y = sample_batch(&data, 8, 10, &mut stream(3, 2)).unwrap();
        assert_eq!(x, y);
        assert!(sample_batch(&data, 1, 50, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn batch_starts_are_uniform() {
        let data = DenseMatrix::zeros(20, 1);
        // 10 valid starts
        let b = sample_batch(&data, 20_000, 10, &mut stream(11, 0)).unwrap();
        let mut counts = [0usize; 10];
        b.starts.iter().for_each(|s| counts[*s] += 1);
        let expected = 2000.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, 99.9% quantile ≈ 27.9
        assert!(chi2 < 27.9, "chi2 {chi2}");
    }

    #[test]
    fn config_round_trip_and_overrides() {
        let cfg = small_cfg(TrainMode::GtfDeer);
        let text = cfg.dump();
        assert!(text.contains("deer.tolerance = "));
        assert!(text.contains("reg.lambda_mar = "));
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
        let over = cfg
            .with_overrides([
                ("mode", "gtf_sequential"),
                ("deer.jacobian_mode", "diagonal"),
                ("rank", "2"),
            ])
            .unwrap();
        assert_eq!(over.mode, TrainMode::GtfSequential);
        assert_eq!(over.deer.jacobian_mode, JacobianMode::Diagonal);
        assert_eq!(over.rank, Some(2));
        assert_eq!(over.with_overrides([("rank", "none")]).unwrap().rank, None);
    }

    #[test]
    fn config_errors_are_listed_per_field() {
        let text = "mode = nonsense\nbogus = 1\nalpha = 0.3\nseq_len = -4\nno equals sign\n";
        match TrainConfig::parse(text) {
            Err(Error::Config(p)) => {
                assert_eq!(p.len(), 4, "{p:?}");
                assert!(p.iter().any(|s| s.contains("bogus")));
                assert!(p.iter().any(|s| s.starts_with("mode")));
                assert!(p.iter().any(|s| s.starts_with("seq_len")));
                assert!(p.iter().any(|s| s.contains("line 5")));
            }
            other => panic!("{other:?}"),
        }
        let bad = TrainConfig {
            alpha: 1.5,
            warmup_len: Some(300),
            seq_len: 256,
            adam_eps: 0.0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn warmup_defaults_to_half() {
        let cfg = TrainConfig {
            seq_len: 300,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_warmup(), 150);
    }

    #[test]
    fn memory_budget_is_enforced() {
        let cfg = TrainConfig {
            batch_size: 1 << 12,
            seq_len: 1 << 15,
            latent_dim: 64,
            memory_budget_mb: 1024,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sequential_and_deer_modes_agree() {
        let data = lorenz_data(2000);
        let mut seq_cfg = small_cfg(TrainMode::GtfSequential);
        seq_cfg.deer.tolerance = 1e-11;
        let mut deer_cfg = seq_cfg.clone();
        deer_cfg.mode = TrainMode::GtfDeer;
        let (_, a) = train(&data, &seq_cfg, None).unwrap();
        let (_, b) = train(&data, &deer_cfg, None).unwrap();
        for (x, y) in a.losses().iter().zip(b.losses()) {
            assert!((x - y).abs() <= 1e-8 * x.abs(), "{x} vs {y}");
        }
        assert!(b.records.iter().all(|r| r.converged));
    }

    #[test]
    fn lssm_training_reduces_loss() {
        let data = lorenz_data(3000);
        let mut cfg = small_cfg(TrainMode::LssmScan);
        cfg.updates = 150;
        cfg.lr_start = 5e-3;
        let (_, rep) = train(&data, &cfg, None).unwrap();
        let l = rep.losses();
        let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn gtf_training_reduces_loss() {
        let data = lorenz_data(3000);
        let mut cfg = small_cfg(TrainMode::GtfDeer);
        cfg.updates = 150;
        cfg.lr_start = 5e-3;
        let (_, rep) = train(&data, &cfg, None).unwrap();
        let l = rep.losses();
        let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn resume_from_checkpoint_is_bitwise_identical() {
        let data = lorenz_data(1500);
        let cfg = small_cfg(TrainMode::GtfDeer);
        let dir = tempfile::tempdir().unwrap();
        let (_, full) = train(&data, &cfg, None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.checkpoint_every = 10;
        let mut t = Trainer::new(half_cfg.init_model(3).unwrap(), half_cfg.clone()).unwrap();
        for _ in 0..10 {
            t.step(&data).unwrap();
        }
        t.checkpoint().save(dir.path().join("c.bin")).unwrap();
        let ck = Checkpoint::load(dir.path().join("c.bin")).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck, half_cfg).unwrap();
        let rest = resumed.run(&data, Some(dir.path())).unwrap();
        let tail: Vec<u64> = rest.losses().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = full.losses()[10..].iter().map(|v| v.to_bits()).collect();
        assert_eq!(tail, want);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(log.lines().count(), 11);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let data = lorenz_data(1500);
        let mut cfg = small_cfg(TrainMode::GtfDeer);
        cfg.updates = 5;
        let (_, a) = train(&data, &cfg, None).unwrap();
        cfg.workers = 3;
        let (_, b) = train(&data, &cfg, None).unwrap();
        assert_eq!(a.losses(), b.losses());
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let mut data = lorenz_data(500);
        data.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        let cfg = small_cfg(TrainMode::GtfSequential);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(cfg.init_model(3).unwrap(), cfg).unwrap();
        let err = t.run(&data, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { update: 0 }));
        assert!(dir.path().join("checkpoint_last_good.bin").exists());
    }

    #[test]
    fn mode_must_match_model_family() {
        let cfg = small_cfg(TrainMode::LssmScan);
        let model = small_cfg(TrainMode::GtfDeer).init_model(3).unwrap();
        assert!(Trainer::new(model, cfg).is_err());
    }

    #[test]
    fn constant_product_sweep_grid() {
        let g = constant_product_grid(1 << 15, 128, 1 << 15);
        assert_eq!(g.first(), Some(&(256, 128)));
        assert_eq!(g.last(), Some(&(1, 32768)));
        assert_eq!(g.len(), 9);
        assert!(g.iter().all(|(b, t)| b * t == 1 << 15));
    }

    #[test]
    fn mar_limit_generation_is_constant() {
        let mut p = ShplrnnParams::zeros(ShplrnnDims {
            latent: 3,
            hidden: 4,
            obs: 3,
            inputs: 0,
            rank: None,
            m_reg: 0,
        });
        p.a_raw = vec![40.0; 3];
        p.readout = DenseMatrix::identity(3);
        let model = Model::Shplrnn(p);
        let r = generate(&model, &[0.3, -1.0, 2.0], 50);
        for k in 0..50 {
            for (a, b) in r.observations.row(k).iter().zip([0.3, -1.0, 2.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lssm_generation_equals_equivalent_shplrnn() {
        let mut rng = stream(5, 5);
        let p = LssmParams::init(
            LssmDims {
                latent: 4,
                hidden: 6,
                obs: 2,
                inputs: 0,
                m_reg: 0,
            },
            0.5,
            &mut rng,
        )
        .unwrap();
        let eq = p.generation_map();
        let mut z = vec![0.1, -0.2, 0.3, 0.05];
        let r = generate(&Model::Lssm(p.clone()), &z, 30);
        for k in 0..30 {
            z = eq.step(&z, None);
            let x = p.readout(&z);
            for (a, b) in r.observations.row(k).iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergent_rollout_is_truncated_and_flagged() {
        let mut p = ShplrnnParams::zeros(ShplrnnDims {
            latent: 2,
            hidden: 2,
            obs: 2,
            inputs: 0,
            rank: None,
            m_reg: 0,
        });
        p.a_raw = vec![5.0; 2];
        p.readout = DenseMatrix::identity(2);
        if let crate::model::Connectivity::Dense(w) = &mut p.w {
            *w = DenseMatrix::identity(2).scaled(2.0);
        }
        p.v = DenseMatrix::identity(2);
        let r = generate(&Model::Shplrnn(p), &[1.0, 1.0], 1000);
        assert!(r.diverged());
        assert!(r.observations.rows() < 1000);
        assert!(r.observations.is_finite());
    }

    #[test]
    fn shplrnn_warm_start_hits_last_target() {
        let data = lorenz_data(100);
        // M = N: the α = 1 forcing pins every latent coordinate
        let mut cfg = small_cfg(TrainMode::GtfDeer);
        cfg.latent_dim = 3;
        let model = cfg.init_model(3).unwrap();
        let history = DenseMatrix::from_fn(20, 3, |r, c| data[(r, c)]);
        let z = warm_start(&model, &history).unwrap();
        if let Model::Shplrnn(p) = &model {
            let pinv = crate::numerics::pinv(&p.readout, 1e-12).unwrap();
            let want = p.step(&pinv.matvec(history.row(19)), None);
            for (a, b) in z.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
