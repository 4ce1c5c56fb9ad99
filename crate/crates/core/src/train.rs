//! Desk-scale training runs and learning-rate sweeps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperp::{self, Group, LayerDims, Scheme, TransferAnchor};
use crate::linalg::{frobenius_norm, Mat};
use crate::model::{build_params, Batch, ModelConfig, ModelGraph, ParamSet};
use crate::optim::{lr_schedule, muonh_step_decayed, OptimConfig, OptimizerKind, OptimizerState};
use crate::scalefit::{fit_quadratic_loglr, QuadFit, SweepPoint};
use crate::stability::StabilityReport;

/// Fraction of the token stream held out for validation (taken from the end).
pub const VALIDATION_FRACTION: f64 = 0.02;

/// Parameter whose effective learning rate is reported in logs.
pub const REFERENCE_PARAM: &str = "layers.0.attn.q";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// A seeded cycle of `period` distinct tokens repeated to `length`; each
    /// token determines its successor. With `noise > 0` each position is
    /// independently replaced by a uniform random token at that rate.
    Copy {
        period: usize,
        length: usize,
        #[serde(default)]
        noise: f64,
    },
    /// Raw bytes, one token per byte.
    Bytes { path: PathBuf },
    /// Whitespace-separated non-negative integers.
    Ints { path: PathBuf },
}

/// Optimizer per parameter group; unset groups follow the scheme default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerAssignment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unembedding: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_vector: Option<OptimizerKind>,
}

impl OptimizerAssignment {
    pub fn resolve(&self, scheme: Scheme, group: Group) -> OptimizerKind {
        let default = match (scheme, group) {
            (Scheme::HyperP, Group::Hidden) => OptimizerKind::MuonH,
            (Scheme::HyperP, Group::Unembedding) => OptimizerKind::AdamH,
            (_, Group::Hidden) => OptimizerKind::Muon,
            _ => OptimizerKind::AdamW,
        };
        let chosen = match group {
            Group::Hidden => self.hidden,
            Group::Unembedding => self.unembedding,
            Group::EmbeddingVector => self.embedding_vector,
        };
        chosen.unwrap_or(default)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub anchor: TransferAnchor,
    #[serde(default)]
    pub optimizers: OptimizerAssignment,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Training tokens `T`.
    pub tokens: u64,
    /// Tokens per step `B`; a multiple of `seq_len`.
    pub batch_tokens: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Base weight decay, scaled per group by the scheme. Independent (per
    /// step) for Muon, η-scaled for AdamW.
    #[serde(default)]
    pub weight_decay: f64,
    /// Optional `η·λ` decay on MuonH parameters before re-projection.
    #[serde(default)]
    pub sphere_weight_decay: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Include wall-clock milliseconds in log records.
    #[serde(default = "default_true")]
    pub log_wall_time: bool,
}

fn default_log_interval() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Copy-task configuration at desk scale.
    pub fn desk_copy(depth: usize, scheme: Scheme) -> Self {
        let model = ModelConfig {
            scheme,
            vocab: 64,
            context: 32,
            ..ModelConfig::desk(depth)
        };
        Self {
            model,
            anchor: TransferAnchor {
                eta0: 0.02,
                d0: depth,
                t0: 200.0 * 256.0,
                b0: 256.0,
            },
            optimizers: OptimizerAssignment::default(),
            optim: OptimConfig::default(),
            tokens: 200 * 256,
            batch_tokens: 256,
            seq_len: 32,
            seed: 0,
            data: DataSource::Copy {
                period: 48,
                length: 50_000,
                noise: 0.0,
            },
            out_dir: None,
            weight_decay: 0.0,
            sphere_weight_decay: 0.0,
            log_interval: default_log_interval(),
            log_wall_time: true,
        }
    }

    pub fn steps(&self) -> usize {
        (self.tokens / self.batch_tokens.max(1) as u64) as usize
    }

    pub fn batch_seqs(&self) -> usize {
        self.batch_tokens / self.seq_len.max(1)
    }

    /// The model config with its anchor depth pinned to the transfer anchor.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.anchor_depth.get_or_insert(self.anchor.d0);
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.anchor.validate()?;
        let model = self.resolved_model();
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        if model.anchor_depth() != self.anchor.d0 {
            return Err(Error::Config(format!(
                "model anchor depth {} differs from transfer anchor d0 {}",
                model.anchor_depth(),
                self.anchor.d0
            )));
        }
        if self.seq_len == 0 || self.seq_len > model.context {
            return Err(Error::Config(format!("seq_len {} outside 1..={}", self.seq_len, model.context)));
        }
        if self.batch_tokens == 0 || self.batch_tokens % self.seq_len != 0 {
            return Err(Error::Config("batch_tokens must be a positive multiple of seq_len".into()));
        }
        if self.steps() == 0 {
            return Err(Error::Config("tokens must cover at least one batch".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.sphere_weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        match &self.data {
            DataSource::Copy { period, length, noise } => {
                if !(0.0..1.0).contains(noise) {
                    return Err(Error::Config(format!("copy noise {noise} outside [0, 1)")));
                }
                if *period < 2 || *period > model.vocab {
                    return Err(Error::Config(format!("copy period {period} outside 2..={}", model.vocab)));
                }
                if *length < 2 {
                    return Err(Error::Config("copy stream too short".into()));
                }
            }
            DataSource::Bytes { path } | DataSource::Ints { path } => {
                if !path.exists() {
                    return Err(Error::Config(format!("data path {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data paths resolve against the config file.
        if let (DataSource::Bytes { path: p } | DataSource::Ints { path: p }, Some(dir)) = (&mut cfg.data, path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Token stream split into training and validation parts.
#[derive(Clone, Debug)]
pub struct TokenStream {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
}

pub fn copy_task(period: usize, length: usize, noise: f64, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_7079);
    let mut ids: Vec<u32> = (0..vocab as u32).collect();
    ids.shuffle(&mut rng);
    ids.truncate(period);
    (0..length)
        .map(|i| {
            if noise > 0.0 && rng.random_bool(noise) {
                rng.random_range(0..vocab as u32)
            } else {
                ids[i % period]
            }
        })
        .collect()
}

pub fn load_tokens(source: &DataSource, vocab: usize, seed: u64) -> Result<Vec<u32>> {
    let tokens = match source {
        DataSource::Copy { period, length, noise } => copy_task(*period, *length, *noise, vocab, seed),
        DataSource::Bytes { path } => fs::read(path)?.into_iter().map(u32::from).collect(),
        DataSource::Ints { path } => fs::read_to_string(path)?
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| Error::Config(format!("{}: bad token '{t}': {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Config(format!("token {bad} ≥ vocab {vocab}")));
    }
    Ok(tokens)
}

/// Final [`VALIDATION_FRACTION`] of the stream, never shuffled.
pub fn split_stream(tokens: Vec<u32>, seq_len: usize) -> Result<TokenStream> {
    let n = tokens.len();
    let n_valid = ((n as f64 * VALIDATION_FRACTION).ceil() as usize).max(seq_len + 1);
    if n < n_valid + seq_len + 1 {
        return Err(Error::Config(format!(
            "token stream of {n} is too short for seq_len {seq_len} with a validation split"
        )));
    }
    let mut train = tokens;
    let valid = train.split_off(n - n_valid);
    Ok(TokenStream { train, valid })
}

fn sample_batch(stream: &[u32], seqs: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let hi = stream.len() - seq_len;
    let windows: Vec<Vec<u32>> = (0..seqs)
        .map(|_| {
            let s = rng.random_range(0..hi);
            stream[s..s + seq_len + 1].to_vec()
        })
        .collect();
    Batch::from_windows(&windows)
}

/// Non-overlapping validation windows grouped into batches of at most `seqs`.
fn validation_batches(valid: &[u32], seqs: usize, seq_len: usize) -> Result<Vec<Batch>> {
    let windows: Vec<Vec<u32>> = valid.chunks_exact(seq_len + 1).map(<[u32]>::to_vec).collect();
    windows.chunks(seqs).map(Batch::from_windows).collect()
}

/// Token-weighted mean cross-entropy over the validation split.
pub fn validation_loss(model: &ModelConfig, params: &ParamSet, valid: &[u32], seqs: usize, seq_len: usize) -> Result<f64> {
    let mut graphs: Vec<ModelGraph> = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in validation_batches(valid, seqs, seq_len)? {
        let g = match graphs.iter().position(|g| g.batch == batch.batch) {
            Some(i) => &graphs[i],
            None => {
                graphs.push(ModelGraph::build(model, batch.batch, seq_len)?);
                graphs.last().expect("just pushed")
            }
        };
        let vals = g.forward(params, &batch, model.vocab)?;
        let n = batch.inputs.len();
        total += vals.get(g.lm_loss).get(0, 0) * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Config("validation split holds no full window".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub step: usize,
    pub tokens_seen: u64,
    /// Post-schedule, post-multiplier learning rate of [`REFERENCE_PARAM`].
    pub lr: f64,
    pub train_loss: f64,
    pub stability: StabilityReport,
    /// Largest `|‖W‖_F − c_W| / c_W` over sphere parameters after this step.
    pub sphere_dev: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub max_sphere_dev: f64,
    /// Step-0 sphere radii by parameter name.
    pub sphere_radii: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<RunLogRecord>,
    pub params: ParamSet,
}

struct ParamPlan {
    kind: OptimizerKind,
    lr_mult: f64,
    lambda: f64,
}

fn plan(cfg: &RunConfig, model: &ModelConfig, params: &ParamSet) -> Result<Vec<ParamPlan>> {
    let base = hyperp::ScaleBase {
        d0: cfg.anchor.d0,
        w0: model.anchor_width(),
        t0: cfg.anchor.t0,
        depth_mup: model.depth_mup,
    };
    params
        .specs
        .iter()
        .map(|s| {
            let m = hyperp::multipliers(
                model.scheme,
                s.group,
                &LayerDims {
                    w: model.width(),
                    d: model.depth,
                    d_in: s.d_in(),
                    d_out: s.d_out(),
                    tokens: cfg.tokens as f64,
                },
                &base,
            )?;
            let kind = cfg.optimizers.resolve(model.scheme, s.group);
            let lambda = if kind == OptimizerKind::MuonH {
                cfg.sphere_weight_decay
            } else {
                cfg.weight_decay * m.weight_decay
            };
            Ok(ParamPlan {
                kind,
                lr_mult: m.lr_mult,
                lambda,
            })
        })
        .collect()
}

fn sphere_dev(params: &ParamSet, states: &[OptimizerState]) -> f64 {
    params
        .values
        .iter()
        .zip(states)
        .filter_map(|(w, s)| s.c_w.map(|c| (frobenius_norm(w) - c).abs() / c))
        .fold(0.0, f64::max)
}

/// Train one configuration. Writes `log.jsonl`, `summary.json` and
/// `config.toml` when `out_dir` is set.
pub fn train(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let model = cfg.resolved_model();
    let steps = cfg.steps();
    let seqs = cfg.batch_seqs();
    let stream = split_stream(load_tokens(&cfg.data, model.vocab, cfg.seed)?, cfg.seq_len)?;

    let mut params = build_params(&model, cfg.seed)?;
    let plans = plan(cfg, &model, &params)?;
    let mut states = params
        .values
        .iter()
        .zip(&plans)
        .map(|(w, p)| OptimizerState::new(p.kind, w, cfg.optim))
        .collect::<Result<Vec<_>>>()?;
    let sphere_radii = params
        .specs
        .iter()
        .zip(&states)
        .filter_map(|(s, st)| st.c_w.map(|c| (s.name.clone(), c)))
        .collect();
    let ref_idx = params
        .specs
        .iter()
        .position(|s| s.name == REFERENCE_PARAM)
        .ok_or_else(|| Error::Structural(format!("missing {REFERENCE_PARAM}")))?;

    let graph = ModelGraph::build(&model, seqs, cfg.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let seed_grad = Mat::filled(1, 1, 1.0);
    let started = Instant::now();
    let mut records = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut max_dev: f64 = 0.0;

    for step in 0..steps {
        let batch = sample_batch(&stream.train, seqs, cfg.seq_len, &mut rng)?;
        let values = graph.forward(&params, &batch, model.vocab)?;
        let loss = values.scalar().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if step == 0 {
            initial_loss = loss;
        }
        last_loss = loss;
        let grads = graph.graph.backward(&values, &seed_grad)?;
        let lr = lr_schedule(step, steps, cfg.anchor.eta0)?;
        for (i, (spec, plan)) in params.specs.iter().zip(&plans).enumerate() {
            let Some(g) = grads.get(&spec.name) else { continue };
            let eta = lr * plan.lr_mult;
            let w = &params.values[i];
            let next = if plan.kind == OptimizerKind::MuonH && plan.lambda > 0.0 {
                muonh_step_decayed(w, g, eta, plan.lambda, &mut states[i])?
            } else {
                states[i].step(w, g, eta, plan.lambda)?
            };
            params.values[i] = next;
        }
        let dev = sphere_dev(&params, &states);
        max_dev = max_dev.max(dev);
        if step % cfg.log_interval == 0 || step + 1 == steps {
            let acts = graph.activations(&values);
            records.push(RunLogRecord {
                step,
                tokens_seen: ((step + 1) * cfg.batch_tokens) as u64,
                lr: lr * plans[ref_idx].lr_mult,
                train_loss: loss,
                stability: acts.stability(step)?,
                sphere_dev: dev,
                wall_ms: cfg.log_wall_time.then(|| started.elapsed().as_millis() as u64),
            });
        }
    }

    let val_loss = validation_loss(&model, &params, &stream.valid, seqs, cfg.seq_len)?;
    if !val_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: steps });
    }

    let summary = RunSummary {
        steps,
        initial_loss,
        final_train_loss: last_loss,
        val_loss,
        max_sphere_dev: max_dev,
        sphere_radii,
    };
    if let Some(dir) = &cfg.out_dir {
        write_run(dir, cfg, &summary, &records)?;
    }
    Ok(RunOutput {
        summary,
        records,
        params,
    })
}

/// Write to a sibling temp file then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_run(dir: &Path, cfg: &RunConfig, summary: &RunSummary, records: &[RunLogRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut log = String::new();
    for r in records {
        log.push_str(&serde_json::to_string(r).map_err(|e| Error::Serialize(e.to_string()))?);
        log.push('\n');
    }
    write_atomic(&dir.join("log.jsonl"), log.as_bytes())?;
    let summary = serde_json::to_string_pretty(summary).map_err(|e| Error::Serialize(e.to_string()))?;
    write_atomic(&dir.join("summary.json"), summary.as_bytes())?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub lr: f64,
    pub loss: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub outcomes: Vec<SweepOutcome>,
    pub fit: Option<QuadFit>,
    pub fit_error: Option<String>,
}

impl SweepResult {
    pub fn points(&self) -> Vec<SweepPoint> {
        self.outcomes
            .iter()
            .filter_map(|o| o.loss.map(|l| SweepPoint::new(o.lr, l)))
            .collect()
    }

    /// Grid index of the lowest observed loss among successful runs.
    pub fn argmin(&self) -> Option<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.loss.map(|l| (i, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,loss,status\n");
        for o in &self.outcomes {
            let loss = o.loss.map(|l| format!("{l}")).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", o.lr, loss, o.status.replace([',', '\n'], ";")));
        }
        s
    }
}

/// One run per base learning rate, in parallel, scored by validation loss.
/// Failed runs are kept with their status and left out of the fit.
pub fn sweep(template: &RunConfig, grid: &[f64]) -> Result<SweepResult> {
    if grid.len() < 3 {
        return Err(Error::Config("a sweep needs at least 3 grid values".into()));
    }
    if grid.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::Config("learning rates must be positive".into()));
    }
    template.validate()?;
    let outcomes: Vec<SweepOutcome> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &lr)| {
            let mut cfg = template.clone();
            cfg.anchor.eta0 = lr;
            cfg.out_dir = template.out_dir.as_ref().map(|d| d.join(format!("lr_{i:02}")));
            match train(&cfg) {
                Ok(out) => SweepOutcome {
                    lr,
                    loss: Some(out.summary.val_loss),
                    status: "ok".into(),
                },
                Err(e) => SweepOutcome {
                    lr,
                    loss: None,
                    status: format!("failed: {e}"),
                },
            }
        })
        .collect();
    let mut result = SweepResult {
        outcomes,
        fit: None,
        fit_error: None,
    };
    match fit_quadratic_loglr(&result.points()) {
        Ok(f) => result.fit = Some(f),
        Err(e) => result.fit_error = Some(e.to_string()),
    }
    if let Some(dir) = &template.out_dir {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("sweep.csv"), result.to_csv().as_bytes())?;
        let fit = serde_json::to_string_pretty(&result).map_err(|e| Error::Serialize(e.to_string()))?;
        write_atomic(&dir.join("sweep_fit.json"), fit.as_bytes())?;
    }
    Ok(result)
}
