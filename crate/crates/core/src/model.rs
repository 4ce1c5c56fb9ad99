//! Miniature dense and MoE decoder-only Transformers built on [`crate::autodiff`].
//!
//! Layout per block: pre-norm (RMSNorm with a gain), grouped-query attention
//! with optional QK-norm, rotary embeddings and a headwise sigmoid gate, then a
//! SwiGLU MLP or a routed MoE layer. Both residual branches are scaled by the
//! scheme's residual multiplier.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Values};
use crate::error::{Error, Result};
use crate::hyperp::{self, Group, LayerDims, ScaleBase, Scheme};
use crate::linalg::Mat;
use crate::stability::{self, StabilityReport};

pub const CAUSAL_MASK: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    /// `S`: the routed pool holds `k·S` experts (one fewer with a shared expert).
    pub sparsity: usize,
    /// `k`: experts active per token, shared expert included.
    pub granularity: usize,
    #[serde(default)]
    pub shared_expert: bool,
    #[serde(default)]
    pub sqrt_gate: bool,
    #[serde(default = "default_aux_weight")]
    pub aux_weight: f64,
}

fn default_aux_weight() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    #[serde(default = "yes")]
    pub qk_norm: bool,
    #[serde(default = "yes")]
    pub gated: bool,
    #[serde(default = "yes")]
    pub rope: bool,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            qk_norm: true,
            gated: true,
            rope: true,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    #[serde(default = "default_aspect")]
    pub aspect_ratio: usize,
    /// Defaults to `2·depth`.
    #[serde(default)]
    pub n_head: Option<usize>,
    #[serde(default = "default_kv_heads")]
    pub kv_heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_mlp_mult")]
    pub mlp_mult: usize,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    #[serde(default)]
    pub attn: AttnConfig,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Depth at which multipliers equal 1; defaults to `depth`.
    #[serde(default)]
    pub anchor_depth: Option<usize>,
    #[serde(default = "yes")]
    pub depth_mup: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_aspect() -> usize {
    16
}
fn default_kv_heads() -> usize {
    4
}
fn default_head_dim() -> usize {
    8
}
fn default_vocab() -> usize {
    256
}
fn default_context() -> usize {
    128
}
fn default_mlp_mult() -> usize {
    4
}
fn default_scheme() -> Scheme {
    Scheme::HyperP
}
fn default_norm_eps() -> f64 {
    1e-6
}
fn default_rope_base() -> f64 {
    10_000.0
}

/// Resolved expert counts for an MoE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeLayout {
    pub pool: usize,
    pub select: usize,
    pub shared: bool,
    pub active: usize,
    pub expert_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale dense defaults at the given depth.
    pub fn desk(depth: usize) -> Self {
        Self {
            depth,
            aspect_ratio: default_aspect(),
            n_head: None,
            kv_heads: default_kv_heads(),
            head_dim: default_head_dim(),
            vocab: default_vocab(),
            context: default_context(),
            mlp_mult: default_mlp_mult(),
            moe: None,
            attn: AttnConfig::default(),
            scheme: Scheme::HyperP,
            anchor_depth: None,
            depth_mup: true,
            norm_eps: default_norm_eps(),
            rope_base: default_rope_base(),
        }
    }

    /// The 208M-parameter dense reference at depth 8 (α = 128, head_dim 128).
    pub fn full_scale(depth: usize, vocab: usize) -> Self {
        Self {
            aspect_ratio: 128,
            head_dim: 128,
            vocab,
            context: 4096,
            anchor_depth: Some(8),
            ..Self::desk(depth)
        }
    }

    pub fn width(&self) -> usize {
        self.aspect_ratio * self.depth
    }

    pub fn n_head(&self) -> usize {
        self.n_head.unwrap_or(2 * self.depth)
    }

    pub fn q_width(&self) -> usize {
        self.n_head() * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Width of the concatenated head outputs fed to the output projection.
    pub fn attn_out_width(&self) -> usize {
        self.n_head() * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_mult * self.width()
    }

    pub fn anchor_depth(&self) -> usize {
        self.anchor_depth.unwrap_or(self.depth)
    }

    pub fn anchor_width(&self) -> usize {
        self.aspect_ratio * self.anchor_depth()
    }

    pub fn residual_multiplier(&self) -> f64 {
        hyperp::residual_multiplier(self.scheme, self.depth, self.depth_mup)
    }

    pub fn scale_base(&self, t0: f64) -> ScaleBase {
        ScaleBase {
            d0: self.anchor_depth(),
            w0: self.anchor_width(),
            t0,
            depth_mup: self.depth_mup,
        }
    }

    /// Output multiplier on the unembedding product.
    pub fn unembed_multiplier(&self) -> Result<f64> {
        let m = hyperp::multipliers(
            self.scheme,
            Group::Unembedding,
            &LayerDims {
                w: self.width(),
                d: self.depth,
                d_in: self.width(),
                d_out: self.vocab,
                tokens: 1.0,
            },
            &self.scale_base(1.0),
        )?;
        Ok(m.weight_mult)
    }

    pub fn moe_layout(&self) -> Result<Option<MoeLayout>> {
        let Some(moe) = &self.moe else { return Ok(None) };
        let (k, s) = (moe.granularity, moe.sparsity);
        if k == 0 || s == 0 {
            return Err(Error::Structural("MoE sparsity and granularity must be positive".into()));
        }
        let (pool, select) = if moe.shared_expert {
            (k * s - 1, k - 1)
        } else {
            (k * s, k)
        };
        if select == 0 {
            return Err(Error::Structural(
                "a shared expert needs granularity ≥ 2 so at least one routed expert is selected".into(),
            ));
        }
        if select > pool {
            return Err(Error::Structural(format!("cannot select {select} experts from a pool of {pool}")));
        }
        let raw = self.mlp_hidden() as f64 / k as f64;
        let expert_hidden = ((raw / 2.0).round() as usize * 2).max(2);
        Ok(Some(MoeLayout {
            pool,
            select,
            shared: moe.shared_expert,
            active: k,
            expert_hidden,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("aspect_ratio", self.aspect_ratio),
            ("n_head", self.n_head()),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("context", self.context),
            ("mlp_mult", self.mlp_mult),
            ("anchor_depth", self.anchor_depth()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Structural(format!("{name} must be positive")));
            }
        }
        if !self.n_head().is_multiple_of(self.kv_heads) {
            return Err(Error::Structural(format!(
                "n_head {} is not a multiple of kv_heads {}",
                self.n_head(),
                self.kv_heads
            )));
        }
        if self.attn.rope && !self.head_dim.is_multiple_of(2) {
            return Err(Error::Structural("rotary embeddings need an even head_dim".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Structural("norm_eps must be positive".into()));
        }
        self.moe_layout()?;
        Ok(())
    }
}

/// One trainable tensor. Matrices are stored `(d_out, d_in)`; vectors as `1×n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: Group,
    pub layer: Option<usize>,
    /// Belongs to a routed expert (counts toward total but not all-active params).
    pub routed_expert: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_matrix(&self) -> bool {
        self.group != Group::EmbeddingVector || self.rows > 1
    }

    pub fn d_in(&self) -> usize {
        self.cols
    }

    pub fn d_out(&self) -> usize {
        self.rows
    }
}

fn spec(name: String, rows: usize, cols: usize, group: Group, layer: Option<usize>) -> ParamSpec {
    ParamSpec {
        name,
        rows,
        cols,
        group,
        layer,
        routed_expert: false,
    }
}

fn swiglu_specs(out: &mut Vec<ParamSpec>, prefix: &str, w: usize, hidden: usize, layer: usize, routed: bool) {
    for (suffix, rows, cols) in [("gate", hidden, w), ("up", hidden, w), ("down", w, hidden)] {
        let mut s = spec(format!("{prefix}.{suffix}"), rows, cols, Group::Hidden, Some(layer));
        s.routed_expert = routed;
        out.push(s);
    }
}

/// Every trainable tensor, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let w = cfg.width();
    let hd = cfg.head_dim;
    let mut out = vec![spec("embed".into(), cfg.vocab, w, Group::EmbeddingVector, None)];
    let layout = cfg.moe_layout()?;
    for l in 0..cfg.depth {
        let p = format!("layers.{l}");
        out.push(spec(format!("{p}.attn_norm"), 1, w, Group::EmbeddingVector, Some(l)));
        out.push(spec(format!("{p}.attn.q"), cfg.q_width(), w, Group::Hidden, Some(l)));
        out.push(spec(format!("{p}.attn.k"), cfg.kv_width(), w, Group::Hidden, Some(l)));
        out.push(spec(format!("{p}.attn.v"), cfg.kv_width(), w, Group::Hidden, Some(l)));
        if cfg.attn.qk_norm {
            out.push(spec(format!("{p}.attn.q_norm"), 1, hd, Group::EmbeddingVector, Some(l)));
            out.push(spec(format!("{p}.attn.k_norm"), 1, hd, Group::EmbeddingVector, Some(l)));
        }
        if cfg.attn.gated {
            out.push(spec(format!("{p}.attn.gate"), cfg.n_head(), w, Group::Hidden, Some(l)));
        }
        out.push(spec(format!("{p}.attn.o"), w, cfg.attn_out_width(), Group::Hidden, Some(l)));
        out.push(spec(format!("{p}.mlp_norm"), 1, w, Group::EmbeddingVector, Some(l)));
        match &layout {
            None => swiglu_specs(&mut out, &format!("{p}.mlp"), w, cfg.mlp_hidden(), l, false),
            Some(m) => {
                out.push(spec(format!("{p}.moe.router"), m.pool, w, Group::Hidden, Some(l)));
                for e in 0..m.pool {
                    swiglu_specs(&mut out, &format!("{p}.moe.experts.{e}"), w, m.expert_hidden, l, true);
                }
                if m.shared {
                    swiglu_specs(&mut out, &format!("{p}.moe.shared"), w, m.expert_hidden, l, false);
                }
            }
        }
    }
    out.push(spec("final_norm".into(), 1, w, Group::EmbeddingVector, None));
    out.push(spec("unembed".into(), cfg.vocab, w, Group::Unembedding, None));
    Ok(out)
}

/// Parameter values keyed by name, in [`param_specs`] order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(specs: Vec<ParamSpec>, values: Vec<Mat>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::Structural("spec and value counts differ".into()));
        }
        for (s, v) in specs.iter().zip(&values) {
            if v.shape() != (s.rows, s.cols) {
                return Err(Error::shape(&s.name, format!("value {:?}", v.shape())));
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self { specs, values, index })
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Mat)> {
        self.specs.iter().zip(&self.values)
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    pub fn unembedding_count(&self) -> usize {
        self.specs.iter().filter(|s| s.group == Group::Unembedding).count()
    }
}

impl Bindings for ParamSet {
    fn lookup(&self, name: &str) -> Option<&Mat> {
        self.get(name)
    }
}

/// Parameters plus per-call data leaves.
pub struct Feed<'a> {
    pub params: &'a ParamSet,
    pub data: &'a HashMap<String, Mat>,
}

impl Bindings for Feed<'_> {
    fn lookup(&self, name: &str) -> Option<&Mat> {
        self.data.get(name).or_else(|| self.params.get(name))
    }
}

/// Kaiming-uniform matrices, N(0,1) embedding, unit gains, each scaled by the
/// scheme's init multiplier. Deterministic in `seed`.
pub fn build_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = cfg.scale_base(1.0);
    let mut values = Vec::with_capacity(specs.len());
    for s in &specs {
        let mult = hyperp::multipliers(
            cfg.scheme,
            s.group,
            &LayerDims {
                w: cfg.width(),
                d: cfg.depth,
                d_in: s.d_in(),
                d_out: s.d_out(),
                tokens: 1.0,
            },
            &base,
        )?
        .init_std_mult;
        let v = match s.group {
            Group::EmbeddingVector if s.rows == 1 => Mat::filled(1, s.cols, 1.0),
            Group::EmbeddingVector => Mat::randn(s.rows, s.cols, &mut rng).scale(mult),
            Group::Unembedding | Group::Hidden => {
                let bound = 1.0 / (s.d_in() as f64).sqrt();
                Mat::uniform(s.rows, s.cols, bound * mult, &mut rng)
            }
        };
        values.push(v);
    }
    ParamSet::new(specs, values)
}

/// Constant tensors shared by every layer of a graph.
struct Consts {
    cos: Option<NodeId>,
    sin: Option<NodeId>,
    rot: Option<NodeId>,
    mask: NodeId,
    ones_row: Option<NodeId>,
}

/// Incremental builder that declares parameter leaves on first use.
struct Builder<'a> {
    g: Graph,
    cfg: &'a ModelConfig,
    shapes: HashMap<String, (usize, usize)>,
    consts: Consts,
    batch: usize,
    seq: usize,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ModelConfig, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let shapes = param_specs(cfg)?
            .into_iter()
            .map(|s| (s.name, (s.rows, s.cols)))
            .collect();
        let mut g = Graph::new();
        let mut mask = Mat::zeros(seq, seq);
        for i in 0..seq {
            for j in i + 1..seq {
                mask.set(i, j, CAUSAL_MASK);
            }
        }
        let mask = g.constant(mask);
        let (cos, sin, rot) = if cfg.attn.rope {
            let (c, s, r) = rope_tables(batch, seq, cfg.head_dim, cfg.rope_base);
            (Some(g.constant(c)), Some(g.constant(s)), Some(g.constant(r)))
        } else {
            (None, None, None)
        };
        let n = batch * seq;
        let ones_row = if cfg.moe.is_some() {
            Some(g.constant(Mat::filled(1, n, 1.0)))
        } else {
            None
        };
        Ok(Self {
            g,
            cfg,
            shapes,
            consts: Consts {
                cos,
                sin,
                rot,
                mask,
                ones_row,
            },
            batch,
            seq,
        })
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.g.leaf_id(name) {
            return Ok(id);
        }
        let &(r, c) = self
            .shapes
            .get(name)
            .ok_or_else(|| Error::Structural(format!("no parameter named '{name}'")))?;
        self.g.param(name, r, c)
    }

    fn norm(&mut self, x: NodeId, gain: &str) -> Result<NodeId> {
        let n = self.g.rms_norm(x, self.cfg.norm_eps)?;
        let gn = self.p(gain)?;
        self.g.mul_row(n, gn)
    }

    fn rope(&mut self, x: NodeId) -> Result<NodeId> {
        let (Some(cos), Some(sin), Some(rot)) = (self.consts.cos, self.consts.sin, self.consts.rot) else {
            return Ok(x);
        };
        let a = self.g.mul(x, cos)?;
        let r = self.g.matmul(x, rot)?;
        let b = self.g.mul(r, sin)?;
        self.g.add(a, b)
    }

    fn swiglu(&mut self, h: NodeId, prefix: &str) -> Result<NodeId> {
        let wg = self.p(&format!("{prefix}.gate"))?;
        let wu = self.p(&format!("{prefix}.up"))?;
        let wd = self.p(&format!("{prefix}.down"))?;
        let gate = self.g.linear(h, wg)?;
        let gate = self.g.silu(gate)?;
        let up = self.g.linear(h, wu)?;
        let inner = self.g.mul(gate, up)?;
        self.g.linear(inner, wd)
    }

    /// Attention on an already-normalized input; returns the projected output
    /// and the scaled pre-mask scores per (sequence, head).
    fn attention(&mut self, h: NodeId, layer: usize) -> Result<(NodeId, Vec<NodeId>)> {
        let cfg = self.cfg;
        let p = format!("layers.{layer}.attn");
        let hd = cfg.head_dim;
        let nh = cfg.n_head();
        let group = nh / cfg.kv_heads;
        let wq = self.p(&format!("{p}.q"))?;
        let wk = self.p(&format!("{p}.k"))?;
        let wv = self.p(&format!("{p}.v"))?;
        let q = self.g.linear(h, wq)?;
        let k = self.g.linear(h, wk)?;
        let v = self.g.linear(h, wv)?;
        let gate = if cfg.attn.gated {
            let wg = self.p(&format!("{p}.gate"))?;
            let lin = self.g.linear(h, wg)?;
            Some(self.g.sigmoid(lin)?)
        } else {
            None
        };
        let prep = |b: &mut Self, src: NodeId, head: usize, gain: &str| -> Result<NodeId> {
            let mut x = b.g.slice_cols(src, head * hd, hd)?;
            if cfg.attn.qk_norm {
                x = b.norm(x, gain)?;
            }
            b.rope(x)
        };
        let mut k_heads = Vec::with_capacity(cfg.kv_heads);
        let mut v_heads = Vec::with_capacity(cfg.kv_heads);
        for g in 0..cfg.kv_heads {
            k_heads.push(prep(self, k, g, &format!("{p}.k_norm"))?);
            v_heads.push(self.g.slice_cols(v, g * hd, hd)?);
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let (batch, seq) = (self.batch, self.seq);
        // Per sequence: key transposes and values for each KV group.
        let mut kt = vec![Vec::with_capacity(cfg.kv_heads); batch];
        let mut vs = vec![Vec::with_capacity(cfg.kv_heads); batch];
        for b in 0..batch {
            for g in 0..cfg.kv_heads {
                let kb = self.g.slice_rows(k_heads[g], b * seq, seq)?;
                kt[b].push(self.g.transpose(kb)?);
                vs[b].push(self.g.slice_rows(v_heads[g], b * seq, seq)?);
            }
        }
        let mut scores_rec = Vec::with_capacity(batch * nh);
        let mut per_seq: Vec<Vec<NodeId>> = vec![Vec::with_capacity(nh); batch];
        for j in 0..nh {
            let qh = prep(self, q, j, &format!("{p}.q_norm"))?;
            let g = j / group;
            let gate_col = match gate {
                Some(gt) => Some(self.g.slice_cols(gt, j, 1)?),
                None => None,
            };
            for b in 0..batch {
                let qb = self.g.slice_rows(qh, b * seq, seq)?;
                let raw = self.g.matmul(qb, kt[b][g])?;
                let scores = self.g.scale(raw, scale)?;
                scores_rec.push(scores);
                let masked = self.g.add(scores, self.consts.mask)?;
                let probs = self.g.row_softmax(masked)?;
                let mut o = self.g.matmul(probs, vs[b][g])?;
                if let Some(gc) = gate_col {
                    let gb = self.g.slice_rows(gc, b * seq, seq)?;
                    o = self.g.mul_col(o, gb)?;
                }
                per_seq[b].push(o);
            }
        }
        let mut rows = Vec::with_capacity(batch);
        for heads in &per_seq {
            rows.push(self.g.concat_cols(heads)?);
        }
        let cat = if rows.len() == 1 {
            rows[0]
        } else {
            self.g.concat_rows(&rows)?
        };
        let wo = self.p(&format!("{p}.o"))?;
        Ok((self.g.linear(cat, wo)?, scores_rec))
    }

    fn moe(&mut self, h: NodeId, layer: usize) -> Result<MoeNodes> {
        let layout = self
            .cfg
            .moe_layout()?
            .ok_or_else(|| Error::Structural("moe layer without MoE config".into()))?;
        let moe = self.cfg.moe.clone().expect("layout implies config");
        let p = format!("layers.{layer}.moe");
        let wr = self.p(&format!("{p}.router"))?;
        let router = self.g.linear(h, wr)?;
        let idx = self.g.top_k(router, layout.select)?;
        let sel = self.g.gather_cols(router, idx)?;
        let gates = self.g.row_softmax(sel)?;
        let weights = if moe.sqrt_gate { self.g.sqrt(gates)? } else { gates };
        let dense = self.g.scatter_cols(weights, idx, layout.pool)?;
        let mut y: Option<NodeId> = None;
        for e in 0..layout.pool {
            let out = self.swiglu(h, &format!("{p}.experts.{e}"))?;
            let col = self.g.slice_cols(dense, e, 1)?;
            let weighted = self.g.mul_col(out, col)?;
            y = Some(match y {
                Some(acc) => self.g.add(acc, weighted)?,
                None => weighted,
            });
        }
        let mut y = y.expect("pool is non-empty");
        if layout.shared {
            let s = self.swiglu(h, &format!("{p}.shared"))?;
            let sum = self.g.add(y, s)?;
            y = self.g.scale(sum, std::f64::consts::FRAC_1_SQRT_2)?;
        }
        // Switch-style balance loss on hard counts and post-softmax routing weights.
        let ones = self.consts.ones_row.expect("MoE graphs carry a ones row");
        let n = (self.batch * self.seq) as f64;
        let mask = self.g.index_mask(idx, layout.pool)?;
        let counts = self.g.matmul(ones, mask)?;
        let f = self.g.scale(counts, 1.0 / (n * layout.select as f64))?;
        let probs = self.g.scatter_cols(gates, idx, layout.pool)?;
        let ptot = self.g.matmul(ones, probs)?;
        let pnorm = self.g.scale(ptot, 1.0 / n)?;
        let fp = self.g.mul(f, pnorm)?;
        let s = self.g.sum(fp)?;
        let aux = self.g.scale(s, moe.aux_weight * layout.pool as f64)?;
        Ok(MoeNodes {
            out: y,
            router,
            dispatch: idx,
            aux,
        })
    }

    /// One pre-norm block; returns the new residual stream and its records.
    fn block(&mut self, x: NodeId, layer: usize) -> Result<(NodeId, LayerNodes)> {
        let res = self.cfg.residual_multiplier();
        let p = format!("layers.{layer}");
        let h = self.norm(x, &format!("{p}.attn_norm"))?;
        let (attn_out, scores) = self.attention(h, layer)?;
        let scaled = self.g.scale(attn_out, res)?;
        let x1 = self.g.add(x, scaled)?;
        let h2 = self.norm(x1, &format!("{p}.mlp_norm"))?;
        let (mlp_out, moe) = if self.cfg.moe.is_some() {
            let m = self.moe(h2, layer)?;
            (m.out, Some(m))
        } else {
            (self.swiglu(h2, &format!("{p}.mlp"))?, None)
        };
        let scaled = self.g.scale(mlp_out, res)?;
        let x2 = self.g.add(x1, scaled)?;
        Ok((
            x2,
            LayerNodes {
                attn_scores: scores,
                attn_out,
                mlp_out,
                router_logits: moe.as_ref().map(|m| m.router),
                dispatch: moe.as_ref().map(|m| m.dispatch),
                aux: moe.as_ref().map(|m| m.aux),
            },
        ))
    }
}

struct MoeNodes {
    out: NodeId,
    router: NodeId,
    dispatch: NodeId,
    aux: NodeId,
}

/// Rotary tables for `batch` sequences of length `seq`: cos, sin (each
/// `batch·seq × hd`) and the pair-rotation matrix `R` with `(xR)` giving
/// `(−x₁, x₀, −x₃, x₂, …)`.
fn rope_tables(batch: usize, seq: usize, hd: usize, base: f64) -> (Mat, Mat, Mat) {
    let n = batch * seq;
    let mut cos = Mat::zeros(n, hd);
    let mut sin = Mat::zeros(n, hd);
    for r in 0..n {
        let pos = (r % seq) as f64;
        for i in 0..hd / 2 {
            let theta = pos * base.powf(-(2.0 * i as f64) / hd as f64);
            let (s, c) = theta.sin_cos();
            cos.set(r, 2 * i, c);
            cos.set(r, 2 * i + 1, c);
            sin.set(r, 2 * i, s);
            sin.set(r, 2 * i + 1, s);
        }
    }
    let mut rot = Mat::zeros(hd, hd);
    for i in 0..hd / 2 {
        rot.set(2 * i + 1, 2 * i, -1.0);
        rot.set(2 * i, 2 * i + 1, 1.0);
    }
    (cos, sin, rot)
}

/// Node ids recorded for one block.
#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub attn_scores: Vec<NodeId>,
    pub attn_out: NodeId,
    pub mlp_out: NodeId,
    pub router_logits: Option<NodeId>,
    pub dispatch: Option<NodeId>,
    pub aux: Option<NodeId>,
}

/// A full language-model graph for a fixed `(batch, seq)` shape.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub graph: Graph,
    pub batch: usize,
    pub seq: usize,
    pub loss: NodeId,
    pub lm_loss: NodeId,
    pub logits: NodeId,
    pub layers: Vec<LayerNodes>,
    pool: Option<usize>,
}

/// Token ids for `batch` sequences, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    /// Splits each window of `seq + 1` tokens into inputs and shifted targets.
    pub fn from_windows(windows: &[Vec<u32>]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        if first.len() < 2 {
            return Err(Error::InvalidInput("windows need at least two tokens".into()));
        }
        let seq = first.len() - 1;
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            if w.len() != seq + 1 {
                return Err(Error::InvalidInput("ragged batch".into()));
            }
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self {
            batch: windows.len(),
            seq,
            inputs,
            targets,
        })
    }

    fn data(&self, vocab: usize) -> Result<HashMap<String, Mat>> {
        let col = |ids: &[u32]| -> Result<Mat> {
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::InvalidInput(format!("token id {bad} ≥ vocab {vocab}")));
            }
            Mat::from_vec(ids.len(), 1, ids.iter().map(|&t| t as f64).collect())
        };
        let mut m = HashMap::new();
        m.insert("tokens".to_string(), col(&self.inputs)?);
        m.insert("targets".to_string(), col(&self.targets)?);
        Ok(m)
    }
}

impl ModelGraph {
    pub fn build(cfg: &ModelConfig, batch: usize, seq: usize) -> Result<Self> {
        if seq > cfg.context {
            return Err(Error::InvalidInput(format!("sequence {seq} exceeds context {}", cfg.context)));
        }
        let mut b = Builder::new(cfg, batch, seq)?;
        let n = batch * seq;
        let tokens = b.g.data("tokens", n, 1)?;
        let targets = b.g.data("targets", n, 1)?;
        let embed = b.p("embed")?;
        let mut x = b.g.gather_rows(embed, tokens)?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let (next, rec) = b.block(x, l)?;
            x = next;
            layers.push(rec);
        }
        let h = b.norm(x, "final_norm")?;
        let wu = b.p("unembed")?;
        let raw = b.g.linear(h, wu)?;
        let logits = b.g.scale(raw, cfg.unembed_multiplier()?)?;
        let lm_loss = b.g.cross_entropy(logits, targets)?;
        let mut loss = lm_loss;
        let aux_on = cfg.moe.as_ref().is_some_and(|m| m.aux_weight > 0.0);
        if aux_on {
            for rec in &layers {
                if let Some(a) = rec.aux {
                    loss = b.g.add(loss, a)?;
                }
            }
        }
        b.g.set_output(loss);
        let pool = cfg.moe_layout()?.map(|l| l.pool);
        Ok(Self {
            graph: b.g,
            batch,
            seq,
            loss,
            lm_loss,
            logits,
            layers,
            pool,
        })
    }

    pub fn forward(&self, params: &ParamSet, batch: &Batch, vocab: usize) -> Result<Values> {
        if batch.batch != self.batch || batch.seq != self.seq {
            return Err(Error::InvalidInput(format!(
                "batch {}x{} does not match graph {}x{}",
                batch.batch, batch.seq, self.batch, self.seq
            )));
        }
        let data = batch.data(vocab)?;
        self.graph.evaluate(&Feed { params, data: &data })
    }

    pub fn activations(&self, values: &Values) -> BatchActivations {
        let pool = self.pool.unwrap_or(0);
        let counts = |id: NodeId| -> Vec<f64> {
            let mut c = vec![0.0; pool];
            for &v in values.get(id).as_slice() {
                c[v as usize] += 1.0;
            }
            c
        };
        BatchActivations {
            attn_scores: self
                .layers
                .iter()
                .map(|l| l.attn_scores.iter().map(|&s| values.get(s).clone()).collect())
                .collect(),
            attn_out: self.layers.iter().map(|l| values.get(l.attn_out).clone()).collect(),
            mlp_out: self.layers.iter().map(|l| values.get(l.mlp_out).clone()).collect(),
            router_logits: self
                .layers
                .iter()
                .filter_map(|l| l.router_logits.map(|r| values.get(r).clone()))
                .collect(),
            dispatch_counts: self.layers.iter().filter_map(|l| l.dispatch.map(counts)).collect(),
            aux: self
                .layers
                .iter()
                .filter_map(|l| l.aux.map(|a| values.get(a).get(0, 0)))
                .collect(),
            lm_loss: values.get(self.lm_loss).get(0, 0),
        }
    }
}

/// Per-layer snapshots retained for stability metrics.
#[derive(Clone, Debug, Default)]
pub struct BatchActivations {
    /// Scaled pre-mask attention scores per layer, one `seq×seq` block per (sequence, head).
    pub attn_scores: Vec<Vec<Mat>>,
    pub attn_out: Vec<Mat>,
    pub mlp_out: Vec<Mat>,
    pub router_logits: Vec<Mat>,
    pub dispatch_counts: Vec<Vec<f64>>,
    pub aux: Vec<f64>,
    pub lm_loss: f64,
}

impl BatchActivations {
    pub fn stability(&self, step: usize) -> Result<StabilityReport> {
        let mut z_sum = 0.0;
        let mut z_n = 0usize;
        for layer in &self.attn_scores {
            for block in layer {
                for z in stability::causal_z_rows(block) {
                    z_sum += z;
                    z_n += 1;
                }
            }
        }
        let router_z = if self.router_logits.is_empty() {
            0.0
        } else {
            let mut s = 0.0;
            for r in &self.router_logits {
                s += stability::z_metric_mat(r)?;
            }
            s / self.router_logits.len() as f64
        };
        let attn: Vec<&Mat> = self.attn_out.iter().collect();
        let mlp: Vec<&Mat> = self.mlp_out.iter().collect();
        let mean_maxvio = if self.dispatch_counts.is_empty() {
            0.0
        } else {
            let mut s = 0.0;
            for c in &self.dispatch_counts {
                s += stability::maxvio(c)?;
            }
            s / self.dispatch_counts.len() as f64
        };
        Ok(StabilityReport {
            step,
            attn_z: if z_n > 0 { z_sum / z_n as f64 } else { 0.0 },
            router_z,
            attn_rms: stability::output_rms(&attn)?,
            moe_rms: stability::output_rms(&mlp)?,
            attn_outlier_pct: stability::outlier_pct(&attn)?,
            moe_outlier_pct: stability::outlier_pct(&mlp)?,
            mean_maxvio,
        })
    }
}

/// Mean next-token cross-entropy over a batch, plus recorded activations.
pub fn lm_loss(batch: &Batch, params: &ParamSet, cfg: &ModelConfig) -> Result<(f64, BatchActivations)> {
    if batch.inputs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mg = ModelGraph::build(cfg, batch.batch, batch.seq)?;
    let vals = mg.forward(params, batch, cfg.vocab)?;
    let acts = mg.activations(&vals);
    Ok((acts.lm_loss, acts))
}

/// `γ·N·Σ f_i·P_i` with `f` from hard counts and `P` from per-token routing weights.
pub fn aux_balance_loss(counts: &[f64], probs: &Mat, gamma: f64) -> Result<f64> {
    let n = counts.len();
    if probs.cols() != n {
        return Err(Error::shape("aux_balance_loss", format!("{} counts vs {} prob columns", n, probs.cols())));
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("aux loss with zero total count".into()));
    }
    let mut p = vec![0.0; n];
    for r in 0..probs.rows() {
        for (acc, v) in p.iter_mut().zip(probs.row(r)) {
            *acc += v;
        }
    }
    let ptot: f64 = p.iter().sum();
    if !(ptot > 0.0) {
        return Err(Error::InvalidInput("aux loss with zero total probability".into()));
    }
    let dot: f64 = counts.iter().zip(&p).map(|(c, q)| (c / total) * (q / ptot)).sum();
    Ok(gamma * n as f64 * dot)
}

/// Single-sequence graph for one sub-layer with `x` bound as a data leaf.
fn sublayer_graph<F>(cfg: &ModelConfig, x: &Mat, build: F) -> Result<(Graph, HashMap<String, Mat>)>
where
    F: FnOnce(&mut Builder, NodeId) -> Result<NodeId>,
{
    if x.cols() != cfg.width() {
        return Err(Error::shape("x", format!("width {} vs model width {}", x.cols(), cfg.width())));
    }
    let mut b = Builder::new(cfg, 1, x.rows())?;
    let xin = b.g.data("x", x.rows(), x.cols())?;
    let out = build(&mut b, xin)?;
    b.g.set_output(out);
    let mut data = HashMap::new();
    data.insert("x".to_string(), x.clone());
    Ok((b.g, data))
}

/// Attention sub-layer applied directly to `x` (one sequence, no pre-norm).
/// Returns the projected output and the scaled pre-mask scores per head.
pub fn attention_forward(x: &Mat, params: &ParamSet, cfg: &ModelConfig, layer: usize) -> Result<(Mat, Vec<Mat>)> {
    let mut scores = Vec::new();
    let (g, data) = sublayer_graph(cfg, x, |b, xin| {
        let (out, s) = b.attention(xin, layer)?;
        scores = s;
        Ok(out)
    })?;
    let vals = g.evaluate(&Feed { params, data: &data })?;
    Ok((
        vals.output().expect("output set").clone(),
        scores.iter().map(|&s| vals.get(s).clone()).collect(),
    ))
}

#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub y: Mat,
    pub router_logits: Mat,
    pub counts: Vec<f64>,
    /// Selected expert indices per token.
    pub selected: Mat,
    pub aux: f64,
}

/// MoE sub-layer applied directly to `x` (no pre-norm).
pub fn moe_forward(x: &Mat, params: &ParamSet, cfg: &ModelConfig, layer: usize) -> Result<MoeOutput> {
    let mut nodes = None;
    let (g, data) = sublayer_graph(cfg, x, |b, xin| {
        let m = b.moe(xin, layer)?;
        let out = m.out;
        nodes = Some(m);
        Ok(out)
    })?;
    let m = nodes.expect("built");
    let vals = g.evaluate(&Feed { params, data: &data })?;
    let pool = cfg.moe_layout()?.expect("moe present").pool;
    let mut counts = vec![0.0; pool];
    for &i in vals.get(m.dispatch).as_slice() {
        counts[i as usize] += 1.0;
    }
    Ok(MoeOutput {
        y: vals.output().expect("output set").clone(),
        router_logits: vals.get(m.router).clone(),
        counts,
        selected: vals.get(m.dispatch).clone(),
        aux: vals.get(m.aux).get(0, 0),
    })
}

/// One full pre-norm block on a single sequence.
pub fn block_forward(x: &Mat, params: &ParamSet, cfg: &ModelConfig, layer: usize) -> Result<Mat> {
    let (g, data) = sublayer_graph(cfg, x, |b, xin| Ok(b.block(xin, layer)?.0))?;
    let vals = g.evaluate(&Feed { params, data: &data })?;
    Ok(vals.output().expect("output set").clone())
}

/// Random token windows for tests and smoke runs.
pub fn random_batch<R: Rng + ?Sized>(batch: usize, seq: usize, vocab: usize, rng: &mut R) -> Result<Batch> {
    let windows: Vec<Vec<u32>> = (0..batch)
        .map(|_| (0..=seq).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect();
    Batch::from_windows(&windows)
}
