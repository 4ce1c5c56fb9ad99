//! Per-parameter multipliers for the μP, μP++ and HyperP schemes, and the
//! closed-form learning-rate laws over tokens and batch size.
//!
//! Every multiplier is normalized to 1 at the reference scale `(d₀, w₀, T₀)`,
//! so the base learning rate is the literal rate used at the smallest model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent of the token-count law.
pub const DATA_EXPONENT: f64 = 0.32;
/// Amplitude of the token-count law `η* = A·T^-0.32`.
pub const DATA_AMPLITUDE: f64 = 24.27;
pub const BATCH_EXPONENT: f64 = 0.558;
pub const BATCH_AMPLITUDE: f64 = 4.66e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[serde(rename = "mup")]
    MuP,
    #[serde(rename = "muppp")]
    MuPpp,
    #[serde(rename = "hyperp")]
    HyperP,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::MuP, Scheme::MuPpp, Scheme::HyperP];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::MuP => "mup",
            Scheme::MuPpp => "muppp",
            Scheme::HyperP => "hyperp",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mup" => Ok(Scheme::MuP),
            "muppp" | "mup++" => Ok(Scheme::MuPpp),
            "hyperp" => Ok(Scheme::HyperP),
            other => Err(Error::Structural(format!("unknown scheme '{other}'"))),
        }
    }
}

/// The three parameter roles that select a multiplier row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    EmbeddingVector,
    Unembedding,
    Hidden,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::EmbeddingVector, Group::Unembedding, Group::Hidden];

    pub fn name(self) -> &'static str {
        match self {
            Group::EmbeddingVector => "embedding_vector",
            Group::Unembedding => "unembedding",
            Group::Hidden => "hidden",
        }
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding_vector" | "embedding" | "vector" => Ok(Group::EmbeddingVector),
            "unembedding" => Ok(Group::Unembedding),
            "hidden" => Ok(Group::Hidden),
            other => Err(Error::Structural(format!("unknown parameter group '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lr_mult: f64,
    /// Relative to the framework default init (Kaiming-uniform for matrices,
    /// N(0,1) for the embedding, ones for gains).
    pub init_std_mult: f64,
    /// Applied to residual-branch outputs; 1 where the scheme has none.
    pub res_mult: f64,
    /// Output multiplier on the parameter's forward product.
    pub weight_mult: f64,
    /// Multiplier on the base weight decay.
    pub weight_decay: f64,
}

/// Reference scale at which all multipliers equal 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBase {
    pub d0: usize,
    pub w0: usize,
    pub t0: f64,
    /// Depth-μP factors (1/√d learning rate, 1/√(2d) residual). Disabling them
    /// is only meaningful for ablations.
    #[serde(default = "default_true")]
    pub depth_mup: bool,
}

fn default_true() -> bool {
    true
}

/// Shape and budget of one parameter at the target scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDims {
    pub w: usize,
    pub d: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tokens: f64,
}

/// Table-driven multipliers for one parameter.
pub fn multipliers(scheme: Scheme, group: Group, dims: &LayerDims, base: &ScaleBase) -> Result<Multipliers> {
    let LayerDims {
        w,
        d,
        d_in,
        d_out,
        tokens,
    } = *dims;
    if w == 0 || d == 0 || d_in == 0 || d_out == 0 || base.d0 == 0 || base.w0 == 0 {
        return Err(Error::Structural(format!("non-positive dimension in {dims:?} / {base:?}")));
    }
    if !(tokens > 0.0 && base.t0 > 0.0) {
        return Err(Error::Structural("token counts must be positive".into()));
    }
    let depth = if base.depth_mup {
        (base.d0 as f64 / d as f64).sqrt()
    } else {
        1.0
    };
    let res = if base.depth_mup {
        1.0 / (2.0 * d as f64).sqrt()
    } else {
        1.0
    };
    let shape = (d_out as f64 / d_in as f64).sqrt();
    let width_ratio = base.w0 as f64 / w as f64;
    let data = (base.t0 / tokens).powf(DATA_EXPONENT);
    let sqrt_width = (w as f64 / base.w0 as f64).sqrt();

    let m = match (scheme, group) {
        (Scheme::MuP, Group::EmbeddingVector) => Multipliers {
            lr_mult: 1.0,
            init_std_mult: 1.0,
            res_mult: 1.0,
            weight_mult: 1.0,
            weight_decay: 1.0,
        },
        (Scheme::MuPpp | Scheme::HyperP, Group::EmbeddingVector) => Multipliers {
            lr_mult: depth,
            init_std_mult: 1.0,
            res_mult: 1.0,
            weight_mult: 1.0,
            weight_decay: 0.0,
        },
        (Scheme::MuP, Group::Unembedding) => Multipliers {
            lr_mult: 1.0,
            init_std_mult: sqrt_width,
            res_mult: 1.0,
            weight_mult: width_ratio,
            weight_decay: 1.0,
        },
        (Scheme::MuPpp, Group::Unembedding) => Multipliers {
            lr_mult: depth,
            init_std_mult: sqrt_width,
            res_mult: 1.0,
            weight_mult: width_ratio,
            weight_decay: 0.0,
        },
        (Scheme::HyperP, Group::Unembedding) => Multipliers {
            lr_mult: depth,
            init_std_mult: sqrt_width,
            res_mult: 1.0,
            weight_mult: 1.0,
            weight_decay: 0.0,
        },
        (Scheme::MuP, Group::Hidden) => Multipliers {
            lr_mult: shape,
            init_std_mult: 1.0,
            res_mult: 1.0,
            weight_mult: 1.0,
            weight_decay: width_ratio,
        },
        (Scheme::MuPpp, Group::Hidden) => Multipliers {
            lr_mult: shape * depth,
            init_std_mult: 1.0,
            res_mult: res,
            weight_mult: 1.0,
            weight_decay: width_ratio,
        },
        (Scheme::HyperP, Group::Hidden) => Multipliers {
            lr_mult: depth * data,
            init_std_mult: 1.0,
            res_mult: res,
            weight_mult: 1.0,
            weight_decay: 0.0,
        },
    };
    Ok(m)
}

/// Residual-branch multiplier for a depth-`d` model.
pub fn residual_multiplier(scheme: Scheme, d: usize, depth_mup: bool) -> f64 {
    match scheme {
        Scheme::MuP => 1.0,
        Scheme::MuPpp | Scheme::HyperP if depth_mup => 1.0 / (2.0 * d as f64).sqrt(),
        _ => 1.0,
    }
}

/// Where the base learning rate was tuned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferAnchor {
    pub eta0: f64,
    pub d0: usize,
    pub t0: f64,
    pub b0: f64,
}

impl TransferAnchor {
    pub fn validate(&self) -> Result<()> {
        if self.eta0 > 0.0 && self.d0 > 0 && self.t0 > 0.0 && self.b0 > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("transfer anchor must be positive: {self:?}")))
        }
    }
}

/// `η₀·√(d₀/d)·(T₀/T)^0.32`.
pub fn transfer_lr(anchor: &TransferAnchor, d: usize, tokens: f64) -> f64 {
    anchor.eta0 * (anchor.d0 as f64 / d as f64).sqrt() * (anchor.t0 / tokens).powf(DATA_EXPONENT)
}

/// Fitted optimum over training tokens at fixed depth.
pub fn eval_data_law(tokens: f64) -> f64 {
    DATA_AMPLITUDE * tokens.powf(-DATA_EXPONENT)
}

/// Fitted optimum over batch size in tokens.
pub fn eval_batch_law(batch_tokens: f64) -> f64 {
    BATCH_AMPLITUDE * batch_tokens.powf(BATCH_EXPONENT)
}
