//! Frobenius-sphere optimizers, HyperP parameterization, miniature Transformer
//! and MoE models, and the scaling-law fitting used to study them.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod hyperp;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod plotdata;
pub mod reference_data;
pub mod scalefit;
pub mod stability;
pub mod theoremlab;
pub mod train;

pub use error::{Error, Result};
pub use hyperp::{Group, LayerDims, Multipliers, ScaleBase, Scheme, TransferAnchor};
pub use linalg::Mat;
pub use model::{Batch, ModelConfig, MoeConfig, ParamSet, ParamSpec};
pub use optim::{OptimConfig, OptimizerKind, OptimizerState};
pub use scalefit::{PowerFit, QuadFit, SweepPoint};
pub use stability::StabilityReport;
pub use train::{RunConfig, RunLogRecord, RunSummary};
