//! Generalized teacher forcing with parallel Newton (DEER) solves for
//! piecewise-linear recurrent models.

// `!(x > 0.0)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod deer;
pub mod error;
pub mod forcing;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod presets;
pub mod pscan;
pub mod systems;
pub mod trainer;

pub use deer::{DeerConfig, DeerState, InitStrategy, JacobianMode};
pub use error::{Error, Result};
pub use forcing::{ForcingPlan, Projector};
pub use metrics::{DstspConfig, DstspValue, EvalConfig, EvalReport, LyapunovReport};
pub use model::checkpoint::Checkpoint;
pub use model::{
    Connectivity, LatentMap, LssmDims, LssmParams, Model, ModelKind, Parameters, ShplrnnDims, ShplrnnParams,
};
pub use numerics::{DenseMatrix, Rng};
pub use objective::{LossBreakdown, RegConfig};
pub use presets::{ExperimentPreset, PresetName};
pub use pscan::{AffineElement, AffineSeq, ScanKind, ScanMode};
pub use systems::{OdeSpec, Role, SplitConfig, SystemKind, TrajectorySet};
pub use trainer::{Rollout, TrainConfig, TrainMode, TrainReport, Trainer};
