//! Parameter containers, single-step maps, Jacobians and parameter
//! derivative contractions for the two model families.

pub mod checkpoint;
mod lssm;
mod params;
mod shplrnn;

pub use lssm::{LssmDims, LssmParams};
pub use params::{ParamView, Parameters};
pub use shplrnn::{Connectivity, ShplrnnDims, ShplrnnParams};

use serde::{Deserialize, Serialize};

/// Either model family, for code that dispatches at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Shplrnn(ShplrnnParams),
    Lssm(LssmParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Shplrnn,
    Lssm,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Shplrnn(_) => ModelKind::Shplrnn,
            Model::Lssm(_) => ModelKind::Lssm,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Model::Shplrnn(p) => p.latent_dim(),
            Model::Lssm(p) => p.latent_dim(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Model::Shplrnn(p) => p.obs_dim(),
            Model::Lssm(p) => p.obs_dim(),
        }
    }

    pub fn readout(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Model::Shplrnn(p) => p.readout(z),
            Model::Lssm(p) => p.readout(z),
        }
    }

    /// Free-running (unforced) step.
    pub fn free_step(&self, z: &[f64], input: Option<&[f64]>) -> Vec<f64> {
        match self {
            Model::Shplrnn(p) => p.step(z, input),
            Model::Lssm(p) => p.generate_step(z, input),
        }
    }

    pub fn arrays(&self) -> Vec<ParamView<'_>> {
        match self {
            Model::Shplrnn(p) => p.arrays(),
            Model::Lssm(p) => p.arrays(),
        }
    }
}

/// A latent transition `F` with its state Jacobian, as consumed by the
/// forward solvers and the adjoint.
pub trait LatentMap: Sync {
    fn latent_dim(&self) -> usize;
    fn step_into(&self, z: &[f64], input: Option<&[f64]>, out: &mut [f64]);
    fn jacobian_into(&self, z: &[f64], out: &mut crate::numerics::DenseMatrix);
    fn jacobian_diag(&self, z: &[f64]) -> Vec<f64>;
}

impl LatentMap for ShplrnnParams {
    fn latent_dim(&self) -> usize {
        ShplrnnParams::latent_dim(self)
    }

    fn step_into(&self, z: &[f64], input: Option<&[f64]>, out: &mut [f64]) {
        ShplrnnParams::step_into(self, z, input, out)
    }

    fn jacobian_into(&self, z: &[f64], out: &mut crate::numerics::DenseMatrix) {
        ShplrnnParams::jacobian_into(self, z, out)
    }

    fn jacobian_diag(&self, z: &[f64]) -> Vec<f64> {
        ShplrnnParams::jacobian_diag(self, z)
    }
}
