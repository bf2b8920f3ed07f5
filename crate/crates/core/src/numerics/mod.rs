//! Small dense linear algebra and random streams shared by every module.

pub mod matrix;
pub mod rng;
pub mod svd;

pub use matrix::{axpy, dot, inf_norm, matmul_into, norm2, DenseMatrix};
pub use rng::{seeded, stream, Rng};
pub use svd::{pinv, svd, SvdFactors, PINV_DEFAULT_CUTOFF};

use crate::error::Result;
use crate::model::ShplrnnParams;

/// Global upper bound on `‖J_F(z)‖₂` for the shPLRNN:
/// `max|A_ii| + ‖W‖₂·‖V‖₂`, valid because the ReLU gate is a 0/1 diagonal.
pub fn spectral_norm_upper_bound(params: &ShplrnnParams) -> Result<f64> {
    let a_max = params.a_diag().iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    let w_norm = params.w_effective().spectral_norm()?;
    let v_norm = params.v.spectral_norm()?;
    Ok(a_max + w_norm * v_norm)
}
