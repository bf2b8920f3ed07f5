//! Shared input builders for the criterion benches.

use gtfdeer::model::{ShplrnnDims, ShplrnnParams};
use gtfdeer::numerics::stream;
use gtfdeer::{AffineSeq, DenseMatrix, Projector, ScanKind};
use rand::Rng as _;

/// `len` random affine maps of size `dim` with spectral norm below one.
pub fn affine_seq(kind: ScanKind, dim: usize, len: usize, seed: u64) -> AffineSeq {
    let mut rng = stream(seed, 0);
    let mut seq = AffineSeq::zeros(kind, dim, len);
    let scale = match kind {
        ScanKind::Dense => 0.9 / dim as f64,
        ScanKind::Diagonal => 0.9,
    };
    for t in 0..len {
        for a in seq.mat_mut(t) {
            *a = scale * rng.random_range(-1.0..1.0);
        }
        for b in seq.vec_mut(t) {
            *b = rng.random_range(-1.0..1.0);
        }
    }
    seq
}

/// Fully observed model with `L = 2M`, its projector at `alpha`, and a
/// length-`t` standard-uniform target sequence.
pub struct FbCase {
    pub params: ShplrnnParams,
    pub projector: Projector,
    pub x: DenseMatrix,
}

pub fn fb_case(m: usize, t: usize, alpha: f64, seed: u64) -> FbCase {
    let mut rng = stream(seed, m as u64);
    let dims = ShplrnnDims {
        latent: m,
        hidden: 2 * m,
        obs: m,
        inputs: 0,
        rank: None,
        m_reg: 0,
    };
    let params = ShplrnnParams::init(dims, 0.9, &mut rng).expect("valid dimensions");
    let projector = Projector::new(&params.readout, alpha).expect("valid readout");
    let x = DenseMatrix::from_fn(t + 1, m, |_, _| rng.random_range(-1.0..1.0));
    FbCase { params, projector, x }
}
