//! Generalized teacher forcing with the row-space projector.
//!
//! With `P_α = I − αB⁺B`, a latent state is forced toward the data as
//! `δ(z, x) = P_α z + αB⁺x`, and the Jacobian of the forced step is
//! `J_F(δ(z, x))·P_α`. Warm-up steps use `α = 1`.

use crate::error::{Error, Result};
use crate::model::LatentMap;
use crate::numerics::{pinv, svd, DenseMatrix, PINV_DEFAULT_CUTOFF};

/// Per-update quantities that depend only on `B` and `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub alpha: f64,
    /// `B⁺`, `M × N`
    pub b_pinv: DenseMatrix,
    /// `I − αB⁺B`
    pub p_alpha: DenseMatrix,
    /// `I − B⁺B`
    pub p_one: DenseMatrix,
    /// `B` has full column rank, so `B⁺B = I` and `P_α = (1 − α)I` exactly.
    pub full_column_rank: bool,
    /// `rank(B) < min(M, N)`; `B⁺` was computed with the singular-value cutoff.
    pub rank_deficient: bool,
}

impl Projector {
    pub fn new(readout_b: &DenseMatrix, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
        let (n, m) = readout_b.shape();
        let rank = svd(readout_b)?.rank(PINV_DEFAULT_CUTOFF);
        let b_pinv = pinv(readout_b, PINV_DEFAULT_CUTOFF)?;
        let full_column_rank = rank == m;
        let (p_alpha, p_one) = if full_column_rank {
            (DenseMatrix::identity(m).scaled(1.0 - alpha), DenseMatrix::zeros(m, m))
        } else {
            let bb = b_pinv.matmul(readout_b);
            let id = DenseMatrix::identity(m);
            (id.sub(&bb.scaled(alpha)), id.sub(&bb))
        };
        Ok(Self {
            alpha,
            b_pinv,
            p_alpha,
            p_one,
            full_column_rank,
            rank_deficient: rank < m.min(n),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.b_pinv.rows()
    }

    /// `(projector, α)` in effect at time `t`.
    fn at(&self, t: usize, warmup_len: usize) -> (&DenseMatrix, f64) {
        if t <= warmup_len {
            (&self.p_one, 1.0)
        } else {
            (&self.p_alpha, self.alpha)
        }
    }
}

/// Forcing for one sequence: the shared projector plus its targets
/// `z̄_t = B⁺x_t`, `t = 0 … T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingPlan {
    pub projector: Projector,
    pub warmup_len: usize,
    /// `(T + 1) × M`
    pub targets: DenseMatrix,
}

impl ForcingPlan {
    pub fn new(projector: Projector, x_seq: &DenseMatrix, warmup_len: usize) -> Result<Self> {
        let (m, n) = projector.b_pinv.shape();
        if x_seq.cols() != n {
            return Err(Error::shape(format!(
                "data has {} columns, readout expects {n}",
                x_seq.cols()
            )));
        }
        if x_seq.rows() < 2 {
            return Err(Error::InvalidArgument("need at least x_0 and x_1".into()));
        }
        let mut targets = DenseMatrix::zeros(x_seq.rows(), m);
        for t in 0..x_seq.rows() {
            projector.b_pinv.matvec_into(x_seq.row(t), targets.row_mut(t));
        }
        Ok(Self {
            projector,
            warmup_len,
            targets,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.projector.alpha
    }

    /// Number of transitions `T`.
    pub fn seq_len(&self) -> usize {
        self.targets.rows() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Projector applied to the state before the transition out of `t`.
    pub fn projector_at(&self, t: usize) -> &DenseMatrix {
        self.projector.at(t, self.warmup_len).0
    }

    /// `P z_t + α z̄_t`, with `α = 1` while `t ≤ T_w`.
    pub fn force_state_into(&self, z: &[f64], t: usize, out: &mut [f64]) {
        let (p, alpha) = self.projector.at(t, self.warmup_len);
        let target = self.targets.row(t);
        if self.projector.full_column_rank {
            let keep = 1.0 - alpha;
            for ((o, zi), zb) in out.iter_mut().zip(z).zip(target) {
                *o = keep * zi + alpha * zb;
            }
        } else {
            p.matvec_into(z, out);
            for (o, zb) in out.iter_mut().zip(target) {
                *o += alpha * zb;
            }
        }
    }
}

pub fn build_plan(readout_b: &DenseMatrix, x_seq: &DenseMatrix, alpha: f64, warmup_len: usize) -> Result<ForcingPlan> {
    ForcingPlan::new(Projector::new(readout_b, alpha)?, x_seq, warmup_len)
}

pub fn force_state(plan: &ForcingPlan, z: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    plan.force_state_into(z, t, &mut out);
    out
}

/// `J_F(z̃_t)·P_t` into `out`; `scratch` holds `J_F`.
pub fn forced_jacobian_into<F: LatentMap + ?Sized>(
    map: &F,
    plan: &ForcingPlan,
    z_tilde: &[f64],
    t: usize,
    scratch: &mut DenseMatrix,
    out: &mut DenseMatrix,
) {
    let (p, alpha) = plan.projector.at(t, plan.warmup_len);
    if plan.projector.full_column_rank {
        map.jacobian_into(z_tilde, out);
        out.scale_mut(1.0 - alpha);
    } else {
        map.jacobian_into(z_tilde, scratch);
        crate::numerics::matmul_into(scratch, p, out);
    }
}

pub fn forced_jacobian<F: LatentMap + ?Sized>(map: &F, plan: &ForcingPlan, z_tilde: &[f64], t: usize) -> DenseMatrix {
    let m = plan.latent_dim();
    let mut scratch = DenseMatrix::zeros(m, m);
    let mut out = DenseMatrix::zeros(m, m);
    forced_jacobian_into(map, plan, z_tilde, t, &mut scratch, &mut out);
    out
}

/// Diagonal of `J_F(z̃_t)·P_t`.
pub fn forced_jacobian_diag<F: LatentMap + ?Sized>(map: &F, plan: &ForcingPlan, z_tilde: &[f64], t: usize) -> Vec<f64> {
    let (p, alpha) = plan.projector.at(t, plan.warmup_len);
    if plan.projector.full_column_rank {
        let mut d = map.jacobian_diag(z_tilde);
        d.iter_mut().for_each(|x| *x *= 1.0 - alpha);
        d
    } else {
        let j = {
            let m = plan.latent_dim();
            let mut j = DenseMatrix::zeros(m, m);
            map.jacobian_into(z_tilde, &mut j);
            j
        };
        (0..p.rows())
            .map(|i| (0..p.rows()).map(|k| j[(i, k)] * p[(k, i)]).sum())
            .collect()
    }
}

/// Smallest forcing that makes a map with Jacobian norm bound `σ̄`
/// contracting: `max(0, 1 − 1/σ̄)`.
pub fn critical_alpha(sigma_bar: f64) -> f64 {
    (1.0 - 1.0 / sigma_bar).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ShplrnnDims, ShplrnnParams};
    use crate::numerics::{seeded, spectral_norm_upper_bound};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = seeded(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_params(m: usize, l: usize, n: usize, seed: u64) -> ShplrnnParams {
        let mut rng = seeded(seed);
        let mut p = ShplrnnParams::init(
            ShplrnnDims {
                latent: m,
                hidden: l,
                obs: n,
                inputs: 0,
                rank: None,
                m_reg: 0,
            },
            0.5,
            &mut rng,
        )
        .unwrap();
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        p.readout = random_matrix(n, m, seed + 100);
        p
    }

    #[test]
    fn identity_readout_gives_scaled_identity_projector() {
        let b = DenseMatrix::identity(3);
        let x = random_matrix(10, 3, 1);
        let plan = build_plan(&b, &x, 0.3, 0).unwrap();
        assert_eq!(plan.projector.p_alpha, DenseMatrix::identity(3).scaled(0.7));
        assert_eq!(plan.targets, x);
    }

    #[test]
    fn alpha_zero_is_no_forcing() {
        let b = random_matrix(2, 5, 2);
        let x = random_matrix(6, 2, 3);
        let plan = build_plan(&b, &x, 0.0, 0).unwrap();
        assert!(plan.projector.p_alpha.sub(&DenseMatrix::identity(5)).max_abs() < 1e-15);
        let z = [0.1, -0.2, 0.3, 0.4, -0.5];
        assert_eq!(force_state(&plan, &z, 3), z.to_vec());
    }

    #[test]
    fn p_one_annihilates_row_space() {
        let b = random_matrix(3, 7, 4);
        let proj = Projector::new(&b, 0.5).unwrap();
        assert!(proj.p_one.matmul(&proj.b_pinv).max_abs() < 1e-12);
        let sq = proj.p_one.matmul(&proj.p_one);
        assert!(sq.sub(&proj.p_one).max_abs() < 1e-10);
        let bb = proj.b_pinv.matmul(&b);
        let want = DenseMatrix::identity(7).sub(&bb.scaled(0.5));
        assert!(proj.p_alpha.sub(&want).max_abs() < 1e-12);
    }

    #[test]
    fn full_forcing_square_hits_targets_exactly() {
        let b = random_matrix(3, 3, 5);
        let x = random_matrix(8, 3, 6);
        let plan = build_plan(&b, &x, 1.0, 0).unwrap();
        for t in 0..8 {
            let zt = force_state(&plan, &[4.0, -3.0, 2.0], t);
            assert_eq!(zt, plan.targets.row(t).to_vec());
        }
    }

    #[test]
    fn full_forcing_pins_observed_subspace() {
        let b = random_matrix(3, 5, 7);
        let x = random_matrix(4, 3, 8);
        let plan = build_plan(&b, &x, 1.0, 0).unwrap();
        let z = [1.0, 2.0, -1.0, 0.5, 3.0];
        for t in 0..4 {
            let xr = b.matvec(&force_state(&plan, &z, t));
            for (a, c) in xr.iter().zip(x.row(t)) {
                assert!((a - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn warmup_uses_full_forcing() {
        let b = random_matrix(3, 3, 9);
        let x = random_matrix(10, 3, 10);
        let plan = build_plan(&b, &x, 0.1, 4).unwrap();
        let z = [5.0, 5.0, 5.0];
        assert_eq!(force_state(&plan, &z, 4), plan.targets.row(4).to_vec());
        assert_ne!(force_state(&plan, &z, 5), plan.targets.row(5).to_vec());
    }

    #[test]
    fn forced_jacobian_square_cases() {
        let p = random_params(3, 6, 3, 11);
        let x = random_matrix(5, 3, 12);
        let z = [0.3, -0.1, 0.2];
        let full = build_plan(&p.readout, &x, 1.0, 0).unwrap();
        assert_eq!(forced_jacobian(&p, &full, &z, 2).max_abs(), 0.0);
        let part = build_plan(&p.readout, &x, 0.25, 0).unwrap();
        let got = forced_jacobian(&p, &part, &z, 2);
        let want = p.jacobian(&z).scaled(0.75);
        assert!(got.sub(&want).max_abs() < 1e-15);
        let d = forced_jacobian_diag(&p, &part, &z, 2);
        assert_eq!(d, got.diag());
    }

    #[test]
    fn forced_jacobian_norm_is_submultiplicative() {
        let p = random_params(6, 12, 2, 13);
        let x = random_matrix(5, 2, 14);
        let plan = build_plan(&p.readout, &x, 0.6, 0).unwrap();
        let z = [0.1, 0.2, -0.3, 0.4, 0.0, -0.1];
        let jf = forced_jacobian(&p, &plan, &z, 3);
        let bound = p.jacobian(&z).spectral_norm().unwrap() * plan.projector.p_alpha.spectral_norm().unwrap();
        assert!(jf.spectral_norm().unwrap() <= bound + 1e-12);
        let d = forced_jacobian_diag(&p, &plan, &z, 3);
        for (a, b) in d.iter().zip(jf.diag()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_readout_is_flagged() {
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0, 0.0], &[2.0, 4.0, 0.0]]);
        let proj = Projector::new(&b, 0.5).unwrap();
        assert!(proj.rank_deficient);
        assert!(proj.p_alpha.is_finite());
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        assert!(Projector::new(&DenseMatrix::identity(2), 1.5).is_err());
    }

    #[test]
    fn critical_alpha_values() {
        assert_eq!(critical_alpha(2.0), 0.5);
        assert_eq!(critical_alpha(0.8), 0.0);
        assert_eq!(critical_alpha(1.0), 0.0);
        let s = 3.0;
        let a = critical_alpha(s) + 0.01;
        assert!((1.0 - a) * s < 1.0);
    }

    proptest! {
        #[test]
        fn forced_products_contract(seed in 0u64..300) {
            let p = random_params(3, 8, 3, seed);
            let sigma = spectral_norm_upper_bound(&p).unwrap();
            let alpha = (critical_alpha(sigma) + 0.05).min(1.0);
            let rho = (1.0 - alpha) * sigma;
            let mut rng = seeded(seed + 7);
            let x = DenseMatrix::from_fn(51, 3, |_, _| rng.random_range(-2.0..2.0));
            let plan = build_plan(&p.readout, &x, alpha, 0).unwrap();
            let mut prod = DenseMatrix::identity(3);
            let mut z = plan.targets.row(0).to_vec();
            for k in 1..=50 {
                let zt = force_state(&plan, &z, k - 1);
                prod = forced_jacobian(&p, &plan, &zt, k - 1).matmul(&prod);
                prop_assert!(prod.spectral_norm().unwrap() <= rho.powi(k as i32) * (1.0 + 1e-9) + 1e-300);
                z = p.step(&zt, None);
            }
        }
    }
}
