//! Newton fixed-point solve of the forced rollout.
//!
//! The unknowns are `z_1 … z_T` (with `z_0` fixed). Each iteration
//! linearizes `r_t = z_t − F(z̃_{t−1})` at the current guess and solves
//! `Δz_t = J̃_t Δz_{t−1} − r_t`, `Δz_0 = 0`, with one affine scan, where
//! `J̃_t = J_F(z̃_{t−1})·P_{t−1}`. The loop stops once `‖Δz‖∞ < ε`; the
//! reported count includes that final (verification) iteration.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forcing::{forced_jacobian_diag, forced_jacobian_into, ForcingPlan};
use crate::model::LatentMap;
use crate::numerics::{inf_norm, stream, DenseMatrix};
use crate::pscan::{scan, AffineSeq, ScanKind, ScanMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    Full,
    /// Quasi-DEER: keep only `diag(J̃_t)`.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Zeros,
    StandardNormal,
    /// Start from the teacher signal `z̄_t = B⁺x_t`.
    PinvTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeerConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    pub jacobian_mode: JacobianMode,
    pub init_strategy: InitStrategy,
    /// Scan workers; `1` runs the sequential fold.
    pub workers: usize,
    /// Seed for the `standard_normal` initial guess.
    pub init_seed: u64,
}

impl Default for DeerConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_iters: 500,
            jacobian_mode: JacobianMode::Full,
            init_strategy: InitStrategy::PinvTargets,
            workers: 1,
            init_seed: 0,
        }
    }
}

impl DeerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tolerance > 0.0) {
            problems.push(format!("deer.tolerance must be > 0 (got {})", self.tolerance));
        }
        if self.max_iters < 2 {
            problems.push(format!("deer.max_iters must be >= 2 (got {})", self.max_iters));
        }
        if self.workers == 0 {
            problems.push("deer.workers must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn scan_mode(&self) -> ScanMode {
        if self.workers <= 1 {
            ScanMode::Sequential
        } else {
            ScanMode::Parallel { workers: self.workers }
        }
    }

    fn scan_kind(&self) -> ScanKind {
        match self.jacobian_mode {
            JacobianMode::Full => ScanKind::Dense,
            JacobianMode::Diagonal => ScanKind::Diagonal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeerState {
    /// `(T + 1) × M`; row 0 is the fixed `z_0`.
    pub z: DenseMatrix,
    pub iterations_used: usize,
    /// `‖r‖∞` at the start of each iteration.
    pub residual_norm_history: Vec<f64>,
    /// `‖Δz‖∞` of each iteration.
    pub delta_norm_history: Vec<f64>,
    pub converged: bool,
    /// `T × M`; row `t` is the forced state `z̃_t` of the last linearization.
    pub forced: DenseMatrix,
    /// Last linearization: element `t − 1` is `(J̃_t, −r_t)`.
    pub linearization: AffineSeq,
}

impl DeerState {
    pub fn seq_len(&self) -> usize {
        self.z.rows() - 1
    }

    pub fn final_delta(&self) -> f64 {
        self.delta_norm_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn input_row(inputs: Option<&DenseMatrix>, t: usize) -> Option<&[f64]> {
    inputs.map(|s| s.row(t - 1))
}

fn check_shapes(plan: &ForcingPlan, inputs: Option<&DenseMatrix>, m: usize) -> Result<()> {
    if plan.latent_dim() != m {
        return Err(Error::shape(format!(
            "plan latent dim {} vs model {m}",
            plan.latent_dim()
        )));
    }
    if let Some(s) = inputs {
        if s.rows() != plan.seq_len() {
            return Err(Error::shape(format!(
                "inputs have {} rows, expected T = {}",
                s.rows(),
                plan.seq_len()
            )));
        }
    }
    Ok(())
}

/// Forced states `z̃_t`, `t = 0 … T−1`.
fn forced_states(plan: &ForcingPlan, z: &DenseMatrix) -> DenseMatrix {
    let t_len = plan.seq_len();
    let m = plan.latent_dim();
    let mut forced = DenseMatrix::zeros(t_len, m);
    forced
        .data_mut()
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(t, out)| plan.force_state_into(z.row(t), t, out));
    forced
}

/// `r_t = z_t − F(z̃_{t−1})`, `t = 1 … T`, as a `T × M` matrix.
pub fn residual<F: LatentMap + ?Sized>(
    map: &F,
    plan: &ForcingPlan,
    z_seq: &DenseMatrix,
    inputs: Option<&DenseMatrix>,
) -> Result<DenseMatrix> {
    let m = map.latent_dim();
    check_shapes(plan, inputs, m)?;
    if z_seq.shape() != (plan.seq_len() + 1, m) {
        return Err(Error::shape("z_seq must be (T + 1) × M"));
    }
    let forced = forced_states(plan, z_seq);
    let mut r = DenseMatrix::zeros(plan.seq_len(), m);
    r.data_mut().par_chunks_mut(m).enumerate().for_each(|(i, out)| {
        let t = i + 1;
        map.step_into(forced.row(t - 1), input_row(inputs, t), out);
        for (o, zi) in out.iter_mut().zip(z_seq.row(t)) {
            *o = zi - *o;
        }
    });
    Ok(r)
}

/// Builds `(J̃_t, −r_t)` for `t = 1 … T` at the current guess.
fn linearize<F: LatentMap + ?Sized>(
    map: &F,
    plan: &ForcingPlan,
    z: &DenseMatrix,
    inputs: Option<&DenseMatrix>,
    kind: ScanKind,
) -> (AffineSeq, DenseMatrix) {
    let t_len = plan.seq_len();
    let m = plan.latent_dim();
    let forced = forced_states(plan, z);
    let mut elems = AffineSeq::zeros(kind, m, t_len);
    elems.elements_mut().enumerate().for_each_init(
        || (DenseMatrix::zeros(m, m), DenseMatrix::zeros(m, m)),
        |(scratch, jac), (i, (mat, vec))| {
            let t = i + 1;
            let zt = forced.row(t - 1);
            map.step_into(zt, input_row(inputs, t), vec);
            for (v, zi) in vec.iter_mut().zip(z.row(t)) {
                *v -= zi;
            }
            match kind {
                ScanKind::Dense => {
                    forced_jacobian_into(map, plan, zt, t - 1, scratch, jac);
                    mat.copy_from_slice(jac.data());
                }
                ScanKind::Diagonal => {
                    mat.copy_from_slice(&forced_jacobian_diag(map, plan, zt, t - 1));
                }
            }
        },
    );
    (elems, forced)
}

/// Initial guess for `z_1 … z_T`; row 0 holds `z0`.
pub fn initial_guess(plan: &ForcingPlan, z0: &[f64], config: &DeerConfig) -> DenseMatrix {
    let t_len = plan.seq_len();
    let m = plan.latent_dim();
    let mut z = match config.init_strategy {
        InitStrategy::Zeros => DenseMatrix::zeros(t_len + 1, m),
        InitStrategy::PinvTargets => plan.targets.clone(),
        InitStrategy::StandardNormal => {
            let mut rng = stream(config.init_seed, 0x0de3);
            DenseMatrix::from_fn(t_len + 1, m, |_, _| StandardNormal.sample(&mut rng))
        }
    };
    z.row_mut(0).copy_from_slice(z0);
    z
}

/// One Newton update of `state.z`, re-linearizing at the current guess.
/// Returns `‖Δz‖∞`.
pub fn newton_iteration<F: LatentMap + ?Sized>(
    map: &F,
    plan: &ForcingPlan,
    inputs: Option<&DenseMatrix>,
    state: &mut DeerState,
    config: &DeerConfig,
) -> Result<f64> {
    let iteration = state.iterations_used + 1;
    let (elems, forced) = linearize(map, plan, &state.z, inputs, config.scan_kind());
    let res_norm = elems.par_vecs().map(inf_norm).reduce(
        || 0.0,
        |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) },
    );
    if !elems.is_finite() {
        return Err(Error::NewtonDivergence { iteration });
    }
    let m = plan.latent_dim();
    let dz = scan(&elems, &vec![0.0; m], config.scan_mode())?;
    let dz_norm = inf_norm(dz.data());
    if !dz_norm.is_finite() {
        return Err(Error::NewtonDivergence { iteration });
    }
    state.z.data_mut()[m..]
        .iter_mut()
        .zip(dz.data())
        .for_each(|(z, d)| *z += d);
    state.residual_norm_history.push(res_norm);
    state.delta_norm_history.push(dz_norm);
    state.iterations_used = iteration;
    state.forced = forced;
    state.linearization = elems;
    state.converged = dz_norm < config.tolerance;
    Ok(dz_norm)
}

/// Newton loop from the configured initial guess. Hitting `max_iters`
/// returns a state with `converged = false`.
pub fn solve_forward<F: LatentMap + ?Sized>(
    map: &F,
    plan: &ForcingPlan,
    z0: &[f64],
    inputs: Option<&DenseMatrix>,
    config: &DeerConfig,
) -> Result<DeerState> {
    config.validate()?;
    let m = map.latent_dim();
    check_shapes(plan, inputs, m)?;
    if z0.len() != m {
        return Err(Error::shape(format!("z0 has length {}, expected {m}", z0.len())));
    }
    let mut state = DeerState {
        z: initial_guess(plan, z0, config),
        iterations_used: 0,
        residual_norm_history: Vec::new(),
        delta_norm_history: Vec::new(),
        converged: false,
        forced: DenseMatrix::zeros(0, m),
        linearization: AffineSeq::zeros(config.scan_kind(), m, 0),
    };
    while state.iterations_used < config.max_iters {
        newton_iteration(map, plan, inputs, &mut state, config)?;
        if state.converged {
            break;
        }
    }
    Ok(state)
}

/// Plain forced rollout `z_t = F(z̃_{t−1})`; `(T + 1) × M` with row 0 = `z0`.
pub fn sequential_rollout<F: LatentMap + ?Sized>(
    map: &F,
    plan: &ForcingPlan,
    z0: &[f64],
    inputs: Option<&DenseMatrix>,
) -> Result<DenseMatrix> {
    let m = map.latent_dim();
    check_shapes(plan, inputs, m)?;
    let t_len = plan.seq_len();
    let mut z = DenseMatrix::zeros(t_len + 1, m);
    z.row_mut(0).copy_from_slice(z0);
    let mut zt = vec![0.0; m];
    for t in 1..=t_len {
        plan.force_state_into(z.row(t - 1), t - 1, &mut zt);
        map.step_into(&zt, input_row(inputs, t), z.row_mut(t));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::build_plan;
    use crate::model::{ShplrnnDims, ShplrnnParams};
    use crate::numerics::seeded;
    use rand::Rng as _;

    /// `F(z) = A z + b`.
    struct Affine {
        a: DenseMatrix,
        b: Vec<f64>,
    }

    impl LatentMap for Affine {
        fn latent_dim(&self) -> usize {
            self.b.len()
        }
        fn step_into(&self, z: &[f64], _: Option<&[f64]>, out: &mut [f64]) {
            self.a.matvec_into(z, out);
            out.iter_mut().zip(&self.b).for_each(|(o, b)| *o += b);
        }
        fn jacobian_into(&self, _: &[f64], out: &mut DenseMatrix) {
            out.data_mut().copy_from_slice(self.a.data());
        }
        fn jacobian_diag(&self, _: &[f64]) -> Vec<f64> {
            self.a.diag()
        }
    }

    fn random_data(t: usize, n: usize, seed: u64) -> DenseMatrix {
        let mut rng = seeded(seed);
        DenseMatrix::from_fn(t + 1, n, |_, _| rng.random_range(-1.5..1.5))
    }

    fn random_model(m: usize, l: usize, n: usize, seed: u64) -> ShplrnnParams {
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
            0.3,
            &mut rng,
        )
        .unwrap();
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        p.h.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        p.readout = DenseMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        p
    }

    fn tight(workers: usize) -> DeerConfig {
        DeerConfig {
            tolerance: 1e-10,
            workers,
            ..DeerConfig::default()
        }
    }

    #[test]
    fn residual_vanishes_on_sequential_rollout() {
        let p = random_model(4, 10, 2, 1);
        let x = random_data(100, 2, 2);
        let plan = build_plan(&p.readout, &x, 0.3, 10).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let z = sequential_rollout(&p, &plan, &z0, None).unwrap();
        let r = residual(&p, &plan, &z, None).unwrap();
        assert!(r.max_abs() < 1e-12);
    }

    #[test]
    fn residual_of_zero_map_is_z() {
        let f = Affine {
            a: DenseMatrix::zeros(2, 2),
            b: vec![0.0; 2],
        };
        let x = random_data(20, 2, 3);
        let plan = build_plan(&DenseMatrix::identity(2), &x, 0.5, 0).unwrap();
        let z = random_data(20, 2, 4);
        let r = residual(&f, &plan, &z, None).unwrap();
        for t in 1..=20 {
            assert_eq!(r.row(t - 1), z.row(t));
        }
    }

    #[test]
    fn residual_matches_per_step_oracle() {
        let p = random_model(5, 8, 3, 5);
        let x = random_data(30, 3, 6);
        let plan = build_plan(&p.readout, &x, 0.2, 5).unwrap();
        let z = random_data(30, 5, 7);
        let r = residual(&p, &plan, &z, None).unwrap();
        for t in 1..=30 {
            let zt = crate::forcing::force_state(&plan, z.row(t - 1), t - 1);
            let f = p.step(&zt, None);
            for i in 0..5 {
                assert!((r[(t - 1, i)] - (z[(t, i)] - f[i])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_map_converges_after_one_update() {
        let mut rng = seeded(8);
        let f = Affine {
            a: DenseMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.6..0.6)),
            b: vec![0.1, -0.2, 0.3],
        };
        let x = random_data(200, 3, 9);
        let plan = build_plan(&DenseMatrix::identity(3), &x, 0.0, 0).unwrap();
        let cfg = DeerConfig {
            init_strategy: InitStrategy::Zeros,
            ..tight(1)
        };
        let z0 = [1.0, 1.0, 1.0];
        let s = solve_forward(&f, &plan, &z0, None, &cfg).unwrap();
        assert_eq!(s.iterations_used, 2);
        let want = sequential_rollout(&f, &plan, &z0, None).unwrap();
        assert!(s.z.sub(&want).max_abs() < 1e-10);
    }

    #[test]
    fn full_forcing_takes_two_iterations_for_any_length() {
        let p = random_model(3, 12, 3, 10);
        for t_len in [256, 4096] {
            let x = random_data(t_len, 3, 11);
            let plan = build_plan(&p.readout, &x, 1.0, 0).unwrap();
            let z0 = plan.targets.row(0).to_vec();
            let s = solve_forward(&p, &plan, &z0, None, &DeerConfig::default()).unwrap();
            assert_eq!(s.iterations_used, 2);
            assert!(s.converged);
        }
    }

    #[test]
    fn converged_solution_matches_rollout() {
        for (seed, (m, n, alpha)) in [(3, 1, 0.15), (5, 3, 0.4), (8, 3, 0.15), (5, 1, 1.0)]
            .into_iter()
            .enumerate()
        {
            let p = random_model(m, 20, n, 20 + seed as u64);
            let x = random_data(512, n, 30 + seed as u64);
            let plan = build_plan(&p.readout, &x, alpha, 0).unwrap();
            let z0 = plan.targets.row(0).to_vec();
            let want = sequential_rollout(&p, &plan, &z0, None).unwrap();
            for workers in [1, 3] {
                let s = solve_forward(&p, &plan, &z0, None, &tight(workers)).unwrap();
                assert!(s.converged);
                assert!(s.z.sub(&want).max_abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn every_init_strategy_reaches_the_same_fixed_point() {
        let p = random_model(4, 16, 2, 40);
        let x = random_data(300, 2, 41);
        let plan = build_plan(&p.readout, &x, 0.3, 20).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let want = sequential_rollout(&p, &plan, &z0, None).unwrap();
        for init in [
            InitStrategy::Zeros,
            InitStrategy::StandardNormal,
            InitStrategy::PinvTargets,
        ] {
            let cfg = DeerConfig {
                init_strategy: init,
                ..tight(2)
            };
            let s = solve_forward(&p, &plan, &z0, None, &cfg).unwrap();
            assert!(s.z.sub(&want).max_abs() <= 1e-9, "{init:?}");
            assert_eq!(s.z.row(0), &z0[..]);
        }
    }

    #[test]
    fn diagonal_mode_converges_to_same_point() {
        let p = random_model(3, 10, 3, 50);
        let x = random_data(200, 3, 51);
        let plan = build_plan(&p.readout, &x, 0.5, 0).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let want = sequential_rollout(&p, &plan, &z0, None).unwrap();
        let cfg = DeerConfig {
            jacobian_mode: JacobianMode::Diagonal,
            ..tight(1)
        };
        let s = solve_forward(&p, &plan, &z0, None, &cfg).unwrap();
        assert!(s.converged);
        assert!(s.z.sub(&want).max_abs() <= 1e-8);
        let full = solve_forward(&p, &plan, &z0, None, &tight(1)).unwrap();
        assert!(s.iterations_used >= full.iterations_used);
    }

    #[test]
    fn expanding_unforced_model_diverges() {
        let mut p = random_model(4, 16, 2, 60);
        p.a_raw = vec![2.0; 4];
        p.w = crate::model::Connectivity::Dense(p.w.effective().scaled(40.0));
        let x = random_data(4096, 2, 61);
        let plan = build_plan(&p.readout, &x, 0.0, 0).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let err = solve_forward(&p, &plan, &z0, None, &DeerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NewtonDivergence { .. }));
    }

    #[test]
    fn max_iters_exhaustion_is_reported_not_raised() {
        let p = random_model(4, 16, 2, 70);
        let x = random_data(400, 2, 71);
        let plan = build_plan(&p.readout, &x, 0.1, 0).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let cfg = DeerConfig {
            max_iters: 2,
            tolerance: 1e-300,
            init_strategy: InitStrategy::Zeros,
            ..DeerConfig::default()
        };
        let s = solve_forward(&p, &plan, &z0, None, &cfg).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations_used, 2);
    }

    #[test]
    fn parallel_solve_is_deterministic() {
        let p = random_model(5, 20, 3, 80);
        let x = random_data(700, 3, 81);
        let plan = build_plan(&p.readout, &x, 0.15, 0).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let a = solve_forward(&p, &plan, &z0, None, &tight(4)).unwrap();
        let b = solve_forward(&p, &plan, &z0, None, &tight(4)).unwrap();
        assert_eq!(a.iterations_used, b.iterations_used);
        assert_eq!(a.z.data(), b.z.data());
    }

    #[test]
    fn residual_tail_is_monotone_when_contracting() {
        let p = random_model(3, 10, 3, 90);
        let sigma = crate::numerics::spectral_norm_upper_bound(&p).unwrap();
        let alpha = (crate::forcing::critical_alpha(sigma) + 0.05).min(1.0);
        let x = random_data(500, 3, 91);
        let plan = build_plan(&p.readout, &x, alpha, 0).unwrap();
        let z0 = plan.targets.row(0).to_vec();
        let cfg = DeerConfig {
            init_strategy: InitStrategy::Zeros,
            ..tight(1)
        };
        let s = solve_forward(&p, &plan, &z0, None, &cfg).unwrap();
        let h = &s.residual_norm_history;
        if let Some(first) = h.iter().position(|r| *r < 1.0) {
            for w in h[first..].windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = DeerConfig {
            tolerance: 0.0,
            max_iters: 1,
            ..DeerConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
