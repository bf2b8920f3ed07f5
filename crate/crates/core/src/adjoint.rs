//! Gradients through the converged forced rollout.
//!
//! At the fixed point `z_t = F(z̃_{t−1})` the implicit function theorem
//! gives `∂L/∂θ = −Σ_t v_tᵀ ∂F(z̃_{t−1})/∂θ` with
//! `v_T = −g_T`, `v_{t−1} = J̃_tᵀ v_t − g_{t−1}`, where `g_t = ∂L/∂z_t`.
//! The backward recursion is one transposed scan over the Jacobians of
//! the last forward linearization. `B⁺` and the targets are constants.

use rayon::prelude::*;

use crate::deer::{sequential_rollout, solve_forward, DeerConfig, DeerState};
use crate::error::{Error, Result};
use crate::forcing::{forced_jacobian, ForcingPlan, Projector};
use crate::model::{LssmParams, Parameters, ShplrnnParams};
use crate::numerics::DenseMatrix;
use crate::objective::{mse_warmup, mse_warmup_grad};
use crate::pscan::{scan, scan_transposed, AffineSeq, ScanKind, ScanMode};

/// Steps per partial sum when accumulating parameter gradients.
const ACCUMULATION_CHUNK: usize = 256;

/// Parameter gradient of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<P> {
    pub grad: P,
    pub loss_value: f64,
}

/// Forward and backward result for one training sequence.
#[derive(Debug, Clone)]
pub struct SequenceGradient<P> {
    pub bundle: GradientBundle<P>,
    /// `(T + 1) × M` latent trajectory.
    pub z: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// `g_t = Bᵀ ∂MSE/∂x̂_t` for rows `t = 1 … T`.
pub fn loss_cotangents(
    x: &DenseMatrix,
    x_hat: &DenseMatrix,
    warmup_len: usize,
    readout: &DenseMatrix,
) -> Result<DenseMatrix> {
    let gx = mse_warmup_grad(x, x_hat, warmup_len)?;
    let mut out = DenseMatrix::zeros(x.rows(), readout.cols());
    for t in 0..x.rows() {
        readout.tr_matvec_into(gx.row(t), out.row_mut(t));
    }
    Ok(out)
}

/// Adjoint states `v_1 … v_T` (rows) from the forward linearization,
/// whose element `t − 1` carries `J̃_t`.
pub fn backward_solve(linearization: &AffineSeq, cotangents: &DenseMatrix, mode: ScanMode) -> Result<DenseMatrix> {
    let t_len = cotangents.rows();
    let m = cotangents.cols();
    if linearization.len() != t_len || linearization.dim() != m {
        return Err(Error::shape(format!(
            "linearization {}×{} vs cotangents {t_len}×{m}",
            linearization.len(),
            linearization.dim()
        )));
    }
    let v_last: Vec<f64> = cotangents.row(t_len - 1).iter().map(|g| -g).collect();
    let mut v = DenseMatrix::zeros(t_len, m);
    v.row_mut(t_len - 1).copy_from_slice(&v_last);
    if t_len == 1 {
        return Ok(v);
    }
    // element k (k = 1 … T−1) is (J̃_{k+1}, −g_k)
    let mut elems = AffineSeq::zeros(linearization.kind(), m, t_len - 1);
    for k in 0..t_len - 1 {
        elems.mat_mut(k).copy_from_slice(linearization.mat(k + 1));
        elems
            .vec_mut(k)
            .iter_mut()
            .zip(cotangents.row(k))
            .for_each(|(o, g)| *o = -g);
    }
    let head = scan_transposed(&elems, &v_last, mode)?;
    v.data_mut()[..(t_len - 1) * m].copy_from_slice(head.data());
    Ok(v)
}

/// `−Σ_t v_tᵀ ∂F(z̃_{t−1})/∂θ`, summed in fixed-size chunks combined
/// pairwise in a fixed order.
pub fn assemble_gradients(
    params: &ShplrnnParams,
    forced: &DenseMatrix,
    v: &DenseMatrix,
    inputs: Option<&DenseMatrix>,
) -> Result<ShplrnnParams> {
    let t_len = v.rows();
    if forced.rows() != t_len {
        return Err(Error::shape("forced states and adjoint differ in length"));
    }
    let starts: Vec<usize> = (0..t_len).step_by(ACCUMULATION_CHUNK).collect();
    let partials: Vec<ShplrnnParams> = starts
        .par_iter()
        .map(|&start| {
            let mut g = params.zeros_like();
            for i in start..(start + ACCUMULATION_CHUNK).min(t_len) {
                let s = inputs.map(|s| s.row(i));
                params.param_vjp(forced.row(i), s, v.row(i), -1.0, &mut g);
            }
            g
        })
        .collect();
    Ok(tree_sum(partials))
}

fn tree_sum<P: Parameters>(mut parts: Vec<P>) -> P {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_scaled(1.0, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one partial sum")
}

/// `x̂_t = B z_t` for `t = 1 … T` and the observed rows `x_1 … x_T`.
fn predictions(params: &ShplrnnParams, z: &DenseMatrix, x_seq: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let t_len = z.rows() - 1;
    let n = params.obs_dim();
    let mut x_hat = DenseMatrix::zeros(t_len, n);
    for t in 1..=t_len {
        params.readout.matvec_into(z.row(t), x_hat.row_mut(t - 1));
    }
    let x = DenseMatrix::from_vec(t_len, n, x_seq.data()[n..].to_vec()).expect("shape");
    (x, x_hat)
}

/// Adds the direct readout path `Σ_t (∂MSE/∂x̂_t) z_tᵀ` to `grad.readout`.
fn add_readout_path(
    grad: &mut ShplrnnParams,
    z: &DenseMatrix,
    x: &DenseMatrix,
    x_hat: &DenseMatrix,
    warmup_len: usize,
) -> Result<()> {
    let gx = mse_warmup_grad(x, x_hat, warmup_len)?;
    for t in warmup_len..x.rows() {
        grad.readout.add_outer(1.0, gx.row(t), z.row(t + 1));
    }
    Ok(())
}

/// MSE and its gradient for one sequence `x_0 … x_T` via the parallel
/// Newton forward pass and the adjoint scan. Penalties are not included.
/// When the forward solve does not converge the gradient is left at zero.
pub fn gtf_deer_gradient(
    params: &ShplrnnParams,
    projector: &Projector,
    x_seq: &DenseMatrix,
    warmup_len: usize,
    inputs: Option<&DenseMatrix>,
    config: &DeerConfig,
) -> Result<SequenceGradient<ShplrnnParams>> {
    let plan = ForcingPlan::new(projector.clone(), x_seq, warmup_len)?;
    let z0 = plan.targets.row(0).to_vec();
    let state: DeerState = solve_forward(params, &plan, &z0, inputs, config)?;
    let (x, x_hat) = predictions(params, &state.z, x_seq);
    let loss = mse_warmup(&x, &x_hat, warmup_len)?;
    let mut grad = params.zeros_like();
    if state.converged {
        let cot = loss_cotangents(&x, &x_hat, warmup_len, &params.readout)?;
        let v = backward_solve(&state.linearization, &cot, config.scan_mode())?;
        grad = assemble_gradients(params, &state.forced, &v, inputs)?;
        add_readout_path(&mut grad, &state.z, &x, &x_hat, warmup_len)?;
    }
    Ok(SequenceGradient {
        bundle: GradientBundle { grad, loss_value: loss },
        z: state.z,
        iterations: state.iterations_used,
        converged: state.converged,
    })
}

/// Same quantity as [`gtf_deer_gradient`], computed by a step-by-step forced
/// rollout and an explicit backward loop.
pub fn gtf_sequential_gradient(
    params: &ShplrnnParams,
    projector: &Projector,
    x_seq: &DenseMatrix,
    warmup_len: usize,
    inputs: Option<&DenseMatrix>,
) -> Result<SequenceGradient<ShplrnnParams>> {
    let plan = ForcingPlan::new(projector.clone(), x_seq, warmup_len)?;
    let z0 = plan.targets.row(0).to_vec();
    let z = sequential_rollout(params, &plan, &z0, inputs)?;
    let t_len = plan.seq_len();
    let m = params.latent_dim();
    let (x, x_hat) = predictions(params, &z, x_seq);
    let loss = mse_warmup(&x, &x_hat, warmup_len)?;
    let cot = loss_cotangents(&x, &x_hat, warmup_len, &params.readout)?;

    let mut forced = DenseMatrix::zeros(t_len, m);
    for t in 0..t_len {
        plan.force_state_into(z.row(t), t, forced.row_mut(t));
    }
    let mut v = DenseMatrix::zeros(t_len, m);
    let mut cur: Vec<f64> = cot.row(t_len - 1).iter().map(|g| -g).collect();
    v.row_mut(t_len - 1).copy_from_slice(&cur);
    for t in (2..=t_len).rev() {
        // J̃_t = J_F(z̃_{t−1}) P_{t−1}
        let j = forced_jacobian(params, &plan, forced.row(t - 1), t - 1);
        let mut next = j.tr_matvec(&cur);
        next.iter_mut().zip(cot.row(t - 2)).for_each(|(o, g)| *o -= g);
        v.row_mut(t - 2).copy_from_slice(&next);
        cur = next;
    }
    let mut grad = params.zeros_like();
    for t in 1..=t_len {
        let s = inputs.map(|s| s.row(t - 1));
        params.param_vjp(forced.row(t - 1), s, v.row(t - 1), -1.0, &mut grad);
    }
    add_readout_path(&mut grad, &z, &x, &x_hat, warmup_len)?;
    Ok(SequenceGradient {
        bundle: GradientBundle { grad, loss_value: loss },
        z,
        iterations: 1,
        converged: true,
    })
}

/// Linear SSM forward/backward for one sequence.
#[derive(Debug, Clone)]
pub struct LssmPass {
    pub bundle: GradientBundle<LssmParams>,
    /// `(T + 1) × M`, row 0 = 0.
    pub z: DenseMatrix,
    /// `∂L/∂z_t` through the readout, rows `t = 1 … T`.
    pub cotangents: DenseMatrix,
    /// Backpropagated `λ_t = dL/dz_t`, rows `t = 1 … T`.
    pub adjoint: DenseMatrix,
}

/// Training recurrence of the linear SSM as a diagonal scan from `z_0 = 0`.
pub fn lssm_forward(
    params: &LssmParams,
    x_seq: &DenseMatrix,
    inputs: Option<&DenseMatrix>,
    mode: ScanMode,
) -> Result<DenseMatrix> {
    let t_len = x_seq.rows() - 1;
    let m = params.latent_dim();
    if x_seq.cols() != params.obs_dim() {
        return Err(Error::shape("data width differs from the model's N"));
    }
    let a = params.a_diag();
    let mut elems = AffineSeq::zeros(ScanKind::Diagonal, m, t_len);
    elems.elements_mut().enumerate().for_each(|(i, (mat, vec))| {
        mat.copy_from_slice(&a);
        params.u.matvec_into(x_seq.row(i), vec);
        for (o, h) in vec.iter_mut().zip(&params.h) {
            *o += h;
        }
        if let (Some(c), Some(s)) = (&params.c, inputs) {
            crate::numerics::axpy(1.0, &c.matvec(s.row(i)), vec);
        }
    });
    let body = scan(&elems, &vec![0.0; m], mode)?;
    let mut z = DenseMatrix::zeros(t_len + 1, m);
    z.data_mut()[m..].copy_from_slice(body.data());
    Ok(z)
}

/// MSE and gradient of the linear SSM on one sequence `x_0 … x_T`.
pub fn lssm_gradient(
    params: &LssmParams,
    x_seq: &DenseMatrix,
    warmup_len: usize,
    inputs: Option<&DenseMatrix>,
    mode: ScanMode,
) -> Result<LssmPass> {
    let z = lssm_forward(params, x_seq, inputs, mode)?;
    let t_len = z.rows() - 1;
    let (m, n, l) = (params.latent_dim(), params.obs_dim(), params.hidden_dim());
    let mut grad = params.zeros_like();

    let mut x_hat = DenseMatrix::zeros(t_len, n);
    let mut acts = DenseMatrix::zeros(t_len, l);
    let mut pres = DenseMatrix::zeros(t_len, l);
    for t in 1..=t_len {
        let pre = params.hidden_preactivation(z.row(t));
        for (k, p) in pre.iter().enumerate() {
            acts[(t - 1, k)] = p.max(0.0);
        }
        pres.row_mut(t - 1).copy_from_slice(&pre);
        params.readout_b.matvec_into(acts.row(t - 1), x_hat.row_mut(t - 1));
    }
    let x = DenseMatrix::from_vec(t_len, n, x_seq.data()[n..].to_vec())?;
    let loss = mse_warmup(&x, &x_hat, warmup_len)?;
    let gx = mse_warmup_grad(&x, &x_hat, warmup_len)?;

    let mut cot = DenseMatrix::zeros(t_len, m);
    for t in warmup_len..t_len {
        grad.readout_b.add_outer(1.0, gx.row(t), acts.row(t));
        let mut delta = params.readout_b.tr_matvec(gx.row(t));
        for (d, p) in delta.iter_mut().zip(pres.row(t)) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        grad.readout_v.add_outer(1.0, &delta, z.row(t + 1));
        crate::numerics::axpy(1.0, &delta, &mut grad.readout_bias);
        params.readout_v.tr_matvec_into(&delta, cot.row_mut(t));
    }

    // λ_T = g_T, λ_{t−1} = A λ_t + g_{t−1}
    let a = params.a_diag();
    let mut lambda = DenseMatrix::zeros(t_len, m);
    lambda.row_mut(t_len - 1).copy_from_slice(cot.row(t_len - 1));
    if t_len > 1 {
        let mut elems = AffineSeq::zeros(ScanKind::Diagonal, m, t_len - 1);
        for k in 0..t_len - 1 {
            elems.mat_mut(k).copy_from_slice(&a);
            elems.vec_mut(k).copy_from_slice(cot.row(k));
        }
        let head = scan_transposed(&elems, cot.row(t_len - 1), mode)?;
        lambda.data_mut()[..(t_len - 1) * m].copy_from_slice(head.data());
    }

    for t in 1..=t_len {
        let lam = lambda.row(t - 1);
        let z_prev = z.row(t - 1);
        for i in 0..m {
            grad.a_raw[i] += lam[i] * z_prev[i] * (1.0 - a[i] * a[i]);
            grad.h[i] += lam[i];
        }
        grad.u.add_outer(1.0, lam, x_seq.row(t - 1));
        if let (Some(gc), Some(s)) = (grad.c.as_mut(), inputs) {
            gc.add_outer(1.0, lam, s.row(t - 1));
        }
    }

    Ok(LssmPass {
        bundle: GradientBundle { grad, loss_value: loss },
        z,
        cotangents: cot,
        adjoint: lambda,
    })
}
