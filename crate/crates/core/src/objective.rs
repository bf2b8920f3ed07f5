//! Training loss: warm-up-masked MSE plus manifold-attractor (MAR),
//! readout-sparsity and readout-conditioning penalties.
//!
//! Every penalty can accumulate its gradient into a parameter-shaped
//! buffer alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Connectivity, LssmParams, ShplrnnParams};
use crate::numerics::{svd, DenseMatrix, PINV_DEFAULT_CUTOFF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda_mar: f64,
    /// 1 or 2.
    pub mar_p: u32,
    /// Scale the `W`/`V` terms by `γ_W`, `γ_V`.
    pub init_scaled: bool,
    /// Defaults to `1/(3L)` when unset.
    pub gamma_w: Option<f64>,
    /// Defaults to `1/(3M)` when unset.
    pub gamma_v: Option<f64>,
    pub lambda_1: f64,
    pub lambda_2: f64,
    /// Number of regularized units `M_r` (the last `M_r` latent units).
    pub m_reg: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda_mar: 1.0,
            mar_p: 2,
            init_scaled: true,
            gamma_w: None,
            gamma_v: None,
            lambda_1: 1.0,
            lambda_2: 1e-4,
            m_reg: 0,
        }
    }
}

impl RegConfig {
    /// No penalties at all.
    pub fn none() -> Self {
        Self {
            lambda_mar: 0.0,
            lambda_1: 0.0,
            lambda_2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, latent: usize) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("reg.lambda_mar", self.lambda_mar),
            ("reg.lambda_1", self.lambda_1),
            ("reg.lambda_2", self.lambda_2),
        ] {
            if !(v >= 0.0) {
                problems.push(format!("{name} must be >= 0 (got {v})"));
            }
        }
        if !matches!(self.mar_p, 1 | 2) {
            problems.push(format!("reg.mar_p must be 1 or 2 (got {})", self.mar_p));
        }
        if self.m_reg > latent {
            problems.push(format!("reg.m_reg {} exceeds latent dim {latent}", self.m_reg));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// `(γ_W, γ_V)` in effect for hidden width `l` and latent width `m`.
    pub fn gammas(&self, l: usize, m: usize) -> (f64, f64) {
        if self.init_scaled {
            (
                self.gamma_w.unwrap_or(1.0 / (3.0 * l as f64)),
                self.gamma_v.unwrap_or(1.0 / (3.0 * m as f64)),
            )
        } else {
            (1.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub mar: f64,
    pub l1: f64,
    pub l2: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, mar: f64, l1: f64, l2: f64) -> Self {
        Self {
            total: mse + mar + l1 + l2,
            mse,
            mar,
            l1,
            l2,
        }
    }
}

/// `|x|^p` and its derivative.
fn pow_abs(x: f64, p: u32) -> (f64, f64) {
    match p {
        1 => (x.abs(), if x == 0.0 { 0.0 } else { x.signum() }),
        _ => (x * x, 2.0 * x),
    }
}

/// `x` and `x_hat` hold rows `t = 1 … T`; rows `t ≤ t_w` are excluded.
pub fn mse_warmup(x: &DenseMatrix, x_hat: &DenseMatrix, t_w: usize) -> Result<f64> {
    check_mse_shapes(x, x_hat, t_w)?;
    let (t_len, n) = x.shape();
    let mut sum = 0.0;
    for t in t_w..t_len {
        for (a, b) in x.row(t).iter().zip(x_hat.row(t)) {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum / (n * (t_len - t_w)) as f64)
}

/// `∂MSE/∂x̂`, zero on warm-up rows.
pub fn mse_warmup_grad(x: &DenseMatrix, x_hat: &DenseMatrix, t_w: usize) -> Result<DenseMatrix> {
    check_mse_shapes(x, x_hat, t_w)?;
    let (t_len, n) = x.shape();
    let scale = 2.0 / (n * (t_len - t_w)) as f64;
    let mut g = DenseMatrix::zeros(t_len, n);
    for t in t_w..t_len {
        for ((o, a), b) in g.row_mut(t).iter_mut().zip(x.row(t)).zip(x_hat.row(t)) {
            *o = scale * (b - a);
        }
    }
    Ok(g)
}

fn check_mse_shapes(x: &DenseMatrix, x_hat: &DenseMatrix, t_w: usize) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!("x {:?} vs x_hat {:?}", x.shape(), x_hat.shape())));
    }
    if t_w >= x.rows() {
        return Err(Error::InvalidArgument(format!(
            "warm-up {t_w} leaves no loss steps out of {}",
            x.rows()
        )));
    }
    Ok(())
}

/// MAR on the last `m_reg` units of a shPLRNN. Gradients are added to
/// `grad` when given.
pub fn mar_penalty(p: &ShplrnnParams, cfg: &RegConfig, grad: Option<&mut ShplrnnParams>) -> f64 {
    let m = p.latent_dim();
    let l = p.hidden_dim();
    let mr = cfg.m_reg;
    if mr == 0 || cfg.lambda_mar == 0.0 {
        return 0.0;
    }
    let (gw, gv) = cfg.gammas(l, m);
    let scale = cfg.lambda_mar / mr as f64;
    let w = p.w.effective();
    let mut value = 0.0;
    let mut dw = DenseMatrix::zeros(m, l);
    let mut da = vec![0.0; m];
    let mut dh = vec![0.0; m];
    let mut dv = DenseMatrix::zeros(l, m);
    for i in (m - mr)..m {
        let a = p.a_raw[i].tanh();
        let (va, ga) = pow_abs(1.0 - a, cfg.mar_p);
        value += va;
        da[i] = -ga * (1.0 - a * a);
        for j in 0..l {
            let (vw, gww) = pow_abs(w[(i, j)], cfg.mar_p);
            let (vv, gvv) = pow_abs(p.v[(j, i)], cfg.mar_p);
            value += (gw * vw + gv * vv) / l as f64;
            dw[(i, j)] = gw * gww / l as f64;
            dv[(j, i)] = gv * gvv / l as f64;
        }
        let (vh, gh) = pow_abs(p.h[i], cfg.mar_p);
        value += vh;
        dh[i] = gh;
    }
    if let Some(g) = grad {
        for i in (m - mr)..m {
            g.a_raw[i] += scale * da[i];
            g.h[i] += scale * dh[i];
        }
        dv.scale_mut(scale);
        g.v.add_assign(&dv);
        dw.scale_mut(scale);
        add_connectivity_grad(&p.w, &dw, &mut g.w);
    }
    scale * value
}

/// Routes a gradient w.r.t. the effective `W` into the stored layout.
pub(crate) fn add_connectivity_grad(w: &Connectivity, d_eff: &DenseMatrix, g: &mut Connectivity) {
    match (w, g) {
        (Connectivity::Dense(_), Connectivity::Dense(gw)) => gw.add_assign(d_eff),
        (Connectivity::LowRank { left, right }, Connectivity::LowRank { left: gl, right: gr }) => {
            gl.add_assign(&d_eff.matmul(&right.transpose()));
            gr.add_assign(&left.transpose().matmul(d_eff));
        }
        _ => panic!("gradient layout does not match parameter layout"),
    }
}

/// MAR for the linear SSM, with the input matrix `U` in place of `W`, `V`.
pub fn mar_penalty_lssm(p: &LssmParams, cfg: &RegConfig, grad: Option<&mut LssmParams>) -> f64 {
    let m = p.latent_dim();
    let n = p.obs_dim();
    let mr = cfg.m_reg;
    if mr == 0 || cfg.lambda_mar == 0.0 {
        return 0.0;
    }
    let scale = cfg.lambda_mar / mr as f64;
    let mut value = 0.0;
    let mut g = grad;
    for i in (m - mr)..m {
        let a = p.a_raw[i].tanh();
        let (va, ga) = pow_abs(1.0 - a, cfg.mar_p);
        let (vh, gh) = pow_abs(p.h[i], cfg.mar_p);
        value += va + vh;
        if let Some(g) = g.as_deref_mut() {
            g.a_raw[i] += scale * (-ga * (1.0 - a * a));
            g.h[i] += scale * gh;
        }
        for j in 0..n {
            let (vu, gu) = pow_abs(p.u[(i, j)], cfg.mar_p);
            value += vu / n as f64;
            if let Some(g) = g.as_deref_mut() {
                g.u.data_mut()[i * n + j] += scale * gu / n as f64;
            }
        }
    }
    scale * value
}

/// `(L1, L2)` readout penalties for `B` (`N × M`): sparsity of the last
/// `m_reg` columns and `λ₂/r Σ (σ_i − 1)²` over the nonzero singular values.
pub fn readout_penalties(b: &DenseMatrix, cfg: &RegConfig, grad: Option<&mut DenseMatrix>) -> Result<(f64, f64)> {
    let (n, m) = b.shape();
    let mr = cfg.m_reg.min(m);
    let mut db = DenseMatrix::zeros(n, m);
    let mut l1 = 0.0;
    if mr > 0 && cfg.lambda_1 != 0.0 {
        let scale = cfg.lambda_1 / (n * mr) as f64;
        for i in 0..n {
            for j in (m - mr)..m {
                let (v, g) = pow_abs(b[(i, j)], cfg.mar_p);
                l1 += v;
                db[(i, j)] += scale * g;
            }
        }
        l1 *= scale;
    }
    let mut l2 = 0.0;
    if cfg.lambda_2 != 0.0 {
        let f = svd(b)?;
        let r = f.rank(PINV_DEFAULT_CUTOFF);
        if r > 0 {
            let scale = cfg.lambda_2 / r as f64;
            for k in 0..r {
                let s = f.singular_values[k];
                l2 += (s - 1.0) * (s - 1.0);
                // ∂σ_k/∂B = u_k v_kᵀ
                let uk = f.u.col(k);
                let vk = f.vt.row(k);
                db.add_outer(2.0 * scale * (s - 1.0), &uk, vk);
            }
            l2 *= scale;
        }
    }
    if let Some(g) = grad {
        g.add_assign(&db);
    }
    Ok((l1, l2))
}

/// All penalty terms of a shPLRNN; gradients go into `grad` when given.
pub fn shplrnn_penalties(
    p: &ShplrnnParams,
    cfg: &RegConfig,
    mut grad: Option<&mut ShplrnnParams>,
) -> Result<(f64, f64, f64)> {
    let mar = mar_penalty(p, cfg, grad.as_deref_mut());
    let (l1, l2) = readout_penalties(&p.readout, cfg, grad.map(|g| &mut g.readout))?;
    Ok((mar, l1, l2))
}

/// MSE plus every penalty that applies to the model.
pub fn total_loss(mse: f64, model: &crate::model::Model, cfg: &RegConfig) -> Result<LossBreakdown> {
    Ok(match model {
        crate::model::Model::Shplrnn(p) => {
            let (mar, l1, l2) = shplrnn_penalties(p, cfg, None)?;
            LossBreakdown::new(mse, mar, l1, l2)
        }
        crate::model::Model::Lssm(p) => LossBreakdown::new(mse, mar_penalty_lssm(p, cfg, None), 0.0, 0.0),
    })
}
