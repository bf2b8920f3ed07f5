//! Shallow piecewise-linear RNN
//! `z_t = A z_{t−1} + W φ(V z_{t−1} + b) + C s_t + h`, `x̂_t = B z_t`,
//! with `A = diag(tanh(Ā))` and `φ = ReLU`.

use serde::{Deserialize, Serialize};

use super::params::{ParamView, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{axpy, DenseMatrix, Rng};

/// Recurrent connectivity `W` (`M × L`), either dense or as `W_L · W_R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Connectivity {
    Dense(DenseMatrix),
    LowRank {
        /// `M × r`
        left: DenseMatrix,
        /// `r × L`
        right: DenseMatrix,
    },
}

impl Connectivity {
    pub fn effective(&self) -> DenseMatrix {
        match self {
            Connectivity::Dense(w) => w.clone(),
            Connectivity::LowRank { left, right } => left.matmul(right),
        }
    }

    pub fn rank_limit(&self) -> Option<usize> {
        match self {
            Connectivity::Dense(_) => None,
            Connectivity::LowRank { left, .. } => Some(left.cols()),
        }
    }

    /// `out = W · y` for `y ∈ ℝ^L`.
    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        match self {
            Connectivity::Dense(w) => w.matvec_into(y, out),
            Connectivity::LowRank { left, right } => {
                let mid = right.matvec(y);
                left.matvec_into(&mid, out);
            }
        }
    }

    /// `Wᵀ v` for `v ∈ ℝ^M`.
    pub fn apply_transposed(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Connectivity::Dense(w) => w.tr_matvec(v),
            Connectivity::LowRank { left, right } => right.tr_matvec(&left.tr_matvec(v)),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Connectivity::Dense(w) => Connectivity::Dense(DenseMatrix::zeros(w.rows(), w.cols())),
            Connectivity::LowRank { left, right } => Connectivity::LowRank {
                left: DenseMatrix::zeros(left.rows(), left.cols()),
                right: DenseMatrix::zeros(right.rows(), right.cols()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShplrnnParams {
    /// Pre-tanh diagonal `Ā` (length M).
    pub a_raw: Vec<f64>,
    pub w: Connectivity,
    /// `L × M`
    pub v: DenseMatrix,
    /// `b` (length L)
    pub bias: Vec<f64>,
    /// `M × K`, absent when the model takes no external inputs.
    pub c: Option<DenseMatrix>,
    pub h: Vec<f64>,
    /// `B` (`N × M`)
    pub readout: DenseMatrix,
    /// Number of MAR units (the last `m_reg` latent coordinates).
    pub m_reg: usize,
}

/// Shape of an shPLRNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShplrnnDims {
    pub latent: usize,
    pub hidden: usize,
    pub obs: usize,
    pub inputs: usize,
    pub rank: Option<usize>,
    pub m_reg: usize,
}

impl ShplrnnParams {
    pub fn latent_dim(&self) -> usize {
        self.a_raw.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.readout.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.c.as_ref().map_or(0, |c| c.cols())
    }

    pub fn dims(&self) -> ShplrnnDims {
        ShplrnnDims {
            latent: self.latent_dim(),
            hidden: self.hidden_dim(),
            obs: self.obs_dim(),
            inputs: self.input_dim(),
            rank: self.w.rank_limit(),
            m_reg: self.m_reg,
        }
    }

    /// Effective `A_ii = tanh(Ā_i)`.
    pub fn a_diag(&self) -> Vec<f64> {
        self.a_raw.iter().map(|a| a.tanh()).collect()
    }

    pub fn w_effective(&self) -> DenseMatrix {
        self.w.effective()
    }

    /// A zero model of the given shape (dense W unless `rank` is set).
    pub fn zeros(dims: ShplrnnDims) -> Self {
        let ShplrnnDims {
            latent: m,
            hidden: l,
            obs: n,
            inputs: k,
            rank,
            m_reg,
        } = dims;
        let w = match rank {
            None => Connectivity::Dense(DenseMatrix::zeros(m, l)),
            Some(r) => Connectivity::LowRank {
                left: DenseMatrix::zeros(m, r),
                right: DenseMatrix::zeros(r, l),
            },
        };
        Self {
            a_raw: vec![0.0; m],
            w,
            v: DenseMatrix::zeros(l, m),
            bias: vec![0.0; l],
            c: (k > 0).then(|| DenseMatrix::zeros(m, k)),
            h: vec![0.0; m],
            readout: DenseMatrix::zeros(n, m),
            m_reg,
        }
    }

    /// Near-identity initialization: `Ā = artanh(κ)`, `W`, `V`, `C`
    /// uniform in `±(1−κ)·fan^{−1/2}`, `b = h = 0`, `B = [I_N | 0]`.
    pub fn init(dims: ShplrnnDims, kappa: f64, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        let ShplrnnDims {
            latent: m,
            hidden: l,
            obs: n,
            inputs: k,
            rank,
            m_reg,
        } = dims;
        if m < n {
            return Err(Error::InvalidArgument(format!(
                "identity readout needs latent dim ≥ observed dim (M={m}, N={n})"
            )));
        }
        if !(0.0..1.0).contains(&kappa) {
            return Err(Error::InvalidArgument(format!("kappa {kappa} outside [0, 1)")));
        }
        if m_reg > m {
            return Err(Error::InvalidArgument(format!("m_reg {m_reg} > latent dim {m}")));
        }
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            DenseMatrix::from_fn(rows, cols, |_, _| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
        };
        let w_bound = (1.0 - kappa) / (l as f64).sqrt();
        let v_bound = (1.0 - kappa) / (m as f64).sqrt();
        let w = match rank {
            None => Connectivity::Dense(uniform(m, l, w_bound)),
            Some(r) => {
                // each factor gets the square root of the dense range
                let fb = w_bound.sqrt();
                Connectivity::LowRank {
                    left: uniform(m, r, fb),
                    right: uniform(r, l, fb),
                }
            }
        };
        let v = uniform(l, m, v_bound);
        let c = (k > 0).then(|| uniform(m, k, (1.0 - kappa) / (k as f64).sqrt()));
        let readout = DenseMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.0 });
        Ok(Self {
            a_raw: vec![kappa.atanh(); m],
            w,
            v,
            bias: vec![0.0; l],
            c,
            h: vec![0.0; m],
            readout,
            m_reg,
        })
    }

    /// `V z + b`.
    pub fn preactivation(&self, z: &[f64]) -> Vec<f64> {
        let mut pre = self.v.matvec(z);
        pre.iter_mut().zip(&self.bias).for_each(|(p, b)| *p += b);
        pre
    }

    /// One step of the latent map.
    pub fn step(&self, z: &[f64], input: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim()];
        self.step_into(z, input, &mut out);
        out
    }

    pub fn step_into(&self, z: &[f64], input: Option<&[f64]>, out: &mut [f64]) {
        let mut act = self.preactivation(z);
        act.iter_mut().for_each(|p| *p = p.max(0.0));
        self.w.apply(&act, out);
        for ((o, a), (zi, hi)) in out.iter_mut().zip(&self.a_raw).zip(z.iter().zip(&self.h)) {
            *o += a.tanh() * zi + hi;
        }
        if let (Some(c), Some(s)) = (&self.c, input) {
            let cs = c.matvec(s);
            axpy(1.0, &cs, out);
        }
    }

    /// `J_F(z) = A + W diag(φ'(Vz + b)) V`, with `φ'(0) = 0`.
    pub fn jacobian(&self, z: &[f64]) -> DenseMatrix {
        let m = self.latent_dim();
        let mut j = DenseMatrix::zeros(m, m);
        self.jacobian_into(z, &mut j);
        j
    }

    pub fn jacobian_into(&self, z: &[f64], out: &mut DenseMatrix) {
        let m = self.latent_dim();
        let pre = self.preactivation(z);
        out.data_mut().fill(0.0);
        match &self.w {
            Connectivity::Dense(w) => {
                for (k, p) in pre.iter().enumerate() {
                    if *p > 0.0 {
                        let vk = self.v.row(k);
                        for i in 0..m {
                            let wik = w[(i, k)];
                            if wik != 0.0 {
                                axpy(wik, vk, out.row_mut(i));
                            }
                        }
                    }
                }
            }
            Connectivity::LowRank { left, right } => {
                // left · (right · D · V)
                let r = right.rows();
                let mut inner = DenseMatrix::zeros(r, m);
                for (k, p) in pre.iter().enumerate() {
                    if *p > 0.0 {
                        let vk = self.v.row(k);
                        for q in 0..r {
                            let rqk = right[(q, k)];
                            if rqk != 0.0 {
                                axpy(rqk, vk, inner.row_mut(q));
                            }
                        }
                    }
                }
                crate::numerics::matmul_into(left, &inner, out);
            }
        }
        for (i, a) in self.a_raw.iter().enumerate() {
            out[(i, i)] += a.tanh();
        }
    }

    /// Diagonal of `J_F(z)` without forming the full matrix.
    pub fn jacobian_diag(&self, z: &[f64]) -> Vec<f64> {
        let pre = self.preactivation(z);
        let w = self.w.effective();
        (0..self.latent_dim())
            .map(|i| {
                let mut d = self.a_raw[i].tanh();
                for (k, p) in pre.iter().enumerate() {
                    if *p > 0.0 {
                        d += w[(i, k)] * self.v[(k, i)];
                    }
                }
                d
            })
            .collect()
    }

    /// `x̂ = B z`.
    pub fn readout(&self, z: &[f64]) -> Vec<f64> {
        self.readout.matvec(z)
    }

    /// Accumulates `scale · vᵀ ∂F(z̃)/∂θ` into `grad` for every latent-model
    /// parameter. The readout is untouched.
    pub fn param_vjp(&self, z_tilde: &[f64], input: Option<&[f64]>, v: &[f64], scale: f64, grad: &mut ShplrnnParams) {
        let pre = self.preactivation(z_tilde);
        let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();

        for i in 0..self.latent_dim() {
            let t = self.a_raw[i].tanh();
            grad.a_raw[i] += scale * v[i] * z_tilde[i] * (1.0 - t * t);
            grad.h[i] += scale * v[i];
        }

        // δ_pre = (Wᵀ v) ⊙ φ'(pre)
        let mut wtv = self.w.apply_transposed(v);
        for (d, p) in wtv.iter_mut().zip(&pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        axpy(scale, &wtv, &mut grad.bias);
        grad.v.add_outer(scale, &wtv, z_tilde);

        match (&self.w, &mut grad.w) {
            (Connectivity::Dense(_), Connectivity::Dense(gw)) => gw.add_outer(scale, v, &act),
            (Connectivity::LowRank { left, right }, Connectivity::LowRank { left: gl, right: gr }) => {
                let r_act = right.matvec(&act);
                gl.add_outer(scale, v, &r_act);
                let ltv = left.tr_matvec(v);
                gr.add_outer(scale, &ltv, &act);
            }
            _ => panic!("gradient layout does not match parameter layout"),
        }

        if let (Some(gc), Some(s)) = (grad.c.as_mut(), input) {
            gc.add_outer(scale, v, s);
        }
    }

    /// `(∂F/∂z̃)ᵀ v`, the state cotangent of one step.
    pub fn state_vjp(&self, z_tilde: &[f64], v: &[f64]) -> Vec<f64> {
        let pre = self.preactivation(z_tilde);
        let mut wtv = self.w.apply_transposed(v);
        for (d, p) in wtv.iter_mut().zip(&pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        let mut out = self.v.tr_matvec(&wtv);
        for (i, a) in self.a_raw.iter().enumerate() {
            out[i] += a.tanh() * v[i];
        }
        out
    }
}

impl Parameters for ShplrnnParams {
    fn arrays(&self) -> Vec<ParamView<'_>> {
        let mut out = vec![ParamView {
            name: "a_raw",
            rows: self.a_raw.len(),
            cols: 1,
            values: &self.a_raw,
        }];
        match &self.w {
            Connectivity::Dense(w) => out.push(view("w", w)),
            Connectivity::LowRank { left, right } => {
                out.push(view("w_left", left));
                out.push(view("w_right", right));
            }
        }
        out.push(view("v", &self.v));
        out.push(ParamView {
            name: "bias",
            rows: self.bias.len(),
            cols: 1,
            values: &self.bias,
        });
        if let Some(c) = &self.c {
            out.push(view("c", c));
        }
        out.push(ParamView {
            name: "h",
            rows: self.h.len(),
            cols: 1,
            values: &self.h,
        });
        out.push(view("readout", &self.readout));
        out
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![("a_raw", &mut self.a_raw[..])];
        match &mut self.w {
            Connectivity::Dense(w) => out.push(("w", w.data_mut())),
            Connectivity::LowRank { left, right } => {
                out.push(("w_left", left.data_mut()));
                out.push(("w_right", right.data_mut()));
            }
        }
        out.push(("v", self.v.data_mut()));
        out.push(("bias", &mut self.bias[..]));
        if let Some(c) = &mut self.c {
            out.push(("c", c.data_mut()));
        }
        out.push(("h", &mut self.h[..]));
        out.push(("readout", self.readout.data_mut()));
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            a_raw: vec![0.0; self.a_raw.len()],
            w: self.w.zeros_like(),
            v: DenseMatrix::zeros(self.v.rows(), self.v.cols()),
            bias: vec![0.0; self.bias.len()],
            c: self.c.as_ref().map(|c| DenseMatrix::zeros(c.rows(), c.cols())),
            h: vec![0.0; self.h.len()],
            readout: DenseMatrix::zeros(self.readout.rows(), self.readout.cols()),
            m_reg: self.m_reg,
        }
    }
}

pub(crate) fn view<'a>(name: &'static str, m: &'a DenseMatrix) -> ParamView<'a> {
    ParamView {
        name,
        rows: m.rows(),
        cols: m.cols(),
        values: m.data(),
    }
}
