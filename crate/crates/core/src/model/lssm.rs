//! Linear training-time recurrence with a one-hidden-layer readout:
//! `z_t = A z_{t−1} + U x_{t−1} + C s_t + h`, `x̂_t = B φ(V z_t + b)`.
//!
//! At generation time the prediction replaces the data,
//! `z_t = A z_{t−1} + U B φ(V z_{t−1} + b) + C s_t + h`, which is the
//! shPLRNN recurrence with the rank-limited connectivity `W̄ = U·B`.

use serde::{Deserialize, Serialize};

use super::params::{ParamView, Parameters};
use super::shplrnn::{view, Connectivity, ShplrnnParams};
use crate::error::{Error, Result};
use crate::numerics::{axpy, DenseMatrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LssmParams {
    pub a_raw: Vec<f64>,
    /// `M × N`
    pub u: DenseMatrix,
    /// `M × K`
    pub c: Option<DenseMatrix>,
    pub h: Vec<f64>,
    /// `B`, `N × L`
    pub readout_b: DenseMatrix,
    /// `V`, `L × M`
    pub readout_v: DenseMatrix,
    /// `b`, length L
    pub readout_bias: Vec<f64>,
    pub m_reg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LssmDims {
    pub latent: usize,
    pub hidden: usize,
    pub obs: usize,
    pub inputs: usize,
    pub m_reg: usize,
}

impl LssmParams {
    pub fn latent_dim(&self) -> usize {
        self.a_raw.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.readout_bias.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.readout_b.rows()
    }

    pub fn dims(&self) -> LssmDims {
        LssmDims {
            latent: self.latent_dim(),
            hidden: self.hidden_dim(),
            obs: self.obs_dim(),
            inputs: self.c.as_ref().map_or(0, |c| c.cols()),
            m_reg: self.m_reg,
        }
    }

    pub fn a_diag(&self) -> Vec<f64> {
        self.a_raw.iter().map(|a| a.tanh()).collect()
    }

    pub fn zeros(dims: LssmDims) -> Self {
        let LssmDims {
            latent: m,
            hidden: l,
            obs: n,
            inputs: k,
            m_reg,
        } = dims;
        Self {
            a_raw: vec![0.0; m],
            u: DenseMatrix::zeros(m, n),
            c: (k > 0).then(|| DenseMatrix::zeros(m, k)),
            h: vec![0.0; m],
            readout_b: DenseMatrix::zeros(n, l),
            readout_v: DenseMatrix::zeros(l, m),
            readout_bias: vec![0.0; l],
            m_reg,
        }
    }

    pub fn init(dims: LssmDims, kappa: f64, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        let LssmDims {
            latent: m,
            hidden: l,
            obs: n,
            inputs: k,
            m_reg,
        } = dims;
        if !(0.0..1.0).contains(&kappa) {
            return Err(Error::InvalidArgument(format!("kappa {kappa} outside [0, 1)")));
        }
        if m_reg > m {
            return Err(Error::InvalidArgument(format!("m_reg {m_reg} > latent dim {m}")));
        }
        let mut uniform = |rows: usize, cols: usize, fan: usize| {
            let bound = (1.0 - kappa) / (fan as f64).sqrt();
            DenseMatrix::from_fn(rows, cols, |_, _| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
        };
        let u = uniform(m, n, n);
        let c = (k > 0).then(|| uniform(m, k, k));
        let readout_b = uniform(n, l, l);
        let readout_v = uniform(l, m, m);
        Ok(Self {
            a_raw: vec![kappa.atanh(); m],
            u,
            c,
            h: vec![0.0; m],
            readout_b,
            readout_v,
            readout_bias: vec![0.0; l],
            m_reg,
        })
    }

    /// Teacher-forced step, affine in `z`.
    pub fn train_step(&self, z: &[f64], x_prev: &[f64], input: Option<&[f64]>) -> Vec<f64> {
        let mut out = self.u.matvec(x_prev);
        self.add_affine_part(z, input, &mut out);
        out
    }

    /// Free-running step: `U` applied to `B φ(Vz+b)`, so `U·B` is never formed.
    pub fn generate_step(&self, z: &[f64], input: Option<&[f64]>) -> Vec<f64> {
        let x_hat = self.readout(z);
        let mut out = self.u.matvec(&x_hat);
        self.add_affine_part(z, input, &mut out);
        out
    }

    fn add_affine_part(&self, z: &[f64], input: Option<&[f64]>, out: &mut [f64]) {
        for ((o, a), (zi, hi)) in out.iter_mut().zip(&self.a_raw).zip(z.iter().zip(&self.h)) {
            *o += a.tanh() * zi + hi;
        }
        if let (Some(c), Some(s)) = (&self.c, input) {
            axpy(1.0, &c.matvec(s), out);
        }
    }

    pub fn hidden_preactivation(&self, z: &[f64]) -> Vec<f64> {
        let mut pre = self.readout_v.matvec(z);
        pre.iter_mut().zip(&self.readout_bias).for_each(|(p, b)| *p += b);
        pre
    }

    /// `x̂ = B φ(V z + b)`.
    pub fn readout(&self, z: &[f64]) -> Vec<f64> {
        let act: Vec<f64> = self.hidden_preactivation(z).into_iter().map(|p| p.max(0.0)).collect();
        self.readout_b.matvec(&act)
    }

    /// The test-time connectivity `W̄ = U·B`, kept in factored form.
    pub fn test_time_connectivity(&self) -> Connectivity {
        Connectivity::LowRank {
            left: self.u.clone(),
            right: self.readout_b.clone(),
        }
    }

    /// The free-running map as an shPLRNN with `W̄ = U·B`. Its readout is
    /// zero: only the latent transition and its Jacobian carry over.
    pub fn generation_map(&self) -> ShplrnnParams {
        ShplrnnParams {
            a_raw: self.a_raw.clone(),
            w: self.test_time_connectivity(),
            v: self.readout_v.clone(),
            bias: self.readout_bias.clone(),
            c: self.c.clone(),
            h: self.h.clone(),
            readout: DenseMatrix::zeros(self.obs_dim(), self.latent_dim()),
            m_reg: self.m_reg,
        }
    }
}

impl Parameters for LssmParams {
    fn arrays(&self) -> Vec<ParamView<'_>> {
        let mut out = vec![
            ParamView {
                name: "a_raw",
                rows: self.a_raw.len(),
                cols: 1,
                values: &self.a_raw,
            },
            view("u", &self.u),
        ];
        if let Some(c) = &self.c {
            out.push(view("c", c));
        }
        out.push(ParamView {
            name: "h",
            rows: self.h.len(),
            cols: 1,
            values: &self.h,
        });
        out.push(view("readout_b", &self.readout_b));
        out.push(view("readout_v", &self.readout_v));
        out.push(ParamView {
            name: "readout_bias",
            rows: self.readout_bias.len(),
            cols: 1,
            values: &self.readout_bias,
        });
        out
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![("a_raw", &mut self.a_raw[..]), ("u", self.u.data_mut())];
        if let Some(c) = &mut self.c {
            out.push(("c", c.data_mut()));
        }
        out.push(("h", &mut self.h[..]));
        out.push(("readout_b", self.readout_b.data_mut()));
        out.push(("readout_v", self.readout_v.data_mut()));
        out.push(("readout_bias", &mut self.readout_bias[..]));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims());
        z.m_reg = self.m_reg;
        z
    }
}
