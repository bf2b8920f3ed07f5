//! Ground-truth benchmark systems: fixed-step Dormand–Prince integration,
//! dataset assembly (standardization, observation noise, train/test pair)
//! and the binary trajectory container.
//!
//! Trajectory file layout, little-endian:
//!
//! ```text
//! offset  size  field
//!      0     8  magic "DSRTRAJ1"
//!      8     4  u32 T (rows)
//!     12     4  u32 N (columns)
//!     16     8  f64 dt
//!     24     4  u32 flags (bit 0 standardized, bit 1 noisy, bit 2 test role)
//!     28     4  u32 reserved (0)
//!     32  8·T·N  f64 data, row-major
//!      …        UTF-8 JSON footer with the remaining metadata
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, stream, DenseMatrix};

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"DSRTRAJ1";
const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Lorenz63,
    ForcedLorenz96,
    BurstingNeuron,
}

impl SystemKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lorenz63" => Some(Self::Lorenz63),
            "forced_lorenz96" | "lorenz96" => Some(Self::ForcedLorenz96),
            "bursting_neuron" | "neuron" => Some(Self::BurstingNeuron),
            _ => None,
        }
    }
}

const NEURON_PARAMS: [(&str, f64); 19] = [
    ("I", 0.0),
    ("C", 6.0),
    ("g_L", 8.0),
    ("E_L", -80.0),
    ("g_Na", 20.0),
    ("E_Na", 60.0),
    ("V_h_Na", -20.0),
    ("k_Na", 15.0),
    ("g_K", 10.0),
    ("E_K", -90.0),
    ("V_h_K", -25.0),
    ("k_K", 7.0),
    ("tau_n", 1.0),
    ("g_M", 25.2),
    ("V_h_M", -18.0),
    ("k_M", 5.0),
    ("tau_h", 1000.0),
    ("g_NMDA", 10.2),
    ("E_NMDA", 0.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSpec {
    pub name: SystemKind,
    pub dim: usize,
    pub params: BTreeMap<String, f64>,
    pub dt: f64,
    pub is_nonautonomous: bool,
}

impl OdeSpec {
    pub fn lorenz63() -> Self {
        Self {
            name: SystemKind::Lorenz63,
            dim: 3,
            params: [("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            dt: 0.01,
            is_nonautonomous: false,
        }
    }

    pub fn forced_lorenz96() -> Self {
        Self {
            name: SystemKind::ForcedLorenz96,
            dim: 6,
            params: [("F0", 14.0), ("A", 12.0), ("omega", 2.0 * std::f64::consts::PI / 75.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            dt: 5e-3,
            is_nonautonomous: true,
        }
    }

    pub fn bursting_neuron() -> Self {
        Self {
            name: SystemKind::BurstingNeuron,
            dim: 3,
            params: NEURON_PARAMS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            dt: 2.5e-2,
            is_nonautonomous: false,
        }
    }

    pub fn for_kind(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Lorenz63 => Self::lorenz63(),
            SystemKind::ForcedLorenz96 => Self::forced_lorenz96(),
            SystemKind::BurstingNeuron => Self::bursting_neuron(),
        }
    }

    pub fn variable_names(&self) -> Vec<String> {
        match self.name {
            SystemKind::Lorenz63 => vec!["x".into(), "y".into(), "z".into()],
            SystemKind::ForcedLorenz96 => (1..=self.dim).map(|i| format!("x{i}")).collect(),
            SystemKind::BurstingNeuron => vec!["V".into(), "n".into(), "h".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.dt > 0.0) {
            problems.push(format!("dt must be > 0 (got {})", self.dt));
        }
        let required: Vec<&str> = match self.name {
            SystemKind::Lorenz63 => vec!["sigma", "rho", "beta"],
            SystemKind::ForcedLorenz96 => vec!["F0", "A", "omega"],
            SystemKind::BurstingNeuron => NEURON_PARAMS.iter().map(|(k, _)| *k).collect(),
        };
        for k in required {
            if !self.params.contains_key(k) {
                problems.push(format!("missing parameter '{k}'"));
            }
        }
        match self.name {
            SystemKind::Lorenz63 | SystemKind::BurstingNeuron if self.dim != 3 => {
                problems.push(format!("dim must be 3 (got {})", self.dim))
            }
            SystemKind::ForcedLorenz96 if self.dim < 4 => {
                problems.push(format!("Lorenz-96 needs dim >= 4 (got {})", self.dim))
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn p(&self, key: &str) -> f64 {
        self.params[key]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Right-hand side of the named ODE at state `x` and absolute time `t`.
pub fn vector_field(spec: &OdeSpec, x: &[f64], t: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    vector_field_into(spec, x, t, &mut out);
    out
}

fn vector_field_into(spec: &OdeSpec, x: &[f64], t: f64, out: &mut [f64]) {
    match spec.name {
        SystemKind::Lorenz63 => {
            let (s, r, b) = (spec.p("sigma"), spec.p("rho"), spec.p("beta"));
            out[0] = s * (x[1] - x[0]);
            out[1] = x[0] * (r - x[2]) - x[1];
            out[2] = x[0] * x[1] - b * x[2];
        }
        SystemKind::ForcedLorenz96 => {
            let n = x.len();
            let forcing = spec.p("F0") + spec.p("A") * (spec.p("omega") * t).sin();
            for i in 0..n {
                let xp1 = x[(i + 1) % n];
                let xm1 = x[(i + n - 1) % n];
                let xm2 = x[(i + n - 2) % n];
                out[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
            }
        }
        SystemKind::BurstingNeuron => {
            let p = |k: &str| spec.p(k);
            let (v, n, h) = (x[0], x[1], x[2]);
            let m_inf = sigmoid((v - p("V_h_Na")) / p("k_Na"));
            let n_inf = sigmoid((v - p("V_h_K")) / p("k_K"));
            let h_inf = sigmoid((v - p("V_h_M")) / p("k_M"));
            let s_inf = 1.0 / (1.0 + 0.33 * (-0.0625 * v).exp());
            let current = p("I")
                - p("g_L") * (v - p("E_L"))
                - p("g_Na") * m_inf * (v - p("E_Na"))
                - p("g_K") * n * (v - p("E_K"))
                - p("g_M") * h * (v - p("E_K"))
                - p("g_NMDA") * s_inf * (v - p("E_NMDA"));
            out[0] = current / p("C");
            out[1] = (n_inf - n) / p("tau_n");
            out[2] = (h_inf - h) / p("tau_h");
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One fixed Dormand–Prince step; returns the embedded error estimate (inf-norm).
fn dp5_step(spec: &OdeSpec, x: &mut [f64], t: f64, h: f64, k: &mut [Vec<f64>; 7], tmp: &mut [f64]) -> f64 {
    let n = x.len();
    for s in 0..7 {
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..s {
                acc += h * A[s][j] * k[j][i];
            }
            tmp[i] = acc;
        }
        let (_, rest) = k.split_at_mut(s);
        vector_field_into(spec, tmp, t + C[s] * h, &mut rest[0]);
    }
    let mut err = 0.0_f64;
    for i in 0..n {
        let mut hi = 0.0;
        let mut lo = 0.0;
        for s in 0..7 {
            hi += B5[s] * k[s][i];
            lo += B4[s] * k[s][i];
        }
        x[i] += h * hi;
        err = err.max((h * (hi - lo)).abs());
    }
    err
}

#[derive(Debug, Clone)]
pub struct Integration {
    /// `n_steps × dim`; row `k` is the state at `t0 + (k + 1)·dt`.
    pub states: DenseMatrix,
    /// Embedded 4th-order error estimate of each step.
    pub error_estimates: Vec<f64>,
}

/// `n_steps` fixed Dormand–Prince steps of size `spec.dt` from `x0` at `t0`.
pub fn integrate(spec: &OdeSpec, x0: &[f64], t0: f64, n_steps: usize) -> Result<Integration> {
    spec.validate()?;
    if x0.len() != spec.dim {
        return Err(Error::shape(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            spec.dim
        )));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("x0 is not finite".into()));
    }
    let n = spec.dim;
    let mut states = DenseMatrix::zeros(n_steps, n);
    let mut errors = Vec::with_capacity(n_steps);
    let mut x = x0.to_vec();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..n_steps {
        let t = t0 + step as f64 * spec.dt;
        errors.push(dp5_step(spec, &mut x, t, spec.dt, &mut k, &mut tmp));
        let norm = norm2(&x);
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::IntegrationDivergence { step, norm });
        }
        states.row_mut(step).copy_from_slice(&x);
    }
    Ok(Integration {
        states,
        error_estimates: errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Retained samples per trajectory.
    pub length: usize,
    /// Samples integrated and discarded before the retained part.
    pub transient: usize,
    /// Noise std as a fraction of the (unit) standardized std.
    pub noise_fraction: f64,
    /// Column indices removed after integration.
    pub dropped_variables: Vec<usize>,
}

impl SplitConfig {
    /// The benchmark's own lengths and cuts.
    pub fn standard(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Lorenz63 => Self {
                length: 100_000,
                transient: 0,
                noise_fraction: 0.0,
                dropped_variables: vec![],
            },
            SystemKind::ForcedLorenz96 => Self {
                length: 100_000,
                transient: 0,
                noise_fraction: 0.05,
                dropped_variables: vec![],
            },
            SystemKind::BurstingNeuron => Self {
                length: 160_000,
                transient: 40_000,
                noise_fraction: 0.05,
                dropped_variables: vec![2],
            },
        }
    }
}

/// Per-column affine map applied to the raw trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(data: &DenseMatrix) -> Self {
        let (t, n) = data.shape();
        let mut mean = vec![0.0; n];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(data.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; n];
        for r in 0..t {
            for ((s, v), m) in var.iter_mut().zip(data.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / t as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(data.rows(), data.cols(), |r, c| {
            (data[(r, c)] - self.mean[c]) / self.std[c]
        })
    }

    pub fn invert(&self, data: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(data.rows(), data.cols(), |r, c| {
            data[(r, c)] * self.std[c] + self.mean[c]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub std_fraction: f64,
    pub applied_std: f64,
    pub stream_seed: u64,
}

/// Metadata kept in the JSON footer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: SystemKind,
    pub variable_names: Vec<String>,
    pub standardization: Option<Standardization>,
    pub noise: Option<NoiseRecord>,
    pub role: Role,
    pub dropped_variables: Vec<usize>,
    pub spec: OdeSpec,
    pub seed: u64,
    pub t0: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub data: DenseMatrix,
    pub dt: f64,
    pub meta: TrajectoryMeta,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn role(&self) -> Role {
        self.meta.role
    }

    pub fn flags(&self) -> u32 {
        let mut f = 0;
        if self.meta.standardization.is_some() {
            f |= 1;
        }
        if self.meta.noise.is_some() {
            f |= 2;
        }
        if self.meta.role == Role::Test {
            f |= 4;
        }
        f
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (t, n) = self.data.shape();
        let to_u32 = |x: usize| u32::try_from(x).map_err(|_| Error::format("trajectory", "dimension exceeds u32"));
        w.write_all(TRAJECTORY_MAGIC)?;
        w.write_all(&to_u32(t)?.to_le_bytes())?;
        w.write_all(&to_u32(n)?.to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.flags().to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * t * n);
        for v in self.data.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(serde_json::to_string(&self.meta)?.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; 32];
        r.read_exact(&mut header)
            .map_err(|e| Error::format("trajectory", format!("short header: {e}")))?;
        if &header[0..8] != TRAJECTORY_MAGIC {
            return Err(Error::format("trajectory", "bad magic"));
        }
        let t = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let dt = f64::from_le_bytes(header[16..24].try_into().unwrap());
        let flags = u32::from_le_bytes(header[24..28].try_into().unwrap());
        let mut raw = vec![0u8; 8 * t * n];
        r.read_exact(&mut raw)
            .map_err(|e| Error::format("trajectory", format!("truncated data: {e}")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut footer = String::new();
        r.read_to_string(&mut footer)
            .map_err(|e| Error::format("trajectory", format!("footer: {e}")))?;
        let meta: TrajectoryMeta = serde_json::from_str(&footer)?;
        let set = Self {
            data: DenseMatrix::from_vec(t, n, values)?,
            dt,
            meta,
        };
        if set.flags() != flags {
            return Err(Error::format("trajectory", "header flags disagree with footer"));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// CSV with a header row of variable names.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", self.meta.variable_names.join(","))?;
        for r in 0..self.data.rows() {
            let row: Vec<String> = self.data.row(r).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn initial_state(kind: SystemKind, rng: &mut crate::numerics::Rng) -> Vec<f64> {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    match kind {
        SystemKind::Lorenz63 => vec![5.0 * normal(), 5.0 * normal(), 25.0 + 5.0 * normal()],
        SystemKind::ForcedLorenz96 => (0..6).map(|_| 14.0 + normal()).collect(),
        SystemKind::BurstingNeuron => vec![-60.0 + 5.0 * normal(), 0.05 * normal().abs(), 0.1 * normal().abs()],
    }
}

fn build_set(spec: &OdeSpec, split: &SplitConfig, seed: u64, role: Role, rng_id: u64) -> Result<TrajectorySet> {
    let mut rng = stream(seed, rng_id);
    let x0 = if spec.name == SystemKind::ForcedLorenz96 {
        let mut x = initial_state(spec.name, &mut rng);
        x.resize(spec.dim, 14.0);
        x
    } else {
        initial_state(spec.name, &mut rng)
    };
    let t0 = match (spec.is_nonautonomous, role) {
        (true, Role::Test) => {
            let period = 2.0 * std::f64::consts::PI / spec.params.get("omega").copied().unwrap_or(1.0);
            rng.random_range(0.0..period)
        }
        _ => 0.0,
    };
    let run = integrate(spec, &x0, t0, split.transient + split.length)?;
    let kept: Vec<usize> = (0..spec.dim).filter(|c| !split.dropped_variables.contains(c)).collect();
    let raw = DenseMatrix::from_fn(split.length, kept.len(), |r, c| {
        run.states[(split.transient + r, kept[c])]
    });
    let standardization = Standardization::fit(&raw);
    let mut data = standardization.apply(&raw);
    let names = spec.variable_names();
    let mut noise = None;
    if role == Role::Train && split.noise_fraction > 0.0 {
        let noise_seed = seed ^ 0x6e6f_6973_6500_0000;
        let mut nrng = stream(noise_seed, rng_id);
        let dist = Normal::new(0.0, split.noise_fraction).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
        data.data_mut().iter_mut().for_each(|v| *v += dist.sample(&mut nrng));
        noise = Some(NoiseRecord {
            std_fraction: split.noise_fraction,
            applied_std: split.noise_fraction,
            stream_seed: noise_seed,
        });
    }
    Ok(TrajectorySet {
        data,
        dt: spec.dt,
        meta: TrajectoryMeta {
            system: spec.name,
            variable_names: kept.iter().map(|&c| names[c].clone()).collect(),
            standardization: Some(standardization),
            noise,
            role,
            dropped_variables: split.dropped_variables.clone(),
            spec: spec.clone(),
            seed,
            t0,
            x0,
        },
    })
}

/// Train/test pair from two independent initial conditions.
pub fn make_dataset(spec: &OdeSpec, seed: u64, split: &SplitConfig) -> Result<(TrajectorySet, TrajectorySet)> {
    spec.validate()?;
    if split.length == 0 {
        return Err(Error::InvalidArgument("split length must be > 0".into()));
    }
    if !(split.noise_fraction >= 0.0) {
        return Err(Error::InvalidArgument("noise fraction must be >= 0".into()));
    }
    if let Some(c) = split.dropped_variables.iter().find(|c| **c >= spec.dim) {
        return Err(Error::InvalidArgument(format!("dropped variable {c} out of range")));
    }
    let (train, test) = rayon::join(
        || build_set(spec, split, seed, Role::Train, 1),
        || build_set(spec, split, seed, Role::Test, 2),
    );
    Ok((train?, test?))
}
