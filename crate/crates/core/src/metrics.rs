//! Reconstruction measures: state-space divergence between Gaussian-mixture
//! densities placed along orbits (optionally after delay embedding), n-step
//! prediction error, and largest Lyapunov exponents.
//!
//! Mixture densities are evaluated in coordinates whitened by the shared
//! bandwidth, where every component is a unit Gaussian. A KD-tree gives the
//! nearest component and then sums only components within
//! `d² ≤ d²_min + 2(ln T + 14)`; everything beyond contributes a relative
//! mass below `e⁻¹⁴` to the log-sum-exp.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ShplrnnParams};
use crate::numerics::{norm2, stream, DenseMatrix, Rng};
use crate::trainer::{generate_from, warm_start};

/// Sample shards of the Monte-Carlo estimate; fixed so results do not depend
/// on the worker count.
const SHARDS: u64 = 64;
/// Above this dimension the tree prunes too little to pay for itself.
const KD_MAX_DIM: usize = 10;
const KD_LEAF: usize = 16;
/// Generated values above this magnitude count as a diverged orbit.
const DIVERGED_VALUE: f64 = 1e8;

/// Stacks `[x_t, x_{t−τ}, …, x_{t−(m−1)τ}]` for every `t ≥ (m−1)τ`.
pub fn delay_embed(x: &DenseMatrix, m: usize, tau: usize) -> Result<DenseMatrix> {
    if m == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
    }
    let span = (m - 1) * tau;
    let (t, n) = x.shape();
    if t <= span {
        return Err(Error::InvalidArgument(format!(
            "series of length {t} is too short for m = {m}, tau = {tau}"
        )));
    }
    let rows = t - span;
    let mut out = DenseMatrix::zeros(rows, m * n);
    for r in 0..rows {
        let t_now = r + span;
        let row = out.row_mut(r);
        for j in 0..m {
            row[j * n..(j + 1) * n].copy_from_slice(x.row(t_now - j * tau));
        }
    }
    Ok(out)
}

/// Silverman's factor `(T₁(d+2)/4)^(−1/(d+4))`.
pub fn silverman_bandwidth(t1: usize, d: usize) -> f64 {
    (t1 as f64 * (d as f64 + 2.0) / 4.0).powf(-1.0 / (d as f64 + 4.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstspConfig {
    pub mc_samples: usize,
    /// Generated length as a multiple of the truth length.
    pub rollout_factor: f64,
    pub embed_m: usize,
    pub embed_tau: usize,
    pub bandwidth_override: Option<f64>,
}

impl Default for DstspConfig {
    fn default() -> Self {
        Self {
            mc_samples: 100_000,
            rollout_factor: 3.0,
            embed_m: 1,
            embed_tau: 1,
            bandwidth_override: None,
        }
    }
}

impl DstspConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.mc_samples == 0 {
            p.push("mc_samples must be >= 1".to_string());
        }
        if self.embed_m == 0 {
            p.push("embed_m must be >= 1".to_string());
        }
        if self.embed_m > 1 && self.embed_tau == 0 {
            p.push("embed_tau must be >= 1 when embedding".to_string());
        }
        if !(self.rollout_factor > 0.0) {
            p.push(format!("rollout_factor must be > 0 (got {})", self.rollout_factor));
        }
        if let Some(b) = self.bandwidth_override {
            if !(b > 0.0) {
                p.push(format!("bandwidth_override must be > 0 (got {b})"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Same settings without delay embedding.
    pub fn plain(&self) -> Self {
        Self {
            embed_m: 1,
            embed_tau: 1,
            ..self.clone()
        }
    }
}

/// Outcome of a divergence estimate; a diverged generated orbit is counted
/// rather than folded into an infinite value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstspValue {
    Finite(f64),
    Diverged,
}

impl DstspValue {
    pub fn value(self) -> Option<f64> {
        match self {
            DstspValue::Finite(v) => Some(v),
            DstspValue::Diverged => None,
        }
    }

    pub fn is_diverged(self) -> bool {
        matches!(self, DstspValue::Diverged)
    }
}

/// Unit-bandwidth Gaussian mixture over a fixed point set.
struct Mixture {
    d: usize,
    points: Vec<f64>,
    nodes: Vec<Node>,
    /// Per node `[lo₀…lo_{d−1}, hi₀…hi_{d−1}]`.
    bounds: Vec<f64>,
    use_tree: bool,
}

#[derive(Clone, Copy)]
struct Node {
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

impl Mixture {
    fn new(points: &DenseMatrix) -> Self {
        let (n, d) = points.shape();
        let mut mix = Self {
            d,
            points: points.data().to_vec(),
            nodes: Vec::new(),
            bounds: Vec::new(),
            use_tree: d <= KD_MAX_DIM,
        };
        if mix.use_tree && n > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            mix.build(&mut order, 0, n, points);
            let mut sorted = Vec::with_capacity(n * d);
            for &i in &order {
                sorted.extend_from_slice(points.row(i));
            }
            mix.points = sorted;
        }
        mix
    }

    fn len(&self) -> usize {
        self.points.len() / self.d.max(1)
    }

    fn build(&mut self, order: &mut [usize], start: usize, end: usize, pts: &DenseMatrix) -> usize {
        let d = self.d;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &i in &order[start..end] {
            for (k, v) in pts.row(i).iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            children: None,
        });
        self.bounds.extend_from_slice(&lo);
        self.bounds.extend_from_slice(&hi);
        if end - start > KD_LEAF {
            let axis = (0..d)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            let mid = (end - start) / 2;
            order[start..end].select_nth_unstable_by(mid, |&a, &b| pts[(a, axis)].total_cmp(&pts[(b, axis)]));
            let left = self.build(order, start, start + mid, pts);
            let right = self.build(order, start + mid, end, pts);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    fn dist2(&self, i: usize, y: &[f64]) -> f64 {
        self.point(i).iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn box_dist2(&self, node: usize, y: &[f64]) -> f64 {
        let b = &self.bounds[node * 2 * self.d..(node + 1) * 2 * self.d];
        let (lo, hi) = b.split_at(self.d);
        y.iter()
            .zip(lo.iter().zip(hi))
            .map(|(v, (l, h))| {
                let e = (l - v).max(v - h).max(0.0);
                e * e
            })
            .sum()
    }

    fn nearest(&self, node: usize, y: &[f64], best: &mut f64) {
        if self.box_dist2(node, y) >= *best {
            return;
        }
        let n = self.nodes[node];
        match n.children {
            None => {
                for i in n.start..n.end {
                    *best = best.min(self.dist2(i, y));
                }
            }
            Some((a, b)) => {
                let (first, second) = if self.box_dist2(a, y) <= self.box_dist2(b, y) {
                    (a, b)
                } else {
                    (b, a)
                };
                self.nearest(first, y, best);
                self.nearest(second, y, best);
            }
        }
    }

    fn ball_sum(&self, node: usize, y: &[f64], r2: f64, shift: f64, acc: &mut f64) {
        if self.box_dist2(node, y) > r2 {
            return;
        }
        let n = self.nodes[node];
        match n.children {
            None => {
                for i in n.start..n.end {
                    let d2 = self.dist2(i, y);
                    if d2 <= r2 {
                        *acc += (-0.5 * (d2 - shift)).exp();
                    }
                }
            }
            Some((a, b)) => {
                self.ball_sum(a, y, r2, shift, acc);
                self.ball_sum(b, y, r2, shift, acc);
            }
        }
    }

    /// `ln Σ_t exp(−½‖y − μ_t‖²)`.
    fn log_sum(&self, y: &[f64]) -> f64 {
        let n = self.len();
        if self.use_tree {
            let mut best = f64::INFINITY;
            self.nearest(0, y, &mut best);
            let margin = 2.0 * ((n as f64).ln() + 14.0);
            let mut acc = 0.0;
            self.ball_sum(0, y, best + margin, best, &mut acc);
            -0.5 * best + acc.ln()
        } else {
            let d2: Vec<f64> = (0..n).map(|i| self.dist2(i, y)).collect();
            let best = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let acc: f64 = d2.iter().map(|v| (-0.5 * (v - best)).exp()).sum();
            -0.5 * best + acc.ln()
        }
    }
}

fn column_std(x: &DenseMatrix) -> Vec<f64> {
    let (t, d) = x.shape();
    (0..d)
        .map(|c| {
            let mean = (0..t).map(|r| x[(r, c)]).sum::<f64>() / t as f64;
            let var = (0..t).map(|r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / t as f64;
            let s = var.sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect()
}

fn orbit_diverged(x: &DenseMatrix) -> bool {
    x.rows() == 0 || x.data().iter().any(|v| !(v.abs() <= DIVERGED_VALUE))
}

/// Monte-Carlo estimate of `KL(p̂ ‖ q̂)` between mixtures placed on `truth`
/// and `generated`, with `cfg.embed_m > 1` applying a delay embedding first.
/// Samples are drawn from `p̂`; the seed for every shard comes from `rng`.
pub fn dstsp(truth: &DenseMatrix, generated: &DenseMatrix, cfg: &DstspConfig, rng: &mut Rng) -> Result<DstspValue> {
    cfg.validate()?;
    if truth.cols() != generated.cols() {
        return Err(Error::shape(format!(
            "truth has {} columns, generated has {}",
            truth.cols(),
            generated.cols()
        )));
    }
    if truth.rows() == 0 || !truth.is_finite() {
        return Err(Error::InvalidArgument("truth orbit is empty or not finite".into()));
    }
    let base_seed: u64 = rng.random();
    if orbit_diverged(generated) {
        return Ok(DstspValue::Diverged);
    }
    let (p_pts, q_pts) = if cfg.embed_m > 1 {
        (
            delay_embed(truth, cfg.embed_m, cfg.embed_tau)?,
            delay_embed(generated, cfg.embed_m, cfg.embed_tau)?,
        )
    } else {
        (truth.clone(), generated.clone())
    };
    let (t1, d) = p_pts.shape();
    let t2 = q_pts.rows();
    let f_bw = cfg.bandwidth_override.unwrap_or_else(|| silverman_bandwidth(t1, d));
    let scale: Vec<f64> = column_std(&p_pts).iter().map(|s| s * f_bw.sqrt()).collect();
    let whiten = |m: &DenseMatrix| DenseMatrix::from_fn(m.rows(), d, |r, c| m[(r, c)] / scale[c]);
    let p_white = whiten(&p_pts);
    let p = Mixture::new(&p_white);
    let q = Mixture::new(&whiten(&q_pts));

    let n = cfg.mc_samples;
    let shard_sums: Vec<f64> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let lo = (n as u64 * s / SHARDS) as usize;
            let hi = (n as u64 * (s + 1) / SHARDS) as usize;
            let mut rng = stream(base_seed, s);
            let mut y = vec![0.0; d];
            let mut acc = 0.0;
            for _ in lo..hi {
                let c = rng.random_range(0..t1);
                for (k, yk) in y.iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *yk = p_white[(c, k)] + e;
                }
                acc += p.log_sum(&y) - q.log_sum(&y);
            }
            acc
        })
        .collect();
    let mean = shard_sums.iter().sum::<f64>() / n as f64;
    Ok(DstspValue::Finite(mean - (t1 as f64).ln() + (t2 as f64).ln()))
}

/// Median of the finite entries; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Median absolute deviation from the median, over the finite entries.
pub fn median_abs_deviation(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().filter(|x| x.is_finite()).map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// `sqrt((1/n) Σ_k ‖x_k − x̂_k‖²)` over the rows of two equal-shape blocks.
pub fn window_rmse(x: &DenseMatrix, x_hat: &DenseMatrix) -> Result<f64> {
    if x.shape() != x_hat.shape() || x.rows() == 0 {
        return Err(Error::shape("RMSE needs two non-empty blocks of equal shape"));
    }
    let sq: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / x.rows() as f64).sqrt())
}

/// Mean n-step prediction error over `n_windows` random windows: each window
/// warms up on the preceding `t_w` samples, then runs freely for `n` steps.
/// A window whose rollout diverges contributes `+∞`.
pub fn rmse_n(
    model: &Model,
    trajectory: &DenseMatrix,
    n: usize,
    n_windows: usize,
    t_w: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n == 0 || n_windows == 0 || t_w == 0 {
        return Err(Error::InvalidArgument("n, n_windows and t_w must be >= 1".into()));
    }
    let rows = trajectory.rows();
    if rows < t_w + n {
        return Err(Error::InvalidArgument(format!(
            "trajectory of {rows} rows is too short for warm-up {t_w} plus {n} steps"
        )));
    }
    let cols = trajectory.cols();
    let starts: Vec<usize> = (0..n_windows).map(|_| rng.random_range(t_w..=rows - n)).collect();
    let block = |a: usize, len: usize| {
        DenseMatrix::from_vec(len, cols, trajectory.data()[a * cols..(a + len) * cols].to_vec()).expect("window")
    };
    let errors: Vec<f64> = starts
        .par_iter()
        .map(|&s| {
            let z = warm_start(model, &block(s - t_w, t_w))?;
            let roll = generate_from(model, &z, n);
            if roll.diverged() {
                return Ok(f64::INFINITY);
            }
            window_rmse(&block(s, n), &roll.observations)
        })
        .collect::<Result<_>>()?;
    Ok(errors.iter().sum::<f64>() / n_windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub lle_per_step: f64,
    pub lle_per_time_unit: f64,
    pub horizon: usize,
}

/// Benettin estimate: one tangent vector pushed through the Jacobians and
/// renormalized every step; the first 10% of steps are discarded. Both
/// callbacks receive the step index so time-dependent maps fit too.
pub fn estimate_lle(
    mut step_fn: impl FnMut(usize, &[f64]) -> Vec<f64>,
    mut jac_fn: impl FnMut(usize, &[f64]) -> DenseMatrix,
    z0: &[f64],
    horizon: usize,
    dt: f64,
) -> Result<LyapunovReport> {
    if horizon < 1000 {
        return Err(Error::InvalidArgument(format!("horizon {horizon} < 1000")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0 (got {dt})")));
    }
    let m = z0.len();
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + i as f64 / m as f64).collect();
    let n0 = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut z = z0.to_vec();
    let skip = horizon / 10;
    let mut sum = 0.0;
    for t in 0..horizon {
        let j = jac_fn(t, &z);
        v = j.matvec(&v);
        let growth = norm2(&v);
        if !(growth > 0.0) || !growth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tangent vector collapsed or overflowed at step {t}"
            )));
        }
        v.iter_mut().for_each(|x| *x /= growth);
        if t >= skip {
            sum += growth.ln();
        }
        z = step_fn(t, &z);
        if !(norm2(&z) <= DIVERGED_VALUE) {
            return Err(Error::TrajectoryDivergence { step: t });
        }
    }
    let per_step = sum / (horizon - skip) as f64;
    Ok(LyapunovReport {
        lle_per_step: per_step,
        lle_per_time_unit: per_step / dt,
        horizon,
    })
}

/// Latent transition used for free-running Lyapunov estimates.
pub fn free_running_map(model: &Model) -> ShplrnnParams {
    match model {
        Model::Shplrnn(p) => p.clone(),
        Model::Lssm(p) => p.generation_map(),
    }
}

/// LLE of the unforced model along its own orbit from `z0`.
pub fn model_lle(model: &Model, z0: &[f64], horizon: usize, dt: f64) -> Result<LyapunovReport> {
    let map = free_running_map(model);
    estimate_lle(|_, z| map.step(z, None), |_, z| map.jacobian(z), z0, horizon, dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub dstsp: DstspConfig,
    pub rmse_steps: usize,
    pub rmse_windows: usize,
    pub warmup_len: usize,
    pub lle_horizon: usize,
    /// Use only this many leading test samples as the truth orbit.
    pub truth_len: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dstsp: DstspConfig::default(),
            rmse_steps: 128,
            rmse_windows: 100,
            warmup_len: 128,
            lle_horizon: 10_000,
            truth_len: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the rollout diverged.
    pub dstsp: Option<f64>,
    /// Present when the config asks for a delay embedding.
    pub dstsp_de: Option<f64>,
    pub rmse_n: Option<f64>,
    pub lle: Option<LyapunovReport>,
    pub diverged: bool,
    pub rollout_len: usize,
    pub config: EvalConfig,
}

/// All measures for `model` on a test orbit sampled every `dt`.
pub fn evaluate(model: &Model, test: &DenseMatrix, dt: f64, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.dstsp.validate()?;
    let t1 = cfg.truth_len.unwrap_or(test.rows()).min(test.rows());
    if t1 <= cfg.warmup_len {
        return Err(Error::InvalidArgument("test orbit shorter than the warm-up".into()));
    }
    let truth = DenseMatrix::from_vec(t1, test.cols(), test.data()[..t1 * test.cols()].to_vec())?;
    let history = DenseMatrix::from_vec(
        cfg.warmup_len,
        test.cols(),
        test.data()[..cfg.warmup_len * test.cols()].to_vec(),
    )?;
    let t2 = (cfg.dstsp.rollout_factor * t1 as f64).ceil() as usize;
    let roll = generate_from(model, &warm_start(model, &history)?, t2);
    let diverged = roll.diverged();
    let mut rng = stream(cfg.seed, 0);
    let plain = dstsp(&truth, &roll.observations, &cfg.dstsp.plain(), &mut rng)?;
    let dstsp_de = if cfg.dstsp.embed_m > 1 {
        dstsp(&truth, &roll.observations, &cfg.dstsp, &mut rng)?.value()
    } else {
        None
    };
    let rmse = rmse_n(
        model,
        test,
        cfg.rmse_steps,
        cfg.rmse_windows,
        cfg.warmup_len,
        &mut stream(cfg.seed, 1),
    )
    .ok();
    let lle = if diverged {
        None
    } else {
        model_lle(model, &roll.final_state, cfg.lle_horizon, dt).ok()
    };
    Ok(EvalReport {
        dstsp: if diverged { None } else { plain.value() },
        dstsp_de: if diverged { None } else { dstsp_de },
        rmse_n: rmse,
        lle,
        diverged,
        rollout_len: roll.observations.rows(),
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShplrnnDims;
    use crate::numerics::seeded;
    use crate::systems::{integrate, OdeSpec, Standardization};

    fn lorenz(rows: usize, x0: [f64; 3]) -> DenseMatrix {
        let run = integrate(&OdeSpec::lorenz63(), &x0, 0.0, rows + 1000).unwrap();
        DenseMatrix::from_fn(rows, 3, |r, c| run.states[(r + 1000, c)])
    }

    #[test]
    fn delay_embedding_examples() {
        let x = DenseMatrix::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(delay_embed(&x, 1, 5).unwrap(), x);
        let e = delay_embed(&x, 2, 1).unwrap();
        assert_eq!(e, DenseMatrix::from_rows(&[&[2.0, 1.0], &[3.0, 2.0]]));
        let big = DenseMatrix::zeros(100_000, 2);
        assert_eq!(delay_embed(&big, 3, 4096).unwrap().shape(), (91_808, 6));
        assert!(delay_embed(&x, 3, 1).is_ok());
        assert!(delay_embed(&x, 4, 1).is_err());
    }

    #[test]
    fn silverman_values() {
        assert!((silverman_bandwidth(1, 2) - 1.0).abs() < 1e-15);
        assert!((silverman_bandwidth(10_000, 3) - 12_500f64.powf(-1.0 / 7.0)).abs() < 1e-15);
        assert!((silverman_bandwidth(10_000, 3) - 0.2598).abs() < 1e-4);
        assert!(silverman_bandwidth(100, 3) > silverman_bandwidth(1000, 3));
    }

    fn brute_log_sum(points: &DenseMatrix, y: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..points.rows())
            .map(|r| -0.5 * points.row(r).iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    #[test]
    fn tree_log_density_matches_brute_force() {
        let mut rng = seeded(1);
        for d in [1, 3, 6, 12] {
            let pts = DenseMatrix::from_fn(700, d, |_, _| {
                3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            let mix = Mixture::new(&pts);
            for _ in 0..50 {
                let y: Vec<f64> = (0..d)
                    .map(|_| 4.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                let a = mix.log_sum(&y);
                let b = brute_log_sum(&pts, &y);
                // truncation drops a relative mass below e^-14
                assert!((a - b).abs() < (-14f64).exp(), "d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn self_divergence_is_near_zero() {
        let x = lorenz(4000, [1.0, 1.0, 1.0]);
        let cfg = DstspConfig {
            mc_samples: 20_000,
            ..DstspConfig::default()
        };
        let v = dstsp(&x, &x, &cfg, &mut seeded(2)).unwrap().value().unwrap();
        assert!(v.abs() < 1e-12, "{v}");
        // a different orbit of the same attractor is close as well
        let y = lorenz(12_000, [-3.0, 2.0, 30.0]);
        let w = dstsp(&x, &y, &cfg, &mut seeded(2)).unwrap().value().unwrap();
        assert!(w.abs() < 0.1, "{w}");
    }

    #[test]
    fn far_noise_scores_large_and_is_asymmetric() {
        let x = lorenz(3000, [1.0, 1.0, 1.0]);
        let mut rng = seeded(3);
        let noise = DenseMatrix::from_fn(3000, 3, |_, c| {
            let e: f64 = StandardNormal.sample(&mut rng);
            [60.0, 60.0, 90.0][c] + 10.0 * e
        });
        let cfg = DstspConfig {
            mc_samples: 5000,
            ..DstspConfig::default()
        };
        let a = dstsp(&x, &noise, &cfg, &mut seeded(4)).unwrap().value().unwrap();
        assert!(a > 1.0);
        let partial = DenseMatrix::from_fn(1500, 3, |r, c| x[(r, c)]);
        let pq = dstsp(&x, &partial, &cfg, &mut seeded(4)).unwrap().value().unwrap();
        let qp = dstsp(&partial, &x, &cfg, &mut seeded(4)).unwrap().value().unwrap();
        assert!((pq - qp).abs() > 1e-4);
    }

    #[test]
    fn diverged_orbit_is_tagged() {
        let x = lorenz(500, [1.0, 1.0, 1.0]);
        let mut bad = x.clone();
        bad[(7, 1)] = f64::NAN;
        let cfg = DstspConfig {
            mc_samples: 100,
            ..DstspConfig::default()
        };
        assert_eq!(dstsp(&x, &bad, &cfg, &mut seeded(0)).unwrap(), DstspValue::Diverged);
        let empty = DenseMatrix::zeros(0, 3);
        assert!(dstsp(&x, &empty, &cfg, &mut seeded(0)).unwrap().is_diverged());
    }

    #[test]
    fn dstsp_is_deterministic_across_worker_counts() {
        let x = lorenz(1500, [1.0, 1.0, 1.0]);
        let y = lorenz(1500, [2.0, 1.0, 1.0]);
        let cfg = DstspConfig {
            mc_samples: 3000,
            embed_m: 2,
            embed_tau: 5,
            ..DstspConfig::default()
        };
        let a = dstsp(&x, &y, &cfg, &mut seeded(9)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| dstsp(&x, &y, &cfg, &mut seeded(9)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::NAN, 3.0]), 2.0);
        assert!(median(&[]).is_nan());
        assert_eq!(median_abs_deviation(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }

    #[test]
    fn rmse_closed_form() {
        let x = DenseMatrix::from_fn(10, 3, |r, _| r as f64);
        let shifted = DenseMatrix::from_fn(10, 3, |r, _| r as f64 + 0.5);
        assert!((window_rmse(&x, &shifted).unwrap() - 0.5 * 3f64.sqrt()).abs() < 1e-15);
    }

    fn linear_model() -> ShplrnnParams {
        let mut p = ShplrnnParams::zeros(ShplrnnDims {
            latent: 2,
            hidden: 3,
            obs: 2,
            inputs: 0,
            rank: None,
            m_reg: 0,
        });
        p.a_raw = vec![0.99f64.atanh(), 0.95f64.atanh()];
        p.h = vec![0.01, -0.02];
        p.readout = DenseMatrix::identity(2);
        p
    }

    #[test]
    fn perfect_model_has_zero_rmse() {
        let p = linear_model();
        let mut z = vec![1.0, -1.0];
        let mut data = DenseMatrix::zeros(600, 2);
        for r in 0..600 {
            data.row_mut(r).copy_from_slice(&z);
            z = p.step(&z, None);
        }
        let e = rmse_n(&Model::Shplrnn(p), &data, 128, 20, 10, &mut seeded(1)).unwrap();
        assert!(e < 1e-12, "{e}");
        assert!(rmse_n(&Model::Shplrnn(linear_model()), &data, 590, 1, 20, &mut seeded(1)).is_err());
    }

    #[test]
    fn lle_of_half_identity() {
        let j = DenseMatrix::identity(3).scaled(0.5);
        let r = estimate_lle(
            |_, z| z.iter().map(|v| 0.5 * v).collect(),
            |_, _| j.clone(),
            &[1.0, 2.0, 3.0],
            2000,
            0.1,
        )
        .unwrap();
        assert!((r.lle_per_step - 0.5f64.ln()).abs() < 1e-6);
        assert!((r.lle_per_time_unit - 0.5f64.ln() / 0.1).abs() < 1e-5);
        assert!(estimate_lle(|_, z| z.to_vec(), |_, _| j.clone(), &[1.0], 999, 1.0).is_err());
    }

    #[test]
    fn lle_of_random_diagonal_products() {
        let mut rng = seeded(7);
        let horizon = 5000;
        let diags: Vec<[f64; 2]> = (0..horizon)
            .map(|_| [rng.random_range(1.0..2.0), rng.random_range(0.1..0.5)])
            .collect();
        let r = estimate_lle(
            |_, z| z.to_vec(),
            |t, _| DenseMatrix::from_diag(&diags[t]),
            &[0.0, 0.0],
            horizon,
            1.0,
        )
        .unwrap();
        let skip = horizon / 10;
        let want = diags[skip..].iter().map(|d| d[0].ln()).sum::<f64>() / (horizon - skip) as f64;
        assert!((r.lle_per_step - want).abs() < 1e-3);
    }

    #[test]
    fn lorenz_lle_agrees_with_two_trajectory_oracle() {
        let spec = OdeSpec::lorenz63();
        let flow = |z: &[f64]| integrate(&spec, z, 0.0, 1).unwrap().states.row(0).to_vec();
        let x0 = lorenz(1, [1.0, 1.0, 1.0]).row(0).to_vec();
        let horizon = 20_000;
        let eps = 1e-6;
        let benettin = estimate_lle(
            |_, z| flow(z),
            |_, z| {
                let mut j = DenseMatrix::zeros(3, 3);
                for c in 0..3 {
                    let mut a = z.to_vec();
                    let mut b = z.to_vec();
                    a[c] += eps;
                    b[c] -= eps;
                    let (fa, fb) = (flow(&a), flow(&b));
                    for r in 0..3 {
                        j[(r, c)] = (fa[r] - fb[r]) / (2.0 * eps);
                    }
                }
                j
            },
            &x0,
            horizon,
            spec.dt,
        )
        .unwrap();
        // two nearby orbits, separation renormalized every 10 steps
        let d0 = 1e-8;
        let mut a = x0.clone();
        let mut b = x0.clone();
        b[0] += d0;
        let mut log_sum = 0.0;
        let mut count = 0;
        for k in 0..horizon / 10 {
            for _ in 0..10 {
                a = flow(&a);
                b = flow(&b);
            }
            let diff: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
            let d = norm2(&diff);
            if k >= horizon / 100 {
                log_sum += (d / d0).ln();
                count += 1;
            }
            b = a.iter().zip(&diff).map(|(x, e)| x + e * d0 / d).collect();
        }
        let oracle = log_sum / (count as f64 * 10.0 * spec.dt);
        assert!(
            (benettin.lle_per_time_unit - oracle).abs() < 0.1,
            "{} vs {oracle}",
            benettin.lle_per_time_unit
        );
        assert!((benettin.lle_per_time_unit - 0.9).abs() < 0.15);
    }

    #[test]
    fn diverging_orbit_is_an_error() {
        let r = estimate_lle(
            |_, z| z.iter().map(|v| 10.0 * v).collect(),
            |_, _| DenseMatrix::identity(1).scaled(10.0),
            &[1.0],
            2000,
            1.0,
        );
        assert!(matches!(r, Err(Error::TrajectoryDivergence { .. })));
    }

    #[test]
    fn evaluation_report_schema() {
        let raw = lorenz(3000, [1.0, 1.0, 1.0]);
        let data = Standardization::fit(&raw).apply(&raw);
        let mut p = ShplrnnParams::zeros(ShplrnnDims {
            latent: 3,
            hidden: 4,
            obs: 3,
            inputs: 0,
            rank: None,
            m_reg: 0,
        });
        p.a_raw = vec![0.9f64.atanh(); 3];
        p.readout = DenseMatrix::identity(3);
        let cfg = EvalConfig {
            dstsp: DstspConfig {
                mc_samples: 500,
                embed_m: 2,
                embed_tau: 3,
                ..DstspConfig::default()
            },
            rmse_windows: 5,
            rmse_steps: 16,
            warmup_len: 8,
            lle_horizon: 1000,
            truth_len: Some(1000),
            seed: 3,
        };
        let rep = evaluate(&Model::Shplrnn(p), &data, 0.01, &cfg).unwrap();
        assert!(!rep.diverged);
        assert_eq!(rep.rollout_len, 3000);
        assert!(rep.dstsp.unwrap() > 0.0);
        assert!(rep.dstsp_de.is_some());
        assert!(rep.rmse_n.unwrap() > 0.0);
        assert!((rep.lle.unwrap().lle_per_step - 0.9f64.ln()).abs() < 1e-9);
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["dstsp", "dstsp_de", "rmse_n", "lle", "diverged", "config"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
