//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the
//! Moore–Penrose pseudo-inverse built on it.
//!
//! Matrices in this crate are at most a few hundred on a side, so the
//! O(n³)-per-sweep cost of Jacobi is irrelevant next to its accuracy: the
//! singular values come out with high relative precision and the factors are
//! orthonormal to working precision.

use super::matrix::{dot, DenseMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Default relative cutoff for [`pinv`].
pub const PINV_DEFAULT_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: DenseMatrix,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `k × cols` with orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.vt)
    }

    /// Number of singular values above `rel_cutoff · σ_max`.
    pub fn rank(&self, rel_cutoff: f64) -> usize {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|s| **s > rel_cutoff * smax).count()
    }
}

pub fn svd(m: &DenseMatrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return Err(Error::InvalidArgument("svd of a non-finite matrix".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(SvdFactors {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        })
    }
}

/// One-sided Jacobi on the columns of a `rows ≥ cols` matrix.
fn svd_tall(m: &DenseMatrix) -> Result<SvdFactors> {
    let (rows, n) = m.shape();
    // Column-major working copies: a[j] is column j of the rotated matrix.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * rows.max(1) as f64;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let smax = norms.iter().copied().fold(0.0_f64, f64::max);
    let null_tol = smax * f64::EPSILON * (rows.max(n) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut vt = DenseMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        singular_values.push(sigma);
        for (i, vij) in v[j].iter().enumerate() {
            vt[(k, i)] = *vij;
        }
        if sigma > null_tol {
            u_cols.push(a[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, rows);

    let u = DenseMatrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    Ok(SvdFactors { u, singular_values, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills empty columns (null directions) with unit vectors orthogonal to the
/// rest by Gram–Schmidt over the canonical basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0usize;
    for k in 0..cols.len() {
        if !cols[k].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < dim, "cannot complete orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&e, other);
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let n = dot(&e, &e).sqrt();
            if n > 1e-8 {
                e.iter_mut().for_each(|x| *x /= n);
                cols[k] = e;
                break;
            }
        }
    }
}

/// Moore–Penrose pseudo-inverse. Singular values at or below
/// `cutoff · σ_max` are treated as zero.
pub fn pinv(m: &DenseMatrix, cutoff: f64) -> Result<DenseMatrix> {
    if cutoff < 0.0 {
        return Err(Error::InvalidArgument(format!("negative pinv cutoff {cutoff}")));
    }
    let f = svd(m)?;
    let smax = f.singular_values.first().copied().unwrap_or(0.0);
    let (rows, cols) = m.shape();
    let mut out = DenseMatrix::zeros(cols, rows);
    for (k, s) in f.singular_values.iter().enumerate() {
        if *s <= cutoff * smax || *s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        // out += v_k · (1/σ_k) · u_kᵀ
        for i in 0..cols {
            let vik = f.vt[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                out[(i, j)] += vik * f.u[(j, k)];
            }
        }
    }
    Ok(out)
}
