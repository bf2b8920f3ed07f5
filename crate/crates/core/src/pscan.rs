//! Inclusive scan over the affine-map semigroup `z ↦ A z + b`.
//!
//! The parallel driver splits the sequence into `4 × workers` contiguous
//! chunks. Each chunk is folded into one aggregate map, the aggregates are
//! scanned with a Blelloch up/down sweep, and every chunk then replays its
//! own recurrence from the resulting start state. Only the fold pays for
//! `compose` (`M³` per element in dense mode); the replay costs `M²`.
//!
//! For a fixed `(T, workers)` the reduction order is fixed, so results are
//! bitwise reproducible.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanKind {
    /// `M × M` transition matrices.
    Dense,
    /// Transition matrices are diagonal, stored as `M`-vectors.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel { workers: usize },
}

impl ScanMode {
    pub fn workers(self) -> usize {
        match self {
            ScanMode::Sequential => 1,
            ScanMode::Parallel { workers } => workers.max(1),
        }
    }
}

/// One affine map `(mat, vec)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineElement {
    pub kind: ScanKind,
    pub dim: usize,
    /// Row-major `dim × dim` (dense) or the diagonal (diagonal mode).
    pub mat: Vec<f64>,
    pub vec: Vec<f64>,
}

impl AffineElement {
    pub fn identity(kind: ScanKind, dim: usize) -> Self {
        let mat = match kind {
            ScanKind::Dense => DenseMatrix::identity(dim).into_vec(),
            ScanKind::Diagonal => vec![1.0; dim],
        };
        Self {
            kind,
            dim,
            mat,
            vec: vec![0.0; dim],
        }
    }

    pub fn dense(mat: &DenseMatrix, vec: &[f64]) -> Self {
        assert_eq!(mat.rows(), mat.cols());
        assert_eq!(mat.rows(), vec.len());
        Self {
            kind: ScanKind::Dense,
            dim: vec.len(),
            mat: mat.data().to_vec(),
            vec: vec.to_vec(),
        }
    }

    pub fn diagonal(diag: &[f64], vec: &[f64]) -> Self {
        assert_eq!(diag.len(), vec.len());
        Self {
            kind: ScanKind::Diagonal,
            dim: vec.len(),
            mat: diag.to_vec(),
            vec: vec.to_vec(),
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        apply_into(self.kind, self.dim, &self.mat, &self.vec, z, &mut out);
        out
    }
}

/// `second ∘ first = (A₂A₁, A₂b₁ + b₂)`.
pub fn compose(second: &AffineElement, first: &AffineElement) -> Result<AffineElement> {
    if second.kind != first.kind || second.dim != first.dim {
        return Err(Error::shape(format!(
            "compose {:?}/{} with {:?}/{}",
            second.kind, second.dim, first.kind, first.dim
        )));
    }
    let mut out = AffineElement::identity(first.kind, first.dim);
    compose_into(
        first.kind,
        first.dim,
        (&second.mat, &second.vec),
        (&first.mat, &first.vec),
        (&mut out.mat, &mut out.vec),
    );
    Ok(out)
}

#[cfg(test)]
thread_local! {
    static MULADDS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

#[inline(always)]
fn count_muladds(_n: usize) {
    #[cfg(test)]
    MULADDS.with(|c| c.set(c.get() + _n));
}

fn compose_into(
    kind: ScanKind,
    m: usize,
    (a2, b2): (&[f64], &[f64]),
    (a1, b1): (&[f64], &[f64]),
    (out_a, out_b): (&mut [f64], &mut [f64]),
) {
    match kind {
        ScanKind::Dense => {
            for i in 0..m {
                let row2 = &a2[i * m..(i + 1) * m];
                let orow = &mut out_a[i * m..(i + 1) * m];
                orow.fill(0.0);
                for (k, a2ik) in row2.iter().enumerate() {
                    let row1 = &a1[k * m..(k + 1) * m];
                    for (o, x) in orow.iter_mut().zip(row1) {
                        *o += a2ik * x;
                    }
                }
                count_muladds(m * m);
                let mut acc = b2[i];
                for (a, b) in row2.iter().zip(b1) {
                    acc += a * b;
                }
                count_muladds(m);
                out_b[i] = acc;
            }
        }
        ScanKind::Diagonal => {
            for i in 0..m {
                out_a[i] = a2[i] * a1[i];
                out_b[i] = a2[i] * b1[i] + b2[i];
            }
            count_muladds(2 * m);
        }
    }
}

#[inline]
fn apply_into(kind: ScanKind, m: usize, a: &[f64], b: &[f64], z: &[f64], out: &mut [f64]) {
    match kind {
        ScanKind::Dense => {
            for i in 0..m {
                let row = &a[i * m..(i + 1) * m];
                let mut acc = b[i];
                for (x, y) in row.iter().zip(z) {
                    acc += x * y;
                }
                out[i] = acc;
            }
        }
        ScanKind::Diagonal => {
            for i in 0..m {
                out[i] = a[i] * z[i] + b[i];
            }
        }
    }
}

/// A contiguous sequence of affine maps of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSeq {
    kind: ScanKind,
    dim: usize,
    len: usize,
    mats: Vec<f64>,
    vecs: Vec<f64>,
}

impl AffineSeq {
    /// `len` elements, all zero.
    pub fn zeros(kind: ScanKind, dim: usize, len: usize) -> Self {
        let msize = mat_size(kind, dim);
        Self {
            kind,
            dim,
            len,
            mats: vec![0.0; msize * len],
            vecs: vec![0.0; dim * len],
        }
    }

    pub fn from_elements(elements: &[AffineElement]) -> Result<Self> {
        let first = elements
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty element list".into()))?;
        let mut seq = Self::zeros(first.kind, first.dim, elements.len());
        for (t, e) in elements.iter().enumerate() {
            if e.kind != first.kind || e.dim != first.dim {
                return Err(Error::shape("dense and diagonal elements mixed in one scan"));
            }
            seq.mat_mut(t).copy_from_slice(&e.mat);
            seq.vec_mut(t).copy_from_slice(&e.vec);
        }
        Ok(seq)
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mat(&self, t: usize) -> &[f64] {
        let s = mat_size(self.kind, self.dim);
        &self.mats[t * s..(t + 1) * s]
    }

    pub fn mat_mut(&mut self, t: usize) -> &mut [f64] {
        let s = mat_size(self.kind, self.dim);
        &mut self.mats[t * s..(t + 1) * s]
    }

    pub fn vec(&self, t: usize) -> &[f64] {
        &self.vecs[t * self.dim..(t + 1) * self.dim]
    }

    pub fn vec_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.vecs[t * self.dim..(t + 1) * self.dim]
    }

    /// Mutable (mat, vec) views of every element, for parallel filling.
    pub fn elements_mut(&mut self) -> impl IndexedParallelIterator<Item = (&mut [f64], &mut [f64])> {
        let s = mat_size(self.kind, self.dim);
        self.mats
            .par_chunks_mut(s.max(1))
            .zip(self.vecs.par_chunks_mut(self.dim.max(1)))
    }

    pub fn par_vecs(&self) -> impl IndexedParallelIterator<Item = &[f64]> {
        self.vecs.par_chunks(self.dim.max(1))
    }

    pub fn element(&self, t: usize) -> AffineElement {
        AffineElement {
            kind: self.kind,
            dim: self.dim,
            mat: self.mat(t).to_vec(),
            vec: self.vec(t).to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().chain(&self.vecs).all(|x| x.is_finite())
    }

    /// Reversed sequence with transposed transition matrices.
    fn reversed_transposed(&self) -> Self {
        let m = self.dim;
        let mut out = Self::zeros(self.kind, m, self.len);
        for t in 0..self.len {
            let src = self.len - 1 - t;
            match self.kind {
                ScanKind::Dense => {
                    let a = self.mat(src).to_vec();
                    let dst = out.mat_mut(t);
                    for i in 0..m {
                        for j in 0..m {
                            dst[j * m + i] = a[i * m + j];
                        }
                    }
                }
                ScanKind::Diagonal => out.mat_mut(t).copy_from_slice(self.mat(src)),
            }
            out.vec_mut(t).copy_from_slice(self.vec(src));
        }
        out
    }
}

fn mat_size(kind: ScanKind, dim: usize) -> usize {
    match kind {
        ScanKind::Dense => dim * dim,
        ScanKind::Diagonal => dim,
    }
}

/// Output row `t` (0-based) holds `z_{t+1} = mat_{t+1} z_t + vec_{t+1}`
/// with `z_0 = z0`.
pub fn scan(elements: &AffineSeq, z0: &[f64], mode: ScanMode) -> Result<DenseMatrix> {
    let (t_len, m) = (elements.len(), elements.dim());
    if t_len == 0 {
        return Err(Error::InvalidArgument("scan over an empty sequence".into()));
    }
    if z0.len() != m {
        return Err(Error::shape(format!("z0 has length {}, expected {m}", z0.len())));
    }
    let mut out = DenseMatrix::zeros(t_len, m);
    match mode {
        ScanMode::Sequential => {
            replay(elements, 0, z0, out.data_mut());
        }
        ScanMode::Parallel { workers } => {
            let n_chunks = (4 * workers.max(1)).min(t_len);
            let bounds = chunk_bounds(t_len, n_chunks);

            // fold every chunk into one aggregate
            let aggregates: Vec<AffineElement> = bounds
                .par_windows(2)
                .map(|w| fold_range(elements, w[0], w[1]))
                .collect();

            // exclusive scan of aggregates → prefix map in front of each chunk
            let prefixes = blelloch_exclusive(&aggregates, elements.kind(), m);
            let starts: Vec<Vec<f64>> = prefixes.iter().map(|p| p.apply(z0)).collect();

            // replay each chunk from its start state into disjoint output rows
            let mut slices: Vec<&mut [f64]> = Vec::with_capacity(n_chunks);
            let mut rest = out.data_mut();
            for w in bounds.windows(2) {
                let (head, tail) = rest.split_at_mut((w[1] - w[0]) * m);
                slices.push(head);
                rest = tail;
            }
            slices
                .into_par_iter()
                .zip(starts.par_iter())
                .zip(bounds.par_windows(2))
                .for_each(|((dst, start), w)| replay(elements, w[0], start, dst));
        }
    }
    Ok(out)
}

/// Backward recursion `v_{t−1} = mat_tᵀ v_t + vec_t`, `t = T … 1`, from `v_T`.
/// Output row `t` (0-based) holds `v_t` for `t = 0 … T−1`.
pub fn scan_transposed(elements: &AffineSeq, v_last: &[f64], mode: ScanMode) -> Result<DenseMatrix> {
    let rev = elements.reversed_transposed();
    let fwd = scan(&rev, v_last, mode)?;
    // fwd row j = v_{T−1−j}
    let (t_len, m) = fwd.shape();
    let mut out = DenseMatrix::zeros(t_len, m);
    for j in 0..t_len {
        out.row_mut(t_len - 1 - j).copy_from_slice(fwd.row(j));
    }
    Ok(out)
}

fn chunk_bounds(len: usize, chunks: usize) -> Vec<usize> {
    (0..=chunks).map(|c| c * len / chunks).collect()
}

fn replay(elements: &AffineSeq, start: usize, z_start: &[f64], dst: &mut [f64]) {
    let m = elements.dim();
    let mut prev = z_start.to_vec();
    for (i, row) in dst.chunks_mut(m).enumerate() {
        let t = start + i;
        apply_into(elements.kind(), m, elements.mat(t), elements.vec(t), &prev, row);
        prev.copy_from_slice(row);
    }
}

fn fold_range(elements: &AffineSeq, start: usize, end: usize) -> AffineElement {
    let mut acc = elements.element(start);
    let mut tmp = acc.clone();
    for t in (start + 1)..end {
        compose_into(
            elements.kind(),
            elements.dim(),
            (elements.mat(t), elements.vec(t)),
            (&acc.mat, &acc.vec),
            (&mut tmp.mat, &mut tmp.vec),
        );
        std::mem::swap(&mut acc, &mut tmp);
    }
    acc
}

/// Exclusive Blelloch scan: element `c` of the result is the composition of
/// inputs `0 … c−1` (identity for `c = 0`).
fn blelloch_exclusive(items: &[AffineElement], kind: ScanKind, dim: usize) -> Vec<AffineElement> {
    let n = items.len();
    let size = n.next_power_of_two();
    let mut tree: Vec<AffineElement> = items.to_vec();
    tree.resize(size, AffineElement::identity(kind, dim));

    // up-sweep: tree[i] ← tree[i] ∘ tree[i − stride] (later map on the left)
    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = compose(&tree[i], &tree[i - stride]).expect("uniform kind");
            i += 2 * stride;
        }
        stride *= 2;
    }

    // down-sweep
    tree[size - 1] = AffineElement::identity(kind, dim);
    let mut stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride].clone();
            let parent = tree[i].clone();
            tree[i - stride] = parent.clone();
            // prefix before the right child = left subtree after the parent prefix
            tree[i] = compose(&left, &parent).expect("uniform kind");
            i += 2 * stride;
        }
        stride /= 2;
    }
    tree.truncate(n);
    tree
}
