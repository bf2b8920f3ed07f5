//! Uniform access to named parameter arrays, used by the optimizer,
//! checkpoints and gradient checks.

/// Read-only view of one named parameter array.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f64],
}

pub trait Parameters: Clone + Send + Sync {
    fn arrays(&self) -> Vec<ParamView<'_>>;

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    /// Same shapes, every entry zero. Gradients use this layout.
    fn zeros_like(&self) -> Self;

    fn num_values(&self) -> usize {
        self.arrays().iter().map(|a| a.values.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for a in self.arrays() {
            out.extend_from_slice(a.values);
        }
        out
    }

    /// Overwrites every array from a flat vector in [`Parameters::arrays`] order.
    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, values) in self.arrays_mut() {
            let n = values.len();
            values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `self += scale · other` (shapes must match).
    fn add_scaled(&mut self, scale: f64, other: &Self) {
        let src = other.to_flat();
        let mut offset = 0;
        for (_, values) in self.arrays_mut() {
            for v in values.iter_mut() {
                *v += scale * src[offset];
                offset += 1;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, values) in self.arrays_mut() {
            values.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.values.iter().all(|v| v.is_finite()))
    }

    fn max_abs(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|a| a.values.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
