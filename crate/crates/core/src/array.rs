//! Dense row-major arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::real::Real;

/// A dense, row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<F> {
    shape: Vec<usize>,
    values: Vec<F>,
}

/// Parameters and activations: 32-bit floats.
pub type DenseArray = Array<f32>;

impl<F: Real> Array<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(dim_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            ));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![F::zero(); n] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1, 1], values: vec![value] }
    }

    /// Builds a 2-D array from nested rows.
    pub fn from_rows(rows: &[&[F]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of a 2-D array.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D array (product of trailing dimensions otherwise).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.values[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Same values under a new shape.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(alloc::format!("non-finite values in {what}")))
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v.f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Converts element type.
    pub fn cast<G: Real>(&self) -> Array<G> {
        Array { shape: self.shape.clone(), values: self.values.iter().map(|v| G::of(v.f64())).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    /// Transposed copy of a 2-D array.
    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Self { shape: vec![c, r], values: out }
    }
}

/// `a (m×k) · b (k×n)` with `f64` accumulation.
pub fn matmul<F: Real>(a: &Array<F>, b: &Array<F>) -> Result<Array<F>> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(dim_err!("matmul needs 2-D operands, got {:?} and {:?}", a.shape, b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions differ: {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![F::zero(); m * n];
    matmul_into(&a.values, &b.values, &mut out, m, k, n, false, false);
    Ok(Array { shape: vec![m, n], values: out })
}

/// Raw kernel: `out (m×n) = op(a) · op(b)` where `op` optionally transposes.
///
/// With `ta`, `a` is stored as `k×m`; with `tb`, `b` is stored as `n×k`.
/// Each output row is accumulated in a fixed order, in the element type.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    // transposed operands are copied once so the kernel reads contiguously
    if ta {
        return matmul_into(&transposed(a, k, m), b, out, m, k, n, false, tb);
    }
    if tb {
        return matmul_into(a, &transposed(b, n, k), out, m, k, n, false, false);
    }
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        o.iter_mut().for_each(|v| *v = F::zero());
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Row-major `rows × cols` to `cols × rows`.
fn transposed<F: Copy>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        t.extend((0..rows).map(|r| a[r * cols + c]));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_column() {
        let a = DenseArray::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = DenseArray::from_rows(&[&[3.0], &[4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.values(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let a = DenseArray::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = DenseArray::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().values(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = DenseArray::zeros(&[2, 3]);
        let b = DenseArray::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_value_count_checked() {
        assert!(DenseArray::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn transposed_kernels_agree() {
        let a = DenseArray::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap();
        let b = DenseArray::new(vec![3, 2], vec![0.25, 1.0, -1.0, 2.0, 4.0, 0.0]).unwrap();
        let want = matmul(&a, &b).unwrap();
        let at = a.transpose();
        let bt = b.transpose();
        let mut out = vec![0.0f32; 4];
        matmul_into(at.values(), bt.values(), &mut out, 2, 3, 2, true, true);
        assert_eq!(out, want.values());
        matmul_into(at.values(), b.values(), &mut out, 2, 3, 2, true, false);
        assert_eq!(out, want.values());
        matmul_into(a.values(), bt.values(), &mut out, 2, 3, 2, false, true);
        assert_eq!(out, want.values());
    }
}
