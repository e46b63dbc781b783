//! Dense row-major arrays and the reverse-mode differentiation tape used by
//! every trainable piece of the pipeline.

mod autodiff;
mod gradcheck;
mod params;

pub use autodiff::{Gradients, Node, Op, Tape, Var};
pub use gradcheck::finite_diff_check;
pub use params::{glorot, Adam, Optimizer, OptimizerConfig, ParamStore, Sgd};

use crate::error::{Error, Result};

/// Row-major array of `f64` with an explicit shape (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Dense {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "dense",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Dense { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Dense {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Dense {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `R×C` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; every row spans the product of the remaining axes.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.dims.len() <= 1 {
            1
        } else {
            self.dims[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Element `[i, j, k]` of a 3-D array.
    pub fn get3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = (i * self.dims[1] + j) * self.dims[2] + k;
        self.data[idx] = v;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// View as a 2-D `rows × cols` matrix (same data).
    pub fn as_matrix(&self) -> Dense {
        Dense {
            dims: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        Dense {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Dense, f: impl Fn(f64, f64) -> f64) -> Dense {
        debug_assert_eq!(self.dims, other.dims);
        Dense {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Dense) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Dense) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Dense {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Dense {
            dims: vec![c, r],
            data: out,
        }
    }

    /// Matrix product of two 2-D arrays.
    pub fn matmul(&self, other: &Dense) -> Result<Dense> {
        gemm(self, false, other, false)
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
pub(crate) fn gemm(a: &Dense, trans_a: bool, b: &Dense, trans_b: bool) -> Result<Dense> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides and extents describe exactly the buffers above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Dense::new(vec![m, n], out)
}

/// Numerically stable row-wise softmax of an `N×C` array.
pub fn softmax_rows(logits: &Dense) -> Result<Dense> {
    logits.ensure_finite("softmax_rows input")?;
    let cols = logits.cols();
    let mut out = logits.as_matrix();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln Σ exp(values)` with max-shift; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(&Dense::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax_rows(&Dense::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap()).unwrap();
        assert!((s.get2(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get2(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let s = softmax_rows(&Dense::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert!(s.is_finite());
        assert!((s.get2(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get2(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Dense::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_small() {
        let a = Dense::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Dense::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let at_b = gemm(&a, true, &b, false).unwrap();
        assert_eq!(at_b.data(), &[23.0, 34.0]);
        assert!(a.matmul(&a.transpose().reshape(&[1, 4]).unwrap()).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Dense::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [0.1, -2.0, 3.5];
        let direct = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
