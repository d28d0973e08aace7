//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built from.

use std::fmt;

use super::rng::RngStream;
use super::NumericsError;

/// Dense n-dimensional array of `f64` values in row-major order.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::BadLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Standard-normal draws from `rng`.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut RngStream) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, NumericsError> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::BadLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks equally sized rows into a `[n, width]` matrix.
    pub fn stack_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), width], data)
    }

    /// Copies the rows with the given indices into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, NumericsError> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Returns `Err(NonFinite)` when any value is NaN or infinite.
    pub fn check_finite(self, op: &'static str) -> Result<Self, NumericsError> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape != b.shape {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    if t.shape.len() != 2 {
        return Err(NumericsError::NotMatrix {
            op,
            shape: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `op(a) · op(b)` where `op` optionally transposes its operand.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor, NumericsError> {
    let (ar, ac) = as_matrix("matmul", a)?;
    let (br, bc) = as_matrix("matmul", b)?;
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers cover `m*k`, `k*n` and `m*n` elements with the
        // strides computed above, and `out` does not alias the inputs.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa as isize,
                csa as isize,
                b.data.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Adds a length-`cols` row vector to every row of a matrix.
pub(crate) fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = as_matrix("add_row", a)?;
    if row.data.len() != c {
        return Err(NumericsError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape.clone(),
            rhs: row.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for i in 0..r {
        for (v, b) in data[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
            *v += b;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Column sums of a matrix, shape `[cols]`.
pub(crate) fn sum_rows(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = as_matrix("sum_rows", a)?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&a.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Ok(Tensor::vector(out))
}

/// Repeats a row vector `n` times, shape `[n, cols]`.
pub(crate) fn broadcast_rows(row: &Tensor, n: usize) -> Tensor {
    let c = row.data.len();
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        data.extend_from_slice(&row.data);
    }
    Tensor {
        shape: vec![n, c],
        data,
    }
}

/// Row sums of a matrix, shape `[rows, 1]`.
pub(crate) fn sum_cols(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = as_matrix("sum_cols", a)?;
    let data = (0..r).map(|i| a.data[i * c..(i + 1) * c].iter().sum()).collect();
    Ok(Tensor {
        shape: vec![r, 1],
        data,
    })
}

/// Repeats a `[rows, 1]` column `n` times, shape `[rows, n]`.
pub(crate) fn broadcast_cols(col: &Tensor, n: usize) -> Tensor {
    let r = col.data.len();
    let mut data = Vec::with_capacity(r * n);
    for &v in &col.data {
        data.extend(std::iter::repeat_n(v, n));
    }
    Tensor {
        shape: vec![r, n],
        data,
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data[i * k + l] * b.data[l * n + j];
                }
            }
        }
        out
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, data).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7);
        let a = Tensor::randn([2, 3], &mut rng);
        let b = Tensor::randn([3, 4], &mut rng);
        let c = matmul(&a, &b, false, false).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        for (x, y) in c.data().iter().zip(brute_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_transpose_flags() {
        let mut rng = RngStream::new(8);
        let a = Tensor::randn([3, 5], &mut rng);
        let b = Tensor::randn([4, 3], &mut rng);
        let expected = brute_matmul(&transpose(&a), &transpose(&b));
        let got = matmul(&a, &b, true, true).unwrap();
        assert_eq!(got.shape(), &[5, 4]);
        for (x, y) in got.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-14);
        }
        let expected = brute_matmul(&b, &a);
        let got = matmul(&b, &transpose(&a), false, true).unwrap();
        for (x, y) in got.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let err = matmul(&a, &b, false, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::scalar(1.0).is_scalar());
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
