//! Dense row-major tensors.

use std::fmt;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("expected a 2-d tensor, got shape {0:?}")]
    NotMatrix(Vec<usize>),
}

/// An immutable-by-convention block of values with a shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, ShapeError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(ShapeError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a `[rows, cols]` matrix. Panics on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Self::new(vec![rows, cols], data).expect("matrix extents")
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, ShapeError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(vec![r, c], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, ShapeError> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full extents")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of every extent after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn dims2(&self) -> Result<(usize, usize), ShapeError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(ShapeError::NotMatrix(self.shape.clone()))
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(ShapeError::Length {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    pub fn transpose(&self) -> Result<Self, ShapeError> {
        let (r, c) = self.dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::matrix(c, r, data))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// `C = op(A) · op(B)` on raw row-major slices, where `op` optionally transposes.
///
/// `a` is stored as `ar × ac`, `b` as `br × bc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_raw<T: Scalar>(
    a: &[T],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[T],
    br: usize,
    bc: usize,
    tb: bool,
) -> (Vec<T>, usize, usize) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    let mut out = vec![T::zero(); m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * ac + p];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &b[p * bc..(p + 1) * bc];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (true, false) => {
            // A stored k×m.
            for p in 0..k {
                let arow = &a[p * ac..(p + 1) * ac];
                let brow = &b[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let av = arow[i];
                    if av == T::zero() {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // B stored n×k: dot products of rows.
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let brow = &b[j * bc..(j + 1) * bc];
                    let mut s = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        s = s + x * y;
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s = s + a[p * ac + i] * b[j * bc + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    (out, m, n)
}

impl<T: Scalar> Tensor<T> {
    /// Plain matrix product without graph recording.
    pub fn matmul(&self, other: &Self) -> Result<Self, ShapeError> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = other.dims2()?;
        if ac != br {
            return Err(ShapeError::Length {
                shape: vec![ac, bc],
                expected: ac * bc,
                actual: br * bc,
            });
        }
        let (out, m, n) = matmul_raw(&self.data, ar, ac, false, &other.data, br, bc, false);
        Ok(Self::matrix(m, n, out))
    }
}
