//! Dense row-major tensors and the matrix kernels every op is built from.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar type used throughout the engine.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
/// Scalar type used throughout the engine.
#[cfg(feature = "f32")]
pub type Float = f32;

/// A dense n-dimensional array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: Float) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<Float>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Float {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows and columns of a matrix; vectors are treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[Float] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 || self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.data, (k, 1), &other.data, (n, 1), 0.0, &mut out, (n, 1));
        Self::new(vec![m, n], out)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, v) in lane.iter_mut().enumerate() {
                    *v = self.data[base + j * inner];
                }
                softmax_in_place(&mut lane);
                for (j, v) in lane.iter().enumerate() {
                    out[base + j * inner] = *v;
                }
            }
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> Float {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Float {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Float::max)
    }
}

/// In-place numerically stable softmax of one lane.
pub(crate) fn softmax_in_place(xs: &mut [Float]) {
    let max = xs.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    if max == Float::NEG_INFINITY {
        // Fully masked lane; leave as zeros so callers never divide by zero.
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    xs.iter_mut().for_each(|x| *x *= inv);
}

/// General strided matrix multiply `c = alpha * a @ b + beta * c`.
///
/// Strides are `(row_stride, col_stride)` in elements, so transposed or
/// column-sliced operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Float,
    a: &[Float],
    a_strides: (usize, usize),
    b: &[Float],
    b_strides: (usize, usize),
    beta: Float,
    c: &mut [Float],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    debug_assert!(k == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    debug_assert!((m - 1) * c_strides.0 + (n - 1) * c_strides.1 < c.len());
    // SAFETY: the debug assertions above describe the bounds every caller
    // upholds; the kernel reads and writes only within those extents.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let m = Tensor::new(vec![3, 3], (0..9).map(|x| x as Float * 0.5 - 1.0).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
        let b = Tensor::new(vec![3, 4], (0..12).map(|x| x as Float).collect()).unwrap();
        let z = Tensor::zeros(&[2, 3]).matmul(&b).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_axis() {
        let s = Tensor::zeros(&[4]).softmax(0).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap().softmax(0).unwrap();
        assert!((t.data()[0] + t.data()[2] - 1.0).abs() < 1e-12);
        assert!((t.data()[0] - t.data()[1]).abs() < 1e-15);
    }

    #[test]
    fn transpose_round_trip() {
        let m = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m.transpose().unwrap().transpose().unwrap(), m);
        assert_eq!(m.transpose().unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
