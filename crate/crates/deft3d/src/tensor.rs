//! Dense-tensor substrate: matrices, rank-4 feature volumes, and the numeric
//! primitives (matmul, softmax, layer norm) with explicit backward passes.
//!
//! Layout is row-major everywhere. Volumes are stored channel-major in
//! (c, d, h, w) order; flattening a volume walks d, then h, then w.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.at(r, c);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense rank-4 feature volume, channels x depth x height x width.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeTensor<T> {
    pub channels: usize,
    /// Spatial dims (D, H, W).
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> VolumeTensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        VolumeTensor {
            channels,
            dims,
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = channels * dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::dim(format!(
                "volume data length {} != {}x{}x{}x{}",
                data.len(),
                channels,
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        Ok(VolumeTensor {
            channels,
            dims,
            data,
        })
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn idx(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.idx(c, d, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, d: usize, h: usize, w: usize) -> &mut T {
        let i = self.idx(c, d, h, w);
        &mut self.data[i]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A value paired with a same-shape gradient accumulator.
#[derive(Clone, Debug)]
pub struct Dual<X> {
    pub value: X,
    pub grad: X,
}

impl<T: Scalar> Dual<Matrix<T>> {
    pub fn new(value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Dual { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad.data {
            *g = T::zero();
        }
    }
}

impl<T: Scalar> Dual<Vec<T>> {
    pub fn new_vec(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Dual { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = T::zero();
        }
    }
}

/// C = A x B. The inner accumulation runs over k in ascending order; every
/// caller that needs bit-level reproducibility relies on that.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "matmul: {}x{} . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = T::zero();
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(k, j);
            }
            c.data[i * b.cols + j] = acc;
        }
    }
    Ok(c)
}

/// Backward of matmul: dA = dC . B^T, dB = A^T . dC. Gradients accumulate.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    d_c: &Matrix<T>,
    d_a: &mut Matrix<T>,
    d_b: &mut Matrix<T>,
) -> Result<()> {
    if d_c.rows != a.rows || d_c.cols != b.cols {
        return Err(Error::dim("matmul_backward: upstream shape"));
    }
    for i in 0..a.rows {
        for k in 0..a.cols {
            let mut acc = T::zero();
            for j in 0..b.cols {
                acc += d_c.at(i, j) * b.at(k, j);
            }
            *d_a.at_mut(i, k) += acc;
        }
    }
    for k in 0..a.cols {
        for j in 0..b.cols {
            let mut acc = T::zero();
            for i in 0..a.rows {
                acc += a.at(i, k) * d_c.at(i, j);
            }
            *d_b.at_mut(k, j) += acc;
        }
    }
    Ok(())
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax: empty input"));
    }
    let mut max = logits[0];
    for &v in &logits[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax backward: dx_i = y_i * (dy_i - sum_j y_j dy_j).
pub fn softmax_backward<T: Scalar>(y: &[T], d_y: &[T], d_x: &mut [T]) {
    let mut dot = T::zero();
    for (yi, dyi) in y.iter().zip(d_y) {
        dot += *yi * *dyi;
    }
    for i in 0..y.len() {
        d_x[i] += y[i] * (d_y[i] - dot);
    }
}

/// Per-row statistics saved by layer_norm for its backward.
#[derive(Clone, Debug)]
pub struct LayerNormTape<T> {
    /// Normalized values before the affine transform.
    pub xhat: Vec<T>,
    pub inv_std: T,
}

pub fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<(Vec<T>, LayerNormTape<T>)> {
    let n = x.len();
    if gain.len() != n || bias.len() != n {
        return Err(Error::dim(format!(
            "layer_norm: x len {} vs gain {} bias {}",
            n,
            gain.len(),
            bias.len()
        )));
    }
    let count = T::lit(n as f64);
    let mean = x.iter().copied().sum::<T>() / count;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= count;
    let inv_std = T::one() / (var + eps).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let out = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&xh, (&g, &b))| g * xh + b)
        .collect();
    Ok((out, LayerNormTape { xhat, inv_std }))
}

/// Backward of layer_norm. Accumulates into d_x, d_gain, d_bias.
pub fn layer_norm_backward<T: Scalar>(
    tape: &LayerNormTape<T>,
    gain: &[T],
    d_out: &[T],
    d_x: &mut [T],
    d_gain: &mut [T],
    d_bias: &mut [T],
) {
    let n = tape.xhat.len();
    let count = T::lit(n as f64);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    let mut dxhat = vec![T::zero(); n];
    for i in 0..n {
        d_gain[i] += d_out[i] * tape.xhat[i];
        d_bias[i] += d_out[i];
        dxhat[i] = d_out[i] * gain[i];
        sum_dxhat += dxhat[i];
        sum_dxhat_xhat += dxhat[i] * tape.xhat[i];
    }
    for i in 0..n {
        d_x[i] += tape.inv_std
            * (dxhat[i] - sum_dxhat / count - tape.xhat[i] * sum_dxhat_xhat / count);
    }
}

/// Linear layer y = x W + b with W stored input-major (in x out).
#[derive(Clone, Debug)]
pub struct LinearParams<T> {
    pub weight: Dual<Matrix<T>>,
    pub bias: Dual<Vec<T>>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: Dual::new(Matrix::zeros(fan_in, fan_out)),
            bias: Dual::new_vec(vec![T::zero(); fan_out]),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = matmul(x, &self.weight.value)?;
        for r in 0..y.rows {
            for c in 0..y.cols {
                *y.at_mut(r, c) += self.bias.value[c];
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias grads and adds the input gradient into d_x.
    pub fn backward(&mut self, x: &Matrix<T>, d_y: &Matrix<T>, d_x: &mut Matrix<T>) -> Result<()> {
        matmul_backward(x, &self.weight.value, d_y, d_x, &mut self.weight.grad)?;
        for r in 0..d_y.rows {
            for c in 0..d_y.cols {
                self.bias.grad[c] += d_y.at(r, c);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}
