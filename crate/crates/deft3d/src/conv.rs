//! 3D convolution, transposed convolution, instance norm and ReLU on
//! feature volumes, each with an explicit backward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dual, VolumeTensor};

/// Weights of a 3D convolution. Kernel layout is (out, in, kd, kh, kw),
/// row-major.
#[derive(Clone, Debug)]
pub struct Conv3dParams<T> {
    pub cout: usize,
    pub cin: usize,
    pub ksize: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub weight: Dual<Vec<T>>,
    pub bias: Dual<Vec<T>>,
}

impl<T: Scalar> Conv3dParams<T> {
    pub fn zeros(cout: usize, cin: usize, ksize: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let n = cout * cin * ksize[0] * ksize[1] * ksize[2];
        Conv3dParams {
            cout,
            cin,
            ksize,
            stride,
            pad,
            weight: Dual::new_vec(vec![T::zero(); n]),
            bias: Dual::new_vec(vec![T::zero(); cout]),
        }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, kd: usize, kh: usize, kw: usize) -> usize {
        (((o * self.cin + i) * self.ksize[0] + kd) * self.ksize[1] + kh) * self.ksize[2] + kw
    }

    pub fn out_dims(&self, in_dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * self.pad[a];
            if self.ksize[a] > padded {
                return Err(Error::dim(format!(
                    "conv3d: kernel {} exceeds padded input {} on axis {}",
                    self.ksize[a], padded, a
                )));
            }
            out[a] = (padded - self.ksize[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &VolumeTensor<T>) -> Result<VolumeTensor<T>> {
        if x.channels != self.cin {
            return Err(Error::dim(format!(
                "conv3d: input channels {} != {}",
                x.channels, self.cin
            )));
        }
        let od = self.out_dims(x.dims)?;
        let mut y = VolumeTensor::zeros(self.cout, od);
        let plane = od[0] * od[1] * od[2];
        for o in 0..self.cout {
            let b = self.bias.value[o];
            for v in &mut y.data[o * plane..(o + 1) * plane] {
                *v = b;
            }
        }
        // tap-wise accumulation: one contiguous sweep over the output per
        // kernel element, keeping the innermost loop branch-free
        for o in 0..self.cout {
            for i in 0..self.cin {
                for kd in 0..self.ksize[0] {
                    let (zd0, zd1) = tap_range(od[0], self.stride[0], kd, self.pad[0], x.dims[0]);
                    for kh in 0..self.ksize[1] {
                        let (zh0, zh1) = tap_range(od[1], self.stride[1], kh, self.pad[1], x.dims[1]);
                        for kw in 0..self.ksize[2] {
                            let (zw0, zw1) = tap_range(od[2], self.stride[2], kw, self.pad[2], x.dims[2]);
                            let wv = self.weight.value[self.widx(o, i, kd, kh, kw)];
                            for zd in zd0..zd1 {
                                let d = zd * self.stride[0] + kd - self.pad[0];
                                for zh in zh0..zh1 {
                                    let h = zh * self.stride[1] + kh - self.pad[1];
                                    let ybase = ((o * od[0] + zd) * od[1] + zh) * od[2];
                                    let xrow = ((i * x.dims[0] + d) * x.dims[1] + h) * x.dims[2];
                                    for zw in zw0..zw1 {
                                        y.data[ybase + zw] +=
                                            wv * x.data[xrow + zw * self.stride[2] + kw - self.pad[2]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias grads; adds the input gradient into d_x.
    pub fn backward(
        &mut self,
        x: &VolumeTensor<T>,
        d_y: &VolumeTensor<T>,
        d_x: &mut VolumeTensor<T>,
    ) -> Result<()> {
        let od = self.out_dims(x.dims)?;
        if d_y.channels != self.cout || d_y.dims != od {
            return Err(Error::dim("conv3d backward: upstream shape"));
        }
        let plane = od[0] * od[1] * od[2];
        for o in 0..self.cout {
            let mut acc = T::zero();
            for g in &d_y.data[o * plane..(o + 1) * plane] {
                acc += *g;
            }
            self.bias.grad[o] += acc;
        }
        for o in 0..self.cout {
            for i in 0..self.cin {
                for kd in 0..self.ksize[0] {
                    let (zd0, zd1) = tap_range(od[0], self.stride[0], kd, self.pad[0], x.dims[0]);
                    for kh in 0..self.ksize[1] {
                        let (zh0, zh1) = tap_range(od[1], self.stride[1], kh, self.pad[1], x.dims[1]);
                        for kw in 0..self.ksize[2] {
                            let (zw0, zw1) = tap_range(od[2], self.stride[2], kw, self.pad[2], x.dims[2]);
                            let wi = self.widx(o, i, kd, kh, kw);
                            let wv = self.weight.value[wi];
                            let mut wg = T::zero();
                            for zd in zd0..zd1 {
                                let d = zd * self.stride[0] + kd - self.pad[0];
                                for zh in zh0..zh1 {
                                    let h = zh * self.stride[1] + kh - self.pad[1];
                                    let ybase = ((o * od[0] + zd) * od[1] + zh) * od[2];
                                    let xrow = ((i * x.dims[0] + d) * x.dims[1] + h) * x.dims[2];
                                    for zw in zw0..zw1 {
                                        let g = d_y.data[ybase + zw];
                                        let xi = xrow + zw * self.stride[2] + kw - self.pad[2];
                                        wg += g * x.data[xi];
                                        d_x.data[xi] += g * wv;
                                    }
                                }
                            }
                            self.weight.grad[wi] += wg;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

/// Output index range [lo, hi) on one axis for which a given kernel tap
/// stays inside the (padded) input: 0 <= z*stride + k - pad < in_len.
fn tap_range(out_len: usize, stride: usize, k: usize, pad: usize, in_len: usize) -> (usize, usize) {
    if in_len == 0 || k >= in_len + pad {
        return (0, 0);
    }
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Transposed 3D convolution (no padding). Kernel layout is
/// (in, out, kd, kh, kw); output dims are (in-1)*stride + k per axis, which
/// reduces to in*stride in the kernel==stride upsampling configuration.
#[derive(Clone, Debug)]
pub struct TransposedConv3dParams<T> {
    pub cin: usize,
    pub cout: usize,
    pub ksize: [usize; 3],
    pub stride: [usize; 3],
    pub weight: Dual<Vec<T>>,
    pub bias: Dual<Vec<T>>,
}

impl<T: Scalar> TransposedConv3dParams<T> {
    pub fn zeros(cin: usize, cout: usize, ksize: [usize; 3], stride: [usize; 3]) -> Self {
        let n = cin * cout * ksize[0] * ksize[1] * ksize[2];
        TransposedConv3dParams {
            cin,
            cout,
            ksize,
            stride,
            weight: Dual::new_vec(vec![T::zero(); n]),
            bias: Dual::new_vec(vec![T::zero(); cout]),
        }
    }

    #[inline]
    fn widx(&self, i: usize, o: usize, kd: usize, kh: usize, kw: usize) -> usize {
        (((i * self.cout + o) * self.ksize[0] + kd) * self.ksize[1] + kh) * self.ksize[2] + kw
    }

    pub fn out_dims(&self, in_dims: [usize; 3]) -> [usize; 3] {
        [
            (in_dims[0] - 1) * self.stride[0] + self.ksize[0],
            (in_dims[1] - 1) * self.stride[1] + self.ksize[1],
            (in_dims[2] - 1) * self.stride[2] + self.ksize[2],
        ]
    }

    pub fn forward(&self, x: &VolumeTensor<T>) -> Result<VolumeTensor<T>> {
        if x.channels != self.cin {
            return Err(Error::dim(format!(
                "transposed_conv3d: input channels {} != {}",
                x.channels, self.cin
            )));
        }
        let od = self.out_dims(x.dims);
        let mut y = VolumeTensor::zeros(self.cout, od);
        for o in 0..self.cout {
            let b = self.bias.value[o];
            let base = o * od[0] * od[1] * od[2];
            for v in &mut y.data[base..base + od[0] * od[1] * od[2]] {
                *v = b;
            }
        }
        for i in 0..self.cin {
            for zd in 0..x.dims[0] {
                for zh in 0..x.dims[1] {
                    for zw in 0..x.dims[2] {
                        let xv = x.at(i, zd, zh, zw);
                        for o in 0..self.cout {
                            for kd in 0..self.ksize[0] {
                                for kh in 0..self.ksize[1] {
                                    for kw in 0..self.ksize[2] {
                                        *y.at_mut(
                                            o,
                                            zd * self.stride[0] + kd,
                                            zh * self.stride[1] + kh,
                                            zw * self.stride[2] + kw,
                                        ) += xv * self.weight.value[self.widx(i, o, kd, kh, kw)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &mut self,
        x: &VolumeTensor<T>,
        d_y: &VolumeTensor<T>,
        d_x: &mut VolumeTensor<T>,
    ) -> Result<()> {
        let od = self.out_dims(x.dims);
        if d_y.channels != self.cout || d_y.dims != od {
            return Err(Error::dim("transposed_conv3d backward: upstream shape"));
        }
        for o in 0..self.cout {
            for zd in 0..od[0] {
                for zh in 0..od[1] {
                    for zw in 0..od[2] {
                        self.bias.grad[o] += d_y.at(o, zd, zh, zw);
                    }
                }
            }
        }
        for i in 0..self.cin {
            for zd in 0..x.dims[0] {
                for zh in 0..x.dims[1] {
                    for zw in 0..x.dims[2] {
                        let xv = x.at(i, zd, zh, zw);
                        let mut acc = T::zero();
                        for o in 0..self.cout {
                            for kd in 0..self.ksize[0] {
                                for kh in 0..self.ksize[1] {
                                    for kw in 0..self.ksize[2] {
                                        let g = d_y.at(
                                            o,
                                            zd * self.stride[0] + kd,
                                            zh * self.stride[1] + kh,
                                            zw * self.stride[2] + kw,
                                        );
                                        let wi = self.widx(i, o, kd, kh, kw);
                                        acc += g * self.weight.value[wi];
                                        self.weight.grad[wi] += g * xv;
                                    }
                                }
                            }
                        }
                        *d_x.at_mut(i, zd, zh, zw) += acc;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

/// Per-channel statistics saved by instance_norm for its backward.
#[derive(Clone, Debug)]
pub struct InstanceNormTape<T> {
    pub xhat: VolumeTensor<T>,
    pub inv_std: Vec<T>,
}

/// Instance norm: each channel normalized over its own (D,H,W) statistics,
/// then gain/bias affine.
pub fn instance_norm<T: Scalar>(
    x: &VolumeTensor<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<(VolumeTensor<T>, InstanceNormTape<T>)> {
    if gain.len() != x.channels || bias.len() != x.channels {
        return Err(Error::dim("instance_norm: gain/bias length"));
    }
    let spatial = x.voxel_count();
    let count = T::lit(spatial as f64);
    let mut y = VolumeTensor::zeros(x.channels, x.dims);
    let mut xhat = VolumeTensor::zeros(x.channels, x.dims);
    let mut inv_stds = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let base = c * spatial;
        let ch = &x.data[base..base + spatial];
        let mean = ch.iter().copied().sum::<T>() / count;
        let mut var = T::zero();
        for &v in ch {
            let d = v - mean;
            var += d * d;
        }
        var /= count;
        let inv_std = T::one() / (var + eps).sqrt();
        inv_stds.push(inv_std);
        for s in 0..spatial {
            let xh = (ch[s] - mean) * inv_std;
            xhat.data[base + s] = xh;
            y.data[base + s] = gain[c] * xh + bias[c];
        }
    }
    Ok((
        y,
        InstanceNormTape {
            xhat,
            inv_std: inv_stds,
        },
    ))
}

pub fn instance_norm_backward<T: Scalar>(
    tape: &InstanceNormTape<T>,
    gain: &[T],
    d_y: &VolumeTensor<T>,
    d_x: &mut VolumeTensor<T>,
    d_gain: &mut [T],
    d_bias: &mut [T],
) {
    let spatial = tape.xhat.voxel_count();
    let count = T::lit(spatial as f64);
    for c in 0..tape.xhat.channels {
        let base = c * spatial;
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for s in 0..spatial {
            let g = d_y.data[base + s];
            d_gain[c] += g * tape.xhat.data[base + s];
            d_bias[c] += g;
            let dxh = g * gain[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * tape.xhat.data[base + s];
        }
        for s in 0..spatial {
            let dxh = d_y.data[base + s] * gain[c];
            d_x.data[base + s] += tape.inv_std[c]
                * (dxh - sum_dxhat / count - tape.xhat.data[base + s] * sum_dxhat_xhat / count);
        }
    }
}

pub fn relu<T: Scalar>(x: &VolumeTensor<T>) -> VolumeTensor<T> {
    let data = x
        .data
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    VolumeTensor {
        channels: x.channels,
        dims: x.dims,
        data,
    }
}

pub fn relu_backward<T: Scalar>(x: &VolumeTensor<T>, d_y: &VolumeTensor<T>, d_x: &mut VolumeTensor<T>) {
    for i in 0..x.data.len() {
        if x.data[i] > T::zero() {
            d_x.data[i] += d_y.data[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn conv_identity_kernel() {
        let x = rng::random_volume::<f64>(&mut rng::seeded(1), 2, [3, 3, 3]);
        let mut p = Conv3dParams::zeros(2, 2, [1, 1, 1], [1, 1, 1], [0, 0, 0]);
        { let wi = p.widx(0, 0, 0, 0, 0); p.weight.value[wi] = 1.0; }
        { let wi = p.widx(1, 1, 0, 0, 0); p.weight.value[wi] = 1.0; }
        let y = p.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_counting_case() {
        let x = VolumeTensor::from_vec(1, [3, 3, 3], vec![1.0f64; 27]).unwrap();
        let mut p = Conv3dParams::zeros(1, 1, [3, 3, 3], [1, 1, 1], [0, 0, 0]);
        for w in &mut p.weight.value {
            *w = 1.0;
        }
        let y = p.forward(&x).unwrap();
        assert_eq!(y.dims, [1, 1, 1]);
        assert!((y.data[0] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn conv_vs_naive_oracle() {
        let mut r = rng::seeded(42);
        let x = rng::random_volume::<f64>(&mut r, 3, [5, 6, 4]);
        let mut p = Conv3dParams::zeros(2, 3, [3, 3, 3], [2, 1, 2], [1, 1, 0]);
        for w in &mut p.weight.value {
            *w = rng::uniform(&mut r, -1.0, 1.0);
        }
        for b in &mut p.bias.value {
            *b = rng::uniform(&mut r, -1.0, 1.0);
        }
        let y = p.forward(&x).unwrap();
        // independent 7-deep loop, iterated kernel-major
        for o in 0..2 {
            for zd in 0..y.dims[0] {
                for zh in 0..y.dims[1] {
                    for zw in 0..y.dims[2] {
                        let mut acc = p.bias.value[o];
                        for kd in 0..3usize {
                            for kh in 0..3usize {
                                for kw in 0..3usize {
                                    for i in 0..3 {
                                        let d = (zd * 2 + kd) as isize - 1;
                                        let h = (zh + kh) as isize - 1;
                                        let w = (zw * 2 + kw) as isize;
                                        if d < 0 || d >= 5 || h < 0 || h >= 6 || w >= 4 {
                                            continue;
                                        }
                                        acc += x.at(i, d as usize, h as usize, w as usize)
                                            * p.weight.value[p.widx(o, i, kd, kh, kw)];
                                    }
                                }
                            }
                        }
                        assert!((acc - y.at(o, zd, zh, zw)).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = VolumeTensor::<f64>::zeros(1, [2, 2, 2]);
        let p = Conv3dParams::<f64>::zeros(1, 1, [3, 3, 3], [1, 1, 1], [0, 0, 0]);
        assert!(p.forward(&x).is_err());
    }

    #[test]
    fn transposed_identity() {
        let x = rng::random_volume::<f64>(&mut rng::seeded(2), 2, [2, 3, 2]);
        let mut p = TransposedConv3dParams::zeros(2, 2, [1, 1, 1], [1, 1, 1]);
        { let wi = p.widx(0, 0, 0, 0, 0); p.weight.value[wi] = 1.0; }
        { let wi = p.widx(1, 1, 0, 0, 0); p.weight.value[wi] = 1.0; }
        let y = p.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transposed_broadcast_block() {
        let x = VolumeTensor::from_vec(1, [1, 1, 1], vec![3.5f64]).unwrap();
        let mut p = TransposedConv3dParams::zeros(1, 1, [2, 2, 2], [2, 2, 2]);
        for w in &mut p.weight.value {
            *w = 1.0;
        }
        let y = p.forward(&x).unwrap();
        assert_eq!(y.dims, [2, 2, 2]);
        for v in &y.data {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transposed_adjoint_identity() {
        // <conv(x), y> == <x, transposed_conv(y)> with shared weights.
        let mut r = rng::seeded(9);
        let x = rng::random_volume::<f64>(&mut r, 3, [4, 4, 4]);
        let mut c = Conv3dParams::zeros(2, 3, [2, 2, 2], [2, 2, 2], [0, 0, 0]);
        for w in &mut c.weight.value {
            *w = rng::uniform(&mut r, -1.0, 1.0);
        }
        let cx = c.forward(&x).unwrap();
        let y = rng::random_volume::<f64>(&mut r, 2, cx.dims);
        let mut t = TransposedConv3dParams::zeros(2, 3, [2, 2, 2], [2, 2, 2]);
        t.weight.value = c.weight.value.clone();
        let ty = t.forward(&y).unwrap();
        assert_eq!(ty.dims, x.dims);
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {lhs} vs {rhs}");
    }

    #[test]
    fn instance_norm_constant_channel() {
        let x = VolumeTensor::from_vec(1, [2, 2, 2], vec![4.0f64; 8]).unwrap();
        let (y, _) = instance_norm(&x, &[1.0], &[0.7], 1e-5).unwrap();
        for v in &y.data {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn instance_norm_symmetric_channel() {
        let x = VolumeTensor::from_vec(1, [1, 1, 2], vec![-3.0f64, 3.0]).unwrap();
        let (y, _) = instance_norm(&x, &[1.0], &[0.0], 1e-14).unwrap();
        assert!((y.data[0] + 1.0).abs() < 1e-6);
        assert!((y.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut r = rng::seeded(5);
        let x = rng::random_volume::<f64>(&mut r, 2, [4, 4, 4]);
        let (y, _) = instance_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        for c in 0..2 {
            let ch = &y.data[c * 64..(c + 1) * 64];
            let mean: f64 = ch.iter().sum::<f64>() / 64.0;
            let var: f64 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
