//! Trilinear sampling of a feature volume at fractional 3D coordinates,
//! with gradients w.r.t. both the voxel values and the coordinate.
//!
//! Coordinates outside [0, dim-1] are clamped per axis (border replication),
//! which makes the map continuous everywhere and differentiable away from
//! the integer lattice and the clamp boundaries.

use crate::scalar::Scalar;
use crate::tensor::VolumeTensor;

/// Per-axis interpolation state: the two grid indices, the fractional
/// weight toward the upper one, and whether the coordinate was inside the
/// unclamped range (gradient flows only if it was).
#[derive(Clone, Copy, Debug)]
pub struct AxisInterp<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
    pub inside: bool,
}

pub fn axis_interp<T: Scalar>(coord: T, dim: usize) -> AxisInterp<T> {
    let max = T::lit((dim - 1) as f64);
    let inside = coord > T::zero() && coord < max;
    let cl = if coord < T::zero() {
        T::zero()
    } else if coord > max {
        max
    } else {
        coord
    };
    if dim == 1 {
        return AxisInterp {
            i0: 0,
            i1: 0,
            frac: T::zero(),
            inside: false,
        };
    }
    let mut i0 = cl.floor().to_f64() as usize;
    if i0 >= dim - 1 {
        i0 = dim - 2;
    }
    AxisInterp {
        i0,
        i1: i0 + 1,
        frac: cl - T::lit(i0 as f64),
        inside,
    }
}

/// Samples every channel of `level` at one continuous (d, h, w) coordinate.
/// The 8 corner weights are accumulated in a fixed corner order.
pub fn trilinear_sample<T: Scalar>(level: &VolumeTensor<T>, coord: [T; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); level.channels];
    trilinear_sample_into(level, coord, &mut out);
    out
}

pub fn trilinear_sample_into<T: Scalar>(level: &VolumeTensor<T>, coord: [T; 3], out: &mut [T]) {
    trilinear_sample_range(level, coord, 0, level.channels, out);
}

/// Samples only channels [c0, c1) of `level`; out must have length c1-c0.
pub fn trilinear_sample_range<T: Scalar>(
    level: &VolumeTensor<T>,
    coord: [T; 3],
    c0: usize,
    c1: usize,
    out: &mut [T],
) {
    let ad = axis_interp(coord[0], level.dims[0]);
    let ah = axis_interp(coord[1], level.dims[1]);
    let aw = axis_interp(coord[2], level.dims[2]);
    let one = T::one();
    for c in c0..c1 {
        let mut acc = T::zero();
        for (di, wd) in [(ad.i0, one - ad.frac), (ad.i1, ad.frac)] {
            for (hi, wh) in [(ah.i0, one - ah.frac), (ah.i1, ah.frac)] {
                for (wi, ww) in [(aw.i0, one - aw.frac), (aw.i1, aw.frac)] {
                    acc += wd * wh * ww * level.at(c, di, hi, wi);
                }
            }
        }
        out[c - c0] = acc;
    }
}

/// Backward of trilinear_sample for one coordinate. Scatters `d_out`
/// (one gradient per channel) into the voxel-gradient volume and returns the
/// gradient w.r.t. the coordinate. Clamped axes get zero coordinate
/// gradient.
pub fn trilinear_sample_backward<T: Scalar>(
    level: &VolumeTensor<T>,
    coord: [T; 3],
    d_out: &[T],
    d_level: &mut VolumeTensor<T>,
) -> [T; 3] {
    trilinear_sample_backward_range(level, coord, d_out, 0, level.channels, d_level)
}

/// Backward restricted to channels [c0, c1); d_out has length c1-c0.
pub fn trilinear_sample_backward_range<T: Scalar>(
    level: &VolumeTensor<T>,
    coord: [T; 3],
    d_out: &[T],
    c0: usize,
    c1: usize,
    d_level: &mut VolumeTensor<T>,
) -> [T; 3] {
    let ad = axis_interp(coord[0], level.dims[0]);
    let ah = axis_interp(coord[1], level.dims[1]);
    let aw = axis_interp(coord[2], level.dims[2]);
    let one = T::one();
    let mut d_coord = [T::zero(); 3];
    for c in c0..c1 {
        let g = d_out[c - c0];
        for (di, wd, sd) in [(ad.i0, one - ad.frac, -one), (ad.i1, ad.frac, one)] {
            for (hi, wh, sh) in [(ah.i0, one - ah.frac, -one), (ah.i1, ah.frac, one)] {
                for (wi, ww, sw) in [(aw.i0, one - aw.frac, -one), (aw.i1, aw.frac, one)] {
                    let v = level.at(c, di, hi, wi);
                    *d_level.at_mut(c, di, hi, wi) += g * wd * wh * ww;
                    if ad.inside {
                        d_coord[0] += g * sd * wh * ww * v;
                    }
                    if ah.inside {
                        d_coord[1] += g * wd * sh * ww * v;
                    }
                    if aw.inside {
                        d_coord[2] += g * wd * wh * sw * v;
                    }
                }
            }
        }
    }
    d_coord
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn sample_on_grid_point_is_exact() {
        let v = rng::random_volume::<f64>(&mut rng::seeded(1), 3, [3, 4, 5]);
        let s = trilinear_sample(&v, [2.0, 1.0, 3.0]);
        for c in 0..3 {
            assert_eq!(s[c], v.at(c, 2, 1, 3));
        }
    }

    #[test]
    fn sample_cell_center_is_corner_mean() {
        let v = rng::random_volume::<f64>(&mut rng::seeded(2), 2, [2, 2, 2]);
        let s = trilinear_sample(&v, [0.5, 0.5, 0.5]);
        for c in 0..2 {
            let mean: f64 = (0..8)
                .map(|i| v.at(c, i / 4, (i / 2) % 2, i % 2))
                .sum::<f64>()
                / 8.0;
            assert!((s[c] - mean).abs() < 1e-13);
        }
    }

    #[test]
    fn sample_vs_direct_formula_oracle() {
        let mut r = rng::seeded(3);
        let v = rng::random_volume::<f64>(&mut r, 2, [4, 5, 3]);
        for _ in 0..50 {
            let d = rng::uniform(&mut r, 0.0, 3.0);
            let h = rng::uniform(&mut r, 0.0, 4.0);
            let w = rng::uniform(&mut r, 0.0, 2.0);
            let s = trilinear_sample(&v, [d, h, w]);
            let (d0, h0, w0) = (d.floor() as usize, h.floor() as usize, w.floor() as usize);
            let d0 = d0.min(2);
            let h0 = h0.min(3);
            let w0 = w0.min(1);
            let (td, th, tw) = (d - d0 as f64, h - h0 as f64, w - w0 as f64);
            for c in 0..2 {
                let f = |dd: usize, hh: usize, ww: usize| v.at(c, dd, hh, ww);
                let direct = (1.0 - td) * (1.0 - th) * (1.0 - tw) * f(d0, h0, w0)
                    + (1.0 - td) * (1.0 - th) * tw * f(d0, h0, w0 + 1)
                    + (1.0 - td) * th * (1.0 - tw) * f(d0, h0 + 1, w0)
                    + (1.0 - td) * th * tw * f(d0, h0 + 1, w0 + 1)
                    + td * (1.0 - th) * (1.0 - tw) * f(d0 + 1, h0, w0)
                    + td * (1.0 - th) * tw * f(d0 + 1, h0, w0 + 1)
                    + td * th * (1.0 - tw) * f(d0 + 1, h0 + 1, w0)
                    + td * th * tw * f(d0 + 1, h0 + 1, w0 + 1);
                assert!((s[c] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_clamps_to_border() {
        let v = rng::random_volume::<f64>(&mut rng::seeded(4), 1, [2, 2, 2]);
        let inside = trilinear_sample(&v, [0.0, 0.0, 0.0]);
        let outside = trilinear_sample(&v, [-3.0, -0.5, -100.0]);
        assert_eq!(inside, outside);
        let far = trilinear_sample(&v, [10.0, 10.0, 10.0]);
        assert_eq!(far[0], v.at(0, 1, 1, 1));
    }

    #[test]
    fn coordinate_gradient_matches_finite_differences() {
        let mut r = rng::seeded(5);
        let v = rng::random_volume::<f64>(&mut r, 2, [4, 4, 4]);
        let eps = 1e-6;
        for _ in 0..20 {
            // stay away from the integer lattice
            let coord = [
                rng::uniform(&mut r, 0.1, 2.9).floor() + rng::uniform(&mut r, 0.2, 0.8),
                rng::uniform(&mut r, 0.1, 2.9).floor() + rng::uniform(&mut r, 0.2, 0.8),
                rng::uniform(&mut r, 0.1, 2.9).floor() + rng::uniform(&mut r, 0.2, 0.8),
            ];
            let d_out = vec![
                rng::uniform(&mut r, -1.0, 1.0),
                rng::uniform(&mut r, -1.0, 1.0),
            ];
            let mut d_level = VolumeTensor::zeros(2, [4, 4, 4]);
            let d_coord = trilinear_sample_backward(&v, coord, &d_out, &mut d_level);
            for axis in 0..3 {
                let mut plus = coord;
                plus[axis] += eps;
                let mut minus = coord;
                minus[axis] -= eps;
                let sp = trilinear_sample(&v, plus);
                let sm = trilinear_sample(&v, minus);
                let num: f64 = (0..2).map(|c| d_out[c] * (sp[c] - sm[c]) / (2.0 * eps)).sum();
                assert!(
                    (num - d_coord[axis]).abs() < 1e-6,
                    "axis {axis}: analytic {} vs numeric {num}",
                    d_coord[axis]
                );
            }
        }
    }

    #[test]
    fn value_gradient_scatters_the_weights() {
        let v = rng::random_volume::<f64>(&mut rng::seeded(6), 1, [3, 3, 3]);
        let mut d_level = VolumeTensor::zeros(1, [3, 3, 3]);
        trilinear_sample_backward(&v, [0.25, 1.5, 0.75], &[1.0], &mut d_level);
        let total: f64 = d_level.data.iter().sum();
        assert!((total - 1.0).abs() < 1e-12); // weights sum to 1
        let nonzero = d_level.data.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 8);
    }

    #[test]
    fn clamped_axis_gets_zero_coordinate_gradient() {
        let v = rng::random_volume::<f64>(&mut rng::seeded(7), 1, [3, 3, 3]);
        let mut d_level = VolumeTensor::zeros(1, [3, 3, 3]);
        let d_coord = trilinear_sample_backward(&v, [-1.0, 1.5, 5.0], &[1.0], &mut d_level);
        assert_eq!(d_coord[0], 0.0);
        assert!(d_coord[1] != 0.0);
        assert_eq!(d_coord[2], 0.0);
    }

    #[test]
    fn singleton_axis_is_constant() {
        let v = rng::random_volume::<f64>(&mut rng::seeded(8), 2, [1, 3, 3]);
        let a = trilinear_sample(&v, [0.0, 1.0, 1.0]);
        let b = trilinear_sample(&v, [0.9, 1.0, 1.0]);
        assert_eq!(a, b);
    }
}
