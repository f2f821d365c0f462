//! 3D sinusoidal positional encoding: per-axis sin/cos tables concatenated
//! D-block, H-block, W-block, fused into the token sequence by summation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seq::{LevelLayout, TokenSequence};
use crate::tensor::Matrix;

/// Positional encoding table for a full multi-level layout, N x C.
#[derive(Clone, Debug)]
pub struct PositionalEncoding<T> {
    pub table: Matrix<T>,
}

/// One sin/cos pair at channel-pair index k: frequency 1/10000^(2k/(C/3)).
/// Computed in f64 and cast once at the end.
pub fn sinusoid_1d<T: Scalar>(pos: usize, k: usize, c: usize) -> Result<(T, T)> {
    let per_axis = c / 3;
    if 2 * k + 1 >= per_axis {
        return Err(Error::Index(format!(
            "sinusoid_1d: pair index {} out of range for {} channels per axis",
            k, per_axis
        )));
    }
    let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / per_axis as f64);
    let angle = pos as f64 * freq;
    Ok((T::lit(angle.sin()), T::lit(angle.cos())))
}

/// Builds the full PE table for a layout. Channel partition: first C/3
/// channels encode d, next C/3 encode h, last C/3 encode w; within each
/// block sin lands at even pair-offsets and cos at odd.
pub fn build_pe<T: Scalar>(layout: &LevelLayout, c: usize) -> Result<PositionalEncoding<T>> {
    if c == 0 || c % 6 != 0 {
        return Err(Error::config(format!(
            "positional encoding needs channel count divisible by 6, got {}",
            c
        )));
    }
    let per_axis = c / 3;
    let pairs = per_axis / 2;
    let mut table = Matrix::zeros(layout.total, c);
    for l in 0..layout.levels() {
        let [dd, hh, ww] = layout.dims[l];
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    let row = layout.token_index(l, d, h, w);
                    let out = table.row_mut(row);
                    for (axis, pos) in [(0, d), (1, h), (2, w)] {
                        let base = axis * per_axis;
                        for k in 0..pairs {
                            let (s, cv) = sinusoid_1d::<T>(pos, k, c)?;
                            out[base + 2 * k] = s;
                            out[base + 2 * k + 1] = cv;
                        }
                    }
                }
            }
        }
    }
    Ok(PositionalEncoding { table })
}

/// Elementwise sum of the sequence and its PE table. The backward is the
/// identity on the sequence gradient, so no tape is needed.
pub fn add_pe<T: Scalar>(seq: &TokenSequence<T>, pe: &PositionalEncoding<T>) -> Result<TokenSequence<T>> {
    if seq.tokens.rows != pe.table.rows || seq.tokens.cols != pe.table.cols {
        return Err(Error::dim(format!(
            "add_pe: sequence {}x{} vs table {}x{}",
            seq.tokens.rows, seq.tokens.cols, pe.table.rows, pe.table.cols
        )));
    }
    let mut out = seq.clone();
    for (o, p) in out.tokens.data.iter_mut().zip(&pe.table.data) {
        *o += *p;
    }
    Ok(out)
}
