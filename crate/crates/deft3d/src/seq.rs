//! Bridge between the CNN feature pyramid and the transformer token
//! sequence: flattening, layouts, reference points and the per-level
//! coordinate rescaling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, VolumeTensor};

/// Bookkeeping that maps each token in the flattened sequence back to its
/// (level, d, h, w) position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    /// Per-level spatial dims (D_l, H_l, W_l).
    pub dims: Vec<[usize; 3]>,
    /// Start offset of each level in the token sequence.
    pub offsets: Vec<usize>,
    /// Total token count.
    pub total: usize,
}

impl LevelLayout {
    pub fn new(dims: Vec<[usize; 3]>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0usize;
        for d in &dims {
            offsets.push(total);
            total += d[0] * d[1] * d[2];
        }
        LevelLayout {
            dims,
            offsets,
            total,
        }
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    /// Token index of voxel (d, h, w) at `level`; flattening is d-major,
    /// then h, then w.
    #[inline]
    pub fn token_index(&self, level: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, hh, ww] = self.dims[level];
        self.offsets[level] + (d * hh + h) * ww + w
    }

    /// Inverse of token_index.
    pub fn token_coords(&self, token: usize) -> (usize, usize, usize, usize) {
        let mut level = self.levels() - 1;
        for l in 0..self.levels() {
            let end = self.offsets[l] + self.dims[l][0] * self.dims[l][1] * self.dims[l][2];
            if token < end {
                level = l;
                break;
            }
        }
        let rel = token - self.offsets[level];
        let [_, h_l, w_l] = self.dims[level];
        let w = rel % w_l;
        let h = (rel / w_l) % h_l;
        let d = rel / (w_l * h_l);
        (level, d, h, w)
    }
}

/// Flattened multi-scale tokens (N x C) plus their layout.
#[derive(Clone, Debug)]
pub struct TokenSequence<T> {
    pub tokens: Matrix<T>,
    pub layout: LevelLayout,
}

/// Per-token normalized 3D coordinates, each in [0,1].
#[derive(Clone, Debug)]
pub struct ReferencePoints<T> {
    /// N rows of (d_hat, h_hat, w_hat).
    pub coords: Vec<[T; 3]>,
}

/// Flattens the feature pyramid into one token sequence, level-major then
/// d, h, w within each level. Channels become token features.
pub fn flatten_levels<T: Scalar>(levels: &[VolumeTensor<T>]) -> Result<TokenSequence<T>> {
    if levels.is_empty() {
        return Err(Error::dim("flatten_levels: no levels"));
    }
    let c = levels[0].channels;
    for (i, lv) in levels.iter().enumerate() {
        if lv.channels != c {
            return Err(Error::dim(format!(
                "flatten_levels: level {} has {} channels, expected {}",
                i, lv.channels, c
            )));
        }
    }
    let layout = LevelLayout::new(levels.iter().map(|l| l.dims).collect());
    let mut tokens = Matrix::zeros(layout.total, c);
    for (l, lv) in levels.iter().enumerate() {
        let [dd, hh, ww] = lv.dims;
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    let row = layout.token_index(l, d, h, w);
                    for ch in 0..c {
                        *tokens.at_mut(row, ch) = lv.at(ch, d, h, w);
                    }
                }
            }
        }
    }
    Ok(TokenSequence { tokens, layout })
}

/// Exact inverse of flatten_levels.
pub fn unflatten<T: Scalar>(seq: &TokenSequence<T>) -> Result<Vec<VolumeTensor<T>>> {
    unflatten_matrix(&seq.tokens, &seq.layout)
}

/// Reshapes an arbitrary N x C matrix back into per-level volumes under the
/// given layout.
pub fn unflatten_matrix<T: Scalar>(
    tokens: &Matrix<T>,
    layout: &LevelLayout,
) -> Result<Vec<VolumeTensor<T>>> {
    if tokens.rows != layout.total {
        return Err(Error::dim(format!(
            "unflatten: {} rows vs layout total {}",
            tokens.rows, layout.total
        )));
    }
    let c = tokens.cols;
    let mut out = Vec::with_capacity(layout.levels());
    for (l, &dims) in layout.dims.iter().enumerate() {
        let mut vol = VolumeTensor::zeros(c, dims);
        let [dd, hh, ww] = dims;
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    let row = layout.token_index(l, d, h, w);
                    for ch in 0..c {
                        *vol.at_mut(ch, d, h, w) = tokens.at(row, ch);
                    }
                }
            }
        }
        out.push(vol);
    }
    Ok(out)
}

/// Reference point of every token: the normalized center of its own voxel,
/// ((d+0.5)/D_l, (h+0.5)/H_l, (w+0.5)/W_l).
pub fn reference_points<T: Scalar>(layout: &LevelLayout) -> ReferencePoints<T> {
    let half = T::lit(0.5);
    let mut coords = Vec::with_capacity(layout.total);
    for &dims in &layout.dims {
        let [dd, hh, ww] = dims;
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    coords.push([
                        (T::lit(d as f64) + half) / T::lit(dd as f64),
                        (T::lit(h as f64) + half) / T::lit(hh as f64),
                        (T::lit(w as f64) + half) / T::lit(ww as f64),
                    ]);
                }
            }
        }
    }
    ReferencePoints { coords }
}

/// Rescales a normalized coordinate to continuous grid coordinates of one
/// level: p_hat * dim - 0.5 per axis (voxel-center convention). Linear by
/// design; any clamping happens later in the sampler.
#[inline]
pub fn rescale<T: Scalar>(p_hat: [T; 3], dims: [usize; 3]) -> [T; 3] {
    let half = T::lit(0.5);
    [
        p_hat[0] * T::lit(dims[0] as f64) - half,
        p_hat[1] * T::lit(dims[1] as f64) - half,
        p_hat[2] * T::lit(dims[2] as f64) - half,
    ]
}
