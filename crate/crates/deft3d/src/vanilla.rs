//! Full (quadratic) multi-head self-attention, used only as the complexity
//! baseline for the benchmarks. Forward-only by design.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{softmax, LinearParams, Matrix};

#[derive(Clone, Debug)]
pub struct VanillaParams<T> {
    pub channels: usize,
    pub heads: usize,
    pub w_q: LinearParams<T>,
    pub w_k: LinearParams<T>,
    pub w_v: LinearParams<T>,
    pub w_out: LinearParams<T>,
}

impl<T: Scalar> VanillaParams<T> {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(VanillaParams {
            channels,
            heads,
            w_q: LinearParams::zeros(channels, channels),
            w_k: LinearParams::zeros(channels, channels),
            w_v: LinearParams::zeros(channels, channels),
            w_out: LinearParams::zeros(channels, channels),
        })
    }

    pub fn head_width(&self) -> usize {
        self.channels / self.heads
    }

    pub fn randomize(&mut self, r: &mut ChaCha8Rng, scale: f64) {
        for lin in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_out] {
            for w in &mut lin.weight.value.data {
                *w = T::lit(rng::uniform(r, -scale, scale));
            }
            for b in &mut lin.bias.value {
                *b = T::lit(rng::uniform(r, -scale, scale));
            }
        }
    }
}

/// Forward pass that also returns the per-head N×N attention matrices
/// (row q = distribution over keys for query q).
pub fn vanilla_forward_full<T: Scalar>(
    tokens: &Matrix<T>,
    params: &VanillaParams<T>,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    if tokens.cols != params.channels {
        return Err(Error::dim(format!(
            "token width {} != channels {}",
            tokens.cols, params.channels
        )));
    }
    let n = tokens.rows;
    let c = params.channels;
    let ch = params.head_width();
    let scale = T::one() / T::lit((ch as f64).sqrt());

    let q = params.w_q.forward(tokens)?;
    let k = params.w_k.forward(tokens)?;
    let v = params.w_v.forward(tokens)?;

    let mut headcat = Matrix::zeros(n, c);
    let mut attn = Vec::with_capacity(params.heads);
    let mut logits = vec![T::zero(); n];
    for h in 0..params.heads {
        let c0 = h * ch;
        let mut a = Matrix::zeros(n, n);
        for qi in 0..n {
            for (ki, logit) in logits.iter_mut().enumerate() {
                let mut dot = T::zero();
                for d in 0..ch {
                    dot += q.at(qi, c0 + d) * k.at(ki, c0 + d);
                }
                *logit = dot * scale;
            }
            let row = softmax(&logits)?;
            for ki in 0..n {
                let w = row[ki];
                *a.at_mut(qi, ki) = w;
                for d in 0..ch {
                    *headcat.at_mut(qi, c0 + d) += w * v.at(ki, c0 + d);
                }
            }
        }
        attn.push(a);
    }
    let out = params.w_out.forward(&headcat)?;
    Ok((out, attn))
}

pub fn vanilla_forward<T: Scalar>(
    tokens: &Matrix<T>,
    params: &VanillaParams<T>,
) -> Result<Matrix<T>> {
    Ok(vanilla_forward_full(tokens, params)?.0)
}

/// Analytic workspace element count for one layer: Q, K, V, head
/// concatenation (4·N·C) plus the H per-head N×N attention matrices.
pub fn vanilla_workspace_elems(n: usize, c: usize, heads: usize) -> usize {
    4 * n * c + heads * n * n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_setup(seed: u64, n: usize, c: usize, heads: usize) -> (Matrix<f64>, VanillaParams<f64>) {
        let mut r = rng::seeded(seed);
        let tokens = rng::random_matrix(&mut r, n, c);
        let mut p = VanillaParams::new(c, heads).unwrap();
        p.randomize(&mut r, 0.5);
        (tokens, p)
    }

    /// Naive transliteration: per-element projections, explicit exp/sum
    /// softmax, triple loop over (query, key, channel).
    fn oracle(tokens: &Matrix<f64>, p: &VanillaParams<f64>) -> Matrix<f64> {
        let n = tokens.rows;
        let c = p.channels;
        let ch = p.head_width();
        let proj = |lin: &LinearParams<f64>, row: &[f64], j: usize| {
            let mut s = lin.bias.value[j];
            for i in 0..c {
                s += row[i] * lin.weight.value.at(i, j);
            }
            s
        };
        let mut headcat = Matrix::zeros(n, c);
        for h in 0..p.heads {
            for qi in 0..n {
                let mut logits = Vec::with_capacity(n);
                for ki in 0..n {
                    let mut dot = 0.0;
                    for d in 0..ch {
                        dot += proj(&p.w_q, tokens.row(qi), h * ch + d)
                            * proj(&p.w_k, tokens.row(ki), h * ch + d);
                    }
                    logits.push(dot / (ch as f64).sqrt());
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for ki in 0..n {
                    for d in 0..ch {
                        *headcat.at_mut(qi, h * ch + d) +=
                            exps[ki] / z * proj(&p.w_v, tokens.row(ki), h * ch + d);
                    }
                }
            }
        }
        let mut out = Matrix::zeros(n, c);
        for qi in 0..n {
            for j in 0..c {
                *out.at_mut(qi, j) = proj(&p.w_out, headcat.row(qi), j);
            }
        }
        out
    }

    #[test]
    fn matches_naive_three_loop_oracle() {
        for (seed, n, c, heads) in [(1u64, 7, 6, 2), (2, 5, 8, 4), (3, 12, 6, 1)] {
            let (tokens, p) = random_setup(seed, n, c, heads);
            let out = vanilla_forward(&tokens, &p).unwrap();
            let want = oracle(&tokens, &p);
            for (a, b) in out.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_token_is_projected_value() {
        let (tokens, p) = random_setup(4, 1, 6, 2);
        let out = vanilla_forward(&tokens, &p).unwrap();
        let v = p.w_v.forward(&tokens).unwrap();
        let want = p.w_out.forward(&v).unwrap();
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        let mut r = rng::seeded(5);
        let row: Vec<f64> = (0..6).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let mut tokens = Matrix::zeros(3, 6);
        for q in 0..3 {
            tokens.row_mut(q).copy_from_slice(&row);
        }
        let mut p = VanillaParams::new(6, 3).unwrap();
        p.randomize(&mut r, 0.5);
        let out = vanilla_forward(&tokens, &p).unwrap();
        for q in 1..3 {
            assert_eq!(out.row(0), out.row(q));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (tokens, p) = random_setup(6, 6, 8, 2);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Matrix::zeros(6, 8);
        for (dst, src) in perm.iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(tokens.row(*src));
        }
        let out = vanilla_forward(&tokens, &p).unwrap();
        let out_p = vanilla_forward(&permuted, &p).unwrap();
        for (dst, src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((out_p.at(dst, j) - out.at(*src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (tokens, p) = random_setup(7, 9, 6, 3);
        let (_, attn) = vanilla_forward_full(&tokens, &p).unwrap();
        for a in &attn {
            for q in 0..a.rows {
                let s: f64 = a.row(q).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn workspace_count_formula() {
        assert_eq!(vanilla_workspace_elems(4096, 96, 6), 4 * 4096 * 96 + 6 * 4096 * 4096);
    }
}
