//! DeTrans encoder: deformable attention + feed-forward sublayers, each in
//! a post-norm residual arrangement (sublayer, add, layer norm), stacked
//! into a full encoder.

use rand_chacha::ChaCha8Rng;

use crate::dmsa::{msdmsa_backward, msdmsa_forward, DmsaParams, DmsaTape};
use crate::error::Result;
use crate::rng;
use crate::scalar::Scalar;
use crate::seq::{ReferencePoints, TokenSequence};
use crate::tensor::{
    layer_norm, layer_norm_backward, Dual, LayerNormTape, LinearParams, Matrix,
};

/// Gain/bias pair for a row-wise layer norm of width C.
#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gain: Dual<Vec<T>>,
    pub bias: Dual<Vec<T>>,
    pub eps: T,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(width: usize) -> Self {
        LayerNormParams {
            gain: Dual::new_vec(vec![T::one(); width]),
            bias: Dual::new_vec(vec![T::zero(); width]),
            eps: T::lit(1e-5),
        }
    }

    pub fn zero_grad(&mut self) {
        self.gain.zero_grad();
        self.bias.zero_grad();
    }
}

/// Two linear maps C -> F -> C with ReLU between; dropout after each linear
/// layer, disabled (rate 0) by default.
#[derive(Clone, Debug)]
pub struct FfnParams<T> {
    pub lin1: LinearParams<T>,
    pub lin2: LinearParams<T>,
    pub dropout: f64,
}

impl<T: Scalar> FfnParams<T> {
    pub fn zeros(c: usize, hidden: usize) -> Self {
        FfnParams {
            lin1: LinearParams::zeros(c, hidden),
            lin2: LinearParams::zeros(hidden, c),
            dropout: 0.0,
        }
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        let (c, f) = (self.lin1.weight.value.rows, self.lin1.weight.value.cols);
        self.lin1.weight.value.data = rng::he_normal(r, c * f, c);
        self.lin2.weight.value.data = rng::xavier_uniform(r, f * c, f, c);
    }

    pub fn zero_grad(&mut self) {
        self.lin1.zero_grad();
        self.lin2.zero_grad();
    }
}

#[derive(Clone, Debug)]
pub struct FfnTape<T> {
    x: Matrix<T>,
    /// Hidden activations before ReLU.
    hidden_pre: Matrix<T>,
    /// Hidden activations after ReLU and (possibly) dropout.
    hidden: Matrix<T>,
    /// Kept-unit scale per element when dropout is active.
    drop1: Option<Vec<T>>,
    drop2: Option<Vec<T>>,
}

/// Row-wise FFN: Linear -> ReLU -> Linear. When `rng` is given and the
/// dropout rate is positive, inverted dropout runs after each linear layer.
pub fn ffn_forward<T: Scalar>(
    params: &FfnParams<T>,
    x: &Matrix<T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Matrix<T>, FfnTape<T>)> {
    let hidden_pre = params.lin1.forward(x)?;
    let mut hidden = hidden_pre.clone();
    for v in &mut hidden.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let drop1 = apply_dropout(&mut hidden, params.dropout, rng.as_deref_mut());
    let mut out = params.lin2.forward(&hidden)?;
    let drop2 = apply_dropout(&mut out, params.dropout, rng);
    Ok((
        out,
        FfnTape {
            x: x.clone(),
            hidden_pre,
            hidden,
            drop1,
            drop2,
        },
    ))
}

fn apply_dropout<T: Scalar>(
    m: &mut Matrix<T>,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut scales = Vec::with_capacity(m.data.len());
    for v in &mut m.data {
        let s = if rng::uniform(rng, 0.0, 1.0) < rate {
            T::zero()
        } else {
            keep
        };
        *v *= s;
        scales.push(s);
    }
    Some(scales)
}

pub fn ffn_backward<T: Scalar>(
    params: &mut FfnParams<T>,
    tape: &FfnTape<T>,
    d_out: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut d = d_out.clone();
    if let Some(s) = &tape.drop2 {
        for (v, sc) in d.data.iter_mut().zip(s) {
            *v *= *sc;
        }
    }
    let mut d_hidden = Matrix::zeros(tape.hidden.rows, tape.hidden.cols);
    params.lin2.backward(&tape.hidden, &d, &mut d_hidden)?;
    if let Some(s) = &tape.drop1 {
        for (v, sc) in d_hidden.data.iter_mut().zip(s) {
            *v *= *sc;
        }
    }
    for (g, pre) in d_hidden.data.iter_mut().zip(&tape.hidden_pre.data) {
        if *pre <= T::zero() {
            *g = T::zero();
        }
    }
    let mut d_x = Matrix::zeros(tape.x.rows, tape.x.cols);
    params.lin1.backward(&tape.x, &d_hidden, &mut d_x)?;
    Ok(d_x)
}

/// All weights of one DeTrans layer.
#[derive(Clone, Debug)]
pub struct DeTransLayerParams<T> {
    pub attn: DmsaParams<T>,
    pub ffn: FfnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
}

impl<T: Scalar> DeTransLayerParams<T> {
    pub fn new(c: usize, heads: usize, levels: usize, points: usize, hidden: usize) -> Result<Self> {
        Ok(DeTransLayerParams {
            attn: DmsaParams::new(c, heads, levels, points)?,
            ffn: FfnParams::zeros(c, hidden),
            ln1: LayerNormParams::identity(c),
            ln2: LayerNormParams::identity(c),
        })
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        self.attn.init(r);
        self.ffn.init(r);
    }

    pub fn zero_grad(&mut self) {
        self.attn.zero_grad();
        self.ffn.zero_grad();
        self.ln1.zero_grad();
        self.ln2.zero_grad();
    }
}

#[derive(Clone, Debug)]
pub struct DeTransLayerTape<T> {
    attn: DmsaTape<T>,
    ln1: Vec<LayerNormTape<T>>,
    ffn: FfnTape<T>,
    ln2: Vec<LayerNormTape<T>>,
}

impl<T> DeTransLayerTape<T> {
    pub fn attn_tape(&self) -> &DmsaTape<T> {
        &self.attn
    }
}

fn layer_norm_rows<T: Scalar>(
    x: &Matrix<T>,
    p: &LayerNormParams<T>,
) -> Result<(Matrix<T>, Vec<LayerNormTape<T>>)> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut tapes = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let (row, tape) = layer_norm(x.row(r), &p.gain.value, &p.bias.value, p.eps)?;
        out.row_mut(r).copy_from_slice(&row);
        tapes.push(tape);
    }
    Ok((out, tapes))
}

fn layer_norm_rows_backward<T: Scalar>(
    tapes: &[LayerNormTape<T>],
    p: &mut LayerNormParams<T>,
    d_out: &Matrix<T>,
    d_x: &mut Matrix<T>,
) {
    for r in 0..d_out.rows {
        layer_norm_backward(
            &tapes[r],
            &p.gain.value,
            d_out.row(r),
            d_x.row_mut(r),
            &mut p.gain.grad,
            &mut p.bias.grad,
        );
    }
}

/// One DeTrans layer: out = LN2(y + FFN(y)), y = LN1(x + MSDMSA(x)).
pub fn detrans_layer_forward<T: Scalar>(
    seq: &TokenSequence<T>,
    refs: &ReferencePoints<T>,
    params: &DeTransLayerParams<T>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(TokenSequence<T>, DeTransLayerTape<T>)> {
    let (attn_out, attn_tape) = msdmsa_forward(seq, refs, &params.attn)?;
    let mut s1 = seq.tokens.clone();
    for (v, a) in s1.data.iter_mut().zip(&attn_out.tokens.data) {
        *v += *a;
    }
    let (y, ln1_tapes) = layer_norm_rows(&s1, &params.ln1)?;
    let (f, ffn_tape) = ffn_forward(&params.ffn, &y, rng)?;
    let mut s2 = y.clone();
    for (v, a) in s2.data.iter_mut().zip(&f.data) {
        *v += *a;
    }
    let (out, ln2_tapes) = layer_norm_rows(&s2, &params.ln2)?;
    Ok((
        TokenSequence {
            tokens: out,
            layout: seq.layout.clone(),
        },
        DeTransLayerTape {
            attn: attn_tape,
            ln1: ln1_tapes,
            ffn: ffn_tape,
            ln2: ln2_tapes,
        },
    ))
}

pub fn detrans_layer_backward<T: Scalar>(
    params: &mut DeTransLayerParams<T>,
    tape: &DeTransLayerTape<T>,
    layout: &crate::seq::LevelLayout,
    d_out: &Matrix<T>,
) -> Result<Matrix<T>> {
    let n = d_out.rows;
    let c = d_out.cols;
    let mut d_s2 = Matrix::zeros(n, c);
    layer_norm_rows_backward(&tape.ln2, &mut params.ln2, d_out, &mut d_s2);
    // s2 = y + ffn(y)
    let d_y_ffn = ffn_backward(&mut params.ffn, &tape.ffn, &d_s2)?;
    let mut d_y = d_s2;
    for (v, a) in d_y.data.iter_mut().zip(&d_y_ffn.data) {
        *v += *a;
    }
    let mut d_s1 = Matrix::zeros(n, c);
    layer_norm_rows_backward(&tape.ln1, &mut params.ln1, &d_y, &mut d_s1);
    // s1 = x + msdmsa(x)
    let d_x_attn = msdmsa_backward(&mut params.attn, &tape.attn, layout, &d_s1)?;
    let mut d_x = d_s1;
    for (v, a) in d_x.data.iter_mut().zip(&d_x_attn.data) {
        *v += *a;
    }
    Ok(d_x)
}

/// The stacked encoder: L_D DeTrans layers sharing one layout and one set
/// of reference points.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub layers: Vec<DeTransLayerParams<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(
        depth: usize,
        c: usize,
        heads: usize,
        levels: usize,
        points: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push(DeTransLayerParams::new(c, heads, levels, points, hidden)?);
        }
        Ok(EncoderParams { layers })
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        for layer in &mut self.layers {
            layer.init(r);
        }
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grad();
        }
    }
}

pub struct EncoderTape<T> {
    pub layers: Vec<DeTransLayerTape<T>>,
    /// Output of every layer, for inspection.
    pub layer_outputs: Vec<Matrix<T>>,
}

/// Sequential application of all layers. Positional encoding is expected to
/// have been added to `seq` already.
pub fn encoder_forward<T: Scalar>(
    seq: &TokenSequence<T>,
    refs: &ReferencePoints<T>,
    params: &EncoderParams<T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(TokenSequence<T>, EncoderTape<T>)> {
    let mut cur = seq.clone();
    let mut tapes = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, tape) = detrans_layer_forward(&cur, refs, layer, rng.as_deref_mut())?;
        outputs.push(next.tokens.clone());
        tapes.push(tape);
        cur = next;
    }
    Ok((
        cur,
        EncoderTape {
            layers: tapes,
            layer_outputs: outputs,
        },
    ))
}

pub fn encoder_backward<T: Scalar>(
    params: &mut EncoderParams<T>,
    tape: &EncoderTape<T>,
    layout: &crate::seq::LevelLayout,
    d_out: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut d = d_out.clone();
    for (layer, ltape) in params.layers.iter_mut().zip(&tape.layers).rev() {
        d = detrans_layer_backward(layer, ltape, layout, &d)?;
    }
    Ok(d)
}
