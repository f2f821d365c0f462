//! A miniature hybrid CNN/Transformer segmentation network: a small
//! residual CNN encoder producing a multi-scale pyramid, the deformable
//! Transformer encoder in the middle, and an upsampling decoder with skip
//! connections and deep supervision, trained with a joint Dice +
//! cross-entropy loss.

use rand_chacha::ChaCha8Rng;

use crate::conv::{
    instance_norm, instance_norm_backward, relu, relu_backward, Conv3dParams, InstanceNormTape,
    TransposedConv3dParams,
};
use crate::detrans::{encoder_backward, encoder_forward, EncoderParams, EncoderTape};
use crate::error::{Error, Result};
use crate::pe::{add_pe, build_pe, PositionalEncoding};
use crate::rng;
use crate::scalar::Scalar;
use crate::seq::{flatten_levels, reference_points, unflatten_matrix, LevelLayout, ReferencePoints};
use crate::tensor::{Dual, VolumeTensor};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ToyConfig {
    /// Input volume (D, H, W).
    pub dims: [usize; 3],
    /// Stem channel count; stage l widens to base * 2^l.
    pub base: usize,
    /// Common token width C after the 1x1x1 projections.
    pub token_width: usize,
    /// Pyramid depth L.
    pub levels: usize,
    /// Stacked DeTrans layers L_D.
    pub depth: usize,
    pub heads: usize,
    /// Sampling points per head per level, K.
    pub points: usize,
    /// FFN hidden width.
    pub hidden: usize,
    pub classes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Per-scale deep-supervision weights, coarsest first, final
    /// full-resolution scale last; empty means uniform. Normalized to sum 1
    /// (unless all zero except one, which selects that scale alone).
    pub ds_weights: Vec<f64>,
    /// When false, only the deepest level passes through the Transformer
    /// (the single-scale ablation); coarser skips come straight from the CNN.
    pub multi_scale: bool,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.dims[0] % (1 << l) != 0 {
            return Err(Error::config(format!(
                "depth {} not divisible by 2^{}",
                self.dims[0], l
            )));
        }
        for a in 1..3 {
            if self.dims[a] % (1 << (l + 1)) != 0 {
                return Err(Error::config(format!(
                    "axis {} extent {} not divisible by 2^{}",
                    a,
                    self.dims[a],
                    l + 1
                )));
            }
        }
        if self.token_width % 6 != 0 {
            return Err(Error::config("token width must be divisible by 6"));
        }
        if self.heads == 0 || self.token_width % self.heads != 0 {
            return Err(Error::config("token width must be divisible by heads"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if !self.ds_weights.is_empty() && self.ds_weights.len() != self.levels {
            return Err(Error::config(format!(
                "expected {} deep-supervision weights, got {}",
                self.levels,
                self.ds_weights.len()
            )));
        }
        Ok(())
    }

    /// Stage-l dims (D/2^l, H/2^{l+1}, W/2^{l+1}) for l = 1..=L.
    pub fn level_dims(&self) -> Vec<[usize; 3]> {
        (1..=self.levels)
            .map(|l| {
                [
                    self.dims[0] >> l,
                    self.dims[1] >> (l + 1),
                    self.dims[2] >> (l + 1),
                ]
            })
            .collect()
    }

    /// Normalized per-scale loss weights (aux scales coarse-to-fine order is
    /// by level index ascending, final scale last).
    pub fn scale_weights(&self) -> Vec<f64> {
        let n = self.levels;
        let raw: Vec<f64> = if self.ds_weights.is_empty() {
            vec![1.0; n]
        } else {
            self.ds_weights.clone()
        };
        let sum: f64 = raw.iter().sum();
        if sum == 0.0 {
            // degenerate: fall back to final scale only
            let mut w = vec![0.0; n];
            w[n - 1] = 1.0;
            w
        } else {
            raw.iter().map(|w| w / sum).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// building blocks: Conv-IN(-ReLU) and the residual block
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvIn<T> {
    pub conv: Conv3dParams<T>,
    pub gain: Dual<Vec<T>>,
    pub bias: Dual<Vec<T>>,
    pub relu: bool,
}

pub struct ConvInTape<T> {
    x: VolumeTensor<T>,
    in_tape: InstanceNormTape<T>,
    /// IN output, pre-ReLU.
    normed: VolumeTensor<T>,
}

impl<T: Scalar> ConvIn<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        ksize: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        relu: bool,
    ) -> Self {
        ConvIn {
            conv: Conv3dParams::zeros(cout, cin, ksize, stride, pad),
            gain: Dual::new_vec(vec![T::one(); cout]),
            bias: Dual::new_vec(vec![T::zero(); cout]),
            relu,
        }
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        let fan_in = self.conv.cin * self.conv.ksize.iter().product::<usize>();
        self.conv.weight.value = rng::he_normal(r, self.conv.weight.value.len(), fan_in);
    }

    pub fn forward(&self, x: &VolumeTensor<T>) -> Result<(VolumeTensor<T>, ConvInTape<T>)> {
        let pre = self.conv.forward(x)?;
        let (normed, in_tape) = instance_norm(&pre, &self.gain.value, &self.bias.value, T::lit(1e-5))?;
        let out = if self.relu { relu(&normed) } else { normed.clone() };
        Ok((
            out,
            ConvInTape {
                x: x.clone(),
                in_tape,
                normed,
            },
        ))
    }

    /// Returns the gradient w.r.t. the block input; parameter gradients
    /// accumulate in place.
    pub fn backward(&mut self, tape: &ConvInTape<T>, d_out: &VolumeTensor<T>) -> Result<VolumeTensor<T>> {
        let d_normed = if self.relu {
            let mut d = VolumeTensor::zeros(tape.normed.channels, tape.normed.dims);
            relu_backward(&tape.normed, d_out, &mut d);
            d
        } else {
            d_out.clone()
        };
        let mut d_pre = VolumeTensor::zeros(tape.normed.channels, tape.normed.dims);
        instance_norm_backward(
            &tape.in_tape,
            &self.gain.value,
            &d_normed,
            &mut d_pre,
            &mut self.gain.grad,
            &mut self.bias.grad,
        );
        let mut d_x = VolumeTensor::zeros(tape.x.channels, tape.x.dims);
        self.conv.backward(&tape.x, &d_pre, &mut d_x)?;
        Ok(d_x)
    }
}

/// conv-IN-ReLU, conv-IN, skip add, ReLU (dims and width preserved).
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub a: ConvIn<T>,
    pub b: ConvIn<T>,
}

pub struct ResBlockTape<T> {
    ta: ConvInTape<T>,
    tb: ConvInTape<T>,
    /// Pre-ReLU sum (branch + skip).
    sum: VolumeTensor<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(width: usize) -> Self {
        ResBlock {
            a: ConvIn::new(width, width, [3, 3, 3], [1, 1, 1], [1, 1, 1], true),
            b: ConvIn::new(width, width, [3, 3, 3], [1, 1, 1], [1, 1, 1], false),
        }
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        self.a.init(r);
        self.b.init(r);
    }

    pub fn forward(&self, x: &VolumeTensor<T>) -> Result<(VolumeTensor<T>, ResBlockTape<T>)> {
        let (h, ta) = self.a.forward(x)?;
        let (g, tb) = self.b.forward(&h)?;
        let mut sum = g;
        add_into(&mut sum, x)?;
        let out = relu(&sum);
        Ok((out, ResBlockTape { ta, tb, sum }))
    }

    pub fn backward(&mut self, tape: &ResBlockTape<T>, d_out: &VolumeTensor<T>) -> Result<VolumeTensor<T>> {
        let mut d_sum = VolumeTensor::zeros(tape.sum.channels, tape.sum.dims);
        relu_backward(&tape.sum, d_out, &mut d_sum);
        let d_h = self.b.backward(&tape.tb, &d_sum)?;
        let mut d_x = self.a.backward(&tape.ta, &d_h)?;
        add_into(&mut d_x, &d_sum)?; // skip path
        Ok(d_x)
    }
}

fn add_into<T: Scalar>(a: &mut VolumeTensor<T>, b: &VolumeTensor<T>) -> Result<()> {
    if a.channels != b.channels || a.dims != b.dims {
        return Err(Error::dim(format!(
            "add: {}x{:?} vs {}x{:?}",
            a.channels, a.dims, b.channels, b.dims
        )));
    }
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += *y;
    }
    Ok(())
}

/// Nearest-neighbor upsampling by 2 along H and W only.
pub fn upsample_hw<T: Scalar>(x: &VolumeTensor<T>) -> VolumeTensor<T> {
    let [d, h, w] = x.dims;
    let mut out = VolumeTensor::zeros(x.channels, [d, 2 * h, 2 * w]);
    for c in 0..x.channels {
        for dd in 0..d {
            for hh in 0..2 * h {
                for ww in 0..2 * w {
                    *out.at_mut(c, dd, hh, ww) = x.at(c, dd, hh / 2, ww / 2);
                }
            }
        }
    }
    out
}

pub fn upsample_hw_backward<T: Scalar>(d_y: &VolumeTensor<T>, d_x: &mut VolumeTensor<T>) {
    let [d, h2, w2] = d_y.dims;
    for c in 0..d_y.channels {
        for dd in 0..d {
            for hh in 0..h2 {
                for ww in 0..w2 {
                    *d_x.at_mut(c, dd, hh / 2, ww / 2) += d_y.at(c, dd, hh, ww);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// CNN encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CnnParams<T> {
    /// Conv-IN-ReLU stem, stride (1,2,2).
    pub stem: ConvIn<T>,
    /// Per stage: stride-2 downsampling Conv-IN-ReLU, then one residual block.
    pub stages: Vec<(ConvIn<T>, ResBlock<T>)>,
    /// 1x1x1 projections of each stage output to the common token width.
    pub projs: Vec<Conv3dParams<T>>,
}

pub struct CnnTape<T> {
    stem: ConvInTape<T>,
    stages: Vec<(ConvInTape<T>, ResBlockTape<T>)>,
    /// Stage outputs pre-projection.
    feats: Vec<VolumeTensor<T>>,
}

impl<T: Scalar> CnnParams<T> {
    pub fn new(cfg: &ToyConfig) -> Self {
        let b = cfg.base;
        let stem = ConvIn::new(1, b, [3, 3, 3], [1, 2, 2], [1, 1, 1], true);
        let mut stages = Vec::new();
        let mut projs = Vec::new();
        for i in 0..cfg.levels {
            let cin = b << i;
            let cout = b << (i + 1);
            stages.push((
                ConvIn::new(cin, cout, [3, 3, 3], [2, 2, 2], [1, 1, 1], true),
                ResBlock::new(cout),
            ));
            projs.push(Conv3dParams::zeros(
                cfg.token_width,
                cout,
                [1, 1, 1],
                [1, 1, 1],
                [0, 0, 0],
            ));
        }
        CnnParams { stem, stages, projs }
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        self.stem.init(r);
        for (down, res) in &mut self.stages {
            down.init(r);
            res.init(r);
        }
        for p in &mut self.projs {
            p.weight.value = rng::he_normal(r, p.weight.value.len(), p.cin);
        }
    }

    /// Returns the projected per-level features (all at the common width).
    pub fn forward(&self, x: &VolumeTensor<T>) -> Result<(Vec<VolumeTensor<T>>, CnnTape<T>)> {
        let (mut cur, stem_tape) = self.stem.forward(x)?;
        let mut stage_tapes = Vec::new();
        let mut feats = Vec::new();
        for (down, res) in &self.stages {
            let (d, td) = down.forward(&cur)?;
            let (o, tr) = res.forward(&d)?;
            feats.push(o.clone());
            stage_tapes.push((td, tr));
            cur = o;
        }
        let mut levels = Vec::new();
        for (p, f) in self.projs.iter().zip(&feats) {
            levels.push(p.forward(f)?);
        }
        Ok((
            levels,
            CnnTape {
                stem: stem_tape,
                stages: stage_tapes,
                feats,
            },
        ))
    }

    /// d_levels are gradients of the projected features; returns the
    /// gradient w.r.t. the input volume.
    pub fn backward(&mut self, tape: &CnnTape<T>, d_levels: &[VolumeTensor<T>]) -> Result<VolumeTensor<T>> {
        let n = self.stages.len();
        // project back and walk the stage chain deepest-first
        let mut d_feats: Vec<VolumeTensor<T>> = tape
            .feats
            .iter()
            .map(|f| VolumeTensor::zeros(f.channels, f.dims))
            .collect();
        for i in 0..n {
            self.projs[i].backward(&tape.feats[i], &d_levels[i], &mut d_feats[i])?;
        }
        let mut d_cur: Option<VolumeTensor<T>> = None;
        for i in (0..n).rev() {
            let mut d_out = d_feats[i].clone();
            if let Some(d) = d_cur {
                add_into(&mut d_out, &d)?;
            }
            let (down, res) = &mut self.stages[i];
            let (td, tr) = &tape.stages[i];
            let d_mid = res.backward(tr, &d_out)?;
            d_cur = Some(down.backward(td, &d_mid)?);
        }
        self.stem.backward(&tape.stem, &d_cur.expect("levels >= 1"))
    }
}

// ---------------------------------------------------------------------------
// decoder with deep supervision
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DecoderParams<T> {
    /// Stride-2 transposed convs lifting level i+1 up to level i, for
    /// i = L-2 .. 0.
    pub ups: Vec<TransposedConv3dParams<T>>,
    pub refines: Vec<ResBlock<T>>,
    /// 1x1x1 auxiliary logit heads at each intermediate scale.
    pub aux_heads: Vec<Conv3dParams<T>>,
    /// Level 1 -> (D, H/2, W/2).
    pub final_up: TransposedConv3dParams<T>,
    /// (D, H/2, W/2) -> full resolution, undoing the stem's (1,2,2) stride.
    pub final_up_hw: TransposedConv3dParams<T>,
    /// 1x1x1 head at full resolution.
    pub head: Conv3dParams<T>,
}

pub struct DecoderTape<T> {
    /// Inputs to each transposed conv, deepest-first.
    up_ins: Vec<VolumeTensor<T>>,
    refine_tapes: Vec<ResBlockTape<T>>,
    /// Refined feature at each intermediate scale (head inputs), same order.
    refined: Vec<VolumeTensor<T>>,
    final_up_in: VolumeTensor<T>,
    half_res: VolumeTensor<T>,
    full_res: VolumeTensor<T>,
}

/// Per-scale logits: `aux[i]` lives at level-(i+1) dims (coarse scales,
/// index ascending = finer), `final_logits` at the input resolution.
#[derive(Clone, Debug)]
pub struct SegOutput<T> {
    pub aux: Vec<VolumeTensor<T>>,
    pub final_logits: VolumeTensor<T>,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn new(cfg: &ToyConfig) -> Self {
        let c = cfg.token_width;
        let n = cfg.levels - 1;
        DecoderParams {
            ups: (0..n)
                .map(|_| TransposedConv3dParams::zeros(c, c, [2, 2, 2], [2, 2, 2]))
                .collect(),
            refines: (0..n).map(|_| ResBlock::new(c)).collect(),
            aux_heads: (0..n)
                .map(|_| Conv3dParams::zeros(cfg.classes, c, [1, 1, 1], [1, 1, 1], [0, 0, 0]))
                .collect(),
            final_up: TransposedConv3dParams::zeros(c, c, [2, 2, 2], [2, 2, 2]),
            final_up_hw: TransposedConv3dParams::zeros(c, c, [1, 2, 2], [1, 2, 2]),
            head: Conv3dParams::zeros(cfg.classes, c, [1, 1, 1], [1, 1, 1], [0, 0, 0]),
        }
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        for u in &mut self.ups {
            u.weight.value = rng::he_normal(r, u.weight.value.len(), u.cin * 8);
        }
        for rb in &mut self.refines {
            rb.init(r);
        }
        for h in &mut self.aux_heads {
            h.weight.value = rng::he_normal(r, h.weight.value.len(), h.cin);
        }
        self.final_up.weight.value =
            rng::he_normal(r, self.final_up.weight.value.len(), self.final_up.cin * 8);
        self.final_up_hw.weight.value =
            rng::he_normal(r, self.final_up_hw.weight.value.len(), self.final_up_hw.cin * 4);
        self.head.weight.value = rng::he_normal(r, self.head.weight.value.len(), self.head.cin);
    }

    /// `levels` are the (post-Transformer) feature volumes, level index
    /// ascending (finest pyramid scale first, deepest last).
    pub fn forward(&self, levels: &[VolumeTensor<T>]) -> Result<(SegOutput<T>, DecoderTape<T>)> {
        let l = levels.len();
        let mut cur = levels[l - 1].clone();
        let mut up_ins = Vec::new();
        let mut refine_tapes = Vec::new();
        let mut refined = Vec::new();
        let mut aux = vec![None; l - 1];
        for i in (0..l - 1).rev() {
            up_ins.push(cur.clone());
            let mut lifted = self.ups[l - 2 - i].forward(&cur)?;
            add_into(&mut lifted, &levels[i])?;
            let (r, tr) = self.refines[l - 2 - i].forward(&lifted)?;
            aux[i] = Some(self.aux_heads[l - 2 - i].forward(&r)?);
            refined.push(r.clone());
            refine_tapes.push(tr);
            cur = r;
        }
        let final_up_in = cur.clone();
        let half = self.final_up.forward(&cur)?;
        let full = self.final_up_hw.forward(&half)?;
        let final_logits = self.head.forward(&full)?;
        Ok((
            SegOutput {
                aux: aux.into_iter().map(|a| a.unwrap()).collect(),
                final_logits,
            },
            DecoderTape {
                up_ins,
                refine_tapes,
                refined,
                final_up_in,
                half_res: half,
                full_res: full,
            },
        ))
    }

    /// Returns gradients w.r.t. the input levels.
    pub fn backward(
        &mut self,
        tape: &DecoderTape<T>,
        d_aux: &[VolumeTensor<T>],
        d_final: &VolumeTensor<T>,
    ) -> Result<Vec<VolumeTensor<T>>> {
        let l = d_aux.len() + 1;
        let mut d_levels: Vec<VolumeTensor<T>> = Vec::new();
        // head -> in-plane transposed conv -> final transposed conv
        let mut d_full = VolumeTensor::zeros(tape.full_res.channels, tape.full_res.dims);
        self.head.backward(&tape.full_res, d_final, &mut d_full)?;
        let mut d_half = VolumeTensor::zeros(tape.half_res.channels, tape.half_res.dims);
        self.final_up_hw.backward(&tape.half_res, &d_full, &mut d_half)?;
        let mut d_cur = VolumeTensor::zeros(tape.final_up_in.channels, tape.final_up_in.dims);
        self.final_up.backward(&tape.final_up_in, &d_half, &mut d_cur)?;
        // walk stages finest-first (reverse of forward's deepest-first loop)
        for i in 0..l - 1 {
            let j = l - 2 - i; // index into deepest-first tape vectors
            let mut d_refined = d_cur;
            self.aux_heads[j].backward(&tape.refined[j], &d_aux[i], &mut d_refined)?;
            let d_lifted = self.refines[j].backward(&tape.refine_tapes[j], &d_refined)?;
            // lifted = up(cur) + levels[i]
            d_levels.push(d_lifted.clone());
            let mut d_below = VolumeTensor::zeros(tape.up_ins[j].channels, tape.up_ins[j].dims);
            self.ups[j].backward(&tape.up_ins[j], &d_lifted, &mut d_below)?;
            d_cur = d_below;
        }
        d_levels.push(d_cur);
        Ok(d_levels)
    }
}

// ---------------------------------------------------------------------------
// the full network
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ToyParams<T> {
    pub cnn: CnnParams<T>,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

pub struct ToyNet<T> {
    pub cfg: ToyConfig,
    pub params: ToyParams<T>,
    /// Layout of the flattened sequence (all levels, or just the last in
    /// single-scale mode).
    pub layout: LevelLayout,
    pe: PositionalEncoding<T>,
    refs: ReferencePoints<T>,
}

pub struct ToyTape<T> {
    cnn: CnnTape<T>,
    enc: EncoderTape<T>,
    dec: DecoderTape<T>,
}

impl<T> ToyTape<T> {
    pub fn encoder_tape(&self) -> &EncoderTape<T> {
        &self.enc
    }
}

impl<T: Scalar> ToyNet<T> {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let all_dims = cfg.level_dims();
        let flat_dims: Vec<[usize; 3]> = if cfg.multi_scale {
            all_dims
        } else {
            vec![all_dims[cfg.levels - 1]]
        };
        let layout = LevelLayout::new(flat_dims);
        let pe = build_pe(&layout, cfg.token_width)?;
        let refs = reference_points(&layout);
        let enc_levels = layout.dims.len();
        let params = ToyParams {
            cnn: CnnParams::new(&cfg),
            encoder: EncoderParams::new(
                cfg.depth,
                cfg.token_width,
                cfg.heads,
                enc_levels,
                cfg.points,
                cfg.hidden,
            )?,
            decoder: DecoderParams::new(&cfg),
        };
        Ok(ToyNet {
            cfg,
            params,
            layout,
            pe,
            refs,
        })
    }

    pub fn init(&mut self, r: &mut ChaCha8Rng) {
        self.params.cnn.init(r);
        self.params.encoder.init(r);
        self.params.decoder.init(r);
    }

    pub fn forward(&self, x: &VolumeTensor<T>) -> Result<(SegOutput<T>, ToyTape<T>)> {
        let (levels, cnn_tape) = self.params.cnn.forward(x)?;
        let flat_input: Vec<VolumeTensor<T>> = if self.cfg.multi_scale {
            levels.clone()
        } else {
            vec![levels[self.cfg.levels - 1].clone()]
        };
        let seq = flatten_levels(&flat_input)?;
        let seq = add_pe(&seq, &self.pe)?;
        let (enc_out, enc_tape) = encoder_forward(&seq, &self.refs, &self.params.encoder, None)?;
        let trans = unflatten_matrix(&enc_out.tokens, &self.layout)?;
        let dec_levels: Vec<VolumeTensor<T>> = if self.cfg.multi_scale {
            trans
        } else {
            let mut v = levels[..self.cfg.levels - 1].to_vec();
            v.extend(trans);
            v
        };
        let (out, dec_tape) = self.params.decoder.forward(&dec_levels)?;
        Ok((
            out,
            ToyTape {
                cnn: cnn_tape,
                enc: enc_tape,
                dec: dec_tape,
            },
        ))
    }

    /// Backward from per-scale logit gradients to the input volume.
    pub fn backward(
        &mut self,
        tape: &ToyTape<T>,
        d_aux: &[VolumeTensor<T>],
        d_final: &VolumeTensor<T>,
    ) -> Result<VolumeTensor<T>> {
        let d_dec_levels = self.params.decoder.backward(&tape.dec, d_aux, d_final)?;
        let l = self.cfg.levels;
        let enc_grad_levels: Vec<VolumeTensor<T>> = if self.cfg.multi_scale {
            d_dec_levels.clone()
        } else {
            vec![d_dec_levels[l - 1].clone()]
        };
        let d_enc_seq = flatten_levels(&enc_grad_levels)?;
        let d_seq = encoder_backward(
            &mut self.params.encoder,
            &tape.enc,
            &self.layout,
            &d_enc_seq.tokens,
        )?;
        // add_pe is additive: gradient passes through unchanged
        let d_flat = unflatten_matrix(&d_seq, &self.layout)?;
        let d_levels: Vec<VolumeTensor<T>> = if self.cfg.multi_scale {
            d_flat
        } else {
            let mut v = d_dec_levels[..l - 1].to_vec();
            v.extend(d_flat);
            v
        };
        self.params.cnn.backward(&tape.cnn, &d_levels)
    }

    /// Visits every (value, grad) parameter buffer in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<T>, &mut Vec<T>)) {
        visit_params(&mut self.params, f)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| {
            for v in g.iter_mut() {
                *v = T::zero();
            }
        });
    }
}

fn visit_conv_in<T>(prefix: &str, c: &mut ConvIn<T>, f: &mut dyn FnMut(String, &mut Vec<T>, &mut Vec<T>)) {
    f(format!("{prefix}.weight"), &mut c.conv.weight.value, &mut c.conv.weight.grad);
    f(format!("{prefix}.bias"), &mut c.conv.bias.value, &mut c.conv.bias.grad);
    f(format!("{prefix}.in_gain"), &mut c.gain.value, &mut c.gain.grad);
    f(format!("{prefix}.in_bias"), &mut c.bias.value, &mut c.bias.grad);
}

fn visit_res<T>(prefix: &str, r: &mut ResBlock<T>, f: &mut dyn FnMut(String, &mut Vec<T>, &mut Vec<T>)) {
    visit_conv_in(&format!("{prefix}.a"), &mut r.a, f);
    visit_conv_in(&format!("{prefix}.b"), &mut r.b, f);
}

/// Visits every (name, value, grad) parameter buffer in a fixed order.
pub fn visit_params_named<T>(p: &mut ToyParams<T>, f: &mut dyn FnMut(String, &mut Vec<T>, &mut Vec<T>)) {
    visit_conv_in("stem", &mut p.cnn.stem, f);
    for (i, (down, res)) in p.cnn.stages.iter_mut().enumerate() {
        visit_conv_in(&format!("stage{i}.down"), down, f);
        visit_res(&format!("stage{i}.res"), res, f);
    }
    for (i, proj) in p.cnn.projs.iter_mut().enumerate() {
        f(format!("proj{i}.weight"), &mut proj.weight.value, &mut proj.weight.grad);
        f(format!("proj{i}.bias"), &mut proj.bias.value, &mut proj.bias.grad);
    }
    for (i, layer) in p.encoder.layers.iter_mut().enumerate() {
        let pfx = format!("enc{i}");
        f(format!("{pfx}.w_value"), &mut layer.attn.w_value.value.data, &mut layer.attn.w_value.grad.data);
        f(format!("{pfx}.offset.weight"), &mut layer.attn.offset.weight.value.data, &mut layer.attn.offset.weight.grad.data);
        f(format!("{pfx}.offset.bias"), &mut layer.attn.offset.bias.value, &mut layer.attn.offset.bias.grad);
        f(format!("{pfx}.attn.weight"), &mut layer.attn.attn.weight.value.data, &mut layer.attn.attn.weight.grad.data);
        f(format!("{pfx}.attn.bias"), &mut layer.attn.attn.bias.value, &mut layer.attn.attn.bias.grad);
        f(format!("{pfx}.out.weight"), &mut layer.attn.out.weight.value.data, &mut layer.attn.out.weight.grad.data);
        f(format!("{pfx}.out.bias"), &mut layer.attn.out.bias.value, &mut layer.attn.out.bias.grad);
        f(format!("{pfx}.ffn1.weight"), &mut layer.ffn.lin1.weight.value.data, &mut layer.ffn.lin1.weight.grad.data);
        f(format!("{pfx}.ffn1.bias"), &mut layer.ffn.lin1.bias.value, &mut layer.ffn.lin1.bias.grad);
        f(format!("{pfx}.ffn2.weight"), &mut layer.ffn.lin2.weight.value.data, &mut layer.ffn.lin2.weight.grad.data);
        f(format!("{pfx}.ffn2.bias"), &mut layer.ffn.lin2.bias.value, &mut layer.ffn.lin2.bias.grad);
        f(format!("{pfx}.ln1.gain"), &mut layer.ln1.gain.value, &mut layer.ln1.gain.grad);
        f(format!("{pfx}.ln1.bias"), &mut layer.ln1.bias.value, &mut layer.ln1.bias.grad);
        f(format!("{pfx}.ln2.gain"), &mut layer.ln2.gain.value, &mut layer.ln2.gain.grad);
        f(format!("{pfx}.ln2.bias"), &mut layer.ln2.bias.value, &mut layer.ln2.bias.grad);
    }
    for (i, u) in p.decoder.ups.iter_mut().enumerate() {
        f(format!("up{i}.weight"), &mut u.weight.value, &mut u.weight.grad);
        f(format!("up{i}.bias"), &mut u.bias.value, &mut u.bias.grad);
    }
    for (i, r) in p.decoder.refines.iter_mut().enumerate() {
        visit_res(&format!("refine{i}"), r, f);
    }
    for (i, h) in p.decoder.aux_heads.iter_mut().enumerate() {
        f(format!("aux{i}.weight"), &mut h.weight.value, &mut h.weight.grad);
        f(format!("aux{i}.bias"), &mut h.bias.value, &mut h.bias.grad);
    }
    f("final_up.weight".into(), &mut p.decoder.final_up.weight.value, &mut p.decoder.final_up.weight.grad);
    f("final_up.bias".into(), &mut p.decoder.final_up.bias.value, &mut p.decoder.final_up.bias.grad);
    f("final_up_hw.weight".into(), &mut p.decoder.final_up_hw.weight.value, &mut p.decoder.final_up_hw.weight.grad);
    f("final_up_hw.bias".into(), &mut p.decoder.final_up_hw.bias.value, &mut p.decoder.final_up_hw.bias.grad);
    f("head.weight".into(), &mut p.decoder.head.weight.value, &mut p.decoder.head.weight.grad);
    f("head.bias".into(), &mut p.decoder.head.bias.value, &mut p.decoder.head.bias.grad);
}

pub fn visit_params<T>(p: &mut ToyParams<T>, f: &mut dyn FnMut(&mut Vec<T>, &mut Vec<T>)) {
    visit_params_named(p, &mut |_, v, g| f(v, g))
}

// ---------------------------------------------------------------------------
// loss and metric
// ---------------------------------------------------------------------------

/// Joint soft-Dice + cross-entropy loss, averaged over classes:
/// L = (1/c) sum_n { -(2*sum(p*y) + eps)/(sum(p + y) + eps) - mean(y*ln p) }.
/// Perfect one-hot agreement gives exactly -1. Returns the loss and its
/// gradient w.r.t. the logits.
pub fn dice_ce_loss<T: Scalar>(
    logits: &VolumeTensor<T>,
    target: &VolumeTensor<T>,
    eps: T,
) -> Result<(T, VolumeTensor<T>)> {
    let c = logits.channels;
    if target.channels != c || target.dims != logits.dims {
        return Err(Error::dim(format!(
            "loss: logits {}x{:?} vs target {}x{:?}",
            c, logits.dims, target.channels, target.dims
        )));
    }
    let vox = logits.voxel_count();
    // one-hot validation
    for v in 0..vox {
        let mut ones = 0;
        for n in 0..c {
            let t = target.data[n * vox + v];
            if t == T::one() {
                ones += 1;
            } else if t != T::zero() {
                return Err(Error::Input(format!(
                    "target is not one-hot at voxel {v}"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::Input(format!("target is not one-hot at voxel {v}")));
        }
    }

    // per-voxel softmax over channels
    let mut prob = VolumeTensor::zeros(c, logits.dims);
    for v in 0..vox {
        let mut m = logits.data[v];
        for n in 1..c {
            let z = logits.data[n * vox + v];
            if z > m {
                m = z;
            }
        }
        let mut z_sum = T::zero();
        for n in 0..c {
            let e = (logits.data[n * vox + v] - m).exp();
            prob.data[n * vox + v] = e;
            z_sum += e;
        }
        for n in 0..c {
            prob.data[n * vox + v] /= z_sum;
        }
    }

    let inv_c = T::one() / T::lit(c as f64);
    let inv_v = T::one() / T::lit(vox as f64);
    let mut loss = T::zero();
    // dL/dprob, assembled per class then pushed through the softmax
    let mut d_prob = VolumeTensor::zeros(c, logits.dims);
    for n in 0..c {
        let mut inter = T::zero();
        let mut sums = T::zero();
        let mut ce = T::zero();
        for v in 0..vox {
            let p = prob.data[n * vox + v];
            let y = target.data[n * vox + v];
            inter += p * y;
            sums += p + y;
            if y == T::one() {
                ce += p.ln();
            }
        }
        let num = T::lit(2.0) * inter + eps;
        let den = sums + eps;
        loss += inv_c * (-(num / den) - ce * inv_v);
        for v in 0..vox {
            let y = target.data[n * vox + v];
            let p = prob.data[n * vox + v];
            let mut g = -(T::lit(2.0) * y * den - num) / (den * den);
            if y == T::one() {
                g -= inv_v / p;
            }
            d_prob.data[n * vox + v] = inv_c * g;
        }
    }

    // softmax backward per voxel: dz_j = p_j * (g_j - sum_n g_n p_n)
    let mut d_logits = VolumeTensor::zeros(c, logits.dims);
    for v in 0..vox {
        let mut dot = T::zero();
        for n in 0..c {
            dot += d_prob.data[n * vox + v] * prob.data[n * vox + v];
        }
        for n in 0..c {
            let p = prob.data[n * vox + v];
            d_logits.data[n * vox + v] = p * (d_prob.data[n * vox + v] - dot);
        }
    }
    Ok((loss, d_logits))
}

/// Hard-label Dice overlap for one class; 1 when both masks are empty.
pub fn dice_score(pred: &[u8], target: &[u8], class: u8) -> f64 {
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        let pp = *p == class;
        let tt = *t == class;
        if pp {
            p_count += 1;
        }
        if tt {
            t_count += 1;
        }
        if pp && tt {
            inter += 1;
        }
    }
    if p_count + t_count == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p_count + t_count) as f64
    }
}

/// Nearest-neighbor label downsampling (top-left-corner rule).
pub fn downsample_labels(labels: &[u8], dims: [usize; 3], out_dims: [usize; 3]) -> Vec<u8> {
    let f = [
        dims[0] / out_dims[0],
        dims[1] / out_dims[1],
        dims[2] / out_dims[2],
    ];
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for w in 0..out_dims[2] {
                out.push(labels[(d * f[0] * dims[1] + h * f[1]) * dims[2] + w * f[2]]);
            }
        }
    }
    out
}

pub fn one_hot<T: Scalar>(labels: &[u8], dims: [usize; 3], classes: usize) -> VolumeTensor<T> {
    let mut out = VolumeTensor::zeros(classes, dims);
    let vox = labels.len();
    for (v, l) in labels.iter().enumerate() {
        out.data[*l as usize * vox + v] = T::one();
    }
    out
}

pub fn argmax_labels<T: Scalar>(logits: &VolumeTensor<T>) -> Vec<u8> {
    let vox = logits.voxel_count();
    let mut out = Vec::with_capacity(vox);
    for v in 0..vox {
        let mut best = 0usize;
        let mut best_val = logits.data[v];
        for n in 1..logits.channels {
            let z = logits.data[n * vox + v];
            if z > best_val {
                best_val = z;
                best = n;
            }
        }
        out.push(best as u8);
    }
    out
}

// ---------------------------------------------------------------------------
// synthetic task
// ---------------------------------------------------------------------------

pub struct ToyTask<T> {
    pub input: VolumeTensor<T>,
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
}

/// One noisy volume containing a bright axis-aligned ellipsoid (class 1)
/// on a dark background (class 0), fully determined by the seed.
pub fn sphere_task<T: Scalar>(seed: u64, dims: [usize; 3]) -> ToyTask<T> {
    let mut r = rng::seeded(seed ^ 0x5eed_ba11);
    let center: Vec<f64> = dims
        .iter()
        .map(|d| *d as f64 * rng::uniform(&mut r, 0.38, 0.62))
        .collect();
    let radii: Vec<f64> = dims
        .iter()
        .map(|d| *d as f64 * rng::uniform(&mut r, 0.24, 0.34))
        .collect();
    let mut input = VolumeTensor::zeros(1, dims);
    let mut labels = Vec::with_capacity(dims.iter().product());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let q = [(d, 0), (h, 1), (w, 2)]
                    .iter()
                    .map(|(x, a)| {
                        let t = (*x as f64 + 0.5 - center[*a]) / radii[*a];
                        t * t
                    })
                    .sum::<f64>();
                let inside = q <= 1.0;
                labels.push(inside as u8);
                let base = if inside { 1.0 } else { 0.0 };
                let idx = (d * dims[1] + h) * dims[2] + w;
                input.data[idx] = T::lit(base + rng::normal(&mut r, 0.0, 0.05));
            }
        }
    }
    ToyTask {
        input,
        labels,
        dims,
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub dice: f64,
}

pub struct TrainResult<T> {
    pub trace: Vec<TrainRecord>,
    pub net: ToyNet<T>,
    pub prediction: Vec<u8>,
    pub final_dice: f64,
}

struct SgdMomentum<T> {
    lr: T,
    momentum: T,
    vel: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr: T::lit(lr),
            momentum: T::lit(momentum),
            vel: Vec::new(),
        }
    }

    fn step(&mut self, net: &mut ToyNet<T>) {
        let mut idx = 0usize;
        let lr = self.lr;
        let m = self.momentum;
        let vel = &mut self.vel;
        net.visit_params(&mut |value, grad| {
            if vel.len() == idx {
                vel.push(vec![T::zero(); value.len()]);
            }
            let v = &mut vel[idx];
            for i in 0..value.len() {
                v[i] = m * v[i] + grad[i];
                value[i] -= lr * v[i];
            }
            idx += 1;
        });
    }
}

/// Loss over all deep-supervision scales for one example. Returns the total
/// loss plus per-scale logit gradients (already weight-scaled).
pub fn supervised_loss<T: Scalar>(
    out: &SegOutput<T>,
    labels: &[u8],
    cfg: &ToyConfig,
) -> Result<(T, Vec<VolumeTensor<T>>, VolumeTensor<T>)> {
    let weights = cfg.scale_weights();
    let eps = T::lit(1e-5);
    let mut total = T::zero();
    let mut d_aux = Vec::new();
    for (i, aux) in out.aux.iter().enumerate() {
        let w = T::lit(weights[i]);
        let down = downsample_labels(labels, cfg.dims, aux.dims);
        let tgt = one_hot::<T>(&down, aux.dims, cfg.classes);
        let (l, mut g) = dice_ce_loss(aux, &tgt, eps)?;
        total += w * l;
        for v in &mut g.data {
            *v *= w;
        }
        d_aux.push(g);
    }
    let w = T::lit(weights[cfg.levels - 1]);
    let tgt = one_hot::<T>(labels, cfg.dims, cfg.classes);
    let (l, mut g) = dice_ce_loss(&out.final_logits, &tgt, eps)?;
    total += w * l;
    for v in &mut g.data {
        *v *= w;
    }
    Ok((total, d_aux, g))
}

/// Full-batch SGD with momentum on the seeded synthetic task. Deterministic
/// given the config; aborts with a diagnostic if the loss leaves the reals.
pub fn train_toy<T: Scalar>(cfg: &ToyConfig) -> Result<TrainResult<T>> {
    cfg.validate()?;
    let task = sphere_task::<T>(cfg.seed, cfg.dims);
    let mut net = ToyNet::new(cfg.clone())?;
    net.init(&mut rng::seeded(cfg.seed));
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut prediction = Vec::new();
    let mut final_dice = 0.0;
    for iter in 0..cfg.iterations {
        let (out, tape) = net.forward(&task.input)?;
        let (loss, d_aux, d_final) = supervised_loss(&out, &task.labels, cfg)?;
        let loss_f = loss.to_f64();
        if !loss_f.is_finite() {
            return Err(Error::Diverged {
                iter,
                msg: format!("loss became {loss_f}"),
            });
        }
        prediction = argmax_labels(&out.final_logits);
        final_dice = dice_score(&prediction, &task.labels, 1);
        trace.push(TrainRecord {
            iter,
            loss: loss_f,
            dice: final_dice,
        });
        net.zero_grad();
        net.backward(&tape, &d_aux, &d_final)?;
        opt.step(&mut net);
    }
    Ok(TrainResult {
        trace,
        net,
        prediction,
        final_dice,
    })
}

/// The acceptance-scale overfitting configuration.
pub fn overfit_config(seed: u64) -> ToyConfig {
    ToyConfig {
        dims: [16, 48, 48],
        base: 8,
        token_width: 24,
        levels: 2,
        depth: 2,
        heads: 2,
        points: 4,
        hidden: 96,
        classes: 2,
        lr: 0.01,
        momentum: 0.99,
        iterations: 300,
        seed,
        // deep supervision on, but weighted toward the full-resolution loss
        ds_weights: vec![0.25, 0.75],
        multi_scale: true,
    }
}

/// Smaller configuration for the single- vs multi-scale comparison.
pub fn ablation_config(seed: u64, multi_scale: bool) -> ToyConfig {
    ToyConfig {
        dims: [8, 32, 32],
        base: 6,
        token_width: 12,
        levels: 2,
        depth: 1,
        heads: 2,
        points: 4,
        hidden: 48,
        classes: 2,
        lr: 0.01,
        momentum: 0.99,
        iterations: 300,
        seed,
        ds_weights: Vec::new(),
        multi_scale,
    }
}

/// Minimal configuration used by the whole-network gradient check.
pub fn gradcheck_config() -> ToyConfig {
    ToyConfig {
        dims: [4, 16, 16],
        base: 2,
        token_width: 12,
        levels: 2,
        depth: 1,
        heads: 2,
        points: 2,
        hidden: 12,
        classes: 2,
        lr: 0.01,
        momentum: 0.99,
        iterations: 1,
        seed: 0,
        ds_weights: Vec::new(),
        multi_scale: true,
    }
}
