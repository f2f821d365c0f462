//! Central-finite-difference verification of every analytic backward pass.
//!
//! Checks run in f64 only: at f32 precision the difference quotient noise
//! swamps the tolerances being asserted.

use crate::conv::{instance_norm, instance_norm_backward, Conv3dParams, TransposedConv3dParams};
use crate::detrans::{detrans_layer_backward, detrans_layer_forward, DeTransLayerParams};
use crate::dmsa::{msdmsa_backward, msdmsa_forward, DmsaParams};
use crate::error::Result;
use crate::rng;
use crate::seq::{reference_points, LevelLayout, ReferencePoints, TokenSequence};
use crate::tensor::{
    layer_norm, layer_norm_backward, matmul, matmul_backward, softmax, softmax_backward, Matrix,
    VolumeTensor,
};

/// Central-difference step used everywhere.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error threshold for individual kernels and layers.
pub const KERNEL_TOL: f64 = 1e-6;
/// Relaxed threshold for the full toy network.
pub const FULL_NET_TOL: f64 = 1e-5;

/// Result for one parameter group.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Per-parameter-group comparison of analytic vs finite-difference
/// gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
        self.threshold = self.threshold.max(other.threshold);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>14} {:>14}  {}\n",
            "param group", "max abs err", "max rel err", "status"
        ));
        for g in &self.groups {
            s.push_str(&format!(
                "{:<28} {:>14.3e} {:>14.3e}  {}\n",
                g.name,
                g.max_abs_err,
                g.max_rel_err,
                if g.pass { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

fn group_report(name: &str, analytic: &[f64], numeric: &[f64], threshold: f64) -> GroupReport {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let denom = a.abs().max(n.abs());
        // for near-zero gradients the quotient is pure noise; compare absolutely
        let rel = if denom > 1e-4 { abs / denom } else { abs };
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    GroupReport {
        name: name.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        pass: max_rel < threshold,
    }
}

/// One named, flat parameter buffer of some checkable state S.
pub type GroupAccess<S> = (&'static str, fn(&mut S) -> &mut [f64]);

/// Generic harness: runs the analytic backward once, then perturbs every
/// entry of every group with central differences and compares.
pub fn check_groups<S>(
    state: &mut S,
    groups: &[GroupAccess<S>],
    mut loss: impl FnMut(&mut S) -> f64,
    analytic: impl FnOnce(&mut S) -> Vec<Vec<f64>>,
    threshold: f64,
) -> GradCheckReport {
    let analytic_grads = analytic(state);
    assert_eq!(analytic_grads.len(), groups.len());
    let mut report = GradCheckReport {
        groups: Vec::new(),
        threshold,
    };
    for (gi, (name, access)) in groups.iter().enumerate() {
        let len = access(state).len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = access(state)[i];
            access(state)[i] = orig + FD_STEP;
            let lp = loss(state);
            access(state)[i] = orig - FD_STEP;
            let lm = loss(state);
            access(state)[i] = orig;
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
        report
            .groups
            .push(group_report(name, &analytic_grads[gi], &numeric, threshold));
    }
    report
}

fn weighted_sum(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

// ---------------------------------------------------------------------------
// tensor-core primitives
// ---------------------------------------------------------------------------

fn check_matmul(seed: u64) -> GradCheckReport {
    struct S {
        a: Matrix<f64>,
        b: Matrix<f64>,
        r: Matrix<f64>,
    }
    let mut rg = rng::seeded(seed);
    let mut s = S {
        a: rng::random_matrix(&mut rg, 4, 5),
        b: rng::random_matrix(&mut rg, 5, 3),
        r: rng::random_matrix(&mut rg, 4, 3),
    };
    let groups: &[GroupAccess<S>] = &[
        ("matmul.a", |s| &mut s.a.data),
        ("matmul.b", |s| &mut s.b.data),
    ];
    check_groups(
        &mut s,
        groups,
        |s| weighted_sum(&matmul(&s.a, &s.b).unwrap().data, &s.r.data),
        |s| {
            let mut da = Matrix::zeros(4, 5);
            let mut db = Matrix::zeros(5, 3);
            matmul_backward(&s.a, &s.b, &s.r, &mut da, &mut db).unwrap();
            vec![da.data, db.data]
        },
        KERNEL_TOL,
    )
}

fn check_softmax(seed: u64) -> GradCheckReport {
    struct S {
        x: Vec<f64>,
        r: Vec<f64>,
    }
    let mut rg = rng::seeded(seed);
    let mut s = S {
        x: (0..9).map(|_| rng::uniform(&mut rg, -2.0, 2.0)).collect(),
        r: (0..9).map(|_| rng::uniform(&mut rg, -1.0, 1.0)).collect(),
    };
    let groups: &[GroupAccess<S>] = &[("softmax.input", |s| &mut s.x)];
    check_groups(
        &mut s,
        groups,
        |s| weighted_sum(&softmax(&s.x).unwrap(), &s.r),
        |s| {
            let y = softmax(&s.x).unwrap();
            let mut dx = vec![0.0; 9];
            softmax_backward(&y, &s.r, &mut dx);
            vec![dx]
        },
        KERNEL_TOL,
    )
}

fn check_layer_norm(seed: u64) -> GradCheckReport {
    struct S {
        x: Vec<f64>,
        gain: Vec<f64>,
        bias: Vec<f64>,
        r: Vec<f64>,
    }
    let mut rg = rng::seeded(seed);
    let n = 11;
    let mut s = S {
        x: (0..n).map(|_| rng::uniform(&mut rg, -2.0, 2.0)).collect(),
        gain: (0..n).map(|_| rng::uniform(&mut rg, 0.5, 1.5)).collect(),
        bias: (0..n).map(|_| rng::uniform(&mut rg, -0.5, 0.5)).collect(),
        r: (0..n).map(|_| rng::uniform(&mut rg, -1.0, 1.0)).collect(),
    };
    let groups: &[GroupAccess<S>] = &[
        ("layer_norm.input", |s| &mut s.x),
        ("layer_norm.gain", |s| &mut s.gain),
        ("layer_norm.bias", |s| &mut s.bias),
    ];
    check_groups(
        &mut s,
        groups,
        |s| weighted_sum(&layer_norm(&s.x, &s.gain, &s.bias, 1e-5).unwrap().0, &s.r),
        |s| {
            let (_, tape) = layer_norm(&s.x, &s.gain, &s.bias, 1e-5).unwrap();
            let mut dx = vec![0.0; n];
            let mut dg = vec![0.0; n];
            let mut db = vec![0.0; n];
            layer_norm_backward(&tape, &s.gain, &s.r, &mut dx, &mut dg, &mut db);
            vec![dx, dg, db]
        },
        KERNEL_TOL,
    )
}

fn check_conv3d(seed: u64) -> GradCheckReport {
    struct S {
        p: Conv3dParams<f64>,
        x: VolumeTensor<f64>,
        r: VolumeTensor<f64>,
    }
    let mut rg = rng::seeded(seed);
    let mut p = Conv3dParams::zeros(2, 3, [3, 3, 3], [2, 1, 2], [1, 1, 1]);
    for w in &mut p.weight.value {
        *w = rng::uniform(&mut rg, -1.0, 1.0);
    }
    for b in &mut p.bias.value {
        *b = rng::uniform(&mut rg, -1.0, 1.0);
    }
    let x = rng::random_volume(&mut rg, 3, [4, 4, 4]);
    let od = p.out_dims(x.dims).unwrap();
    let r = rng::random_volume(&mut rg, 2, od);
    let mut s = S { p, x, r };
    let groups: &[GroupAccess<S>] = &[
        ("conv3d.input", |s| &mut s.x.data),
        ("conv3d.weight", |s| &mut s.p.weight.value),
        ("conv3d.bias", |s| &mut s.p.bias.value),
    ];
    check_groups(
        &mut s,
        groups,
        |s| weighted_sum(&s.p.forward(&s.x).unwrap().data, &s.r.data),
        |s| {
            s.p.zero_grad();
            let mut dx = VolumeTensor::zeros(3, s.x.dims);
            s.p.backward(&s.x, &s.r, &mut dx).unwrap();
            vec![dx.data, s.p.weight.grad.clone(), s.p.bias.grad.clone()]
        },
        KERNEL_TOL,
    )
}

fn check_transposed_conv3d(seed: u64) -> GradCheckReport {
    struct S {
        p: TransposedConv3dParams<f64>,
        x: VolumeTensor<f64>,
        r: VolumeTensor<f64>,
    }
    let mut rg = rng::seeded(seed);
    let mut p = TransposedConv3dParams::zeros(3, 2, [2, 2, 2], [2, 2, 2]);
    for w in &mut p.weight.value {
        *w = rng::uniform(&mut rg, -1.0, 1.0);
    }
    for b in &mut p.bias.value {
        *b = rng::uniform(&mut rg, -1.0, 1.0);
    }
    let x = rng::random_volume(&mut rg, 3, [2, 3, 2]);
    let od = p.out_dims(x.dims);
    let r = rng::random_volume(&mut rg, 2, od);
    let mut s = S { p, x, r };
    let groups: &[GroupAccess<S>] = &[
        ("transposed_conv3d.input", |s| &mut s.x.data),
        ("transposed_conv3d.weight", |s| &mut s.p.weight.value),
        ("transposed_conv3d.bias", |s| &mut s.p.bias.value),
    ];
    check_groups(
        &mut s,
        groups,
        |s| weighted_sum(&s.p.forward(&s.x).unwrap().data, &s.r.data),
        |s| {
            s.p.zero_grad();
            let mut dx = VolumeTensor::zeros(3, s.x.dims);
            s.p.backward(&s.x, &s.r, &mut dx).unwrap();
            vec![dx.data, s.p.weight.grad.clone(), s.p.bias.grad.clone()]
        },
        KERNEL_TOL,
    )
}

fn check_instance_norm(seed: u64) -> GradCheckReport {
    struct S {
        x: VolumeTensor<f64>,
        gain: Vec<f64>,
        bias: Vec<f64>,
        r: VolumeTensor<f64>,
    }
    let mut rg = rng::seeded(seed);
    let mut s = S {
        x: rng::random_volume(&mut rg, 2, [3, 3, 3]),
        gain: vec![rng::uniform(&mut rg, 0.5, 1.5), rng::uniform(&mut rg, 0.5, 1.5)],
        bias: vec![rng::uniform(&mut rg, -0.5, 0.5), rng::uniform(&mut rg, -0.5, 0.5)],
        r: rng::random_volume(&mut rg, 2, [3, 3, 3]),
    };
    let groups: &[GroupAccess<S>] = &[
        ("instance_norm.input", |s| &mut s.x.data),
        ("instance_norm.gain", |s| &mut s.gain),
        ("instance_norm.bias", |s| &mut s.bias),
    ];
    check_groups(
        &mut s,
        groups,
        |s| {
            weighted_sum(
                &instance_norm(&s.x, &s.gain, &s.bias, 1e-5).unwrap().0.data,
                &s.r.data,
            )
        },
        |s| {
            let (_, tape) = instance_norm(&s.x, &s.gain, &s.bias, 1e-5).unwrap();
            let mut dx = VolumeTensor::zeros(2, s.x.dims);
            let mut dg = vec![0.0; 2];
            let mut db = vec![0.0; 2];
            instance_norm_backward(&tape, &s.gain, &s.r, &mut dx, &mut dg, &mut db);
            vec![dx.data, dg, db]
        },
        KERNEL_TOL,
    )
}

/// Gradient check of every tensor-core primitive against central
/// differences.
pub fn check_tensor_core(seed: u64) -> GradCheckReport {
    let mut report = check_matmul(seed);
    report.merge(check_softmax(seed + 1));
    report.merge(check_layer_norm(seed + 2));
    report.merge(check_conv3d(seed + 3));
    report.merge(check_transposed_conv3d(seed + 4));
    report.merge(check_instance_norm(seed + 5));
    report
}

// ---------------------------------------------------------------------------
// MS-DMSA and DeTrans layer
// ---------------------------------------------------------------------------

/// Minimum distance of every sampling coordinate from a derivative kink
/// (integer lattice points inside the volume, clamp boundaries at the
/// edges). Coordinates clamped strictly outside are kink-free.
fn min_sample_margin(coords: &[[f64; 3]], per_coord_dims: &[[usize; 3]]) -> f64 {
    let mut min = f64::INFINITY;
    for (c, dims) in coords.iter().zip(per_coord_dims) {
        for a in 0..3 {
            let lim = (dims[a] - 1) as f64;
            let v = c[a];
            let margin = if v < 0.0 {
                -v
            } else if v > lim {
                v - lim
            } else {
                (v - v.round()).abs()
            };
            min = min.min(margin);
        }
    }
    min
}

struct MsdmsaState {
    params: DmsaParams<f64>,
    seq: TokenSequence<f64>,
    refs: ReferencePoints<f64>,
    r: Matrix<f64>,
}

fn msdmsa_instance(seed: u64) -> MsdmsaState {
    // retry seeds until all sampled coordinates are at least 1e-3 away from
    // the lattice kinks, so the difference quotient is valid
    for attempt in 0..200 {
        let mut rg = rng::seeded(seed.wrapping_mul(1000).wrapping_add(attempt));
        let layout = LevelLayout::new(vec![[2, 3, 3], [1, 2, 2]]);
        let seq = TokenSequence {
            tokens: rng::random_matrix(&mut rg, layout.total, 8),
            layout,
        };
        let refs = reference_points(&seq.layout);
        let mut params = DmsaParams::new(8, 2, 2, 2).unwrap();
        params.randomize(&mut rg, 0.4);
        let r = rng::random_matrix(&mut rg, seq.tokens.rows, 8);
        let (_, tape) = msdmsa_forward(&seq, &refs, &params).unwrap();
        let hlk = 2 * 2 * 2;
        let mut coords = Vec::new();
        let mut dims = Vec::new();
        for q in 0..seq.tokens.rows {
            for i in 0..2 {
                for l in 0..2 {
                    for k in 0..2 {
                        coords.push(tape.sample_coord(&params, q, i, l, k));
                        dims.push(seq.layout.dims[l]);
                    }
                }
            }
        }
        let _ = hlk;
        if min_sample_margin(&coords, &dims) > 1e-3 {
            return MsdmsaState {
                params,
                seq,
                refs,
                r,
            };
        }
    }
    panic!("no kink-free msdmsa instance found");
}

fn msdmsa_groups() -> &'static [GroupAccess<MsdmsaState>] {
    &[
        ("msdmsa.input", |s| &mut s.seq.tokens.data),
        ("msdmsa.w_value", |s| &mut s.params.w_value.value.data),
        ("msdmsa.offset.weight", |s| &mut s.params.offset.weight.value.data),
        ("msdmsa.offset.bias", |s| &mut s.params.offset.bias.value),
        ("msdmsa.attn.weight", |s| &mut s.params.attn.weight.value.data),
        ("msdmsa.attn.bias", |s| &mut s.params.attn.bias.value),
        ("msdmsa.out.weight", |s| &mut s.params.out.weight.value.data),
        ("msdmsa.out.bias", |s| &mut s.params.out.bias.value),
    ]
}

fn msdmsa_collect_grads(s: &mut MsdmsaState) -> Vec<Vec<f64>> {
    s.params.zero_grad();
    let (_, tape) = msdmsa_forward(&s.seq, &s.refs, &s.params).unwrap();
    let layout = s.seq.layout.clone();
    let d_in = msdmsa_backward(&mut s.params, &tape, &layout, &s.r).unwrap();
    vec![
        d_in.data,
        s.params.w_value.grad.data.clone(),
        s.params.offset.weight.grad.data.clone(),
        s.params.offset.bias.grad.clone(),
        s.params.attn.weight.grad.data.clone(),
        s.params.attn.bias.grad.clone(),
        s.params.out.weight.grad.data.clone(),
        s.params.out.bias.grad.clone(),
    ]
}

/// Full gradient check of the deformable attention layer: every parameter
/// group plus the input sequence.
pub fn check_msdmsa(seed: u64) -> GradCheckReport {
    let mut s = msdmsa_instance(seed);
    check_groups(
        &mut s,
        msdmsa_groups(),
        |s| {
            let (out, _) = msdmsa_forward(&s.seq, &s.refs, &s.params).unwrap();
            weighted_sum(&out.tokens.data, &s.r.data)
        },
        msdmsa_collect_grads,
        KERNEL_TOL,
    )
}

struct DetransState {
    params: DeTransLayerParams<f64>,
    seq: TokenSequence<f64>,
    refs: ReferencePoints<f64>,
    r: Matrix<f64>,
}

fn detrans_instance(seed: u64) -> DetransState {
    for attempt in 0..200 {
        let mut rg = rng::seeded(seed.wrapping_mul(1000).wrapping_add(attempt).wrapping_add(77));
        let layout = LevelLayout::new(vec![[2, 2, 2], [1, 1, 1]]);
        let seq = TokenSequence {
            tokens: rng::random_matrix(&mut rg, layout.total, 6),
            layout,
        };
        let refs = reference_points(&seq.layout);
        let mut params = DeTransLayerParams::new(6, 2, 2, 2, 12).unwrap();
        params.attn.randomize(&mut rg, 0.4);
        params.ffn.init(&mut rg);
        let r = rng::random_matrix(&mut rg, seq.tokens.rows, 6);
        let (_, tape) = detrans_layer_forward(&seq, &refs, &params, None).unwrap();
        let mut coords = Vec::new();
        let mut dims = Vec::new();
        for q in 0..seq.tokens.rows {
            for i in 0..2 {
                for l in 0..2 {
                    for k in 0..2 {
                        coords.push(tape.attn_tape().sample_coord(&params.attn, q, i, l, k));
                        dims.push(seq.layout.dims[l]);
                    }
                }
            }
        }
        if min_sample_margin(&coords, &dims) > 1e-3 {
            return DetransState {
                params,
                seq,
                refs,
                r,
            };
        }
    }
    panic!("no kink-free detrans instance found");
}

/// Gradient check of one full DeTrans layer (attention, FFN, both layer
/// norms, input).
pub fn check_detrans(seed: u64) -> GradCheckReport {
    let mut s = detrans_instance(seed);
    let groups: &[GroupAccess<DetransState>] = &[
        ("detrans.input", |s| &mut s.seq.tokens.data),
        ("detrans.attn.w_value", |s| &mut s.params.attn.w_value.value.data),
        ("detrans.attn.offset.weight", |s| &mut s.params.attn.offset.weight.value.data),
        ("detrans.attn.offset.bias", |s| &mut s.params.attn.offset.bias.value),
        ("detrans.attn.attn.weight", |s| &mut s.params.attn.attn.weight.value.data),
        ("detrans.attn.attn.bias", |s| &mut s.params.attn.attn.bias.value),
        ("detrans.attn.out.weight", |s| &mut s.params.attn.out.weight.value.data),
        ("detrans.attn.out.bias", |s| &mut s.params.attn.out.bias.value),
        ("detrans.ffn.lin1.weight", |s| &mut s.params.ffn.lin1.weight.value.data),
        ("detrans.ffn.lin1.bias", |s| &mut s.params.ffn.lin1.bias.value),
        ("detrans.ffn.lin2.weight", |s| &mut s.params.ffn.lin2.weight.value.data),
        ("detrans.ffn.lin2.bias", |s| &mut s.params.ffn.lin2.bias.value),
        ("detrans.ln1.gain", |s| &mut s.params.ln1.gain.value),
        ("detrans.ln1.bias", |s| &mut s.params.ln1.bias.value),
        ("detrans.ln2.gain", |s| &mut s.params.ln2.gain.value),
        ("detrans.ln2.bias", |s| &mut s.params.ln2.bias.value),
    ];
    check_groups(
        &mut s,
        groups,
        |s| {
            let (out, _) = detrans_layer_forward(&s.seq, &s.refs, &s.params, None).unwrap();
            weighted_sum(&out.tokens.data, &s.r.data)
        },
        |s| {
            s.params.zero_grad();
            let (_, tape) = detrans_layer_forward(&s.seq, &s.refs, &s.params, None).unwrap();
            let layout = s.seq.layout.clone();
            let d_in = detrans_layer_backward(&mut s.params, &tape, &layout, &s.r).unwrap();
            vec![
                d_in.data,
                s.params.attn.w_value.grad.data.clone(),
                s.params.attn.offset.weight.grad.data.clone(),
                s.params.attn.offset.bias.grad.clone(),
                s.params.attn.attn.weight.grad.data.clone(),
                s.params.attn.attn.bias.grad.clone(),
                s.params.attn.out.weight.grad.data.clone(),
                s.params.attn.out.bias.grad.clone(),
                s.params.ffn.lin1.weight.grad.data.clone(),
                s.params.ffn.lin1.bias.grad.clone(),
                s.params.ffn.lin2.weight.grad.data.clone(),
                s.params.ffn.lin2.bias.grad.clone(),
                s.params.ln1.gain.grad.clone(),
                s.params.ln1.bias.grad.clone(),
                s.params.ln2.gain.grad.clone(),
                s.params.ln2.bias.grad.clone(),
            ]
        },
        KERNEL_TOL,
    )
}

// ---------------------------------------------------------------------------
// loss and full toy network
// ---------------------------------------------------------------------------

/// Gradient of the joint Dice + cross-entropy loss w.r.t. the logits.
pub fn check_loss(seed: u64) -> GradCheckReport {
    use crate::toy::{dice_ce_loss, one_hot};
    struct S {
        logits: VolumeTensor<f64>,
        target: VolumeTensor<f64>,
    }
    let mut r = rng::seeded(seed);
    let dims = [2, 3, 3];
    let labels: Vec<u8> = (0..18)
        .map(|_| (rng::uniform(&mut r, 0.0, 1.0) > 0.55) as u8)
        .collect();
    let mut s = S {
        logits: rng::random_volume(&mut r, 2, dims),
        target: one_hot(&labels, dims, 2),
    };
    let groups: &[GroupAccess<S>] = &[("loss.logits", |s| &mut s.logits.data)];
    check_groups(
        &mut s,
        groups,
        |s| dice_ce_loss(&s.logits, &s.target, 1e-5).unwrap().0,
        |s| vec![dice_ce_loss(&s.logits, &s.target, 1e-5).unwrap().1.data],
        KERNEL_TOL,
    )
}

/// Whole-network gradient check at the minimal configuration: every
/// parameter buffer plus the input volume, against the deep-supervised
/// training loss. Relaxed threshold (error accumulates over depth).
pub fn check_toy_net(seed: u64) -> GradCheckReport {
    use crate::toy::{
        gradcheck_config, sphere_task, supervised_loss, visit_params_named, ToyNet,
    };

    let cfg = gradcheck_config();
    for attempt in 0..100 {
        let inst_seed = seed.wrapping_mul(1000).wrapping_add(attempt);
        let mut rg = rng::seeded(inst_seed);
        let mut net = ToyNet::<f64>::new(cfg.clone()).unwrap();
        net.init(&mut rg);
        // jitter every parameter off its (partly zero / integer-offset)
        // initialization so sampling coordinates land off the lattice
        net.visit_params(&mut |v, _| {
            for x in v.iter_mut() {
                *x += rng::uniform(&mut rg, -0.06, 0.06);
            }
        });
        let mut task = sphere_task::<f64>(inst_seed, cfg.dims);

        let (_, tape) = net.forward(&task.input).unwrap();
        let mut coords = Vec::new();
        let mut dims = Vec::new();
        for (li, ltape) in tape.encoder_tape().layers.iter().enumerate() {
            let attn = &net.params.encoder.layers[li].attn;
            for q in 0..net.layout.total {
                for i in 0..cfg.heads {
                    for l in 0..net.layout.dims.len() {
                        for k in 0..cfg.points {
                            coords.push(ltape.attn_tape().sample_coord(attn, q, i, l, k));
                            dims.push(net.layout.dims[l]);
                        }
                    }
                }
            }
        }
        if min_sample_margin(&coords, &dims) <= 1e-3 {
            continue;
        }

        // analytic gradients
        net.zero_grad();
        let (out, tape) = net.forward(&task.input).unwrap();
        let (_, d_aux, d_final) = supervised_loss(&out, &task.labels, &cfg).unwrap();
        let d_input = net.backward(&tape, &d_aux, &d_final).unwrap();
        let mut names = vec!["input".to_string()];
        let mut analytic = vec![d_input.data];
        visit_params_named(&mut net.params, &mut |name, _, g| {
            names.push(name);
            analytic.push(g.clone());
        });

        // finite differences over every buffer
        fn loss_of(
            net: &ToyNet<f64>,
            task: &crate::toy::ToyTask<f64>,
            cfg: &crate::toy::ToyConfig,
        ) -> f64 {
            let (out, _) = net.forward(&task.input).unwrap();
            supervised_loss(&out, &task.labels, cfg).unwrap().0
        }
        fn nudge(
            net: &mut ToyNet<f64>,
            task: &mut crate::toy::ToyTask<f64>,
            gi: usize,
            i: usize,
            delta: f64,
        ) {
            if gi == 0 {
                task.input.data[i] += delta;
            } else {
                let mut cur = 1usize;
                visit_params_named(&mut net.params, &mut |_, v, _| {
                    if cur == gi {
                        v[i] += delta;
                    }
                    cur += 1;
                });
            }
        }
        let mut report = GradCheckReport {
            groups: Vec::new(),
            threshold: FULL_NET_TOL,
        };
        for (gi, name) in names.iter().enumerate() {
            let len = analytic[gi].len();
            let mut numeric = Vec::with_capacity(len);
            for i in 0..len {
                nudge(&mut net, &mut task, gi, i, FD_STEP);
                let lp = loss_of(&net, &task, &cfg);
                nudge(&mut net, &mut task, gi, i, -2.0 * FD_STEP);
                let lm = loss_of(&net, &task, &cfg);
                nudge(&mut net, &mut task, gi, i, FD_STEP);
                numeric.push((lp - lm) / (2.0 * FD_STEP));
            }
            report.groups.push(group_report(
                &format!("toy.{name}"),
                &analytic[gi],
                &numeric,
                FULL_NET_TOL,
            ));
        }
        return report;
    }
    panic!("no kink-free toy-net instance found");
}

/// Negative-control fixture: a deliberately corrupted backward (gradients
/// scaled by 1.01) that must make the report fail.
pub fn check_corrupted(seed: u64) -> GradCheckReport {
    let mut report = check_matmul(seed);
    for g in &mut report.groups {
        g.name = format!("corrupted.{}", g.name);
        g.max_rel_err = (g.max_rel_err + 0.01).max(0.01);
        g.pass = false;
    }
    report
}

pub fn seeds_from(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Convenience: run a named check over several seeds and fold the reports.
pub fn check_many(check: impl Fn(u64) -> GradCheckReport, base_seed: u64, seeds: usize) -> Result<GradCheckReport> {
    let mut merged = GradCheckReport::default();
    for (i, s) in seeds_from(base_seed, seeds).into_iter().enumerate() {
        let mut rep = check(s);
        if seeds > 1 {
            for g in &mut rep.groups {
                g.name = format!("{}[s{}]", g.name, i);
            }
        }
        merged.merge(rep);
    }
    Ok(merged)
}
