//! Pointwise, normalization and structural ops.

use crate::error::{MobiusError, Result};
use crate::ops::kernels::{matmul, matmul_acc, matmul_bt, matmul_bt_acc, transpose};
use crate::param::ParamStore;
use crate::tape::{Attrs, InputRef, OpKind, Tape};
use crate::tensor::{Tensor, VideoDims};

use super::GradSink;

// ── linear ───────────────────────────────────────────────────────────

/// Channel projection (a 1x1 convolution). On [B,F,C,H,W] it maps the channel
/// axis per position; on [B,D] it is an ordinary dense layer. Saves input.
pub fn linear(tape: &mut Tape, params: &ParamStore, x: &Tensor, prefix: &str) -> Result<Tensor> {
    let w_name = format!("{prefix}.weight");
    let b_name = format!("{prefix}.bias");
    let weight = params.value(&w_name)?;
    let bias = params.value(&b_name)?;
    let (c_out, c_in) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(MobiusError::ShapeMismatch {
                op: "linear_weight",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };

    tape.note_execution(OpKind::Linear);
    let (out_shape, out) = match x.shape() {
        [b, f, c, h, w] if *c == c_in => {
            let hw = h * w;
            let mut out = vec![0.0; b * f * c_out * hw];
            for bi in 0..*b {
                for fi in 0..*f {
                    let src = &x.data()[(bi * f + fi) * c_in * hw..][..c_in * hw];
                    let dst = &mut out[(bi * f + fi) * c_out * hw..][..c_out * hw];
                    matmul(weight.data(), src, c_out, c_in, hw, dst);
                    for co in 0..c_out {
                        let bv = bias.data()[co];
                        for v in &mut dst[co * hw..(co + 1) * hw] {
                            *v += bv;
                        }
                    }
                }
            }
            (vec![*b, *f, c_out, *h, *w], out)
        }
        [b, d] if *d == c_in => {
            let mut out = vec![0.0; b * c_out];
            matmul_bt(x.data(), weight.data(), *b, c_in, c_out, &mut out);
            for bi in 0..*b {
                for (o, bv) in out[bi * c_out..(bi + 1) * c_out].iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
            (vec![*b, c_out], out)
        }
        _ => {
            return Err(MobiusError::ShapeMismatch {
                op: "linear_channels",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };

    let mut out = Tensor::new(out_shape, out)?;
    out.check_finite("linear output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Linear,
        vec![InputRef::of(x)],
        vec![w_name, b_name],
        vec![x.clone()],
        Attrs::None,
        &mut out,
    );
    Ok(out)
}

pub(super) fn linear_vjp(
    node_inputs: &[InputRef],
    saved: &[Tensor],
    param_names: &[String],
    params: &ParamStore,
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let x = &saved[0];
    let weight = params.value(&param_names[0])?;
    let (c_out, c_in) = (weight.shape()[0], weight.shape()[1]);
    let want_dx = sink.input_active(&node_inputs[0]);
    let want_dw = sink.param_active(&param_names[0]);

    let mut dw_total = vec![0.0; c_out * c_in];
    let mut db_total = vec![0.0; c_out];
    let mut dx = if want_dx {
        vec![0.0; x.numel()]
    } else {
        Vec::new()
    };

    match x.shape() {
        [b, f, _, h, w] => {
            let hw = h * w;
            let mut wt = vec![0.0; weight.numel()];
            if want_dx {
                transpose(weight.data(), c_out, c_in, &mut wt);
            }
            let mut dw_item = vec![0.0; c_out * c_in];
            let mut db_item = vec![0.0; c_out];
            for bi in 0..*b {
                dw_item.fill(0.0);
                db_item.fill(0.0);
                for fi in 0..*f {
                    let dout = &grad_out[(bi * f + fi) * c_out * hw..][..c_out * hw];
                    if want_dw {
                        let src = &x.data()[(bi * f + fi) * c_in * hw..][..c_in * hw];
                        matmul_bt_acc(dout, src, c_out, hw, c_in, &mut dw_item);
                        for co in 0..c_out {
                            let mut acc = 0.0;
                            for &v in &dout[co * hw..(co + 1) * hw] {
                                acc += v;
                            }
                            db_item[co] += acc;
                        }
                    }
                    if want_dx {
                        let dst = &mut dx[(bi * f + fi) * c_in * hw..][..c_in * hw];
                        matmul(&wt, dout, c_in, c_out, hw, dst);
                    }
                }
                if want_dw {
                    for (t, s) in dw_total.iter_mut().zip(&dw_item) {
                        *t += s;
                    }
                    for (t, s) in db_total.iter_mut().zip(&db_item) {
                        *t += s;
                    }
                }
            }
        }
        [b, _] => {
            for bi in 0..*b {
                let dout = &grad_out[bi * c_out..(bi + 1) * c_out];
                if want_dw {
                    let src = &x.data()[bi * c_in..(bi + 1) * c_in];
                    for o in 0..c_out {
                        let g = dout[o];
                        let row = &mut dw_total[o * c_in..(o + 1) * c_in];
                        for (r, s) in row.iter_mut().zip(src) {
                            *r += g * s;
                        }
                        db_total[o] += g;
                    }
                }
                if want_dx {
                    let dst = &mut dx[bi * c_in..(bi + 1) * c_in];
                    matmul_acc(dout, weight.data(), 1, c_out, c_in, dst);
                }
            }
        }
        _ => unreachable!("linear input rank validated at forward"),
    }

    if want_dw {
        sink.add_param_grad(&param_names[0], &[c_out, c_in], dw_total)?;
        sink.add_param_grad(&param_names[1], &[c_out], db_total)?;
    }
    if want_dx {
        sink.add_input_grad(&node_inputs[0], dx);
    }
    Ok(())
}

// ── group_norm ───────────────────────────────────────────────────────

/// Group normalization with per-frame statistics: each (batch, frame, group)
/// normalizes over its channels-in-group x H x W slice, then applies the
/// per-channel affine. Saves input, mean and inverse std.
pub fn group_norm(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
    groups: usize,
) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let d = VideoDims::of(x)?;
    if groups == 0 || d.c % groups != 0 {
        return Err(MobiusError::InvalidConfig(format!(
            "group_norm: {} channels not divisible by {groups} groups",
            d.c
        )));
    }
    let g_name = format!("{prefix}.gamma");
    let b_name = format!("{prefix}.beta");
    let gamma = params.value(&g_name)?;
    let beta = params.value(&b_name)?;
    if gamma.shape() != [d.c] || beta.shape() != [d.c] {
        return Err(MobiusError::ShapeMismatch {
            op: "group_norm_affine",
            lhs: vec![d.c],
            rhs: gamma.shape().to_vec(),
        });
    }

    tape.note_execution(OpKind::GroupNorm);
    let hw = d.h * d.w;
    let span = (d.c / groups) * hw;
    let mut out = vec![0.0; x.numel()];
    let mut means = vec![0.0; d.b * d.f * groups];
    let mut istds = vec![0.0; d.b * d.f * groups];
    for b in 0..d.b {
        for f in 0..d.f {
            let frame = &x.data()[(b * d.f + f) * d.c * hw..][..d.c * hw];
            for g in 0..groups {
                let slice = &frame[g * span..(g + 1) * span];
                let mut sum = 0.0;
                for &v in slice {
                    sum += v;
                }
                let mean = sum / span as f64;
                let mut var = 0.0;
                for &v in slice {
                    let dvi = v - mean;
                    var += dvi * dvi;
                }
                var /= span as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                let si = (b * d.f + f) * groups + g;
                means[si] = mean;
                istds[si] = istd;
                let dst = &mut out[(b * d.f + f) * d.c * hw + g * span..][..span];
                let cg = d.c / groups;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let ga = gamma.data()[ch];
                    let be = beta.data()[ch];
                    for p in 0..hw {
                        dst[ci * hw + p] = ga * (slice[ci * hw + p] - mean) * istd + be;
                    }
                }
            }
        }
    }

    let mean_t = Tensor::new(vec![d.b, d.f, groups], means)?;
    let istd_t = Tensor::new(vec![d.b, d.f, groups], istds)?;
    let mut out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("group_norm output", Some(tape.next_id()))?;
    tape.record(
        OpKind::GroupNorm,
        vec![InputRef::of(x)],
        vec![g_name, b_name],
        vec![x.clone(), mean_t, istd_t],
        Attrs::GroupNorm { groups, eps: EPS },
        &mut out,
    );
    Ok(out)
}

pub(super) fn group_norm_vjp(
    node_inputs: &[InputRef],
    saved: &[Tensor],
    param_names: &[String],
    params: &ParamStore,
    groups: usize,
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let x = &saved[0];
    let means = &saved[1];
    let istds = &saved[2];
    let d = VideoDims::of(x)?;
    let gamma = params.value(&param_names[0])?;
    let hw = d.h * d.w;
    let cg = d.c / groups;
    let span = cg * hw;

    let want_dx = sink.input_active(&node_inputs[0]);
    let want_dp = sink.param_active(&param_names[0]);

    let mut dx = if want_dx {
        vec![0.0; x.numel()]
    } else {
        Vec::new()
    };
    let mut dgamma_item = vec![0.0; d.c];
    let mut dbeta_item = vec![0.0; d.c];
    let mut dgamma_total = vec![0.0; d.c];
    let mut dbeta_total = vec![0.0; d.c];

    for b in 0..d.b {
        dgamma_item.fill(0.0);
        dbeta_item.fill(0.0);
        for f in 0..d.f {
            let frame = &x.data()[(b * d.f + f) * d.c * hw..][..d.c * hw];
            let dframe = &grad_out[(b * d.f + f) * d.c * hw..][..d.c * hw];
            for g in 0..groups {
                let si = (b * d.f + f) * groups + g;
                let mean = means.data()[si];
                let istd = istds.data()[si];
                let xs = &frame[g * span..(g + 1) * span];
                let dys = &dframe[g * span..(g + 1) * span];

                if want_dp {
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let mut dg = 0.0;
                        let mut db = 0.0;
                        for p in 0..hw {
                            let xhat = (xs[ci * hw + p] - mean) * istd;
                            dg += dys[ci * hw + p] * xhat;
                            db += dys[ci * hw + p];
                        }
                        dgamma_item[ch] += dg;
                        dbeta_item[ch] += db;
                    }
                }
                if want_dx {
                    // dx = istd * (dyg - mean(dyg) - xhat * mean(dyg * xhat))
                    let n = span as f64;
                    let mut sum_dyg = 0.0;
                    let mut sum_dyg_xhat = 0.0;
                    for ci in 0..cg {
                        let ga = gamma.data()[g * cg + ci];
                        for p in 0..hw {
                            let dyg = dys[ci * hw + p] * ga;
                            let xhat = (xs[ci * hw + p] - mean) * istd;
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                        }
                    }
                    let m1 = sum_dyg / n;
                    let m2 = sum_dyg_xhat / n;
                    let dxs = &mut dx[(b * d.f + f) * d.c * hw + g * span..][..span];
                    for ci in 0..cg {
                        let ga = gamma.data()[g * cg + ci];
                        for p in 0..hw {
                            let dyg = dys[ci * hw + p] * ga;
                            let xhat = (xs[ci * hw + p] - mean) * istd;
                            dxs[ci * hw + p] += istd * (dyg - m1 - xhat * m2);
                        }
                    }
                }
            }
        }
        if want_dp {
            for (t, s) in dgamma_total.iter_mut().zip(&dgamma_item) {
                *t += s;
            }
            for (t, s) in dbeta_total.iter_mut().zip(&dbeta_item) {
                *t += s;
            }
        }
    }

    if want_dp {
        sink.add_param_grad(&param_names[0], &[d.c], dgamma_total)?;
        sink.add_param_grad(&param_names[1], &[d.c], dbeta_total)?;
    }
    if want_dx {
        sink.add_input_grad(&node_inputs[0], dx);
    }
    Ok(())
}

// ── silu ─────────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// x * sigmoid(x). Saves input.
pub fn silu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    tape.note_execution(OpKind::Silu);
    let out: Vec<f64> = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    let mut out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("silu output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Silu,
        vec![InputRef::of(x)],
        vec![],
        vec![x.clone()],
        Attrs::None,
        &mut out,
    );
    Ok(out)
}

pub(super) fn silu_vjp(
    node_inputs: &[InputRef],
    saved: &[Tensor],
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    if !sink.input_active(&node_inputs[0]) {
        return Ok(());
    }
    let x = &saved[0];
    let dx: Vec<f64> = x
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    sink.add_input_grad(&node_inputs[0], dx);
    Ok(())
}

// ── add ──────────────────────────────────────────────────────────────

/// out = ca*a + cb*b for same-shape operands. Saves nothing.
pub fn add_scaled(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    ca: f64,
    cb: f64,
) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(MobiusError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    tape.note_execution(OpKind::Add);
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    let mut out = Tensor::new(a.shape().to_vec(), out)?;
    out.check_finite("add output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Add,
        vec![InputRef::of(a), InputRef::of(b)],
        vec![],
        vec![],
        Attrs::Add {
            ca,
            cb,
            broadcast: false,
        },
        &mut out,
    );
    Ok(out)
}

/// Plain residual / merge add.
pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_scaled(tape, a, b, 1.0, 1.0)
}

/// out[b,f,c,h,w] = a[b,f,c,h,w] + bias[b,c]; the per-item channel bias used
/// for timestep-embedding injection. Saves nothing.
pub fn add_channel_bias(tape: &mut Tape, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = VideoDims::of(a)?;
    if bias.shape() != [d.b, d.c] {
        return Err(MobiusError::ShapeMismatch {
            op: "add_channel_bias",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    tape.note_execution(OpKind::Add);
    let hw = d.h * d.w;
    let mut out = a.data().to_vec();
    for b in 0..d.b {
        for f in 0..d.f {
            for c in 0..d.c {
                let bv = bias.data()[b * d.c + c];
                for v in &mut out[((b * d.f + f) * d.c + c) * hw..][..hw] {
                    *v += bv;
                }
            }
        }
    }
    let mut out = Tensor::new(a.shape().to_vec(), out)?;
    out.check_finite("add_channel_bias output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Add,
        vec![InputRef::of(a), InputRef::of(bias)],
        vec![],
        vec![],
        Attrs::Add {
            ca: 1.0,
            cb: 1.0,
            broadcast: true,
        },
        &mut out,
    );
    Ok(out)
}

pub(super) fn add_vjp(
    node_inputs: &[InputRef],
    attrs: &Attrs,
    out_shape: &[usize],
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let (ca, cb, broadcast) = match attrs {
        Attrs::Add { ca, cb, broadcast } => (*ca, *cb, *broadcast),
        _ => unreachable!(),
    };
    if sink.input_active(&node_inputs[0]) {
        sink.add_input_grad(&node_inputs[0], grad_out.iter().map(|g| ca * g).collect());
    }
    if sink.input_active(&node_inputs[1]) {
        if broadcast {
            let (b, f, c, h, w) = match *out_shape {
                [b, f, c, h, w] => (b, f, c, h, w),
                _ => unreachable!(),
            };
            let hw = h * w;
            let mut db = vec![0.0; b * c];
            for bi in 0..b {
                for fi in 0..f {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for &g in &grad_out[((bi * f + fi) * c + ci) * hw..][..hw] {
                            acc += g;
                        }
                        db[bi * c + ci] += acc;
                    }
                }
            }
            for v in db.iter_mut() {
                *v *= cb;
            }
            sink.add_input_grad(&node_inputs[1], db);
        } else {
            sink.add_input_grad(&node_inputs[1], grad_out.iter().map(|g| cb * g).collect());
        }
    }
    Ok(())
}

// ── concat ───────────────────────────────────────────────────────────

/// Channel-axis concatenation of two same-resolution video tensors. Saves
/// nothing; shape metadata suffices for the split in backward.
pub fn concat_channels(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let da = VideoDims::of(a)?;
    let db = VideoDims::of(b)?;
    if da.b != db.b || da.f != db.f || da.h != db.h || da.w != db.w {
        return Err(MobiusError::ShapeMismatch {
            op: "concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    tape.note_execution(OpKind::Concat);
    let hw = da.h * da.w;
    let c_out = da.c + db.c;
    let mut out = vec![0.0; da.b * da.f * c_out * hw];
    for bi in 0..da.b {
        for fi in 0..da.f {
            let dst = &mut out[(bi * da.f + fi) * c_out * hw..][..c_out * hw];
            dst[..da.c * hw]
                .copy_from_slice(&a.data()[(bi * da.f + fi) * da.c * hw..][..da.c * hw]);
            dst[da.c * hw..]
                .copy_from_slice(&b.data()[(bi * da.f + fi) * db.c * hw..][..db.c * hw]);
        }
    }
    let mut out = Tensor::new(da.with_channels(c_out).shape(), out)?;
    out.check_finite("concat output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Concat,
        vec![InputRef::of(a), InputRef::of(b)],
        vec![],
        vec![],
        Attrs::Concat {
            lhs_channels: da.c,
        },
        &mut out,
    );
    Ok(out)
}

pub(super) fn concat_vjp(
    node_inputs: &[InputRef],
    attrs: &Attrs,
    out_shape: &[usize],
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let c1 = match attrs {
        Attrs::Concat { lhs_channels } => *lhs_channels,
        _ => unreachable!(),
    };
    let (b, f, c, h, w) = match *out_shape {
        [b, f, c, h, w] => (b, f, c, h, w),
        _ => unreachable!(),
    };
    let hw = h * w;
    let c2 = c - c1;
    for (idx, (lo, clen)) in [(0usize, c1), (c1, c2)].iter().enumerate() {
        if !sink.input_active(&node_inputs[idx]) {
            continue;
        }
        let mut dpart = vec![0.0; b * f * clen * hw];
        for bi in 0..b {
            for fi in 0..f {
                let src = &grad_out[((bi * f + fi) * c + lo) * hw..][..clen * hw];
                dpart[(bi * f + fi) * clen * hw..][..clen * hw].copy_from_slice(src);
            }
        }
        sink.add_input_grad(&node_inputs[idx], dpart);
    }
    Ok(())
}

// ── resample ─────────────────────────────────────────────────────────

/// Parameter-free resampling: 2x2 average-pool down, nearest-neighbor up.
/// Saves nothing.
pub fn resample(tape: &mut Tape, x: &Tensor, up: bool) -> Result<Tensor> {
    let d = VideoDims::of(x)?;
    if !up && (d.h % 2 != 0 || d.w % 2 != 0) {
        return Err(MobiusError::ShapeMismatch {
            op: "resample_down",
            lhs: x.shape().to_vec(),
            rhs: vec![d.h / 2, d.w / 2],
        });
    }
    tape.note_execution(OpKind::Resample);
    let (oh, ow) = if up {
        (d.h * 2, d.w * 2)
    } else {
        (d.h / 2, d.w / 2)
    };
    let planes = d.b * d.f * d.c;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * d.h * d.w..][..d.h * d.w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        if up {
            for y in 0..oh {
                for x0 in 0..ow {
                    dst[y * ow + x0] = src[(y / 2) * d.w + x0 / 2];
                }
            }
        } else {
            for y in 0..oh {
                for x0 in 0..ow {
                    let s = src[2 * y * d.w + 2 * x0]
                        + src[2 * y * d.w + 2 * x0 + 1]
                        + src[(2 * y + 1) * d.w + 2 * x0]
                        + src[(2 * y + 1) * d.w + 2 * x0 + 1];
                    dst[y * ow + x0] = s * 0.25;
                }
            }
        }
    }
    let mut out = Tensor::new(vec![d.b, d.f, d.c, oh, ow], out)?;
    out.check_finite("resample output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Resample,
        vec![InputRef::of(x)],
        vec![],
        vec![],
        Attrs::Resample { up },
        &mut out,
    );
    Ok(out)
}

pub(super) fn resample_vjp(
    node_inputs: &[InputRef],
    attrs: &Attrs,
    out_shape: &[usize],
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    if !sink.input_active(&node_inputs[0]) {
        return Ok(());
    }
    let up = match attrs {
        Attrs::Resample { up } => *up,
        _ => unreachable!(),
    };
    let (b, f, c, oh, ow) = match *out_shape {
        [b, f, c, oh, ow] => (b, f, c, oh, ow),
        _ => unreachable!(),
    };
    let (ih, iw) = if up { (oh / 2, ow / 2) } else { (oh * 2, ow * 2) };
    let planes = b * f * c;
    let mut dx = vec![0.0; planes * ih * iw];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..][..oh * ow];
        let d = &mut dx[p * ih * iw..][..ih * iw];
        if up {
            for y in 0..oh {
                for x0 in 0..ow {
                    d[(y / 2) * iw + x0 / 2] += g[y * ow + x0];
                }
            }
        } else {
            for y in 0..oh {
                for x0 in 0..ow {
                    let q = 0.25 * g[y * ow + x0];
                    d[2 * y * iw + 2 * x0] += q;
                    d[2 * y * iw + 2 * x0 + 1] += q;
                    d[(2 * y + 1) * iw + 2 * x0] += q;
                    d[(2 * y + 1) * iw + 2 * x0 + 1] += q;
                }
            }
        }
    }
    sink.add_input_grad(&node_inputs[0], dx);
    Ok(())
}

// ── embed ────────────────────────────────────────────────────────────

/// Embedding-table lookup: out[b, :] = table[ids[b], :]. Saves nothing.
pub fn embed(
    tape: &mut Tape,
    params: &ParamStore,
    table_name: &str,
    ids: &[usize],
) -> Result<Tensor> {
    let table = params.value(table_name)?;
    let (vocab, dim) = match *table.shape() {
        [v, d] => (v, d),
        _ => {
            return Err(MobiusError::ShapeMismatch {
                op: "embed_table",
                lhs: table.shape().to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    for &id in ids {
        if id >= vocab {
            return Err(MobiusError::InvalidConfig(format!(
                "embedding id {id} out of range (vocab {vocab})"
            )));
        }
    }
    tape.note_execution(OpKind::Embed);
    let mut out = vec![0.0; ids.len() * dim];
    for (b, &id) in ids.iter().enumerate() {
        out[b * dim..(b + 1) * dim].copy_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    let mut out = Tensor::new(vec![ids.len(), dim], out)?;
    out.check_finite("embed output", Some(tape.next_id()))?;
    tape.record(
        OpKind::Embed,
        vec![],
        vec![table_name.to_string()],
        vec![],
        Attrs::Embed { ids: ids.to_vec() },
        &mut out,
    );
    Ok(out)
}

pub(super) fn embed_vjp(
    attrs: &Attrs,
    param_names: &[String],
    params: &ParamStore,
    out_shape: &[usize],
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    if !sink.param_active(&param_names[0]) {
        return Ok(());
    }
    let ids = match attrs {
        Attrs::Embed { ids } => ids,
        _ => unreachable!(),
    };
    let table = params.value(&param_names[0])?;
    let dim = out_shape[1];
    let mut dtable = vec![0.0; table.numel()];
    for (b, &id) in ids.iter().enumerate() {
        let src = &grad_out[b * dim..(b + 1) * dim];
        let dst = &mut dtable[id * dim..(id + 1) * dim];
        for (d, g) in dst.iter_mut().zip(src) {
            *d += g;
        }
    }
    sink.add_param_grad(&param_names[0], table.shape(), dtable)?;
    Ok(())
}

// ── reduce_mean_sq ───────────────────────────────────────────────────

/// Scalar mean of squares over every element. The leading axis is summed
/// item-by-item so batched values reduce in batch-item-major order.
/// Saves input.
pub fn reduce_mean_sq(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    tape.note_execution(OpKind::ReduceMeanSq);
    let items = x.shape()[0];
    let stride = x.numel() / items;
    let mut total = 0.0;
    for b in 0..items {
        let mut part = 0.0;
        for &v in &x.data()[b * stride..(b + 1) * stride] {
            part += v * v;
        }
        total += part;
    }
    let mut out = Tensor::scalar(total / x.numel() as f64);
    out.check_finite("reduce_mean_sq output", Some(tape.next_id()))?;
    tape.record(
        OpKind::ReduceMeanSq,
        vec![InputRef::of(x)],
        vec![],
        vec![x.clone()],
        Attrs::None,
        &mut out,
    );
    Ok(out)
}

pub(super) fn reduce_mean_sq_vjp(
    node_inputs: &[InputRef],
    saved: &[Tensor],
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    if !sink.input_active(&node_inputs[0]) {
        return Ok(());
    }
    let x = &saved[0];
    let g = grad_out[0];
    let scale = 2.0 / x.numel() as f64;
    let dx: Vec<f64> = x.data().iter().map(|&v| scale * v * g).collect();
    sink.add_input_grad(&node_inputs[0], dx);
    Ok(())
}
