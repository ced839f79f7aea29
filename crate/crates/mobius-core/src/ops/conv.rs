//! Spatial (per-frame 3x3), temporal (per-pixel depthwise 1-D) and fusion
//! convolutions, with their backward rules.
//!
//! Parameter-gradient accumulation is batch-item-major: each item's partial
//! is summed separately and then folded into the total, so a batch-2 backward
//! reproduces bit-for-bit the sum of two batch-1 backwards.

use crate::error::{MobiusError, Result};
use crate::ops::kernels::{col2im_3x3, im2col_3x3, matmul, matmul_acc, matmul_bt_acc, transpose};
use crate::param::ParamStore;
use crate::tape::{Attrs, InputRef, OpKind, Tape};
use crate::tensor::{Tensor, VideoDims};

use super::GradSink;

/// 3x3 spatial convolution over (H, W), stride 1, zero padding 1, applied
/// independently per frame. Saves the input. `prefix` owns `.weight`
/// [C_out, C_in, 3, 3] and `.bias` [C_out].
pub fn conv_spatial(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
) -> Result<Tensor> {
    conv2d_impl(tape, params, x, prefix, OpKind::ConvSpatial, 3)
}

/// The fusion conv: same math as a spatial conv (3x3 or 1x1), but recorded
/// as plumbing because it sits on the trainable path in delta tuning.
pub fn conv_fuse(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
    kernel: usize,
) -> Result<Tensor> {
    if kernel != 1 && kernel != 3 {
        return Err(MobiusError::InvalidConfig(format!(
            "fusion kernel must be 1 or 3, got {kernel}"
        )));
    }
    conv2d_impl(tape, params, x, prefix, OpKind::ConvFuse, kernel)
}

fn conv2d_impl(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
    op: OpKind,
    kernel: usize,
) -> Result<Tensor> {
    let d = VideoDims::of(x)?;
    let w_name = format!("{prefix}.weight");
    let b_name = format!("{prefix}.bias");
    let weight = params.value(&w_name)?;
    let bias = params.value(&b_name)?;
    let (c_out, c_in) = match *weight.shape() {
        [co, ci, kh, kw] if kh == kernel && kw == kernel => (co, ci),
        _ => {
            return Err(MobiusError::ShapeMismatch {
                op: "conv2d_weight",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };
    if c_in != d.c {
        return Err(MobiusError::ShapeMismatch {
            op: "conv2d_channels",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }

    tape.note_execution(op);
    let hw = d.h * d.w;
    let patch = c_in * kernel * kernel;
    let mut out = vec![0.0; d.b * d.f * c_out * hw];
    let mut cols = vec![0.0; patch * hw];
    for b in 0..d.b {
        for f in 0..d.f {
            let plane = &x.data()[(b * d.f + f) * d.c * hw..][..d.c * hw];
            let cols_ref: &[f64] = if kernel == 3 {
                im2col_3x3(plane, d.c, d.h, d.w, &mut cols);
                &cols
            } else {
                plane // 1x1: patches are the input itself
            };
            let dst = &mut out[(b * d.f + f) * c_out * hw..][..c_out * hw];
            matmul(weight.data(), cols_ref, c_out, patch, hw, dst);
            for co in 0..c_out {
                let bv = bias.data()[co];
                for v in &mut dst[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }

    let mut out = Tensor::new(d.with_channels(c_out).shape(), out)?;
    out.check_finite("conv2d output", Some(tape.next_id()))?;
    tape.record(
        op,
        vec![InputRef::of(x)],
        vec![w_name, b_name],
        vec![x.clone()],
        Attrs::Conv { kernel },
        &mut out,
    );
    Ok(out)
}

pub(super) fn conv2d_vjp(
    node_inputs: &[InputRef],
    saved: &[Tensor],
    param_names: &[String],
    kernel: usize,
    params: &ParamStore,
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let x = &saved[0];
    let d = VideoDims::of(x)?;
    let weight = params.value(&param_names[0])?;
    let c_out = weight.shape()[0];
    let hw = d.h * d.w;
    let patch = d.c * kernel * kernel;

    let want_dx = sink.input_active(&node_inputs[0]);
    let want_dw = sink.param_active(&param_names[0]);

    let mut wt = vec![0.0; weight.numel()];
    if want_dx {
        transpose(weight.data(), c_out, patch, &mut wt);
    }
    let mut dx = if want_dx {
        vec![0.0; x.numel()]
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0; patch * hw];
    let mut dcols = vec![0.0; patch * hw];
    let mut dw_item = vec![0.0; weight.numel()];
    let mut db_item = vec![0.0; c_out];
    let mut dw_total = vec![0.0; weight.numel()];
    let mut db_total = vec![0.0; c_out];

    for b in 0..d.b {
        dw_item.fill(0.0);
        db_item.fill(0.0);
        for f in 0..d.f {
            let dout = &grad_out[(b * d.f + f) * c_out * hw..][..c_out * hw];
            let plane = &x.data()[(b * d.f + f) * d.c * hw..][..d.c * hw];
            if want_dw {
                let cols_ref: &[f64] = if kernel == 3 {
                    im2col_3x3(plane, d.c, d.h, d.w, &mut cols);
                    &cols
                } else {
                    plane
                };
                // dW[co, r] += sum_hw dout[co, hw] * cols[r, hw]
                matmul_bt_acc(dout, cols_ref, c_out, hw, patch, &mut dw_item);
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for &v in &dout[co * hw..(co + 1) * hw] {
                        acc += v;
                    }
                    db_item[co] += acc;
                }
            }
            if want_dx {
                let dplane = &mut dx[(b * d.f + f) * d.c * hw..][..d.c * hw];
                if kernel == 3 {
                    matmul(&wt, dout, patch, c_out, hw, &mut dcols);
                    col2im_3x3(&dcols, d.c, d.h, d.w, dplane);
                } else {
                    matmul_acc(&wt, dout, patch, c_out, hw, dplane);
                }
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

    if want_dw {
        sink.add_param_grad(&param_names[0], weight.shape(), dw_total)?;
        sink.add_param_grad(&param_names[1], &[c_out], db_total)?;
    }
    if want_dx {
        sink.add_input_grad(&node_inputs[0], dx);
    }
    Ok(())
}

/// Depthwise temporal convolution: kernel size 3 along the frame axis, stride
/// 1, zero padding 1, applied independently per (channel, pixel) position.
/// `prefix` owns `.weight` [C, 3] and `.bias` [C]. Shape is preserved.
pub fn conv_temporal(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
) -> Result<Tensor> {
    let d = VideoDims::of(x)?;
    if d.f < 1 {
        return Err(MobiusError::ShapeMismatch {
            op: "conv_temporal_frames",
            lhs: x.shape().to_vec(),
            rhs: vec![1],
        });
    }
    let w_name = format!("{prefix}.weight");
    let b_name = format!("{prefix}.bias");
    let weight = params.value(&w_name)?;
    let bias = params.value(&b_name)?;
    if weight.shape() != [d.c, 3] {
        return Err(MobiusError::ShapeMismatch {
            op: "conv_temporal_channels",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }

    tape.note_execution(OpKind::ConvTemporal);
    let hw = d.h * d.w;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for b in 0..d.b {
        for c in 0..d.c {
            let taps = &weight.data()[c * 3..c * 3 + 3];
            let bv = bias.data()[c];
            for f in 0..d.f {
                let dst = &mut out[((b * d.f + f) * d.c + c) * hw..][..hw];
                dst.fill(bv);
                for (j, &tap) in taps.iter().enumerate() {
                    if tap == 0.0 {
                        continue;
                    }
                    let sf = f as isize + j as isize - 1;
                    if sf < 0 || sf >= d.f as isize {
                        continue;
                    }
                    let src = &xd[((b * d.f + sf as usize) * d.c + c) * hw..][..hw];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += tap * s;
                    }
                }
            }
        }
    }

    let mut out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("conv_temporal output", Some(tape.next_id()))?;
    tape.record(
        OpKind::ConvTemporal,
        vec![InputRef::of(x)],
        vec![w_name, b_name],
        vec![x.clone()],
        Attrs::Conv { kernel: 3 },
        &mut out,
    );
    Ok(out)
}

pub(super) fn conv_temporal_vjp(
    node_inputs: &[InputRef],
    saved: &[Tensor],
    param_names: &[String],
    params: &ParamStore,
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let x = &saved[0];
    let d = VideoDims::of(x)?;
    let hw = d.h * d.w;
    let weight = params.value(&param_names[0])?;

    let want_dx = sink.input_active(&node_inputs[0]);
    let want_dw = sink.param_active(&param_names[0]);

    let mut dx = if want_dx {
        vec![0.0; x.numel()]
    } else {
        Vec::new()
    };
    let mut dw_item = vec![0.0; d.c * 3];
    let mut db_item = vec![0.0; d.c];
    let mut dw_total = vec![0.0; d.c * 3];
    let mut db_total = vec![0.0; d.c];

    for b in 0..d.b {
        dw_item.fill(0.0);
        db_item.fill(0.0);
        for c in 0..d.c {
            let taps = &weight.data()[c * 3..c * 3 + 3];
            for f in 0..d.f {
                let dout = &grad_out[((b * d.f + f) * d.c + c) * hw..][..hw];
                if want_dw {
                    let mut acc = 0.0;
                    for &v in dout {
                        acc += v;
                    }
                    db_item[c] += acc;
                }
                for j in 0..3 {
                    let sf = f as isize + j as isize - 1;
                    if sf < 0 || sf >= d.f as isize {
                        continue;
                    }
                    let src_idx = ((b * d.f + sf as usize) * d.c + c) * hw;
                    if want_dw {
                        let src = &x.data()[src_idx..src_idx + hw];
                        let mut acc = 0.0;
                        for (o, s) in dout.iter().zip(src) {
                            acc += o * s;
                        }
                        dw_item[c * 3 + j] += acc;
                    }
                    if want_dx && taps[j] != 0.0 {
                        let dst = &mut dx[src_idx..src_idx + hw];
                        for (o, g) in dst.iter_mut().zip(dout) {
                            *o += taps[j] * g;
                        }
                    }
                }
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

    if want_dw {
        sink.add_param_grad(&param_names[0], &[d.c, 3], dw_total)?;
        sink.add_param_grad(&param_names[1], &[d.c], db_total)?;
    }
    if want_dx {
        sink.add_input_grad(&node_inputs[0], dx);
    }
    Ok(())
}
