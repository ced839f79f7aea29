//! Single-head scaled dot-product self-attention, spatial and temporal.
//!
//! Spatial attention treats the H*W positions of each (batch, frame) as
//! tokens; temporal attention treats the F frames of each (batch, pixel) as
//! tokens. Both save the input and the post-softmax matrix; q/k/v are cheap
//! linear maps recomputed from the saved input during backward.

use crate::error::Result;
use crate::ops::kernels::{matmul, matmul_acc, matmul_at_acc, matmul_bt, softmax_rows};
use crate::param::ParamStore;
use crate::tape::{Attrs, InputRef, NodeId, OpKind, Tape};
use crate::tensor::{Tensor, VideoDims};

use super::GradSink;

const PROJ: [&str; 4] = ["q_proj", "k_proj", "v_proj", "out_proj"];

fn proj_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::with_capacity(8);
    for p in PROJ {
        names.push(format!("{prefix}.{p}.weight"));
        names.push(format!("{prefix}.{p}.bias"));
    }
    names
}

struct ProjRefs<'a> {
    w: [&'a [f64]; 4],
    b: [&'a [f64]; 4],
    c: usize,
}

fn lookup<'a>(params: &'a ParamStore, names: &[String], c: usize) -> Result<ProjRefs<'a>> {
    let mut w = [&[][..]; 4];
    let mut b = [&[][..]; 4];
    for i in 0..4 {
        let wt = params.value(&names[2 * i])?;
        let bt = params.value(&names[2 * i + 1])?;
        if wt.shape() != [c, c] || bt.shape() != [c] {
            return Err(crate::error::MobiusError::ShapeMismatch {
                op: "attn_projection",
                lhs: vec![c, c],
                rhs: wt.shape().to_vec(),
            });
        }
        w[i] = wt.data();
        b[i] = bt.data();
    }
    Ok(ProjRefs { w, b, c })
}

/// x_tokens [n,c] -> (attn [n,n], y_tokens [n,c])
fn attn_group_forward(
    x: &[f64],
    n: usize,
    p: &ProjRefs,
    attn: &mut [f64],
    y: &mut [f64],
    scratch: &mut AttnScratch,
    node: NodeId,
) -> Result<()> {
    let c = p.c;
    let scale = 1.0 / (c as f64).sqrt();
    project(x, n, p, 0, &mut scratch.q);
    project(x, n, p, 1, &mut scratch.k);
    project(x, n, p, 2, &mut scratch.v);
    matmul_bt(&scratch.q, &scratch.k, n, c, n, attn);
    for v in attn.iter_mut() {
        *v *= scale;
    }
    if !attn.iter().all(|v| v.is_finite()) {
        return Err(crate::error::MobiusError::NonFinite {
            what: "softmax input".into(),
            node: Some(node),
        });
    }
    softmax_rows(attn, n, n);
    matmul(attn, &scratch.v, n, n, c, &mut scratch.y0);
    matmul_bt(&scratch.y0, p.w[3], n, c, c, y);
    for t in 0..n {
        for (o, bias) in y[t * c..(t + 1) * c].iter_mut().zip(p.b[3]) {
            *o += bias;
        }
    }
    Ok(())
}

fn project(x: &[f64], n: usize, p: &ProjRefs, which: usize, out: &mut [f64]) {
    let c = p.c;
    matmul_bt(x, p.w[which], n, c, c, out);
    for t in 0..n {
        for (o, b) in out[t * c..(t + 1) * c].iter_mut().zip(p.b[which]) {
            *o += b;
        }
    }
}

struct AttnScratch {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    y0: Vec<f64>,
}

impl AttnScratch {
    fn new(n: usize, c: usize) -> Self {
        AttnScratch {
            q: vec![0.0; n * c],
            k: vec![0.0; n * c],
            v: vec![0.0; n * c],
            y0: vec![0.0; n * c],
        }
    }
}

/// Per-group backward. `dy` [n,c] in, accumulates `dx` [n,c] and the eight
/// projection-parameter partials (caller owns per-item structure).
#[allow(clippy::too_many_arguments)]
fn attn_group_backward(
    x: &[f64],
    attn: &[f64],
    dy: &[f64],
    n: usize,
    p: &ProjRefs,
    dx: &mut [f64],
    dw: &mut [Vec<f64>; 4],
    db: &mut [Vec<f64>; 4],
    want_dx: bool,
    want_dp: bool,
    s: &mut AttnScratch,
    bs: &mut AttnBwdScratch,
) {
    let c = p.c;
    let scale = 1.0 / (c as f64).sqrt();
    project(x, n, p, 0, &mut s.q);
    project(x, n, p, 1, &mut s.k);
    project(x, n, p, 2, &mut s.v);

    // out projection
    if want_dp {
        matmul(attn, &s.v, n, n, c, &mut s.y0);
        matmul_at_acc(dy, &s.y0, n, c, c, &mut dw[3]);
        for t in 0..n {
            for (acc, g) in db[3].iter_mut().zip(&dy[t * c..(t + 1) * c]) {
                *acc += g;
            }
        }
    }
    matmul(dy, p.w[3], n, c, c, &mut bs.dy0);

    // attention core
    matmul_bt(&bs.dy0, &s.v, n, c, n, &mut bs.da);
    bs.dv.fill(0.0);
    matmul_at_acc(attn, &bs.dy0, n, n, c, &mut bs.dv);
    // softmax rows backward, scale folded in
    for t in 0..n {
        let arow = &attn[t * n..(t + 1) * n];
        let darow = &bs.da[t * n..(t + 1) * n];
        let mut dot = 0.0;
        for (a, g) in arow.iter().zip(darow) {
            dot += a * g;
        }
        let dsrow = &mut bs.ds[t * n..(t + 1) * n];
        for i in 0..n {
            dsrow[i] = arow[i] * (darow[i] - dot) * scale;
        }
    }
    matmul(&bs.ds, &s.k, n, n, c, &mut bs.dq);
    bs.dk.fill(0.0);
    matmul_at_acc(&bs.ds, &s.q, n, n, c, &mut bs.dk);

    // input projections
    if want_dp {
        matmul_at_acc(&bs.dq, x, n, c, c, &mut dw[0]);
        matmul_at_acc(&bs.dk, x, n, c, c, &mut dw[1]);
        matmul_at_acc(&bs.dv, x, n, c, c, &mut dw[2]);
        for t in 0..n {
            for i in 0..c {
                db[0][i] += bs.dq[t * c + i];
                db[1][i] += bs.dk[t * c + i];
                db[2][i] += bs.dv[t * c + i];
            }
        }
    }
    if want_dx {
        matmul_acc(&bs.dq, p.w[0], n, c, c, dx);
        matmul_acc(&bs.dk, p.w[1], n, c, c, dx);
        matmul_acc(&bs.dv, p.w[2], n, c, c, dx);
    }
}

struct AttnBwdScratch {
    dy0: Vec<f64>,
    da: Vec<f64>,
    ds: Vec<f64>,
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
}

impl AttnBwdScratch {
    fn new(n: usize, c: usize) -> Self {
        AttnBwdScratch {
            dy0: vec![0.0; n * c],
            da: vec![0.0; n * n],
            ds: vec![0.0; n * n],
            dq: vec![0.0; n * c],
            dk: vec![0.0; n * c],
            dv: vec![0.0; n * c],
        }
    }
}

// ── Token gathering ──────────────────────────────────────────────────

/// Spatial tokens: group (b, f), token t = y*W + x, features = channels.
fn gather_spatial(data: &[f64], d: VideoDims, b: usize, f: usize, tokens: &mut [f64]) {
    let hw = d.h * d.w;
    let base = (b * d.f + f) * d.c * hw;
    for c in 0..d.c {
        let plane = &data[base + c * hw..base + (c + 1) * hw];
        for t in 0..hw {
            tokens[t * d.c + c] = plane[t];
        }
    }
}

fn scatter_spatial(tokens: &[f64], d: VideoDims, b: usize, f: usize, data: &mut [f64]) {
    let hw = d.h * d.w;
    let base = (b * d.f + f) * d.c * hw;
    for c in 0..d.c {
        let plane = &mut data[base + c * hw..base + (c + 1) * hw];
        for t in 0..hw {
            plane[t] = tokens[t * d.c + c];
        }
    }
}

fn scatter_spatial_acc(tokens: &[f64], d: VideoDims, b: usize, f: usize, data: &mut [f64]) {
    let hw = d.h * d.w;
    let base = (b * d.f + f) * d.c * hw;
    for c in 0..d.c {
        let plane = &mut data[base + c * hw..base + (c + 1) * hw];
        for t in 0..hw {
            plane[t] += tokens[t * d.c + c];
        }
    }
}

/// Temporal tokens: group (b, pixel), token f, features = channels.
fn gather_temporal(data: &[f64], d: VideoDims, b: usize, px: usize, tokens: &mut [f64]) {
    let hw = d.h * d.w;
    for f in 0..d.f {
        let base = (b * d.f + f) * d.c * hw + px;
        for c in 0..d.c {
            tokens[f * d.c + c] = data[base + c * hw];
        }
    }
}

fn scatter_temporal(tokens: &[f64], d: VideoDims, b: usize, px: usize, data: &mut [f64]) {
    let hw = d.h * d.w;
    for f in 0..d.f {
        let base = (b * d.f + f) * d.c * hw + px;
        for c in 0..d.c {
            data[base + c * hw] = tokens[f * d.c + c];
        }
    }
}

fn scatter_temporal_acc(tokens: &[f64], d: VideoDims, b: usize, px: usize, data: &mut [f64]) {
    let hw = d.h * d.w;
    for f in 0..d.f {
        let base = (b * d.f + f) * d.c * hw + px;
        for c in 0..d.c {
            data[base + c * hw] += tokens[f * d.c + c];
        }
    }
}

// ── Ops ──────────────────────────────────────────────────────────────

/// Spatial self-attention. Output excludes the residual (blocks add it).
/// Saves input and the post-softmax matrix [B, F, HW, HW].
pub fn attn_spatial(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
) -> Result<Tensor> {
    let d = VideoDims::of(x)?;
    let names = proj_names(prefix);
    let p = lookup(params, &names, d.c)?;
    tape.note_execution(OpKind::AttnSpatial);

    let n = d.h * d.w;
    let node = tape.next_id();
    let mut a_all = vec![0.0; d.b * d.f * n * n];
    let mut out = vec![0.0; x.numel()];
    let mut tokens = vec![0.0; n * d.c];
    let mut y = vec![0.0; n * d.c];
    let mut scratch = AttnScratch::new(n, d.c);
    for b in 0..d.b {
        for f in 0..d.f {
            gather_spatial(x.data(), d, b, f, &mut tokens);
            let attn = &mut a_all[(b * d.f + f) * n * n..][..n * n];
            attn_group_forward(&tokens, n, &p, attn, &mut y, &mut scratch, node)?;
            scatter_spatial(&y, d, b, f, &mut out);
        }
    }

    let attn_t = Tensor::new(vec![d.b, d.f, n, n], a_all)?;
    let mut out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("attn_spatial output", Some(node))?;
    tape.record(
        OpKind::AttnSpatial,
        vec![InputRef::of(x)],
        names,
        vec![x.clone(), attn_t],
        Attrs::None,
        &mut out,
    );
    Ok(out)
}

/// Temporal self-attention over frames at each pixel. Same contract as
/// `attn_spatial`; its out-projection is the block's zero-initializable
/// projection. Saves input and the post-softmax matrix [B, HW, F, F].
pub fn attn_temporal(
    tape: &mut Tape,
    params: &ParamStore,
    x: &Tensor,
    prefix: &str,
) -> Result<Tensor> {
    let d = VideoDims::of(x)?;
    let names = proj_names(prefix);
    let p = lookup(params, &names, d.c)?;
    tape.note_execution(OpKind::AttnTemporal);

    let n = d.f;
    let hw = d.h * d.w;
    let node = tape.next_id();
    let mut a_all = vec![0.0; d.b * hw * n * n];
    let mut out = vec![0.0; x.numel()];
    let mut tokens = vec![0.0; n * d.c];
    let mut y = vec![0.0; n * d.c];
    let mut scratch = AttnScratch::new(n, d.c);
    for b in 0..d.b {
        for px in 0..hw {
            gather_temporal(x.data(), d, b, px, &mut tokens);
            let attn = &mut a_all[(b * hw + px) * n * n..][..n * n];
            attn_group_forward(&tokens, n, &p, attn, &mut y, &mut scratch, node)?;
            scatter_temporal(&y, d, b, px, &mut out);
        }
    }

    let attn_t = Tensor::new(vec![d.b, hw, n, n], a_all)?;
    let mut out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("attn_temporal output", Some(node))?;
    tape.record(
        OpKind::AttnTemporal,
        vec![InputRef::of(x)],
        names,
        vec![x.clone(), attn_t],
        Attrs::None,
        &mut out,
    );
    Ok(out)
}

pub(super) fn attn_vjp(
    op: OpKind,
    node_inputs: &[InputRef],
    saved: &[Tensor],
    param_names: &[String],
    params: &ParamStore,
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    let x = &saved[0];
    let a_all = &saved[1];
    let d = VideoDims::of(x)?;
    let p = lookup(params, param_names, d.c)?;
    let spatial = op == OpKind::AttnSpatial;
    let n = if spatial { d.h * d.w } else { d.f };
    let groups_per_item = if spatial { d.f } else { d.h * d.w };

    let want_dx = sink.input_active(&node_inputs[0]);
    // the projections are frozen or trainable together
    let want_dp = sink.param_active(&param_names[0]);

    let mut dx = if want_dx {
        vec![0.0; x.numel()]
    } else {
        Vec::new()
    };
    let mut dw_item: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d.c * d.c]);
    let mut db_item: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d.c]);
    let mut dw_total: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d.c * d.c]);
    let mut db_total: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d.c]);

    let mut tokens = vec![0.0; n * d.c];
    let mut dy = vec![0.0; n * d.c];
    let mut dx_tokens = vec![0.0; n * d.c];
    let mut scratch = AttnScratch::new(n, d.c);
    let mut bwd = AttnBwdScratch::new(n, d.c);

    for b in 0..d.b {
        for w in dw_item.iter_mut() {
            w.fill(0.0);
        }
        for bi in db_item.iter_mut() {
            bi.fill(0.0);
        }
        for g in 0..groups_per_item {
            if spatial {
                gather_spatial(x.data(), d, b, g, &mut tokens);
                gather_spatial(grad_out, d, b, g, &mut dy);
            } else {
                gather_temporal(x.data(), d, b, g, &mut tokens);
                gather_temporal(grad_out, d, b, g, &mut dy);
            }
            let attn = &a_all.data()[(b * groups_per_item + g) * n * n..][..n * n];
            dx_tokens.fill(0.0);
            attn_group_backward(
                &tokens,
                attn,
                &dy,
                n,
                &p,
                &mut dx_tokens,
                &mut dw_item,
                &mut db_item,
                want_dx,
                want_dp,
                &mut scratch,
                &mut bwd,
            );
            if want_dx {
                if spatial {
                    scatter_spatial_acc(&dx_tokens, d, b, g, &mut dx);
                } else {
                    scatter_temporal_acc(&dx_tokens, d, b, g, &mut dx);
                }
            }
        }
        if want_dp {
            for i in 0..4 {
                for (t, s) in dw_total[i].iter_mut().zip(&dw_item[i]) {
                    *t += s;
                }
                for (t, s) in db_total[i].iter_mut().zip(&db_item[i]) {
                    *t += s;
                }
            }
        }
    }

    if want_dp {
        for i in (0..4).rev() {
            sink.add_param_grad(
                &param_names[2 * i + 1],
                &[d.c],
                std::mem::take(&mut db_total[i]),
            )?;
            sink.add_param_grad(
                &param_names[2 * i],
                &[d.c, d.c],
                std::mem::take(&mut dw_total[i]),
            )?;
        }
    }
    if want_dx {
        sink.add_input_grad(&node_inputs[0], dx);
    }
    Ok(())
}
