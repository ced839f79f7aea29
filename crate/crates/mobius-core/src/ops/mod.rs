//! Differentiable tensor ops: forward execution with tape recording, and the
//! per-op backward rules (vector-Jacobian products).

pub mod attn;
pub mod basic;
pub mod conv;
pub mod kernels;

pub use attn::{attn_spatial, attn_temporal};
pub use basic::{
    add, add_channel_bias, add_scaled, concat_channels, embed, group_norm, linear,
    reduce_mean_sq, resample, silu,
};
pub use conv::{conv_fuse, conv_spatial, conv_temporal};

use std::collections::BTreeMap;

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Attrs, InputRef, NodeSet, OpKind, TapeNode};

/// Where backward rules deposit their gradient contributions.
///
/// Input gradients land in per-node accumulators, but only for inputs inside
/// the required set; gradients toward constants or unrequired nodes are
/// dropped before they are computed. Parameter gradients land keyed by name,
/// and only for non-frozen parameters.
pub(crate) struct GradSink<'a> {
    req: &'a NodeSet,
    params: &'a ParamStore,
    node_grads: &'a mut Vec<Option<Vec<f64>>>,
    param_grads: &'a mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl<'a> GradSink<'a> {
    pub(crate) fn new(
        req: &'a NodeSet,
        params: &'a ParamStore,
        node_grads: &'a mut Vec<Option<Vec<f64>>>,
        param_grads: &'a mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Self {
        GradSink {
            req,
            params,
            node_grads,
            param_grads,
        }
    }

    /// True when a gradient toward this input is needed at all.
    pub(crate) fn input_active(&self, input: &InputRef) -> bool {
        match input {
            InputRef::Node(id) => self.req.contains(*id),
            InputRef::Leaf { .. } => false,
        }
    }

    pub(crate) fn param_active(&self, name: &str) -> bool {
        self.params.is_trainable(name)
    }

    /// Accumulate a gradient contribution toward an input node. Backward
    /// rules must call this at most once per input; accumulation across
    /// consumers happens here.
    pub(crate) fn add_input_grad(&mut self, input: &InputRef, grad: Vec<f64>) {
        let id = match input {
            InputRef::Node(id) if self.req.contains(*id) => *id,
            _ => return,
        };
        match &mut self.node_grads[id] {
            slot @ None => *slot = Some(grad),
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
        }
    }

    pub(crate) fn add_param_grad(
        &mut self,
        name: &str,
        shape: &[usize],
        grad: Vec<f64>,
    ) -> Result<()> {
        debug_assert!(self.param_active(name));
        match self.param_grads.get_mut(name) {
            None => {
                self.param_grads
                    .insert(name.to_string(), (shape.to_vec(), grad));
            }
            Some((_, acc)) => {
                debug_assert_eq!(acc.len(), grad.len());
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
        }
        Ok(())
    }
}

/// Dispatch one node's backward rule.
pub(crate) fn apply_vjp(
    node: &TapeNode,
    params: &ParamStore,
    grad_out: &[f64],
    sink: &mut GradSink,
) -> Result<()> {
    match node.op {
        OpKind::ConvSpatial | OpKind::ConvFuse => {
            let kernel = match node.attrs {
                Attrs::Conv { kernel } => kernel,
                _ => unreachable!(),
            };
            conv::conv2d_vjp(
                &node.inputs,
                &node.saved,
                &node.param_names,
                kernel,
                params,
                grad_out,
                sink,
            )
        }
        OpKind::ConvTemporal => conv::conv_temporal_vjp(
            &node.inputs,
            &node.saved,
            &node.param_names,
            params,
            grad_out,
            sink,
        ),
        OpKind::AttnSpatial | OpKind::AttnTemporal => attn::attn_vjp(
            node.op,
            &node.inputs,
            &node.saved,
            &node.param_names,
            params,
            grad_out,
            sink,
        ),
        OpKind::Linear => basic::linear_vjp(
            &node.inputs,
            &node.saved,
            &node.param_names,
            params,
            grad_out,
            sink,
        ),
        OpKind::GroupNorm => {
            let groups = match node.attrs {
                Attrs::GroupNorm { groups, .. } => groups,
                _ => unreachable!(),
            };
            basic::group_norm_vjp(
                &node.inputs,
                &node.saved,
                &node.param_names,
                params,
                groups,
                grad_out,
                sink,
            )
        }
        OpKind::Silu => basic::silu_vjp(&node.inputs, &node.saved, grad_out, sink),
        OpKind::Add => basic::add_vjp(
            &node.inputs,
            &node.attrs,
            node.output_shape(),
            grad_out,
            sink,
        ),
        OpKind::Concat => basic::concat_vjp(
            &node.inputs,
            &node.attrs,
            node.output_shape(),
            grad_out,
            sink,
        ),
        OpKind::Resample => basic::resample_vjp(
            &node.inputs,
            &node.attrs,
            node.output_shape(),
            grad_out,
            sink,
        ),
        OpKind::Embed => basic::embed_vjp(
            &node.attrs,
            &node.param_names,
            params,
            node.output_shape(),
            grad_out,
            sink,
        ),
        OpKind::ReduceMeanSq => {
            basic::reduce_mean_sq_vjp(&node.inputs, &node.saved, grad_out, sink)
        }
    }
}
