//! The recorded computation graph.
//!
//! A tape is rebuilt per training step. Nodes are appended in execution order,
//! so `input` edges always point at strictly earlier nodes and the node list
//! is a topological order by construction.

use std::collections::HashSet;

use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation vocabulary. The fusion conv gets its own kind because it must
/// record as plumbing even though it is a spatial 3x3 convolution: it sits on
/// the trainable path in delta tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    ConvSpatial,
    ConvTemporal,
    AttnSpatial,
    AttnTemporal,
    Linear,
    GroupNorm,
    Silu,
    Add,
    Concat,
    Resample,
    Embed,
    ReduceMeanSq,
    ConvFuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerTag {
    Spatial,
    Temporal,
    Plumbing,
}

impl OpKind {
    /// spatial iff {ConvSpatial, AttnSpatial}; temporal iff {ConvTemporal,
    /// AttnTemporal}; plumbing otherwise.
    pub fn layer_tag(self) -> LayerTag {
        match self {
            OpKind::ConvSpatial | OpKind::AttnSpatial => LayerTag::Spatial,
            OpKind::ConvTemporal | OpKind::AttnTemporal => LayerTag::Temporal,
            _ => LayerTag::Plumbing,
        }
    }

    /// Attention ops count toward the alpha column of the cost model.
    pub fn is_attention(self) -> bool {
        matches!(self, OpKind::AttnSpatial | OpKind::AttnTemporal)
    }

    /// Convolution ops count toward the beta column of the cost model.
    pub fn is_convolution(self) -> bool {
        matches!(
            self,
            OpKind::ConvSpatial | OpKind::ConvTemporal | OpKind::ConvFuse
        )
    }
}

/// An op input: either an earlier node on the tape or a constant leaf whose
/// shape is kept for backward shape bookkeeping (concat splits, add sides).
#[derive(Clone, Debug)]
pub enum InputRef {
    Node(NodeId),
    Leaf { shape: Vec<usize> },
}

impl InputRef {
    pub fn of(t: &Tensor) -> InputRef {
        match t.node() {
            Some(id) => InputRef::Node(id),
            None => InputRef::Leaf {
                shape: t.shape().to_vec(),
            },
        }
    }

    pub fn node_id(&self) -> Option<NodeId> {
        match self {
            InputRef::Node(id) => Some(*id),
            InputRef::Leaf { .. } => None,
        }
    }
}

/// Immutable per-op attributes consumed by the backward rules.
#[derive(Clone, Debug)]
pub enum Attrs {
    None,
    /// out = ca * a + cb * b; when `broadcast`, b is [B, C] broadcast over
    /// frames and pixels of a [B, F, C, H, W] tensor.
    Add { ca: f64, cb: f64, broadcast: bool },
    /// Channel-axis concatenation of two same-resolution video tensors.
    Concat { lhs_channels: usize },
    Resample { up: bool },
    Embed { ids: Vec<usize> },
    GroupNorm { groups: usize, eps: f64 },
    /// Square conv kernel size (3 for the spatial stacks, 3 or 1 for fusion).
    Conv { kernel: usize },
}

pub struct TapeNode {
    pub id: NodeId,
    pub op: OpKind,
    pub inputs: Vec<InputRef>,
    /// Names of the parameters this op consumed, in the op's fixed order.
    pub param_names: Vec<String>,
    /// Tensors retained for backward, per the saved-tensor contract.
    pub saved: Vec<Tensor>,
    /// The op's output; kept so accounting can count live activations.
    pub output: Tensor,
    pub layer_tag: LayerTag,
    pub attrs: Attrs,
}

impl TapeNode {
    pub fn output_shape(&self) -> &[usize] {
        self.output.shape()
    }

    pub fn input_node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.inputs.iter().filter_map(|i| i.node_id())
    }
}

/// Counts of op executions, tracked independently of recording so the cost
/// model sees forward work even for segments run under no-grad.
#[derive(Clone, Debug, Default)]
pub struct ExecCounts {
    pub attn_spatial: usize,
    pub attn_temporal: usize,
    pub conv_spatial: usize,
    pub conv_temporal: usize,
    pub conv_fuse: usize,
    pub other: usize,
}

impl ExecCounts {
    fn bump(&mut self, op: OpKind) {
        match op {
            OpKind::AttnSpatial => self.attn_spatial += 1,
            OpKind::AttnTemporal => self.attn_temporal += 1,
            OpKind::ConvSpatial => self.conv_spatial += 1,
            OpKind::ConvTemporal => self.conv_temporal += 1,
            OpKind::ConvFuse => self.conv_fuse += 1,
            _ => self.other += 1,
        }
    }

    pub fn alpha(&self) -> usize {
        self.attn_spatial + self.attn_temporal
    }

    pub fn beta(&self) -> usize {
        self.conv_spatial + self.conv_temporal + self.conv_fuse
    }
}

pub struct Tape {
    pub nodes: Vec<TapeNode>,
    recording: bool,
    exec: ExecCounts,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            exec: ExecCounts::default(),
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    /// Flip recording; returns the previous state so callers can restore it.
    pub fn set_recording(&mut self, on: bool) -> bool {
        std::mem::replace(&mut self.recording, on)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id]
    }

    /// Id the next recorded node will get; used to attribute errors raised
    /// at op boundaries before the node exists.
    pub fn next_id(&self) -> NodeId {
        self.nodes.len()
    }

    pub fn exec_counts(&self) -> &ExecCounts {
        &self.exec
    }

    pub(crate) fn note_execution(&mut self, op: OpKind) {
        self.exec.bump(op);
    }

    /// Append a node for an executed op and stamp its output with the new id.
    /// No-op (besides execution counting) when recording is off.
    pub(crate) fn record(
        &mut self,
        op: OpKind,
        inputs: Vec<InputRef>,
        param_names: Vec<String>,
        saved: Vec<Tensor>,
        attrs: Attrs,
        output: &mut Tensor,
    ) {
        if !self.recording {
            output.set_node(None);
            return;
        }
        let id = self.nodes.len();
        debug_assert!(inputs.iter().filter_map(|i| i.node_id()).all(|i| i < id));
        output.set_node(Some(id));
        self.nodes.push(TapeNode {
            id,
            op,
            inputs,
            param_names,
            saved,
            output: output.clone(),
            layer_tag: op.layer_tag(),
            attrs,
        });
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// A set of tape node ids (the unit of backward-requirement analysis).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeSet {
    ids: HashSet<NodeId>,
}

impl NodeSet {
    pub fn new() -> Self {
        NodeSet::default()
    }

    pub fn insert(&mut self, id: NodeId) {
        self.ids.insert(id);
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids.iter().copied()
    }

    /// Ids in ascending (topological) order.
    pub fn sorted(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.ids.iter().copied().collect();
        v.sort_unstable();
        v
    }
}

impl FromIterator<NodeId> for NodeSet {
    fn from_iter<T: IntoIterator<Item = NodeId>>(iter: T) -> Self {
        NodeSet {
            ids: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_tag_follows_op_kind() {
        assert_eq!(OpKind::ConvSpatial.layer_tag(), LayerTag::Spatial);
        assert_eq!(OpKind::AttnSpatial.layer_tag(), LayerTag::Spatial);
        assert_eq!(OpKind::ConvTemporal.layer_tag(), LayerTag::Temporal);
        assert_eq!(OpKind::AttnTemporal.layer_tag(), LayerTag::Temporal);
        for op in [
            OpKind::Linear,
            OpKind::GroupNorm,
            OpKind::Silu,
            OpKind::Add,
            OpKind::Concat,
            OpKind::Resample,
            OpKind::Embed,
            OpKind::ReduceMeanSq,
            OpKind::ConvFuse,
        ] {
            assert_eq!(op.layer_tag(), LayerTag::Plumbing);
        }
    }

    #[test]
    fn recording_off_appends_nothing() {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let mut out = Tensor::zeros(&[2]);
        tape.record(
            OpKind::Silu,
            vec![],
            vec![],
            vec![],
            Attrs::None,
            &mut out,
        );
        assert_eq!(tape.len(), 0);
        assert!(out.node().is_none());
    }
}
