//! Dense rank-N f64 tensor with video semantics [batch, frames, channels, height, width].
//!
//! Buffers are immutable and shared (`Rc`), which gives two things for free:
//! saving an activation on the tape is a pointer copy, and the byte accounting
//! can dedup tensors by buffer identity exactly as the contract requires.

use std::fmt;
use std::rc::Rc;

use crate::error::{MobiusError, Result};
use crate::tape::NodeId;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    /// Reference into the active tape; `None` for constants / no-grad results.
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(MobiusError::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new((0..numel).map(|i| f(i)).collect()),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bytes this tensor's payload occupies (8 bytes per element).
    pub fn byte_size(&self) -> u64 {
        8 * self.data.len() as u64
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn set_node(&mut self, node: Option<NodeId>) {
        self.node = node;
    }

    /// Same buffer, no tape reference. This is the graft used to feed spatial
    /// activations into the temporal branch as constants.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Buffer identity, used by the retained-byte accounting to count each
    /// distinct tensor once.
    pub fn buffer_id(&self) -> usize {
        Rc::as_ptr(&self.data) as *const f64 as usize
    }

    /// Mutable access when the buffer is uniquely held (parameter updates);
    /// clones otherwise.
    pub fn make_mut(&mut self) -> &mut [f64] {
        Rc::make_mut(&mut self.data)
    }

    pub fn check_finite(&self, what: &str, node: Option<NodeId>) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MobiusError::NonFinite {
                what: what.to_string(),
                node,
            })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Bitwise comparison of payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}{}",
            self.shape,
            if self.node.is_some() { "@tape" } else { "" }
        )
    }
}

/// Dimensions of a video tensor [B, F, C, H, W].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoDims {
    pub b: usize,
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl VideoDims {
    pub fn of(t: &Tensor) -> Result<VideoDims> {
        match *t.shape() {
            [b, f, c, h, w] => Ok(VideoDims { b, f, c, h, w }),
            _ => Err(MobiusError::ShapeMismatch {
                op: "video_dims",
                lhs: t.shape().to_vec(),
                rhs: vec![0; 5],
            }),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.b, self.f, self.c, self.h, self.w]
    }

    pub fn with_channels(&self, c: usize) -> VideoDims {
        VideoDims { c, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn detach_shares_buffer() {
        let t = Tensor::full(&[2, 3], 1.5);
        let d = t.detach();
        assert_eq!(t.buffer_id(), d.buffer_id());
        assert!(d.node().is_none());
    }

    #[test]
    fn check_finite_flags_nan_and_inf() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("x", None).is_err());
        let t = Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(t.check_finite("x", Some(3)).is_err());
    }
}
