//! Operation tape: the record that drives reverse-mode differentiation
//! and structural inspection of a forward pass.

use super::{Scalar, Tensor, TensorId};
use crate::error::{Error, Result};

/// What an executed operation was, with enough parameters to classify it
/// (depthwise vs ordinary convolution, dilation, activation kind, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Conv2d { kernel: usize, stride: usize, padding: usize, dilation: usize, groups: usize },
    BatchNorm2d { train: bool },
    Relu,
    Gelu,
    Sigmoid,
    MaxPool2x2,
    BilinearUpsample2x,
    ConcatChannels,
    Add,
    Mul,
    MulScalar,
    Sum,
    Mean,
    BceWithLogits,
    DiceLoss,
}

impl OpKind {
    /// Grouped convolution with one channel per group.
    pub fn is_depthwise_conv(&self) -> bool {
        matches!(self, OpKind::Conv2d { groups, .. } if *groups > 1)
    }

    pub fn is_dilated_conv(&self) -> bool {
        matches!(self, OpKind::Conv2d { dilation, .. } if *dilation > 1)
    }
}

/// Per-node metadata kept for inspection regardless of gradient mode.
#[derive(Debug, Clone)]
pub struct NodeInfo {
    pub op: OpKind,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    pub output_shape: Vec<usize>,
}

struct Node<T: Scalar> {
    info: NodeInfo,
    backward: Option<Box<dyn Fn()>>,
    _marker: std::marker::PhantomData<T>,
}

/// Ordered record of executed operations. Backward replays nodes in exact
/// reverse execution order; gradient contributions from multiple uses of a
/// tensor accumulate additively.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward rules (training / gradient checks).
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape that records op metadata only; backward is unavailable, and
    /// intermediate tensors are not kept alive.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeInfo> {
        self.nodes.iter().map(|n| &n.info)
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub(crate) fn record(&mut self, info: NodeInfo, backward: Option<Box<dyn Fn()>>) {
        debug_assert!(backward.is_none() || self.grad_enabled);
        self.nodes.push(Node { info, backward, _marker: std::marker::PhantomData });
    }

    /// Whether an op's output should carry gradient tracking.
    pub(crate) fn track(&self, inputs: &[&Tensor<T>]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    /// Seed the output gradient with ones and run every recorded backward
    /// rule, newest first.
    pub fn backward(&self, output: &Tensor<T>) -> Result<()> {
        self.backward_seeded(output, T::ONE)
    }

    pub fn backward_seeded(&self, output: &Tensor<T>, seed: T) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::State("backward on a no-grad tape".into()));
        }
        if !output.requires_grad() {
            return Err(Error::State(
                "backward target does not require grad (no parameters feed it)".into(),
            ));
        }
        output.seed_grad(seed);
        for node in self.nodes.iter().rev() {
            if let Some(backward) = &node.backward {
                backward();
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
