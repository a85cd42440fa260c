//! Reverse-mode automatic differentiation over the kernels in [`crate::ops`].
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs and
//! its computed value at construction time, so node ids are already in
//! topological order. [`Graph::backward`] walks the tape once in reverse,
//! accumulating gradients into per-node slots, and returns the gradients of
//! all trainable leaves.
//!
//! Gradient flow is controlled by two mechanisms:
//!
//! * leaves are either parameters (gradients collected) or constants, and
//! * [`Graph::detach`] inserts an explicit stop-gradient node, which is how
//!   key-network prototypes are kept out of the backward pass.

use crate::error::{Error, Result};
use crate::maskcontrast::ObjectMask;
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf {
        trainable: bool,
    },
    Detach,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu {
        parent: NodeId,
    },
    Upsample {
        parent: NodeId,
        factor: usize,
    },
    L2Normalize {
        parent: NodeId,
        axis: usize,
    },
    L2NormalizeSafe {
        parent: NodeId,
        axis: usize,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        parent: NodeId,
        factor: f64,
    },
    Reshape {
        parent: NodeId,
    },
    Sum {
        parent: NodeId,
    },
    SelectPixels {
        parent: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    MaskedMeanPool {
        parent: NodeId,
        mask: ObjectMask,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    BinaryCrossEntropy {
        logits: NodeId,
        target: Tensor<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of the trainable leaves reachable from a loss node, indexed by
/// [`NodeId`].
pub struct Gradients<S: Scalar = f32> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a node, if one was produced.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.slots.get(id.index()).and_then(|s| s.as_ref())
    }

    /// Removes and returns the gradient for a node.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.slots.get_mut(id.index()).and_then(|s| s.take())
    }
}

/// Append-only computation tape.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.index()].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf { trainable: false }, false)
    }

    /// Trainable input: its gradient is collected by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf { trainable: true }, true)
    }

    /// Stop-gradient: forwards the value unchanged, blocks the backward pass.
    pub fn detach(&mut self, parent: NodeId) -> NodeId {
        let value = self.value(parent).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, parent: NodeId) -> NodeId {
        let value = ops::relu(self.value(parent));
        let rg = self.needs(parent);
        self.push(value, Op::Relu { parent }, rg)
    }

    pub fn upsample(&mut self, parent: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::bilinear_upsample(self.value(parent), factor)?;
        let rg = self.needs(parent);
        Ok(self.push(value, Op::Upsample { parent, factor }, rg))
    }

    pub fn l2_normalize(&mut self, parent: NodeId, axis: usize) -> Result<NodeId> {
        let value = ops::l2_normalize(self.value(parent), axis)?;
        let rg = self.needs(parent);
        Ok(self.push(value, Op::L2Normalize { parent, axis }, rg))
    }

    /// Normalization that maps zero-norm lanes to the first basis vector
    /// (zero gradient there) instead of failing.
    pub fn l2_normalize_safe(&mut self, parent: NodeId, axis: usize) -> Result<NodeId> {
        let value = ops::l2_normalize_safe(self.value(parent), axis)?;
        let rg = self.needs(parent);
        Ok(self.push(value, Op::L2NormalizeSafe { parent, axis }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Multiplication by a compile-time constant (e.g. an inverse temperature
    /// or a loss weight).
    pub fn scale(&mut self, parent: NodeId, factor: f64) -> NodeId {
        let value = self.value(parent).scale(S::from_f64(factor));
        let rg = self.needs(parent);
        self.push(value, Op::Scale { parent, factor }, rg)
    }

    pub fn reshape(&mut self, parent: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(parent).reshape(shape)?;
        let rg = self.needs(parent);
        Ok(self.push(value, Op::Reshape { parent }, rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, parent: NodeId) -> NodeId {
        let value = Tensor::scalar(S::from_f64(self.value(parent).sum_f64()));
        let rg = self.needs(parent);
        self.push(value, Op::Sum { parent }, rg)
    }

    pub fn select_pixels(&mut self, parent: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = ops::select_pixels(self.value(parent), indices)?;
        let rg = self.needs(parent);
        Ok(self.push(
            value,
            Op::SelectPixels {
                parent,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn masked_mean_pool(&mut self, parent: NodeId, mask: &ObjectMask) -> Result<NodeId> {
        let value = ops::masked_mean_pool(self.value(parent), mask)?;
        let rg = self.needs(parent);
        Ok(self.push(
            value,
            Op::MaskedMeanPool {
                parent,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let value = Tensor::scalar(ops::softmax_cross_entropy(self.value(logits), targets)?);
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn binary_cross_entropy(&mut self, logits: NodeId, target: &Tensor<S>) -> Result<NodeId> {
        let value = Tensor::scalar(ops::binary_cross_entropy(self.value(logits), target)?);
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::BinaryCrossEntropy {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss node. Returns the gradient of the loss
    /// with respect to every node that requires one; look up trainable leaves
    /// through [`Gradients::get`].
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        let root_node = &self.nodes[root.index()];
        if root_node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<S>>> = (0..=root.index()).map(|_| None).collect();
        if root_node.requires_grad {
            slots[root.index()] = Some(Tensor::full(root_node.value.shape(), S::ONE));
        }

        for i in (0..=root.index()).rev() {
            let Some(grad) = slots[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } | Op::Detach => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (di, dk, db) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &grad,
                        *stride,
                        *padding,
                    )?;
                    self.accumulate(&mut slots, *input, di)?;
                    self.accumulate(&mut slots, *kernel, dk)?;
                    self.accumulate(&mut slots, *bias, db)?;
                }
                Op::Relu { parent } => {
                    let dx = ops::relu_backward(self.value(*parent), &grad)?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::Upsample { parent, factor } => {
                    let dx = ops::bilinear_upsample_backward(
                        &grad,
                        self.value(*parent).shape(),
                        *factor,
                    )?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::L2Normalize { parent, axis } => {
                    let dx = ops::l2_normalize_backward(self.value(*parent), &grad, *axis)?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::L2NormalizeSafe { parent, axis } => {
                    let dx = ops::l2_normalize_safe_backward(self.value(*parent), &grad, *axis)?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::Matmul { a, b } => {
                    let da = ops::matmul_a_bt(&grad, self.value(*b))?;
                    let db = ops::matmul_at_b(self.value(*a), &grad)?;
                    self.accumulate(&mut slots, *a, da)?;
                    self.accumulate(&mut slots, *b, db)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut slots, *a, grad.clone())?;
                    self.accumulate(&mut slots, *b, grad.clone())?;
                }
                Op::Scale { parent, factor } => {
                    let dx = grad.scale(S::from_f64(*factor));
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::Reshape { parent } => {
                    let dx = grad.reshape(self.value(*parent).shape())?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::Sum { parent } => {
                    let dx = Tensor::full(self.value(*parent).shape(), grad.item()?);
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::SelectPixels { parent, indices } => {
                    let dx = ops::select_pixels_backward(
                        &grad,
                        indices,
                        self.value(*parent).shape(),
                    )?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::ConcatRows { parts } => {
                    let cols = grad.shape()[1];
                    let mut row = 0;
                    for &part in parts {
                        let rows = self.value(part).shape()[0];
                        let slice = Tensor::from_vec(
                            &[rows, cols],
                            grad.data()[row * cols..(row + rows) * cols].to_vec(),
                        )?;
                        self.accumulate(&mut slots, part, slice)?;
                        row += rows;
                    }
                }
                Op::MaskedMeanPool { parent, mask } => {
                    let dx = ops::masked_mean_pool_backward(
                        &grad,
                        mask,
                        self.value(*parent).shape(),
                    )?;
                    self.accumulate(&mut slots, *parent, dx)?;
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let dx = ops::softmax_cross_entropy_backward(
                        self.value(*logits),
                        targets,
                        grad.item()?.to_f64(),
                    )?;
                    self.accumulate(&mut slots, *logits, dx)?;
                }
                Op::BinaryCrossEntropy { logits, target } => {
                    let dx = ops::binary_cross_entropy_backward(
                        self.value(*logits),
                        target,
                        grad.item()?.to_f64(),
                    )?;
                    self.accumulate(&mut slots, *logits, dx)?;
                }
            }
            slots[i] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(
        &self,
        slots: &mut [Option<Tensor<S>>],
        parent: NodeId,
        contribution: Tensor<S>,
    ) -> Result<()> {
        if !self.needs(parent) {
            return Ok(());
        }
        match &mut slots[parent.index()] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    /// Trainable leaves reachable from `root` without crossing a detach
    /// boundary, in ascending id order. Lets tests assert which parameters a
    /// loss can actually influence.
    pub fn param_ancestors(&self, root: NodeId) -> Vec<NodeId> {
        let mut visited = vec![false; root.index() + 1];
        let mut stack = vec![root];
        let mut params = Vec::new();
        while let Some(id) = stack.pop() {
            if visited[id.index()] {
                continue;
            }
            visited[id.index()] = true;
            match &self.nodes[id.index()].op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        params.push(id);
                    }
                }
                Op::Detach => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    ..
                } => stack.extend([*input, *kernel, *bias]),
                Op::Relu { parent }
                | Op::Upsample { parent, .. }
                | Op::L2Normalize { parent, .. }
                | Op::L2NormalizeSafe { parent, .. }
                | Op::Scale { parent, .. }
                | Op::Reshape { parent }
                | Op::Sum { parent }
                | Op::SelectPixels { parent, .. }
                | Op::MaskedMeanPool { parent, .. } => stack.push(*parent),
                Op::Matmul { a, b } | Op::Add { a, b } => stack.extend([*a, *b]),
                Op::ConcatRows { parts } => stack.extend(parts.iter().copied()),
                Op::SoftmaxCrossEntropy { logits, .. }
                | Op::BinaryCrossEntropy { logits, .. } => stack.push(*logits),
            }
        }
        params.sort();
        params
    }
}
