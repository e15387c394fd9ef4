//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Node ids are handed out in
//! creation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] only has to walk it once in reverse.

use crate::error::{Error, Result};
use crate::kernels;
use crate::ops::{self, BinaryOp};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryOp, NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Linear(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Reshape(NodeId),
    Standardize {
        input: NodeId,
        axis: usize,
        rstd: Vec<T>,
    },
    AvgPool {
        input: NodeId,
        kernel: usize,
        stride: usize,
    },
    Bilinear(NodeId),
    Mse(NodeId, NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `id`; leaves that the loss does not depend on get zeros.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        let value = ops::ensure_finite(name, value)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::elementwise(op, self.value(a), self.value(b))?;
        self.push_checked(op.name(), value, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        self.push_checked("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x·w + b`, one node instead of a matmul and a broadcast add.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push_checked("linear", value, Op::Linear(x, w, b), &[x, w, b])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.value(x);
        let value = Tensor::new(input.shape().to_vec(), kernels::gelu_slice(input.data()))?;
        self.push_checked("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * factor);
        self.push_checked("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_checked("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn standardize(&mut self, x: NodeId, axis: usize, eps: T) -> Result<NodeId> {
        let input = self.value(x);
        ops::check_axis(input.shape(), axis)?;
        let (outer, len, inner) = kernels::axis_layout(input.shape(), axis);
        let (data, rstd) = kernels::standardize(input.data(), outer, len, inner, eps);
        let value = Tensor::new(input.shape().to_vec(), data)?;
        self.push_checked(
            "standardize",
            value,
            Op::Standardize {
                input: x,
                axis,
                rstd,
            },
            &[x],
        )
    }

    pub fn avg_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let value = ops::avg_pool2d(self.value(x), kernel, stride)?;
        self.push_checked(
            "avg_pool2d",
            value,
            Op::AvgPool {
                input: x,
                kernel,
                stride,
            },
            &[x],
        )
    }

    pub fn bilinear_upsample(&mut self, x: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let value = ops::bilinear_upsample(self.value(x), target)?;
        self.push_checked("bilinear_upsample", value, Op::Bilinear(x), &[x])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let loss = ops::mse(self.value(a), self.value(b))?;
        self.push_checked("mse", Tensor::scalar(loss), Op::Mse(a, b), &[a, b])
    }

    /// Back-propagates from a scalar `loss`. Every grad-requiring leaf gets
    /// an entry in the result, zero-filled when unreachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let mut leaf_grads = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            leaf_grads.push(if node.requires_grad && matches!(node.op, Op::Leaf) {
                Some(match g {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data)?,
                    None => Tensor::zeros(node.value.shape()),
                })
            } else {
                None
            });
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let blen = bv.len().max(1);
                if self.requires_grad(*a) {
                    let da = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g
                            .chunks_exact(blen)
                            .flat_map(|gc| gc.iter().zip(bv).map(|(&gi, &bi)| gi * bi))
                            .collect(),
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // Reduce over the broadcast repeats in a fixed order.
                    let mut db = vec![T::zero(); bv.len()];
                    for (gc, ac) in g.chunks_exact(blen).zip(av.chunks_exact(blen)) {
                        for ((d, &gi), &ai) in db.iter_mut().zip(gc).zip(ac) {
                            *d = *d + match op {
                                BinaryOp::Add => gi,
                                BinaryOp::Sub => -gi,
                                BinaryOp::Mul => gi * ai,
                            };
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = ops::matrix_dims("matmul", self.value(*a).shape())?;
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    self.accumulate(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = ops::matrix_dims("linear", self.value(*x).shape())?;
                let n = self.value(*w).shape()[1];
                if self.requires_grad(*x) {
                    let wt = kernels::transpose(self.value(*w).data(), k, n);
                    self.accumulate(grads, *x, kernels::matmul(g, &wt, m, n, k));
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, kernels::matmul_tn(self.value(*x).data(), g, m, k, n));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::column_sums(g, n));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = kernels::gelu_backward(xv, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.iter().map(|&gi| gi * *factor).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Standardize { input, axis, rstd } => {
                let (outer, len, inner) = kernels::axis_layout(node.value.shape(), *axis);
                let dx = kernels::standardize_backward(node.value.data(), rstd, g, outer, len, inner);
                self.accumulate(grads, *input, dx);
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
            } => {
                let (h, w) = ops::matrix_dims("avg_pool2d", self.value(*input).shape())?;
                let dx = kernels::avg_pool2d_backward(g, h, w, *kernel, *stride);
                self.accumulate(grads, *input, dx);
            }
            Op::Bilinear(x) => {
                let (h, w) = ops::matrix_dims("bilinear_upsample", self.value(*x).shape())?;
                let (oh, ow) = ops::matrix_dims("bilinear_upsample", node.value.shape())?;
                let dx = kernels::bilinear_backward(g, h, w, oh, ow);
                self.accumulate(grads, *x, dx);
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b).data();
                let scale = T::from_f64(2.0 / ops::spatial_extent(av.shape()) as f64) * g[0];
                let diff: Vec<T> = av.data().iter().zip(bv).map(|(&x, &y)| (x - y) * scale).collect();
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|&d| -d).collect());
                }
                self.accumulate(grads, *a, diff);
            }
        }
        Ok(())
    }
}
