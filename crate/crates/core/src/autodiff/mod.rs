//! Reverse-mode differentiation.
//!
//! Model code is written once against the [`Graph`] trait and runs on two
//! executors: [`Tape`] records every op for a later [`Tape::backward`], and
//! [`Eager`] evaluates ops immediately and keeps nothing, which is what
//! inference wants.

mod kernels;

use std::sync::Arc;

pub use kernels::{pixel_unshuffle, Op};
use kernels::Saved;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// An executor for tensor programs.
pub trait Graph<T: Element> {
    /// Handle to a value produced inside this graph.
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    /// Inserts a value that takes no gradient.
    fn input(&mut self, t: Tensor<T>) -> Self::V;

    /// Inserts a trainable leaf. The graph keeps its own copy.
    fn param(&mut self, t: &Tensor<T>) -> Self::V;

    fn apply(&mut self, op: Op<T>, inputs: &[&Self::V]) -> Result<Self::V>;

    fn shape_of(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Matmul, &[a, b])
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    /// `x W + b` over the last axis with `W: [in, out]`, `b: [out]`.
    fn affine(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Affine, &[x, w, b])
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mul, &[a, b])
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        self.apply(Op::Scale(s), &[x])
    }

    fn add_scalar(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        self.apply(Op::AddScalar(s), &[x])
    }

    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Gelu, &[x])
    }

    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sqrt, &[x])
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V> {
        self.apply(Op::Permute(perm.to_vec()), &[x])
    }

    fn concat_lastdim(&mut self, parts: &[&Self::V]) -> Result<Self::V> {
        self.apply(Op::ConcatLastDim, parts)
    }

    fn slice_lastdim(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        self.apply(Op::SliceLastDim { start, len }, &[x])
    }

    fn sum(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sum, &[x])
    }

    fn mean(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mean, &[x])
    }

    fn softmax_lastdim(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::SoftmaxLastDim, &[x])
    }

    fn layer_norm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<Self::V> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    fn conv2d_3x3(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Conv3x3, &[x, w, b])
    }

    fn pixel_shuffle(&mut self, x: &Self::V, s: usize) -> Result<Self::V> {
        self.apply(Op::PixelShuffle(s), &[x])
    }

    fn gather(&mut self, table: &Self::V, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Self::V> {
        self.apply(
            Op::Gather {
                index,
                shape: shape.to_vec(),
            },
            &[table],
        )
    }

    /// `softmax(scale * q kᵀ + bias + mask) v` per window.
    fn window_attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        bias: &Self::V,
        mask: Option<Arc<Tensor<T>>>,
        scale: f64,
    ) -> Result<Self::V> {
        self.apply(Op::WindowAttention { scale, mask }, &[q, k, v, bias])
    }

    /// Windows of `x` cyclically shifted by `shift` (0 for plain windows).
    fn window_partition(&mut self, x: &Self::V, window: usize, shift: usize) -> Result<Self::V> {
        self.apply(Op::WindowPartition { window, shift }, &[x])
    }

    /// Inverse of [`window_partition`](Graph::window_partition) with the
    /// same `shift`.
    fn window_reverse(
        &mut self,
        x: &Self::V,
        window: usize,
        height: usize,
        width: usize,
        shift: usize,
    ) -> Result<Self::V> {
        self.apply(
            Op::WindowReverse {
                window,
                height,
                width,
                shift,
            },
            &[x],
        )
    }

    /// Gathers the two spatial axes starting at `axis` through index maps.
    fn remap(
        &mut self,
        x: &Self::V,
        axis: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
    ) -> Result<Self::V> {
        self.apply(
            Op::Remap {
                axis,
                rows: Arc::new(rows),
                cols: Arc::new(cols),
            },
            &[x],
        )
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    inputs: Vec<usize>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// What a call to [`Tape::backward`] did.
#[derive(Clone, Debug, Default)]
pub struct BackwardReport {
    /// Indices of the op nodes whose backward rule ran, in call order.
    pub visited: Vec<usize>,
}

/// Recording executor.
///
/// A tape is meant to live for one forward/backward pass. Leaf gradients
/// accumulate across repeated [`backward`](Tape::backward) calls until
/// [`zero_grads`](Tape::zero_grads); gradients of intermediate nodes are
/// freed as soon as they have been propagated.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<String>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Negates every gradient produced by the backward rule of ops named
    /// `op` (see [`Op::name`]). Used to check that gradient checks catch
    /// broken rules.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Bytes held by recorded values and saved intermediates.
    pub fn retained_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.value.nbytes() + n.saved.nbytes())
            .sum()
    }

    /// Propagates `d loss / d node` to every reachable leaf that requires a
    /// gradient, visiting op nodes in reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        self.propagate(loss, false)
    }

    /// Like [`backward`](Tape::backward), but frees every recorded value
    /// and saved intermediate as soon as no remaining rule needs it. This is
    /// what a training step wants; afterwards only leaf gradients can be
    /// read from the tape.
    pub fn backward_release(&mut self, loss: Var) -> Result<BackwardReport> {
        self.propagate(loss, true)
    }

    fn propagate(&mut self, loss: Var, release: bool) -> Result<BackwardReport> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut report = BackwardReport::default();
        if !root.requires_grad {
            return Ok(report);
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            // Every consumer of node i has a larger index and is done.
            let pending_grad = pending[i].take();
            let Some(g) = pending_grad else {
                if release {
                    self.release(i);
                }
                continue;
            };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                if release {
                    self.release(i);
                }
                continue;
            };
            report.visited.push(i);
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let flip = self.fault.as_deref() == Some(op.name());
            let input_grads = kernels::backward(op, &xs, &node.value, &node.saved, &g, &needs);
            drop(g);
            for ((&j, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(mut gi) = gi.filter(|_| need) else {
                    continue;
                };
                if flip {
                    gi.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                match &mut pending[j] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            if release {
                self.release(i);
            }
        }
        Ok(report)
    }

    fn release(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        node.value = Tensor::from_parts(vec![0], Vec::new());
        node.saved = Saved::None;
    }
}

impl<T: Element> Graph<T> for Tape<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        let value = &self.nodes[v.0].value;
        assert!(value.numel() > 0, "value of node {} was released by backward_release", v.0);
        value
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Node {
            value: t,
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad: false,
        })
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(Node {
            value: t.clone(),
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad: true,
        })
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Var]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = kernels::forward(&op, &xs, requires_grad)?;
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            saved,
            requires_grad,
        }))
    }
}

/// Immediate executor: no recording, no gradients, intermediates are freed
/// as soon as their handles drop.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Graph<T> for Eager {
    type V = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(kernels::forward(&op, inputs, false)?.0)
    }
}
