//! The differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Gradients are
//! summed in that fixed order, which keeps repeated runs bit-identical.

use crate::error::{Result, TensorError};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    UpsampleNearest {
        x: Var,
        r: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Grl {
        x: Var,
        lambda: T,
    },
    ChannelWeightedSum {
        x: Var,
        w: Var,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    ProjCoef {
        v: Var,
        u: Var,
        degenerate: Vec<bool>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Bce {
        p: Var,
        target: Vec<T>,
        clamped: Vec<bool>,
    },
    L1 {
        x: Var,
        target: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A single forward/backward tape.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    mode: Mode,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(data, shape, true)
    }

    fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(crate::error::shape_err(
                "leaf",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub(crate) fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        use crate::ops::*;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => conv::conv2d_backward(self, node, g, *x, *w, *b, *stride, *pad, grads),
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                if self.rg(*x) {
                    let dx = acc(grads, *x, self);
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::GlobalAvgPool { x } => conv::global_avg_backward(self, *x, g, grads),
            Op::Linear { x, w, b } => nn::linear_backward(self, g, *x, *w, *b, grads),
            Op::MatMul { a, b, ta, tb } => nn::matmul_backward(self, node, g, *a, *b, *ta, *tb, grads),
            Op::Relu { x } => {
                if self.rg(*x) {
                    let dx = acc(grads, *x, self);
                    for ((d, &y), &gv) in dx.iter_mut().zip(&node.value).zip(g) {
                        if y > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.rg(*x) {
                    let dx = acc(grads, *x, self);
                    for ((d, &y), &gv) in dx.iter_mut().zip(&node.value).zip(g) {
                        *d += gv * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax { x } => nn::softmax_backward(self, node, g, *x, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => nn::batchnorm_backward(self, g, *x, *gamma, *beta, xhat, inv_std, *batch_stats, grads),
            Op::PixelShuffle { x, r } => shape::pixel_shuffle_backward(self, g, *x, *r, grads),
            Op::UpsampleNearest { x, r } => shape::upsample_backward(self, g, *x, *r, grads),
            Op::Concat { xs, axis } => shape::concat_backward(self, node, g, xs, *axis, grads),
            Op::Slice { x, axis, start } => shape::slice_backward(self, node, g, *x, *axis, *start, grads),
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let dx = acc(grads, *x, self);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let d = acc(grads, v, self);
                        for (d, &gv) in d.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    let d = acc(grads, *a, self);
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.rg(*b) {
                    let d = acc(grads, *b, self);
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = &self.nodes[b.0].value;
                    let d = acc(grads, *a, self);
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if self.rg(*b) {
                    let av = &self.nodes[a.0].value;
                    let d = acc(grads, *b, self);
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let d = acc(grads, *x, self);
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += *c * gv;
                    }
                }
            }
            Op::Grl { x, lambda } => {
                if self.rg(*x) {
                    let d = acc(grads, *x, self);
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += -*lambda * gv;
                    }
                }
            }
            Op::ChannelWeightedSum { x, w } => arith::cws_backward(self, g, *x, *w, grads),
            Op::RowDot { a, b } => arith::rowdot_backward(self, g, *a, *b, grads),
            Op::ProjCoef { v, u, degenerate } => arith::projcoef_backward(self, g, *v, *u, degenerate, grads),
            Op::ScaleRows { x, s } => arith::scale_rows_backward(self, g, *x, *s, grads),
            Op::Sum { x } => {
                if self.rg(*x) {
                    let d = acc(grads, *x, self);
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.rg(*x) {
                    let n = T::from_f64(self.nodes[x.0].value.len() as f64);
                    let d = acc(grads, *x, self);
                    for d in d.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Bce { p, target, clamped } => loss::bce_backward(self, g, *p, target, clamped, grads),
            Op::L1 { x, target } => loss::l1_backward(self, g, *x, target, grads),
        }
    }
}

/// Zero-initialized (on first touch) gradient buffer for `v`.
pub(crate) fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, g: &Graph<T>) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); g.nodes[v.0].value.len()])
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// require gradients or is unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
