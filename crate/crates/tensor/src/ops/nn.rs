//! Dense layers, activations and batch normalization.

use crate::error::{shape_err, Result};
use crate::graph::{acc, numel, Graph, Node, Op, Var};
use crate::scalar::gemm;
use crate::Scalar;

/// Source of the normalization statistics for [`Graph::batchnorm`].
pub enum BnStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running averages.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics produced in training mode: per-channel mean and
/// unbiased variance, for running-average updates.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    /// `y = x W^T + b` with `x: [b, ...]` flattened to `[b, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let batch = xs[0];
        let fan_in = numel(&xs[1..]);
        let (out_f, in_f) = (ws[0], ws[1]);
        if fan_in != in_f {
            return Err(shape_err("linear", format!("input {xs:?} has {fan_in} features, weight {ws:?} expects {in_f}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(shape_err("linear", format!("bias {:?} for {out_f} outputs", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); batch * out_f];
        gemm(false, true, batch, out_f, in_f, T::one(), self.value(x), self.value(w), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(out_f) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, vec![batch, out_f], Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over 3-D operands `[B, m, k] x [B, k, n]`;
    /// `ta`/`tb` read the corresponding operand as transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (k2, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions differ: {as_:?} x {bs:?} (ta={ta}, tb={tb})")));
        }
        let batch = as_[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                ta,
                tb,
                m,
                n,
                k,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![batch, m, n], Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Sigmoid { x }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&last) = shape.last() else {
            return Err(shape_err("softmax", "scalar input"));
        };
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(last.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Softmax { x }, rg))
    }

    /// Per-channel normalization of `x: [b, c, ...]` with affine `gamma`, `beta: [c]`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: BnStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batchnorm", format!("expected [b, c, ...], got {xs:?}")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let rest = numel(&xs[2..]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err(
                "batchnorm",
                format!("affine params {:?}/{:?} for {ch} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let count = batch * rest;
        let eps = T::from_f64(eps);
        let xv = self.value(x);
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                let inv_n = T::one() / T::from_f64(count as f64);
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += xv[(b * ch + c) * rest..(b * ch + c + 1) * rest].iter().copied().sum::<T>();
                    }
                    let m = s * inv_n;
                    let mut q = T::zero();
                    for b in 0..batch {
                        for &v in &xv[(b * ch + c) * rest..(b * ch + c + 1) * rest] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = q * inv_n;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(shape_err("batchnorm", format!("running stats of length {} for {ch} channels", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let r = (b * ch + c) * rest..(b * ch + c + 1) * rest;
                for i in r {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let moments = batch_stats.then(|| {
            let corr = if count > 1 { T::from_f64(count as f64 / (count - 1) as f64) } else { T::one() };
            BatchMoments {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * corr).collect(),
            }
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let y = self.push(
            out,
            xs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((y, moments))
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    graph: &Graph<T>,
    dy: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
    grads: &mut [Option<Vec<T>>],
) {
    let batch = graph.shape(x)[0];
    let (out_f, in_f) = (graph.shape(w)[0], graph.shape(w)[1]);
    if let Some(b) = b {
        if graph.rg(b) {
            let db = acc(grads, b, graph);
            for row in dy.chunks(out_f) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
    }
    if graph.rg(w) {
        let xv = graph.value(x);
        let dw = acc(grads, w, graph);
        gemm(true, false, out_f, in_f, batch, T::one(), dy, xv, T::one(), dw);
    }
    if graph.rg(x) {
        let wv = graph.value(w);
        let dx = acc(grads, x, graph);
        gemm(false, false, batch, in_f, out_f, T::one(), dy, wv, T::one(), dx);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<T: Scalar>(
    graph: &Graph<T>,
    node: &Node<T>,
    dc: &[T],
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    grads: &mut [Option<Vec<T>>],
) {
    let (batch, m, n) = (node.shape[0], node.shape[1], node.shape[2]);
    let as_ = graph.shape(a);
    let k = if ta { as_[1] } else { as_[2] };
    if graph.rg(a) {
        let bv = graph.value(b);
        let da = acc(grads, a, graph);
        for i in 0..batch {
            let dci = &dc[i * m * n..(i + 1) * m * n];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let dai = &mut da[i * m * k..(i + 1) * m * k];
            if ta {
                // dA^T [k, m] = op(B) [k, n] * dC^T [n, m]
                gemm(tb, true, k, m, n, T::one(), bi, dci, T::one(), dai);
            } else {
                // dA [m, k] = dC [m, n] * op(B)^T [n, k]
                gemm(false, !tb, m, k, n, T::one(), dci, bi, T::one(), dai);
            }
        }
    }
    if graph.rg(b) {
        let av = graph.value(a);
        let db = acc(grads, b, graph);
        for i in 0..batch {
            let dci = &dc[i * m * n..(i + 1) * m * n];
            let ai = &av[i * m * k..(i + 1) * m * k];
            let dbi = &mut db[i * k * n..(i + 1) * k * n];
            if tb {
                // dB^T [n, k] = dC^T [n, m] * op(A) [m, k]
                gemm(true, ta, n, k, m, T::one(), dci, ai, T::one(), dbi);
            } else {
                // dB [k, n] = op(A)^T [k, m] * dC [m, n]
                gemm(!ta, false, k, n, m, T::one(), ai, dci, T::one(), dbi);
            }
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    graph: &Graph<T>,
    node: &Node<T>,
    dy: &[T],
    x: Var,
    grads: &mut [Option<Vec<T>>],
) {
    if !graph.rg(x) {
        return;
    }
    let last = *node.shape.last().unwrap();
    let dx = acc(grads, x, graph);
    for ((dxr, yr), dyr) in dx.chunks_mut(last).zip(node.value.chunks(last)).zip(dy.chunks(last)) {
        let dot: T = yr.iter().zip(dyr).map(|(&y, &g)| y * g).sum();
        for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += y * (g - dot);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    graph: &Graph<T>,
    dy: &[T],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    grads: &mut [Option<Vec<T>>],
) {
    let xs = graph.shape(x);
    let (batch, ch) = (xs[0], xs[1]);
    let rest = numel(&xs[2..]);
    let idx = |b: usize, c: usize| (b * ch + c) * rest..(b * ch + c + 1) * rest;

    let mut sum_dy = vec![T::zero(); ch];
    let mut sum_dy_xhat = vec![T::zero(); ch];
    for c in 0..ch {
        for b in 0..batch {
            for i in idx(b, c) {
                sum_dy[c] += dy[i];
                sum_dy_xhat[c] += dy[i] * xhat[i];
            }
        }
    }
    if graph.rg(gamma) {
        let dg = acc(grads, gamma, graph);
        for c in 0..ch {
            dg[c] += sum_dy_xhat[c];
        }
    }
    if graph.rg(beta) {
        let db = acc(grads, beta, graph);
        for c in 0..ch {
            db[c] += sum_dy[c];
        }
    }
    if graph.rg(x) {
        let gv = graph.value(gamma).to_vec();
        let dx = acc(grads, x, graph);
        let n = T::from_f64((batch * rest) as f64);
        for c in 0..ch {
            let k = gv[c] * inv_std[c];
            for b in 0..batch {
                for i in idx(b, c) {
                    if batch_stats {
                        dx[i] += k * (dy[i] - sum_dy[c] / n - xhat[i] * sum_dy_xhat[c] / n);
                    } else {
                        dx[i] += k * dy[i];
                    }
                }
            }
        }
    }
}
