//! Element-wise arithmetic, gradient reversal and the row-wise vector
//! primitives used for projection-based orthogonalization.

use crate::error::{shape_err, Result};
use crate::graph::{acc, Graph, Op, Var};
use crate::Scalar;

/// Norm below which a vector is treated as zero by [`Graph::proj_coef`].
pub const DEGENERATE_NORM: f64 = 1e-8;

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Scale { x, c }, rg)
    }

    /// `a * x + b` element-wise.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let out = self.value(x).iter().map(|&v| a * v + b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Scale { x, c: a }, rg)
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: T) -> Var {
        let out = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Grl { x, lambda }, rg)
    }

    /// `y[b, 0, ..] = sum_i w[b, i] * x[b, i, ..]` for `x: [b, n, ...]`, `w: [b, n]`.
    pub fn channel_weighted_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.len() < 2 || ws != [xs[0], xs[1]] {
            return Err(shape_err("channel_weighted_sum", format!("features {xs:?}, weights {ws:?}")));
        }
        let (b, n) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); b * plane];
        for bi in 0..b {
            let dst = &mut out[bi * plane..(bi + 1) * plane];
            for i in 0..n {
                let wt = wv[bi * n + i];
                let src = &xv[(bi * n + i) * plane..(bi * n + i + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        let mut shape = xs;
        shape[1] = 1;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, shape, Op::ChannelWeightedSum { x, w }, rg))
    }

    /// Row-wise dot product of `[b, d]` operands, giving `[b, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("row_dot", format!("expected [b, d], got {s:?}")));
        }
        let d = s[1];
        let out = self
            .value(a)
            .chunks(d)
            .zip(self.value(b).chunks(d))
            .map(|(x, y)| dot(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![s[0], 1], Op::RowDot { a, b }, rg))
    }

    /// Projection coefficient `<v, u> / <u, u>` per row, `[b, 1]`.
    ///
    /// Rows where `|u| < DEGENERATE_NORM` yield 0 and are reported in the
    /// returned flags; they contribute no gradient.
    pub fn proj_coef(&mut self, v: Var, u: Var) -> Result<(Var, Vec<bool>)> {
        self.same_shape("proj_coef", v, u)?;
        let s = self.shape(v).to_vec();
        if s.len() != 2 {
            return Err(shape_err("proj_coef", format!("expected [b, d], got {s:?}")));
        }
        let d = s[1];
        let thresh = T::from_f64(DEGENERATE_NORM);
        let mut out = Vec::with_capacity(s[0]);
        let mut degenerate = Vec::with_capacity(s[0]);
        for (vr, ur) in self.value(v).chunks(d).zip(self.value(u).chunks(d)) {
            let uu = dot(ur, ur);
            if uu.sqrt() < thresh {
                out.push(T::zero());
                degenerate.push(true);
            } else {
                out.push(dot(vr, ur) / uu);
                degenerate.push(false);
            }
        }
        let rg = self.rg(v) || self.rg(u);
        let flags = degenerate.clone();
        Ok((self.push(out, vec![s[0], 1], Op::ProjCoef { v, u, degenerate }, rg), flags))
    }

    /// `y[b, :] = s[b] * x[b, :]` for `x: [b, d]`, `s: [b, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(s) != [xs[0], 1] {
            return Err(shape_err("scale_rows", format!("rows {xs:?}, scales {:?}", self.shape(s))));
        }
        let d = xs[1];
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(d)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |&v| k * v))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, xs, Op::ScaleRows { x, s }, rg))
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn cws_backward<T: Scalar>(graph: &Graph<T>, dy: &[T], x: Var, w: Var, grads: &mut [Option<Vec<T>>]) {
    let xs = graph.shape(x);
    let (b, n) = (xs[0], xs[1]);
    let plane: usize = xs[2..].iter().product();
    if graph.rg(w) {
        let xv = graph.value(x);
        let dw = acc(grads, w, graph);
        for bi in 0..b {
            let g = &dy[bi * plane..(bi + 1) * plane];
            for i in 0..n {
                dw[bi * n + i] += dot(&xv[(bi * n + i) * plane..(bi * n + i + 1) * plane], g);
            }
        }
    }
    if graph.rg(x) {
        let wv = graph.value(w);
        let dx = acc(grads, x, graph);
        for bi in 0..b {
            let g = &dy[bi * plane..(bi + 1) * plane];
            for i in 0..n {
                let wt = wv[bi * n + i];
                for (d, &gv) in dx[(bi * n + i) * plane..(bi * n + i + 1) * plane].iter_mut().zip(g) {
                    *d += wt * gv;
                }
            }
        }
    }
}

pub(crate) fn rowdot_backward<T: Scalar>(graph: &Graph<T>, dy: &[T], a: Var, b: Var, grads: &mut [Option<Vec<T>>]) {
    let d = graph.shape(a)[1];
    for (dst, other) in [(a, b), (b, a)] {
        if graph.rg(dst) {
            let ov = graph.value(other);
            let dd = acc(grads, dst, graph);
            for ((row, orow), &g) in dd.chunks_mut(d).zip(ov.chunks(d)).zip(dy) {
                for (r, &o) in row.iter_mut().zip(orow) {
                    *r += g * o;
                }
            }
        }
    }
}

pub(crate) fn projcoef_backward<T: Scalar>(
    graph: &Graph<T>,
    dy: &[T],
    v: Var,
    u: Var,
    degenerate: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    let d = graph.shape(v)[1];
    let (vv, uv) = (graph.value(v), graph.value(u));
    if graph.rg(v) {
        let dv = acc(grads, v, graph);
        for (r, (&deg, &g)) in degenerate.iter().zip(dy).enumerate() {
            if deg {
                continue;
            }
            let ur = &uv[r * d..(r + 1) * d];
            let uu = dot(ur, ur);
            for (x, &uk) in dv[r * d..(r + 1) * d].iter_mut().zip(ur) {
                *x += g * uk / uu;
            }
        }
    }
    if graph.rg(u) {
        let du = acc(grads, u, graph);
        for (r, (&deg, &g)) in degenerate.iter().zip(dy).enumerate() {
            if deg {
                continue;
            }
            let ur = &uv[r * d..(r + 1) * d];
            let vr = &vv[r * d..(r + 1) * d];
            let uu = dot(ur, ur);
            let vu = dot(vr, ur);
            let two = T::one() + T::one();
            for ((x, &uk), &vk) in du[r * d..(r + 1) * d].iter_mut().zip(ur).zip(vr) {
                *x += g * (vk / uu - two * vu * uk / (uu * uu));
            }
        }
    }
}

pub(crate) fn scale_rows_backward<T: Scalar>(graph: &Graph<T>, dy: &[T], x: Var, s: Var, grads: &mut [Option<Vec<T>>]) {
    let d = graph.shape(x)[1];
    if graph.rg(x) {
        let sv = graph.value(s);
        let dx = acc(grads, x, graph);
        for ((row, grow), &k) in dx.chunks_mut(d).zip(dy.chunks(d)).zip(sv) {
            for (r, &g) in row.iter_mut().zip(grow) {
                *r += k * g;
            }
        }
    }
    if graph.rg(s) {
        let xv = graph.value(x);
        let ds = acc(grads, s, graph);
        for ((dsv, xrow), grow) in ds.iter_mut().zip(xv.chunks(d)).zip(dy.chunks(d)) {
            *dsv += dot(xrow, grow);
        }
    }
}
