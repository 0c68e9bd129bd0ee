//! Layout operations: reshape, concat, slice, pixel shuffle, nearest upsampling.

use crate::error::{shape_err, Result};
use crate::graph::{acc, numel, Graph, Node, Op, Var};
use crate::Scalar;

/// Split a shape around `axis` into (outer, axis extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != s0[i]) {
                return Err(shape_err("concat", format!("{s0:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let ext = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, shape, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ext, inner) = around(&s, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Slice { x, axis, start }, rg))
    }

    /// `[b, c*r*r, h, w] -> [b, c, h*r, w*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(shape_err("pixel_shuffle", format!("{s:?} with ratio {r}")));
        }
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let c = cin / (r * r);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let src_c = ci * r * r + i * r + j;
                        for y in 0..h {
                            for xx in 0..w {
                                let src = ((bi * cin + src_c) * h + y) * w + xx;
                                let dst = ((bi * c + ci) * h * r + y * r + i) * w * r + xx * r + j;
                                out[dst] = xv[src];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, c, h * r, w * r], Op::PixelShuffle { x, r }, rg))
    }

    /// Nearest-neighbour upsampling of `[b, c, h, w]` by an integer ratio.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 {
            return Err(shape_err("upsample_nearest", format!("{s:?} with ratio {r}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * r, w * r);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * r * r);
        for plane in xv.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / r) * w..(y / r + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / r]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![s[0], s[1], oh, ow], Op::UpsampleNearest { x, r }, rg))
    }
}

pub(crate) fn pixel_shuffle_backward<T: Scalar>(graph: &Graph<T>, dy: &[T], x: Var, r: usize, grads: &mut [Option<Vec<T>>]) {
    if !graph.rg(x) {
        return;
    }
    let s = graph.shape(x);
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let c = cin / (r * r);
    let dx = acc(grads, x, graph);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((bi * cin + src_c) * h + y) * w + xx;
                            let dst = ((bi * c + ci) * h * r + y * r + i) * w * r + xx * r + j;
                            dx[src] += dy[dst];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Scalar>(graph: &Graph<T>, dy: &[T], x: Var, r: usize, grads: &mut [Option<Vec<T>>]) {
    if !graph.rg(x) {
        return;
    }
    let s = graph.shape(x);
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h * r, w * r);
    let dx = acc(grads, x, graph);
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                plane[(y / r) * w + xx / r] += dplane[y * ow + xx];
            }
        }
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    graph: &Graph<T>,
    node: &Node<T>,
    dy: &[T],
    xs: &[Var],
    axis: usize,
    grads: &mut [Option<Vec<T>>],
) {
    let (outer, total, inner) = around(&node.shape, axis);
    let mut offset = 0;
    for &v in xs {
        let ext = graph.shape(v)[axis];
        if graph.rg(v) {
            let dv = acc(grads, v, graph);
            for o in 0..outer {
                let src = &dy[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                for (d, &g) in dv[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                    *d += g;
                }
            }
        }
        offset += ext;
    }
}

pub(crate) fn slice_backward<T: Scalar>(
    graph: &Graph<T>,
    node: &Node<T>,
    dy: &[T],
    x: Var,
    axis: usize,
    start: usize,
    grads: &mut [Option<Vec<T>>],
) {
    if !graph.rg(x) {
        return;
    }
    let (outer, ext, inner) = around(graph.shape(x), axis);
    let len = node.shape[axis];
    let dx = acc(grads, x, graph);
    for o in 0..outer {
        let dst = &mut dx[(o * ext + start) * inner..(o * ext + start + len) * inner];
        for (d, &g) in dst.iter_mut().zip(&dy[o * len * inner..(o + 1) * len * inner]) {
            *d += g;
        }
    }
}
