//! Convolution (im2col + GEMM) and pooling.

use crate::error::{shape_err, Result};
use crate::graph::{acc, Graph, Node, Op, Var};
use crate::scalar::gemm;
use crate::Scalar;

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.n();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let off = kj as isize - g.pad as isize;
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *o = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *o = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.n();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err("conv2d", format!("expected 4-D input and kernel, got {xs:?} and {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(shape_err(
            "conv2d",
            format!("input {xs:?} has {} channels but kernel {ws:?} expects {}", xs[1], ws[1]),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("kernel {ws:?} does not fit padded input {xs:?} (pad {pad})")));
    }
    Ok(ConvGeom {
        ci: xs[1],
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation with zero padding. `x: [b, ci, h, w]`,
    /// `w: [co, ci, kh, kw]`, optional bias `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let g = geom(&xs, &ws, stride, pad)?;
        let co = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d", format!("bias {:?} for {co} output channels", self.shape(b))));
            }
        }
        let batch = xs[0];
        let (k, n) = (g.k(), g.n());
        let mut out = vec![T::zero(); batch * co * n];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for bi in 0..batch {
                let xi = &xv[bi * g.ci * g.h * g.w..(bi + 1) * g.ci * g.h * g.w];
                let src: &[T] = if g.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &g, &mut cols);
                    &cols
                };
                gemm(false, false, co, n, k, T::one(), wv, src, T::zero(), &mut out[bi * co * n..(bi + 1) * co * n]);
            }
            if let Some(b) = b {
                let bv = self.value(b);
                for bi in 0..batch {
                    for c in 0..co {
                        let bias = bv[c];
                        for o in &mut out[(bi * co + c) * n..(bi * co + c + 1) * n] {
                            *o += bias;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, vec![batch, co, g.oh, g.ow], Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Max over `window x window` patches with the given stride (no padding).
    /// Ties route the gradient to the first maximal element in row-major order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || window == 0 || stride == 0 || xs[2] < window || xs[3] < window {
            return Err(shape_err("max_pool2d", format!("window {window} stride {stride} on {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, c, oh, ow], Op::MaxPool2d { x, argmax }, rg))
    }

    /// `[b, c, h, w] -> [b, c, 1, 1]` spatial maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_max_pool", format!("expected 4-D input, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        let mut argmax = Vec::with_capacity(xs[0] * xs[1]);
        for plane in 0..xs[0] * xs[1] {
            let mut best = plane * hw;
            for idx in plane * hw..(plane + 1) * hw {
                if xv[idx] > xv[best] {
                    best = idx;
                }
            }
            out.push(xv[best]);
            argmax.push(best);
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![xs[0], xs[1], 1, 1], Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected 4-D input, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::from_f64(hw as f64);
        let out: Vec<T> = self.value(x).chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(out, vec![xs[0], xs[1]], Op::GlobalAvgPool { x }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    graph: &Graph<T>,
    node: &Node<T>,
    dy: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    grads: &mut [Option<Vec<T>>],
) {
    let xs = graph.shape(x);
    let ws = graph.shape(w);
    let g = geom(xs, ws, stride, pad).expect("validated in forward");
    let co = ws[0];
    let batch = node.shape[0];
    let (k, n) = (g.k(), g.n());
    let img = g.ci * g.h * g.w;

    if let Some(b) = b {
        if graph.rg(b) {
            let db = acc(grads, b, graph);
            for bi in 0..batch {
                for c in 0..co {
                    db[c] += dy[(bi * co + c) * n..(bi * co + c + 1) * n].iter().copied().sum::<T>();
                }
            }
        }
    }

    let xv = graph.value(x);
    if graph.rg(w) {
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
        let dw = acc(grads, w, graph);
        for bi in 0..batch {
            let xi = &xv[bi * img..(bi + 1) * img];
            let src: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            gemm(false, true, co, k, n, T::one(), &dy[bi * co * n..(bi + 1) * co * n], src, T::one(), dw);
        }
    }

    if graph.rg(x) {
        let wv = graph.value(w);
        let mut dcols = vec![T::zero(); k * n];
        let dx = acc(grads, x, graph);
        for bi in 0..batch {
            let dyi = &dy[bi * co * n..(bi + 1) * co * n];
            let dxi = &mut dx[bi * img..(bi + 1) * img];
            if g.is_pointwise() {
                gemm(true, false, k, n, co, T::one(), wv, dyi, T::one(), dxi);
            } else {
                gemm(true, false, k, n, co, T::one(), wv, dyi, T::zero(), &mut dcols);
                col2im(&dcols, &g, dxi);
            }
        }
    }
}

pub(crate) fn global_avg_backward<T: Scalar>(graph: &Graph<T>, x: Var, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    if !graph.rg(x) {
        return;
    }
    let xs = graph.shape(x);
    let hw = xs[2] * xs[3];
    let inv = T::one() / T::from_f64(hw as f64);
    let dx = acc(grads, x, graph);
    for (plane, &d) in dy.iter().enumerate() {
        for v in &mut dx[plane * hw..(plane + 1) * hw] {
            *v += d * inv;
        }
    }
}
