//! Reductions and losses.

use crate::error::{shape_err, Result};
use crate::graph::{acc, Graph, Op, Var};
use crate::Scalar;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.rg(x);
        self.push(vec![s], vec![], Op::Mean { x }, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`.
    /// Clamped entries carry no gradient.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != target.len() {
            return Err(shape_err("bce", format!("{} predictions vs {} targets", pv.len(), target.len())));
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut clamped = Vec::with_capacity(pv.len());
        let mut total = T::zero();
        for (&q, &t) in pv.iter().zip(target) {
            let c = q.max(lo).min(hi);
            clamped.push(c != q);
            total += -(t * c.ln() + (T::one() - t) * (T::one() - c).ln());
        }
        let out = total / T::from_f64(pv.len() as f64);
        let rg = self.rg(p);
        Ok(self.push(
            vec![out],
            vec![],
            Op::Bce {
                p,
                target: target.to_vec(),
                clamped,
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(shape_err("l1_loss", format!("{} predictions vs {} targets", xv.len(), target.len())));
        }
        let s: T = xv.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum();
        let out = s / T::from_f64(xv.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![out], vec![], Op::L1 { x, target: target.to_vec() }, rg))
    }
}

pub(crate) fn bce_backward<T: Scalar>(
    graph: &Graph<T>,
    dy: &[T],
    p: Var,
    target: &[T],
    clamped: &[bool],
    grads: &mut [Option<Vec<T>>],
) {
    if !graph.rg(p) {
        return;
    }
    let pv = graph.value(p);
    let n = T::from_f64(pv.len() as f64);
    let dp = acc(grads, p, graph);
    for (((d, &q), &t), &c) in dp.iter_mut().zip(pv).zip(target).zip(clamped) {
        if !c {
            *d += dy[0] * (q - t) / (q * (T::one() - q)) / n;
        }
    }
}

pub(crate) fn l1_backward<T: Scalar>(graph: &Graph<T>, dy: &[T], x: Var, target: &[T], grads: &mut [Option<Vec<T>>]) {
    if !graph.rg(x) {
        return;
    }
    let xv = graph.value(x);
    let n = T::from_f64(xv.len() as f64);
    let dx = acc(grads, x, graph);
    for ((d, &a), &b) in dx.iter_mut().zip(xv).zip(target) {
        let s = if a > b {
            T::one()
        } else if a < b {
            -T::one()
        } else {
            T::zero()
        };
        *d += dy[0] * s / n;
    }
}
