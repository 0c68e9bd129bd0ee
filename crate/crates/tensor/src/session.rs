use std::ops::{Deref, DerefMut};

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::ops::nn::BnStats;
use crate::params::{BnParams, ParamId, ParamStore};
use crate::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// A graph bound to the parameter store it reads from.
///
/// Parameters enter the graph lazily, once per session. In training mode
/// batch-norm layers write their running averages back to the store.
pub struct Session<'s, T: Scalar> {
    graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    leaves: Vec<Option<Var>>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Self {
            graph: Graph::new(mode),
            store,
            leaves: vec![None; n],
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.index()] {
            return v;
        }
        let e = self.store.entry(id);
        let (data, shape) = (e.data.clone(), e.shape.clone());
        let v = if e.trainable {
            self.graph.variable(data, &shape)
        } else {
            self.graph.input(data, &shape)
        }
        .expect("store entries are shape-consistent");
        self.leaves[id.index()] = Some(v);
        v
    }

    pub fn batchnorm(&mut self, x: Var, bn: &BnParams) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match self.graph.mode() {
            Mode::Train => {
                let (y, moments) = self.graph.batchnorm(x, gamma, beta, BN_EPS, BnStats::Batch)?;
                let m = moments.expect("batch statistics in training mode");
                let k = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - k;
                for (r, &b) in self.store.get_mut(bn.running_mean).iter_mut().zip(&m.mean) {
                    *r = keep * *r + k * b;
                }
                for (r, &b) in self.store.get_mut(bn.running_var).iter_mut().zip(&m.var) {
                    *r = keep * *r + k * b;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.get(bn.running_mean).to_vec();
                let var = self.store.get(bn.running_var).to_vec();
                let (y, _) = self.graph.batchnorm(
                    x,
                    gamma,
                    beta,
                    BN_EPS,
                    BnStats::Running {
                        mean: &mean,
                        var: &var,
                    },
                )?;
                Ok(y)
            }
        }
    }

    /// Gradients of `loss` with respect to every parameter used in this session.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads = self.graph.backward(loss)?;
        let per_param = self
            .leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads { grads: per_param })
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T: Scalar> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}

/// Per-parameter gradients; `None` for parameters the loss does not reach.
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    /// True when every gradient entry is finite.
    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
