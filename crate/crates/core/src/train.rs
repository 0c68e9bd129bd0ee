//! Loss composition and the Adam optimizer.

use serde::{Deserialize, Serialize};
use tubuda_tensor::{Graph, ParamGrads, ParamStore, Scalar, Var};

use crate::error::{invalid, Error, Result};

/// Weights of the six domain losses: three source heads, then three target heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mu: [f64; 6],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mu: [0.03; 6] }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { mu: [0.0; 6] }
    }

    pub fn is_zero(&self) -> bool {
        self.mu.iter().all(|&m| m == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mu.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            Some(m) => Err(invalid(format!("loss weight {m} must be finite and non-negative"))),
            None => Ok(()),
        }
    }
}

/// Raw per-step loss values before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub seg: f64,
    pub source: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub seg_loss: f64,
    pub source_domain: [f64; 3],
    pub target_domain: [f64; 3],
    /// `seg_loss + sum_k mu_k * source_domain[k]`
    pub source_total: f64,
    /// `sum_k mu_{k+3} * target_domain[k]`
    pub target_total: f64,
    /// `source_total + target_total`
    pub total: f64,
}

fn weighted(mu: &[f64], v: &[f64; 3]) -> f64 {
    mu[0] * v[0] + mu[1] * v[1] + mu[2] * v[2]
}

/// Combines the seven raw losses. Any non-finite component aborts with its name.
pub fn compose_losses(c: &LossComponents, w: &LossWeights, step: usize) -> Result<LossReport> {
    let named = [
        ("seg", c.seg),
        ("source_d1", c.source[0]),
        ("source_d2", c.source[1]),
        ("source_d3", c.source[2]),
        ("target_d1", c.target[0]),
        ("target_d2", c.target[1]),
        ("target_d3", c.target[2]),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: (*name).to_string(),
            step,
        });
    }
    let source_total = c.seg + weighted(&w.mu[..3], &c.source);
    let target_total = weighted(&w.mu[3..], &c.target);
    Ok(LossReport {
        step,
        seg_loss: c.seg,
        source_domain: c.source,
        target_domain: c.target,
        source_total,
        target_total,
        total: source_total + target_total,
    })
}

/// Graph-side counterpart of [`compose_losses`]; returns the differentiable total.
pub fn compose_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    seg: Var,
    source: &[Var],
    target: &[Var],
    w: &LossWeights,
) -> Result<Var> {
    let mut total = seg;
    for (k, &v) in source.iter().chain(target).enumerate() {
        let mu = if k < source.len() { w.mu[k] } else { w.mu[3 + k - source.len()] };
        if mu != 0.0 {
            let t = g.scale(v, T::from_f64(mu));
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam moment coefficients must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            if !store.entry(id).trainable {
                continue;
            }
            let k = id.index();
            let w = store.get_mut(id);
            if g.len() != w.len() {
                return Err(invalid(format!("gradient of length {} for {} weights", g.len(), w.len())));
            }
            if self.m[k].is_empty() {
                self.m[k] = vec![0.0; w.len()];
                self.v[k] = vec![0.0; w.len()];
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                let wi = w[i].to_f64();
                let gi = g[i].to_f64() + c.weight_decay * wi;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] = T::from_f64(wi - c.lr * mh / (vh.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

/// Checks every gradient for NaN or infinity, naming the first offender.
pub fn ensure_finite_grads<T: Scalar>(store: &ParamStore<T>, grads: &ParamGrads<T>, step: usize) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.iter().any(|&v| !v.to_f64().is_finite()) {
            return Err(Error::NonFinite {
                component: format!("gradient of {}", store.entry(id).name),
                step,
            });
        }
    }
    Ok(())
}
