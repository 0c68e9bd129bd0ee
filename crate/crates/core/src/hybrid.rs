//! Learned per-feature weights and the hybrid feature image
//! `beta * sum_i alpha_i (255 - F_i) + (1 - beta) * F_img`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tubuda_tensor::{Graph, ParamStore, Scalar, Session, Var};

use crate::error::{invalid, Result};
use crate::filters::FeatureStack;
use crate::layers::{Conv, ConvBnRelu, Dense};

/// Channel-width family for every network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub beta: f64,
    pub n: usize,
    pub width: Preset,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            n: 4,
            width: Preset::Desk,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if self.n == 0 {
            return Err(invalid("hybrid feature count must be at least 1"));
        }
        Ok(())
    }

    fn widths(&self) -> ([usize; 4], usize) {
        match self.width {
            Preset::Paper => ([64, 128, 256, 512], 2048),
            Preset::Desk => ([8, 16, 32, 64], 256),
        }
    }
}

/// Feature stacks of one batch laid out as network tensors.
#[derive(Debug, Clone)]
pub struct StackBatch {
    pub batch: usize,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// `[b, n + 1, h, w]`: features then the image, scaled to `[0, 1]`.
    pub input: Vec<f64>,
    /// `[b, n, h, w]` on the byte scale.
    pub features: Vec<f64>,
    /// `[b, 1, h, w]` on the byte scale.
    pub base: Vec<f64>,
}

impl StackBatch {
    pub fn new(stacks: &[&FeatureStack]) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| invalid("empty feature batch"))?;
        let (w, h) = first.base.dims();
        let n = first.n();
        let plane = w * h;
        let mut input = Vec::with_capacity(stacks.len() * (n + 1) * plane);
        let mut features = Vec::with_capacity(stacks.len() * n * plane);
        let mut base = Vec::with_capacity(stacks.len() * plane);
        for st in stacks {
            if st.n() != n || st.base.dims() != (w, h) || st.features.iter().any(|f| f.dims() != (w, h)) {
                return Err(invalid("feature stacks in a batch must share size and feature count"));
            }
            for f in &st.features {
                features.extend_from_slice(f.data());
                input.extend(f.data().iter().map(|v| v / 255.0));
            }
            input.extend(st.base.data().iter().map(|v| v / 255.0));
            base.extend_from_slice(st.base.data());
        }
        Ok(Self {
            batch: stacks.len(),
            n,
            height: h,
            width: w,
            input,
            features,
            base,
        })
    }
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Conv blocks with pooling, a wide projection, global max pooling and a
/// sigmoid-activated linear head producing one weight per feature.
#[derive(Debug, Clone)]
pub struct WeightModule {
    pub blocks: Vec<ConvBnRelu>,
    pub proj: Conv,
    pub head: Dense,
    pub n: usize,
}

impl WeightModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &HybridConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (widths, wide) = cfg.widths();
        let mut cin = cfg.n + 1;
        let mut blocks = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            blocks.push(ConvBnRelu::new(store, &format!("{prefix}.block{i}"), cin, c, 3, rng)?);
            cin = c;
        }
        let proj = Conv::new(store, &format!("{prefix}.proj"), cin, wide, 1, true, rng)?;
        let head = Dense::new(store, &format!("{prefix}.head"), wide, cfg.n, true, rng)?;
        Ok(Self {
            blocks,
            proj,
            head,
            n: cfg.n,
        })
    }

    /// `input: [b, n + 1, h, w]` in `[0, 1]` to weights `[b, n]` in `(0, 1)`.
    pub fn predict_weights<T: Scalar>(&self, s: &mut Session<'_, T>, input: Var) -> Result<Var> {
        let shape = s.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.n + 1 {
            return Err(invalid(format!(
                "weight module expects [b, {}, h, w], got {shape:?}",
                self.n + 1
            )));
        }
        let mut x = input;
        for blk in &self.blocks {
            x = blk.forward(s, x)?;
            if s.shape(x)[2] >= 2 && s.shape(x)[3] >= 2 {
                x = s.max_pool2d(x, 2, 2)?;
            }
        }
        let x = self.proj.forward(s, x)?;
        let x = s.global_max_pool(x)?;
        let a = self.head.forward(s, x)?;
        Ok(s.sigmoid(a))
    }

    /// Hybrid image of a batch on the byte scale, with the weights used.
    pub fn hybrid<T: Scalar>(&self, s: &mut Session<'_, T>, batch: &StackBatch, beta: f64) -> Result<(Var, Var)> {
        if batch.n != self.n {
            return Err(invalid(format!("batch has {} features, module expects {}", batch.n, self.n)));
        }
        let (b, n, h, w) = (batch.batch, batch.n, batch.height, batch.width);
        let input = s.input(to_t(&batch.input), &[b, n + 1, h, w])?;
        let alpha = self.predict_weights(s, input)?;
        let feats = s.input(to_t(&batch.features), &[b, n, h, w])?;
        let base = s.input(to_t(&batch.base), &[b, 1, h, w])?;
        let fh = compose_hybrid(s, feats, alpha, base, beta)?;
        Ok((fh, alpha))
    }
}

/// `beta * sum_i alpha[b, i] * (255 - features[b, i]) + (1 - beta) * base`,
/// unclamped, on the byte scale. `features: [b, n, h, w]`, `alpha: [b, n]`,
/// `base: [b, 1, h, w]`.
pub fn compose_hybrid<T: Scalar>(g: &mut Graph<T>, features: Var, alpha: Var, base: Var, beta: f64) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let bs = g.shape(base);
    if fs.len() != 4 || bs != [fs[0], 1, fs[2], fs[3]] {
        return Err(invalid(format!("features {fs:?} do not match image {bs:?}")));
    }
    let inverted = g.affine(features, -T::one(), T::from_f64(255.0));
    let weighted = g.channel_weighted_sum(inverted, alpha)?;
    let a = g.scale(weighted, T::from_f64(beta));
    let b = g.scale(base, T::from_f64(1.0 - beta));
    Ok(g.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tubuda_tensor::Mode;

    #[test]
    fn worked_example_gives_fifty() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let f = g.input(vec![255.0; 4 * 9], &[1, 4, 3, 3]).unwrap();
        let a = g.input(vec![0.5; 4], &[1, 4]).unwrap();
        let b = g.input(vec![100.0; 9], &[1, 1, 3, 3]).unwrap();
        let h = compose_hybrid(&mut g, f, a, b, 0.5).unwrap();
        assert_eq!(g.value(h), &[50.0; 9]);
    }

    #[test]
    fn saturated_single_feature_inverts_to_zero() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let f = g.input(vec![255.0; 4], &[1, 1, 2, 2]).unwrap();
        let a = g.input(vec![1.0], &[1, 1]).unwrap();
        let b = g.input(vec![30.0; 4], &[1, 1, 2, 2]).unwrap();
        let h = compose_hybrid(&mut g, f, a, b, 1.0).unwrap();
        assert_eq!(g.value(h), &[0.0; 4]);
    }

    #[test]
    fn zero_head_gives_half_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let m = WeightModule::new(&mut store, "w", &HybridConfig::default(), &mut rng).unwrap();
        store.get_mut(m.head.weight).fill(0.0);
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input((0..2 * 5 * 16 * 16).map(|i| (i % 7) as f64 / 7.0).collect(), &[2, 5, 16, 16]).unwrap();
        let a = m.predict_weights(&mut s, x).unwrap();
        assert_eq!(s.shape(a), &[2, 4]);
        assert!(s.value(a).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let m = WeightModule::new(&mut store, "w", &HybridConfig::default(), &mut rng).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(vec![0.0; 3 * 16], &[1, 3, 4, 4]).unwrap();
        assert!(m.predict_weights(&mut s, x).is_err());
    }
}
