//! U-Net segmenter and the adversarial domain discriminator.
//!
//! The discriminator reads the U-Net bottleneck through a gradient reversal
//! layer, applies non-local self-attention, pools, projects to three vectors,
//! orthogonalizes them and classifies each one with its own head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tubuda_tensor::{BnParams, Graph, ParamStore, Scalar, Session, Var};

use crate::error::{invalid, Result};
use crate::hybrid::Preset;
use crate::layers::{Conv, ConvBnRelu, Dense};

pub const DOMAIN_SOURCE: f64 = 0.0;
pub const DOMAIN_TARGET: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Three projections, Gram-Schmidt, three heads.
    Orthogonal,
    /// A single projection and head.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Channels of the first U-Net level; doubled at each of four downsamplings.
    pub base_width: usize,
    /// Length of the discriminator vectors.
    pub d: usize,
    pub nonlocal: bool,
    pub heads: HeadMode,
    pub grl_lambda: f64,
}

impl SegConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                base_width: 64,
                d: 256,
                nonlocal: true,
                heads: HeadMode::Orthogonal,
                grl_lambda: 1.0,
            },
            Preset::Desk => Self {
                base_width: 8,
                d: 64,
                nonlocal: true,
                heads: HeadMode::Orthogonal,
                grl_lambda: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(invalid("U-Net base width must be positive"));
        }
        if self.d < 3 {
            return Err(invalid(format!("discriminator width d = {} below 3", self.d)));
        }
        if !(self.grl_lambda >= 0.0) {
            return Err(invalid(format!("GRL lambda {} must be non-negative", self.grl_lambda)));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_width * 16
    }
}

impl Default for SegConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Debug, Clone)]
struct DoubleConv(ConvBnRelu, ConvBnRelu);

impl DoubleConv {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self(
            ConvBnRelu::new(store, &format!("{name}.a"), cin, cout, 3, rng)?,
            ConvBnRelu::new(store, &format!("{name}.b"), cout, cout, 3, rng)?,
        ))
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.0.forward(s, x)?;
        self.1.forward(s, y)
    }
}

#[derive(Debug, Clone)]
struct UpLevel {
    reduce: Conv,
    conv: DoubleConv,
}

/// Four-level U-Net with one output channel (membrane logit).
#[derive(Debug, Clone)]
pub struct UNet {
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<UpLevel>,
    head: Conv,
}

/// Outputs of [`UNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct UNetOutput {
    /// `[b, 1, h, w]`
    pub logits: Var,
    /// `[b, 16 * width, h / 16, w / 16]`
    pub bottleneck: Var,
}

impl UNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let chans = [width, 2 * width, 4 * width, 8 * width];
        let mut down = Vec::new();
        let mut cin = in_channels;
        for (i, &c) in chans.iter().enumerate() {
            down.push(DoubleConv::new(store, &format!("{prefix}.down{i}"), cin, c, rng)?);
            cin = c;
        }
        let bottom = DoubleConv::new(store, &format!("{prefix}.bottom"), cin, 16 * width, rng)?;
        let mut up = Vec::new();
        let mut below = 16 * width;
        for (i, &c) in chans.iter().enumerate().rev() {
            up.push(UpLevel {
                reduce: Conv::new(store, &format!("{prefix}.up{i}.reduce"), below, c, 1, true, rng)?,
                conv: DoubleConv::new(store, &format!("{prefix}.up{i}.conv"), 2 * c, c, rng)?,
            });
            below = c;
        }
        let head = Conv::new(store, &format!("{prefix}.head"), width, 1, 1, true, rng)?;
        Ok(Self { down, bottom, up, head })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<UNetOutput> {
        let shape = s.shape(x).to_vec();
        if shape.len() != 4 || shape[2] % 16 != 0 || shape[3] % 16 != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(invalid(format!("U-Net input {shape:?} needs spatial sides divisible by 16")));
        }
        let mut skips = Vec::with_capacity(4);
        let mut y = x;
        for level in &self.down {
            let f = level.forward(s, y)?;
            skips.push(f);
            y = s.max_pool2d(f, 2, 2)?;
        }
        let bottleneck = self.bottom.forward(s, y)?;
        let mut y = bottleneck;
        for (level, skip) in self.up.iter().zip(skips.into_iter().rev()) {
            let r = level.reduce.forward(s, y)?;
            let u = s.upsample_nearest(r, 2)?;
            let cat = s.concat(&[u, skip], 1)?;
            y = level.conv.forward(s, cat)?;
        }
        let logits = self.head.forward(s, y)?;
        Ok(UNetOutput { logits, bottleneck })
    }
}

/// Embedded-Gaussian self-attention over spatial positions with a
/// zero-initialized residual projection.
#[derive(Debug, Clone)]
pub struct NonLocal {
    theta: Conv,
    phi: Conv,
    g: Conv,
    out: Conv,
}

impl NonLocal {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = (channels / 2).max(1);
        Ok(Self {
            theta: Conv::new(store, &format!("{prefix}.theta"), channels, inner, 1, true, rng)?,
            phi: Conv::new(store, &format!("{prefix}.phi"), channels, inner, 1, true, rng)?,
            g: Conv::new(store, &format!("{prefix}.g"), channels, inner, 1, true, rng)?,
            out: Conv::zeros(store, &format!("{prefix}.out"), inner, channels, rng)?,
        })
    }

    /// Returns the block output and the `[b, n, n]` attention matrix.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = s.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(invalid(format!("non-local block needs [b, c, h, w], got {shape:?}")));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let n = h * w;
        let flat = |s: &mut Session<'_, T>, conv: &Conv| -> Result<Var> {
            let y = conv.forward(s, x)?;
            let c = s.shape(y)[1];
            Ok(s.reshape(y, &[b, c, n])?)
        };
        let th = flat(s, &self.theta)?;
        let ph = flat(s, &self.phi)?;
        let gv = flat(s, &self.g)?;
        let inner = s.shape(gv)[1];
        let logits = s.matmul(th, ph, true, false)?; // [b, n, n]
        let attn = s.softmax(logits)?;
        let y = s.matmul(gv, attn, false, true)?; // [b, inner, n]
        let y = s.reshape(y, &[b, inner, h, w])?;
        let z = self.out.forward(s, y)?;
        Ok((s.add(z, x)?, attn))
    }
}

/// Gram-Schmidt result with per-row degeneracy flags for `u1` and `u2`.
#[derive(Debug, Clone)]
pub struct Orthogonalized {
    pub u: [Var; 3],
    /// `degenerate[k][row]`: `u_{k+1}` had a norm below the threshold when
    /// used as a projection direction.
    pub degenerate: [Vec<bool>; 2],
}

/// Classical, unnormalized Gram-Schmidt on rows of `[b, d]` tensors.
pub fn gram_schmidt<T: Scalar>(g: &mut Graph<T>, v1: Var, v2: Var, v3: Var) -> Result<Orthogonalized> {
    let d = g.shape(v1).get(1).copied().unwrap_or(0);
    if d < 3 {
        return Err(invalid(format!("Gram-Schmidt needs d >= 3, got {:?}", g.shape(v1))));
    }
    let u1 = v1;
    let (c21, deg1) = g.proj_coef(v2, u1)?;
    let p = g.scale_rows(u1, c21)?;
    let u2 = g.sub(v2, p)?;
    let (c31, _) = g.proj_coef(v3, u1)?;
    let (c32, deg2) = g.proj_coef(v3, u2)?;
    let p1 = g.scale_rows(u1, c31)?;
    let p2 = g.scale_rows(u2, c32)?;
    let t = g.sub(v3, p1)?;
    let u3 = g.sub(t, p2)?;
    Ok(Orthogonalized {
        u: [u1, u2, u3],
        degenerate: [deg1, deg2],
    })
}

/// Linear, batch norm over the batch, sigmoid.
#[derive(Debug, Clone)]
pub struct DomainHead {
    pub linear: Dense,
    pub bn: BnParams,
}

impl DomainHead {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Dense::new(store, &format!("{name}.linear"), d, 1, true, rng)?,
            bn: store.add_batchnorm(&format!("{name}.bn"), 1)?,
        })
    }

    /// `[b, d]` to domain probabilities `[b, 1]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let z = self.linear.forward(s, u)?;
        let z = s.batchnorm(z, &self.bn)?;
        Ok(s.sigmoid(z))
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub nonlocal: Option<NonLocal>,
    pub projections: Vec<Dense>,
    pub heads: Vec<DomainHead>,
    pub mode: HeadMode,
    pub grl_lambda: f64,
}

/// Per-head probabilities for a batch that stacks source rows before target rows.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub probs: Vec<Var>,
    pub degenerate: Option<[Vec<bool>; 2]>,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SegConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.bottleneck_channels();
        let nonlocal = if cfg.nonlocal {
            Some(NonLocal::new(store, &format!("{prefix}.nonlocal"), c, rng)?)
        } else {
            None
        };
        let k = match cfg.heads {
            HeadMode::Orthogonal => 3,
            HeadMode::Plain => 1,
        };
        let projections = (0..k)
            .map(|i| Dense::new(store, &format!("{prefix}.vec{i}"), c, cfg.d, false, rng))
            .collect::<Result<_>>()?;
        let heads = (0..k)
            .map(|i| DomainHead::new(store, &format!("{prefix}.head{i}"), cfg.d, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            nonlocal,
            projections,
            heads,
            mode: cfg.heads,
            grl_lambda: cfg.grl_lambda,
        })
    }

    /// Pools `x: [b, c, h, w]` and projects it to one `[b, d]` vector per head.
    pub fn extract_vectors<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Vec<Var>> {
        let pooled = s.global_avg_pool(x)?;
        self.projections.iter().map(|p| p.forward(s, pooled)).collect()
    }

    /// Full discriminator path, starting with gradient reversal.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, features: Var) -> Result<DiscOutput> {
        let mut x = s.grl(features, T::from_f64(self.grl_lambda));
        if let Some(nl) = &self.nonlocal {
            x = nl.forward(s, x)?.0;
        }
        let v = self.extract_vectors(s, x)?;
        let (us, degenerate) = match self.mode {
            HeadMode::Orthogonal => {
                let o = gram_schmidt(s, v[0], v[1], v[2])?;
                (o.u.to_vec(), Some(o.degenerate))
            }
            HeadMode::Plain => (v, None),
        };
        let probs = self
            .heads
            .iter()
            .zip(us)
            .map(|(h, u)| h.forward(s, u))
            .collect::<Result<_>>()?;
        Ok(DiscOutput { probs, degenerate })
    }
}

/// Binary cross-entropy of each head on `[source rows; target rows]`:
/// returns `(source losses, target losses)`.
pub fn domain_losses<T: Scalar>(
    g: &mut Graph<T>,
    probs: &[Var],
    n_source: usize,
    n_target: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let ls = vec![T::from_f64(DOMAIN_SOURCE); n_source];
    let lt = vec![T::from_f64(DOMAIN_TARGET); n_target];
    for &p in probs {
        let ps = g.slice(p, 0, 0, n_source)?;
        let pt = g.slice(p, 0, n_source, n_target)?;
        src.push(g.bce(ps, &ls)?);
        tgt.push(g.bce(pt, &lt)?);
    }
    Ok((src, tgt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tubuda_tensor::Mode;

    #[test]
    fn unet_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut store, "unet", 1, 8, &mut rng).unwrap();
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(vec![0.5; 2 * 64 * 64], &[2, 1, 64, 64]).unwrap();
        let o = net.forward(&mut s, x).unwrap();
        assert_eq!(s.shape(o.logits), &[2, 1, 64, 64]);
        assert_eq!(s.shape(o.bottleneck), &[2, 128, 4, 4]);
        let bad = s.input(vec![0.0; 40 * 40], &[1, 1, 40, 40]).unwrap();
        assert!(net.forward(&mut s, bad).is_err());
    }

    #[test]
    fn collinear_rows_flagged() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let v1 = g.input(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let v3 = g.input(vec![0.0, 0.0, 1.0], &[1, 3]).unwrap();
        let o = gram_schmidt(&mut g, v1, v1, v3).unwrap();
        assert!(g.value(o.u[1]).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(o.degenerate[1], vec![true]);
        assert!(g.value(o.u[2]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn orthogonal_inputs_unchanged() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let v1 = g.input(vec![2.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
        let v2 = g.input(vec![0.0, -3.0, 0.0, 0.0], &[1, 4]).unwrap();
        let v3 = g.input(vec![0.0, 0.0, 0.0, 5.0], &[1, 4]).unwrap();
        let o = gram_schmidt(&mut g, v1, v2, v3).unwrap();
        assert_eq!(g.value(o.u[1]), &[0.0, -3.0, 0.0, 0.0]);
        assert_eq!(g.value(o.u[2]), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn zero_features_give_zero_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = SegConfig {
            base_width: 2,
            ..Default::default()
        };
        let disc = Discriminator::new(&mut store, "disc", &cfg, &mut rng).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(vec![0.0; 2 * 32 * 4], &[2, 32, 2, 2]).unwrap();
        let v = disc.extract_vectors(&mut s, x).unwrap();
        assert_eq!(v.len(), 3);
        for vk in v {
            assert_eq!(s.shape(vk), &[2, 64]);
            assert!(s.value(vk).iter().all(|&x| x == 0.0));
        }
    }
}
