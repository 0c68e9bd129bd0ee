//! Super-resolution from hybrid feature images: multi-scale residual blocks,
//! a hierarchical bottleneck and sub-pixel upsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tubuda_tensor::{Mode, ParamStore, Scalar, Session, Var};

use crate::error::{invalid, Error, Result};
use crate::filters::{extract_stack, FeatureStack, VesselnessParams};
use crate::hybrid::{HybridConfig, Preset, StackBatch, WeightModule};
use crate::imgio::{
    downsample_then_upsample, resize_cubic, resize_nearest, transform, Augmentation, Image, LabeledSample, ValueRange,
};
use crate::layers::Conv;
use crate::train::{ensure_finite_grads, Adam, OptimConfig};
use crate::uda::{Sampler, STREAM_SOURCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    /// Weight of the high-resolution image in the training label.
    pub eta: f64,
    pub scale_factor: usize,
    /// Block-average factor that produces training inputs.
    pub degrade_factor: usize,
    pub n_blocks: usize,
    pub channels: usize,
}

impl SrConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                eta: 0.9,
                scale_factor: 2,
                degrade_factor: 2,
                n_blocks: 8,
                channels: 64,
            },
            Preset::Desk => Self {
                eta: 0.9,
                scale_factor: 2,
                degrade_factor: 2,
                n_blocks: 4,
                channels: 16,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid(format!("eta = {} outside [0, 1]", self.eta)));
        }
        if self.scale_factor == 0 || self.n_blocks == 0 || self.channels == 0 {
            return Err(invalid("scale_factor, n_blocks and channels must be positive"));
        }
        if self.degrade_factor < 2 {
            return Err(invalid(format!("degrade_factor = {} below 2", self.degrade_factor)));
        }
        Ok(())
    }
}

impl Default for SrConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Training target `eta * hr + (1 - eta) * seg` on the byte scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SrLabel {
    pub image: Image,
}

pub fn make_sr_label(hr: &Image, seg: &Image, eta: f64) -> Result<SrLabel> {
    if hr.dims() != seg.dims() {
        return Err(invalid(format!("hr is {:?} but seg is {:?}", hr.dims(), seg.dims())));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid(format!("eta = {eta} outside [0, 1]")));
    }
    let hr = hr.to_range(ValueRange::Byte);
    let seg = seg.to_range(ValueRange::Byte);
    let data = hr
        .data()
        .iter()
        .zip(seg.data())
        .map(|(&h, &s)| eta * h + (1.0 - eta) * s)
        .collect();
    Ok(SrLabel {
        image: Image::new(hr.width(), hr.height(), data, ValueRange::Byte)?,
    })
}

/// Where an SR input image came from. Training only accepts degraded copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Degraded { factor: usize },
}

/// One SR training pair: features of the degraded image and the mixed label
/// at `scale_factor` times its size.
#[derive(Debug, Clone)]
pub struct SrExample {
    pub stack: FeatureStack,
    pub label: SrLabel,
    pub provenance: Provenance,
}

impl SrExample {
    pub fn from_sample(sample: &LabeledSample, cfg: &SrConfig, vp: &VesselnessParams) -> Result<Self> {
        cfg.validate()?;
        let lr = downsample_then_upsample(sample.image(), cfg.degrade_factor)?;
        let (w, h) = sample.image().dims();
        let (hr, seg) = if cfg.scale_factor == 1 {
            (sample.image().clone(), sample.label().clone())
        } else {
            let (sw, sh) = (w * cfg.scale_factor, h * cfg.scale_factor);
            (resize_cubic(sample.image(), sw, sh)?, resize_nearest(sample.label(), sw, sh)?)
        };
        Ok(Self {
            stack: extract_stack(&lr, vp)?,
            label: make_sr_label(&hr, &seg, cfg.eta)?,
            provenance: Provenance::Degraded {
                factor: cfg.degrade_factor,
            },
        })
    }

    /// Square crop at `(x, y)` of side `size` (input pixels).
    pub fn crop(&self, x: usize, y: usize, size: usize, scale: usize) -> Result<Self> {
        let (w, h) = self.stack.base.dims();
        if x + size > w || y + size > h {
            return Err(invalid(format!("crop {size} at ({x}, {y}) exceeds {w}x{h}")));
        }
        let cut = |img: &Image, k: usize| {
            Image::from_fn(size * k, size * k, img.range(), |i, j| img.get(x * k + i, y * k + j))
        };
        Ok(Self {
            stack: FeatureStack {
                base: cut(&self.stack.base, 1)?,
                features: self.stack.features.iter().map(|f| cut(f, 1)).collect::<Result<_>>()?,
            },
            label: SrLabel {
                image: cut(&self.label.image, scale)?,
            },
            provenance: self.provenance,
        })
    }

    pub fn transformed(&self, op: Augmentation) -> Result<Self> {
        Ok(Self {
            stack: FeatureStack {
                base: transform(&self.stack.base, op)?,
                features: self.stack.features.iter().map(|f| transform(f, op)).collect::<Result<_>>()?,
            },
            label: SrLabel {
                image: transform(&self.label.image, op)?,
            },
            provenance: self.provenance,
        })
    }
}

/// Parallel 3x3 / 5x5 paths, cross-concatenated twice, fused by 1x1, plus the input.
#[derive(Debug, Clone)]
pub struct Msrb {
    s1: Conv,
    p1: Conv,
    s2: Conv,
    p2: Conv,
    fuse: Conv,
}

impl Msrb {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            s1: Conv::new(store, &format!("{name}.s1"), c, c, 3, true, rng)?,
            p1: Conv::new(store, &format!("{name}.p1"), c, c, 5, true, rng)?,
            s2: Conv::new(store, &format!("{name}.s2"), 2 * c, 2 * c, 3, true, rng)?,
            p2: Conv::new(store, &format!("{name}.p2"), 2 * c, 2 * c, 5, true, rng)?,
            fuse: Conv::new(store, &format!("{name}.fuse"), 4 * c, c, 1, true, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let a = self.s1.forward(s, x)?;
        let s1 = s.relu(a);
        let a = self.p1.forward(s, x)?;
        let p1 = s.relu(a);
        let sp = s.concat(&[s1, p1], 1)?;
        let ps = s.concat(&[p1, s1], 1)?;
        let a = self.s2.forward(s, sp)?;
        let s2 = s.relu(a);
        let a = self.p2.forward(s, ps)?;
        let p2 = s.relu(a);
        let cat = s.concat(&[s2, p2], 1)?;
        let f = self.fuse.forward(s, cat)?;
        Ok(s.add(f, x)?)
    }
}

#[derive(Debug, Clone)]
pub struct SrNet {
    stem: Conv,
    blocks: Vec<Msrb>,
    bottleneck: Conv,
    pre_shuffle: Conv,
    out: Conv,
    scale: usize,
}

impl SrNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let r = cfg.scale_factor;
        Ok(Self {
            stem: Conv::new(store, &format!("{prefix}.stem"), 1, c, 3, true, rng)?,
            blocks: (0..cfg.n_blocks)
                .map(|i| Msrb::new(store, &format!("{prefix}.block{i}"), c, rng))
                .collect::<Result<_>>()?,
            bottleneck: Conv::new(store, &format!("{prefix}.bottleneck"), c * (cfg.n_blocks + 1), c, 1, true, rng)?,
            pre_shuffle: Conv::new(store, &format!("{prefix}.pre_shuffle"), c, c * r * r, 3, true, rng)?,
            out: Conv::new(store, &format!("{prefix}.out"), c, 1, 3, true, rng)?,
            scale: r,
        })
    }

    /// `[b, 1, h, w]` to `[b, 1, h * s, w * s]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(invalid(format!("SR input must be [b, 1, h, w], got {shape:?}")));
        }
        let mut feats = vec![self.stem.forward(s, x)?];
        for blk in &self.blocks {
            let last = *feats.last().expect("stem present");
            feats.push(blk.forward(s, last)?);
        }
        let cat = s.concat(&feats, 1)?;
        let y = self.bottleneck.forward(s, cat)?;
        let y = self.pre_shuffle.forward(s, y)?;
        let y = s.pixel_shuffle(y, self.scale)?;
        self.out.forward(s, y)
    }
}

/// SR-side weight module plus SR network, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct SrModel {
    pub cfg: SrConfig,
    pub hybrid_cfg: HybridConfig,
    pub weights: WeightModule,
    pub net: SrNet,
}

impl SrModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &SrConfig,
        hybrid_cfg: &HybridConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            cfg: *cfg,
            hybrid_cfg: *hybrid_cfg,
            weights: WeightModule::new(store, "hybrid", hybrid_cfg, rng)?,
            net: SrNet::new(store, "sr", cfg, rng)?,
        })
    }

    /// Predicted image in `[0, 1]` units (unclamped) and the feature weights.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, batch: &StackBatch) -> Result<(Var, Var)> {
        let (fh, alpha) = self.weights.hybrid(s, batch, self.hybrid_cfg.beta)?;
        let x = s.scale(fh, T::from_f64(1.0 / 255.0));
        Ok((self.net.forward(s, x)?, alpha))
    }
}

/// Mean absolute error of one batch, with parameter gradients in training mode.
pub fn sr_loss<T: Scalar>(
    model: &SrModel,
    store: &mut ParamStore<T>,
    batch: &[&SrExample],
    mode: Mode,
) -> Result<(f64, Option<tubuda_tensor::ParamGrads<T>>)> {
    if batch.iter().any(|e| e.provenance == Provenance::Original) {
        return Err(invalid("SR training inputs must be degraded copies, not original images"));
    }
    let stacks: Vec<&FeatureStack> = batch.iter().map(|e| &e.stack).collect();
    let sb = StackBatch::new(&stacks)?;
    let target: Vec<T> = batch
        .iter()
        .flat_map(|e| e.label.image.data().iter().map(|&v| T::from_f64(v / 255.0)))
        .collect();
    let mut s = Session::new(store, mode);
    let (y, _) = model.forward(&mut s, &sb)?;
    let loss = s.l1_loss(y, &target)?;
    let value = s.scalar(loss).to_f64();
    let grads = match mode {
        Mode::Train => Some(s.param_grads(loss)?),
        Mode::Eval => None,
    };
    Ok((value, grads))
}

/// One optimization step on a batch; returns the loss before the update.
pub fn sr_train_step<T: Scalar>(
    model: &SrModel,
    store: &mut ParamStore<T>,
    batch: &[&SrExample],
    adam: &mut Adam,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = sr_loss(model, store, batch, Mode::Train)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            component: "sr_l1".into(),
            step,
        });
    }
    let grads = grads.expect("training mode returns gradients");
    ensure_finite_grads(store, &grads, step)?;
    adam.step(store, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the random square crops fed to the network (0 = whole image).
    pub crop: usize,
    pub augment: bool,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            crop: 32,
            augment: true,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

/// Trains on random crops of `examples`; calls `on_step(step, loss)` after each update.
pub fn sr_train<T: Scalar>(
    model: &SrModel,
    store: &mut ParamStore<T>,
    examples: &[SrExample],
    cfg: &SrTrainConfig,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(invalid("SR training needs examples and a positive batch size"));
    }
    let mut adam = Adam::new(cfg.optim)?;
    let mut sampler = Sampler::new(examples.len(), cfg.seed, STREAM_SOURCE);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crop_rng.set_stream(STREAM_CROP);
    let r = model.cfg.scale_factor;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &examples[sampler.next_index()];
            let (w, h) = ex.stack.base.dims();
            let mut e = if cfg.crop > 0 && cfg.crop < w.min(h) {
                let x = crop_rng.random_range(0..=w - cfg.crop);
                let y = crop_rng.random_range(0..=h - cfg.crop);
                ex.crop(x, y, cfg.crop, r)?
            } else {
                ex.clone()
            };
            if cfg.augment {
                if let Some(op) = sampler.next_augmentation() {
                    e = e.transformed(op)?;
                }
            }
            batch.push(e);
        }
        let refs: Vec<&SrExample> = batch.iter().collect();
        let loss = sr_train_step(model, store, &refs, &mut adam, step)?;
        on_step(step, loss)?;
        losses.push(loss);
    }
    Ok(losses)
}

const STREAM_CROP: u64 = 3;

/// Runs the trained SR stage on an original image; output on the byte scale.
pub fn sr_apply<T: Scalar>(
    img: &Image,
    vp: &VesselnessParams,
    model: &SrModel,
    store: &mut ParamStore<T>,
) -> Result<Image> {
    let stack = extract_stack(img, vp)?;
    sr_apply_stack(&stack, model, store)
}

pub fn sr_apply_stack<T: Scalar>(stack: &FeatureStack, model: &SrModel, store: &mut ParamStore<T>) -> Result<Image> {
    let sb = StackBatch::new(&[stack])?;
    let mut s = Session::new(store, Mode::Eval);
    let (y, _) = model.forward(&mut s, &sb)?;
    let r = model.cfg.scale_factor;
    let data = s.value(y).iter().map(|&v| v.to_f64() * 255.0).collect();
    Image::clamped(sb.width * r, sb.height * r, data, ValueRange::Byte)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> Image {
        Image::constant(4, 4, v, ValueRange::Byte).unwrap()
    }

    #[test]
    fn label_worked_example() {
        let l = make_sr_label(&img(200.0), &img(0.0), 0.9).unwrap();
        assert!(l.image.data().iter().all(|&v| v == 180.0));
    }

    #[test]
    fn label_degenerate_weights() {
        let hr = Image::from_fn(4, 4, ValueRange::Byte, |x, y| (x * 40 + y * 7) as f64).unwrap();
        let seg = Image::from_fn(4, 4, ValueRange::Byte, |x, _| if x == 1 { 0.0 } else { 255.0 }).unwrap();
        assert_eq!(make_sr_label(&hr, &seg, 1.0).unwrap().image, hr);
        assert_eq!(make_sr_label(&hr, &seg, 0.0).unwrap().image, seg);
        assert!(make_sr_label(&hr, &img(0.0).to_range(ValueRange::Byte), 1.5).is_err());
    }

    #[test]
    fn label_dimension_mismatch() {
        let small = Image::constant(2, 4, 0.0, ValueRange::Byte).unwrap();
        assert!(make_sr_label(&img(1.0), &small, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SrConfig::default();
        assert!(c.validate().is_ok());
        c.eta = 1.2;
        assert!(c.validate().is_err());
        c = SrConfig {
            n_blocks: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
