//! Segmentation stage: supervised source loss plus adversarial domain losses
//! on unlabeled target images, optimized jointly by one Adam instance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tubuda_tensor::{Mode, ParamStore, Scalar, Session, Var};

use crate::error::{invalid, Result};
use crate::filters::{extract_stack, FeatureStack, VesselnessParams};
use crate::hybrid::{HybridConfig, Preset, StackBatch, WeightModule};
use crate::imgio::{transform, Augmentation, Image, LabeledSplit, UnlabeledSplit};
use crate::metrics::Mask;
use crate::segnet::{domain_losses, Discriminator, SegConfig, UNet, UNetOutput};
use crate::train::{
    compose_loss_graph, compose_losses, ensure_finite_grads, Adam, LossComponents, LossReport, LossWeights,
    OptimConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UdaConfig {
    pub seg: SegConfig,
    pub hybrid: HybridConfig,
    /// Feed the U-Net the hybrid feature image instead of the plain image.
    pub use_hfi: bool,
    pub mu: LossWeights,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl UdaConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            seg: SegConfig::preset(p),
            hybrid: HybridConfig {
                width: p,
                ..Default::default()
            },
            use_hfi: true,
            mu: LossWeights::default(),
            optim: OptimConfig::default(),
            steps: 500,
            batch_size: 2,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.hybrid.validate()?;
        self.mu.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

impl Default for UdaConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Segmentation-side weight module, U-Net and discriminator in one store.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: UdaConfig,
    pub hybrid: Option<WeightModule>,
    pub unet: UNet,
    pub disc: Discriminator,
}

impl SegModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &UdaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let hybrid = if cfg.use_hfi {
            Some(WeightModule::new(store, "hybrid", &cfg.hybrid, rng)?)
        } else {
            None
        };
        let unet = UNet::new(store, "unet", 1, cfg.seg.base_width, rng)?;
        let disc = Discriminator::new(store, "disc", &cfg.seg, rng)?;
        Ok(Self {
            cfg: *cfg,
            hybrid,
            unet,
            disc,
        })
    }

    /// U-Net input in `[0, 1]` units.
    fn network_input<T: Scalar>(&self, s: &mut Session<'_, T>, batch: &StackBatch) -> Result<Var> {
        match &self.hybrid {
            Some(m) => {
                let (fh, _) = m.hybrid(s, batch, self.cfg.hybrid.beta)?;
                Ok(s.scale(fh, T::from_f64(1.0 / 255.0)))
            }
            None => {
                let data = batch.base.iter().map(|v| T::from_f64(v / 255.0)).collect();
                Ok(s.input(data, &[batch.batch, 1, batch.height, batch.width])?)
            }
        }
    }

    pub fn segment<T: Scalar>(&self, s: &mut Session<'_, T>, batch: &StackBatch) -> Result<UNetOutput> {
        let x = self.network_input(s, batch)?;
        self.unet.forward(s, x)
    }

    /// Membrane probabilities for one image, evaluation mode.
    pub fn predict<T: Scalar>(&self, store: &mut ParamStore<T>, stack: &FeatureStack) -> Result<Vec<f64>> {
        let batch = StackBatch::new(&[stack])?;
        let mut s = Session::new(store, Mode::Eval);
        let out = self.segment(&mut s, &batch)?;
        let p = s.sigmoid(out.logits);
        Ok(s.value(p).iter().map(|&v| v.to_f64()).collect())
    }

    pub fn predict_mask<T: Scalar>(&self, store: &mut ParamStore<T>, stack: &FeatureStack) -> Result<Mask> {
        let (w, h) = stack.base.dims();
        Mask::from_probs(w, h, &self.predict(store, stack)?)
    }
}

/// Labeled source images as feature stacks.
#[derive(Debug, Clone)]
pub struct SourceSet {
    pub ids: Vec<String>,
    pub stacks: Vec<FeatureStack>,
    pub masks: Vec<Mask>,
}

impl SourceSet {
    /// `prepare` maps each image to the one actually segmented (e.g. its SR output).
    pub fn from_split(
        split: &LabeledSplit,
        vp: &VesselnessParams,
        mut prepare: impl FnMut(&Image) -> Result<Image>,
    ) -> Result<Self> {
        let mut stacks = Vec::with_capacity(split.len());
        let mut masks = Vec::with_capacity(split.len());
        for s in split.samples() {
            let img = prepare(s.image())?;
            if img.dims() != s.label().dims() {
                return Err(invalid(format!(
                    "prepared image {:?} does not match its label {:?}",
                    img.dims(),
                    s.label().dims()
                )));
            }
            stacks.push(extract_stack(&img, vp)?);
            masks.push(Mask::from_label(s.label()));
        }
        Ok(Self {
            ids: split.ids().to_vec(),
            stacks,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }
}

/// Unlabeled target images as feature stacks.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub ids: Vec<String>,
    pub stacks: Vec<FeatureStack>,
}

impl TargetSet {
    pub fn from_split(
        split: &UnlabeledSplit,
        vp: &VesselnessParams,
        mut prepare: impl FnMut(&Image) -> Result<Image>,
    ) -> Result<Self> {
        let stacks = split
            .images()
            .iter()
            .map(|img| extract_stack(&prepare(img)?, vp))
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: split.ids().to_vec(),
            stacks,
        })
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }
}

/// Epoch-wise shuffled index stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    /// Identity or one of the five exact augmentations.
    pub fn next_augmentation(&mut self) -> Option<Augmentation> {
        let k = self.rng.random_range(0..=Augmentation::ALL.len());
        Augmentation::ALL.get(k).copied()
    }
}

pub(crate) const STREAM_SOURCE: u64 = 1;
pub(crate) const STREAM_TARGET: u64 = 2;

fn transform_stack(st: &FeatureStack, op: Option<Augmentation>) -> Result<FeatureStack> {
    match op {
        None => Ok(st.clone()),
        Some(op) => Ok(FeatureStack {
            base: transform(&st.base, op)?,
            features: st.features.iter().map(|f| transform(f, op)).collect::<Result<_>>()?,
        }),
    }
}

fn transform_mask(m: &Mask, op: Option<Augmentation>) -> Result<Mask> {
    match op {
        None => Ok(m.clone()),
        Some(op) => Ok(Mask::from_label(&transform(&m.to_image(), op)?)),
    }
}

fn draw(sampler: &mut Sampler, augment: bool) -> (usize, Option<Augmentation>) {
    let i = sampler.next_index();
    let op = if augment { sampler.next_augmentation() } else { None };
    (i, op)
}

/// Runs `cfg.steps` optimization steps. With every `mu` zero (or no target
/// set) the target branch and discriminator are skipped entirely, which is
/// plain supervised training on the source set.
pub fn uda_train<T: Scalar>(
    model: &SegModel,
    store: &mut ParamStore<T>,
    source: &SourceSet,
    target: Option<&TargetSet>,
    mut on_step: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    let cfg = &model.cfg;
    cfg.validate()?;
    if source.is_empty() {
        return Err(invalid("empty source set"));
    }
    let adversarial = !cfg.mu.is_zero() && target.is_some_and(|t| !t.is_empty());
    let mut src_sampler = Sampler::new(source.len(), cfg.seed, STREAM_SOURCE);
    let mut tgt_sampler = Sampler::new(target.map_or(0, |t| t.len()), cfg.seed, STREAM_TARGET);
    let mut adam = Adam::new(cfg.optim)?;
    let mut reports = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut src_stacks = Vec::with_capacity(cfg.batch_size);
        let mut seg_target = Vec::new();
        for _ in 0..cfg.batch_size {
            let (i, op) = draw(&mut src_sampler, cfg.augment);
            src_stacks.push(transform_stack(&source.stacks[i], op)?);
            let m = transform_mask(&source.masks[i], op)?;
            seg_target.extend(m.data.iter().map(|&b| T::from_f64(if b { 1.0 } else { 0.0 })));
        }
        let src_batch = StackBatch::new(&src_stacks.iter().collect::<Vec<_>>())?;

        let mut s = Session::new(store, Mode::Train);
        let out_s = model.segment(&mut s, &src_batch)?;
        let probs = s.sigmoid(out_s.logits);
        let seg = s.bce(probs, &seg_target)?;
        let mut comps = LossComponents {
            seg: s.scalar(seg).to_f64(),
            ..Default::default()
        };

        let total = if adversarial {
            let tset = target.expect("adversarial implies a target set");
            let tgt_stacks = (0..cfg.batch_size)
                .map(|_| {
                    let (i, op) = draw(&mut tgt_sampler, cfg.augment);
                    transform_stack(&tset.stacks[i], op)
                })
                .collect::<Result<Vec<_>>>()?;
            let tgt_batch = StackBatch::new(&tgt_stacks.iter().collect::<Vec<_>>())?;
            let out_t = model.segment(&mut s, &tgt_batch)?;
            let feats = s.concat(&[out_s.bottleneck, out_t.bottleneck], 0)?;
            let d = model.disc.forward(&mut s, feats)?;
            let (ls, lt) = domain_losses(&mut s, &d.probs, src_batch.batch, tgt_batch.batch)?;
            for (k, (&a, &b)) in ls.iter().zip(&lt).enumerate() {
                comps.source[k] = s.scalar(a).to_f64();
                comps.target[k] = s.scalar(b).to_f64();
            }
            compose_loss_graph(&mut s, seg, &ls, &lt, &cfg.mu)?
        } else {
            seg
        };

        let report = compose_losses(&comps, &cfg.mu, step)?;
        let grads = s.param_grads(total)?;
        drop(s);
        ensure_finite_grads(store, &grads, step)?;
        adam.step(store, &grads)?;
        on_step(&report)?;
        reports.push(report);
    }
    Ok(reports)
}
