//! Run configuration and the on-disk stages: synth, SR training and
//! application, adaptation training and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tubuda_tensor::{checkpoint, Mode, ParamStore, Scalar, Session};

use crate::error::{Error, Result};
use crate::filters::{extract_stack, FeatureKind, VesselnessParams};
use crate::hybrid::{Preset, StackBatch};
use crate::imgio::{
    load_image, resize_nearest, save_image, Domain, Image, Manifest, ManifestEntry, Role, ValueRange,
};
use crate::metrics::{evaluate_masks, EvalReport, Mask};
use crate::srnet::{sr_apply, sr_train, SrConfig, SrExample, SrModel, SrTrainConfig};
use crate::synthbench::{Benchmark, SynthConfig};
use crate::train::LossReport;
use crate::uda::{uda_train, SegModel, SourceSet, TargetSet, UdaConfig};

/// Every knob of a run. Serialized next to each stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub synth: SynthConfig,
    pub vesselness: VesselnessParams,
    pub sr: SrConfig,
    pub sr_train: SrTrainConfig,
    /// Segment SR outputs instead of the original images.
    pub use_hrg: bool,
    pub uda: UdaConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut sr = SrConfig::preset(p);
        if p == Preset::Desk {
            sr.scale_factor = 1;
        }
        let mut uda = UdaConfig::preset(p);
        uda.hybrid = crate::hybrid::HybridConfig {
            width: p,
            ..Default::default()
        };
        Self {
            preset: p,
            seed: 0,
            synth: SynthConfig::default(),
            vesselness: VesselnessParams::default(),
            sr,
            sr_train: SrTrainConfig::default(),
            use_hrg: true,
            uda,
        }
        .with_seed(0)
    }

    /// Sets the run seed and every stage seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.sr_train.seed = seed;
        self.uda.seed = seed;
        self
    }

    /// Deep-merges `overrides` into `self`; unknown keys are rejected.
    pub fn merged(&self, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides, "")?;
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                other => other,
            })
        };
        wrap(self.synth.validate())?;
        wrap(self.vesselness.validate())?;
        wrap(self.sr.validate())?;
        wrap(self.uda.validate())?;
        wrap(self.sr_train.optim.validate())?;
        if self.sr_train.batch_size == 0 {
            return Err(Error::Config("sr_train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn merge(base: &mut Value, over: &Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stage_dir(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(cfg, &dir.join("config.json"))
}

struct JsonLines {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file: std::io::BufWriter::new(file),
        })
    }

    fn push<S: Serialize>(&mut self, v: &S) -> Result<()> {
        let line = serde_json::to_string(v)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn load_params<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(checkpoint::load_into(store, path)?)
}

/// Generates the benchmark into `out`.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    stage_dir(cfg, out)?;
    Benchmark::generate(&cfg.synth)?.write(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SrLossLine {
    pub step: usize,
    pub l1: f64,
}

pub fn new_sr_model(cfg: &RunConfig) -> Result<(SrModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = SrModel::new(&mut store, &cfg.sr, &cfg.uda.hybrid, &mut rng)?;
    Ok((model, store))
}

pub fn load_sr_model(cfg: &RunConfig, ckpt: &Path) -> Result<(SrModel, ParamStore<f32>)> {
    let (model, mut store) = new_sr_model(cfg)?;
    load_params(&mut store, ckpt)?;
    Ok((model, store))
}

/// Trains the SR stage on source training images; writes `sr.ckpt` and
/// `sr_losses.jsonl` under `out`.
pub fn run_sr_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = Manifest::load(manifest)?;
    let src = m.labeled(Domain::Source, Role::Train)?;
    stage_dir(cfg, out)?;
    let examples = src
        .samples()
        .iter()
        .map(|s| SrExample::from_sample(s, &cfg.sr, &cfg.vesselness))
        .collect::<Result<Vec<_>>>()?;
    let (model, mut store) = new_sr_model(cfg)?;
    let mut log = JsonLines::create(out.join("sr_losses.jsonl"))?;
    let losses = sr_train(&model, &mut store, &examples, &cfg.sr_train, |step, l1| {
        log.push(&SrLossLine { step, l1 })
    })?;
    log.finish()?;
    checkpoint::save(&store, &out.join("sr.ckpt"))?;
    Ok(losses)
}

/// Applies a trained SR stage to every manifest image. Writes
/// `images/<id>.hrg.png`, resized labels and a new manifest under `out`.
/// Target training labels are dropped, not read.
pub fn run_sr_apply(cfg: &RunConfig, manifest: &Path, ckpt: &Path, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let m = Manifest::load(manifest)?;
    let (model, mut store) = load_sr_model(cfg, ckpt)?;
    stage_dir(cfg, out)?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("labels"))?;
    let r = cfg.sr.scale_factor;
    let mut entries = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let id = e.id();
        let img = load_image(&m.resolve(&e.path))?;
        let hrg = sr_apply(&img, &cfg.vesselness, &model, &mut store)?;
        let path = format!("images/{id}.hrg.png");
        save_image(&hrg, &out.join(&path))?;
        let hidden = e.domain == Domain::Target && e.role == Role::Train;
        let label_path = match (&e.label_path, hidden) {
            (Some(lp), false) => {
                let label = load_image(&m.resolve(lp))?;
                let label = resize_nearest(&label, label.width() * r, label.height() * r)?;
                let rel = format!("labels/{id}.png");
                save_image(&label, &out.join(&rel))?;
                Some(rel)
            }
            _ => None,
        };
        entries.push(ManifestEntry {
            path,
            label_path,
            domain: e.domain,
            role: e.role,
        });
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

pub fn new_seg_model(cfg: &RunConfig) -> Result<(SegModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = SegModel::new(&mut store, &cfg.uda, &mut rng)?;
    Ok((model, store))
}

pub fn load_seg_model(cfg: &RunConfig, ckpt: &Path) -> Result<(SegModel, ParamStore<f32>)> {
    let (model, mut store) = new_seg_model(cfg)?;
    load_params(&mut store, ckpt)?;
    Ok((model, store))
}

fn keep(img: &Image) -> Result<Image> {
    Ok(img.clone())
}

/// Adversarial training on labeled source and unlabeled target training
/// images; writes `seg.ckpt` and `losses.jsonl` under `out`.
pub fn run_uda_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let m = Manifest::load(manifest)?;
    let source = SourceSet::from_split(&m.labeled(Domain::Source, Role::Train)?, &cfg.vesselness, keep)?;
    let target = TargetSet::from_split(&m.unlabeled(Domain::Target, Role::Train)?, &cfg.vesselness, keep)?;
    stage_dir(cfg, out)?;
    let (model, mut store) = new_seg_model(cfg)?;
    let mut log = JsonLines::create(out.join("losses.jsonl"))?;
    let reports = uda_train(&model, &mut store, &source, Some(&target), |r| log.push(r))?;
    log.finish()?;
    checkpoint::save(&store, &out.join("seg.ckpt"))?;
    Ok(reports)
}

/// Test-set reports for both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub source: EvalReport,
    pub target: EvalReport,
}

/// Segments every test image; writes `pred/<id>.png`, `report_source.json`
/// and `report_target.json` under `out`.
pub fn run_evaluate(cfg: &RunConfig, manifest: &Path, ckpt: &Path, out: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let m = Manifest::load(manifest)?;
    let (model, mut store) = load_seg_model(cfg, ckpt)?;
    stage_dir(cfg, out)?;
    create_dir(&out.join("pred"))?;
    let mut reports = Vec::with_capacity(2);
    for domain in [Domain::Source, Domain::Target] {
        let split = m.labeled(domain, Role::Test)?;
        let mut preds = Vec::with_capacity(split.len());
        for (id, s) in split.ids().iter().zip(split.samples()) {
            let p = model.predict_mask(&mut store, &extract_stack(s.image(), &cfg.vesselness)?)?;
            save_image(&p.to_image(), &out.join("pred").join(format!("{id}.png")))?;
            preds.push(p);
        }
        let gts: Vec<Mask> = split.samples().iter().map(|s| Mask::from_label(s.label())).collect();
        reports.push(evaluate_masks(split.ids(), &preds, &gts)?);
    }
    let target = reports.pop().expect("two reports");
    let source = reports.pop().expect("two reports");
    write_json(&source, &out.join("report_source.json"))?;
    write_json(&target, &out.join("report_target.json"))?;
    Ok(Evaluation { source, target })
}

/// Compares same-named PNG masks in two directories.
pub fn evaluate_dirs(pred_dir: &Path, label_dir: &Path) -> Result<EvalReport> {
    let mut names: Vec<String> = std::fs::read_dir(label_dir)
        .map_err(|e| Error::io(label_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let mut ids = Vec::with_capacity(names.len());
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for n in &names {
        gts.push(Mask::from_label(&load_image(&label_dir.join(n))?));
        preds.push(Mask::from_label(&load_image(&pred_dir.join(n))?));
        ids.push(n.trim_end_matches(".png").to_string());
    }
    evaluate_masks(&ids, &preds, &gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub features: Vec<String>,
    pub alpha: Vec<f64>,
}

/// Writes the four normalized feature maps, the hybrid feature image and
/// the learned weights for one image. Without a checkpoint the weight
/// module keeps its seeded initialization.
pub fn run_features(cfg: &RunConfig, image: &Path, ckpt: Option<&Path>, out: &Path) -> Result<FeatureWeights> {
    cfg.validate()?;
    let img = load_image(image)?;
    let mut cfg = cfg.clone();
    cfg.uda.use_hfi = true;
    let (model, mut store) = match ckpt {
        Some(p) => load_seg_model(&cfg, p)?,
        None => new_seg_model(&cfg)?,
    };
    stage_dir(&cfg, out)?;
    let stack = extract_stack(&img, &cfg.vesselness)?;
    for (kind, f) in FeatureKind::ORDER.iter().zip(&stack.features) {
        save_image(f, &out.join(format!("{}.png", kind.name())))?;
    }
    let batch = StackBatch::new(&[&stack])?;
    let wm = model.hybrid.as_ref().expect("hybrid module enabled above");
    let mut s = Session::new(&mut store, Mode::Eval);
    let (fh, alpha) = wm.hybrid(&mut s, &batch, cfg.uda.hybrid.beta)?;
    let (w, h) = img.dims();
    let hfi = s.value(fh).iter().map(|&v| v.to_f64()).collect();
    save_image(&Image::clamped(w, h, hfi, ValueRange::Byte)?, &out.join("hybrid.png"))?;
    let weights = FeatureWeights {
        features: FeatureKind::ORDER.iter().map(|k| k.name().to_string()).collect(),
        alpha: s.value(alpha).iter().map(|&v| v.to_f64()).collect(),
    };
    drop(s);
    write_json(&weights, &out.join("alpha.json"))?;
    Ok(weights)
}

/// Outputs of a full run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub sr_losses: Vec<f64>,
    pub uda_losses: Vec<LossReport>,
    pub evaluation: Evaluation,
}

/// synth, then (with `use_hrg`) sr-train and sr-apply, then uda-train and
/// evaluate, each in its own subdirectory of `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineResult> {
    cfg.validate()?;
    stage_dir(cfg, out)?;
    let data = out.join("data");
    run_synth(cfg, &data)?;
    let mut manifest = data.join("manifest.json");
    let mut sr_losses = Vec::new();
    if cfg.use_hrg {
        sr_losses = run_sr_train(cfg, &manifest, &out.join("sr"))?;
        run_sr_apply(cfg, &manifest, &out.join("sr").join("sr.ckpt"), &out.join("hrg"))?;
        manifest = out.join("hrg").join("manifest.json");
    }
    let uda_losses = run_uda_train(cfg, &manifest, &out.join("uda"))?;
    let evaluation = run_evaluate(cfg, &manifest, &out.join("uda").join("seg.ckpt"), &out.join("eval"))?;
    Ok(PipelineResult {
        sr_losses,
        uda_losses,
        evaluation,
    })
}
