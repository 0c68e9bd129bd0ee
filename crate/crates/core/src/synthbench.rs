//! Synthetic two-domain membrane datasets built from random Voronoi partitions.
//!
//! Domain A is the labeled source. Domain B renders the same kind of scene,
//! then loses resolution, gets extra blur and a brighter intensity offset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filters::gaussian_blur;
use crate::imgio::{
    downsample_then_upsample, save_image, Domain, Image, LabeledSample, LabeledSplit, Manifest, ManifestEntry, Role,
    UnlabeledSplit, ValueRange, BACKGROUND, MEMBRANE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceStyle {
    pub blur: f64,
    pub noise: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStyle {
    pub extra_blur: f64,
    pub degrade_factor: usize,
    pub shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub source_test: usize,
    pub target_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub cells: usize,
    /// Membrane width in pixels.
    pub thickness: f64,
    /// Dark round organelles per image; not part of the label.
    pub blobs: usize,
    pub source: SourceStyle,
    pub target: TargetStyle,
    pub splits: SplitSizes,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            cells: 8,
            thickness: 2.0,
            blobs: 4,
            source: SourceStyle {
                blur: 0.7,
                noise: 8.0,
                contrast: 1.0,
            },
            target: TargetStyle {
                extra_blur: 1.0,
                degrade_factor: 2,
                shift: 20.0,
            },
            splits: SplitSizes {
                source_train: 40,
                target_train: 40,
                source_test: 10,
                target_test: 10,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(invalid(format!("image size {} must be a positive multiple of 16", self.size)));
        }
        if !(self.thickness >= 1.0) {
            return Err(invalid(format!("membrane thickness {} must be at least 1", self.thickness)));
        }
        if self.cells < 2 {
            return Err(invalid("at least two Voronoi cells are needed"));
        }
        let s = &self.source;
        if !(s.blur >= 0.0 && s.noise >= 0.0 && s.contrast > 0.0) {
            return Err(invalid("source blur and noise must be non-negative, contrast positive"));
        }
        let t = &self.target;
        if !(t.extra_blur >= 0.0) || !t.shift.is_finite() {
            return Err(invalid("target extra blur must be non-negative and shift finite"));
        }
        if t.degrade_factor < 2 || self.size % t.degrade_factor != 0 {
            return Err(invalid(format!(
                "degradation factor {} must be at least 2 and divide {}",
                t.degrade_factor, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthDomain {
    A,
    B,
}

impl SynthDomain {
    pub fn domain(self) -> Domain {
        match self {
            SynthDomain::A => Domain::Source,
            SynthDomain::B => Domain::Target,
        }
    }
}

const MEMBRANE_LEVEL: f64 = 45.0;
const CELL_LEVELS: (f64, f64) = (140.0, 215.0);
const BLOB_LEVEL: f64 = 80.0;
const BLOB_RADII: (f64, f64) = (1.5, 3.0);

struct Scene {
    label: Vec<bool>,
    intensity: Vec<f64>,
}

fn draw_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let n = cfg.size;
    let span = n as f64;
    let seeds: Vec<(f64, f64)> = (0..cfg.cells)
        .map(|_| (rng.random_range(0.0..span), rng.random_range(0.0..span)))
        .collect();
    let levels: Vec<f64> = (0..cfg.cells)
        .map(|_| rng.random_range(CELL_LEVELS.0..CELL_LEVELS.1))
        .collect();
    let half = 0.5 * cfg.thickness;
    let mut label = vec![false; n * n];
    let mut intensity = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d2: Vec<f64> = seeds.iter().map(|s| (p.0 - s.0).powi(2) + (p.1 - s.1).powi(2)).collect();
            let own = (0..seeds.len()).min_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap_or(0);
            // distance to the nearest bisector with any other seed
            let edge = (0..seeds.len())
                .filter(|&j| j != own)
                .map(|j| {
                    let sep = ((seeds[j].0 - seeds[own].0).powi(2) + (seeds[j].1 - seeds[own].1).powi(2)).sqrt();
                    (d2[j] - d2[own]) / (2.0 * sep.max(1e-9))
                })
                .fold(f64::INFINITY, f64::min);
            let i = y * n + x;
            label[i] = edge < half;
            intensity[i] = if label[i] { MEMBRANE_LEVEL } else { levels[own] };
        }
    }
    for _ in 0..cfg.blobs {
        let (cx, cy) = (rng.random_range(0.0..span), rng.random_range(0.0..span));
        let r = rng.random_range(BLOB_RADII.0..BLOB_RADII.1);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= r && !label[i] {
                    intensity[i] = BLOB_LEVEL;
                }
            }
        }
    }
    Scene { label, intensity }
}

fn quantize(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// One image of `domain` with geometry and noise fixed by `key`; the same key
/// gives the same scene in both domains.
pub fn generate_image(cfg: &SynthConfig, domain: SynthDomain, key: u64) -> Result<LabeledSample> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(key);
    let scene = draw_scene(cfg, &mut rng);
    let s = &cfg.source;
    let contrasted: Vec<f64> = scene.intensity.iter().map(|v| 128.0 + s.contrast * (v - 128.0)).collect();
    let clean = Image::clamped(n, n, contrasted, ValueRange::Byte)?;
    let blurred = gaussian_blur(&clean, s.blur)?;
    let noise = Normal::new(0.0, s.noise).map_err(|e| invalid(e.to_string()))?;
    let noisy: Vec<f64> = blurred.data().iter().map(|v| v + noise.sample(&mut rng)).collect();
    let source = Image::clamped(n, n, noisy, ValueRange::Byte)?;
    let image = match domain {
        SynthDomain::A => source,
        SynthDomain::B => {
            let t = &cfg.target;
            let low = downsample_then_upsample(&source, t.degrade_factor)?;
            let soft = gaussian_blur(&low, t.extra_blur)?;
            Image::clamped(n, n, soft.data().iter().map(|v| v + t.shift).collect(), ValueRange::Byte)?
        }
    };
    let image = Image::new(n, n, image.data().iter().map(|&v| quantize(v)).collect(), ValueRange::Byte)?;
    let label = Image::new(
        n,
        n,
        scene.label.iter().map(|&m| if m { MEMBRANE } else { BACKGROUND }).collect(),
        ValueRange::Byte,
    )?;
    LabeledSample::new(image, label)
}

fn slot(domain: SynthDomain, role: Role) -> u64 {
    match (domain, role) {
        (SynthDomain::A, Role::Train) => 0,
        (SynthDomain::B, Role::Train) => 1,
        (SynthDomain::A, Role::Test) => 2,
        (SynthDomain::B, Role::Test) => 3,
    }
}

fn split_name(domain: SynthDomain, role: Role) -> &'static str {
    match (domain, role) {
        (SynthDomain::A, Role::Train) => "source_train",
        (SynthDomain::B, Role::Train) => "target_train",
        (SynthDomain::A, Role::Test) => "source_test",
        (SynthDomain::B, Role::Test) => "target_test",
    }
}

/// Generated images of one split, labels included regardless of domain.
#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub domain: SynthDomain,
    pub role: Role,
    pub ids: Vec<String>,
    pub samples: Vec<LabeledSample>,
}

impl SynthSplit {
    /// Fails for target training data, whose labels stay hidden.
    pub fn labeled(&self) -> Result<LabeledSplit> {
        LabeledSplit::new(self.domain.domain(), self.role, self.ids.clone(), self.samples.clone())
    }

    pub fn unlabeled(&self) -> Result<UnlabeledSplit> {
        UnlabeledSplit::new(
            self.domain.domain(),
            self.role,
            self.ids.clone(),
            self.samples.iter().map(|s| s.image().clone()).collect(),
        )
    }
}

pub fn generate_domain(cfg: &SynthConfig, domain: SynthDomain, role: Role, count: usize) -> Result<SynthSplit> {
    cfg.validate()?;
    let base = slot(domain, role) << 32;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate_image(cfg, domain, base + i as u64))
        .collect::<Result<Vec<_>>>()?;
    let name = split_name(domain, role);
    Ok(SynthSplit {
        domain,
        role,
        ids: (0..count).map(|i| format!("{name}_{i:03}")).collect(),
        samples,
    })
}

/// All four splits of the default benchmark layout.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source_train: SynthSplit,
    pub target_train: SynthSplit,
    pub source_test: SynthSplit,
    pub target_test: SynthSplit,
}

impl Benchmark {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let z = &cfg.splits;
        Ok(Self {
            source_train: generate_domain(cfg, SynthDomain::A, Role::Train, z.source_train)?,
            target_train: generate_domain(cfg, SynthDomain::B, Role::Train, z.target_train)?,
            source_test: generate_domain(cfg, SynthDomain::A, Role::Test, z.source_test)?,
            target_test: generate_domain(cfg, SynthDomain::B, Role::Test, z.target_test)?,
        })
    }

    fn splits(&self) -> [&SynthSplit; 4] {
        [&self.source_train, &self.target_train, &self.source_test, &self.target_test]
    }

    /// Writes `images/`, `labels/` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::new();
        for split in self.splits() {
            for (id, s) in split.ids.iter().zip(&split.samples) {
                let path = format!("images/{id}.png");
                let label_path = format!("labels/{id}.png");
                save_image(s.image(), &dir.join(&path))?;
                save_image(s.label(), &dir.join(&label_path))?;
                entries.push(ManifestEntry {
                    path,
                    label_path: Some(label_path),
                    domain: split.domain.domain(),
                    role: split.role,
                });
            }
        }
        let manifest = Manifest {
            root: dir.to_path_buf(),
            entries,
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
