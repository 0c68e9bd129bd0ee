//! Grayscale images, resampling, label-safe augmentation and dataset manifests.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Pixel value reserved for membrane in label masks.
pub const MEMBRANE: f64 = 0.0;
/// Pixel value reserved for background in label masks.
pub const BACKGROUND: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 255]`
    Byte,
    /// `[0, 1]`
    Unit,
}

impl ValueRange {
    pub fn max(self) -> f64 {
        match self {
            ValueRange::Byte => 255.0,
            ValueRange::Unit => 1.0,
        }
    }
}

/// Row-major grayscale image whose values all lie in `[0, range.max()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(invalid(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        let hi = range.max();
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=hi).contains(*v)) {
            return Err(invalid(format!("value {v} at index {i} outside [0, {hi}]")));
        }
        Ok(Self {
            width,
            height,
            data,
            range,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64, range: ValueRange) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], range)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data, range)
    }

    /// Builds an image by clamping every value into the range.
    pub fn clamped(width: usize, height: usize, mut data: Vec<f64>, range: ValueRange) -> Result<Self> {
        let hi = range.max();
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        }
        Self::new(width, height, data, range)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Rescales into another range (`Byte` <-> `Unit`).
    pub fn to_range(&self, range: ValueRange) -> Image {
        if range == self.range {
            return self.clone();
        }
        let k = range.max() / self.range.max();
        let data = self.data.iter().map(|v| (v * k).clamp(0.0, range.max())).collect();
        Image {
            width: self.width,
            height: self.height,
            data,
            range,
        }
    }

    /// Values quantized to bytes the way [`save_image`] writes them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = 255.0 / self.range.max();
        self.data.iter().map(|v| (v * k).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b)).collect(), ValueRange::Byte)
    }
}

/// An image with its binary membrane mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    image: Image,
    label: Image,
}

impl LabeledSample {
    pub fn new(image: Image, label: Image) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(invalid(format!(
                "image is {:?} but label is {:?}",
                image.dims(),
                label.dims()
            )));
        }
        let label = label.to_range(ValueRange::Byte);
        if let Some(v) = label.data().iter().find(|&&v| v != MEMBRANE && v != BACKGROUND) {
            return Err(invalid(format!("label value {v} is neither 0 nor 255")));
        }
        Ok(Self { image, label })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn label(&self) -> &Image {
        &self.label
    }

    /// Membrane indicator (1 for membrane, 0 for background).
    pub fn membrane_mask(&self) -> Vec<bool> {
        self.label.data().iter().map(|&v| v == MEMBRANE).collect()
    }

    pub fn into_parts(self) -> (Image, Image) {
        (self.image, self.label)
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_tiff(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("tif" | "tiff")
    )
}

/// Loads an 8-bit grayscale PNG or single-page grayscale TIFF.
pub fn load_image(path: &Path) -> Result<Image> {
    if is_tiff(path) {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = tiff::decoder::Decoder::new(BufReader::new(file)).map_err(|e| decode_err(path, e.to_string()))?;
        if dec.more_images() {
            return Err(decode_err(path, "unsupported page count: multi-page TIFF"));
        }
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| decode_err(path, e.to_string()))?;
    let color = img.color();
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Image::from_bytes(w as usize, h as usize, buf.as_raw())
        }
        _ if color.has_color() || color.has_alpha() => {
            Err(decode_err(path, format!("unsupported colorspace: {color:?}")))
        }
        _ => Err(decode_err(
            path,
            format!("unsupported bit depth: {} bits per sample", color_bits(color)),
        )),
    }
}

fn color_bits(c: ColorType) -> u16 {
    c.bits_per_pixel() / u16::from(c.channel_count())
}

/// Writes an 8-bit grayscale PNG (values rounded, clamped to the byte range).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let buf = GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_bytes())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| decode_err(path, e.to_string()))
}

/// Catmull-Rom cubic kernel (`a = -0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate along one axis.
fn cubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let i0 = s.floor();
            let t = s - i0;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let i = i0 as i64 + k as i64 - 1;
                idx[k] = i.clamp(0, src as i64 - 1) as usize;
                w[k] = cubic_kernel(t - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic resize with clamped borders; output clamped to the source range.
pub fn resize_cubic(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w < 4 || new_h < 4 {
        return Err(invalid(format!("cubic resize target {new_w}x{new_h} is below 4x4")));
    }
    let (w, h) = img.dims();
    let xt = cubic_taps(w, new_w);
    let yt = cubic_taps(h, new_h);
    let src = img.data();
    let mut rows = vec![0.0; new_w * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for (x, (idx, wt)) in xt.iter().enumerate() {
            rows[y * new_w + x] = (0..4).map(|k| wt[k] * line[idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; new_w * new_h];
    for (y, (idx, wt)) in yt.iter().enumerate() {
        for x in 0..new_w {
            out[y * new_w + x] = (0..4).map(|k| wt[k] * rows[idx[k] * new_w + x]).sum();
        }
    }
    Image::clamped(new_w, new_h, out, img.range())
}

/// Nearest-neighbour resize, the only resampling applied to label masks.
pub fn resize_nearest(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(invalid("nearest resize to an empty image"));
    }
    let (w, h) = img.dims();
    let pick = |d: usize, src: usize, dst: usize| (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    Image::from_fn(new_w, new_h, img.range(), |x, y| {
        img.get(pick(x, w, new_w), pick(y, h, new_h))
    })
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn block_average(img: &Image, factor: usize) -> Result<Image> {
    let (w, h) = img.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(invalid(format!("{w}x{h} is not divisible by {factor}")));
    }
    let n = (factor * factor) as f64;
    Image::clamped(
        w / factor,
        h / factor,
        (0..h / factor)
            .flat_map(|by| (0..w / factor).map(move |bx| (bx, by)))
            .map(|(bx, by)| {
                let mut s = 0.0;
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        s += img.get(x, y);
                    }
                }
                s / n
            })
            .collect(),
        img.range(),
    )
}

/// Block-average downsampling followed by cubic upsampling to the original size.
pub fn downsample_then_upsample(img: &Image, factor: usize) -> Result<Image> {
    if factor < 2 {
        return Err(invalid(format!("degradation factor must be at least 2, got {factor}")));
    }
    let small = block_average(img, factor)?;
    resize_cubic(&small, img.width(), img.height())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Augmentation {
    pub const ALL: [Augmentation; 5] = [
        Augmentation::Rot90,
        Augmentation::Rot180,
        Augmentation::Rot270,
        Augmentation::FlipH,
        Augmentation::FlipV,
    ];

    fn is_rotation(self) -> bool {
        matches!(self, Augmentation::Rot90 | Augmentation::Rot180 | Augmentation::Rot270)
    }
}

/// Applies a pixel permutation. `Rot90` sends `(x, y)` to `(h - 1 - y, x)`.
pub fn transform(img: &Image, op: Augmentation) -> Result<Image> {
    let (w, h) = img.dims();
    if op.is_rotation() && w != h {
        return Err(invalid(format!("rotation needs a square image, got {w}x{h}")));
    }
    // Source pixel for each destination pixel (all outputs keep w x h since rotations are square).
    let src = |x: usize, y: usize| match op {
        Augmentation::Rot90 => (y, h - 1 - x),
        Augmentation::Rot180 => (w - 1 - x, h - 1 - y),
        Augmentation::Rot270 => (w - 1 - y, x),
        Augmentation::FlipH => (w - 1 - x, y),
        Augmentation::FlipV => (x, h - 1 - y),
    };
    Image::from_fn(w, h, img.range(), |x, y| {
        let (sx, sy) = src(x, y);
        img.get(sx, sy)
    })
}

pub fn augment(sample: &LabeledSample, op: Augmentation) -> Result<LabeledSample> {
    LabeledSample::new(transform(&sample.image, op)?, transform(&sample.label, op)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

/// Labeled images. Cannot be built for target-domain training data.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    domain: Domain,
    role: Role,
    ids: Vec<String>,
    samples: Vec<LabeledSample>,
}

impl LabeledSplit {
    pub fn new(domain: Domain, role: Role, ids: Vec<String>, samples: Vec<LabeledSample>) -> Result<Self> {
        if domain == Domain::Target && role == Role::Train {
            return Err(Error::LabelAccess("target training labels are reserved for evaluation".into()));
        }
        if ids.len() != samples.len() {
            return Err(invalid(format!("{} ids for {} samples", ids.len(), samples.len())));
        }
        Ok(Self {
            domain,
            role,
            ids,
            samples,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn without_labels(&self) -> UnlabeledSplit {
        UnlabeledSplit {
            domain: self.domain,
            role: self.role,
            ids: self.ids.clone(),
            images: self.samples.iter().map(|s| s.image.clone()).collect(),
        }
    }
}

/// Images with no label access at all.
#[derive(Debug, Clone)]
pub struct UnlabeledSplit {
    domain: Domain,
    role: Role,
    ids: Vec<String>,
    images: Vec<Image>,
}

impl UnlabeledSplit {
    pub fn new(domain: Domain, role: Role, ids: Vec<String>, images: Vec<Image>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(invalid(format!("{} ids for {} images", ids.len(), images.len())));
        }
        Ok(Self {
            domain,
            role,
            ids,
            images,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    pub domain: Domain,
    pub role: Role,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }
}

/// Dataset listing; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = serde_json::from_str(&text)?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn select(&self, domain: Domain, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.domain == domain && e.role == role)
    }

    pub fn labeled(&self, domain: Domain, role: Role) -> Result<LabeledSplit> {
        if domain == Domain::Target && role == Role::Train {
            return Err(Error::LabelAccess("target training labels are reserved for evaluation".into()));
        }
        let mut ids = Vec::new();
        let mut samples = Vec::new();
        for e in self.select(domain, role) {
            let lp = e
                .label_path
                .as_ref()
                .ok_or_else(|| invalid(format!("{} has no label_path", e.path)))?;
            let sample = LabeledSample::new(load_image(&self.resolve(&e.path))?, load_image(&self.resolve(lp))?)?;
            ids.push(e.id());
            samples.push(sample);
        }
        LabeledSplit::new(domain, role, ids, samples)
    }

    /// Loads images only; label files are never opened.
    pub fn unlabeled(&self, domain: Domain, role: Role) -> Result<UnlabeledSplit> {
        let mut ids = Vec::new();
        let mut images = Vec::new();
        for e in self.select(domain, role) {
            images.push(load_image(&self.resolve(&e.path))?);
            ids.push(e.id());
        }
        UnlabeledSplit::new(domain, role, ids, images)
    }
}
