//! Overlap and boundary-distance scores for binary membrane masks.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::imgio::{Image, LabeledSplit, MEMBRANE};

/// Binary mask, `true` marking membrane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!("{} mask values for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Membrane where the label is 0.
    pub fn from_label(label: &Image) -> Self {
        let label = label.to_range(crate::imgio::ValueRange::Byte);
        Self {
            width: label.width(),
            height: label.height(),
            data: label.data().iter().map(|&v| v == MEMBRANE).collect(),
        }
    }

    /// Membrane where the probability is at least 0.5.
    pub fn from_probs(width: usize, height: usize, probs: &[f64]) -> Result<Self> {
        Self::new(width, height, probs.iter().map(|&p| p >= 0.5).collect())
    }

    /// Label-style rendering: membrane 0, background 255.
    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&m| if m { 0.0 } else { 255.0 }).collect();
        Image::new(self.width, self.height, data, crate::imgio::ValueRange::Byte).expect("binary values")
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(invalid(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// `2|P & G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// (`f64::INFINITY` when the mask is empty). Exact: all arithmetic on
/// squared distances stays integral.
pub fn squared_distance_transform(mask: &Mask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    // column pass: vertical distance to the nearest foreground pixel
    let mut col = vec![f64::INFINITY; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask.data[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = (y - l) as f64;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask.data[y * w + x] {
                next = Some(y);
            }
            if let Some(n) = next {
                let d = (n - y) as f64;
                if d < col[y * w + x] {
                    col[y * w + x] = d;
                }
            }
        }
    }
    // row pass: lower envelope of parabolas (x - q)^2 + col(q)^2
    let mut out = vec![f64::INFINITY; w * h];
    let mut v = vec![0usize; w];
    let mut z = vec![0.0f64; w + 1];
    for y in 0..h {
        let f = |q: usize| {
            let c = col[y * w + q];
            c * c
        };
        let mut k: Option<usize> = None;
        for q in (0..w).filter(|&q| col[y * w + q].is_finite()) {
            match k {
                None => {
                    k = Some(0);
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                }
                Some(mut kk) => {
                    let qf = q as f64;
                    // z[0] is -inf, so the scan always stops at kk >= 0
                    let s = loop {
                        let p = v[kk] as f64;
                        let s = ((f(q) + qf * qf) - (f(v[kk]) + p * p)) / (2.0 * qf - 2.0 * p);
                        if s <= z[kk] {
                            kk -= 1;
                        } else {
                            break s;
                        }
                    };
                    kk += 1;
                    v[kk] = q;
                    z[kk] = s;
                    z[kk + 1] = f64::INFINITY;
                    k = Some(kk);
                }
            }
        }
        if k.is_none() {
            continue;
        }
        let mut kk = 0;
        for q in 0..w {
            while z[kk + 1] < q as f64 {
                kk += 1;
            }
            let dx = q as f64 - v[kk] as f64;
            out[y * w + q] = dx * dx + f(v[kk]);
        }
    }
    out
}

/// Linear-interpolation percentile of an ascending slice, `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn directed_hd95(from: &Mask, to_sq_dist: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .data
        .iter()
        .zip(to_sq_dist)
        .filter(|(&m, _)| m)
        .map(|(_, &s)| s.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 95.0)
}

/// Symmetric 95th-percentile Hausdorff distance in pixels; infinite when
/// either mask is empty.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Ok(f64::INFINITY);
    }
    let to_gt = squared_distance_transform(gt);
    let to_pred = squared_distance_transform(pred);
    Ok(directed_hd95(pred, &to_gt).max(directed_hd95(gt, &to_pred)))
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: String,
    pub dice: f64,
    /// `null` in JSON when infinite.
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_infinity")]
    pub hd95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<EvalResult>,
    pub mean_dice: f64,
    /// Mean over images with a finite distance; `None` if there are none.
    pub mean_hd95: Option<f64>,
}

impl EvalReport {
    pub fn from_results(per_image: Vec<EvalResult>) -> Self {
        let n = per_image.len();
        let mean_dice = if n == 0 {
            0.0
        } else {
            per_image.iter().map(|r| r.dice).sum::<f64>() / n as f64
        };
        let finite: Vec<f64> = per_image.iter().map(|r| r.hd95).filter(|h| h.is_finite()).collect();
        let mean_hd95 = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        Self {
            per_image,
            mean_dice,
            mean_hd95,
        }
    }

    pub fn infinite_count(&self) -> usize {
        self.per_image.iter().filter(|r| !r.hd95.is_finite()).count()
    }
}

pub fn evaluate_masks(ids: &[String], preds: &[Mask], gts: &[Mask]) -> Result<EvalReport> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(invalid(format!(
            "{} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let per_image = ids
        .iter()
        .zip(preds.iter().zip(gts))
        .map(|(id, (p, g))| {
            Ok(EvalResult {
                id: id.clone(),
                dice: dice(p, g)?,
                hd95: hd95(p, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_results(per_image))
}

/// Scores a predictor against every labeled sample of a split, in order.
pub fn evaluate_split(split: &LabeledSplit, mut predict: impl FnMut(&Image) -> Result<Mask>) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(split.len());
    let mut gts = Vec::with_capacity(split.len());
    for s in split.samples() {
        preds.push(predict(s.image())?);
        gts.push(Mask::from_label(s.label()));
    }
    evaluate_masks(split.ids(), &preds, &gts)
}
