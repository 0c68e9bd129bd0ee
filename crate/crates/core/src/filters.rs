//! Hessian vesselness (Frangi, Jerman) and gradient-magnitude edge maps.
//!
//! Convolutions are written as sums over symmetric tap pairs, e.g.
//! `w[k] * (I[x+k] + I[x-k] - 2 I[x])`, so constant regions give exact zeros
//! and mirrored inputs give mirrored outputs bit for bit. Each 2-D response
//! averages the row-first and column-first orders of the separable passes,
//! which makes 90 degree rotations exact as well.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imgio::{Image, ValueRange};

/// Smallest usable Gaussian scale.
pub const MIN_SIGMA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Dark tubes on a bright background (positive `lambda2`).
    DarkOnBright,
    /// Bright tubes on a dark background (negative `lambda2`).
    BrightOnDark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselnessParams {
    pub scales: Vec<f64>,
    pub frangi_b: f64,
    /// `None` selects half of the largest structureness at each scale.
    pub frangi_c: Option<f64>,
    pub jerman_tau: f64,
    pub polarity: Polarity,
}

impl Default for VesselnessParams {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 4.0],
            frangi_b: 0.5,
            frangi_c: None,
            jerman_tau: 0.5,
            polarity: Polarity::DarkOnBright,
        }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(invalid("no vesselness scales"));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid(format!("scales {:?} are not strictly increasing", self.scales)));
        }
        if let Some(s) = self.scales.iter().find(|&&s| !(s > MIN_SIGMA) || !s.is_finite()) {
            return Err(invalid(format!("scale {s} is not above {MIN_SIGMA}")));
        }
        if !(self.frangi_b > 0.0) {
            return Err(invalid(format!("frangi_b = {} must be positive", self.frangi_b)));
        }
        if let Some(c) = self.frangi_c {
            if !(c > 0.0) {
                return Err(invalid(format!("frangi_c = {c} must be positive")));
            }
        }
        if !(self.jerman_tau > 0.0 && self.jerman_tau <= 1.0) {
            return Err(invalid(format!("jerman_tau = {} outside (0, 1]", self.jerman_tau)));
        }
        Ok(())
    }
}

/// One-sided Gaussian-family kernels of radius `ceil(4 sigma)`.
#[derive(Debug, Clone)]
struct Kernels {
    /// `g0 * I[x] + sum_k g[k] (I[x+k] + I[x-k])`; sums to one.
    g0: f64,
    g: Vec<f64>,
    /// `sum_k d1[k] (I[x+k] - I[x-k])`; exact on linear ramps.
    d1: Vec<f64>,
    /// `sum_k d2[k] (I[x+k] + I[x-k] - 2 I[x])`; exact on quadratics.
    d2: Vec<f64>,
}

impl Kernels {
    fn new(sigma: f64) -> Self {
        let r = (4.0 * sigma).ceil() as usize;
        let gauss = |k: f64| (-k * k / (2.0 * sigma * sigma)).exp();
        let total = 1.0 + 2.0 * (1..=r).map(|k| gauss(k as f64)).sum::<f64>();
        let g = (1..=r).map(|k| gauss(k as f64) / total).collect();

        let raw1: Vec<f64> = (1..=r).map(|k| k as f64 * gauss(k as f64)).collect();
        let m1: f64 = raw1.iter().enumerate().map(|(i, w)| 2.0 * (i + 1) as f64 * w).sum();
        let d1 = raw1.iter().map(|w| w / m1).collect();

        let raw2: Vec<f64> = (1..=r)
            .map(|k| {
                let k = k as f64;
                (k * k / (sigma * sigma) - 1.0) * gauss(k)
            })
            .collect();
        let m2: f64 = raw2.iter().enumerate().map(|(i, w)| ((i + 1) as f64).powi(2) * w).sum();
        let d2 = raw2.iter().map(|w| w / m2).collect();

        Self {
            g0: 1.0 / total,
            g,
            d1,
            d2,
        }
    }
}

#[derive(Clone, Copy)]
enum Tap {
    Smooth,
    First,
    Second,
}

/// Half-sample symmetric reflection.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Correlates one line of `len` samples read through `at`.
fn filter_line(len: usize, at: impl Fn(usize) -> f64, k: &Kernels, tap: Tap, out: &mut [f64]) {
    for (x, o) in out.iter_mut().enumerate().take(len) {
        let c = at(x);
        let pair = |j: usize| {
            let xi = x as isize;
            (at(reflect(xi + j as isize, len)), at(reflect(xi - j as isize, len)))
        };
        *o = match tap {
            Tap::Smooth => {
                let mut s = 0.0;
                for (j, w) in k.g.iter().enumerate() {
                    let (a, b) = pair(j + 1);
                    s += w * (a + b);
                }
                k.g0 * c + s
            }
            Tap::First => {
                let mut s = 0.0;
                for (j, w) in k.d1.iter().enumerate() {
                    let (a, b) = pair(j + 1);
                    s += w * (a - b);
                }
                s
            }
            Tap::Second => {
                let mut s = 0.0;
                for (j, w) in k.d2.iter().enumerate() {
                    let (a, b) = pair(j + 1);
                    s += w * ((a + b) - 2.0 * c);
                }
                s
            }
        };
    }
}

fn filter_rows(data: &[f64], w: usize, h: usize, k: &Kernels, tap: Tap) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        filter_line(w, |i| row[i], k, tap, &mut out[y * w..(y + 1) * w]);
    }
    out
}

fn filter_cols(data: &[f64], w: usize, h: usize, k: &Kernels, tap: Tap) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut col = vec![0.0; h];
    for x in 0..w {
        filter_line(h, |i| data[i * w + x], k, tap, &mut col);
        for y in 0..h {
            out[y * w + x] = col[y];
        }
    }
    out
}

/// Separable filter, averaged over both pass orders.
fn separable(data: &[f64], w: usize, h: usize, k: &Kernels, along_x: Tap, along_y: Tap) -> Vec<f64> {
    let a = filter_cols(&filter_rows(data, w, h, k, along_x), w, h, k, along_y);
    let b = filter_rows(&filter_cols(data, w, h, k, along_y), w, h, k, along_x);
    a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect()
}

/// Scale-normalized Hessian components per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianField {
    pub width: usize,
    pub height: usize,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

pub fn gaussian_hessian(img: &Image, sigma: f64) -> Result<HessianField> {
    if !(sigma > MIN_SIGMA) || !sigma.is_finite() {
        return Err(invalid(format!("sigma {sigma} is not above {MIN_SIGMA}")));
    }
    let (w, h) = img.dims();
    let k = Kernels::new(sigma);
    let s2 = sigma * sigma;
    let norm = |v: Vec<f64>| v.into_iter().map(|x| s2 * x).collect::<Vec<_>>();
    let data = img.data();
    Ok(HessianField {
        width: w,
        height: h,
        xx: norm(separable(data, w, h, &k, Tap::Second, Tap::Smooth)),
        xy: norm(separable(data, w, h, &k, Tap::First, Tap::First)),
        yy: norm(separable(data, w, h, &k, Tap::Smooth, Tap::Second)),
    })
}

/// Gaussian smoothing with reflected borders; `sigma == 0` returns a copy.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("blur sigma {sigma} must be non-negative")));
    }
    let (w, h) = img.dims();
    let k = Kernels::new(sigma);
    let out = separable(img.data(), w, h, &k, Tap::Smooth, Tap::Smooth);
    Image::clamped(w, h, out, img.range())
}

/// Eigenvalues of `[[xx, xy], [xy, yy]]` ordered so that `|l1| <= |l2|`.
#[inline]
pub fn eigenvalues(xx: f64, xy: f64, yy: f64) -> (f64, f64) {
    let mean = 0.5 * (xx + yy);
    let half = 0.5 * (xx - yy);
    let d = (half * half + xy * xy).sqrt();
    let (a, b) = (mean + d, mean - d);
    if a.abs() <= b.abs() {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_l2(l2: f64, polarity: Polarity) -> f64 {
    match polarity {
        Polarity::DarkOnBright => l2,
        Polarity::BrightOnDark => -l2,
    }
}

fn frangi_scale(hf: &HessianField, p: &VesselnessParams) -> Vec<f64> {
    let eig: Vec<(f64, f64)> = (0..hf.xx.len())
        .map(|i| eigenvalues(hf.xx[i], hf.xy[i], hf.yy[i]))
        .collect();
    let s_of = |(l1, l2): (f64, f64)| (l1 * l1 + l2 * l2).sqrt();
    let c = p
        .frangi_c
        .unwrap_or_else(|| 0.5 * eig.iter().map(|&e| s_of(e)).fold(0.0, f64::max));
    let two_b2 = 2.0 * p.frangi_b * p.frangi_b;
    let two_c2 = 2.0 * c * c;
    eig.iter()
        .map(|&(l1, l2)| {
            if signed_l2(l2, p.polarity) <= 0.0 || two_c2 == 0.0 {
                return 0.0;
            }
            let rb = l1.abs() / l2.abs();
            let s = s_of((l1, l2));
            (-rb * rb / two_b2).exp() * (1.0 - (-s * s / two_c2).exp())
        })
        .collect()
}

fn jerman_scale(hf: &HessianField, p: &VesselnessParams) -> Vec<f64> {
    let l2: Vec<f64> = (0..hf.xx.len())
        .map(|i| signed_l2(eigenvalues(hf.xx[i], hf.xy[i], hf.yy[i]).1, p.polarity))
        .collect();
    let cutoff = p.jerman_tau * l2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    l2.iter()
        .map(|&l| {
            let rho = if l > cutoff { l } else { cutoff };
            if l <= 0.0 || rho <= 0.0 {
                0.0
            } else if l >= 0.5 * rho {
                1.0
            } else {
                let q = 3.0 / (l + rho);
                l * l * (rho - l) * q * q * q
            }
        })
        .collect()
}

fn max_over_scales(
    img: &Image,
    p: &VesselnessParams,
    per_scale: impl Fn(&HessianField, &VesselnessParams) -> Vec<f64>,
) -> Result<Vec<f64>> {
    p.validate()?;
    let mut best = vec![0.0f64; img.data().len()];
    for &s in &p.scales {
        let r = per_scale(&gaussian_hessian(img, s)?, p);
        for (b, v) in best.iter_mut().zip(r) {
            *b = b.max(v);
        }
    }
    Ok(best)
}

/// Frangi vesselness before rescaling.
pub fn frangi_response(img: &Image, p: &VesselnessParams) -> Result<Vec<f64>> {
    max_over_scales(img, p, frangi_scale)
}

/// Jerman vesselness before rescaling, in `[0, 1]`.
pub fn jerman_response(img: &Image, p: &VesselnessParams) -> Result<Vec<f64>> {
    max_over_scales(img, p, jerman_scale)
}

pub fn frangi(img: &Image, p: &VesselnessParams) -> Result<Image> {
    normalize(&frangi_response(img, p)?, img.width(), img.height())
}

pub fn jerman(img: &Image, p: &VesselnessParams) -> Result<Image> {
    normalize(&jerman_response(img, p)?, img.width(), img.height())
}

/// Horizontal and vertical 3x3 derivative responses with centre weight `c`
/// (1 for Prewitt, 2 for Sobel).
fn gradient3(img: &Image, c: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(invalid(format!("edge filters need at least 3x3, got {w}x{h}")));
    }
    let at = |x: isize, y: isize| img.get(reflect(x, w), reflect(y, h));
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = |yy: isize| at(x + 1, yy) - at(x - 1, yy);
            let dy = |xx: isize| at(xx, y + 1) - at(xx, y - 1);
            let i = y as usize * w + x as usize;
            gx[i] = c * dx(y) + (dx(y - 1) + dx(y + 1));
            gy[i] = c * dy(x) + (dy(x - 1) + dy(x + 1));
        }
    }
    Ok((gx, gy))
}

pub fn sobel_gradients(img: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    gradient3(img, 2.0)
}

pub fn prewitt_gradients(img: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    gradient3(img, 1.0)
}

fn magnitude((gx, gy): (Vec<f64>, Vec<f64>)) -> Vec<f64> {
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

pub fn sobel(img: &Image) -> Result<Image> {
    normalize(&magnitude(sobel_gradients(img)?), img.width(), img.height())
}

pub fn prewitt(img: &Image) -> Result<Image> {
    normalize(&magnitude(prewitt_gradients(img)?), img.width(), img.height())
}

/// Min-max rescale to `[0, 255]`; a flat response maps to zero.
pub fn normalize(resp: &[f64], width: usize, height: usize) -> Result<Image> {
    let lo = resp.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 && span.is_finite() {
        resp.iter().map(|v| (v - lo) / span * 255.0).collect()
    } else {
        vec![0.0; resp.len()]
    };
    Image::new(width, height, data, ValueRange::Byte)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Frangi,
    Jerman,
    Prewitt,
    Sobel,
}

impl FeatureKind {
    pub const ORDER: [FeatureKind; 4] = [FeatureKind::Frangi, FeatureKind::Jerman, FeatureKind::Prewitt, FeatureKind::Sobel];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Frangi => "frangi",
            FeatureKind::Jerman => "jerman",
            FeatureKind::Prewitt => "prewitt",
            FeatureKind::Sobel => "sobel",
        }
    }
}

/// An image with its bright-response structural features in [`FeatureKind::ORDER`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub base: Image,
    pub features: Vec<Image>,
}

impl FeatureStack {
    pub fn n(&self) -> usize {
        self.features.len()
    }
}

pub fn extract_stack(img: &Image, p: &VesselnessParams) -> Result<FeatureStack> {
    let base = img.to_range(ValueRange::Byte);
    let features = vec![frangi(&base, p)?, jerman(&base, p)?, prewitt(&base)?, sobel(&base)?];
    Ok(FeatureStack { base, features })
}
