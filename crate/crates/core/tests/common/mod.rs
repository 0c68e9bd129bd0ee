//! Brute-force references shared by the integration and acceptance targets.
#![allow(dead_code)]

pub mod nets;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubuda::imgio::{Image, ValueRange};
use tubuda::metrics::Mask;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> Mask {
    Mask::new(w, h, (0..w * h).map(|_| rng.random_bool(density)).collect()).unwrap()
}

pub fn points(m: &Mask) -> Vec<(i64, i64)> {
    (0..m.height)
        .flat_map(|y| (0..m.width).map(move |x| (x, y)))
        .filter(|&(x, y)| m.data[y * m.width + x])
        .map(|(x, y)| (x as i64, y as i64))
        .collect()
}

pub fn brute_dice(p: &Mask, g: &Mask) -> f64 {
    let mut inter = 0.0;
    let mut np = 0.0;
    let mut ng = 0.0;
    for i in 0..p.data.len() {
        if p.data[i] {
            np += 1.0;
        }
        if g.data[i] {
            ng += 1.0;
        }
        if p.data[i] && g.data[i] {
            inter += 1.0;
        }
    }
    if np + ng == 0.0 {
        1.0
    } else {
        2.0 * inter / (np + ng)
    }
}

/// 95th percentile, interpolating linearly between order statistics.
fn p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(d.len() - 1);
    d[i] + (pos - i as f64) * (d[j] - d[i])
}

fn directed(a: &[(i64, i64)], b: &[(i64, i64)]) -> f64 {
    let d = a
        .iter()
        .map(|&(ax, ay)| {
            let best = b
                .iter()
                .map(|&(bx, by)| (ax - bx).pow(2) + (ay - by).pow(2))
                .min()
                .unwrap();
            (best as f64).sqrt()
        })
        .collect();
    p95(d)
}

/// All-pairs symmetric 95th-percentile Hausdorff distance.
pub fn brute_hd95(p: &Mask, g: &Mask) -> f64 {
    let (a, b) = (points(p), points(g));
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    directed(&a, &b).max(directed(&b, &a))
}

/// Dark horizontal Gaussian line on a bright background.
pub fn dark_ridge(w: usize, h: usize, center: f64, width: f64) -> Image {
    Image::from_fn(w, h, ValueRange::Byte, |_, y| {
        let d = y as f64 - center;
        200.0 - 150.0 * (-d * d / (2.0 * width * width)).exp()
    })
    .unwrap()
}

pub fn rotate90(img: &Image) -> Image {
    let n = img.width();
    Image::from_fn(n, n, img.range(), |x, y| img.get(y, n - 1 - x)).unwrap()
}

/// Values of `v` rotated the same way as [`rotate90`].
pub fn rotate90_values(v: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|i| v[(n - 1 - i % n) * n + i / n]).collect()
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, ValueRange::Byte, |_, _| rng.random_range(0.0..255.0)).unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Mean forward-difference gradient magnitude.
pub fn mean_gradient(img: &Image) -> f64 {
    let (w, h) = img.dims();
    let mut s = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let gx = img.get(x + 1, y) - img.get(x, y);
            let gy = img.get(x, y + 1) - img.get(x, y);
            s += (gx * gx + gy * gy).sqrt();
        }
    }
    s / ((w - 1) * (h - 1)) as f64
}
