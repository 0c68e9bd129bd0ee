//! Finite-difference checks of the composite networks at 64-bit.

use rand::Rng;
use tubuda::hybrid::{HybridConfig, StackBatch, WeightModule};
use tubuda::imgio::{Image, ValueRange};
use tubuda::filters::FeatureStack;
use tubuda::segnet::{domain_losses, Discriminator, HeadMode, SegConfig, UNet};
use tubuda::srnet::{SrConfig, SrModel};
use tubuda_tensor::gradcheck::{check_params, CheckOptions, CheckReport};
use tubuda_tensor::{Mode, ParamStore, Session, Var};

pub const TOL: f64 = 1e-4;

fn opts(seed: u64) -> CheckOptions {
    opts_with_step(seed, 1e-5)
}

fn opts_with_step(seed: u64, step: f64) -> CheckOptions {
    CheckOptions {
        step,
        max_coords: 12,
        seed,
    }
}

/// Moves every trainable value off its initialization so zero-initialized
/// layers still carry gradient.
fn jitter(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    for id in ids {
        for v in store.get_mut(id) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn project(s: &mut Session<'_, f64>, y: Var) -> tubuda_tensor::Result<Var> {
    let n = s.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let shape = s.shape(y).to_vec();
    let wv = s.input(w, &shape)?;
    let p = s.mul(y, wv)?;
    Ok(s.sum(p))
}

fn random_stack(rng: &mut impl Rng, n: usize, side: usize) -> FeatureStack {
    let mut img = || Image::from_fn(side, side, ValueRange::Byte, |_, _| rng.random_range(0.0..255.0)).unwrap();
    FeatureStack {
        base: img(),
        features: (0..n).map(|_| img()).collect(),
    }
}

fn lift<T>(r: tubuda::Result<T>) -> tubuda_tensor::Result<T> {
    r.map_err(|e| tubuda_tensor::TensorError::Checkpoint(e.to_string()))
}

pub fn weight_module(seed: u64) -> CheckReport {
    let mut rng = super::rng(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = HybridConfig::default();
    let m = WeightModule::new(&mut store, "w", &cfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let stacks = [random_stack(&mut rng, 4, 16), random_stack(&mut rng, 4, 16)];
    let batch = StackBatch::new(&[&stacks[0], &stacks[1]]).unwrap();
    check_params(
        &store,
        Mode::Train,
        |s| {
            let (fh, alpha) = lift(m.hybrid(s, &batch, 0.5))?;
            let a = project(s, fh)?;
            let b = project(s, alpha)?;
            let a = s.scale(a, 1e-3);
            s.add(a, b)
        },
        opts(seed),
    )
    .unwrap()
}

pub fn sr_net(seed: u64) -> CheckReport {
    let mut rng = super::rng(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = SrConfig {
        n_blocks: 2,
        channels: 4,
        ..SrConfig::default()
    };
    let hcfg = HybridConfig::default();
    let m = SrModel::new(&mut store, &cfg, &hcfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let st = random_stack(&mut rng, 4, 16);
    let batch = StackBatch::new(&[&st]).unwrap();
    check_params(
        &store,
        Mode::Train,
        |s| {
            let (y, _) = lift(m.forward(s, &batch))?;
            project(s, y)
        },
        opts(seed),
    )
    .unwrap()
}

pub fn mini_unet(seed: u64) -> CheckReport {
    let mut rng = super::rng(seed);
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "u", 1, 2, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let x: Vec<f64> = (0..2 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    check_params(
        &store,
        Mode::Train,
        |s| {
            let xv = s.input(x.clone(), &[2, 1, 32, 32])?;
            let o = lift(net.forward(s, xv))?;
            let a = project(s, o.logits)?;
            let b = project(s, o.bottleneck)?;
            s.add(a, b)
        },
        opts_with_step(seed, 1e-7),
    )
    .unwrap()
}

pub fn discriminator(seed: u64) -> CheckReport {
    let mut rng = super::rng(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = SegConfig {
        base_width: 1,
        d: 5,
        nonlocal: true,
        heads: HeadMode::Orthogonal,
        grl_lambda: 1.0,
    };
    let disc = Discriminator::new(&mut store, "d", &cfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let c = cfg.bottleneck_channels();
    let feats: Vec<f64> = (0..4 * c * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    check_params(
        &store,
        Mode::Train,
        |s| {
            let f = s.input(feats.clone(), &[4, c, 2, 2])?;
            let out = lift(disc.forward(s, f))?;
            let (ls, lt) = lift(domain_losses(s, &out.probs, 2, 2))?;
            let mut total = ls[0];
            for &v in ls[1..].iter().chain(&lt) {
                total = s.add(total, v)?;
            }
            Ok(total)
        },
        opts_with_step(seed, 1e-4),
    )
    .unwrap()
}

/// Domain losses `(source, target)` of each head before and after
/// perturbing the first head's linear weights.
pub fn head_losses_around_perturbation() -> (Vec<f64>, Vec<f64>) {
    let mut rng = super::rng(11);
    let mut store = ParamStore::<f64>::new();
    let cfg = SegConfig {
        base_width: 1,
        d: 4,
        nonlocal: true,
        heads: HeadMode::Orthogonal,
        grl_lambda: 1.0,
    };
    let disc = Discriminator::new(&mut store, "d", &cfg, &mut rng).unwrap();
    let c = cfg.bottleneck_channels();
    let feats: Vec<f64> = (0..4 * c * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |store: &mut ParamStore<f64>| -> Vec<f64> {
        let mut s = Session::new(store, Mode::Train);
        let f = s.input(feats.clone(), &[4, c, 2, 2]).unwrap();
        let out = disc.forward(&mut s, f).unwrap();
        let (ls, lt) = domain_losses(&mut s, &out.probs, 2, 2).unwrap();
        ls.iter().zip(&lt).map(|(&a, &b)| s.scalar(a) + s.scalar(b)).collect()
    };
    let before = run(&mut store.clone());
    for v in store.get_mut(disc.heads[0].linear.weight) {
        *v += 0.25;
    }
    let after = run(&mut store.clone());
    (before, after)
}
