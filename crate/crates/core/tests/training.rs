mod common;

use proptest::prelude::*;
use rand::Rng;
use tubuda::filters::VesselnessParams;
use tubuda::hybrid::compose_hybrid;
use tubuda::imgio::{Image, Role, ValueRange};
use tubuda::segnet::domain_losses;
use tubuda::srnet::make_sr_label;
use tubuda::synthbench::{generate_domain, SynthConfig, SynthDomain};
use tubuda::train::*;
use tubuda::uda::{uda_train, SegModel, SourceSet, TargetSet, UdaConfig};
use tubuda_tensor::{checkpoint, Graph, Mode, ParamStore, Session};

fn comps(rng: &mut impl Rng) -> LossComponents {
    let mut v = || rng.random_range(0.0..3.0);
    LossComponents {
        seg: v(),
        source: [v(), v(), v()],
        target: [v(), v(), v()],
    }
}

proptest! {
    #[test]
    fn totals_split_exactly(seed in 0u64..10_000) {
        let mut rng = common::rng(seed);
        let c = comps(&mut rng);
        let mut mu = [0.0; 6];
        for m in &mut mu {
            *m = rng.random_range(0.0..1.0);
        }
        let r = compose_losses(&c, &LossWeights { mu }, 3).unwrap();
        prop_assert_eq!(r.total.to_bits(), (r.source_total + r.target_total).to_bits());
        prop_assert_eq!(r.step, 3);
    }

    #[test]
    fn total_is_linear_in_each_weight(seed in 0u64..10_000, k in 0usize..6, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let mut rng = common::rng(seed);
        let c = comps(&mut rng);
        let with = |m: f64| {
            let mut mu = [0.0; 6];
            mu[k] = m;
            compose_losses(&c, &LossWeights { mu }, 0).unwrap().total
        };
        let raw = if k < 3 { c.source[k] } else { c.target[k - 3] };
        prop_assert!((with(a + b) - with(a) - with(b) + with(0.0)).abs() < 1e-12);
        prop_assert!((with(a) - c.seg - a * raw).abs() < 1e-12);
    }
}

#[test]
fn all_ln2_domain_losses() {
    let ln2 = std::f64::consts::LN_2;
    let c = LossComponents {
        seg: 1.0,
        source: [ln2; 3],
        target: [ln2; 3],
    };
    let r = compose_losses(&c, &LossWeights::default(), 0).unwrap();
    assert!((r.total - (1.0 + 6.0 * 0.03 * ln2)).abs() < 1e-12);
    assert!((r.target_total - 3.0 * 0.03 * ln2).abs() < 1e-15);
}

#[test]
fn graph_total_matches_scalar_total() {
    let mut rng = common::rng(12);
    let c = comps(&mut rng);
    let w = LossWeights {
        mu: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
    };
    let mut g = Graph::<f64>::new(Mode::Train);
    let seg = g.variable(vec![c.seg], &[]).unwrap();
    let src: Vec<_> = c.source.iter().map(|&v| g.variable(vec![v], &[]).unwrap()).collect();
    let tgt: Vec<_> = c.target.iter().map(|&v| g.variable(vec![v], &[]).unwrap()).collect();
    let total = compose_loss_graph(&mut g, seg, &src, &tgt, &w).unwrap();
    let r = compose_losses(&c, &w, 0).unwrap();
    assert!((g.scalar(total) - r.total).abs() < 1e-12);
    let grads = g.backward(total).unwrap();
    for (k, v) in src.iter().chain(&tgt).enumerate() {
        assert!((grads.get(*v).unwrap()[0] - w.mu[k]).abs() < 1e-15);
    }
}

#[test]
fn domain_bce_matches_scalar_loop() {
    let mut rng = common::rng(31);
    let p: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut g = Graph::<f64>::new(Mode::Eval);
    let pv = g.input(p.clone(), &[7, 1]).unwrap();
    let (ls, lt) = domain_losses(&mut g, &[pv], 3, 4).unwrap();
    // source rows are labeled 0, target rows 1
    let want_s = p[..3].iter().map(|&q| -(1.0 - q).ln()).sum::<f64>() / 3.0;
    let want_t = p[3..].iter().map(|&q| -q.ln()).sum::<f64>() / 4.0;
    assert!((g.scalar(ls[0]) - want_s).abs() < 1e-12);
    assert!((g.scalar(lt[0]) - want_t).abs() < 1e-12);
}

/// Scalar Adam on `sum (w - c)^2` with L2 decay added to the gradient.
fn adam_oracle(w0: &[f64], c: &[f64], cfg: OptimConfig, steps: usize) -> Vec<f64> {
    let mut w = w0.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for t in 1..=steps {
        for i in 0..w.len() {
            let g = 2.0 * (w[i] - c[i]) + cfg.weight_decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32));
            w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    w
}

fn bowl_steps(store: &mut ParamStore<f64>, adam: &mut Adam, c: &[f64], steps: usize) {
    let id = store.id("w").unwrap();
    for _ in 0..steps {
        let mut s = Session::new(store, Mode::Train);
        let w = s.param(id);
        let cv = s.input(c.to_vec(), &[c.len()]).unwrap();
        let d = s.sub(w, cv).unwrap();
        let sq = s.mul(d, d).unwrap();
        let loss = s.sum(sq);
        let grads = s.param_grads(loss).unwrap();
        drop(s);
        adam.step(store, &grads).unwrap();
    }
}

#[test]
fn adam_follows_the_reference_recurrence() {
    let c = [1.5, -2.0, 0.25, 4.0];
    let w0 = [0.0, 0.5, -1.0, 3.0];
    let cfg = OptimConfig::default();
    let mut store = ParamStore::<f64>::new();
    store.insert("w", &[4], w0.to_vec(), true).unwrap();
    let mut adam = Adam::new(cfg).unwrap();
    bowl_steps(&mut store, &mut adam, &c, 25);
    let want = adam_oracle(&w0, &c, cfg, 25);
    for (a, b) in store.get(store.id("w").unwrap()).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(adam.steps(), 25);
}

#[test]
fn adam_reaches_the_bottom_of_a_bowl() {
    let c = [1.5, -2.0, 0.25, 4.0];
    let cfg = OptimConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    store.insert("w", &[4], vec![0.0; 4], true).unwrap();
    let mut adam = Adam::new(cfg).unwrap();
    bowl_steps(&mut store, &mut adam, &c, 1500);
    for (a, b) in store.get(store.id("w").unwrap()).iter().zip(&c) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn sr_label_endpoints_and_worked_example() {
    let mut rng = common::rng(2);
    let hr = common::random_image(&mut rng, 10, 10);
    let seg = common::random_image(&mut rng, 10, 10);
    assert_eq!(make_sr_label(&hr, &seg, 1.0).unwrap().image, hr);
    assert_eq!(make_sr_label(&hr, &seg, 0.0).unwrap().image, seg);
    let hr = Image::new(2, 1, vec![200.0, 100.0], ValueRange::Byte).unwrap();
    let seg = Image::new(2, 1, vec![0.0, 255.0], ValueRange::Byte).unwrap();
    let l = make_sr_label(&hr, &seg, 0.9).unwrap().image;
    assert!((l.get(0, 0) - 180.0).abs() < 1e-12);
    assert!((l.get(1, 0) - 115.5).abs() < 1e-12);
    assert!(make_sr_label(&hr, &seg, 1.5).is_err());
}

#[test]
fn sr_label_is_a_convex_combination() {
    let mut rng = common::rng(6);
    let hr = common::random_image(&mut rng, 40, 25);
    let seg = common::random_image(&mut rng, 40, 25);
    for eta in [0.1, 0.5, 0.9, 0.97] {
        let l = make_sr_label(&hr, &seg, eta).unwrap().image;
        for ((&v, &h), &s) in l.data().iter().zip(hr.data()).zip(seg.data()) {
            assert!(v >= h.min(s) - 1e-12 && v <= h.max(s) + 1e-12);
        }
    }
}

/// `beta * sum_i a_i (255 - f_i) + (1 - beta) * base`, one pixel at a time.
fn hybrid_oracle(f: &[f64], a: &[f64], base: &[f64], b: usize, n: usize, hw: usize, beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a[bi * n + i] * (255.0 - f[(bi * n + i) * hw + p]);
            }
            out[bi * hw + p] = beta * acc + (1.0 - beta) * base[bi * hw + p];
        }
    }
    out
}

fn run_hybrid(f: &[f64], a: &[f64], base: &[f64], b: usize, n: usize, side: usize, beta: f64) -> Vec<f64> {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let fv = g.input(f.to_vec(), &[b, n, side, side]).unwrap();
    let av = g.input(a.to_vec(), &[b, n]).unwrap();
    let bv = g.input(base.to_vec(), &[b, 1, side, side]).unwrap();
    let y = compose_hybrid(&mut g, fv, av, bv, beta).unwrap();
    g.value(y).to_vec()
}

#[test]
fn hybrid_matches_pixel_loop_and_is_linear() {
    let mut rng = common::rng(17);
    let (b, n, side) = (2, 4, 6);
    let hw = side * side;
    let mut draw = |len: usize, hi: f64| (0..len).map(|_| rng.random_range(0.0..hi)).collect::<Vec<f64>>();
    let f = draw(b * n * hw, 255.0);
    let base = draw(b * hw, 255.0);
    let base2 = draw(b * hw, 255.0);
    let a1 = draw(b * n, 1.0);
    let a2 = draw(b * n, 1.0);
    for beta in [0.0, 0.3, 0.5, 1.0] {
        let got = run_hybrid(&f, &a1, &base, b, n, side, beta);
        let want = hybrid_oracle(&f, &a1, &base, b, n, hw, beta);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let h12 = run_hybrid(&f, &sum, &base, b, n, side, beta);
        let h1 = run_hybrid(&f, &a1, &base, b, n, side, beta);
        let h2 = run_hybrid(&f, &a2, &base, b, n, side, beta);
        let h0 = run_hybrid(&f, &vec![0.0; b * n], &base, b, n, side, beta);
        for i in 0..h12.len() {
            assert!((h12[i] - h1[i] - h2[i] + h0[i]).abs() < 1e-12 * 255.0 * n as f64);
        }
        let both: Vec<f64> = base.iter().zip(&base2).map(|(x, y)| x + y).collect();
        let g12 = run_hybrid(&f, &a1, &both, b, n, side, beta);
        let g2 = run_hybrid(&f, &a1, &base2, b, n, side, beta);
        let g0 = run_hybrid(&f, &a1, &vec![0.0; b * hw], b, n, side, beta);
        for i in 0..g12.len() {
            assert!((g12[i] - h1[i] - g2[i] + g0[i]).abs() < 1e-12 * 255.0 * n as f64);
        }
    }
    assert_eq!(run_hybrid(&f, &a1, &base, b, n, side, 0.0), base);
}

#[test]
fn hybrid_half_beta_worked_example() {
    // 0.5 * (0.5 * 200 + 0.25 * 100 + 0.25 * 0 + 0 * 255) + 0.5 * 100
    let got = run_hybrid(&[55.0, 155.0, 255.0, 0.0], &[0.5, 0.25, 0.25, 0.0], &[100.0], 1, 4, 1, 0.5);
    assert_eq!(got, vec![112.5]);
    // saturated features contribute nothing: 0.5 * 0 + 0.5 * 100
    let flat = run_hybrid(&[255.0; 4 * 9], &[0.5; 4], &[100.0; 9], 1, 4, 3, 0.5);
    assert_eq!(flat, vec![50.0; 9]);
}

fn tiny_sets() -> (SourceSet, TargetSet) {
    let cfg = SynthConfig {
        size: 32,
        cells: 4,
        ..SynthConfig::default()
    };
    let vp = VesselnessParams::default();
    let src = generate_domain(&cfg, SynthDomain::A, Role::Train, 3).unwrap();
    let tgt = generate_domain(&cfg, SynthDomain::B, Role::Train, 3).unwrap();
    (
        SourceSet::from_split(&src.labeled().unwrap(), &vp, |i| Ok(i.clone())).unwrap(),
        TargetSet::from_split(&tgt.unlabeled().unwrap(), &vp, |i| Ok(i.clone())).unwrap(),
    )
}

fn tiny_uda(mu: LossWeights) -> UdaConfig {
    UdaConfig {
        mu,
        steps: 4,
        seed: 5,
        ..UdaConfig::default()
    }
}

#[test]
fn zero_weights_equal_source_only_training() {
    let (src, tgt) = tiny_sets();
    let cfg = tiny_uda(LossWeights::zero());
    let mut rng = common::rng(1);
    let mut base = ParamStore::<f32>::new();
    let model = SegModel::new(&mut base, &cfg, &mut rng).unwrap();
    let mut with_target = base.clone();
    let mut without = base.clone();
    let a = uda_train(&model, &mut with_target, &src, Some(&tgt), |_| Ok(())).unwrap();
    let b = uda_train(&model, &mut without, &src, None, |_| Ok(())).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.total == r.seg_loss));
    assert_eq!(checkpoint::to_bytes(&with_target).unwrap(), checkpoint::to_bytes(&without).unwrap());
}

#[test]
fn checkpoint_round_trip_and_pure_evaluation() {
    let (src, tgt) = tiny_sets();
    let cfg = tiny_uda(LossWeights::default());
    let mut rng = common::rng(2);
    let mut store = ParamStore::<f32>::new();
    let model = SegModel::new(&mut store, &cfg, &mut rng).unwrap();
    uda_train(&model, &mut store, &src, Some(&tgt), |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    checkpoint::save(&store, &path).unwrap();
    let mut loaded = checkpoint::load::<f32>(&path).unwrap();
    let before = checkpoint::to_bytes(&loaded).unwrap();
    assert_eq!(before, checkpoint::to_bytes(&store).unwrap());

    let p1 = model.predict(&mut store, &tgt.stacks[0]).unwrap();
    let p2 = model.predict(&mut loaded, &tgt.stacks[0]).unwrap();
    let p3 = model.predict(&mut loaded, &tgt.stacks[0]).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p2, p3);
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), before);
}
