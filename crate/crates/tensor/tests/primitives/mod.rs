//! Finite-difference cases for every differentiable primitive, shared with
//! the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubuda_tensor::gradcheck::{central_difference, check_inputs, check_params, relative_error, CheckOptions};
use tubuda_tensor::{Graph, Mode, ParamStore, Result, Var};

pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub group: &'static str,
    pub name: String,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let shape = g.shape(y).to_vec();
    let wv = g.input(w, &shape)?;
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn case(
    group: &'static str,
    name: impl Into<String>,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        group,
        name: name.into(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

impl Case {
    /// Largest relative error of this case at `seed`.
    pub fn run(&self, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = self
            .shapes
            .iter()
            .map(|s| (rand_vec(&mut rng, s.iter().product()), s.clone()))
            .collect();
        check_inputs(&inputs, &self.build, CheckOptions::default()).unwrap().max_rel_error
    }
}

pub fn cases() -> Vec<Case> {
    let mut v = vec![
        case("conv", "conv s1 p1", &[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y)
        }),
        case("conv", "conv s2 p0", &[&[1, 2, 7, 7], &[3, 2, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 0)?;
            project(g, y)
        }),
        case("conv", "conv 1x1", &[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
            project(g, y)
        }),
        case("conv", "conv 5x5 p2", &[&[1, 2, 6, 5], &[2, 2, 5, 5]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 2)?;
            project(g, y)
        }),
        case("pool", "max_pool", &[&[2, 2, 6, 6]], |g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            project(g, y)
        }),
        case("pool", "global_max_pool", &[&[2, 3, 4, 4]], |g, v| {
            let y = g.global_max_pool(v[0])?;
            project(g, y)
        }),
        case("pool", "global_avg_pool", &[&[2, 3, 4, 5]], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y)
        }),
        case("dense", "linear", &[&[3, 5], &[4, 5], &[4]], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y)
        }),
        case("dense", "linear flattening", &[&[2, 2, 2, 2], &[3, 8]], |g, v| {
            let y = g.linear(v[0], v[1], None)?;
            project(g, y)
        }),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        v.push(case("dense", format!("matmul ta={ta} tb={tb}"), &[a, b], move |g, v| {
            let y = g.matmul(v[0], v[1], ta, tb)?;
            project(g, y)
        }));
    }
    v.extend([
        case("activation", "relu", &[&[3, 7]], |g, v| {
            let y = g.relu(v[0]);
            project(g, y)
        }),
        case("activation", "sigmoid", &[&[3, 7]], |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y)
        }),
        case("activation", "softmax", &[&[2, 3, 6]], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y)
        }),
        case("layout", "pixel_shuffle", &[&[2, 8, 3, 2]], |g, v| {
            let y = g.pixel_shuffle(v[0], 2)?;
            project(g, y)
        }),
        case("layout", "upsample_nearest", &[&[1, 2, 3, 3]], |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y)
        }),
        case("layout", "concat axis 1", &[&[2, 1, 3, 3], &[2, 2, 3, 3]], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            project(g, y)
        }),
        case("layout", "concat axis 0 + slice", &[&[2, 3], &[1, 3]], |g, v| {
            let c = g.concat(&[v[0], v[1]], 0)?;
            let y = g.slice(c, 0, 1, 2)?;
            project(g, y)
        }),
        case("layout", "reshape", &[&[2, 3, 4]], |g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            project(g, y)
        }),
        case("arithmetic", "add/sub/mul/scale", &[&[3, 4], &[3, 4], &[3, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[2])?;
            let c = g.mul(b, v[0])?;
            let d = g.scale(c, -1.7);
            let e = g.affine(d, 0.3, 2.0);
            project(g, e)
        }),
        case("arithmetic", "channel_weighted_sum", &[&[2, 4, 3, 3], &[2, 4]], |g, v| {
            let y = g.channel_weighted_sum(v[0], v[1])?;
            project(g, y)
        }),
        case("arithmetic", "row_dot", &[&[3, 5], &[3, 5]], |g, v| {
            let y = g.row_dot(v[0], v[1])?;
            project(g, y)
        }),
        case("arithmetic", "proj_coef", &[&[3, 5], &[3, 5]], |g, v| {
            let (y, _) = g.proj_coef(v[0], v[1])?;
            project(g, y)
        }),
        case("arithmetic", "scale_rows", &[&[3, 5], &[3, 1]], |g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            project(g, y)
        }),
        case("loss", "sum/mean", &[&[4, 3]], |g, v| {
            let m = g.mean(v[0]);
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            g.add(m, s)
        }),
    ]);
    let target: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    v.push(case("loss", "bce", &[&[12]], move |g, v| {
        let p = g.sigmoid(v[0]);
        g.bce(p, &target)
    }));
    let target: Vec<f64> = (0..12).map(|i| i as f64 / 7.0 - 0.8).collect();
    v.push(case("loss", "l1", &[&[12]], move |g, v| g.l1_loss(v[0], &target)));
    v
}

/// Batch norm checked through the parameter store in `mode`.
pub fn batchnorm(mode: Mode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let bn = store.add_batchnorm("bn", 3).unwrap();
    store.get_mut(bn.gamma).copy_from_slice(&rand_vec(&mut rng, 3));
    store.get_mut(bn.beta).copy_from_slice(&rand_vec(&mut rng, 3));
    store.get_mut(bn.running_mean).copy_from_slice(&rand_vec(&mut rng, 3));
    let x = store.insert("x", &[2, 3, 3, 2], rand_vec(&mut rng, 36), true).unwrap();
    check_params(
        &store,
        mode,
        |s| {
            let xv = s.param(x);
            let y = s.batchnorm(xv, &bn)?;
            project(s, y)
        },
        CheckOptions::default(),
    )
    .unwrap()
    .max_rel_error
}

/// Relative error of the reversed gradient against `-lambda` times the
/// finite difference of the unreversed function.
pub fn grl(lambda: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_vec(&mut rng, 5);
    let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| v * v * (i as f64 + 1.0)).sum::<f64>();
    let numeric = central_difference(f, &x0, &[0, 1, 2, 3, 4], 1e-5);
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.variable(x0.clone(), &[5]).unwrap();
    let r = g.grl(x, lambda);
    let sq = g.mul(r, r).unwrap();
    let w = g.input((1..=5).map(f64::from).collect(), &[5]).unwrap();
    let p = g.mul(sq, w).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    let reversed: Vec<f64> = numeric.iter().map(|d| -lambda * d).collect();
    relative_error(grads.get(x).unwrap(), &reversed)
}
