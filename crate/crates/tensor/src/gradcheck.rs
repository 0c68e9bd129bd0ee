//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward code it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::session::Session;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    /// Upper bound on perturbed coordinates per tensor (sampled deterministically).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Largest per-tensor relative error.
    pub max_rel_error: f64,
    /// Name of the tensor attaining it.
    pub worst: String,
    /// Number of perturbed coordinates.
    pub checked: usize,
}

impl CheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, err: f64, n: usize) {
        self.checked += n;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = name.to_string();
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each listed coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - n|_2 / max(|a|_2, |n|_2, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn pick_coords(n: usize, opts: &CheckOptions, salt: u64) -> Vec<usize> {
    if n <= opts.max_coords {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, n, opts.max_coords).into_vec();
    idx.sort_unstable();
    idx
}

/// Check gradients of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[(Vec<f64>, Vec<usize>)], build: F, opts: CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train);
    let vars = inputs
        .iter()
        .map(|(d, s)| g.variable(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = values
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| g.input(d.clone(), s).unwrap())
            .collect();
        let root = build(&mut g, &vars).expect("forward succeeded once");
        g.scalar(root)
    };

    let mut report = CheckReport::new();
    for (k, (data, _)) in inputs.iter().enumerate() {
        let coords = pick_coords(data.len(), &opts, k as u64);
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(gr) => coords.iter().map(|&i| gr[i]).collect(),
            None => vec![0.0; coords.len()],
        };
        let mut values: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
        let numeric = central_difference(
            |x| {
                values[k].copy_from_slice(x);
                eval(&values)
            },
            data,
            &coords,
            opts.step,
        );
        report.record(&format!("input{k}"), relative_error(&analytic, &numeric), coords.len());
    }
    Ok(report)
}

/// Check gradients of a scalar loss with respect to every trainable entry of `store`.
///
/// Training-mode batch norm updates running averages on each evaluation; the
/// store passed in is left untouched (all evaluation happens on clones).
pub fn check_params<F>(store: &ParamStore<f64>, mode: Mode, build: F, opts: CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut base = store.clone();
    let grads = {
        let mut s = Session::new(&mut base, mode);
        let root = build(&mut s)?;
        s.param_grads(root)?
    };

    let mut report = CheckReport::new();
    for id in store.ids() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let coords = pick_coords(entry.data.len(), &opts, id.index() as u64);
        let analytic: Vec<f64> = match grads.get(id) {
            Some(gr) => coords.iter().map(|&i| gr[i]).collect(),
            None => vec![0.0; coords.len()],
        };
        let mut work = store.clone();
        let numeric = central_difference(
            |x| {
                work.get_mut(id).copy_from_slice(x);
                let mut scratch = work.clone();
                let mut s = Session::new(&mut scratch, mode);
                let root = build(&mut s).expect("forward succeeded once");
                s.scalar(root)
            },
            &entry.data,
            &coords,
            opts.step,
        );
        report.record(&entry.name, relative_error(&analytic, &numeric), coords.len());
    }
    Ok(report)
}
