//! Central finite differences (step 1e-5, f64) against the analytic
//! backward pass of every differentiable primitive, five seeds each.

mod primitives;

use primitives::{cases, SEEDS, TOL};
use tubuda_tensor::Mode;

fn check_group(group: &str) {
    let all = cases();
    let selected: Vec<_> = all.iter().filter(|c| c.group == group).collect();
    assert!(!selected.is_empty(), "no cases in {group}");
    for c in selected {
        for seed in SEEDS {
            let err = c.run(seed);
            assert!(err < TOL, "{} seed {seed}: rel err {err}", c.name);
        }
    }
}

#[test]
fn conv2d_gradients() {
    check_group("conv");
}

#[test]
fn pooling_gradients() {
    check_group("pool");
}

#[test]
fn dense_gradients() {
    check_group("dense");
}

#[test]
fn activation_gradients() {
    check_group("activation");
}

#[test]
fn layout_gradients() {
    check_group("layout");
}

#[test]
fn arithmetic_gradients() {
    check_group("arithmetic");
}

#[test]
fn loss_gradients() {
    check_group("loss");
}

#[test]
fn batchnorm_gradients() {
    for mode in [Mode::Train, Mode::Eval] {
        for seed in SEEDS {
            let err = primitives::batchnorm(mode, seed);
            assert!(err < TOL, "{mode:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn grl_gradient_is_negated_finite_difference() {
    for lambda in [0.5, 1.0] {
        for seed in SEEDS {
            assert!(primitives::grl(lambda, seed) < TOL);
        }
    }
}
