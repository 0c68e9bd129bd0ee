use tubuda_tensor::{Graph, Mode, ParamStore, Session, TensorError};

fn g64() -> Graph<f64> {
    Graph::new(Mode::Train)
}

#[test]
fn conv_identity_kernel_copies_input() {
    let mut g = g64();
    let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.5 - 7.0).collect();
    let x = g.input(data.clone(), &[2, 3, 4, 5]).unwrap();
    let mut k = vec![0.0; 3 * 3];
    for c in 0..3 {
        k[c * 3 + c] = 1.0;
    }
    let w = g.input(k, &[3, 3, 1, 1]).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &data[..]);
}

#[test]
fn conv_all_ones_sums_window() {
    let mut g = g64();
    let x = g.input(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
    let w = g.input(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y), &[9.0]);
}

#[test]
fn conv_output_extent_follows_stride_and_padding() {
    let mut g = g64();
    let x = g.input(vec![0.0; 7 * 9], &[1, 1, 7, 9]).unwrap();
    let w = g.input(vec![0.0; 2 * 9], &[2, 1, 3, 3]).unwrap();
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 4, 5]);
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let mut g = g64();
    let x = g.input(vec![0.0; 2 * 16], &[1, 2, 4, 4]).unwrap();
    let w = g.input(vec![0.0; 27], &[1, 3, 3, 3]).unwrap();
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
}

#[test]
fn max_pool_examples() {
    let mut g = g64();
    let x = g.input(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y), &[4.0]);

    let c = g.input(vec![3.5; 16], &[1, 1, 4, 4]).unwrap();
    let y = g.max_pool2d(c, 2, 2).unwrap();
    assert_eq!(g.value(y), &[3.5; 4]);
}

#[test]
fn max_pool_tie_routes_gradient_to_first_element() {
    let mut g = g64();
    let x = g.variable(vec![5.0, 5.0, 0.0, 0.0], &[1, 1, 2, 2]).unwrap();
    let y = g.max_pool2d(x, 2, 2).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pixel_shuffle_ratio_one_is_identity() {
    let mut g = g64();
    let data: Vec<f64> = (0..24).map(f64::from).collect();
    let x = g.input(data.clone(), &[1, 6, 2, 2]).unwrap();
    let y = g.pixel_shuffle(x, 1).unwrap();
    assert_eq!(g.value(y), &data[..]);
    assert_eq!(g.shape(y), &[1, 6, 2, 2]);
}

#[test]
fn pixel_shuffle_interleaves_subpixels() {
    let mut g = g64();
    // four 1x1 channels -> one 2x2 channel in row-major sub-pixel order
    let x = g.input(vec![1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]).unwrap();
    let y = g.pixel_shuffle(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = g64();
    let x = g.input(vec![0.0], &[1]).unwrap();
    let y = g.sigmoid(x);
    assert_eq!(g.value(y), &[0.5]);
}

#[test]
fn batchnorm_zero_variance_gives_zero() {
    let mut store = ParamStore::<f64>::new();
    let bn = store.add_batchnorm("bn", 2).unwrap();
    let mut s = Session::new(&mut store, Mode::Train);
    let x = s.input(vec![3.0; 2 * 2 * 4], &[2, 2, 2, 2]).unwrap();
    let y = s.batchnorm(x, &bn).unwrap();
    assert!(s.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_updates_running_stats_only_in_training() {
    let mut store = ParamStore::<f64>::new();
    let bn = store.add_batchnorm("bn", 1).unwrap();
    {
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(vec![1.0, 3.0], &[2, 1]).unwrap();
        s.batchnorm(x, &bn).unwrap();
    }
    // mean 2, unbiased variance 2
    assert!((store.get(bn.running_mean)[0] - 0.2).abs() < 1e-15);
    assert!((store.get(bn.running_var)[0] - (0.9 + 0.2)).abs() < 1e-15);
    let before = store.clone();
    {
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(vec![1.0, 3.0], &[2, 1]).unwrap();
        s.batchnorm(x, &bn).unwrap();
    }
    assert_eq!(store.get(bn.running_mean), before.get(bn.running_mean));
}

#[test]
fn grl_forward_is_bit_exact_identity() {
    let mut g = g64();
    let data = vec![0.1, -3.7, 1e-300, f64::MAX];
    let x = g.input(data.clone(), &[4]).unwrap();
    let y = g.grl(x, 0.5);
    assert_eq!(g.value(y), &data[..]);
}

#[test]
fn grl_lambda_zero_blocks_gradient() {
    let mut g = g64();
    let x = g.variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let y = g.grl(x, 0.0);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn grl_lambda_one_negates_sum_gradient() {
    let mut g = g64();
    let x = g.variable(vec![1.0, -2.0, 3.0, 0.0], &[2, 2]).unwrap();
    let y = g.grl(x, 1.0);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[-1.0; 4]);
}

#[test]
fn grl_scales_arbitrary_upstream_by_minus_lambda() {
    let w = vec![0.3, -1.25, 7.0, 1e-3, -0.0, 2.5];
    for lambda in [0.0, 0.5, 1.0] {
        let mut g = g64();
        let x = g.variable(vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0], &[6]).unwrap();
        let y = g.grl(x, lambda);
        let wv = g.input(w.clone(), &[6]).unwrap();
        let p = g.mul(y, wv).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let want: Vec<f64> = w.iter().map(|&u| -lambda * u).collect();
        assert_eq!(grads.get(x).unwrap(), &want[..]);
    }
}

#[test]
fn backward_identity_and_fan_out_accumulation() {
    let mut g = g64();
    let x = g.variable(vec![4.0], &[1]).unwrap();
    let y = g.sum(x);
    assert_eq!(g.backward(y).unwrap().get(x).unwrap(), &[1.0]);

    let mut g = g64();
    let x = g.variable(vec![4.0], &[1]).unwrap();
    let xx = g.add(x, x).unwrap();
    let y = g.sum(xx);
    assert_eq!(g.backward(y).unwrap().get(x).unwrap(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = g64();
    let x = g.variable(vec![1.0, 2.0], &[2]).unwrap();
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = g64();
    let x = g.input(vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0], &[2, 3]).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.value(y).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn proj_coef_flags_degenerate_rows() {
    let mut g = g64();
    let v = g.input(vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0], &[2, 3]).unwrap();
    let u = g.input(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[2, 3]).unwrap();
    let (c, flags) = g.proj_coef(v, u).unwrap();
    assert_eq!(flags, vec![true, false]);
    assert_eq!(g.value(c), &[0.0, 1.0]);
}

#[test]
fn bce_at_half_is_ln2() {
    let mut g = g64();
    let p = g.input(vec![0.5; 6], &[6]).unwrap();
    let l = g.bce(p, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn eval_forward_is_bit_reproducible() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let bn = store.add_batchnorm("bn", 3).unwrap();
        let w = store
            .insert("w", &[3, 1, 3, 3], (0..27).map(|i| (i as f32 * 0.37).sin()).collect(), true)
            .unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input((0..64).map(|i| (i as f32).cos()).collect(), &[1, 1, 8, 8]).unwrap();
        let wv = s.param(w);
        let y = s.conv2d(x, wv, None, 1, 1).unwrap();
        let y = s.batchnorm(y, &bn).unwrap();
        s.value(y).to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn duplicate_param_names_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.insert("a", &[1], vec![0.0], true).unwrap();
    assert!(matches!(store.insert("a", &[1], vec![0.0], true), Err(TensorError::DuplicateParam(_))));
}
