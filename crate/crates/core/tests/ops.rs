mod common;

use common::{conv2d_reference, pool_reference};
use gazelab::tensor::gradcheck::random_inputs;
use gazelab::tensor::{BatchNormMode, BN_EPSILON};
use gazelab::{Tape64, Tensor64};
use proptest::prelude::*;

fn forward_conv(x: &Tensor64, w: &Tensor64, b: Option<&Tensor64>, stride: usize, pad: usize) -> Tensor64 {
    let mut t = Tape64::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let bv = b.map(|b| t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_matches_direct_loops() {
    for (seed, (cin, cout, h, k, s, p)) in [(2, 3, 7, 3, 1, 1), (3, 2, 8, 3, 2, 1), (1, 4, 9, 7, 2, 3), (2, 2, 5, 1, 1, 0), (3, 1, 6, 4, 3, 2)]
        .into_iter()
        .enumerate()
    {
        let inp = random_inputs(&[&[2, cin, h, h + 1], &[cout, cin, k, k], &[cout]], seed as u64);
        let got = forward_conv(&inp[0], &inp[1], Some(&inp[2]), s, p);
        let want = conv2d_reference(&inp[0], &inp[1], Some(inp[2].data()), s, p);
        assert_eq!(got.dims(), want.dims());
        assert!(got.max_abs_diff(&want) < 1e-12, "case {seed}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn pools_match_direct_loops() {
    for (seed, (h, k, s, p)) in [(7, 3, 2, 1), (8, 2, 2, 0), (9, 3, 1, 1), (6, 3, 3, 0)].into_iter().enumerate() {
        let x = random_inputs(&[&[2, 3, h, h]], seed as u64).remove(0);
        let mut t = Tape64::new();
        let xv = t.constant(x.clone());
        let m = t.maxpool2d(xv, k, s, p).unwrap();
        let want = pool_reference(&x, k, s, p, true);
        assert_eq!(t.value(m).max_abs_diff(&want), 0.0);
        if p == 0 {
            let a = t.avgpool2d(xv, k, s).unwrap();
            assert!(t.value(a).max_abs_diff(&pool_reference(&x, k, s, 0, false)) < 1e-12);
        }
    }
}

#[test]
fn linear_matches_direct_loops() {
    let inp = random_inputs(&[&[3, 5], &[4, 5], &[4]], 9);
    let mut t = Tape64::new();
    let v: Vec<_> = inp.iter().map(|x| t.constant(x.clone())).collect();
    let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
    for n in 0..3 {
        for o in 0..4 {
            let want: f64 = inp[2].at(&[o]) + (0..5).map(|i| inp[0].at(&[n, i]) * inp[1].at(&[o, i])).sum::<f64>();
            assert!((t.value(y).at(&[n, o]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn batchnorm_train_normalizes_and_updates_running_stats() {
    let x = random_inputs(&[&[4, 2, 3, 3]], 3).remove(0);
    let mut t = Tape64::new();
    let xv = t.constant(x.clone());
    let g = t.constant(Tensor64::ones(&[2]));
    let b = t.constant(Tensor64::zeros(&[2]));
    let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
    let y = t.batchnorm2d(xv, g, b, &mut rm, &mut rv, BatchNormMode::Train).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |i| (n, i))).map(|(n, i)| x.at(&[n, c, i / 3, i % 3])).collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 36.0;
        let out: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |i| (n, i))).map(|(n, i)| t.value(y).at(&[n, c, i / 3, i % 3])).collect();
        for (o, v) in out.iter().zip(&vals) {
            assert!((o - (v - m) / (var + BN_EPSILON).sqrt()).abs() < 1e-12);
        }
        assert!((rm[c] - 0.1 * m).abs() < 1e-12);
        assert!((rv[c] - (0.9 + 0.1 * var * 36.0 / 35.0)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_train_rejects_single_value_channels() {
    let mut t = Tape64::new();
    let x = t.constant(Tensor64::ones(&[1, 2, 1, 1]));
    let g = t.constant(Tensor64::ones(&[2]));
    let b = t.constant(Tensor64::zeros(&[2]));
    let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
    assert!(t.batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Train).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_reference_on_random_geometry(
        cin in 1usize..4, cout in 1usize..4, h in 3usize..10, w in 3usize..10,
        k in 1usize..4, s in 1usize..4, p in 0usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * p && k <= w + 2 * p);
        let inp = random_inputs(&[&[1, cin, h, w], &[cout, cin, k, k]], seed);
        let got = forward_conv(&inp[0], &inp[1], None, s, p);
        let want = conv2d_reference(&inp[0], &inp[1], None, s, p);
        prop_assert_eq!(got.dims(), want.dims());
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..8) {
        let x = random_inputs(&[&[rows, cols]], seed).remove(0);
        let mut t = Tape64::new();
        let xv = t.constant(x);
        let y = t.softmax_lastdim(xv);
        for r in t.data(y).chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
    }
}
