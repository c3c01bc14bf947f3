//! Gradient checks for every differentiable operation, plus the
//! oracle-equivalence and determinism contracts of the tensor layer.

mod common;

use aseg::ops::{self, PoolMode};
use aseg::{Shape, Tape, Tensor};
use common::{check_grads, naive_conv2d, naive_pool2d, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

fn t(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    random_tensor(Shape(shape), lo, hi, &mut rng(seed))
}

/// Random values bounded away from zero, for kinked activations.
fn t_off_zero(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..Shape(shape).numel())
        .map(|_| {
            let mag = r.gen_range(0.2..1.5);
            if r.gen_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[test]
fn grad_add_mul_div() {
    let a = t([2, 3, 4, 5], -1.0, 1.0, 1);
    let b = t([2, 3, 4, 5], -1.0, 1.0, 2);
    check_grads("add", &[a.clone(), b.clone()], |x| {
        ops::add(&x[0], &x[1]).unwrap()
    });
    check_grads("mul", &[a.clone(), b.clone()], |x| {
        ops::mul(&x[0], &x[1]).unwrap()
    });
    let denom = t([2, 3, 4, 5], 0.5, 2.0, 3);
    check_grads("div", &[a, denom], |x| ops::div(&x[0], &x[1]).unwrap());
}

#[test]
fn grad_broadcast_ops() {
    let x = t([2, 4, 3, 3], -1.0, 1.0, 4);
    let channel_gate = t([2, 4, 1, 1], 0.1, 0.9, 5);
    let spatial_gate = t([2, 1, 3, 3], 0.1, 0.9, 6);
    let scalar_gate = t([1, 1, 1, 1], 0.2, 0.8, 7);
    check_grads("mul_broadcast channel", &[x.clone(), channel_gate], |v| {
        ops::mul_broadcast(&v[0], &v[1]).unwrap()
    });
    check_grads("mul_broadcast spatial", &[x.clone(), spatial_gate], |v| {
        ops::mul_broadcast(&v[0], &v[1]).unwrap()
    });
    check_grads("mul_broadcast scalar", &[x.clone(), scalar_gate], |v| {
        ops::mul_broadcast(&v[0], &v[1]).unwrap()
    });
    let scores = t([5, 1, 4, 4], -1.0, 1.0, 8);
    let table = t([1, 1, 4, 4], -0.5, 0.5, 9);
    check_grads("add_broadcast", &[scores, table], |v| {
        ops::add_broadcast(&v[0], &v[1]).unwrap()
    });
}

#[test]
fn grad_scale_shift_concat_slice_reshape() {
    let x = t([1, 2, 3, 4], -1.0, 1.0, 10);
    check_grads("scale", &[x.clone()], |v| v[0].scale(-2.5));
    check_grads("add_scalar", &[x.clone()], |v| v[0].add_scalar(3.0));
    let y = t([1, 3, 3, 4], -1.0, 1.0, 11);
    check_grads("concat_channels", &[x.clone(), y], |v| {
        ops::concat_channels(&v[0], &v[1]).unwrap()
    });
    let w = t([1, 1, 2, 4], -1.0, 1.0, 12);
    check_grads("slice_w", &[w], |v| ops::slice_w(&v[0], 2).unwrap());
    check_grads("reshape", &[x.clone()], |v| {
        v[0].reshape([1, 1, 6, 4]).unwrap()
    });
    check_grads("sum_all", &[x], |v| v[0].sum_all());
}

#[test]
fn grad_activations() {
    let x = t_off_zero([2, 2, 3, 3], 20);
    check_grads("relu", &[x.clone()], |v| v[0].relu());
    check_grads("relu_squared", &[x.clone()], |v| v[0].relu_squared());
    let y = t([2, 2, 3, 3], -3.0, 3.0, 21);
    check_grads("sigmoid", &[y.clone()], |v| v[0].sigmoid());
    check_grads("softmax_last_dim", &[y], |v| {
        v[0].softmax_last_dim().unwrap()
    });
}

#[test]
fn grad_conv2d_geometries() {
    // 3x3 kernel, stride 1, same padding
    let x = t([2, 3, 5, 5], -1.0, 1.0, 30);
    let w = t([4, 3, 3, 3], -0.5, 0.5, 31);
    let b = t([1, 4, 1, 1], -0.5, 0.5, 32);
    check_grads("conv 3x3 s1 p1", &[x, w, b], |v| {
        ops::conv2d(&v[0], &v[1], Some(&v[2]), 1, 1, 1).unwrap()
    });
    // strided, no padding
    let x = t([1, 2, 4, 4], -1.0, 1.0, 33);
    let w = t([3, 2, 2, 2], -0.5, 0.5, 34);
    check_grads("conv 2x2 s2", &[x, w], |v| {
        ops::conv2d(&v[0], &v[1], None, 2, 0, 1).unwrap()
    });
    // dilated
    let x = t([1, 2, 6, 6], -1.0, 1.0, 35);
    let w = t([1, 2, 3, 3], -0.5, 0.5, 36);
    check_grads("conv 3x3 d2 p2", &[x, w], |v| {
        ops::conv2d(&v[0], &v[1], None, 1, 2, 2).unwrap()
    });
    // 1x1 projection
    let x = t([2, 4, 3, 3], -1.0, 1.0, 37);
    let w = t([2, 4, 1, 1], -0.5, 0.5, 38);
    check_grads("conv 1x1", &[x, w], |v| {
        ops::conv2d(&v[0], &v[1], None, 1, 0, 1).unwrap()
    });
}

#[test]
fn grad_pooling_and_reductions() {
    let x = t([2, 2, 4, 4], -1.0, 1.0, 40);
    check_grads("max pool 2x2", &[x.clone()], |v| {
        ops::pool2d(&v[0], PoolMode::Max, 2, 2).unwrap()
    });
    check_grads("avg pool 2x2", &[x.clone()], |v| {
        ops::pool2d(&v[0], PoolMode::Avg, 2, 2).unwrap()
    });
    check_grads("max pool 3x3 s1", &[x.clone()], |v| {
        ops::pool2d(&v[0], PoolMode::Max, 3, 1).unwrap()
    });
    check_grads("reduce_spatial avg", &[x.clone()], |v| {
        ops::reduce_spatial(&v[0], PoolMode::Avg).unwrap()
    });
    check_grads("reduce_spatial max", &[x.clone()], |v| {
        ops::reduce_spatial(&v[0], PoolMode::Max).unwrap()
    });
    check_grads("reduce_channels avg", &[x.clone()], |v| {
        ops::reduce_channels(&v[0], PoolMode::Avg).unwrap()
    });
    check_grads("reduce_channels max", &[x], |v| {
        ops::reduce_channels(&v[0], PoolMode::Max).unwrap()
    });
}

#[test]
fn grad_upsample_and_patches() {
    let x = t([2, 3, 3, 3], -1.0, 1.0, 50);
    check_grads("upsample x2", &[x], |v| {
        ops::upsample_nearest(&v[0], 2).unwrap()
    });
    let f = t([2, 3, 4, 4], -1.0, 1.0, 51);
    check_grads("patch_partition", &[f.clone()], |v| {
        ops::patch_partition(&v[0], 2).unwrap()
    });
    let p = t([8, 1, 4, 3], -1.0, 1.0, 52);
    check_grads("patch_merge", &[p], |v| {
        ops::patch_merge(&v[0], [2, 3, 4, 4], 2).unwrap()
    });
}

#[test]
fn grad_matmul_family() {
    let a = t([1, 1, 3, 4], -1.0, 1.0, 60);
    let b = t([1, 1, 4, 5], -1.0, 1.0, 61);
    check_grads("matmul", &[a.clone(), b], |v| {
        ops::matmul(&v[0], &v[1]).unwrap()
    });
    let bt = t([1, 1, 5, 4], -1.0, 1.0, 62);
    check_grads("matmul_nt", &[a, bt], |v| {
        ops::matmul_nt(&v[0], &v[1]).unwrap()
    });
    let q = t([3, 1, 4, 2], -1.0, 1.0, 63);
    let k = t([3, 1, 4, 2], -1.0, 1.0, 64);
    check_grads("bmm_nt", &[q, k], |v| ops::bmm_nt(&v[0], &v[1]).unwrap());
    let att = t([3, 1, 4, 4], -1.0, 1.0, 65);
    let val = t([3, 1, 4, 2], -1.0, 1.0, 66);
    check_grads("bmm_nn", &[att, val], |v| {
        ops::bmm_nn(&v[0], &v[1]).unwrap()
    });
}

#[test]
fn grad_batch_norm() {
    let x = t([3, 2, 4, 4], -1.0, 1.0, 70);
    let scale = t([1, 2, 1, 1], 0.5, 1.5, 71);
    let shift = t([1, 2, 1, 1], -0.5, 0.5, 72);
    check_grads("batch_norm train", &[x.clone(), scale.clone(), shift.clone()], |v| {
        ops::batch_norm_train(&v[0], &v[1], &v[2], 1e-5).unwrap().0
    });
    let mean = vec![0.1, -0.2];
    let var = vec![0.9, 1.3];
    check_grads("batch_norm eval", &[x, scale, shift], |v| {
        ops::batch_norm_eval(&v[0], &v[1], &v[2], &mean, &var, 1e-5).unwrap()
    });
}

// ---------------------------------------------------------------------------
// oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn conv2d_matches_naive_loops_on_random_shapes() {
    let mut r = rng(99);
    for case in 0..40 {
        let n = r.gen_range(1..3usize);
        let cin = r.gen_range(1..4usize);
        let cout = r.gen_range(1..4usize);
        let k = r.gen_range(1..4usize);
        let dilation = r.gen_range(1..3usize);
        let eff = dilation * (k - 1) + 1;
        let h = r.gen_range(eff..eff + 4);
        let padding = r.gen_range(0..2usize);
        // keep stride 1 so every geometry is valid
        let xs = Shape::new(n, cin, h, h);
        let ws = Shape::new(cout, cin, k, k);
        let x = random_tensor(xs, -1.0, 1.0, &mut r);
        let w = random_tensor(ws, -1.0, 1.0, &mut r);
        let b = random_tensor(Shape::new(1, cout, 1, 1), -1.0, 1.0, &mut r);
        let y = ops::conv2d(&x, &w, Some(&b), 1, padding, dilation).unwrap();
        let (want, os) =
            naive_conv2d(x.data(), xs, w.data(), ws, Some(b.data()), 1, padding, dilation);
        assert_eq!(y.shape(), os, "case {case}");
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn pool2d_matches_naive_loops() {
    let mut r = rng(100);
    for _ in 0..30 {
        let n = r.gen_range(1..3usize);
        let c = r.gen_range(1..4usize);
        let window = r.gen_range(1..4usize);
        let stride = r.gen_range(1..3usize);
        let h = window + stride * r.gen_range(0..3usize);
        let xs = Shape::new(n, c, h, h);
        let x = random_tensor(xs, -1.0, 1.0, &mut r);
        for max_mode in [true, false] {
            let mode = if max_mode { PoolMode::Max } else { PoolMode::Avg };
            let y = ops::pool2d(&x, mode, window, stride).unwrap();
            let (want, os) = naive_pool2d(x.data(), xs, max_mode, window, stride);
            assert_eq!(y.shape(), os);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn reductions_match_flat_loop_oracles() {
    let mut r = rng(101);
    let xs = Shape::new(1, 3, 8, 8);
    let x = random_tensor(xs, -2.0, 2.0, &mut r);
    let avg = ops::reduce_spatial(&x, PoolMode::Avg).unwrap();
    let max = ops::reduce_spatial(&x, PoolMode::Max).unwrap();
    for c in 0..3 {
        let plane: Vec<f64> = (0..64).map(|i| x.data()[c * 64 + i]).collect();
        let want_avg = plane.iter().sum::<f64>() / 64.0;
        let want_max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((avg.data()[c] - want_avg).abs() < 1e-12);
        assert_eq!(max.data()[c], want_max);
    }

    let xs = Shape::new(1, 4, 5, 5);
    let x = random_tensor(xs, -2.0, 2.0, &mut r);
    let avg = ops::reduce_channels(&x, PoolMode::Avg).unwrap();
    let max = ops::reduce_channels(&x, PoolMode::Max).unwrap();
    for p in 0..25 {
        let vals: Vec<f64> = (0..4).map(|c| x.data()[c * 25 + p]).collect();
        assert!((avg.data()[p] - vals.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert_eq!(max.data()[p], vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

// ---------------------------------------------------------------------------
// named examples and edge cases
// ---------------------------------------------------------------------------

#[test]
fn pool_named_examples() {
    let x = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(
        ops::pool2d(&x, PoolMode::Max, 2, 2).unwrap().data(),
        &[4.0]
    );
    assert_eq!(
        ops::pool2d(&x, PoolMode::Avg, 2, 2).unwrap().data(),
        &[2.5]
    );

    // encoder ladder: three stride-2 pools halve 128 down to 16
    let mut cur = Tensor::<f64>::zeros([1, 1, 128, 128]);
    for _ in 0..3 {
        cur = ops::pool2d(&cur, PoolMode::Max, 2, 2).unwrap();
    }
    assert_eq!(cur.shape(), Shape::new(1, 1, 16, 16));

    assert!(ops::pool2d(&x, PoolMode::Max, 3, 1).is_err());
}

#[test]
fn reduction_named_examples() {
    let c = Tensor::<f64>::full([2, 3, 4, 4], 0.7);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        for &v in ops::reduce_spatial(&c, mode).unwrap().data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }
    let x = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert!((ops::reduce_spatial(&x, PoolMode::Avg).unwrap().item() - 2.5).abs() < 1e-15);
    assert_eq!(ops::reduce_spatial(&x, PoolMode::Max).unwrap().item(), 4.0);

    let px = Tensor::<f64>::from_f64_slice([1, 2, 1, 1], &[-1.0, 5.0]);
    assert_eq!(ops::reduce_channels(&px, PoolMode::Avg).unwrap().item(), 2.0);
    assert_eq!(ops::reduce_channels(&px, PoolMode::Max).unwrap().item(), 5.0);
    let single = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        assert_eq!(ops::reduce_channels(&single, mode).unwrap().data(), single.data());
    }
}

#[test]
fn activation_named_examples() {
    let x = Tensor::<f64>::from_f64_slice([1, 1, 1, 2], &[-3.0, 2.0]);
    assert_eq!(x.relu_squared().data(), &[0.0, 4.0]);
    let z = Tensor::<f64>::zeros([1, 1, 1, 3]);
    for &v in z.softmax_last_dim().unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(Tensor::<f64>::zeros([1, 1, 1, 1]).sigmoid().item(), 0.5);
}

#[test]
fn matmul_named_examples() {
    let eye = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let x = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[3.0, -1.0, 2.0, 5.0]);
    assert_eq!(ops::matmul(&eye, &x).unwrap().data(), x.data());

    let a = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = Tensor::<f64>::from_f64_slice([1, 1, 2, 1], &[5.0, 6.0]);
    assert_eq!(ops::matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);

    // score-matrix shape contract: (M^2 x d) . (d x M^2) -> M^2 x M^2
    let q = Tensor::<f64>::zeros([1, 1, 16, 4]);
    let kt = Tensor::<f64>::zeros([1, 1, 4, 16]);
    assert_eq!(
        ops::matmul(&q, &kt).unwrap().shape(),
        Shape::new(1, 1, 16, 16)
    );

    let bad = Tensor::<f64>::zeros([1, 1, 3, 3]);
    assert!(ops::matmul(&a, &bad).is_err());
}

#[test]
fn batch_norm_named_examples() {
    // constant input normalizes to the shift (zero): variance-epsilon regime
    let x = Tensor::<f64>::full([2, 1, 2, 2], 3.0);
    let scale = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
    let shift = Tensor::<f64>::zeros([1, 1, 1, 1]);
    let (y, mean, var) = ops::batch_norm_train(&x, &scale, &shift, 1e-5).unwrap();
    for &v in y.data() {
        assert!(v.abs() < 1e-9);
    }
    assert!((mean[0] - 3.0).abs() < 1e-12 && var[0].abs() < 1e-12);

    // batch values {-1, 1} normalize to roughly themselves
    let x = Tensor::<f64>::from_f64_slice([2, 1, 1, 1], &[-1.0, 1.0]);
    let (y, ..) = ops::batch_norm_train(&x, &scale, &shift, 1e-5).unwrap();
    let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
    assert!((y.data()[0] + expect).abs() < 1e-12);
    assert!((y.data()[1] - expect).abs() < 1e-12);

    // shift moves the output mean
    let shift5 = Tensor::<f64>::full([1, 1, 1, 1], 5.0);
    let (y, ..) = ops::batch_norm_train(&x, &scale, &shift5, 1e-5).unwrap();
    let mean_out: f64 = y.data().iter().sum::<f64>() / 2.0;
    assert!((mean_out - 5.0).abs() < 1e-12);
}

#[test]
fn upsample_named_examples() {
    let x = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(ops::upsample_nearest(&x, 1).unwrap().data(), x.data());
    let up = ops::upsample_nearest(&x, 2).unwrap();
    assert_eq!(
        up.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    // averaging back down recovers the original
    let down = ops::pool2d(&up, PoolMode::Avg, 2, 2).unwrap();
    assert_eq!(down.data(), x.data());
}

// ---------------------------------------------------------------------------
// backward semantics
// ---------------------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones_and_of_square_is_2x() {
    let tape = Tape::new();
    let x0 = t([1, 2, 2, 2], -1.0, 1.0, 200);
    let x = tape.var(&x0);
    tape.backward(&x.sum_all()).unwrap();
    assert!(tape.grad(&x).unwrap().iter().all(|&g| g == 1.0));

    let tape = Tape::new();
    let x = tape.var(&x0);
    let loss = ops::mul(&x, &x).unwrap().sum_all();
    tape.backward(&loss).unwrap();
    for (g, v) in tape.grad(&x).unwrap().iter().zip(x0.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn backward_accumulates_without_reset_and_is_deterministic_with_reset() {
    let x0 = t([1, 1, 3, 3], -1.0, 1.0, 201);
    let run = |resets: bool| -> (Vec<f64>, Vec<f64>) {
        let tape = Tape::new();
        let x = tape.var(&x0);
        let loss = ops::mul(&x, &x).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        let first = tape.grad(&x).unwrap();
        if resets {
            tape.zero_grad();
        }
        tape.backward(&loss).unwrap();
        (first, tape.grad(&x).unwrap())
    };
    let (first, doubled) = run(false);
    for (a, b) in first.iter().zip(&doubled) {
        assert_eq!(2.0 * a, *b);
    }
    let (first, again) = run(true);
    assert_eq!(first, again, "identical gradients after reset");
}

#[test]
fn backward_rejects_non_scalar_and_off_tape_losses() {
    let tape = Tape::<f64>::new();
    let x = tape.var(&Tensor::zeros([1, 1, 2, 2]));
    assert!(tape.backward(&x).is_err());
    let constant = Tensor::<f64>::zeros([1, 1, 1, 1]);
    assert!(tape.backward(&constant).is_err());
}

// ---------------------------------------------------------------------------
// properties
// ---------------------------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 4), vals);
        let y = x.softmax_last_dim().unwrap();
        for row in y.data().chunks(4) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn relu_squared_nonnegative_and_zero_on_nonpositive(vals in proptest::collection::vec(-10.0f64..10.0, 16)) {
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), vals.clone());
        let y = x.relu_squared();
        for (&v, &out) in vals.iter().zip(y.data()) {
            prop_assert!(out >= 0.0);
            prop_assert_eq!(out == 0.0, v <= 0.0);
        }
    }

    #[test]
    fn patch_round_trip_is_identity(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4 * 4)) {
        let x = Tensor::from_vec(Shape::new(2, 3, 4, 4), vals);
        let p = ops::patch_partition(&x, 2).unwrap();
        let back = ops::patch_merge(&p, [2, 3, 4, 4], 2).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }
}
