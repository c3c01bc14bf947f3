//! Behavior and gradient contracts of the attention blocks.

mod common;

use aseg::attention::{
    attention_scores, cbam, channel_attention, dal, hal, sal, skip_refine, spatial_attention,
    CbamParams, HalParams, SkipMode,
};
use aseg::gradcheck::{finite_diff_grad, max_rel_err};
use aseg::ops;
use aseg::scalar::sigmoid;
use aseg::{Shape, Tape, Tensor};
use common::{random_tensor, rng};
use rand::Rng;

fn cbam_params(c: usize, r: usize, seed: u64) -> CbamParams<f64> {
    CbamParams::init(c, r, &mut rng(seed)).unwrap()
}

fn hal_params(c: usize, d: usize, m: usize, seed: u64) -> HalParams<f64> {
    let mut p = HalParams::init(c, d, m, &mut rng(seed));
    // exercise the bias table and branch weights away from their zero init
    let mut r = rng(seed ^ 0xb1a5);
    for v in p.bias_table.data_mut() {
        *v = r.gen_range(-0.5..0.5);
    }
    for v in p.omega_logits.data_mut() {
        *v = r.gen_range(-0.5..0.5);
    }
    p
}

fn zeroed<T: Clone>(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.data_mut() {
        *v = 0.0;
    }
    t
}

// ---------------------------------------------------------------------------
// CBAM behavior
// ---------------------------------------------------------------------------

#[test]
fn zero_mlp_weights_gate_at_half() {
    let mut p = cbam_params(4, 2, 1);
    p.mlp_w1 = zeroed::<f64>(p.mlp_w1);
    p.mlp_w2 = zeroed::<f64>(p.mlp_w2);
    let f = random_tensor(Shape::new(2, 4, 4, 4), -1.0, 1.0, &mut rng(2));
    let out = channel_attention(&f, &p).unwrap();
    for (o, x) in out.data().iter().zip(f.data()) {
        assert!((o - 0.5 * x).abs() < 1e-15);
    }
}

#[test]
fn single_channel_gate_is_a_scalar_in_unit_interval() {
    let p = cbam_params(1, 1, 3);
    let f = random_tensor(Shape::new(1, 1, 4, 4), 0.1, 1.0, &mut rng(4));
    let out = channel_attention(&f, &p).unwrap();
    let gates: Vec<f64> = out
        .data()
        .iter()
        .zip(f.data())
        .map(|(o, x)| o / x)
        .collect();
    for g in &gates {
        assert!(*g > 0.0 && *g < 1.0);
        assert!((g - gates[0]).abs() < 1e-12, "one gate for the whole map");
    }
}

/// Independent scalar re-implementation of the channel gate.
fn channel_attention_oracle(f: &Tensor<f64>, p: &CbamParams<f64>) -> Vec<f64> {
    let s = f.shape();
    let (c, hidden) = (s.c(), s.c() / p.reduction);
    let plane = s.h() * s.w();
    let mut out = vec![0.0; f.numel()];
    for n in 0..s.n() {
        let mut ap = vec![0.0; c];
        let mut mp = vec![f64::NEG_INFINITY; c];
        for ci in 0..c {
            for i in 0..plane {
                let v = f.data()[(n * c + ci) * plane + i];
                ap[ci] += v / plane as f64;
                mp[ci] = mp[ci].max(v);
            }
        }
        let mlp = |x: &[f64]| -> Vec<f64> {
            let mut h = vec![0.0; hidden];
            for i in 0..hidden {
                for j in 0..c {
                    h[i] += p.mlp_w1.data()[i * c + j] * x[j];
                }
                h[i] = h[i].max(0.0);
            }
            let mut y = vec![0.0; c];
            for i in 0..c {
                for j in 0..hidden {
                    y[i] += p.mlp_w2.data()[i * hidden + j] * h[j];
                }
            }
            y
        };
        let (a, m) = (mlp(&ap), mlp(&mp));
        for ci in 0..c {
            let gate = sigmoid(a[ci] + m[ci]);
            for i in 0..plane {
                let idx = (n * c + ci) * plane + i;
                out[idx] = f.data()[idx] * gate;
            }
        }
    }
    out
}

#[test]
fn channel_attention_matches_composition_oracle() {
    let p = cbam_params(4, 2, 5);
    let f = random_tensor(Shape::new(1, 4, 4, 4), -1.0, 1.0, &mut rng(6));
    let out = channel_attention(&f, &p).unwrap();
    let want = channel_attention_oracle(&f, &p);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_spatial_kernel_gates_at_half_and_preserves_shape() {
    let mut p = cbam_params(4, 2, 7);
    p.spatial_kernel = zeroed::<f64>(p.spatial_kernel);
    for edge in [16usize, 128] {
        let f = random_tensor(Shape::new(1, 4, edge, edge), -1.0, 1.0, &mut rng(8));
        let out = spatial_attention(&f, &p, None).unwrap();
        assert_eq!(out.shape(), f.shape());
        if edge == 16 {
            for (o, x) in out.data().iter().zip(f.data()) {
                assert!((o - 0.5 * x).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn spatial_attention_matches_composition_oracle() {
    use common::naive_conv2d;
    let p = cbam_params(3, 1, 9);
    let f = random_tensor(Shape::new(1, 3, 8, 8), -1.0, 1.0, &mut rng(10));
    let out = spatial_attention(&f, &p, None).unwrap();

    // oracle: channel avg/max maps -> dilated conv -> sigmoid -> multiply
    let plane = 64;
    let mut maps = vec![0.0; 2 * plane];
    for i in 0..plane {
        let vals: Vec<f64> = (0..3).map(|c| f.data()[c * plane + i]).collect();
        maps[i] = vals.iter().sum::<f64>() / 3.0;
        maps[plane + i] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let (gate_raw, _) = naive_conv2d(
        &maps,
        Shape::new(1, 2, 8, 8),
        p.spatial_kernel.data(),
        Shape::new(1, 2, 7, 7),
        None,
        1,
        12,
        4,
    );
    for c in 0..3 {
        for i in 0..plane {
            let want = f.data()[c * plane + i] * sigmoid(gate_raw[i]);
            let got = out.data()[c * plane + i];
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_gates_pass_features_through_and_zero_weights_quarter_them() {
    // huge positive weights saturate both sigmoids to exactly 1.0 in f64
    let mut p = cbam_params(2, 2, 11);
    for v in p.mlp_w1.data_mut() {
        *v = 60.0;
    }
    for v in p.mlp_w2.data_mut() {
        *v = 60.0;
    }
    for v in p.spatial_kernel.data_mut() {
        *v = 60.0;
    }
    let f = random_tensor(Shape::new(1, 2, 8, 8), 0.3, 1.0, &mut rng(12));
    let out = cbam(&f, &p, None).unwrap();
    assert_eq!(out.data(), f.data());

    let mut z = cbam_params(2, 2, 13);
    z.mlp_w1 = zeroed::<f64>(z.mlp_w1);
    z.mlp_w2 = zeroed::<f64>(z.mlp_w2);
    z.spatial_kernel = zeroed::<f64>(z.spatial_kernel);
    let out = cbam(&f, &z, None).unwrap();
    for (o, x) in out.data().iter().zip(f.data()) {
        assert!((o - 0.25 * x).abs() < 1e-15);
    }
}

#[test]
fn cbam_preserves_shape_across_encoder_levels() {
    for (c, edge) in [(16usize, 128usize), (32, 64), (64, 32), (128, 16)] {
        let p = cbam_params(c, 2, 14);
        let f = random_tensor(Shape::new(1, c, edge, edge), -1.0, 1.0, &mut rng(15));
        assert_eq!(cbam(&f, &p, None).unwrap().shape(), f.shape());
    }
}

// ---------------------------------------------------------------------------
// scores and branches
// ---------------------------------------------------------------------------

#[test]
fn zero_queries_and_keys_leave_only_the_bias() {
    let q = Tensor::<f64>::zeros([3, 1, 4, 2]);
    let k = Tensor::<f64>::zeros([3, 1, 4, 2]);
    let b = random_tensor(Shape::new(1, 1, 4, 4), -1.0, 1.0, &mut rng(16));
    let s = attention_scores(&q, &k, &b).unwrap();
    for p in 0..3 {
        assert_eq!(&s.data()[p * 16..(p + 1) * 16], b.data());
    }
}

#[test]
fn scalar_score_and_scale_factor() {
    let q = Tensor::<f64>::from_f64_slice([1, 1, 1, 1], &[2.0]);
    let k = Tensor::<f64>::from_f64_slice([1, 1, 1, 1], &[3.0]);
    let b = Tensor::<f64>::zeros([1, 1, 1, 1]);
    assert_eq!(attention_scores(&q, &k, &b).unwrap().item(), 6.0);

    // d = 4 halves raw dot products (1/sqrt(4)) relative to unscaled
    let mut r = rng(17);
    let q = random_tensor(Shape::new(2, 1, 3, 4), -1.0, 1.0, &mut r);
    let k = random_tensor(Shape::new(2, 1, 3, 4), -1.0, 1.0, &mut r);
    let zero_b = Tensor::<f64>::zeros([1, 1, 3, 3]);
    let s = attention_scores(&q, &k, &zero_b).unwrap();
    let raw = ops::bmm_nt(&q, &k).unwrap();
    for (a, b) in s.data().iter().zip(raw.data()) {
        assert!((a - b / 2.0).abs() < 1e-15);
    }
}

#[test]
fn branch_named_examples() {
    let s = Tensor::<f64>::from_f64_slice([1, 1, 2, 2], &[1.0, -1.0, 0.5, 2.0]);
    assert_eq!(sal(&s).data(), &[1.0, 0.0, 0.25, 4.0]);

    let neg = Tensor::<f64>::full([2, 1, 3, 3], -0.5);
    assert!(sal(&neg).data().iter().all(|&v| v == 0.0));

    let mut r = rng(18);
    let s = random_tensor(Shape::new(4, 1, 5, 5), -2.0, 2.0, &mut r);
    for row in dal(&s).unwrap().data().chunks(5) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    // sparsity fraction equals the fraction of nonpositive logits
    let zeros = sal(&s).data().iter().filter(|&&v| v == 0.0).count();
    let nonpos = s.data().iter().filter(|&&v| v <= 0.0).count();
    assert_eq!(zeros, nonpos);
}

#[test]
fn omega_is_a_two_point_simplex() {
    let mut r = rng(19);
    for _ in 0..50 {
        let mut p = hal_params(2, 2, 2, 20);
        for v in p.omega_logits.data_mut() {
            *v = r.gen_range(-8.0..8.0);
        }
        let (w1, w2) = p.omega().unwrap();
        let (a, b) = (w1.item(), w2.item());
        assert!(a >= 0.0 && b >= 0.0);
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// HAL behavior
// ---------------------------------------------------------------------------

/// DAL-only reference path assembled from public ops.
fn pure_dal_reference(f: &Tensor<f64>, p: &HalParams<f64>) -> Tensor<f64> {
    let s = f.shape();
    let (m, c, d) = (p.patch, s.c(), p.dim);
    let patches = ops::patch_partition(f, m).unwrap();
    let pc = patches.shape().n();
    let m2 = m * m;
    let flat = patches.reshape([1, 1, pc * m2, c]).unwrap();
    let q = flat.matmul(&p.w_q).unwrap().reshape([pc, 1, m2, d]).unwrap();
    let k = flat.matmul(&p.w_k).unwrap().reshape([pc, 1, m2, d]).unwrap();
    let v = flat.matmul(&p.w_v).unwrap().reshape([pc, 1, m2, d]).unwrap();
    let scores = attention_scores(&q, &k, &p.bias_table).unwrap();
    let att = dal(&scores).unwrap();
    let out = ops::bmm_nn(&att, &v).unwrap();
    let proj = out
        .reshape([1, 1, pc * m2, d])
        .unwrap()
        .matmul(&p.w_out)
        .unwrap()
        .reshape([pc, 1, m2, c])
        .unwrap();
    ops::patch_merge(&proj, s, m).unwrap()
}

#[test]
fn omega_one_zero_limit_is_the_pure_dense_path() {
    let mut p = hal_params(4, 4, 2, 21);
    p.omega_logits = Tensor::from_f64_slice([1, 1, 1, 2], &[40.0, -40.0]);
    let f = random_tensor(Shape::new(1, 4, 4, 4), -1.0, 1.0, &mut rng(22));
    let got = hal(&f, &p, None).unwrap();
    let want = pure_dal_reference(&f, &p);
    let err = max_rel_err(got.data(), want.data());
    assert!(err < 1e-6, "pure-DAL limit error {err:.3e}");
}

#[test]
fn fully_filtered_sparse_branch_yields_zero_output() {
    let mut p = hal_params(2, 2, 2, 23);
    // omega = (0, 1): sparse branch only
    p.omega_logits = Tensor::from_f64_slice([1, 1, 1, 2], &[-40.0, 40.0]);
    // bias drives every score nonpositive
    p.bias_table = Tensor::full([1, 1, 4, 4], -100.0);
    let f = random_tensor(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng(24));
    let out = hal(&f, &p, None).unwrap();
    assert!(out.data().iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn hal_matches_flat_hand_computation() {
    // M = 2, C = d = 2, one 2x2 single-patch map: trace every equation by hand.
    let m = 2;
    let mut p = HalParams::<f64>::init(2, 2, m, &mut rng(25));
    p.w_q = Tensor::from_f64_slice([1, 1, 2, 2], &[0.5, -0.25, 1.0, 0.75]);
    p.w_k = Tensor::from_f64_slice([1, 1, 2, 2], &[-0.5, 0.25, 0.5, -1.0]);
    p.w_v = Tensor::from_f64_slice([1, 1, 2, 2], &[1.0, 0.5, -0.5, 0.25]);
    p.w_out = Tensor::from_f64_slice([1, 1, 2, 2], &[0.75, -0.5, 0.25, 1.0]);
    p.bias_table = Tensor::from_f64_slice(
        [1, 1, 4, 4],
        &[
            0.1, -0.2, 0.3, 0.0, 0.2, 0.1, -0.1, 0.4, -0.3, 0.2, 0.0, 0.1, 0.0, -0.4, 0.2, 0.3,
        ],
    );
    p.omega_logits = Tensor::from_f64_slice([1, 1, 1, 2], &[0.3, -0.2]);
    // feature map rows (pixel-major): 4 pixels x 2 channels
    let rows = [[0.4, -0.6], [1.0, 0.2], [-0.8, 0.5], [0.3, 0.9]];
    let mut data = vec![0.0; 8];
    for (pix, r) in rows.iter().enumerate() {
        for ch in 0..2 {
            data[ch * 4 + pix] = r[ch]; // NCHW layout, H*W = 4
        }
    }
    let f = Tensor::from_f64_slice([1, 2, 2, 2], &data);
    let got = hal(&f, &p, None).unwrap();

    // flat scalar computation of the same pipeline
    let matvec = |w: &Tensor<f64>, x: [f64; 2]| -> [f64; 2] {
        let wd = w.data();
        [wd[0] * x[0] + wd[2] * x[1], wd[1] * x[0] + wd[3] * x[1]]
    };
    let q: Vec<[f64; 2]> = rows.iter().map(|&r| matvec(&p.w_q, r)).collect();
    let k: Vec<[f64; 2]> = rows.iter().map(|&r| matvec(&p.w_k, r)).collect();
    let v: Vec<[f64; 2]> = rows.iter().map(|&r| matvec(&p.w_v, r)).collect();
    let sqrt_d = 2.0f64.sqrt();
    let mut scores = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let dot = q[i][0] * k[j][0] + q[i][1] * k[j][1];
            scores[i][j] = dot / sqrt_d + p.bias_table.data()[i * 4 + j];
        }
    }
    let (e0, e1) = (0.3f64.exp(), (-0.2f64).exp());
    let (w1, w2) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let mut blended = [[0.0; 4]; 4];
    for i in 0..4 {
        let mx = scores[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores[i].iter().map(|s| (s - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..4 {
            let soft = exps[j] / sum;
            let sparse = scores[i][j].max(0.0).powi(2);
            blended[i][j] = w1 * soft + w2 * sparse;
        }
    }
    let mut want = vec![0.0; 8];
    for i in 0..4 {
        let mut att_v = [0.0; 2];
        for j in 0..4 {
            att_v[0] += blended[i][j] * v[j][0];
            att_v[1] += blended[i][j] * v[j][1];
        }
        let projected = matvec(&p.w_out, att_v);
        for ch in 0..2 {
            want[ch * 4 + i] = projected[ch];
        }
    }
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn hal_rejects_indivisible_extents_and_preserves_shape() {
    let p = hal_params(2, 2, 4, 26);
    let bad = Tensor::<f64>::zeros([1, 2, 6, 6]);
    assert!(hal(&bad, &p, None).is_err());
    for edge in [8usize, 16] {
        let f = random_tensor(Shape::new(2, 2, edge, edge), -1.0, 1.0, &mut rng(27));
        assert_eq!(hal(&f, &p, None).unwrap().shape(), f.shape());
    }
}

// ---------------------------------------------------------------------------
// skip_refine
// ---------------------------------------------------------------------------

#[test]
fn series_with_saturated_cbam_equals_hal_alone() {
    let mut c = cbam_params(2, 2, 28);
    for v in c.mlp_w1.data_mut() {
        *v = 60.0;
    }
    for v in c.mlp_w2.data_mut() {
        *v = 60.0;
    }
    for v in c.spatial_kernel.data_mut() {
        *v = 60.0;
    }
    let h = hal_params(2, 2, 2, 29);
    let f = random_tensor(Shape::new(1, 2, 4, 4), 0.3, 1.0, &mut rng(30));
    let series = skip_refine(&f, &c, &h, SkipMode::Series).unwrap();
    let hal_only = hal(&f, &h, None).unwrap();
    assert_eq!(series.data(), hal_only.data());
}

#[test]
fn parallel_sum_with_zeroed_value_projection_equals_cbam_alone() {
    let c = cbam_params(2, 2, 31);
    let mut h = hal_params(2, 2, 2, 32);
    h.w_v = zeroed::<f64>(h.w_v);
    let f = random_tensor(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng(33));
    let parallel = skip_refine(&f, &c, &h, SkipMode::ParallelSum).unwrap();
    let cbam_only = cbam(&f, &c, None).unwrap();
    for (a, b) in parallel.data().iter().zip(cbam_only.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn both_modes_preserve_shape_at_every_level() {
    for (ch, edge) in [(2usize, 16usize), (4, 8)] {
        let c = cbam_params(ch, 2, 34);
        let h = hal_params(ch, ch, 4, 35);
        let f = random_tensor(Shape::new(1, ch, edge, edge), -1.0, 1.0, &mut rng(36));
        for mode in [SkipMode::Series, SkipMode::ParallelSum] {
            assert_eq!(skip_refine(&f, &c, &h, mode).unwrap().shape(), f.shape());
        }
    }
}

// ---------------------------------------------------------------------------
// gradients: every attention parameter is alive and matches finite diffs
// ---------------------------------------------------------------------------

#[test]
fn cbam_parameter_gradients_match_finite_differences() {
    let p = cbam_params(4, 2, 37);
    let f = random_tensor(Shape::new(1, 4, 4, 4), -1.0, 1.0, &mut rng(38));
    let inputs = [f, p.mlp_w1.clone(), p.mlp_w2.clone(), p.spatial_kernel.clone()];
    common::check_grads("cbam", &inputs, |v| {
        let params = CbamParams {
            mlp_w1: v[1].clone(),
            mlp_w2: v[2].clone(),
            spatial_kernel: v[3].clone(),
            reduction: 2,
        };
        cbam(&v[0], &params, None).unwrap()
    });
}

#[test]
fn hal_parameter_gradients_match_finite_differences() {
    let p = hal_params(2, 2, 2, 39);
    let f = random_tensor(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng(40));
    let inputs = [
        f,
        p.w_q.clone(),
        p.w_k.clone(),
        p.w_v.clone(),
        p.w_out.clone(),
        p.bias_table.clone(),
        p.omega_logits.clone(),
    ];
    common::check_grads("hal", &inputs, |v| {
        let params = HalParams {
            w_q: v[1].clone(),
            w_k: v[2].clone(),
            w_v: v[3].clone(),
            w_out: v[4].clone(),
            bias_table: v[5].clone(),
            omega_logits: v[6].clone(),
            patch: 2,
            dim: 2,
        };
        hal(&v[0], &params, None).unwrap()
    });
}

#[test]
fn no_dead_branch_under_a_generic_loss() {
    let c = cbam_params(2, 2, 41);
    let h = hal_params(2, 2, 2, 42);
    let f0 = random_tensor(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng(43));

    let tape = Tape::new();
    let vars: Vec<Tensor<f64>> = [
        &c.mlp_w1,
        &c.mlp_w2,
        &c.spatial_kernel,
        &h.w_q,
        &h.w_k,
        &h.w_v,
        &h.w_out,
        &h.bias_table,
        &h.omega_logits,
    ]
    .iter()
    .map(|t| tape.var(t))
    .collect();
    let cp = CbamParams {
        mlp_w1: vars[0].clone(),
        mlp_w2: vars[1].clone(),
        spatial_kernel: vars[2].clone(),
        reduction: 2,
    };
    let hp = HalParams {
        w_q: vars[3].clone(),
        w_k: vars[4].clone(),
        w_v: vars[5].clone(),
        w_out: vars[6].clone(),
        bias_table: vars[7].clone(),
        omega_logits: vars[8].clone(),
        patch: 2,
        dim: 2,
    };
    let out = skip_refine(&f0, &cp, &hp, SkipMode::Series).unwrap();
    // generic loss: weighted sum with irrational-ish weights
    let w = random_tensor(out.shape(), 0.5, 1.5, &mut rng(44));
    let loss = ops::sum_all(&ops::mul(&out, &w).unwrap());
    tape.backward(&loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(v).unwrap_or_else(|| panic!("param {i} has no gradient"));
        assert!(
            g.iter().any(|&x| x != 0.0),
            "param {i} gradient is identically zero"
        );
    }
}

#[test]
fn hal_input_gradient_matches_finite_differences_directly() {
    // direct finite_diff_grad usage on the input tensor
    let p = hal_params(2, 2, 2, 45);
    let f0 = random_tensor(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng(46));
    let tape = Tape::new();
    let fv = tape.var(&f0);
    let loss = ops::sum_all(&hal(&fv, &p, None).unwrap());
    tape.backward(&loss).unwrap();
    let analytic = tape.grad(&fv).unwrap();
    let fd = finite_diff_grad(
        |t| hal(t, &p, None).unwrap().data().iter().sum(),
        &f0,
        1e-5,
    );
    assert!(max_rel_err(&analytic, &fd) < 1e-6);
}
