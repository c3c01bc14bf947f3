//! Shared oracles and harnesses for the integration tests.
//!
//! Everything here is deliberately dumb and independent of the library's
//! kernels: quintuple-loop convolution, per-pixel reductions, and a
//! finite-difference comparison harness.

#![allow(dead_code)]

use aseg::gradcheck::{finite_diff_grad, max_rel_err};
use aseg::ops;
use aseg::{Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data)
}

/// Reference cross-correlation: quintuple loop over output and kernel.
pub fn naive_conv2d(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> (Vec<f64>, Shape) {
    let (n, cin, h, wd) = (xs.n(), xs.c(), xs.h(), xs.w());
    let (cout, kh, kw) = (ws.n(), ws.h(), ws.w());
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let os = Shape::new(n, cout, oh, ow);
    let mut y = vec![0.0; os.numel()];
    for ni in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..cin {
                        for r in 0..kh {
                            for s in 0..kw {
                                let iy = (oy * stride + r * dilation) as isize - padding as isize;
                                let ix = (ox * stride + s * dilation) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[xs.index(ni, ic, iy as usize, ix as usize)]
                                        * w[ws.index(oc, ic, r, s)];
                                }
                            }
                        }
                    }
                    y[os.index(ni, oc, oy, ox)] = acc;
                }
            }
        }
    }
    (y, os)
}

/// Reference windowed pooling.
pub fn naive_pool2d(
    x: &[f64],
    xs: Shape,
    max_mode: bool,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Shape) {
    let oh = (xs.h() - window) / stride + 1;
    let ow = (xs.w() - window) / stride + 1;
    let os = Shape::new(xs.n(), xs.c(), oh, ow);
    let mut y = vec![0.0; os.numel()];
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if max_mode { f64::NEG_INFINITY } else { 0.0 };
                    for dy in 0..window {
                        for dx in 0..window {
                            let v = x[xs.index(n, c, oy * stride + dy, ox * stride + dx)];
                            if max_mode {
                                acc = acc.max(v);
                            } else {
                                acc += v;
                            }
                        }
                    }
                    if !max_mode {
                        acc /= (window * window) as f64;
                    }
                    y[os.index(n, c, oy, ox)] = acc;
                }
            }
        }
    }
    (y, os)
}

/// Compares the tape gradient of `f` against central differences for every
/// input, using a random fixed weighting of the output as the scalar loss.
///
/// `f` must apply the same computation whether or not its inputs are
/// tracked. Tolerance is the tensor-core invariant: max relative error below
/// 1e-6 at h = 1e-5 in 64-bit mode.
pub fn check_grads(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    let mut wrng = rng(0x5eed ^ name.len() as u64);
    // forward once untracked to learn the output shape
    let probe = f(inputs);
    let weights: Vec<f64> = (0..probe.numel()).map(|_| wrng.gen_range(-1.0..1.0)).collect();
    let weigh = |y: &Tensor<f64>| -> f64 {
        y.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<Tensor<f64>> = inputs.iter().map(|x| tape.var(x)).collect();
    let y = f(&vars);
    let w_t = Tensor::from_vec(y.shape(), weights.clone());
    let loss = ops::sum_all(&ops::mul(&y, &w_t).unwrap());
    tape.backward(&loss).unwrap();

    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(var)
            .unwrap_or_else(|| panic!("{name}: input {i} received no gradient"));
        let fd = finite_diff_grad(
            |t| {
                let mut probe_inputs: Vec<Tensor<f64>> = inputs.to_vec();
                probe_inputs[i] = t.clone();
                weigh(&f(&probe_inputs))
            },
            &inputs[i],
            1e-5,
        );
        let err = max_rel_err(&analytic, &fd);
        assert!(
            err < 1e-6,
            "{name}: input {i} max relative error {err:.3e} (tolerance 1e-6)"
        );
    }
}
