//! Synthetic ultrasound-like dataset: bright-rimmed ellipses on a dark
//! speckled background, with exact analytic masks.
//!
//! Every sample carries one or two ellipses with random center, axes and
//! rotation; the mask is the exact set of pixels whose centers satisfy the
//! ellipse interior inequality, so tests can re-derive it from the stored
//! parameters. Axes are bounded so the foreground fraction stays within
//! `[0.01, 0.35]` at the working resolutions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use super::{Dataset, Sample};

/// Generating parameters of one lesion, in pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    /// Interior test for integer pixel coordinates `(row, col)`.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rho(row, col) <= 1.0
    }

    /// Normalized squared radius: 1 on the boundary.
    pub fn rho(&self, row: usize, col: usize) -> f64 {
        let dx = col as f64 - self.cx;
        let dy = row as f64 - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn render(edge: usize, ellipses: &[Ellipse], rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let n = edge * edge;
    let mut image = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for row in 0..edge {
        for col in 0..edge {
            let idx = row * edge + col;
            // multiplicative speckle: sum of two uniforms, mean 1
            let speckle = rng.gen_range(0.0..1.0) + rng.gen_range(0.0..1.0);
            let mut v = 0.12 * speckle;
            let mut rho_min = f64::INFINITY;
            for e in ellipses {
                let rho = e.rho(row, col);
                rho_min = rho_min.min(rho);
                if rho <= 1.0 {
                    mask[idx] = 1;
                }
            }
            if mask[idx] == 1 {
                v = 0.42 + 0.13 * (speckle - 1.0);
            }
            // bright rim around the boundary, fading with |rho - 1|
            if (rho_min - 1.0).abs() <= 0.3 {
                let rim = 0.9 - 1.5 * (rho_min - 1.0).abs();
                let textured = rim * (0.85 + 0.15 * speckle);
                if textured > v {
                    v = textured;
                }
            }
            image[idx] = v.clamp(0.0, 1.0) as f32;
        }
    }
    (image, mask)
}

/// Seed-deterministic synthetic dataset with generator metadata.
pub fn synth_dataset_with_meta(
    count: usize,
    seed: u64,
    edge: usize,
) -> (Dataset, Vec<Vec<Ellipse>>) {
    assert!(count >= 1, "synthetic dataset needs at least one sample");
    assert!(edge >= 16, "synthetic samples need at least 16x16 pixels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut meta = Vec::with_capacity(count);
    let e = edge as f64;
    for i in 0..count {
        let n_ellipses = if rng.gen_range(0.0..1.0) < 0.5 { 1 } else { 2 };
        let ellipses: Vec<Ellipse> = (0..n_ellipses)
            .map(|_| Ellipse {
                cx: rng.gen_range(0.3 * e..0.7 * e),
                cy: rng.gen_range(0.3 * e..0.7 * e),
                a: rng.gen_range(0.07 * e..0.22 * e),
                b: rng.gen_range(0.07 * e..0.22 * e),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let (image, mask) = render(edge, &ellipses, &mut rng);
        samples.push(Sample {
            id: format!("synth{i:04}"),
            h: edge,
            w: edge,
            image,
            mask,
        });
        meta.push(ellipses);
    }
    (
        Dataset {
            samples,
            h: edge,
            w: edge,
        },
        meta,
    )
}

/// Seed-deterministic synthetic dataset at the working resolution.
pub fn synth_dataset(count: usize, seed: u64, edge: usize) -> Dataset {
    synth_dataset_with_meta(count, seed, edge).0
}
