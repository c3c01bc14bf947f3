//! Segmentation metrics over binarized masks.

use crate::scalar::Scalar;

/// Pixel tallies of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    /// False negatives (`fn` is reserved).
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Elementwise tally of two same-length binary masks.
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self, String> {
        if pred.len() != truth.len() {
            return Err(format!(
                "confusion_counts: mask lengths differ ({} vs {})",
                pred.len(),
                truth.len()
            ));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(truth) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// Micro-averaging: adds another sample's counts.
    pub fn absorb(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Whether both masks were empty, which triggers the metric convention
    /// of reporting 1.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Intersection over union: `TP / (TP + FP + FN)`; 1 when both masks are
/// empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Dice score (F1): `2 TP / (2 TP + FP + FN)`; 1 when both masks are empty.
pub fn dice_score(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Thresholds values into a binary mask, `>= threshold` mapping to 1.
pub fn binarize<T: Scalar>(values: &[T], threshold: f64) -> Vec<u8> {
    let t = T::from_f64c(threshold);
    values.iter().map(|&v| u8::from(v >= t)).collect()
}

/// One row of a metric report.
#[derive(Clone, Debug)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub iou: f64,
}

/// Micro-averaged metrics plus per-sample rows.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<SampleMetrics>,
    pub totals: ConfusionCounts,
}

impl MetricReport {
    pub fn push(&mut self, sample_id: String, counts: ConfusionCounts) {
        self.totals.absorb(counts);
        self.rows.push(SampleMetrics {
            sample_id,
            dice: dice_score(&counts),
            iou: iou(&counts),
            counts,
        });
    }

    pub fn dice(&self) -> f64 {
        dice_score(&self.totals)
    }

    pub fn iou(&self) -> f64 {
        iou(&self.totals)
    }

    /// Comma-separated rows: `sample_id, tp, fp, fn, tn, dice, iou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,tp,fp,fn,tn,dice,iou\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6}\n",
                r.sample_id, r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.tn, r.dice, r.iou
            ));
        }
        out
    }
}
