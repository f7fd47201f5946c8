//! Evaluation metrics over binary masks and the report layout used by the
//! experiment harness: per-image rows plus mean ± std aggregates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::losses::soft_skeleton;

/// Default skeletonization depth used by the centerline metric and loss;
/// covers vessel widths up to roughly 20 pixels.
pub const SKELETON_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Associative merge, so per-image counts can be computed in parallel
    /// and combined.
    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    fn pred_empty(&self) -> bool {
        self.tp + self.fp == 0
    }

    fn gt_empty(&self) -> bool {
        self.tp + self.fn_ == 0
    }

    /// Both-empty convention: 1. Exactly-one-empty: 0.
    fn overlap_metric(&self, value: impl FnOnce(&Self) -> f64) -> f64 {
        match (self.pred_empty(), self.gt_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) if self.tp == 0 => 0.0,
            _ => value(self),
        }
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.height(), gt.width()),
            actual: format!("{}x{}", pred.height(), pred.width()),
        });
    }
    let mut counts = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        match (p, g) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 0) => counts.tn += 1,
            _ => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.overlap_metric(|c| c.tp as f64 / (c.tp + c.fp) as f64)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.overlap_metric(|c| c.tp as f64 / (c.tp + c.fn_) as f64)
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    (c.tp + c.tn) as f64 / c.total() as f64
}

pub fn dice_score(c: &ConfusionCounts) -> f64 {
    c.overlap_metric(|c| 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
}

fn skeletonize_hard(mask: &Mask, iterations: usize) -> Array2<f32> {
    let (h, w) = (mask.height(), mask.width());
    let tape = Tape::<f32>::new();
    let m4 = mask
        .to_f32()
        .into_shape_with_order((1, 1, h, w))
        .expect("reshape");
    let id = soft_skeleton(&tape, tape.leaf(m4.into_dyn()), iterations);
    tape.value(id)
        .into_dimensionality::<ndarray::Ix4>()
        .expect("BCHW")
        .index_axis(ndarray::Axis(0), 0)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned()
}

/// Centerline Dice: harmonic mean of topology precision (pred skeleton
/// inside gt) and topology sensitivity (gt skeleton inside pred).
///
/// Both masks empty → 1; one skeleton empty while the other is not → 0.
pub fn cldice_metric(pred: &Mask, gt: &Mask, iterations: usize) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", gt.height(), gt.width()),
            actual: format!("{}x{}", pred.height(), pred.width()),
        });
    }
    let skel_p = skeletonize_hard(pred, iterations);
    let skel_g = skeletonize_hard(gt, iterations);
    let sum_p: f64 = skel_p.iter().map(|&v| v as f64).sum();
    let sum_g: f64 = skel_g.iter().map(|&v| v as f64).sum();
    if sum_p == 0.0 && sum_g == 0.0 {
        return Ok(1.0);
    }
    if sum_p == 0.0 || sum_g == 0.0 {
        return Ok(0.0);
    }
    let gt_f = gt.to_f32();
    let pred_f = pred.to_f32();
    let tprec: f64 = skel_p
        .iter()
        .zip(gt_f.iter())
        .map(|(&s, &m)| (s * m) as f64)
        .sum::<f64>()
        / sum_p;
    let tsens: f64 = skel_g
        .iter()
        .zip(pred_f.iter())
        .map(|(&s, &m)| (s * m) as f64)
        .sum::<f64>()
        / sum_g;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// All five reported metrics for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub cldice: f64,
}

impl Metrics {
    pub fn of_pair(pred: &Mask, gt: &Mask) -> Result<Metrics> {
        let c = confusion(pred, gt)?;
        Ok(Metrics {
            precision: precision(&c),
            recall: recall(&c),
            dice: dice_score(&c),
            accuracy: accuracy(&c),
            cldice: cldice_metric(pred, gt, SKELETON_ITERATIONS)?,
        })
    }

    fn as_array(&self) -> [f64; 5] {
        [self.precision, self.recall, self.dice, self.accuracy, self.cldice]
    }

    fn from_array(a: [f64; 5]) -> Metrics {
        Metrics { precision: a[0], recall: a[1], dice: a[2], accuracy: a[3], cldice: a[4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    /// Cross-testing repetition that produced this row, when applicable.
    pub repetition: Option<usize>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Per-image rows plus aggregates. The spread is reported two ways: the
/// sample standard deviation over all per-image rows, and — when repetition
/// tags are present — over per-repetition means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: Metrics,
    pub std_images: Metrics,
    pub std_repetitions: Option<Metrics>,
}

fn mean_std(values: &[[f64; 5]]) -> ([f64; 5], [f64; 5]) {
    let n = values.len() as f64;
    let mut mean = [0.0; 5];
    for v in values {
        for i in 0..5 {
            mean[i] += v[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; 5];
    if values.len() > 1 {
        for v in values {
            for i in 0..5 {
                var[i] += (v[i] - mean[i]).powi(2);
            }
        }
        for v in var.iter_mut() {
            *v /= n - 1.0;
        }
    }
    (mean, var.map(f64::sqrt))
}

impl MetricsReport {
    pub fn aggregate(rows: Vec<MetricsRow>) -> Result<MetricsReport> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty metrics list"));
        }
        let values: Vec<[f64; 5]> = rows.iter().map(|r| r.metrics.as_array()).collect();
        let (mean, std_images) = mean_std(&values);

        let mut reps: Vec<usize> = rows.iter().filter_map(|r| r.repetition).collect();
        reps.sort_unstable();
        reps.dedup();
        let std_repetitions = if reps.len() > 1 && rows.iter().all(|r| r.repetition.is_some()) {
            let rep_means: Vec<[f64; 5]> = reps
                .iter()
                .map(|&rep| {
                    let subset: Vec<[f64; 5]> = rows
                        .iter()
                        .filter(|r| r.repetition == Some(rep))
                        .map(|r| r.metrics.as_array())
                        .collect();
                    mean_std(&subset).0
                })
                .collect();
            Some(Metrics::from_array(mean_std(&rep_means).1))
        } else {
            None
        };

        Ok(MetricsReport {
            rows,
            mean: Metrics::from_array(mean),
            std_images: Metrics::from_array(std_images),
            std_repetitions,
        })
    }

    /// Text table with one row per aggregate, mirroring the usual
    /// "metric: mean ± std" comparison layout.
    pub fn render_table(&self, label: &str) -> String {
        let m = &self.mean;
        let s = &self.std_images;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
            "Approach", "Precision", "Recall", "Dice Score", "Accuracy", "CLDice Score"
        ));
        out.push_str(&format!(
            "{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
            label,
            format!("{:.2} ± {:.2}", m.precision, s.precision),
            format!("{:.2} ± {:.2}", m.recall, s.recall),
            format!("{:.2} ± {:.2}", m.dice, s.dice),
            format!("{:.2} ± {:.2}", m.accuracy, s.accuracy),
            format!("{:.2} ± {:.2}", m.cldice, s.cldice),
        ));
        if let Some(sr) = &self.std_repetitions {
            out.push_str(&format!(
                "{:<40} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
                "  (std over repetitions)",
                format!("± {:.2}", sr.precision),
                format!("± {:.2}", sr.recall),
                format!("± {:.2}", sr.dice),
                format!("± {:.2}", sr.accuracy),
                format!("± {:.2}", sr.cldice),
            ));
        }
        out
    }
}
