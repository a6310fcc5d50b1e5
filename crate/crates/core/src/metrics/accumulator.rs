use serde::{Deserialize, Serialize};

use super::mask::{binarize, connected_components, BinaryMask, Connectivity, TargetComponent};
use super::roc::RocPoint;
use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Number of thresholds `k / 255` swept for ROC curves.
pub const ROC_LEVELS: usize = 256;

/// Centroid deviation (pixels) below which a prediction detects a target.
pub const MATCH_DISTANCE: f64 = 3.0;

/// Result of matching one image's predicted components against its targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TargetMatch {
    pub detected: u64,
    pub targets: u64,
    /// Pixels of predicted components that matched no target.
    pub false_pixels: u64,
}

/// Greedy matching in order of increasing centroid distance; each target and
/// each prediction is used at most once and only pairs strictly closer than
/// [`MATCH_DISTANCE`] qualify.
pub fn match_targets(pred: &[TargetComponent], gt: &[TargetComponent]) -> TargetMatch {
    let mut pairs = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let d = (g.centroid.0 - p.centroid.0).hypot(g.centroid.1 - p.centroid.1);
            if d < MATCH_DISTANCE {
                pairs.push((d, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut detected = 0;
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            detected += 1;
        }
    }
    let false_pixels = pred
        .iter()
        .zip(&pred_used)
        .filter(|(_, &used)| !used)
        .map(|(p, _)| p.area() as u64)
        .sum();
    TargetMatch {
        detected,
        targets: gt.len() as u64,
        false_pixels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct SampleOverlap {
    key: u64,
    tp: u64,
    union: u64,
}

/// Mergeable evaluation state. All sums are integers and per-sample ratios are
/// reduced in key order, so any partition of the samples merges to bitwise
/// identical metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalAccumulator {
    connectivity: Connectivity,
    tp: u64,
    gt_pixels: u64,
    pred_pixels: u64,
    samples: Vec<SampleOverlap>,
    detected: u64,
    targets: u64,
    false_pixels: u64,
    pixels: u64,
    roc_detected: Vec<u64>,
    roc_false: Vec<u64>,
}

/// Metric values. `fa` is a plain ratio (multiply by 1e6 for the usual unit).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub niou: f64,
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    pub pd: f64,
    pub fa: f64,
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what}: empty denominator, reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalAccumulator {
    pub fn new(connectivity: Connectivity) -> Self {
        Self {
            connectivity,
            ..Self::default()
        }
    }

    pub fn samples(&self) -> usize {
        self.samples.len()
    }

    /// Adds one binarized prediction. `key` orders samples for the nIoU reduction.
    pub fn add(&mut self, key: u64, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(shape_err(
                "evaluate",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let tp = pred.overlap(gt) as u64;
        let (t, p) = (gt.count() as u64, pred.count() as u64);
        self.tp += tp;
        self.gt_pixels += t;
        self.pred_pixels += p;
        self.samples.push(SampleOverlap {
            key,
            tp,
            union: t + p - tp,
        });
        let gt_c = connected_components(gt, self.connectivity);
        let m = match_targets(&connected_components(pred, self.connectivity), &gt_c);
        self.detected += m.detected;
        self.targets += m.targets;
        self.false_pixels += m.false_pixels;
        self.pixels += gt.area() as u64;
        Ok(())
    }

    /// Adds a saliency map: binarizes at `threshold` for the fixed-threshold
    /// metrics and sweeps all ROC thresholds.
    pub fn add_saliency<T: Float>(
        &mut self,
        key: u64,
        map: &Tensor<T>,
        gt: &BinaryMask,
        threshold: f64,
    ) -> Result<()> {
        self.add(key, &binarize(map, threshold)?, gt)?;
        if self.roc_detected.is_empty() {
            self.roc_detected = vec![0; ROC_LEVELS];
            self.roc_false = vec![0; ROC_LEVELS];
        }
        let gt_c = connected_components(gt, self.connectivity);
        for k in 0..ROC_LEVELS {
            let pred = binarize(map, k as f64 / (ROC_LEVELS - 1) as f64)?;
            let m = match_targets(&connected_components(&pred, self.connectivity), &gt_c);
            self.roc_detected[k] += m.detected;
            self.roc_false[k] += m.false_pixels;
        }
        Ok(())
    }

    /// Combines two partial accumulators.
    pub fn merge(mut self, other: &Self) -> Self {
        self.tp += other.tp;
        self.gt_pixels += other.gt_pixels;
        self.pred_pixels += other.pred_pixels;
        self.samples.extend_from_slice(&other.samples);
        self.samples.sort_unstable();
        self.detected += other.detected;
        self.targets += other.targets;
        self.false_pixels += other.false_pixels;
        self.pixels += other.pixels;
        if self.roc_detected.is_empty() {
            self.roc_detected = other.roc_detected.clone();
            self.roc_false = other.roc_false.clone();
        } else if !other.roc_detected.is_empty() {
            for k in 0..ROC_LEVELS {
                self.roc_detected[k] += other.roc_detected[k];
                self.roc_false[k] += other.roc_false[k];
            }
        }
        self
    }

    pub fn metrics(&self) -> Metrics {
        let precision = ratio(self.tp, self.pred_pixels, "precision");
        let recall = ratio(self.tp, self.gt_pixels, "recall");
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let mut samples = self.samples.clone();
        samples.sort_unstable();
        let niou = if samples.is_empty() {
            0.0
        } else {
            let sum: f64 = samples
                .iter()
                .map(|s| {
                    if s.union == 0 {
                        0.0
                    } else {
                        s.tp as f64 / s.union as f64
                    }
                })
                .sum();
            sum / samples.len() as f64
        };
        Metrics {
            iou: ratio(self.tp, self.gt_pixels + self.pred_pixels - self.tp, "IoU"),
            niou,
            f_measure,
            precision,
            recall,
            pd: ratio(self.detected, self.targets, "Pd"),
            fa: ratio(self.false_pixels, self.pixels, "Fa"),
        }
    }

    /// One `(Fa, Pd)` point per threshold, sorted by Fa. Empty unless saliency
    /// maps were added.
    pub fn roc(&self) -> Vec<RocPoint> {
        let mut pts: Vec<RocPoint> = (0..self.roc_detected.len())
            .map(|k| RocPoint {
                threshold: k as f64 / (ROC_LEVELS - 1) as f64,
                fa: if self.pixels == 0 {
                    0.0
                } else {
                    self.roc_false[k] as f64 / self.pixels as f64
                },
                pd: if self.targets == 0 {
                    0.0
                } else {
                    self.roc_detected[k] as f64 / self.targets as f64
                },
            })
            .collect();
        pts.sort_by(|a, b| a.fa.total_cmp(&b.fa).then(a.pd.total_cmp(&b.pd)));
        pts
    }
}
