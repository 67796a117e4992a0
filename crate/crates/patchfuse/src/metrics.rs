//! Segmentation evaluation: per-class IoU and its mean.

use crate::pseudo_label::{PseudoMask, IGNORE_LABEL};

/// Accumulated intersection/union counts over a mask set, per class
/// (background is class 0). Classes that never appear in prediction or
/// ground truth have no IoU and are excluded from the mean.
#[derive(Debug, Clone)]
pub struct MIoUReport {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixels: u64,
    pub ignored_pixels: u64,
    /// Image pairs skipped because their dimensions disagreed.
    pub skipped_images: usize,
}

impl MIoUReport {
    pub fn classes(&self) -> usize {
        self.intersection.len()
    }
}

/// Accumulates confusion counts pair by pair; pixels whose ground truth is
/// the ignore label do not count. Pairs with mismatched dimensions are
/// skipped (and counted) rather than failing the whole evaluation.
#[derive(Debug, Clone)]
pub struct IoUAccumulator {
    classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    pixels: u64,
    ignored: u64,
    skipped: usize,
}

impl IoUAccumulator {
    /// `classes` includes the background class.
    pub fn new(classes: usize) -> Self {
        IoUAccumulator {
            classes,
            intersection: vec![0; classes],
            union: vec![0; classes],
            pixels: 0,
            ignored: 0,
            skipped: 0,
        }
    }

    pub fn add(&mut self, pred: &PseudoMask, truth: &PseudoMask) {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            eprintln!(
                "warning: skipping mask pair with mismatched dimensions {}x{} vs {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            );
            self.skipped += 1;
            return;
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            self.pixels += 1;
            let (p, t) = (p as usize, t as usize);
            if p == t {
                if p < self.classes {
                    self.intersection[p] += 1;
                    self.union[p] += 1;
                }
            } else {
                if p < self.classes {
                    self.union[p] += 1;
                }
                if t < self.classes {
                    self.union[t] += 1;
                }
            }
        }
    }

    pub fn report(&self) -> MIoUReport {
        let per_class_iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let live: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = if live.is_empty() {
            0.0
        } else {
            live.iter().sum::<f64>() / live.len() as f64
        };
        MIoUReport {
            intersection: self.intersection.clone(),
            union: self.union.clone(),
            per_class_iou,
            mean_iou,
            pixels: self.pixels,
            ignored_pixels: self.ignored,
            skipped_images: self.skipped,
        }
    }
}

/// Evaluate a set of (prediction, ground-truth) pairs.
pub fn evaluate_masks(pairs: &[(PseudoMask, PseudoMask)], classes: usize) -> MIoUReport {
    let mut acc = IoUAccumulator::new(classes);
    for (pred, truth) in pairs {
        acc.add(pred, truth);
    }
    acc.report()
}
