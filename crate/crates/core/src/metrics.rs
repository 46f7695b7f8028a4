//! Dense label maps, confusion counting and GZLSS segmentation metrics.

use crate::error::TensorError;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Row-major per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(height * width, labels.len(), "label map extent mismatch");
        LabelMap { height, width, labels }
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    /// Pixel count per class id, indexed up to `classes`.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes.max(self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0))];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Sorted distinct class ids present.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..256).filter(|&c| seen[c]).collect()
    }
}

/// Harmonic mean of seen and unseen mIoU, in percent. Zero when both are zero.
pub fn hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    let s = miou_seen + miou_unseen;
    if s == 0.0 {
        0.0
    } else {
        2.0 * miou_seen * miou_unseen / s
    }
}

/// `classes × classes` pixel counts, rows indexed by truth, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<(), TensorError> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(TensorError::dims(
                "compute_metrics",
                &[pred.height, pred.width],
                &[truth.height, truth.width],
            ));
        }
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            let (p, t) = (p as usize, t as usize);
            if t >= self.classes {
                return Err(TensorError::Contract(format!("truth label {t} is not a registered class")));
            }
            if p >= self.classes {
                return Err(TensorError::Contract(format!("predicted label {p} is not a registered class")));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), TensorError> {
        if other.classes != self.classes {
            return Err(TensorError::dims("merge", &[self.classes], &[other.classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU of `class` in percent, or `None` if it occurs in neither prediction
    /// nor truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fn_: u64 = (0..self.classes).map(|p| self.count(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.count(t, class)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| 100.0 * tp as f64 / union as f64)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        100.0 * correct as f64 / total as f64
    }

    /// Metrics over the given seen and unseen class sets.
    pub fn metrics(&self, seen: &[usize], unseen: &[usize]) -> SegMetrics {
        let per_class: BTreeMap<usize, f64> = (0..self.classes).filter_map(|c| self.iou(c).map(|v| (c, v))).collect();
        let mean = |set: &[usize]| {
            let vals: Vec<f64> = set.iter().filter_map(|c| per_class.get(c).copied()).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let (ms, mu) = (mean(seen), mean(unseen));
        SegMetrics {
            pacc: self.pixel_accuracy(),
            per_class_iou: per_class,
            miou_seen: ms,
            miou_unseen: mu,
            hiou: hiou(ms, mu),
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    pub pacc: f64,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub hiou: f64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl SegMetrics {
    /// Flat `key=value` report. hIoU is recomputed from the rounded mIoU values
    /// so the file is self-consistent.
    pub fn to_report(&self) -> String {
        let (s, u) = (round2(self.miou_seen), round2(self.miou_unseen));
        let mut out = String::new();
        for (k, v) in [("pAcc", self.pacc), ("mIoU_seen", s), ("mIoU_unseen", u), ("hIoU", hiou(s, u))] {
            writeln!(out, "{k}={v:.2}").unwrap();
        }
        out
    }

    /// Parses a report written by [`SegMetrics::to_report`]. Per-class values
    /// are not part of the report and come back empty.
    pub fn parse_report(text: &str) -> Option<SegMetrics> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=')?;
            map.insert(k.trim().to_string(), v.trim().parse::<f64>().ok()?);
        }
        if map.len() != 4 {
            return None;
        }
        Some(SegMetrics {
            pacc: *map.get("pAcc")?,
            per_class_iou: BTreeMap::new(),
            miou_seen: *map.get("mIoU_seen")?,
            miou_unseen: *map.get("mIoU_unseen")?,
            hiou: *map.get("hIoU")?,
        })
    }
}

/// Metrics for one prediction/truth pair. Every truth label must be below
/// `classes`.
pub fn compute_metrics(pred: &LabelMap, truth: &LabelMap, classes: usize, seen: &[usize], unseen: &[usize]) -> Result<SegMetrics, TensorError> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    Ok(cm.metrics(seen, unseen))
}
