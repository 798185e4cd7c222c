//! Segmentation and temporal-consistency metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Global confusion counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub cls: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(cls: usize) -> Self {
        Self {
            cls,
            counts: vec![0; cls * cls],
        }
    }

    pub fn add(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(shape_err("confusion", "pixel count", gt.len(), pred.len()));
        }
        for (&t, &p) in gt.iter().zip(pred) {
            if t >= self.cls || p >= self.cls {
                return Err(shape_err("confusion", "class id", format!("< {}", self.cls), t.max(p)));
            }
            self.counts[t * self.cls + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.cls;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
                let pr: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = gt + pr - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Ground-truth pixel count per class.
    pub fn support(&self) -> Vec<u64> {
        (0..self.cls)
            .map(|c| (0..self.cls).map(|p| self.counts[c * self.cls + p]).sum())
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        let iou = self.iou();
        let sup = self.support();
        let present: Vec<f64> = (0..self.cls).filter(|&c| sup[c] > 0).map(|c| iou[c].unwrap_or(0.0)).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    /// IoU weighted by ground-truth class frequency.
    pub fn wiou(&self) -> f64 {
        let iou = self.iou();
        let sup = self.support();
        let total: u64 = sup.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (0..self.cls)
            .map(|c| sup[c] as f64 / total as f64 * iou[c].unwrap_or(0.0))
            .sum()
    }
}

/// Video consistency of one clip over windows of `n` frames:
/// mean over windows of |∩GT ∩ ∩Pred| / |∩GT|, where ∩ marks pixels whose
/// label is unchanged across the window. `None` when the clip is shorter than `n`.
pub fn video_consistency(gt: &[Vec<usize>], pred: &[Vec<usize>], n: usize) -> Option<f64> {
    let t = gt.len();
    if n == 0 || t < n || pred.len() != t {
        return None;
    }
    let px = gt[0].len();
    let mut acc = 0.0;
    let mut windows = 0usize;
    for s in 0..=t - n {
        let mut gt_const = 0u64;
        let mut both = 0u64;
        for i in 0..px {
            let g0 = gt[s][i];
            if (s + 1..s + n).all(|f| gt[f][i] == g0) {
                gt_const += 1;
                let p0 = pred[s][i];
                if p0 == g0 && (s + 1..s + n).all(|f| pred[f][i] == p0) {
                    both += 1;
                }
            }
        }
        if gt_const > 0 {
            acc += both as f64 / gt_const as f64;
            windows += 1;
        }
    }
    (windows > 0).then(|| acc / windows as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub wiou: f64,
    /// Window length → mean video consistency.
    pub mvc: BTreeMap<usize, f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Accumulates per-clip predictions into [`SegMetrics`].
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    pub confusion: Confusion,
    windows: Vec<usize>,
    vc_sum: Vec<f64>,
    vc_clips: Vec<usize>,
}

impl MetricsAccumulator {
    pub fn new(cls: usize, windows: &[usize]) -> Self {
        Self {
            confusion: Confusion::new(cls),
            windows: windows.to_vec(),
            vc_sum: vec![0.0; windows.len()],
            vc_clips: vec![0; windows.len()],
        }
    }

    /// Adds one clip; returns the window lengths skipped because the clip is too short.
    pub fn add_clip(&mut self, gt: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<Vec<usize>> {
        for (g, p) in gt.iter().zip(pred) {
            self.confusion.add(g, p)?;
        }
        let mut skipped = Vec::new();
        for (k, &n) in self.windows.iter().enumerate() {
            if gt.len() < n {
                skipped.push(n);
                continue;
            }
            if let Some(v) = video_consistency(gt, pred, n) {
                self.vc_sum[k] += v;
                self.vc_clips[k] += 1;
            }
        }
        Ok(skipped)
    }

    pub fn finish(&self) -> SegMetrics {
        let mvc = self
            .windows
            .iter()
            .enumerate()
            .filter(|&(k, _)| self.vc_clips[k] > 0)
            .map(|(k, &n)| (n, self.vc_sum[k] / self.vc_clips[k] as f64))
            .collect();
        SegMetrics {
            miou: self.confusion.miou(),
            wiou: self.confusion.wiou(),
            mvc,
            per_class_iou: self.confusion.iou(),
        }
    }
}
