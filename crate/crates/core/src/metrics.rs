//! Segmentation evaluation: class-wise intersection over union.

use crate::autodiff::IGNORE_LABEL;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("prediction has {pred} pixels, ground truth {gt}")]
pub struct MiouShapeError {
    pred: usize,
    gt: usize,
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// Mean IoU over classes present in the ground truth.
    pub miou: f64,
    /// Per-class IoU; NaN for classes absent from both maps.
    pub per_class: Vec<f64>,
}

/// Ignore-labeled ground-truth pixels are excluded entirely.
pub fn miou(pred: &[i64], gt: &[i64], n_classes: usize) -> Result<MiouResult, MiouShapeError> {
    if pred.len() != gt.len() {
        return Err(MiouShapeError { pred: pred.len(), gt: gt.len() });
    }
    let mut inter = vec![0u64; n_classes];
    let mut pred_cnt = vec![0u64; n_classes];
    let mut gt_cnt = vec![0u64; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        pred_cnt[p] += 1;
        gt_cnt[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let mut per_class = vec![f64::NAN; n_classes];
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        let union = pred_cnt[c] + gt_cnt[c] - inter[c];
        if union > 0 {
            per_class[c] = inter[c] as f64 / union as f64;
        }
        if gt_cnt[c] > 0 {
            sum += per_class[c];
            present += 1;
        }
    }
    let miou = if present > 0 { sum / present as f64 } else { 0.0 };
    Ok(MiouResult { miou, per_class })
}
