//! Segmentation mIoU from a confusion matrix and detection mAP from ranked matches.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::det::{iou, Detection, GtBox};
use crate::error::{CoreError, Result};
use crate::seg::{SegMask, IGNORE_LABEL};

/// `counts[gt * classes + pred]` pixel tallies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds one prediction/ground-truth pair; ignored ground-truth pixels are skipped.
    pub fn add(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(CoreError::Contract(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(CoreError::Contract(format!("label outside [0, {})", self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// IoU per class present in the ground truth (`None` for absent classes).
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let gt_total: u64 = (0..self.classes).map(|p| self.count(c, p)).sum();
                if gt_total == 0 {
                    return None;
                }
                let pred_total: u64 = (0..self.classes).map(|g| self.count(g, c)).sum();
                let tp = self.count(c, c);
                Some(tp as f64 / (gt_total + pred_total - tp) as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(CoreError::Contract("no evaluable pixels".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Mean IoU over classes present in the ground truth, from the confusion matrix
/// aggregated over all images.
pub fn evaluate_miou(pred: &[SegMask], gt: &[SegMask], classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CoreError::Contract(format!("{} predictions for {} masks", pred.len(), gt.len())));
    }
    let mut conf = Confusion::new(classes);
    for (p, g) in pred.iter().zip(gt) {
        conf.add(p, g)?;
    }
    conf.miou()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the monotone precision envelope over every recall step.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Average precision of a ranked list of true/false positive flags against `n_gt` objects.
pub fn average_precision(tp: &[bool], n_gt: usize, mode: ApMode) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall.iter().zip(&envelope).find(|(r, _)| **r >= t).map_or(0.0, |(_, p)| *p)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Per-class average precision; `None` for classes without ground truth.
pub fn class_average_precision(
    dets: &[(usize, Detection)],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<Vec<Option<f64>>> {
    if let Some((img, _)) = dets.iter().find(|(img, _)| *img >= gts.len()) {
        return Err(CoreError::Contract(format!("detection for image {img} of {}", gts.len())));
    }
    let mut out = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class).count()).sum();
        if n_gt == 0 {
            out.push(None);
            continue;
        }
        let mut ranked: Vec<&(usize, Detection)> = dets.iter().filter(|(_, d)| d.class_id == class).collect();
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let tp: Vec<bool> = ranked
            .iter()
            .map(|(img, d)| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts[*img].iter().enumerate() {
                    if g.class_id != class || used[*img][j] {
                        continue;
                    }
                    let v = iou(&d.bbox, &g.bbox);
                    if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                match best {
                    Some((j, _)) => {
                        used[*img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        out.push(Some(average_precision(&tp, n_gt, mode)));
    }
    Ok(out)
}

/// Mean AP over classes with at least one ground-truth object (0 when there are none).
/// `dets` pairs each detection with the index of its image in `gts`.
pub fn evaluate_map(dets: &[(usize, Detection)], gts: &[Vec<GtBox>], num_classes: usize, iou_threshold: f64, mode: ApMode) -> Result<f64> {
    let aps: Vec<f64> = class_average_precision(dets, gts, num_classes, iou_threshold, mode)?
        .into_iter()
        .flatten()
        .collect();
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_of_perfect_ranking() {
        assert_eq!(average_precision(&[true, true], 2, ApMode::AllPoint), 1.0);
        assert_eq!(average_precision(&[true, true], 2, ApMode::ElevenPoint), 1.0);
        assert_eq!(average_precision(&[], 2, ApMode::AllPoint), 0.0);
    }

    #[test]
    fn ap_hand_case() {
        // ranks: TP FP TP with 2 gts -> envelope 1, 2/3, 2/3 over recall 0.5, 0.5, 1
        let ap = average_precision(&[true, false, true], 2, ApMode::AllPoint);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }
}
