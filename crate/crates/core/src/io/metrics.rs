//! COCO-style mask mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::inference::BitMask;

/// One scored prediction on image `image`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalDetection {
    pub image: usize,
    pub label: String,
    pub score: f32,
    pub mask: BitMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTruth {
    pub image: usize,
    pub label: String,
    pub mask: BitMask,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map50: f64,
    pub map50_95: f64,
    /// AP at IoU 0.5 per category with ground truth.
    pub ap50: BTreeMap<String, f64>,
    /// mAP per IoU threshold.
    pub per_threshold: Vec<f64>,
    pub detections: usize,
    pub ground_truths: usize,
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// 101-point interpolated AP of a precision/recall curve given in detection order.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = f64::from(k) / 100.0;
        while j < recall.len() && recall[j] < r {
            j += 1;
        }
        if j < recall.len() {
            sum += envelope[j];
        }
    }
    sum / 101.0
}

/// AP of one category at one threshold. `ious[d][g]` pairs detections (in
/// descending score order) with ground truths; `None` marks different images.
fn category_ap(ious: &[Vec<Option<f64>>], num_gt: usize, threshold: f64) -> f64 {
    let mut taken = vec![false; num_gt];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ious.len());
    let mut recall = Vec::with_capacity(ious.len());
    for (d, row) in ious.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, iou) in row.iter().enumerate() {
            if let Some(iou) = *iou {
                if !taken[g] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (d + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    interpolated_ap(&precision, &recall)
}

/// Mean over categories that have ground truth of the 101-point AP; detections
/// are matched greedily by descending score to the best unmatched ground truth.
pub fn compute_map(detections: &[EvalDetection], truths: &[EvalTruth], thresholds: &[f64]) -> MapReport {
    let mut labels: Vec<&str> = truths.iter().map(|t| t.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut per_threshold = vec![0.0; thresholds.len()];
    let mut ap50 = BTreeMap::new();
    for label in &labels {
        let gts: Vec<&EvalTruth> = truths.iter().filter(|t| t.label == *label).collect();
        let mut dets: Vec<&EvalDetection> = detections.iter().filter(|d| d.label == *label).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let ious: Vec<Vec<Option<f64>>> = dets
            .iter()
            .map(|d| {
                gts.iter()
                    .map(|g| (g.image == d.image).then(|| d.mask.iou(&g.mask)))
                    .collect()
            })
            .collect();
        for (i, &t) in thresholds.iter().enumerate() {
            let ap = category_ap(&ious, gts.len(), t);
            per_threshold[i] += ap / labels.len() as f64;
            if t == 0.5 {
                ap50.insert(label.to_string(), ap);
            }
        }
    }
    let map50 = thresholds
        .iter()
        .position(|&t| t == 0.5)
        .map_or(0.0, |i| per_threshold[i]);
    let map50_95 = if thresholds.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / thresholds.len() as f64
    };
    MapReport {
        map50,
        map50_95,
        ap50,
        per_threshold,
        detections: detections.len(),
        ground_truths: truths.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: usize, y: usize, s: usize) -> BitMask {
        let mut m = BitMask::new(16, 16);
        for yy in y..y + s {
            for xx in x..x + s {
                m.set(yy, xx, true);
            }
        }
        m
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![
            EvalTruth { image: 0, label: "a".into(), mask: square(0, 0, 4) },
            EvalTruth { image: 1, label: "b".into(), mask: square(5, 5, 6) },
        ];
        let dets: Vec<EvalDetection> = gt
            .iter()
            .map(|t| EvalDetection { image: t.image, label: t.label.clone(), score: 0.9, mask: t.mask.clone() })
            .collect();
        let r = compute_map(&dets, &gt, &coco_thresholds());
        assert_eq!(r.map50_95, 1.0);
        assert_eq!(compute_map(&[], &gt, &coco_thresholds()).map50_95, 0.0);
    }

    #[test]
    fn wrong_image_does_not_match() {
        let gt = vec![EvalTruth { image: 0, label: "a".into(), mask: square(0, 0, 4) }];
        let dets = vec![EvalDetection { image: 1, label: "a".into(), score: 0.9, mask: square(0, 0, 4) }];
        assert_eq!(compute_map(&dets, &gt, &[0.5]).map50, 0.0);
    }
}
