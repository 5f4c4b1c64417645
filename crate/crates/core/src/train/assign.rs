//! Greedy task-aligned one-to-one matching.

use crate::network::{AnchorGrid, BoxXyxy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    /// Prompt column of the object's category.
    pub class: usize,
    pub bbox: BoxXyxy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub gt: usize,
    pub anchor: usize,
    /// `p^α · IoU^β`.
    pub quality: f32,
    pub iou: f32,
    /// Classification target of this pair.
    pub target: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentResult {
    /// One pair per ground truth, in ground-truth order.
    pub pairs: Vec<Pair>,
    /// Ground truths that had no free in-box anchor and took the nearest free one.
    pub fallbacks: usize,
}

impl AssignmentResult {
    /// Number of repeated ground truths or anchors (0 for a one-to-one result).
    pub fn violations(&self) -> usize {
        let mut gts: Vec<usize> = self.pairs.iter().map(|p| p.gt).collect();
        let mut anchors: Vec<usize> = self.pairs.iter().map(|p| p.anchor).collect();
        gts.sort_unstable();
        anchors.sort_unstable();
        let dups = |v: &[usize]| v.windows(2).filter(|w| w[0] == w[1]).count();
        dups(&gts) + dups(&anchors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignParams {
    pub alpha: f32,
    pub beta: f32,
    /// Targets are normalized quality when true, 1 when false.
    pub soft_targets: bool,
}

impl Default for AssignParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 6.0,
            soft_targets: true,
        }
    }
}

pub fn box_iou(a: &BoxXyxy, b: &BoxXyxy) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn center_in(p: [f32; 2], b: &BoxXyxy) -> bool {
    p[0] >= b[0] && p[0] <= b[2] && p[1] >= b[1] && p[1] <= b[3]
}

/// Each ground truth gets exactly one anchor and each anchor at most one
/// ground truth. Candidates are anchors whose center lies in the box; pairs
/// are taken in descending `q = p^α·IoU^β`, ties by lower anchor then lower
/// ground-truth index. `prob(n, c)` is the predicted probability.
pub fn assign_one_to_one(
    boxes: &[BoxXyxy],
    anchors: &AnchorGrid,
    prob: impl Fn(usize, usize) -> f32,
    gts: &[GroundTruth],
    params: &AssignParams,
) -> AssignmentResult {
    let quality = |n: usize, g: &GroundTruth| -> (f32, f32) {
        let iou = box_iou(&boxes[n], &g.bbox);
        let p = prob(n, g.class).max(0.0);
        (p.powf(params.alpha) * iou.powf(params.beta), iou)
    };
    let mut cands: Vec<(f32, usize, usize, f32)> = Vec::new();
    let mut best_q = vec![0.0f32; gts.len()];
    let mut best_iou = vec![0.0f32; gts.len()];
    for (i, g) in gts.iter().enumerate() {
        for n in 0..anchors.len() {
            if center_in(anchors.points[n], &g.bbox) {
                let (q, iou) = quality(n, g);
                best_q[i] = best_q[i].max(q);
                best_iou[i] = best_iou[i].max(iou);
                cands.push((q, n, i, iou));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut anchor_used = vec![false; anchors.len()];
    let mut gt_pair: Vec<Option<Pair>> = vec![None; gts.len()];
    for (q, n, i, iou) in cands {
        if anchor_used[n] || gt_pair[i].is_some() {
            continue;
        }
        anchor_used[n] = true;
        gt_pair[i] = Some(Pair {
            gt: i,
            anchor: n,
            quality: q,
            iou,
            target: 0.0,
        });
    }
    let mut fallbacks = 0;
    for (i, g) in gts.iter().enumerate() {
        if gt_pair[i].is_some() {
            continue;
        }
        let cx = (g.bbox[0] + g.bbox[2]) / 2.0;
        let cy = (g.bbox[1] + g.bbox[3]) / 2.0;
        let nearest = (0..anchors.len()).filter(|&n| !anchor_used[n]).min_by(|&a, &b| {
            let d = |n: usize| {
                let p = anchors.points[n];
                (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
            };
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        });
        if let Some(n) = nearest {
            log::debug!("ground truth {i} has no free in-box anchor; using nearest anchor {n}");
            fallbacks += 1;
            anchor_used[n] = true;
            let (q, iou) = quality(n, g);
            best_q[i] = best_q[i].max(q);
            best_iou[i] = best_iou[i].max(iou);
            gt_pair[i] = Some(Pair {
                gt: i,
                anchor: n,
                quality: q,
                iou,
                target: 0.0,
            });
        }
    }
    let pairs = gt_pair
        .into_iter()
        .flatten()
        .map(|mut p| {
            p.target = if !params.soft_targets {
                1.0
            } else if best_q[p.gt] > 0.0 {
                p.quality / best_q[p.gt] * best_iou[p.gt]
            } else {
                p.iou
            };
            p
        })
        .collect();
    AssignmentResult { pairs, fallbacks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn grid() -> AnchorGrid {
        AnchorGrid::new(&ModelConfig::new(4, 1, 8, 2, 32))
    }

    #[test]
    fn single_in_box_anchor_is_chosen() {
        let g = grid();
        let boxes = vec![[0.0; 4]; g.len()];
        let gt = GroundTruth {
            class: 0,
            bbox: [9.0, 9.0, 15.0, 15.0],
        };
        let r = assign_one_to_one(&boxes, &g, |_, _| 0.5, &[gt], &AssignParams::default());
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(g.points[r.pairs[0].anchor], [12.0, 12.0]);
        assert_eq!(r.fallbacks, 0);
    }

    #[test]
    fn box_without_anchor_center_falls_back_to_nearest() {
        let g = grid();
        let boxes = vec![[0.0; 4]; g.len()];
        let gt = GroundTruth {
            class: 0,
            bbox: [0.5, 0.5, 2.5, 2.5],
        };
        let r = assign_one_to_one(&boxes, &g, |_, _| 0.5, &[gt], &AssignParams::default());
        assert_eq!(r.fallbacks, 1);
        assert_eq!(g.points[r.pairs[0].anchor], [4.0, 4.0]);
    }

    #[test]
    fn iou_of_identical_and_disjoint_boxes() {
        assert_eq!(box_iou(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(box_iou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
    }
}
