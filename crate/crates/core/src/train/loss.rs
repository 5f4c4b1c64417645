//! Classification, box, and mask objectives on the autodiff graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the dice denominator.
pub const DICE_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f32,
    #[serde(rename = "box")]
    pub bbox: f32,
    pub mask: f32,
    #[serde(rename = "ref")]
    pub refine: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            bbox: 5.0,
            mask: 2.0,
            refine: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("box", self.bbox), ("mask", self.mask), ("ref", self.refine)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over all `N×C` logits.
pub fn loss_cls(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    g.set_scope("loss_cls");
    let b = g.bce_with_logits(logits, targets)?;
    g.mean_all(b)
}

/// Mean `1 − GIoU` between predicted and target `M×4` boxes.
pub fn loss_box(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    g.set_scope("loss_box");
    let m = g.shape(pred)[0];
    if g.shape(pred) != [m, 4] || target.shape() != [m, 4] || m == 0 {
        return Err(Error::Shape {
            op: "loss_box",
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = g.constant(target.clone());
    let mut p = Vec::with_capacity(4);
    let mut q = Vec::with_capacity(4);
    for k in 0..4 {
        p.push(g.slice(pred, 1, k, 1)?);
        q.push(g.slice(t, 1, k, 1)?);
    }
    let ix1 = g.maximum(p[0], q[0])?;
    let iy1 = g.maximum(p[1], q[1])?;
    let ix2 = g.minimum(p[2], q[2])?;
    let iy2 = g.minimum(p[3], q[3])?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let pw = g.sub(p[2], p[0])?;
    let ph = g.sub(p[3], p[1])?;
    let pa = g.mul(pw, ph)?;
    let qw = g.sub(q[2], q[0])?;
    let qh = g.sub(q[3], q[1])?;
    let qa = g.mul(qw, qh)?;
    let sum = g.add(pa, qa)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let ex1 = g.minimum(p[0], q[0])?;
    let ey1 = g.minimum(p[1], q[1])?;
    let ex2 = g.maximum(p[2], q[2])?;
    let ey2 = g.maximum(p[3], q[3])?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let ea = g.mul(ew, eh)?;
    let gap = g.sub(ea, union)?;
    let frac = g.div(gap, ea)?;
    let giou = g.sub(iou, frac)?;
    let one_minus = g.mul_scalar(giou, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    g.mean_all(one_minus)
}

/// Mask objective over `M` flattened pre-sigmoid maps.
///
/// BCE is averaged over the pixels where `crops` is 1, then over instances.
/// With `use_dice`, `1 − 2|P∩G| / (|P| + |G|)` on cropped soft masks is added.
pub fn loss_mask(g: &mut Graph, logits: Var, targets: &Tensor, crops: &Tensor, use_dice: bool) -> Result<Var> {
    g.set_scope("loss_mask");
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() || crops.shape() != shape.as_slice() || shape[0] == 0 {
        return Err(Error::Shape {
            op: "loss_mask",
            lhs: shape,
            rhs: targets.shape().to_vec(),
        });
    }
    let (m, p) = (shape[0], shape[1]);
    let mut weights = vec![0.0f32; m * p];
    for i in 0..m {
        let row = &crops.data()[i * p..(i + 1) * p];
        let count = row.iter().filter(|&&c| c != 0.0).count();
        if count == 0 {
            return Err(Error::Usage(format!("mask crop {i} is empty")));
        }
        for (w, &c) in weights[i * p..(i + 1) * p].iter_mut().zip(row) {
            *w = if c != 0.0 { 1.0 / (count * m) as f32 } else { 0.0 };
        }
    }
    let bce = g.bce_with_logits(logits, targets)?;
    let w = g.constant(Tensor::new(shape.clone(), weights)?);
    let weighted = g.mul(bce, w)?;
    let mut loss = g.sum_all(weighted)?;
    if use_dice {
        let crop = g.constant(crops.clone());
        let gt_c: Vec<f32> = targets.data().iter().zip(crops.data()).map(|(t, c)| t * c).collect();
        let gt_sum: Vec<f32> = gt_c.chunks(p).map(|r| r.iter().sum::<f32>() + DICE_EPS).collect();
        let gt_c = g.constant(Tensor::new(shape.clone(), gt_c)?);
        let prob = g.sigmoid(logits)?;
        let pc = g.mul(prob, crop)?;
        let pg = g.mul(pc, gt_c)?;
        let inter = g.reduce_sum(pg, 1)?;
        let psum = g.reduce_sum(pc, 1)?;
        let gs = g.constant(Tensor::new(vec![m], gt_sum)?);
        let denom = g.add(psum, gs)?;
        let ratio = g.div(inter, denom)?;
        let ratio = g.mul_scalar(ratio, -2.0)?;
        let dice = g.add_scalar(ratio, 1.0)?;
        let dice = g.mean_all(dice)?;
        loss = g.add(loss, dice)?;
    }
    Ok(loss)
}

/// Per-term graph handles; absent terms count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub bbox: Option<Var>,
    pub mask: Option<Var>,
    pub refine: Option<Var>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f32,
    #[serde(rename = "box")]
    pub bbox: f32,
    pub mask: f32,
    #[serde(rename = "ref")]
    pub refine: f32,
    pub total: f32,
    /// L2 norm of the gradient per parameter group.
    #[serde(default)]
    pub grad_norms: BTreeMap<String, f32>,
}

impl LossReport {
    pub fn accumulate(&mut self, other: &LossReport, scale: f32) {
        self.cls += other.cls * scale;
        self.bbox += other.bbox * scale;
        self.mask += other.mask * scale;
        self.refine += other.refine * scale;
        self.total += other.total * scale;
    }
}

/// `λ_cls·cls + λ_box·box + λ_mask·mask + λ_ref·ref`. Returns `None` when
/// no term has a nonzero weight.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<(Option<Var>, LossReport)> {
    g.set_scope("total_loss");
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let parts = [
        (terms.cls, w.cls, &mut report.cls),
        (terms.bbox, w.bbox, &mut report.bbox),
        (terms.mask, w.mask, &mut report.mask),
        (terms.refine, w.refine, &mut report.refine),
    ];
    let mut sum = 0.0f32;
    for (term, weight, slot) in parts {
        let Some(v) = term else { continue };
        *slot = g.value(v).item();
        if weight == 0.0 {
            continue;
        }
        let scaled = g.mul_scalar(v, weight)?;
        sum += weight * *slot;
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    report.total = total.map_or(sum, |t| g.value(t).item());
    Ok((total, report))
}
