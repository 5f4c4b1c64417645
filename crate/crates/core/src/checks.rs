//! Property suites behind the `check` command.

use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::finite_diff_check_against;
use crate::inference::{brute_force_detect, classify, prompt_free_detect, DecodeOptions, Detection};
use crate::network::{Model, ModelConfig};
use crate::params::InitRng;
use crate::prompt::{
    builtin_vocabulary_names, reprta_fold, reprta_refine, AuxAligner, FoldMode, PromptKind, PromptSet, TextEncoder, Vocabulary,
};
use crate::tensor::Tensor;
use crate::train::{loss_box, loss_cls, loss_mask};

pub const GRAD_BOUND: f64 = 1e-3;
pub const FOLD_BOUND: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl CheckLine {
    fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound,
            pass: value <= bound,
        }
    }
}

fn uniform(rng: &mut InitRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape product")
}

fn f64_bce(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn f64_giou(p: &[f64], q: &[f64]) -> f64 {
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = (p[2] - p[0]) * (p[3] - p[1]) + (q[2] - q[0]) * (q[3] - q[1]) - inter;
    let hull = (p[2].max(q[2]) - p[0].min(q[0])) * (p[3].max(q[3]) - p[1].min(q[1]));
    inter / union - (hull - union) / hull
}

fn random_boxes(rng: &mut InitRng, m: usize) -> Tensor {
    let mut d = Vec::with_capacity(4 * m);
    for _ in 0..m {
        let (x, y) = (rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0));
        d.extend([x, y, x + rng.uniform(2.0, 12.0), y + rng.uniform(2.0, 12.0)]);
    }
    Tensor::new(vec![m, 4], d).expect("M×4")
}

/// Loss and refine-path gradients against f64 central differences on
/// `instances` seeded random problems each.
pub fn check_grads(instances: usize) -> Result<Vec<CheckLine>> {
    let mut worst = [0.0f64; 5];
    for seed in 0..instances as u64 {
        let mut rng = InitRng::new(0x6772_6164 ^ seed);
        let (n, c) = (2 + rng.below(19), 1 + rng.below(4));
        let x = uniform(&mut rng, &[n, c], -4.0, 4.0);
        let t = uniform(&mut rng, &[n, c], 0.0, 1.0);
        let tv: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
        worst[0] = worst[0].max(finite_diff_check_against(
            |g, v| loss_cls(g, v, &t),
            |x| x.iter().zip(&tv).map(|(&a, &b)| f64_bce(a, b)).sum::<f64>() / x.len() as f64,
            &x,
            1e-3,
        )?);

        let m = 1 + rng.below(5);
        let pred = random_boxes(&mut rng, m);
        let target = random_boxes(&mut rng, m);
        let qv: Vec<f64> = target.data().iter().map(|&v| f64::from(v)).collect();
        worst[1] = worst[1].max(finite_diff_check_against(
            |g, v| loss_box(g, v, &target),
            |x| (0..m).map(|i| 1.0 - f64_giou(&x[4 * i..4 * i + 4], &qv[4 * i..4 * i + 4])).sum::<f64>() / m as f64,
            &pred,
            1e-3,
        )?);

        let m = 1 + rng.below(3);
        let side = 4 + rng.below(13);
        let p = side * side;
        let logits = uniform(&mut rng, &[m, p], -3.0, 3.0);
        let gt = Tensor::new(vec![m, p], (0..m * p).map(|_| (rng.below(2)) as f32).collect())?;
        let mut crops = Tensor::zeros(&[m, p]);
        for i in 0..m {
            let (x0, y0) = (rng.below(side / 2), rng.below(side / 2));
            for y in y0..side {
                for x in x0..side {
                    crops.data_mut()[i * p + y * side + x] = 1.0;
                }
            }
        }
        for (slot, dice) in [(2, false), (3, true)] {
            let gv: Vec<f64> = gt.data().iter().map(|&v| f64::from(v)).collect();
            let cv: Vec<f64> = crops.data().iter().map(|&v| f64::from(v)).collect();
            let reference = |x: &[f64]| {
                let mut total = 0.0;
                for i in 0..m {
                    let r = i * p..(i + 1) * p;
                    let cnt: f64 = cv[r.clone()].iter().sum();
                    let bce: f64 = r.clone().filter(|&j| cv[j] != 0.0).map(|j| f64_bce(x[j], gv[j])).sum();
                    total += bce / cnt / m as f64;
                    if dice {
                        let s = |j: usize| 1.0 / (1.0 + (-x[j]).exp());
                        let inter: f64 = r.clone().map(|j| s(j) * cv[j] * gv[j] * cv[j]).sum();
                        let ps: f64 = r.clone().map(|j| s(j) * cv[j]).sum();
                        let gs: f64 = r.clone().map(|j| gv[j] * cv[j]).sum::<f64>() + 1e-6;
                        total += (1.0 - 2.0 * inter / (ps + gs)) / m as f64;
                    }
                }
                total
            };
            worst[slot] = worst[slot].max(finite_diff_check_against(
                |g, v| loss_mask(g, v, &gt, &crops, dice),
                reference,
                &logits,
                1e-3,
            )?);
        }

        let d = 2 + rng.below(5);
        let cp = 1 + rng.below(4);
        let np = 1 + rng.below(6);
        let aux = AuxAligner::random(d, seed);
        let prompts = uniform(&mut rng, &[cp, d], -1.0, 1.0);
        let o = uniform(&mut rng, &[np, d], -1.0, 1.0);
        let w1 = aux.params().require("aux.fc1.w")?.clone();
        let (b1, w2, b2) = (
            aux.params().require("aux.fc1.b")?.clone(),
            aux.params().require("aux.fc2.w")?.clone(),
            aux.params().require("aux.fc2.b")?.clone(),
        );
        let f = |v: &Tensor| v.data().iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
        let (pv, ov, b1v, w2v, b2v) = (f(&prompts), f(&o), f(&b1), f(&w2), f(&b2));
        let h = 2 * d;
        worst[4] = worst[4].max(finite_diff_check_against(
            |g, v| {
                let pvar = g.constant(prompts.clone());
                let hid = g.matmul(pvar, v)?;
                let b1c = g.constant(b1.clone());
                let hid = g.add_row_bias(hid, b1c)?;
                let hid = g.silu(hid)?;
                let w2c = g.constant(w2.clone());
                let out = g.matmul(hid, w2c)?;
                let b2c = g.constant(b2.clone());
                let out = g.add_row_bias(out, b2c)?;
                let r = g.add(pvar, out)?;
                let r = g.l2_normalize(r, 1)?;
                let ovar = g.constant(o.clone());
                let rt = g.transpose(r)?;
                let s = g.matmul(ovar, rt)?;
                g.sum_all(s)
            },
            |w1v| {
                let mut total = 0.0;
                for i in 0..cp {
                    let p = &pv[i * d..(i + 1) * d];
                    let hid: Vec<f64> = (0..h)
                        .map(|j| {
                            let z = (0..d).map(|e| p[e] * w1v[e * h + j]).sum::<f64>() + b1v[j];
                            z / (1.0 + (-z).exp())
                        })
                        .collect();
                    let r: Vec<f64> = (0..d)
                        .map(|e| p[e] + (0..h).map(|j| hid[j] * w2v[j * d + e]).sum::<f64>() + b2v[e])
                        .collect();
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for a in 0..np {
                        total += (0..d).map(|e| ov[a * d + e] * r[e]).sum::<f64>() / norm;
                    }
                }
                total
            },
            &w1,
            1e-3,
        )?);
    }
    let names = ["loss_cls", "loss_box", "loss_mask bce", "loss_mask bce+dice", "refine path"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckLine::at_most(&format!("gradient {n}"), w, GRAD_BOUND))
        .collect())
}

/// A small random model, aligner and prompt set for fold checks.
pub fn random_fold_case(seed: u64, input: usize) -> Result<(Model, AuxAligner, PromptSet)> {
    let mut rng = InitRng::new(0x666f_6c64 ^ seed);
    let width = [4, 6, 8][rng.below(3)];
    let dim = [8, 12, 16][rng.below(3)];
    let mut cfg = ModelConfig::new(width, 1, dim, 4, input).with_seed(seed);
    cfg.groups = 4;
    let model = Model::build(cfg)?;
    let aux = AuxAligner::random(dim, seed);
    let c = 1 + rng.below(6);
    let labels = (0..c).map(|i| format!("prompt {seed} {i}")).collect();
    let prompts = PromptSet::new(uniform(&mut rng, &[c, dim], -1.0, 1.0), labels, PromptKind::Text)?;
    Ok((model, aux, prompts))
}

/// Folded scores (both modes) against the refine path on random cases.
pub fn check_fold(cases: usize, images_per_case: usize) -> Result<Vec<CheckLine>> {
    let mut max_diff = [0.0f64; 2];
    let mut argmax_mismatch = 0usize;
    let mut fused_not_cheaper = 0usize;
    for seed in 0..cases as u64 {
        let (model, aux, prompts) = random_fold_case(seed, 64)?;
        let refined = reprta_refine(&prompts, &aux)?.with_tau(model.tau());
        let stacked = reprta_fold(&prompts, &aux, &model, FoldMode::Stacked)?;
        let fused = reprta_fold(&prompts, &aux, &model, FoldMode::Fused)?;
        let mut rng = InitRng::new(0x696d_6167 ^ seed);
        for _ in 0..images_per_case {
            let image = uniform(&mut rng, &[3, 64, 64], 0.0, 1.0);
            let inf = model.infer(&image)?;
            let reference = classify(&inf.head.embeddings, &refined)?;
            let (s, fs) = stacked.scores(&inf, &model)?;
            let (f, ff) = fused.scores(&inf, &model)?;
            if ff >= fs {
                fused_not_cheaper += 1;
            }
            let c = prompts.len();
            for (k, scores) in [&s, &f].into_iter().enumerate() {
                max_diff[k] = max_diff[k].max(f64::from(scores.max_abs_diff(reference.scores())));
                for row in 0..inf.head.num_anchors() {
                    let am = |t: &Tensor| {
                        let r = &t.data()[row * c..(row + 1) * c];
                        (0..c).fold(0, |b, j| if r[j] > r[b] { j } else { b })
                    };
                    if am(scores) != am(reference.scores()) {
                        argmax_mismatch += 1;
                    }
                }
            }
        }
    }
    let bound = f64::from(FOLD_BOUND);
    Ok(vec![
        CheckLine::at_most("fold stacked max |score diff|", max_diff[0], bound),
        CheckLine::at_most("fold fused max |score diff|", max_diff[1], bound),
        CheckLine::at_most("fold argmax mismatches", argmax_mismatch as f64, 0.0),
        CheckLine::at_most("fold fused not cheaper than stacked", fused_not_cheaper as f64, 0.0),
    ])
}

fn same_detections(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.label == y.label && x.anchor_id == y.anchor_id && x.bbox == y.bbox && x.score == y.score && x.mask == y.mask
        })
}

/// Lazy vocabulary matching against the exhaustive oracle on random models.
pub fn check_oracle(cases: usize) -> Result<Vec<CheckLine>> {
    let names = builtin_vocabulary_names();
    let mut mismatches = 0usize;
    let mut unfiltered_mismatches = 0usize;
    let opts = DecodeOptions::threshold(0.0);
    for seed in 0..cases as u64 {
        let cfg = ModelConfig::new(4, 1, 8, 4, 64).with_seed(seed);
        let model = Model::build(cfg)?;
        let vocab = Vocabulary::from_names(&names, None, &TextEncoder::new(8))?;
        let mut rng = InitRng::new(0x6f72_6163 ^ seed);
        let image = uniform(&mut rng, &[3, 64, 64], 0.0, 1.0);
        let inf = model.infer(&image)?;
        let (oracle, _) = brute_force_detect(&model, &inf, &vocab, &opts);
        let (all, _) = prompt_free_detect(&model, &inf, &vocab, f32::NEG_INFINITY, &opts);
        if !same_detections(&all, &oracle) {
            unfiltered_mismatches += 1;
        }
        let mut z: Vec<f32> = (0..inf.head.num_anchors())
            .map(|n| vocab.objectness.score(inf.head.embeddings.row(n), inf.head.objectness.data()[n]))
            .collect();
        z.sort_by(f32::total_cmp);
        let delta = z[z.len() / 2];
        let (lazy, _) = prompt_free_detect(&model, &inf, &vocab, delta, &opts);
        let kept: Vec<Detection> = oracle
            .into_iter()
            .filter(|d| vocab.objectness.score(inf.head.embeddings.row(d.anchor_id), inf.head.objectness.data()[d.anchor_id]) > delta)
            .collect();
        if !same_detections(&lazy, &kept) {
            mismatches += 1;
        }
    }
    Ok(vec![
        CheckLine::at_most("oracle mismatches at median delta", mismatches as f64, 0.0),
        CheckLine::at_most("oracle mismatches at delta -inf", unfiltered_mismatches as f64, 0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_cases() {
        for line in check_grads(2).unwrap().into_iter().chain(check_fold(2, 1).unwrap()).chain(check_oracle(1).unwrap()) {
            assert!(line.pass, "{line:?}");
        }
    }
}
