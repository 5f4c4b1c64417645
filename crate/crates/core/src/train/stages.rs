//! The three training stages and their shared step loop.

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Gradients, Graph};
use crate::error::{Error, Result};
use crate::inference::BitMask;
use crate::io::checkpoint::{Checkpoint, Metadata};
use crate::network::{decode_boxes, is_objectness, is_savpe, AnchorGrid, BoxXyxy, Model, ModelConfig};
use crate::params::{Bound, InitRng, ParamSet};
use crate::prompt::{builtin_vocabulary_names, rasterize_cue, savpe_graph, AuxAligner, CueRegion, Vocabulary};
use crate::tensor::{dot, Tensor};

use super::assign::{assign_one_to_one, AssignParams, AssignmentResult, GroundTruth};
use super::dataset::SyntheticScene;
use super::loss::{loss_box, loss_cls, loss_mask, total_loss, LossReport, LossTerms, LossWeights};
use super::optim::{warmup_cosine, Optimizer};

fn default_epochs() -> usize {
    12
}
fn default_lr() -> f32 {
    0.02
}
fn default_batch() -> usize {
    8
}
fn default_alpha() -> f32 {
    1.0
}
fn default_beta() -> f32 {
    6.0
}
fn default_true() -> bool {
    true
}
fn default_momentum() -> f32 {
    0.9
}
fn default_wd() -> f32 {
    5e-4
}
fn default_stage_epochs() -> usize {
    2
}
fn default_adam_lr() -> f32 {
    2e-3
}
fn default_adam_wd() -> f32 {
    0.01
}
fn default_recall() -> f32 {
    0.95
}
fn default_clip() -> Option<f32> {
    Some(10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_beta")]
    pub beta: f32,
    /// Normalized-quality classification targets; binary when false.
    #[serde(default = "default_true")]
    pub soft_targets: bool,
    #[serde(default)]
    pub use_dice: bool,
    /// Random horizontal flips.
    #[serde(default = "default_true")]
    pub flip: bool,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default = "default_stage_epochs")]
    pub savpe_epochs: usize,
    #[serde(default = "default_adam_lr")]
    pub savpe_lr: f32,
    #[serde(default = "default_stage_epochs")]
    pub promptfree_epochs: usize,
    #[serde(default = "default_adam_lr")]
    pub promptfree_lr: f32,
    #[serde(default = "default_adam_wd")]
    pub adamw_weight_decay: f32,
    /// Ground-truth-matched anchor recall the recommended threshold keeps.
    #[serde(default = "default_recall")]
    pub delta_recall: f32,
    /// Global gradient-norm ceiling; no clipping when absent.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f32>,
    /// Built-in vocabulary entries outside the color-shape grid added as
    /// all-negative prompt columns at every text step.
    #[serde(default)]
    pub negative_prompts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("savpe_lr", self.savpe_lr), ("promptfree_lr", self.promptfree_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if !(self.delta_recall > 0.0 && self.delta_recall <= 1.0) {
            return Err(Error::Config("delta_recall must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn assign_params(&self) -> AssignParams {
        AssignParams {
            alpha: self.alpha,
            beta: self.beta,
            soft_targets: self.soft_targets,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "init")]
    Init,
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "savpe")]
    Savpe,
    #[serde(rename = "promptfree")]
    PromptFree,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Init => "init",
            Self::Text => "text",
            Self::Savpe => "savpe",
            Self::PromptFree => "promptfree",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "savpe" => Ok(Self::Savpe),
            "promptfree" => Ok(Self::PromptFree),
            other => Err(Error::Usage(format!("unknown stage {other:?} (text|savpe|promptfree)"))),
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub aux: AuxAligner,
    /// Stage that `step` and `optimizer` belong to.
    pub stage: Stage,
    pub step: usize,
    pub optimizer: Option<Optimizer>,
    pub recommended_delta: Option<f32>,
    /// Category names the text stage was trained on.
    pub names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateConfig {
    model: ModelConfig,
    stage: Stage,
    step: usize,
    #[serde(default)]
    recommended_delta: Option<f32>,
    #[serde(default)]
    names: Vec<String>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let aux = AuxAligner::new(model.config().embed_dim, model.config().seed);
        Self {
            model,
            aux,
            stage: Stage::Init,
            step: 0,
            optimizer: None,
            recommended_delta: None,
            names: Vec::new(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.model.params().clone();
        for (n, t) in self.aux.params().iter() {
            tensors.insert(n, t.clone());
        }
        if let Some(opt) = &self.optimizer {
            for (n, t) in opt.export("opt").iter() {
                tensors.insert(n, t.clone());
            }
        }
        let cfg = StateConfig {
            model: self.model.config().clone(),
            stage: self.stage,
            step: self.step,
            recommended_delta: self.recommended_delta,
            names: self.names.clone(),
        };
        Ok(Checkpoint::new(
            serde_json::to_value(cfg)?,
            tensors,
            Metadata::new(self.stage.name(), self.model.config().seed),
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: StateConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
        let mut model_params = ParamSet::new();
        let mut aux_params = ParamSet::new();
        for (n, t) in ckpt.tensors.iter() {
            if n.starts_with("aux.") {
                aux_params.insert(n, t.clone());
            } else if !n.contains('/') {
                model_params.insert(n, t.clone());
            }
        }
        let model = Model::from_parts(cfg.model, model_params)?;
        let aux = if aux_params.is_empty() {
            AuxAligner::new(model.config().embed_dim, model.config().seed)
        } else {
            AuxAligner::from_params(aux_params)?
        };
        let optimizer = if ckpt.tensors.get("opt/hyper").is_some() {
            Some(Optimizer::import(&ckpt.tensors, "opt")?)
        } else {
            None
        };
        Ok(Self {
            model,
            aux,
            stage: cfg.stage,
            step: cfg.step,
            optimizer,
            recommended_delta: cfg.recommended_delta,
            names: cfg.names,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f32,
    pub loss: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Repeated ground truths or anchors across all assignments.
    pub violations: usize,
    pub fallbacks: usize,
    pub pairs: usize,
    pub finished: bool,
}

struct ImageResult {
    grads: ParamSet,
    report: LossReport,
    assignment: AssignmentResult,
}

/// Whether `name` is one of the color-shape compositions.
fn is_composition(name: &str) -> bool {
    let mut parts = name.split(' ');
    matches!((parts.next(), parts.next(), parts.next()), (Some(c), Some(s), None)
        if super::dataset::COLORS.contains(&c) && super::dataset::SHAPES.contains(&s))
}

pub fn text_trainable(name: &str) -> bool {
    !is_savpe(name) && !is_objectness(name)
}

fn collect(grads: &Gradients, set: &ParamSet, bound: &Bound, trainable: impl Fn(&str) -> bool, out: &mut ParamSet) {
    for ((name, t), &v) in set.iter().zip(bound.vars()) {
        if trainable(name) {
            let g = grads.get(v).map_or_else(|| Tensor::zeros(t.shape()), |d| {
                Tensor::new(t.shape().to_vec(), d.to_vec()).expect("gradient matches parameter")
            });
            out.insert(name, g);
        }
    }
}

fn group_of(name: &str) -> &str {
    if name.starts_with("aux.") {
        "aux"
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

fn grad_norms(grads: &ParamSet) -> std::collections::BTreeMap<String, f32> {
    let mut sq: std::collections::BTreeMap<String, f32> = Default::default();
    for (n, g) in grads.iter() {
        *sq.entry(group_of(n).to_string()).or_default() += g.data().iter().map(|v| v * v).sum::<f32>();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Shuffled scene order and flip flags of one epoch.
fn epoch_plan(seed: u64, stage: Stage, epoch: usize, n: usize, flip: bool) -> (Vec<usize>, Vec<bool>) {
    let mut rng = InitRng::new(seed ^ ((stage as u64) << 56) ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let flips = (0..n).map(|_| flip && rng.below(2) == 1).collect();
    (order, flips)
}

/// Ground truths of a scene with classes looked up in `index`.
fn ground_truths(scene: &SyntheticScene, index: &HashMap<&str, usize>) -> Result<Vec<GroundTruth>> {
    scene
        .instances
        .iter()
        .map(|inst| {
            let class = *index
                .get(inst.name.as_str())
                .ok_or_else(|| Error::Usage(format!("scene category {:?} is not among the prompts", inst.name)))?;
            Ok(GroundTruth { class, bbox: inst.bbox })
        })
        .collect()
}

/// Area-averaged mask and box crop at prototype resolution.
pub fn proto_targets(mask: &BitMask, bbox: &BoxXyxy, hp: usize, wp: usize) -> (Vec<f32>, Vec<f32>) {
    let (sy, sx) = (mask.height / hp, mask.width / wp);
    let mut target = vec![0.0f32; hp * wp];
    let mut crop = vec![0.0f32; hp * wp];
    for y in 0..hp {
        for x in 0..wp {
            let mut on = 0;
            for yy in y * sy..(y + 1) * sy {
                for xx in x * sx..(x + 1) * sx {
                    if mask.get(yy, xx) {
                        on += 1;
                    }
                }
            }
            target[y * wp + x] = on as f32 / (sy * sx) as f32;
            let overlaps = ((x * sx) as f32) < bbox[2]
                && (((x + 1) * sx) as f32) > bbox[0]
                && ((y * sy) as f32) < bbox[3]
                && (((y + 1) * sy) as f32) > bbox[1];
            if overlaps {
                crop[y * wp + x] = 1.0;
            }
        }
    }
    (target, crop)
}

struct StageSpec<'a> {
    stage: Stage,
    epochs: usize,
    lr: f32,
    optimizer: &'a dyn Fn() -> Optimizer,
}

/// Shared minibatch loop. Gradients of a batch are summed in scene order and
/// averaged; the optimizer then updates model and aligner together.
fn run_stage<F>(
    state: &mut TrainState,
    scenes: &[SyntheticScene],
    cfg: &TrainConfig,
    spec: StageSpec,
    max_steps: Option<usize>,
    mut per_image: F,
) -> Result<StageReport>
where
    F: FnMut(&Model, &AuxAligner, &SyntheticScene, usize, u64) -> Result<ImageResult>,
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Usage("training needs at least one scene".into()));
    }
    if state.stage != spec.stage || state.optimizer.is_none() {
        state.stage = spec.stage;
        state.step = 0;
        state.optimizer = Some((spec.optimizer)());
    }
    let n = scenes.len();
    let b = cfg.batch_size;
    let per_epoch = n.div_ceil(b);
    let total = spec.epochs * per_epoch;
    let mut report = StageReport::default();
    let mut plan: Option<(usize, Vec<usize>, Vec<bool>)> = None;
    let mut epoch_sum = LossReport::default();
    let mut epoch_count = 0usize;
    let mut taken = 0usize;
    while state.step < total {
        if max_steps.is_some_and(|m| taken >= m) {
            return Ok(report);
        }
        let step = state.step;
        let epoch = step / per_epoch;
        if plan.as_ref().is_none_or(|p| p.0 != epoch) {
            let (order, flips) = epoch_plan(cfg.seed, spec.stage, epoch, n, cfg.flip);
            plan = Some((epoch, order, flips));
        }
        let (_, order, flips) = plan.as_ref().expect("plan set above");
        let within = step % per_epoch;
        let batch = &order[within * b..((within + 1) * b).min(n)];

        let mut grads = ParamSet::new();
        let mut loss = LossReport::default();
        let scale = 1.0 / batch.len() as f32;
        for &i in batch {
            let scene = if flips[i] {
                Cow::Owned(scenes[i].flipped())
            } else {
                Cow::Borrowed(&scenes[i])
            };
            let seed = cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9) ^ (i as u64).wrapping_mul(0x85eb_ca6b);
            let res = per_image(&state.model, &state.aux, &scene, step, seed).map_err(|e| match e {
                Error::NonFinite(where_) => Error::Diverged {
                    step,
                    reason: format!("non-finite value in {where_}"),
                },
                other => other,
            })?;
            report.violations += res.assignment.violations();
            report.fallbacks += res.assignment.fallbacks;
            report.pairs += res.assignment.pairs.len();
            loss.accumulate(&res.report, scale);
            for (name, g) in res.grads.iter() {
                match grads.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v),
                    None => grads.insert(name, g.clone()),
                }
            }
        }
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        loss.grad_norms = grad_norms(&grads);
        if let Some(clip) = cfg.grad_clip {
            let norm = loss.grad_norms.values().map(|v| v * v).sum::<f32>().sqrt();
            if norm > clip {
                let s = clip / norm;
                for (_, g) in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {}", loss.total),
            });
        }
        let lr = warmup_cosine(step, total, spec.lr);
        let snapshot = (state.model.params().clone(), state.aux.params().clone());
        let opt = state.optimizer.as_mut().expect("created above");
        opt.step(&mut [state.model.params_mut(), state.aux.params_mut()], &grads, lr);
        state.model.clamp_tau();
        let finite = state.model.params().iter().chain(state.aux.params().iter()).all(|(_, t)| t.is_finite());
        if !finite {
            *state.model.params_mut() = snapshot.0;
            *state.aux.params_mut() = snapshot.1;
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        log::debug!("{} step {step} lr {lr:.5} loss {:.5}", spec.stage.name(), loss.total);
        epoch_sum.accumulate(&loss, 1.0);
        epoch_count += 1;
        report.steps.push(StepLog { step, epoch, lr, loss });
        state.step += 1;
        taken += 1;
        if state.step.is_multiple_of(per_epoch) || state.step == total {
            let mut mean = LossReport::default();
            mean.accumulate(&epoch_sum, 1.0 / epoch_count as f32);
            log::info!(
                "{} epoch {epoch}: loss {:.4} (cls {:.4} box {:.4} mask {:.4})",
                spec.stage.name(),
                mean.total,
                mean.cls,
                mean.bbox,
                mean.mask
            );
            report.epochs.push(EpochLog { epoch, mean });
            epoch_sum = LossReport::default();
            epoch_count = 0;
        }
    }
    report.finished = true;
    Ok(report)
}

fn text_image(
    model: &Model,
    aux: &AuxAligner,
    scene: &SyntheticScene,
    prompts: &Tensor,
    index: &HashMap<&str, usize>,
    anchors: &AnchorGrid,
    cfg: &TrainConfig,
) -> Result<ImageResult> {
    let mut g = Graph::new();
    let mb = model.params().bind(&mut g, text_trainable);
    let ab = aux.params().bind(&mut g, |_| true);
    let img = g.constant(scene.image.clone());
    let fv = model.forward(&mut g, &mb, img)?;
    let p = g.constant(prompts.clone());
    let refined = aux.refine_graph(&mut g, &ab, p)?;
    g.set_scope("classify");
    let pt = g.transpose(refined)?;
    let cos = g.matmul(fv.embeddings, pt)?;
    let logits = g.scale(cos, mb.var("tau")?)?;

    let boxes = decode_boxes(g.value(fv.box_dist), anchors);
    let c = prompts.dim(0);
    let lv = g.value(logits).data().to_vec();
    let gts = ground_truths(scene, index)?;
    let asg = assign_one_to_one(&boxes, anchors, |n, k| sigmoid(lv[n * c + k]), &gts, &cfg.assign_params());
    let mut targets = Tensor::zeros(&[anchors.len(), c]);
    for pr in &asg.pairs {
        targets.data_mut()[pr.anchor * c + gts[pr.gt].class] = pr.target;
    }
    let cls = loss_cls(&mut g, logits, &targets)?;
    let mut terms = LossTerms {
        cls: Some(cls),
        bbox: None,
        mask: None,
        refine: None,
    };
    if !asg.pairs.is_empty() {
        let idx: Vec<usize> = asg.pairs.iter().map(|p| p.anchor).collect();
        let m = idx.len();
        let mut scale = Vec::with_capacity(4 * m);
        let mut centers = Vec::with_capacity(4 * m);
        let mut gt_boxes = Vec::with_capacity(4 * m);
        for pr in &asg.pairs {
            let s = anchors.stride_of[pr.anchor];
            let [cx, cy] = anchors.points[pr.anchor];
            scale.extend([-s, -s, s, s]);
            centers.extend([cx, cy, cx, cy]);
            gt_boxes.extend(gts[pr.gt].bbox);
        }
        g.set_scope("box targets");
        let d = g.gather_rows(fv.box_dist, &idx)?;
        let sc = g.constant(Tensor::new(vec![m, 4], scale)?);
        let ce = g.constant(Tensor::new(vec![m, 4], centers)?);
        let off = g.mul(d, sc)?;
        let pred = g.add(off, ce)?;
        terms.bbox = Some(loss_box(&mut g, pred, &Tensor::new(vec![m, 4], gt_boxes)?)?);

        let (hp, wp) = model.config().proto_size();
        let k = model.config().prototypes;
        let mut mt = Vec::with_capacity(m * hp * wp);
        let mut crops = Vec::with_capacity(m * hp * wp);
        for pr in &asg.pairs {
            let inst = &scene.instances[pr.gt];
            let (t, cr) = proto_targets(&inst.mask, &inst.bbox, hp, wp);
            mt.extend(t);
            crops.extend(cr);
        }
        g.set_scope("mask targets");
        let coeffs = g.gather_rows(fv.mask_coeffs, &idx)?;
        let protos = g.reshape(fv.prototypes, &[k, hp * wp])?;
        let ml = g.matmul(coeffs, protos)?;
        terms.mask = Some(loss_mask(
            &mut g,
            ml,
            &Tensor::new(vec![m, hp * wp], mt)?,
            &Tensor::new(vec![m, hp * wp], crops)?,
            cfg.use_dice,
        )?);
    }
    let (total, report) = total_loss(&mut g, &terms, &cfg.weights)?;
    let mut grads = ParamSet::new();
    if let Some(total) = total {
        let gr = g.backward(total)?;
        collect(&gr, model.params(), &mb, text_trainable, &mut grads);
        collect(&gr, aux.params(), &ab, |_| true, &mut grads);
    }
    Ok(ImageResult {
        grads,
        report,
        assignment: asg,
    })
}

/// Text-prompted training of the detector, the aligner and the temperature.
/// Classification goes through the refined prompts of `names`.
pub fn train_stage_text(
    state: &mut TrainState,
    scenes: &[SyntheticScene],
    names: &[String],
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<StageReport> {
    let encoder = crate::prompt::TextEncoder::new(state.model.config().embed_dim);
    let prompts = crate::prompt::encode_text(names, None, &encoder)?;
    let p = prompts.embeddings().clone();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let anchors = AnchorGrid::new(state.model.config());
    state.names = names.to_vec();
    let fillers: Vec<String> = builtin_vocabulary_names()
        .into_iter()
        .filter(|n| !is_composition(n) && !index.contains_key(n.as_str()))
        .collect();
    let pool = if cfg.negative_prompts > 0 {
        crate::prompt::encode_text(&fillers, None, &encoder)?.embeddings().clone()
    } else {
        Tensor::zeros(&[0, p.dim(1)])
    };
    let (momentum, wd) = (cfg.momentum, cfg.weight_decay);
    run_stage(
        state,
        scenes,
        cfg,
        StageSpec {
            stage: Stage::Text,
            epochs: cfg.epochs,
            lr: cfg.lr,
            optimizer: &|| Optimizer::sgd(momentum, wd),
        },
        max_steps,
        |model, aux, scene, step, _| {
            if cfg.negative_prompts == 0 {
                return text_image(model, aux, scene, &p, &index, &anchors, cfg);
            }
            let mut rng = InitRng::new(cfg.seed ^ (step as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
            let mut rows: Vec<usize> = (0..pool.dim(0)).collect();
            let k = cfg.negative_prompts.min(rows.len());
            for i in 0..k {
                let j = i + rng.below(rows.len() - i);
                rows.swap(i, j);
            }
            let mut data = p.data().to_vec();
            for &r in &rows[..k] {
                data.extend_from_slice(pool.row(r));
            }
            let prompts = Tensor::new(vec![p.dim(0) + k, p.dim(1)], data)?;
            text_image(model, aux, scene, &prompts, &index, &anchors, cfg)
        },
    )
}

fn savpe_image(model: &Model, scene: &SyntheticScene, anchors: &AnchorGrid, cfg: &TrainConfig, seed: u64) -> Result<ImageResult> {
    let mut g = Graph::new();
    let mb = model.params().bind(&mut g, is_savpe);
    let img = g.constant(scene.image.clone());
    let fv = model.forward(&mut g, &mb, img)?;
    let mut present: Vec<&str> = Vec::new();
    for inst in &scene.instances {
        if !present.contains(&inst.name.as_str()) {
            present.push(&inst.name);
        }
    }
    if present.is_empty() {
        return Ok(ImageResult {
            grads: ParamSet::new(),
            report: LossReport::default(),
            assignment: AssignmentResult::default(),
        });
    }
    let mut rng = InitRng::new(seed);
    let mut rows = Vec::with_capacity(present.len());
    for name in &present {
        let members: Vec<_> = scene.instances.iter().filter(|i| i.name == *name).collect();
        let inst = members[rng.below(members.len())];
        let cue = rasterize_cue(&CueRegion::Box(inst.bbox), model.config())?;
        rows.push(savpe_graph(&mut g, model, &mb, fv.proto_input, &cue)?);
    }
    g.set_scope("classify");
    let v = g.concat(&rows, 0)?;
    let vt = g.transpose(v)?;
    let cos = g.matmul(fv.embeddings, vt)?;
    let logits = g.scale(cos, mb.var("tau")?)?;
    let c = present.len();
    let index: HashMap<&str, usize> = present.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let gts = ground_truths(scene, &index)?;
    let boxes = decode_boxes(g.value(fv.box_dist), anchors);
    let lv = g.value(logits).data().to_vec();
    let asg = assign_one_to_one(&boxes, anchors, |n, k| sigmoid(lv[n * c + k]), &gts, &cfg.assign_params());
    let mut targets = Tensor::zeros(&[anchors.len(), c]);
    for pr in &asg.pairs {
        targets.data_mut()[pr.anchor * c + gts[pr.gt].class] = pr.target;
    }
    let cls = loss_cls(&mut g, logits, &targets)?;
    let terms = LossTerms {
        cls: Some(cls),
        bbox: None,
        mask: None,
        refine: None,
    };
    let (total, report) = total_loss(&mut g, &terms, &cfg.weights)?;
    let mut grads = ParamSet::new();
    if let Some(total) = total {
        let gr = g.backward(total)?;
        collect(&gr, model.params(), &mb, is_savpe, &mut grads);
    }
    Ok(ImageResult {
        grads,
        report,
        assignment: asg,
    })
}

/// Trains only the visual-prompt encoder; every other weight is frozen.
pub fn train_stage_savpe(state: &mut TrainState, scenes: &[SyntheticScene], cfg: &TrainConfig, max_steps: Option<usize>) -> Result<StageReport> {
    let anchors = AnchorGrid::new(state.model.config());
    let wd = cfg.adamw_weight_decay;
    run_stage(
        state,
        scenes,
        cfg,
        StageSpec {
            stage: Stage::Savpe,
            epochs: cfg.savpe_epochs,
            lr: cfg.savpe_lr,
            optimizer: &|| Optimizer::adamw(wd),
        },
        max_steps,
        |model, _, scene, _, seed| savpe_image(model, scene, &anchors, cfg, seed),
    )
}

/// Anchors matched one-to-one with the ground truths of `scene`, classified
/// against the vocabulary rows of their categories.
fn vocab_assignment(
    model: &Model,
    embeddings: &Tensor,
    box_dist: &Tensor,
    scene: &SyntheticScene,
    vocab: &Vocabulary,
    anchors: &AnchorGrid,
    index: &HashMap<&str, usize>,
    cfg: &TrainConfig,
) -> Result<AssignmentResult> {
    let gts = ground_truths(scene, index)?;
    let boxes = decode_boxes(box_dist, anchors);
    let tau = model.tau();
    let params = AssignParams {
        soft_targets: false,
        ..cfg.assign_params()
    };
    Ok(assign_one_to_one(
        &boxes,
        anchors,
        |n, k| sigmoid(tau * dot(embeddings.row(n), vocab.prompts.row(k))),
        &gts,
        &params,
    ))
}

fn vocab_index(vocab: &Vocabulary) -> HashMap<&str, usize> {
    vocab.prompts.labels().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

/// Trains the objectness head behind `P_s` against one-to-one matched anchors,
/// then recommends a threshold from `validation`.
pub fn train_stage_prompt_free(
    state: &mut TrainState,
    scenes: &[SyntheticScene],
    vocab: &Vocabulary,
    validation: &[SyntheticScene],
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<StageReport> {
    let anchors = AnchorGrid::new(state.model.config());
    let index = vocab_index(vocab);
    let wd = cfg.adamw_weight_decay;
    let report = run_stage(
        state,
        scenes,
        cfg,
        StageSpec {
            stage: Stage::PromptFree,
            epochs: cfg.promptfree_epochs,
            lr: cfg.promptfree_lr,
            optimizer: &|| Optimizer::adamw(wd),
        },
        max_steps,
        |model, _, scene, _, _| {
            let mut g = Graph::new();
            let mb = model.params().bind(&mut g, is_objectness);
            let img = g.constant(scene.image.clone());
            let fv = model.forward(&mut g, &mb, img)?;
            let asg = vocab_assignment(
                model,
                g.value(fv.embeddings),
                g.value(fv.box_dist),
                scene,
                vocab,
                &anchors,
                &index,
                cfg,
            )?;
            let mut targets = Tensor::zeros(&[anchors.len(), 1]);
            for p in &asg.pairs {
                targets.data_mut()[p.anchor] = 1.0;
            }
            let cls = loss_cls(&mut g, fv.objectness, &targets)?;
            let terms = LossTerms {
                cls: Some(cls),
                bbox: None,
                mask: None,
                refine: None,
            };
            let (total, report) = total_loss(&mut g, &terms, &cfg.weights)?;
            let mut grads = ParamSet::new();
            if let Some(total) = total {
                let gr = g.backward(total)?;
                collect(&gr, model.params(), &mb, is_objectness, &mut grads);
            }
            Ok(ImageResult {
                grads,
                report,
                assignment: asg,
            })
        },
    )?;
    if report.finished && !validation.is_empty() {
        let d = recommend_delta(&state.model, validation, vocab, cfg)?;
        log::info!(
            "recommended delta {:.4}: recall {:.4} over {} matched anchors",
            d.delta,
            d.recall,
            d.positives
        );
        state.recommended_delta = Some(d.delta);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub delta: f32,
    /// Fraction of matched anchors with objectness above `delta`.
    pub recall: f32,
    pub positives: usize,
    pub mean_positive: f32,
    pub mean_negative: f32,
    /// Fraction of all anchors above `delta`.
    pub kept_fraction: f32,
}

/// Largest float strictly below `x`.
fn next_down(x: f32) -> f32 {
    if x == 0.0 {
        return -f32::from_bits(1);
    }
    let b = x.to_bits();
    if x > 0.0 {
        f32::from_bits(b - 1)
    } else {
        f32::from_bits(b + 1)
    }
}

/// Objectness statistics of matched anchors on `scenes` and the threshold
/// that keeps the requested recall of them.
pub fn recommend_delta(model: &Model, scenes: &[SyntheticScene], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<DeltaReport> {
    let anchors = AnchorGrid::new(model.config());
    let index = vocab_index(vocab);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for scene in scenes {
        let inf = model.infer(&scene.image)?;
        let h = &inf.head;
        let asg = vocab_assignment(model, &h.embeddings, &h.box_deltas, scene, vocab, &anchors, &index, cfg)?;
        let mut is_pos = vec![false; anchors.len()];
        for p in &asg.pairs {
            is_pos[p.anchor] = true;
        }
        for n in 0..anchors.len() {
            let z = vocab.objectness.score(h.embeddings.row(n), h.objectness.data()[n]);
            if is_pos[n] {
                pos.push(z);
            } else {
                neg.push(z);
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Usage("validation scenes contain no objects".into()));
    }
    pos.sort_by(f32::total_cmp);
    let miss = ((1.0 - cfg.delta_recall) * pos.len() as f32).floor() as usize;
    let delta = next_down(pos[miss.min(pos.len() - 1)]);
    let above = |v: &[f32]| v.iter().filter(|&&z| z > delta).count();
    let mean = |v: &[f32]| if v.is_empty() { 0.0 } else { v.iter().sum::<f32>() / v.len() as f32 };
    Ok(DeltaReport {
        delta,
        recall: above(&pos) as f32 / pos.len() as f32,
        positives: pos.len(),
        mean_positive: mean(&pos),
        mean_negative: mean(&neg),
        kept_fraction: (above(&pos) + above(&neg)) as f32 / (pos.len() + neg.len()) as f32,
    })
}
