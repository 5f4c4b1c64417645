//! Similarity classification, NMS-free decoding, lazy vocabulary matching
//! and mask assembly.

mod mask;
mod output;

pub use mask::{assemble_mask, mask_logits, BitMask, MASK_BOX_PAD};
pub use output::{detections_to_jsonl, DetectionRecord};

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::network::{decode_boxes, AnchorGrid, BoxXyxy, HeadOutputs, Inference, Model};
use crate::prompt::{savpe_encode, FoldedClassifier, PromptSet, VisualCue, Vocabulary};
use crate::tensor::{dot, Tensor};

/// `N×C` raw scores `τ·(O·Pᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    scores: Tensor,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.rank() != 2 || !scores.is_finite() {
            return Err(Error::NonFinite("similarity scores".into()));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn anchors(&self) -> usize {
        self.scores.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.scores.dim(1)
    }

    pub fn score(&self, n: usize, c: usize) -> f32 {
        self.scores.data()[n * self.classes() + c]
    }

    pub fn probability(&self, n: usize, c: usize) -> f32 {
        sigmoid(self.score(n, c))
    }

    pub fn probabilities(&self) -> Tensor {
        let data = self.scores.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(self.scores.shape().to_vec(), data).expect("same shape")
    }
}

/// Raw score of one anchor row against one prompt row.
fn prompt_score(o: &[f32], p: &[f32], tau: f32) -> f32 {
    tau * dot(o, p)
}

pub fn classify(o: &Tensor, prompts: &PromptSet) -> Result<SimilarityMatrix> {
    if o.rank() != 2 || o.dim(1) != prompts.dim() {
        return Err(Error::Shape {
            op: "classify",
            lhs: o.shape().to_vec(),
            rhs: prompts.embeddings().shape().to_vec(),
        });
    }
    let (n, c) = (o.dim(0), prompts.len());
    let mut data = Vec::with_capacity(n * c);
    for a in 0..n {
        for k in 0..c {
            data.push(prompt_score(o.row(a), prompts.row(k), prompts.tau));
        }
    }
    SimilarityMatrix::new(Tensor::new(vec![n, c], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOptions {
    /// Minimum probability `sigmoid(τ·cos)` of a kept detection.
    pub score_threshold: f32,
    /// Emit every prompt above threshold instead of only the best one.
    #[serde(default)]
    pub multi_label: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            multi_label: false,
        }
    }
}

impl DecodeOptions {
    pub fn threshold(score_threshold: f32) -> Self {
        Self {
            score_threshold,
            ..Self::default()
        }
    }
}

/// One decoded anchor before mask assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub anchor_id: usize,
    pub class: usize,
    pub score: f32,
    pub bbox: BoxXyxy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub anchor_id: usize,
    pub label: String,
    pub class: usize,
    pub score: f32,
    pub bbox: BoxXyxy,
    pub mask: BitMask,
}

/// Best prompt of one row; ties keep the lower index.
fn best_of(row: &[f32]) -> (usize, f32) {
    let mut best = (0, row[0]);
    for (c, &s) in row.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.anchor_id.cmp(&b.anchor_id))
            .then(a.class.cmp(&b.class))
    });
}

/// Thresholded per-anchor decisions. There is no suppression step: every
/// anchor whose probability clears the threshold is emitted.
pub fn nms_free_decode(
    head: &HeadOutputs,
    anchors: &AnchorGrid,
    sim: &SimilarityMatrix,
    opts: &DecodeOptions,
) -> Vec<Candidate> {
    let boxes = decode_boxes(&head.box_deltas, anchors);
    let c = sim.classes();
    let mut out = Vec::new();
    for (n, bbox) in boxes.iter().enumerate() {
        let row = &sim.scores().data()[n * c..(n + 1) * c];
        if opts.multi_label {
            for (k, &s) in row.iter().enumerate() {
                let p = sigmoid(s);
                if p >= opts.score_threshold {
                    out.push(Candidate {
                        anchor_id: n,
                        class: k,
                        score: p,
                        bbox: *bbox,
                    });
                }
            }
        } else {
            let (k, s) = best_of(row);
            let p = sigmoid(s);
            if p >= opts.score_threshold {
                out.push(Candidate {
                    anchor_id: n,
                    class: k,
                    score: p,
                    bbox: *bbox,
                });
            }
        }
    }
    sort_candidates(&mut out);
    out
}

/// Attaches labels and assembled masks to decoded candidates.
pub fn finish_detections(head: &HeadOutputs, candidates: Vec<Candidate>, labels: &[String], image_size: [usize; 2]) -> Vec<Detection> {
    candidates
        .into_iter()
        .map(|c| Detection {
            mask: assemble_mask(&head.prototypes, head.mask_coeffs.row(c.anchor_id), &c.bbox, image_size),
            label: labels[c.class].clone(),
            anchor_id: c.anchor_id,
            class: c.class,
            score: c.score,
            bbox: c.bbox,
        })
        .collect()
}

/// Decode and mask assembly for a precomputed forward pass.
pub fn detect(model: &Model, inf: &Inference, sim: &SimilarityMatrix, labels: &[String], opts: &DecodeOptions) -> Vec<Detection> {
    let anchors = AnchorGrid::new(model.config());
    let cands = nms_free_decode(&inf.head, &anchors, sim, opts);
    finish_detections(&inf.head, cands, labels, model.config().input_size)
}

/// The classifier side of text prompting.
#[derive(Clone, Debug)]
pub enum TextClassifier {
    /// Unit prompt rows (plain or already refined).
    Prompts(PromptSet),
    Folded(FoldedClassifier),
}

impl TextClassifier {
    pub fn labels(&self) -> &[String] {
        match self {
            Self::Prompts(p) => p.labels(),
            Self::Folded(f) => &f.labels,
        }
    }

    pub fn similarity(&self, model: &Model, inf: &Inference) -> Result<SimilarityMatrix> {
        match self {
            Self::Prompts(p) => classify(&inf.head.embeddings, p),
            Self::Folded(f) => SimilarityMatrix::new(f.scores(inf, model)?.0),
        }
    }
}

pub fn infer_text(model: &Model, image: &Tensor, classifier: &TextClassifier, opts: &DecodeOptions) -> Result<Vec<Detection>> {
    let inf = model.infer(image)?;
    let sim = classifier.similarity(model, &inf)?;
    Ok(detect(model, &inf, &sim, classifier.labels(), opts))
}

/// Visual prompting: cues are read from `reference`, detections from `query`.
pub fn infer_visual(
    model: &Model,
    reference: &Tensor,
    cues: &[VisualCue],
    query: &Tensor,
    opts: &DecodeOptions,
) -> Result<Vec<Detection>> {
    if cues.is_empty() {
        return Err(Error::Usage("visual prompting needs at least one cue".into()));
    }
    let ref_inf = model.infer(reference)?;
    let prompts = savpe_encode(model, &ref_inf.pyramid, cues)?;
    let inf = if reference.data() == query.data() {
        ref_inf
    } else {
        model.infer(query)?
    };
    let sim = classify(&inf.head.embeddings, &prompts)?;
    Ok(detect(model, &inf, &sim, prompts.labels(), opts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrpcReport {
    pub delta: f32,
    pub anchors_total: usize,
    pub anchors_kept: usize,
    pub dot_products_full: u64,
    pub dot_products_lazy: u64,
    pub savings_ratio: f64,
}

/// Anchors whose objectness score `[o, z]·P_sᵀ` exceeds `delta`.
pub fn lrpc_survivors(head: &HeadOutputs, vocab: &Vocabulary, delta: f32) -> Vec<usize> {
    (0..head.num_anchors())
        .filter(|&n| vocab.objectness.score(head.embeddings.row(n), head.objectness.data()[n]) > delta)
        .collect()
}

/// Best vocabulary entry per listed anchor, scored exactly as [`classify`] would.
fn match_rows(head: &HeadOutputs, anchors: &AnchorGrid, vocab: &PromptSet, rows: &[usize], opts: &DecodeOptions) -> Vec<Candidate> {
    let boxes = decode_boxes(&head.box_deltas, anchors);
    let mut out = Vec::new();
    let mut scores = vec![0.0f32; vocab.len()];
    for &n in rows {
        let o = head.embeddings.row(n);
        for (k, s) in scores.iter_mut().enumerate() {
            *s = prompt_score(o, vocab.row(k), vocab.tau);
        }
        let push = |out: &mut Vec<Candidate>, k: usize, s: f32| {
            let p = sigmoid(s);
            if p >= opts.score_threshold {
                out.push(Candidate {
                    anchor_id: n,
                    class: k,
                    score: p,
                    bbox: boxes[n],
                });
            }
        };
        if opts.multi_label {
            for (k, &s) in scores.iter().enumerate() {
                push(&mut out, k, s);
            }
        } else {
            let (k, s) = best_of(&scores);
            push(&mut out, k, s);
        }
    }
    sort_candidates(&mut out);
    out
}

/// Lazy matching on a precomputed forward pass.
pub fn prompt_free_detect(model: &Model, inf: &Inference, vocab: &Vocabulary, delta: f32, opts: &DecodeOptions) -> (Vec<Detection>, LrpcReport) {
    let head = &inf.head;
    let n = head.num_anchors();
    let c = vocab.len();
    let kept = lrpc_survivors(head, vocab, delta);
    let anchors = AnchorGrid::new(model.config());
    let prompts = vocab.prompts.clone().with_tau(model.tau());
    let cands = match_rows(head, &anchors, &prompts, &kept, opts);
    let full = (n * c) as u64;
    let lazy = (kept.len() * c + n) as u64;
    let report = LrpcReport {
        delta,
        anchors_total: n,
        anchors_kept: kept.len(),
        dot_products_full: full,
        dot_products_lazy: lazy,
        savings_ratio: 1.0 - lazy as f64 / full as f64,
    };
    (finish_detections(head, cands, prompts.labels(), model.config().input_size), report)
}

pub fn infer_prompt_free(model: &Model, image: &Tensor, vocab: &Vocabulary, delta: f32, opts: &DecodeOptions) -> Result<(Vec<Detection>, LrpcReport)> {
    let inf = model.infer(image)?;
    Ok(prompt_free_detect(model, &inf, vocab, delta, opts))
}

/// Oracle for lazy matching: every anchor against every vocabulary row.
pub fn brute_force_detect(model: &Model, inf: &Inference, vocab: &Vocabulary, opts: &DecodeOptions) -> (Vec<Detection>, u64) {
    let head = &inf.head;
    let anchors = AnchorGrid::new(model.config());
    let prompts = vocab.prompts.clone().with_tau(model.tau());
    let all: Vec<usize> = (0..head.num_anchors()).collect();
    let cands = match_rows(head, &anchors, &prompts, &all, opts);
    let dots = (all.len() * prompts.len()) as u64;
    (finish_detections(head, cands, prompts.labels(), model.config().input_size), dots)
}

pub fn brute_force_vocab_match(model: &Model, image: &Tensor, vocab: &Vocabulary, opts: &DecodeOptions) -> Result<Vec<Detection>> {
    let inf = model.infer(image)?;
    Ok(brute_force_detect(model, &inf, vocab, opts).0)
}
