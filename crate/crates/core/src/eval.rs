//! Mask mAP of the three prompting modes over synthetic scenes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::inference::{classify, detect, prompt_free_detect, DecodeOptions, Detection, TextClassifier};
use crate::io::metrics::{coco_thresholds, compute_map, EvalDetection, EvalTruth, MapReport};
use crate::network::Model;
use crate::prompt::{encode_text, reprta_refine, savpe_encode, AuxAligner, CueRegion, PromptKind, PromptSet, TextEncoder, VisualCue, Vocabulary};
use crate::tensor::Tensor;
use crate::train::SyntheticScene;

/// Runs `detect` on every scene and scores the result against all instances.
pub fn evaluate<F>(scenes: &[SyntheticScene], mut detect: F) -> Result<MapReport>
where
    F: FnMut(&SyntheticScene) -> Result<Vec<Detection>>,
{
    let mut dets = Vec::new();
    let mut truths = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for d in detect(scene)? {
            dets.push(EvalDetection {
                image: i,
                label: d.label,
                score: d.score,
                mask: d.mask,
            });
        }
        for inst in &scene.instances {
            truths.push(EvalTruth {
                image: i,
                label: inst.name.clone(),
                mask: inst.mask.clone(),
            });
        }
    }
    Ok(compute_map(&dets, &truths, &coco_thresholds()))
}

/// Refined text prompts for `names` at the model's temperature.
pub fn text_prompts(model: &Model, aux: &AuxAligner, names: &[String]) -> Result<PromptSet> {
    let encoder = TextEncoder::new(model.config().embed_dim);
    let raw = encode_text(names, None, &encoder)?;
    Ok(reprta_refine(&raw, aux)?.with_tau(model.tau()))
}

pub fn evaluate_text(model: &Model, classifier: &TextClassifier, scenes: &[SyntheticScene], opts: &DecodeOptions) -> Result<MapReport> {
    evaluate(scenes, |s| {
        let inf = model.infer(&s.image)?;
        let sim = classifier.similarity(model, &inf)?;
        Ok(detect(model, &inf, &sim, classifier.labels(), opts))
    })
}

/// One visual prompt per category: box cues of the first `per_category`
/// instances found in `references`, averaged and renormalized.
pub fn visual_prompts(model: &Model, references: &[SyntheticScene], per_category: usize) -> Result<PromptSet> {
    let d = model.config().embed_dim;
    let mut labels: Vec<String> = Vec::new();
    let mut sums: Vec<Vec<f32>> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for scene in references {
        let cues: Vec<VisualCue> = scene
            .instances
            .iter()
            .filter(|i| counts.get(&i.name).copied().unwrap_or(0) < per_category)
            .map(|i| VisualCue {
                label: i.name.clone(),
                region: CueRegion::Box(i.bbox),
            })
            .collect();
        if cues.is_empty() {
            continue;
        }
        let inf = model.infer(&scene.image)?;
        for single in &cues {
            let p = savpe_encode(model, &inf.pyramid, std::slice::from_ref(single))?;
            let i = match labels.iter().position(|l| *l == single.label) {
                Some(i) => i,
                None => {
                    labels.push(single.label.clone());
                    sums.push(vec![0.0; d]);
                    labels.len() - 1
                }
            };
            sums[i].iter_mut().zip(p.row(0)).for_each(|(s, v)| *s += v);
            *counts.entry(single.label.clone()).or_default() += 1;
        }
    }
    if labels.is_empty() {
        return Err(Error::Usage("reference scenes hold no instances".into()));
    }
    let n = labels.len();
    let data = sums.into_iter().flatten().collect();
    Ok(PromptSet::new(Tensor::new(vec![n, d], data)?, labels, PromptKind::Visual)?.with_tau(model.tau()))
}

pub fn evaluate_visual(model: &Model, prompts: &PromptSet, scenes: &[SyntheticScene], opts: &DecodeOptions) -> Result<MapReport> {
    evaluate(scenes, |s| {
        let inf = model.infer(&s.image)?;
        let sim = classify(&inf.head.embeddings, prompts)?;
        Ok(detect(model, &inf, &sim, prompts.labels(), opts))
    })
}

pub fn evaluate_prompt_free(model: &Model, vocab: &Vocabulary, delta: f32, scenes: &[SyntheticScene], opts: &DecodeOptions) -> Result<MapReport> {
    evaluate(scenes, |s| {
        let inf = model.infer(&s.image)?;
        Ok(prompt_free_detect(model, &inf, vocab, delta, opts).0)
    })
}
