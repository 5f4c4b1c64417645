//! Files: checkpoints, images, configuration, metrics and model bundles.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod ppm;

use std::path::Path;

pub use checkpoint::{decode_strings, encode_strings, Checkpoint, Metadata};
pub use config::{load_dataset_spec, InferConfig, PathsConfig, PromptMode, RunConfig};
pub use metrics::{coco_thresholds, compute_map, interpolated_ap, EvalDetection, EvalTruth, MapReport};
pub use ppm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, mask_from_pgm, overlay, read_pgm, read_ppm, write_pgm, write_ppm};

use crate::error::{Error, Result};
use crate::network::LEVELS;
use crate::params::ParamSet;
use crate::prompt::{FoldedClassifier, FoldedKernel, TextTable};
use crate::tensor::Tensor;

/// Tensors of a folded classifier under `fold/`.
pub fn fold_tensors(fc: &FoldedClassifier) -> ParamSet {
    let mut p = ParamSet::new();
    match &fc.kernel {
        FoldedKernel::Stacked { k_prime } => p.insert("fold/K_prime", k_prime.clone()),
        FoldedKernel::Fused { kernels, grams } => {
            for ((level, k), g) in LEVELS.iter().zip(kernels).zip(grams) {
                p.insert(format!("fold/kernel.{level}"), k.clone());
                p.insert(format!("fold/gram.{level}"), g.clone());
            }
        }
    }
    p.insert("fold/labels", encode_strings(&fc.labels));
    p.insert("fold/tau", Tensor::from_vec(vec![fc.tau]));
    p
}

/// The folded classifier stored in `tensors`, if any.
pub fn folded_from_tensors(tensors: &ParamSet) -> Result<Option<FoldedClassifier>> {
    let Some(labels) = tensors.get("fold/labels") else {
        return Ok(None);
    };
    let labels = decode_strings(labels)?;
    let tau = tensors.require("fold/tau")?.data().first().copied().unwrap_or(1.0);
    let kernel = if let Some(k) = tensors.get("fold/K_prime") {
        FoldedKernel::Stacked { k_prime: k.clone() }
    } else {
        let mut kernels = Vec::new();
        let mut grams = Vec::new();
        for level in LEVELS {
            kernels.push(tensors.require(&format!("fold/kernel.{level}"))?.clone());
            grams.push(tensors.require(&format!("fold/gram.{level}"))?.clone());
        }
        FoldedKernel::Fused { kernels, grams }
    };
    let rows = match &kernel {
        FoldedKernel::Stacked { k_prime } => k_prime.dim(0),
        FoldedKernel::Fused { kernels, .. } => kernels[0].dim(0),
    };
    if rows != labels.len() {
        return Err(Error::Checkpoint(format!(
            "fold has {rows} kernel rows but {} labels",
            labels.len()
        )));
    }
    Ok(Some(FoldedClassifier { kernel, labels, tau }))
}

/// External embedding table: every `text/<name>` tensor of a checkpoint.
pub fn load_text_table(path: &Path) -> Result<TextTable> {
    let ckpt = Checkpoint::load(path)?;
    let mut table = TextTable::new();
    for (name, t) in ckpt.tensors.iter() {
        if let Some(label) = name.strip_prefix("text/") {
            table.insert(label, t.data().to_vec());
        }
    }
    if table.is_empty() {
        return Err(Error::Checkpoint(format!("{} holds no text/<name> tensors", path.display())));
    }
    Ok(table)
}
