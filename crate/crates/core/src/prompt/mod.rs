//! Prompt embeddings from text, visual cues and the built-in vocabulary.

mod reprta;
mod savpe;
mod text;
mod vocab;

pub use reprta::{reprta_fold, reprta_refine, AuxAligner, FoldMode, FoldedClassifier, FoldedKernel};
pub use savpe::{rasterize_cue, savpe_encode, savpe_graph, CueRegion, VisualCue};
pub use text::{encode_text, TextEncoder, TextTable, TEXT_BINS};
pub use vocab::{build_vocabulary, builtin_vocabulary_names, parse_names, ObjectnessPrompt, Vocabulary, BUILTIN_VOCAB_SIZE};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TAU_INIT;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Text,
    Visual,
    Vocabulary,
    Objectness,
}

/// `C` unit-norm prompt rows with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    embeddings: Tensor,
    labels: Vec<String>,
    pub kind: PromptKind,
    pub tau: f32,
}

/// Normalizes every row of a `C×D` matrix in place.
pub(crate) fn normalize_rows(t: &mut Tensor) -> Result<()> {
    let d = t.dim(1);
    for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n <= crate::autodiff::NORM_EPS || !n.is_finite() {
            return Err(Error::NonFinite(format!("prompt row {r} has zero or non-finite norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

impl PromptSet {
    /// Builds a set from raw rows, normalizing each one.
    pub fn new(mut embeddings: Tensor, labels: Vec<String>, kind: PromptKind) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.dim(0) != labels.len() {
            return Err(Error::Shape {
                op: "prompt set",
                lhs: embeddings.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::Usage("a prompt set needs at least one prompt".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Usage(format!("duplicate prompt label {l:?}")));
            }
        }
        normalize_rows(&mut embeddings)?;
        Ok(Self {
            embeddings,
            labels,
            kind,
            tau: TAU_INIT,
        })
    }

    pub fn with_tau(mut self, tau: f32) -> Self {
        self.tau = tau;
        self
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim(1)
    }

    pub fn row(&self, c: usize) -> &[f32] {
        self.embeddings.row(c)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}
