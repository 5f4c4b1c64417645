//! The detector: configuration, weights, forward pass and anchor decoding.

mod anchors;
mod config;
mod model;

pub use anchors::{decode_boxes, encode_boxes, AnchorGrid, BoxXyxy};
pub use config::ModelConfig;
pub use model::{is_objectness, is_savpe, ForwardVars, Model, HEADS, LEVELS, TAU_INIT, TAU_MAX, TAU_MIN};

use crate::tensor::Tensor;

/// Raw per-image predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    /// N×4 left/top/right/bottom distances in stride units, after softplus.
    pub box_deltas: Tensor,
    /// N×D, unit rows.
    pub embeddings: Tensor,
    /// N×K_p.
    pub mask_coeffs: Tensor,
    /// N logits.
    pub objectness: Tensor,
    /// K_p×(H/4)×(W/4).
    pub prototypes: Tensor,
}

impl HeadOutputs {
    pub fn num_anchors(&self) -> usize {
        self.objectness.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// P3, P4, P5.
    pub levels: Vec<Tensor>,
    /// P3 upsampled to prototype resolution.
    pub proto_input: Tensor,
}

/// Everything one inference forward pass exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub head: HeadOutputs,
    pub pyramid: FeaturePyramid,
    /// Per-level inputs of the final embedding conv.
    pub embed_features: Vec<Tensor>,
}
