use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_strides() -> Vec<usize> {
    vec![8, 16, 32]
}

fn default_true() -> bool {
    true
}

/// Architecture knobs. The architecture is a pure function of this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel count.
    pub width: usize,
    /// Residual blocks per backbone stage.
    pub depth: usize,
    /// Embedding dimension `D`.
    pub embed_dim: usize,
    /// Prototype count `K_p`.
    pub prototypes: usize,
    /// Visual-prompt group count `A`; must divide `embed_dim`.
    pub groups: usize,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    /// `(H, W)` in pixels.
    pub input_size: [usize; 2],
    pub seed: u64,
    /// Visual prompts reuse one `D/A`-channel semantic map for every group
    /// instead of slicing a `D`-channel map.
    #[serde(default)]
    pub savpe_shared_semantic: bool,
    /// The embedding head ends in a bias-free linear 1×1 conv (required by fused folding).
    #[serde(default = "default_true")]
    pub linear_embed_head: bool,
}

impl ModelConfig {
    pub fn new(width: usize, depth: usize, embed_dim: usize, prototypes: usize, input: usize) -> Self {
        Self {
            width,
            depth,
            embed_dim,
            prototypes,
            groups: 4.min(embed_dim).max(1),
            strides: default_strides(),
            input_size: [input, input],
            seed: 0,
            savpe_shared_semantic: false,
            linear_embed_head: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.depth == 0 {
            return fail(format!(
                "width and depth must be >= 1 (got width={}, depth={})",
                self.width, self.depth
            ));
        }
        if self.embed_dim == 0 || self.groups == 0 || !self.embed_dim.is_multiple_of(self.groups) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of groups {}",
                self.embed_dim, self.groups
            ));
        }
        if self.prototypes == 0 {
            return fail("prototypes must be >= 1".into());
        }
        if self.strides != default_strides() {
            return fail(format!(
                "strides must be [8, 16, 32] for this backbone (got {:?})",
                self.strides
            ));
        }
        for &s in &self.strides {
            if !self.input_size[0].is_multiple_of(s) || !self.input_size[1].is_multiple_of(s) || self.input_size[0] == 0 {
                return fail(format!(
                    "stride {s} does not divide input size {:?}",
                    self.input_size
                ));
            }
        }
        Ok(())
    }

    /// Channels of P3, P4, P5.
    pub fn level_channels(&self) -> [usize; 3] {
        [2 * self.width, 4 * self.width, 4 * self.width]
    }

    /// Hidden channels of every head branch.
    pub fn head_hidden(&self) -> usize {
        self.width
    }

    /// Spatial extents of each pyramid level.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|s| (self.input_size[0] / s, self.input_size[1] / s))
            .collect()
    }

    pub fn num_anchors(&self) -> usize {
        self.level_sizes().iter().map(|(h, w)| h * w).sum()
    }

    /// Prototype map extent (stride 4).
    pub fn proto_size(&self) -> (usize, usize) {
        (self.input_size[0] / 4, self.input_size[1] / 4)
    }

    /// Channels of the semantic map `S`.
    pub fn semantic_channels(&self) -> usize {
        if self.savpe_shared_semantic {
            self.embed_dim / self.groups
        } else {
            self.embed_dim
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_count_from_strides() {
        let c = ModelConfig::new(8, 1, 16, 4, 64);
        assert_eq!(c.num_anchors(), 64 + 16 + 4);
        let wide = ModelConfig::new(32, 3, 16, 4, 64);
        assert_eq!(wide.num_anchors(), c.num_anchors());
    }

    #[test]
    fn rejects_bad_group_count_and_size() {
        let mut c = ModelConfig::new(8, 1, 16, 4, 64);
        c.groups = 3;
        assert!(c.validate().unwrap_err().to_string().contains("groups"));
        let mut c = ModelConfig::new(8, 1, 16, 4, 64);
        c.input_size = [72, 64];
        assert!(c.validate().unwrap_err().to_string().contains("stride"));
        let c = ModelConfig::new(8, 0, 16, 4, 64);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"width":8,"depth":1,"embed_dim":16,"prototypes":4,"groups":4,
            "input_size":[64,64],"seed":0,"widht":3}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
    }
}
