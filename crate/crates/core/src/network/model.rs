use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, InitRng, ParamSet};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::{FeaturePyramid, HeadOutputs, Inference};

/// Initial logit scale applied to cosine similarities.
pub const TAU_INIT: f32 = 14.3;
pub const TAU_MIN: f32 = 1.0;
pub const TAU_MAX: f32 = 100.0;

pub const LEVELS: [&str; 3] = ["p3", "p4", "p5"];
pub const HEADS: [&str; 4] = ["box", "embed", "mask", "obj"];

#[derive(Clone, Copy, Debug)]
enum Init {
    He,
    Zero,
    Const(f32),
    /// He-uniform times a gain.
    Scaled(f32),
}

const RESIDUAL_GAIN: f32 = 0.5;
const OUTPUT_GAIN: f32 = 0.1;

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_slots(out: &mut Vec<Slot>, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
    conv_slots_scaled(out, name, c_out, c_in, k, bias, 1.0);
}

fn conv_slots_scaled(out: &mut Vec<Slot>, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool, gain: f32) {
    out.push(Slot {
        name: format!("{name}.w"),
        shape: vec![c_out, c_in, k, k],
        init: if gain == 1.0 { Init::He } else { Init::Scaled(gain) },
    });
    if bias {
        out.push(Slot {
            name: format!("{name}.b"),
            shape: vec![c_out],
            init: Init::Zero,
        });
    }
}

/// Every parameter of the model, in initialization order.
fn layout(c: &ModelConfig) -> Vec<Slot> {
    let w = c.width;
    let [c3, c4, c5] = c.level_channels();
    let h = c.head_hidden();
    let mut s = Vec::new();
    conv_slots(&mut s, "backbone.stem", w, 3, 3, true);
    let stages = [(2, w, w), (3, w, c3), (4, c3, c4), (5, c4, c5)];
    for (stage, cin, cout) in stages {
        conv_slots(&mut s, &format!("backbone.s{stage}.down"), cout, cin, 3, true);
        for b in 0..c.depth {
            conv_slots(&mut s, &format!("backbone.s{stage}.block{b}.conv1"), cout, cout, 3, true);
            conv_slots_scaled(&mut s, &format!("backbone.s{stage}.block{b}.conv2"), cout, cout, 3, true, RESIDUAL_GAIN);
        }
    }
    conv_slots(&mut s, "neck.td4", c4, c5 + c4, 3, true);
    conv_slots(&mut s, "neck.td3", c3, c4 + c3, 3, true);
    conv_slots(&mut s, "neck.bu4.down", c3, c3, 3, true);
    conv_slots(&mut s, "neck.bu4.fuse", c4, c3 + c4, 3, true);
    conv_slots(&mut s, "neck.bu5.down", c4, c4, 3, true);
    conv_slots(&mut s, "neck.bu5.fuse", c5, c4 + c5, 3, true);
    for (level, cin) in LEVELS.iter().zip([c3, c4, c5]) {
        for head in HEADS {
            conv_slots(&mut s, &format!("head.{head}.{level}.stem"), h, cin, 3, true);
            let (out, bias, gain) = match head {
                "box" => (4, true, OUTPUT_GAIN),
                "embed" => (c.embed_dim, false, 1.0),
                "mask" => (c.prototypes, true, OUTPUT_GAIN),
                _ => (1, true, OUTPUT_GAIN),
            };
            conv_slots_scaled(&mut s, &format!("head.{head}.{level}.out"), out, h, 1, bias, gain);
        }
    }
    conv_slots(&mut s, "proto.conv1", w, c3, 3, true);
    conv_slots(&mut s, "proto.conv2", c.prototypes, w, 1, true);
    conv_slots(&mut s, "savpe.sem1", h, c3, 1, true);
    conv_slots(&mut s, "savpe.sem2", c.semantic_channels(), h, 1, true);
    conv_slots(&mut s, "savpe.act1", h, c3 + 1, 1, true);
    conv_slots(&mut s, "savpe.act2", c.groups, h, 1, true);
    s.push(Slot {
        name: "tau".into(),
        shape: vec![1],
        init: Init::Const(TAU_INIT),
    });
    s
}

pub fn is_savpe(name: &str) -> bool {
    name.starts_with("savpe.")
}

pub fn is_objectness(name: &str) -> bool {
    name.starts_with("head.obj.")
}

/// The tiny detector: backbone, PAN/FPN neck, four heads per level and a
/// prototype generator, plus the visual-prompt encoder weights and the
/// similarity temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

/// Graph handles produced by [`Model::forward`].
pub struct ForwardVars {
    /// Neck outputs P3, P4, P5.
    pub levels: [Var; 3],
    /// P3 upsampled to stride 4; feeds the prototype and visual-prompt branches.
    pub proto_input: Var,
    /// Per-level features entering the final embedding conv (`I` in `I ⊛ K`).
    pub embed_features: [Var; 3],
    /// N×4 non-negative distances in stride units.
    pub box_dist: Var,
    /// N×D before normalization.
    pub embed_raw: Var,
    /// N×D unit rows.
    pub embeddings: Var,
    pub mask_coeffs: Var,
    /// N×1 logits.
    pub objectness: Var,
    pub prototypes: Var,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = InitRng::new(config.seed);
        let mut params = ParamSet::new();
        for slot in layout(&config) {
            let t = match slot.init {
                Init::He => rng.he_uniform(&slot.shape),
                Init::Zero => Tensor::zeros(&slot.shape),
                Init::Const(v) => Tensor::full(&slot.shape, v),
                Init::Scaled(gain) => {
                    let mut t = rng.he_uniform(&slot.shape);
                    t.data_mut().iter_mut().for_each(|v| *v *= gain);
                    t
                }
            };
            params.insert(slot.name, t);
        }
        Ok(Self { config, params })
    }

    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut ordered = ParamSet::new();
        for slot in layout(&config) {
            let t = params.require(&slot.name)?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
            ordered.insert(slot.name, t.clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn tau(&self) -> f32 {
        self.params.get("tau").map_or(TAU_INIT, Tensor::item)
    }

    /// Keeps the temperature inside its allowed range after an update.
    pub fn clamp_tau(&mut self) {
        if let Some(t) = self.params.get_mut("tau") {
            let v = t.data()[0].clamp(TAU_MIN, TAU_MAX);
            t.data_mut()[0] = v;
        }
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let [h, w] = self.config.input_size;
        if image.shape() != [3, h, w] {
            return Err(Error::Shape {
                op: "model input",
                lhs: image.shape().to_vec(),
                rhs: vec![3, h, w],
            });
        }
        Ok(())
    }

    pub(crate) fn conv(
        g: &mut Graph,
        p: &Bound,
        x: Var,
        name: &str,
        stride: usize,
        pad: usize,
        act: bool,
    ) -> Result<Var> {
        g.set_scope(name);
        let w = p.var(&format!("{name}.w"))?;
        let b = p.var(&format!("{name}.b")).ok();
        let y = g.conv2d(x, w, b, stride, pad)?;
        if act {
            g.silu(y)
        } else {
            Ok(y)
        }
    }

    /// `C×H×W` map → `(H·W)×C` rows, row-major over pixels.
    pub(crate) fn to_rows(g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        g.transpose(flat)
    }

    /// Single forward pass over one `3×H×W` image bound on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<ForwardVars> {
        let c = &self.config;
        let [h, w] = c.input_size;
        if g.shape(image) != [3, h, w] {
            return Err(Error::Shape {
                op: "model input",
                lhs: g.shape(image).to_vec(),
                rhs: vec![3, h, w],
            });
        }
        g.set_scope("input");
        let centered = g.add_scalar(image, -0.5)?;
        let centered = g.mul_scalar(centered, 2.0)?;
        let mut x = Self::conv(g, p, centered, "backbone.stem", 2, 1, true)?;
        let mut stage_out = Vec::new();
        for stage in 2..=5 {
            x = Self::conv(g, p, x, &format!("backbone.s{stage}.down"), 2, 1, true)?;
            for b in 0..c.depth {
                let pre = format!("backbone.s{stage}.block{b}");
                let r = Self::conv(g, p, x, &format!("{pre}.conv1"), 1, 1, true)?;
                let r = Self::conv(g, p, r, &format!("{pre}.conv2"), 1, 1, true)?;
                x = g.add(x, r)?;
            }
            stage_out.push(x);
        }
        let (c3, c4, c5) = (stage_out[1], stage_out[2], stage_out[3]);

        g.set_scope("neck");
        let u5 = g.upsample_nearest(c5, 2)?;
        let cat = g.concat(&[u5, c4], 0)?;
        let t4 = Self::conv(g, p, cat, "neck.td4", 1, 1, true)?;
        let u4 = g.upsample_nearest(t4, 2)?;
        let cat = g.concat(&[u4, c3], 0)?;
        let p3 = Self::conv(g, p, cat, "neck.td3", 1, 1, true)?;
        let d3 = Self::conv(g, p, p3, "neck.bu4.down", 2, 1, true)?;
        let cat = g.concat(&[d3, t4], 0)?;
        let p4 = Self::conv(g, p, cat, "neck.bu4.fuse", 1, 1, true)?;
        let d4 = Self::conv(g, p, p4, "neck.bu5.down", 2, 1, true)?;
        let cat = g.concat(&[d4, c5], 0)?;
        let p5 = Self::conv(g, p, cat, "neck.bu5.fuse", 1, 1, true)?;
        let levels = [p3, p4, p5];

        let mut rows: [Vec<Var>; 4] = Default::default();
        let mut embed_features = Vec::with_capacity(3);
        for (level, &feat) in LEVELS.iter().zip(&levels) {
            for (hi, head) in HEADS.iter().enumerate() {
                let pre = format!("head.{head}.{level}");
                let stem = Self::conv(g, p, feat, &format!("{pre}.stem"), 1, 1, true)?;
                let nonlinear_tail = *head == "embed" && !c.linear_embed_head;
                let out = Self::conv(g, p, stem, &format!("{pre}.out"), 1, 0, nonlinear_tail)?;
                if *head == "embed" {
                    embed_features.push(stem);
                }
                rows[hi].push(Self::to_rows(g, out)?);
            }
        }
        g.set_scope("heads");
        let box_raw = g.concat(&rows[0], 0)?;
        let box_dist = g.softplus(box_raw)?;
        let embed_raw = g.concat(&rows[1], 0)?;
        let embeddings = g.l2_normalize(embed_raw, 1)?;
        let mask_coeffs = g.concat(&rows[2], 0)?;
        let objectness = g.concat(&rows[3], 0)?;

        g.set_scope("proto");
        let proto_input = g.upsample_nearest(p3, 2)?;
        let pr = Self::conv(g, p, proto_input, "proto.conv1", 1, 1, true)?;
        let prototypes = Self::conv(g, p, pr, "proto.conv2", 1, 0, false)?;
        g.set_scope("");

        Ok(ForwardVars {
            levels,
            proto_input,
            embed_features: [embed_features[0], embed_features[1], embed_features[2]],
            box_dist,
            embed_raw,
            embeddings,
            mask_coeffs,
            objectness,
            prototypes,
        })
    }

    /// Inference-only forward pass returning detached tensors.
    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let img = g.constant(image.clone());
        let fv = self.forward(&mut g, &p, img)?;
        Ok(Inference::collect(&g, &fv))
    }

    /// Counted floating-point operations of one forward pass.
    pub fn forward_flops(&self) -> Result<u64> {
        let [h, w] = self.config.input_size;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let img = g.constant(Tensor::zeros(&[3, h, w]));
        self.forward(&mut g, &p, img)?;
        Ok(g.flops())
    }
}

impl Inference {
    pub(crate) fn collect(g: &Graph, fv: &ForwardVars) -> Self {
        let n = g.shape(fv.objectness)[0];
        let objectness = g.value(fv.objectness).clone().reshape(&[n]).expect("N×1 → N");
        Inference {
            head: HeadOutputs {
                box_deltas: g.value(fv.box_dist).clone(),
                embeddings: g.value(fv.embeddings).clone(),
                mask_coeffs: g.value(fv.mask_coeffs).clone(),
                objectness,
                prototypes: g.value(fv.prototypes).clone(),
            },
            pyramid: FeaturePyramid {
                levels: fv.levels.iter().map(|&v| g.value(v).clone()).collect(),
                proto_input: g.value(fv.proto_input).clone(),
            },
            embed_features: fv.embed_features.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}
