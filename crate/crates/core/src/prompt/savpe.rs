use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{BoxXyxy, FeaturePyramid, Model, ModelConfig};
use crate::params::Bound;
use crate::tensor::Tensor;

use super::{PromptKind, PromptSet};

/// Additive logit for positions outside the cue; `exp` of it underflows to 0.
const OUTSIDE: f32 = -1.0e9;

#[derive(Clone, Debug, PartialEq)]
pub enum CueRegion {
    Box(BoxXyxy),
    /// `H×W` image-resolution mask, nonzero inside.
    Mask(Tensor),
}

/// One visual example; cues sharing a label are pooled into one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCue {
    pub label: String,
    pub region: CueRegion,
}

/// Binary `H_p×W_p` cue mask at prototype resolution.
///
/// A box covers the cells whose centers fall inside it; a mask covers the
/// cells at least half of whose pixels are set.
pub fn rasterize_cue(region: &CueRegion, config: &ModelConfig) -> Result<Tensor> {
    let [h, w] = config.input_size;
    let (hp, wp) = config.proto_size();
    let (sy, sx) = (h / hp, w / wp);
    let mut out = vec![0.0f32; hp * wp];
    match region {
        CueRegion::Box(b) => {
            let ok = b.iter().all(|v| v.is_finite())
                && b[0] >= 0.0
                && b[1] >= 0.0
                && b[2] <= w as f32
                && b[3] <= h as f32
                && b[0] <= b[2]
                && b[1] <= b[3];
            if !ok {
                return Err(Error::Usage(format!("cue box {b:?} is not inside the {w}×{h} image")));
            }
            for y in 0..hp {
                let cy = (y as f32 + 0.5) * sy as f32;
                if cy < b[1] || cy > b[3] {
                    continue;
                }
                for x in 0..wp {
                    let cx = (x as f32 + 0.5) * sx as f32;
                    if cx >= b[0] && cx <= b[2] {
                        out[y * wp + x] = 1.0;
                    }
                }
            }
        }
        CueRegion::Mask(m) => {
            if m.shape() != [h, w] {
                return Err(Error::Shape {
                    op: "cue mask",
                    lhs: m.shape().to_vec(),
                    rhs: vec![h, w],
                });
            }
            for y in 0..hp {
                for x in 0..wp {
                    let mut on = 0;
                    for yy in y * sy..(y + 1) * sy {
                        for xx in x * sx..(x + 1) * sx {
                            if m.data()[yy * w + xx] != 0.0 {
                                on += 1;
                            }
                        }
                    }
                    if 2 * on >= sy * sx {
                        out[y * wp + x] = 1.0;
                    }
                }
            }
        }
    }
    if out.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateCue(format!(
            "cue {region:?} covers no cell of the {wp}×{hp} prototype grid"
        )));
    }
    Tensor::new(vec![hp, wp], out)
}

/// Visual prompt (`1×D`, unit norm) for one rasterized cue over the
/// stride-4 feature map `features`.
pub fn savpe_graph(g: &mut Graph, model: &Model, p: &Bound, features: Var, cue: &Tensor) -> Result<Var> {
    let c = model.config();
    let (hp, wp) = c.proto_size();
    let hw = hp * wp;
    if cue.shape() != [hp, wp] {
        return Err(Error::Shape {
            op: "savpe cue",
            lhs: cue.shape().to_vec(),
            rhs: vec![hp, wp],
        });
    }
    let s = Model::conv(g, p, features, "savpe.sem1", 1, 0, true)?;
    let s = Model::conv(g, p, s, "savpe.sem2", 1, 0, false)?;
    let ds = g.shape(s)[0];
    let s = g.reshape(s, &[ds, hw])?;

    let m = g.constant(cue.clone().reshape(&[1, hp, wp])?);
    let cat = g.concat(&[features, m], 0)?;
    let a = Model::conv(g, p, cat, "savpe.act1", 1, 0, true)?;
    let a = Model::conv(g, p, a, "savpe.act2", 1, 0, false)?;
    let groups = c.groups;
    let a = g.reshape(a, &[groups, hw])?;
    let penalty: Vec<f32> = (0..groups)
        .flat_map(|_| cue.data().iter().map(|&v| if v != 0.0 { 0.0 } else { OUTSIDE }))
        .collect();
    let penalty = g.constant(Tensor::new(vec![groups, hw], penalty)?);
    let a = g.add(a, penalty)?;
    let weights = g.softmax(a, 1)?;

    let dg = c.embed_dim / groups;
    let pooled = if c.savpe_shared_semantic {
        let st = g.transpose(s)?;
        let gm = g.matmul(weights, st)?;
        g.reshape(gm, &[1, c.embed_dim])?
    } else {
        let mut parts = Vec::with_capacity(groups);
        for i in 0..groups {
            let wi = g.slice(weights, 0, i, 1)?;
            let si = g.slice(s, 0, i * dg, dg)?;
            let st = g.transpose(si)?;
            parts.push(g.matmul(wi, st)?);
        }
        g.concat(&parts, 1)?
    };
    let out = g.l2_normalize(pooled, 1)?;
    g.set_scope("");
    Ok(out)
}

/// Visual prompts for `cues` over one image's features; one row per label.
pub fn savpe_encode(model: &Model, pyramid: &FeaturePyramid, cues: &[VisualCue]) -> Result<PromptSet> {
    if cues.is_empty() {
        return Err(Error::Usage("visual prompting needs at least one cue".into()));
    }
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, |_| false);
    let feats = g.constant(pyramid.proto_input.clone());
    let d = model.config().embed_dim;
    let mut labels: Vec<String> = Vec::new();
    let mut sums: Vec<Vec<f32>> = Vec::new();
    for cue in cues {
        let mask = rasterize_cue(&cue.region, model.config())?;
        let row = savpe_graph(&mut g, model, &p, feats, &mask)?;
        let v = g.value(row).data();
        let i = match labels.iter().position(|l| *l == cue.label) {
            Some(i) => i,
            None => {
                labels.push(cue.label.clone());
                sums.push(vec![0.0; d]);
                labels.len() - 1
            }
        };
        for (s, x) in sums[i].iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = labels.len();
    let data = sums.into_iter().flatten().collect();
    Ok(PromptSet::new(Tensor::new(vec![n, d], data)?, labels, PromptKind::Visual)?.with_tau(model.tau()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(4, 1, 8, 2, 32)
    }

    #[test]
    fn box_rasterization_uses_cell_centers() {
        let m = rasterize_cue(&CueRegion::Box([0.0, 0.0, 6.0, 2.0]), &cfg()).unwrap();
        assert_eq!(m.shape(), &[8, 8]);
        assert_eq!(m.data().iter().sum::<f32>(), 2.0);
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[1], 1.0);
    }

    #[test]
    fn tiny_cue_is_degenerate() {
        let err = rasterize_cue(&CueRegion::Box([0.0, 0.0, 1.0, 1.0]), &cfg()).unwrap_err();
        assert!(matches!(err, Error::DegenerateCue(_)));
    }

    #[test]
    fn out_of_bounds_cue_is_rejected() {
        assert!(rasterize_cue(&CueRegion::Box([0.0, 0.0, 40.0, 8.0]), &cfg()).is_err());
    }

    #[test]
    fn empty_cue_list_is_a_usage_error() {
        let m = Model::build(cfg()).unwrap();
        let inf = m.infer(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(matches!(savpe_encode(&m, &inf.pyramid, &[]), Err(Error::Usage(_))));
    }
}
