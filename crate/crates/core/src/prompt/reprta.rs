use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::network::{Inference, Model, LEVELS};
use crate::params::{Bound, InitRng, ParamSet};
use crate::tensor::{dot, Tensor};

use super::PromptSet;

/// Residual MLP `P + fc2(silu(fc1(P)))` applied to text prompts during training.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxAligner {
    params: ParamSet,
}

impl AuxAligner {
    /// Random first layer, zero second layer: an exact identity at start.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = InitRng::new(seed ^ 0xa0a0_a0a0);
        let mut params = ParamSet::new();
        params.insert("aux.fc1.w", rng.fill_uniform(&[dim, 2 * dim], (6.0 / dim as f32).sqrt()));
        params.insert("aux.fc1.b", Tensor::zeros(&[2 * dim]));
        params.insert("aux.fc2.w", Tensor::zeros(&[2 * dim, dim]));
        params.insert("aux.fc2.b", Tensor::zeros(&[dim]));
        Self { params }
    }

    /// Both layers random.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut aux = Self::new(dim, seed);
        let mut rng = InitRng::new(seed ^ 0x0b0b_0b0b);
        let bound = (6.0 / (2 * dim) as f32).sqrt();
        aux.params.insert("aux.fc2.w", rng.fill_uniform(&[2 * dim, dim], bound));
        aux.params.insert("aux.fc1.b", rng.fill_uniform(&[2 * dim], 0.1));
        aux.params.insert("aux.fc2.b", rng.fill_uniform(&[dim], 0.1));
        aux
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let w1 = params.require("aux.fc1.w")?;
        if w1.rank() != 2 || w1.dim(1) != 2 * w1.dim(0) {
            return Err(Error::Checkpoint(format!("aux.fc1.w has shape {:?}", w1.shape())));
        }
        let d = w1.dim(0);
        for (name, shape) in [
            ("aux.fc1.b", vec![2 * d]),
            ("aux.fc2.w", vec![2 * d, d]),
            ("aux.fc2.b", vec![d]),
        ] {
            if params.require(name)?.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name} must have shape {shape:?}")));
            }
        }
        Ok(Self { params })
    }

    pub fn dim(&self) -> usize {
        self.params.get("aux.fc1.w").map_or(0, |w| w.dim(0))
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Refined, re-normalized rows of the `C×D` prompt matrix `p`.
    pub fn refine_graph(&self, g: &mut Graph, bound: &Bound, p: Var) -> Result<Var> {
        g.set_scope("aux");
        let h = g.matmul(p, bound.var("aux.fc1.w")?)?;
        let h = g.add_row_bias(h, bound.var("aux.fc1.b")?)?;
        let h = g.silu(h)?;
        let d = g.matmul(h, bound.var("aux.fc2.w")?)?;
        let d = g.add_row_bias(d, bound.var("aux.fc2.b")?)?;
        let r = g.add(p, d)?;
        g.l2_normalize(r, 1)
    }
}

/// Refined prompt set `P′` (same labels and kind).
pub fn reprta_refine(prompts: &PromptSet, aux: &AuxAligner) -> Result<PromptSet> {
    if aux.dim() != prompts.dim() {
        return Err(Error::Shape {
            op: "reprta_refine",
            lhs: prompts.embeddings().shape().to_vec(),
            rhs: vec![aux.dim()],
        });
    }
    let mut g = Graph::new();
    let bound = aux.params.bind(&mut g, |_| false);
    let p = g.constant(prompts.embeddings().clone());
    let r = aux.refine_graph(&mut g, &bound, p)?;
    let mut out = prompts.clone();
    out.embeddings = g.value(r).clone();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldMode {
    Stacked,
    Fused,
}

impl std::str::FromStr for FoldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" => Ok(Self::Stacked),
            "fused" => Ok(Self::Fused),
            other => Err(Error::Usage(format!("unknown fold mode {other:?} (stacked|fused)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FoldedKernel {
    /// `C×D` 1×1 conv over the unit embedding field.
    Stacked { k_prime: Tensor },
    /// Per level: `C×h` kernel `P′·K_l` and the `h×h` Gram matrix `K_lᵀK_l`
    /// that reproduces the embedding norm.
    Fused { kernels: Vec<Tensor>, grams: Vec<Tensor> },
}

/// Classifier with the refined prompts baked in; the aligner is no longer needed.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedClassifier {
    pub kernel: FoldedKernel,
    pub labels: Vec<String>,
    pub tau: f32,
}

/// `C×D` times `D×h` in f64, rounded once.
fn compose(p: &Tensor, k: &Tensor) -> Tensor {
    let (c, d, h) = (p.dim(0), p.dim(1), k.dim(1));
    let mut out = vec![0.0f32; c * h];
    for i in 0..c {
        for j in 0..h {
            let mut acc = 0.0f64;
            for e in 0..d {
                acc += f64::from(p.data()[i * d + e]) * f64::from(k.data()[e * h + j]);
            }
            out[i * h + j] = acc as f32;
        }
    }
    Tensor::new(vec![c, h], out).expect("C×h")
}

pub fn reprta_fold(prompts: &PromptSet, aux: &AuxAligner, model: &Model, mode: FoldMode) -> Result<FoldedClassifier> {
    let refined = reprta_refine(prompts, aux)?;
    let kernel = match mode {
        FoldMode::Stacked => FoldedKernel::Stacked {
            k_prime: refined.embeddings().clone(),
        },
        FoldMode::Fused => {
            if !model.config().linear_embed_head {
                return Err(Error::FoldMode(
                    "fused folding needs a linear final embedding layer (linear_embed_head = true)".into(),
                ));
            }
            let mut kernels = Vec::new();
            let mut grams = Vec::new();
            for level in LEVELS {
                let w = model.params().require(&format!("head.embed.{level}.out.w"))?;
                let (d, h) = (w.dim(0), w.dim(1));
                let k = w.clone().reshape(&[d, h])?;
                kernels.push(compose(refined.embeddings(), &k));
                grams.push(compose(&k.transpose(), &k));
            }
            FoldedKernel::Fused { kernels, grams }
        }
    };
    Ok(FoldedClassifier {
        kernel,
        labels: prompts.labels().to_vec(),
        tau: model.tau(),
    })
}

impl FoldedClassifier {
    pub fn mode(&self) -> FoldMode {
        match self.kernel {
            FoldedKernel::Stacked { .. } => FoldMode::Stacked,
            FoldedKernel::Fused { .. } => FoldMode::Fused,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Raw `τ·cos` scores (N×C) and the floating-point operations spent
    /// from the inputs of the final embedding conv onward.
    pub fn scores(&self, inf: &Inference, model: &Model) -> Result<(Tensor, u64)> {
        let n = inf.head.num_anchors();
        let c = self.labels.len();
        let mut out = vec![0.0f32; n * c];
        let tau = self.tau;
        let flops;
        match &self.kernel {
            FoldedKernel::Stacked { k_prime } => {
                let o = &inf.head.embeddings;
                if k_prime.dim(1) != o.dim(1) {
                    return Err(Error::Shape {
                        op: "folded classifier",
                        lhs: k_prime.shape().to_vec(),
                        rhs: o.shape().to_vec(),
                    });
                }
                let d = o.dim(1);
                for a in 0..n {
                    for k in 0..c {
                        out[a * c + k] = tau * dot(o.row(a), k_prime.row(k));
                    }
                }
                let h = model.config().head_hidden();
                // final embedding conv, its normalization, then the appended 1×1 conv
                flops = (n * (2 * d * h + 3 * d + 2 * c * d + c)) as u64;
            }
            FoldedKernel::Fused { kernels, grams } => {
                let mut offset = 0;
                let mut count = 0u64;
                for ((feat, kl), gl) in inf.embed_features.iter().zip(kernels).zip(grams) {
                    let h = feat.dim(0);
                    if kl.dim(1) != h || kl.dim(0) != c {
                        return Err(Error::Shape {
                            op: "folded classifier",
                            lhs: kl.shape().to_vec(),
                            rhs: feat.shape().to_vec(),
                        });
                    }
                    let pix = feat.dim(1) * feat.dim(2);
                    let mut f = vec![0.0f32; h];
                    let mut gf = vec![0.0f64; h];
                    for p in 0..pix {
                        for (j, v) in f.iter_mut().enumerate() {
                            *v = feat.data()[j * pix + p];
                        }
                        for (i, acc) in gf.iter_mut().enumerate() {
                            let row = gl.row(i);
                            *acc = (0..h).map(|j| f64::from(row[j]) * f64::from(f[j])).sum();
                        }
                        let sq: f64 = (0..h).map(|j| gf[j] * f64::from(f[j])).sum();
                        let norm = sq.max(0.0).sqrt().max(f64::from(NORM_EPS));
                        let a = offset + p;
                        for k in 0..c {
                            let row = kl.row(k);
                            let s: f64 = (0..h).map(|j| f64::from(row[j]) * f64::from(f[j])).sum();
                            out[a * c + k] = (f64::from(tau) * s / norm) as f32;
                        }
                        count += (2 * h * h + 2 * h + 2 * c * h + c + 2) as u64;
                    }
                    offset += pix;
                }
                if offset != n {
                    return Err(Error::Shape {
                        op: "folded classifier",
                        lhs: vec![offset],
                        rhs: vec![n],
                    });
                }
                flops = count;
            }
        }
        Ok((Tensor::new(vec![n, c], out)?, flops))
    }
}
