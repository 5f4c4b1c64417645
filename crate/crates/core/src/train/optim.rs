//! SGD with momentum, AdamW, and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Linear warmup over the first 5% of steps, then cosine decay to 0.
pub fn warmup_cosine(step: usize, total: usize, base: f32) -> f32 {
    let total = total.max(1);
    let warmup = total.div_ceil(20).max(1);
    if step < warmup {
        base * (step + 1) as f32 / warmup as f32
    } else {
        let span = (total - warmup).max(1) as f32;
        let t = ((step - warmup) as f32 / span).min(1.0);
        base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

/// Weight decay applies to conv and linear weights only.
fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Per-parameter state, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    /// `v ← μv + (g + λp)`, `p ← p − lr·v`.
    Sgd {
        momentum: f32,
        weight_decay: f32,
        velocity: ParamSet,
    },
    /// Adam moments with decoupled decay: `p ← p − lr·(m̂/(√v̂ + ε) + λp)`.
    AdamW {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
        m: ParamSet,
        v: ParamSet,
        t: u64,
    },
}

impl Optimizer {
    pub fn sgd(momentum: f32, weight_decay: f32) -> Self {
        Self::Sgd {
            momentum,
            weight_decay,
            velocity: ParamSet::new(),
        }
    }

    pub fn adamw(weight_decay: f32) -> Self {
        Self::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: ParamSet::new(),
            v: ParamSet::new(),
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd { .. } => OptimizerKind::Sgd,
            Self::AdamW { .. } => OptimizerKind::Adamw,
        }
    }

    /// Updates every entry of `sets` that has a gradient in `grads`; one call is one step.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &ParamSet, lr: f32) {
        if let Self::AdamW { t, .. } = self {
            *t += 1;
        }
        for params in sets.iter_mut() {
            self.update(params, grads, lr);
        }
    }

    fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f32) {
        match self {
            Self::Sgd {
                momentum,
                weight_decay,
                velocity,
            } => {
                for (name, p) in params.iter_mut() {
                    let Some(g) = grads.get(name) else { continue };
                    if velocity.get(name).is_none() {
                        velocity.insert(name, Tensor::zeros(p.shape()));
                    }
                    let vel = velocity.get_mut(name).expect("just inserted");
                    let wd = if decays(name) { *weight_decay } else { 0.0 };
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *vv = *momentum * *vv + (gv + wd * *pv);
                        *pv -= lr * *vv;
                    }
                }
            }
            Self::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
                t,
            } => {
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for (name, p) in params.iter_mut() {
                    let Some(g) = grads.get(name) else { continue };
                    if m.get(name).is_none() {
                        m.insert(name, Tensor::zeros(p.shape()));
                        v.insert(name, Tensor::zeros(p.shape()));
                    }
                    let mt = m.get_mut(name).expect("just inserted");
                    let vt = v.get_mut(name).expect("just inserted");
                    let wd = if decays(name) { *weight_decay } else { 0.0 };
                    for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(mt.data_mut()).zip(vt.data_mut()) {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr * (mhat / (vhat.sqrt() + *eps) + wd * *pv);
                    }
                }
            }
        }
    }

    /// State as named tensors under `prefix`.
    pub fn export(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        match self {
            Self::Sgd {
                momentum,
                weight_decay,
                velocity,
            } => {
                out.insert(format!("{prefix}/hyper"), Tensor::from_vec(vec![0.0, *momentum, *weight_decay]));
                for (n, t) in velocity.iter() {
                    out.insert(format!("{prefix}/velocity/{n}"), t.clone());
                }
            }
            Self::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
                t,
            } => {
                // step count split into two exactly representable halves
                let hi = (*t >> 24) as f32;
                let lo = (*t & 0xff_ffff) as f32;
                out.insert(
                    format!("{prefix}/hyper"),
                    Tensor::from_vec(vec![1.0, *beta1, *beta2, *eps, *weight_decay, hi, lo]),
                );
                for (n, x) in m.iter() {
                    out.insert(format!("{prefix}/m/{n}"), x.clone());
                }
                for (n, x) in v.iter() {
                    out.insert(format!("{prefix}/v/{n}"), x.clone());
                }
            }
        }
        out
    }

    pub fn import(tensors: &ParamSet, prefix: &str) -> Result<Self> {
        let hyper = tensors.require(&format!("{prefix}/hyper"))?.data().to_vec();
        let collect = |sub: &str| {
            let pre = format!("{prefix}/{sub}/");
            let mut set = ParamSet::new();
            for (n, t) in tensors.iter() {
                if let Some(rest) = n.strip_prefix(&pre) {
                    set.insert(rest, t.clone());
                }
            }
            set
        };
        match hyper.first().copied() {
            Some(0.0) if hyper.len() == 3 => Ok(Self::Sgd {
                momentum: hyper[1],
                weight_decay: hyper[2],
                velocity: collect("velocity"),
            }),
            Some(1.0) if hyper.len() == 7 => Ok(Self::AdamW {
                beta1: hyper[1],
                beta2: hyper[2],
                eps: hyper[3],
                weight_decay: hyper[4],
                m: collect("m"),
                v: collect("v"),
                t: ((hyper[5] as u64) << 24) | hyper[6] as u64,
            }),
            _ => Err(Error::Checkpoint(format!("unrecognized optimizer state under {prefix}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        assert_eq!(warmup_cosine(0, 100, 1.0), 0.2);
        assert_eq!(warmup_cosine(4, 100, 1.0), 1.0);
        assert!(warmup_cosine(50, 100, 1.0) < 1.0);
        assert!(warmup_cosine(99, 100, 1.0) < 0.01);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::from_vec(vec![1.0, -2.0]));
        let mut g = ParamSet::new();
        g.insert("a.w", Tensor::from_vec(vec![0.5, 0.5]));
        for mut opt in [Optimizer::sgd(0.9, 1e-4), Optimizer::adamw(0.01)] {
            let before = p.clone();
            opt.step(&mut [&mut p], &g, 0.0);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn state_round_trips() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::from_vec(vec![1.0, -2.0]));
        let mut g = ParamSet::new();
        g.insert("a.w", Tensor::from_vec(vec![0.5, 0.25]));
        for mut opt in [Optimizer::sgd(0.9, 1e-4), Optimizer::adamw(0.01)] {
            opt.step(&mut [&mut p], &g, 0.1);
            let back = Optimizer::import(&opt.export("opt"), "opt").unwrap();
            assert_eq!(back, opt);
        }
    }
}
