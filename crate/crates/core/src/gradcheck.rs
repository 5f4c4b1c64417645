//! Central-difference gradient oracle.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f32 = 1e-3;

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i − central_i| / max(|analytic_i|, |central_i|, 1e-6)`.
/// A non-finite value anywhere yields `f64::INFINITY` so the caller's bound fails.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let analytic = g.backward(out)?.take(leaf).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut eval = |t: Tensor| -> Result<Option<f32>> {
        let mut g = Graph::new();
        let leaf = g.param(t);
        match f(&mut g, leaf) {
            Ok(v) => Ok(Some(g.value(v).item())),
            Err(crate::Error::NonFinite(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (Some(fp), Some(fm)) = (eval(plus)?, eval(minus)?) else {
            return Ok(f64::INFINITY);
        };
        // the actual step after f32 rounding of x ± h
        let step = f64::from(x.data()[i] + h) - f64::from(x.data()[i] - h);
        let central = (f64::from(fp) - f64::from(fm)) / step;
        let a = f64::from(analytic[i]);
        if !central.is_finite() || !a.is_finite() {
            return Ok(f64::INFINITY);
        }
        let denom = a.abs().max(central.abs()).max(1e-6);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}

/// Tape gradient of `f` (f32) against central differences of `reference`, an
/// independent f64 implementation of the same scalar function.
///
/// The f64 side removes the `ulp(f)/2h` rounding floor that limits an
/// all-f32 central difference; the analytic side is still the f32 tape.
pub fn finite_diff_check_against<F, R>(f: F, reference: R, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
    R: Fn(&[f64]) -> f64,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let analytic = g.backward(out)?.take(leaf).unwrap_or_else(|| vec![0.0; x.numel()]);
    let base: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let fp = reference(&probe);
        probe[i] = base[i] - h;
        let fm = reference(&probe);
        probe[i] = base[i];
        let central = (fp - fm) / (2.0 * h);
        let a = f64::from(analytic[i]);
        if !central.is_finite() || !a.is_finite() {
            return Ok(f64::INFINITY);
        }
        let denom = a.abs().max(central.abs()).max(1e-6);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}
