//! Weighted BCE, smoothed dice and their α-blend (the "combo" loss).
//!
//! Slice-level kernels accumulate in `f64` regardless of element type so the
//! `f32` training path does not lose precision on large volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NdTensor, Var};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComboLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub smooth: f64,
}

impl Default for ComboLossParams {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.85,
            smooth: 1.0,
        }
    }
}

impl ComboLossParams {
    /// Strict bounds `0 < α < 1`, `0 < β < 1`, `s > 0`.
    pub fn new(alpha: f64, beta: f64, smooth: f64) -> Result<Self> {
        let p = Self { alpha, beta, smooth };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!("smoothing must be positive, got {}", self.smooth)));
        }
        Ok(())
    }
}

/// Which objective to train with; the ablation harness sweeps these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Plain mean binary cross entropy.
    Bce,
    /// β-weighted binary cross entropy.
    WeightedBce,
    /// `1 - dice_term`.
    Dice,
    /// `α·wbce - (1-α)·dice_term`.
    Combo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Bce, LossKind::WeightedBce, LossKind::Dice, LossKind::Combo];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::WeightedBce => "weighted-bce",
            LossKind::Dice => "dice",
            LossKind::Combo => "combo",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn f<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// `-(1/N) Σ [β t ln p + (1-β)(1-t) ln(1-p)]`.
pub fn weighted_bce<T: Element>(p: &[T], t: &[T], beta: T) -> T {
    let beta = f(beta);
    let n = p.len().max(1) as f64;
    let s: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let (p, t) = (clamp(f(p)), f(t));
            beta * t * p.ln() + (1.0 - beta) * (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    T::of(-s / n)
}

/// Derivative of [`weighted_bce`] with respect to each probability, taken at
/// the clamped value.
pub fn weighted_bce_grad<T: Element>(p: &[T], t: &[T], beta: T) -> Vec<T> {
    let beta = f(beta);
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let (p, t) = (clamp(f(p)), f(t));
            T::of(-(beta * t / p - (1.0 - beta) * (1.0 - t) / (1.0 - p)) / n)
        })
        .collect()
}

/// `(Σ t p + s) / (Σ t + Σ p + s)`.
pub fn dice_term<T: Element>(p: &[T], t: &[T], smooth: T) -> T {
    let (num, den) = dice_parts(p, t, f(smooth));
    T::of(num / den)
}

fn dice_parts<T: Element>(p: &[T], t: &[T], s: f64) -> (f64, f64) {
    let mut overlap = 0.0;
    let mut mass = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        let (p, t) = (f(p), f(t));
        overlap += t * p;
        mass += t + p;
    }
    (overlap + s, mass + s)
}

pub fn dice_term_grad<T: Element>(p: &[T], t: &[T], smooth: T) -> Vec<T> {
    let (num, den) = dice_parts(p, t, f(smooth));
    t.iter().map(|&t| T::of((f(t) * den - num) / (den * den))).collect()
}

/// Scalar value of `kind` for probability map `p` against target `t`.
pub fn loss_value<T: Element>(kind: LossKind, p: &[T], t: &[T], params: &ComboLossParams) -> f64 {
    let wbce = |beta: f64| f(weighted_bce(p, t, T::of(beta)));
    let dice = || f(dice_term(p, t, T::of(params.smooth)));
    match kind {
        LossKind::Bce => 2.0 * wbce(0.5),
        LossKind::WeightedBce => wbce(params.beta),
        LossKind::Dice => 1.0 - dice(),
        LossKind::Combo => params.alpha * wbce(params.beta) - (1.0 - params.alpha) * dice(),
    }
}

/// Record `kind` on the graph for probabilities `p`.
pub fn loss_on_graph<T: Element>(
    g: &mut Graph<T>,
    kind: LossKind,
    p: Var,
    target: &NdTensor<T>,
    params: &ComboLossParams,
) -> Result<Var> {
    match kind {
        LossKind::Bce => {
            let w = g.weighted_bce(p, target, T::of(0.5))?;
            g.scale(w, T::of(2.0))
        }
        LossKind::WeightedBce => g.weighted_bce(p, target, T::of(params.beta)),
        LossKind::Dice => {
            let d = g.dice_term(p, target, T::of(params.smooth))?;
            // 1 - d; the constant does not affect gradients.
            let neg = g.scale(d, -T::one())?;
            let one = g.constant(NdTensor::scalar(T::one()))?;
            g.add(one, neg)
        }
        LossKind::Combo => combo_loss(g, p, target, params),
    }
}

/// `α·wbce(p, t; β) - (1-α)·dice(p, t; s)`.
pub fn combo_loss<T: Element>(g: &mut Graph<T>, p: Var, target: &NdTensor<T>, params: &ComboLossParams) -> Result<Var> {
    let bce = g.weighted_bce(p, target, T::of(params.beta))?;
    let dice = g.dice_term(p, target, T::of(params.smooth))?;
    let a = g.scale(bce, T::of(params.alpha))?;
    let b = g.scale(dice, T::of(-(1.0 - params.alpha)))?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_weighted_bce() {
        let v = weighted_bce(&[0.5f64, 0.5], &[1.0, 0.0], 0.85);
        assert!((v - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_bce_is_clamp_limited() {
        let v = weighted_bce(&[1.0f64, 0.0], &[1.0, 0.0], 0.85);
        assert!(v >= 0.0 && v < 1e-6);
    }

    #[test]
    fn dice_examples() {
        assert!((dice_term(&[0.5f64, 0.5], &[1.0, 0.0], 1.0) - 0.5).abs() < 1e-15);
        let n = 10;
        let ones = vec![1.0f64; n];
        let want = (n as f64 + 1.0) / (2.0 * n as f64 + 1.0);
        assert!((dice_term(&ones, &ones, 1.0) - want).abs() < 1e-15);
        assert_eq!(dice_term(&[0.0f64; 4], &[0.0; 4], 1.0), 1.0);
    }

    #[test]
    fn combo_worked_value() {
        let p = ComboLossParams::default();
        let v = loss_value(LossKind::Combo, &[0.5f64], &[1.0], &p);
        let closed_form = 0.4 * 0.85 * std::f64::consts::LN_2 - 0.6 * (1.5 / 2.5);
        assert!((v - closed_form).abs() < 1e-12, "{v}");
        // six-place figure, last digit within one unit
        assert!((v - (-0.124331)).abs() < 2e-6);
    }

    #[test]
    fn params_are_validated() {
        assert!(ComboLossParams::new(0.0, 0.5, 1.0).is_err());
        assert!(ComboLossParams::new(0.4, 1.0, 1.0).is_err());
        assert!(ComboLossParams::new(0.4, 0.85, 0.0).is_err());
        assert!(ComboLossParams::new(0.4, 0.85, 1.0).is_ok());
    }

    #[test]
    fn loss_names_parse() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("focal".parse::<LossKind>().is_err());
    }
}
