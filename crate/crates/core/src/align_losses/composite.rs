use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{LabError, Result};

/// Clamp applied to predictions before the log terms.
pub const CLAMP_EPS: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta_bce: f64,
    pub beta_dice: f64,
    pub beta_l2: f64,
    pub lambda_sga: f64,
    pub lambda_spa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_bce: 1.0,
            beta_dice: 1.0,
            beta_l2: 1.0,
            lambda_sga: 1.0,
            lambda_spa: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta_bce,
            self.beta_dice,
            self.beta_l2,
            self.lambda_sga,
            self.lambda_spa,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LabError::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Component values of one composite loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeParts {
    pub bce: f64,
    pub dice: f64,
    pub l2: f64,
    pub total: f64,
}

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(LabError::shape(format!(
            "prediction has {} entries, target {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(LabError::Empty("composite loss on an empty tensor".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(LabError::data("target mask must be binary"));
    }
    Ok(())
}

/// `b_bce * BCE + b_dice * (1 - Dice) + b_2 * MSE` with its gradient in `x`.
pub fn composite_with_grad(
    x: &[f64],
    y: &[f64],
    w: &LossWeights,
) -> Result<(CompositeParts, Vec<f64>)> {
    check(x, y)?;
    let n = x.len() as f64;
    let xc: Vec<f64> = x
        .iter()
        .map(|v| v.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS))
        .collect();
    let (mut bce, mut inter, mut sx, mut sy, mut l2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in xc.iter().zip(y) {
        bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        inter += p * t;
        sx += p;
        sy += t;
        l2 += (p - t) * (p - t);
    }
    bce /= n;
    l2 /= n;
    let denom = sx + sy + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let dice = numer / denom;
    let total = w.beta_bce * bce + w.beta_dice * (1.0 - dice) + w.beta_l2 * l2;
    let grad = x
        .iter()
        .zip(&xc)
        .zip(y)
        .map(|((&raw, &p), &t)| {
            if !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&raw) {
                return 0.0;
            }
            let d_bce = (-t / p + (1.0 - t) / (1.0 - p)) / n;
            let d_dice = -(2.0 * t * denom - numer) / (denom * denom);
            let d_l2 = 2.0 * (p - t) / n;
            w.beta_bce * d_bce + w.beta_dice * d_dice + w.beta_l2 * d_l2
        })
        .collect();
    Ok((
        CompositeParts {
            bce,
            dice,
            l2,
            total,
        },
        grad,
    ))
}

/// Scalar composite loss between prediction `x` in (0, 1) and binary `y`.
pub fn composite_loss(x: &[f64], y: &[f64], w: &LossWeights) -> Result<f64> {
    Ok(composite_with_grad(x, y, w)?.0.total)
}

/// Composite loss as a graph node over `x`.
pub fn composite_node(g: &mut Graph, x: Var, y: &[f64], w: &LossWeights) -> Result<Var> {
    let (parts, grad) = composite_with_grad(&g.value(x).data, y, w)?;
    Ok(g.scalar_fn(x, parts.total, grad))
}
