use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    /// Per-label weight applied to positives; negatives get `1 - alpha`.
    pub alpha: Vec<f64>,
    pub gamma: f64,
}

impl FocalLossConfig {
    pub fn uniform(n: usize, alpha: f64, gamma: f64) -> Self {
        Self {
            alpha: vec![alpha; n],
            gamma,
        }
    }
}

/// `(p_t, alpha_t)` for one element.
fn pt_alpha(p: f64, y: f64, alpha: f64) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y >= 0.5 {
        (p, alpha)
    } else {
        (1.0 - p, 1.0 - alpha)
    }
}

/// `-alpha_t (1 - p_t)^gamma ln(p_t)` for a single prediction.
pub fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pt, at) = pt_alpha(p, y, alpha);
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Batch focal loss (summed over labels and rows, divided by the batch size)
/// and its gradient with respect to the pre-sigmoid logits.
///
/// With `p = sigmoid(z)` and `s = +1` for positives, `-1` for negatives:
/// `d term / dz = s · alpha_t (1 - p_t)^gamma (gamma p_t ln p_t - (1 - p_t))`.
pub fn focal_loss(
    probs: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &FocalLossConfig,
) -> Result<(f64, Array2<f64>)> {
    if probs.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    if probs.ncols() != cfg.alpha.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} alpha weights",
            probs.ncols(),
            cfg.alpha.len()
        )));
    }
    let b = probs.nrows().max(1) as f64;
    let gamma = cfg.gamma;
    let mut total = 0.0;
    let mut grad = Array2::zeros(probs.raw_dim());
    for ((r, c), g) in grad.indexed_iter_mut() {
        let (p, y, alpha) = (probs[[r, c]], targets[[r, c]], cfg.alpha[c]);
        let (pt, at) = pt_alpha(p, y, alpha);
        let focus = (1.0 - pt).powf(gamma);
        total += -at * focus * pt.ln();
        let sign = if y >= 0.5 { 1.0 } else { -1.0 };
        *g = sign * at * focus * (gamma * pt * pt.ln() - (1.0 - pt)) / b;
    }
    Ok((total / b, grad))
}

/// Plain binary cross-entropy averaged over rows (summed over labels).
#[cfg(test)]
pub(crate) fn bce(probs: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    ndarray::Zip::from(probs).and(targets).for_each(|&p, &y| {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    });
    total / probs.nrows() as f64
}
