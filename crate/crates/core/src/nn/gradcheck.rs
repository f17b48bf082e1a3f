use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{focal_loss, Batch, FocalLossConfig, Mode, PredictorModel};
use crate::features::{ContextMask, InputLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Relative errors below this absolute scale count as agreement; it sits
/// well above the round-off of a central difference on an O(1) loss.
const ABS_FLOOR: f64 = 1e-6;

fn loss_at(model: &PredictorModel, batch: &Batch, targets: &Array2<f64>, cfg: &FocalLossConfig) -> Result<f64> {
    let mut m = model.clone();
    m.set_mode(Mode::Train);
    let probs = m.forward(batch)?;
    Ok(focal_loss(&probs, targets, cfg)?.0)
}

fn nudge(model: &mut PredictorModel, flat: usize, delta: f64) {
    let mut offset = flat;
    for (_, p) in model.params_mut() {
        if offset < p.len() {
            p[offset] += delta;
            return;
        }
        offset -= p.len();
    }
    unreachable!("coordinate within parameter count");
}

/// Compares backpropagated gradients against central finite differences
/// `(L(θ+h) - L(θ-h)) / 2h` on `coords` randomly drawn parameter
/// coordinates. Batch norm runs in train mode on the fixed batch.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    model: &PredictorModel,
    batch: &Batch,
    targets: &Array2<f64>,
    cfg: &FocalLossConfig,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument {
            arg: "h",
            reason: format!("finite-difference step must be positive, got {h}"),
        });
    }
    let mut base = model.clone();
    base.set_mode(Mode::Train);
    let probs = base.forward(batch)?;
    let (_, dlogits) = focal_loss(&probs, targets, cfg)?;
    let grads = base.backward(&dlogits)?;

    let mut names = Vec::new();
    let mut analytic = Vec::new();
    for (name, g) in grads.tensors() {
        for (i, &v) in g.iter().enumerate() {
            names.push((name.clone(), i));
            analytic.push(v);
        }
    }
    let total = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, total, coords.min(total)).into_vec();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for flat in picks {
        let mut plus = model.clone();
        nudge(&mut plus, flat, h);
        let mut minus = model.clone();
        nudge(&mut minus, flat, -h);
        let numeric = (loss_at(&plus, batch, targets, cfg)? - loss_at(&minus, batch, targets, cfg)?) / (2.0 * h);
        let a = analytic[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst = names[flat].clone();
        }
        report.checked += 1;
    }
    Ok(report)
}

/// A random model of input width 20 with `n = 5` labels, a batch of three
/// rows and 0/1 targets. With `embed_dim > 0` four of the 20 inputs come from
/// pooled embeddings of five ids.
pub fn random_problem(hidden: &[usize], embed_dim: usize, seed: u64) -> (PredictorModel, Batch, Array2<f64>) {
    let layout = InputLayout {
        mask: if embed_dim > 0 {
            ContextMask::FULL
        } else {
            ContextMask::only("static").expect("valid block")
        },
        dense_width: 20 - embed_dim,
        embed_at: 6,
        k: 5,
        embed_dim,
        n_labels: 5,
    };
    let mut model = PredictorModel::new(layout, hidden, seed).expect("valid layout");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    // Larger embeddings so pooled inputs matter at the tested scale.
    model.embedding.mapv_inplace(|v| v * 50.0);
    model.zero_pad_row();
    let dense = Array2::from_shape_fn((3, layout.dense_width), |_| rng.random_range(0.0..1.0));
    let ids = layout
        .uses_ids()
        .then(|| Array2::from_shape_fn((3, 5), |_| rng.random_range(0..=5)));
    let targets = Array2::from_shape_fn((3, 5), |_| rng.random_bool(0.4) as u8 as f64);
    (model, Batch { dense, ids }, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deep_model_matches_finite_differences() {
        let (model, batch, targets) = random_problem(&[8, 4], 4, 11);
        let cfg = FocalLossConfig { alpha: vec![0.2, 0.4, 0.6, 0.8, 0.5], gamma: 2.0 };
        let report = grad_check(&model, &batch, &targets, &cfg, 1e-5, 200, 0).unwrap();
        assert_eq!(report.checked, 200);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn linear_model_cross_entropy_is_tight() {
        let (model, batch, targets) = random_problem(&[], 0, 5);
        let cfg = FocalLossConfig::uniform(5, 0.5, 0.0);
        let report = grad_check(&model, &batch, &targets, &cfg, 1e-5, 200, 1).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let (model, batch, targets) = random_problem(&[4], 0, 5);
        let cfg = FocalLossConfig::uniform(5, 0.5, 2.0);
        assert!(grad_check(&model, &batch, &targets, &cfg, 0.0, 10, 0).is_err());
    }
}
