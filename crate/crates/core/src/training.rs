//! Mini-batch training with focal loss, Adam, and early stopping on the
//! validation loss.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::ActivityCatalog;
use crate::error::{Error, Result};
use crate::features::{assemble_features, ContextMask, InputLayout, Sample};
use crate::metrics::{self, EmptySampleScore, EvalReport, ThresholdVector};
use crate::nn::{self, adam_step, focal_loss, AdamState, Batch, FocalLossConfig, Mode, PredictorModel};

pub const ALPHA_MIN: f64 = 0.01;
pub const ALPHA_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub mask: ContextMask,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            gamma: 2.0,
            max_epochs: 200,
            patience: 10,
            min_delta: 1e-5,
            seed: 0,
            mask: ContextMask::FULL,
            hidden: nn::DEFAULT_HIDDEN.to_vec(),
            embed_dim: nn::DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |arg, reason: &str| {
            Err(Error::InvalidArgument {
                arg,
                reason: reason.into(),
            })
        };
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.patience < 1 {
            return bad("patience", "must be at least 1");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", "must be non-negative");
        }
        if self.mask.is_empty() {
            return bad("mask", "at least one context block is required");
        }
        Ok(())
    }
}

/// Model inputs and 0/1 targets for a set of samples under one mask.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub batch: Batch,
    pub targets: Array2<f64>,
}

impl LabeledSet {
    pub fn from_samples(samples: &[&Sample], mask: ContextMask) -> Result<Self> {
        let bundles = samples
            .iter()
            .map(|s| assemble_features(&s.features, mask))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_bundles(&bundles)?;
        let n = samples[0].label.len();
        let mut targets = Array2::zeros((samples.len(), n));
        for (r, s) in samples.iter().enumerate() {
            if s.label.len() != n {
                return Err(Error::Shape("label vectors differ in length".into()));
            }
            for (c, &bit) in s.label.bits.iter().enumerate() {
                targets[[r, c]] = bit as f64;
            }
        }
        Ok(Self { batch, targets })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn truths(&self) -> Array2<bool> {
        self.targets.mapv(|t| t >= 0.5)
    }
}

/// `alpha_i = 1 - f_i`, where `f_i` is the fraction of samples with label
/// `i`, clamped to `[0.01, 0.99]`.
pub fn compute_label_weights(targets: &Array2<f64>) -> Result<Vec<f64>> {
    if targets.nrows() == 0 {
        return Err(Error::InvalidArgument {
            arg: "train",
            reason: "no training samples".into(),
        });
    }
    let rows = targets.nrows() as f64;
    Ok(targets
        .columns()
        .into_iter()
        .map(|col| {
            let freq = col.iter().filter(|&&t| t >= 0.5).count() as f64 / rows;
            (1.0 - freq).clamp(ALPHA_MIN, ALPHA_MAX)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_weighted_f1: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: PredictorModel,
    pub history: TrainHistory,
    pub focal: FocalLossConfig,
    pub optimizer: AdamState,
}

/// A fresh permutation of `0..n` cut into batches; a final batch with fewer
/// than two rows is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn weighted_f1_at_half(probs: &Array2<f64>, truths: &Array2<bool>) -> Result<f64> {
    let preds = probs.mapv(|p| p >= 0.5);
    Ok(metrics::weighted_f1(&metrics::per_label_f1(&preds, truths)?))
}

/// Trains a fresh model on `train`, early-stopping on `val`, and returns it in
/// eval mode with the parameters of the best validation epoch.
///
/// `on_epoch` receives a record after every epoch.
pub fn train(
    train: &LabeledSet,
    val: &LabeledSet,
    layout: InputLayout,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "train",
            reason: "training and validation sets must be non-empty".into(),
        });
    }
    if layout.mask != cfg.mask {
        return Err(Error::InvalidArgument {
            arg: "mask",
            reason: "layout and config masks differ".into(),
        });
    }
    let focal = FocalLossConfig {
        alpha: compute_label_weights(&train.targets)?,
        gamma: cfg.gamma,
    };
    let mut model = PredictorModel::new(layout, &cfg.hidden, cfg.seed)?;
    let mut optimizer = AdamState::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let val_truths = val.truths();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, PredictorModel)> = None;
    let mut best_for_patience = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        model.set_mode(Mode::Train);
        let (mut loss_sum, mut rows) = (0.0, 0usize);
        let mut last_finite = None;
        for (step, chunk) in epoch_batches(train.len(), cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let batch = train.batch.select(chunk);
            let targets = train.targets.select(ndarray::Axis(0), chunk);
            let probs = model.forward(&batch)?;
            let (loss, dlogits) = focal_loss(&probs, &targets, &focal)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    last_finite,
                });
            }
            last_finite = Some(loss);
            let grads = model.backward(&dlogits)?;
            adam_step(&mut model, &grads, &mut optimizer)?;
            loss_sum += loss * chunk.len() as f64;
            rows += chunk.len();
        }

        model.set_mode(Mode::Eval);
        let probs = model.predict(&val.batch)?;
        let (val_loss, _) = focal_loss(&probs, &val.targets, &focal)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: usize::MAX,
                last_finite: None,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: if rows > 0 { loss_sum / rows as f64 } else { 0.0 },
            val_loss,
            val_weighted_f1: weighted_f1_at_half(&probs, &val_truths)?,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        };
        on_epoch(&record);
        history.train_loss.push(record.train_loss);
        history.val_loss.push(val_loss);
        history.val_weighted_f1.push(record.val_weighted_f1);

        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            history.best_epoch = Some(epoch);
        }
        if val_loss < best_for_patience - cfg.min_delta {
            best_for_patience = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, best_model)) = best {
        model = best_model;
    }
    model.set_mode(Mode::Eval);
    Ok(Trained {
        model,
        history,
        focal,
        optimizer,
    })
}

/// Runs the model over the calibration set once and moves each label's
/// threshold to its F1 optimum.
pub fn calibrate_thresholds(model: &PredictorModel, set: &LabeledSet) -> Result<ThresholdVector> {
    if set.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "validation",
            reason: "empty calibration set".into(),
        });
    }
    let probs = model.predict(&set.batch)?;
    metrics::calibrate_from_probs(&probs, &set.truths())
}

/// Thresholded predictions for `set`, scored against its labels.
pub fn evaluate(
    model: &PredictorModel,
    thresholds: &ThresholdVector,
    set: &LabeledSet,
    catalog: &ActivityCatalog,
) -> Result<EvalReport> {
    let probs = model.predict(&set.batch)?;
    let preds = metrics::decide(&probs, thresholds)?;
    EvalReport::compute(catalog, &preds, &set.truths(), EmptySampleScore::One)
}
