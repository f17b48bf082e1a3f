//! Threshold moving and the two F1 summaries.
//!
//! Predictions are boundary inclusive: label `i` is predicted iff
//! `p >= threshold[i]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::ActivityCatalog;
use crate::error::{Error, Result};

/// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Best F1 threshold for one label.
///
/// Candidates are the midpoints between adjacent distinct scores plus 0 and 1;
/// ties go to the largest threshold. With no positives the result is
/// `(1.0, 0.0)`.
pub fn optimal_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument {
            arg: "scores",
            reason: format!(
                "need equally many scores and labels, got {} and {}",
                scores.len(),
                labels.len()
            ),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok((1.0, 0.0));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut distinct: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    distinct.dedup();

    let mut candidates = vec![1.0];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(0.0);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();

    // Sweep thresholds downwards, admitting scores as they clear each one.
    let (mut best_tau, mut best_f1) = (1.0, -1.0);
    let (mut next, mut tp, mut predicted) = (0, 0, 0);
    for &tau in &candidates {
        while next < order.len() && scores[order[next]] >= tau {
            predicted += 1;
            tp += labels[order[next]] as usize;
            next += 1;
        }
        let f1 = f1_from_counts(tp, predicted - tp, positives - tp);
        if f1 > best_f1 {
            best_f1 = f1;
            best_tau = tau;
        }
    }
    Ok((best_tau, best_f1))
}

/// One threshold per label together with the F1 it achieved on the
/// calibration data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub thresholds: Vec<f64>,
    pub validation_f1: Vec<f64>,
}

impl ThresholdVector {
    pub fn uniform(n: usize, tau: f64) -> Self {
        Self {
            thresholds: vec![tau; n],
            validation_f1: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }
}

/// Per-label threshold moving over a `b × n` probability matrix.
pub fn calibrate_from_probs(probs: &Array2<f64>, truths: &Array2<bool>) -> Result<ThresholdVector> {
    if probs.nrows() == 0 {
        return Err(Error::InvalidArgument {
            arg: "validation",
            reason: "empty calibration set".into(),
        });
    }
    if probs.dim() != truths.dim() {
        return Err(Error::Shape("probabilities and truths differ".into()));
    }
    let mut out = ThresholdVector {
        thresholds: Vec::with_capacity(probs.ncols()),
        validation_f1: Vec::with_capacity(probs.ncols()),
    };
    for (scores, labels) in probs.columns().into_iter().zip(truths.columns()) {
        let scores: Vec<f64> = scores.to_vec();
        let labels: Vec<bool> = labels.to_vec();
        let (tau, f1) = optimal_threshold(&scores, &labels)?;
        out.thresholds.push(tau);
        out.validation_f1.push(f1);
    }
    Ok(out)
}

pub fn decide(probs: &Array2<f64>, thresholds: &ThresholdVector) -> Result<Array2<bool>> {
    if probs.ncols() != thresholds.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} thresholds",
            probs.ncols(),
            thresholds.len()
        )));
    }
    Ok(Array2::from_shape_fn(probs.dim(), |(r, c)| {
        probs[[r, c]] >= thresholds.thresholds[c]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
    pub f1: f64,
}

pub fn per_label_f1(preds: &Array2<bool>, truths: &Array2<bool>) -> Result<Vec<LabelStats>> {
    if preds.dim() != truths.dim() {
        return Err(Error::Shape("predictions and truths differ".into()));
    }
    Ok(preds
        .columns()
        .into_iter()
        .zip(truths.columns())
        .map(|(p, t)| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &t) in p.iter().zip(t.iter()) {
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            LabelStats {
                tp,
                fp,
                fn_,
                support: tp + fn_,
                f1: f1_from_counts(tp, fp, fn_),
            }
        })
        .collect())
}

/// Support-weighted mean of per-label F1; zero-support labels drop out.
pub fn weighted_f1(stats: &[LabelStats]) -> f64 {
    let support: usize = stats.iter().map(|s| s.support).sum();
    if support == 0 {
        return 0.0;
    }
    stats.iter().map(|s| s.support as f64 * s.f1).sum::<f64>() / support as f64
}

/// Score of a sample whose predicted and true sets are both empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptySampleScore {
    #[default]
    One,
    Zero,
}

/// Mean over samples of `2|pred ∩ truth| / (|pred| + |truth|)`.
pub fn samples_f1(preds: &Array2<bool>, truths: &Array2<bool>, empty: EmptySampleScore) -> Result<f64> {
    if preds.dim() != truths.dim() {
        return Err(Error::Shape("predictions and truths differ".into()));
    }
    if preds.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = preds
        .rows()
        .into_iter()
        .zip(truths.rows())
        .map(|(p, t)| {
            let inter = p.iter().zip(t.iter()).filter(|(&a, &b)| a && b).count();
            let sizes = p.iter().filter(|&&a| a).count() + t.iter().filter(|&&b| b).count();
            if sizes == 0 {
                match empty {
                    EmptySampleScore::One => 1.0,
                    EmptySampleScore::Zero => 0.0,
                }
            } else {
                2.0 * inter as f64 / sizes as f64
            }
        })
        .sum();
    Ok(total / preds.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: String,
    #[serde(flatten)]
    pub stats: LabelStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_label: Vec<LabelReport>,
    pub weighted_f1: f64,
    pub samples_f1: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timelines: Vec<crate::harness::TimelineExport>,
}

impl EvalReport {
    pub fn compute(
        catalog: &ActivityCatalog,
        preds: &Array2<bool>,
        truths: &Array2<bool>,
        empty: EmptySampleScore,
    ) -> Result<Self> {
        let stats = per_label_f1(preds, truths)?;
        Ok(Self {
            weighted_f1: weighted_f1(&stats),
            samples_f1: samples_f1(preds, truths, empty)?,
            n_samples: preds.nrows(),
            per_label: stats
                .into_iter()
                .zip(catalog.labels())
                .map(|(stats, label)| LabelReport {
                    label: label.clone(),
                    stats,
                })
                .collect(),
            timelines: Vec::new(),
        })
    }

    pub fn label_f1(&self) -> Vec<f64> {
        self.per_label.iter().map(|l| l.stats.f1).collect()
    }

    /// Support-weighted F1 over a subset of labels.
    pub fn weighted_f1_over(&self, labels: &[usize]) -> f64 {
        let stats: Vec<LabelStats> = labels
            .iter()
            .filter_map(|&i| self.per_label.get(i).map(|l| l.stats))
            .collect();
        weighted_f1(&stats)
    }

    /// Plain-text table, one row per label with support.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "weighted F1 {:.3}  samples F1 {:.3}  ({} samples)\n",
            self.weighted_f1, self.samples_f1, self.n_samples
        );
        out.push_str(&format!(
            "{:<32} {:>6} {:>6} {:>6} {:>7} {:>6}\n",
            "activity", "TP", "FP", "FN", "support", "F1"
        ));
        for l in self.per_label.iter().filter(|l| l.stats.support > 0 || l.stats.fp > 0) {
            out.push_str(&format!(
                "{:<32} {:>6} {:>6} {:>6} {:>7} {:>6.3}\n",
                l.label, l.stats.tp, l.stats.fp, l.stats.fn_, l.stats.support, l.stats.f1
            ));
        }
        out
    }
}
