//! End-to-end experiment protocol: train, calibrate, evaluate, the context
//! ablation, a frequency baseline and per-case timelines.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::domain::{ActivityCatalog, CaseLog};
use crate::error::{Error, Result};
use crate::features::{ContextMask, Sample, SampleCache};
use crate::metrics::{self, EmptySampleScore, EvalReport, ThresholdVector};
use crate::training::{self, LabeledSet, TrainConfig, TrainHistory};

/// Everything produced by one train → calibrate → evaluate run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub bundle: ModelBundle,
    pub history: TrainHistory,
    pub validation: EvalReport,
    pub test: EvalReport,
    pub train_seconds: f64,
}

fn labeled(samples: &[&Sample], mask: ContextMask, split: &str) -> Result<LabeledSet> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "split",
            reason: format!("{split} split has no samples"),
        });
    }
    LabeledSet::from_samples(samples, mask)
}

/// Trains on the cache's train split, early-stops and calibrates on the
/// validation split and reports on the test split.
pub fn run_experiment(
    cache: &SampleCache,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&training::EpochRecord),
) -> Result<Experiment> {
    let catalog = &cache.pipeline.manifest.catalog;
    let train = labeled(&cache.train(), cfg.mask, "train")?;
    let val = labeled(&cache.validation(), cfg.mask, "validation")?;
    let test = labeled(&cache.test(), cfg.mask, "test")?;
    let layout = cache.pipeline.layout(cfg.mask, cfg.embed_dim);

    let started = Instant::now();
    let trained = training::train(&train, &val, layout, cfg, on_epoch)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let thresholds = training::calibrate_thresholds(&trained.model, &val)?;
    let validation = training::evaluate(&trained.model, &thresholds, &val, catalog)?;
    let test = training::evaluate(&trained.model, &thresholds, &test, catalog)?;
    let bundle = ModelBundle {
        model: trained.model,
        pipeline: cache.pipeline.clone(),
        train_config: cfg.clone(),
        focal: trained.focal,
        optimizer: trained.optimizer,
        thresholds: Some(thresholds),
        test_label_f1: Some(test.label_f1()),
    };
    Ok(Experiment {
        bundle,
        history: trained.history,
        validation,
        test,
        train_seconds,
    })
}

/// One ablation arm: a mask, its row label and the published reference
/// scores (weighted F1, samples F1) for that row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationArm {
    pub mask: ContextMask,
    pub reference: (f64, f64),
}

const fn arm(bits: [bool; 5], reference: (f64, f64)) -> AblationArm {
    AblationArm {
        mask: ContextMask {
            use_last_k: bits[0],
            use_all_occurred: bits[1],
            use_dynamic: bits[2],
            use_static: bits[3],
            use_timestamp: bits[4],
        },
        reference,
    }
}

/// The twelve context combinations, in report order.
pub const ABLATION_ARMS: [AblationArm; 12] = [
    arm([true, false, false, false, false], (0.625, 0.491)),
    arm([false, true, false, false, false], (0.577, 0.385)),
    arm([true, true, false, false, false], (0.654, 0.444)),
    arm([false, false, true, false, false], (0.427, 0.211)),
    arm([false, false, false, true, false], (0.250, 0.110)),
    arm([false, false, true, true, false], (0.448, 0.212)),
    arm([false, false, false, false, true], (0.362, 0.189)),
    arm([true, true, true, false, false], (0.664, 0.450)),
    arm([true, true, false, true, false], (0.662, 0.523)),
    arm([true, true, true, true, false], (0.665, 0.551)),
    arm([true, true, false, false, true], (0.655, 0.454)),
    arm([true, true, true, true, true], (0.671, 0.556)),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ArmStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: ContextMask,
    pub description: String,
    pub weighted_f1: Option<f64>,
    pub samples_f1: Option<f64>,
    pub seed: u64,
    pub train_seconds: f64,
    pub epochs: usize,
    #[serde(flatten)]
    pub status: ArmStatus,
    /// Published (weighted F1, samples F1) for this row, for annotation only.
    pub reference: (f64, f64),
    pub cache_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub cache_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mask: ContextMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<86} {:>9} {:>9}   {:>9} {:>9} {:>8}\n",
            "contexts", "wF1", "sF1", "ref wF1", "ref sF1", "secs"
        );
        let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |v| format!("{v:.3}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<86} {:>9} {:>9}   {:>9.3} {:>9.3} {:>8.1}\n",
                r.description,
                fmt(r.weighted_f1),
                fmt(r.samples_f1),
                r.reference.0,
                r.reference.1,
                r.train_seconds
            ));
        }
        out
    }
}

/// Runs every arm of [`ABLATION_ARMS`] on one cache and seed; only the mask
/// differs between arms. A failing arm is recorded and the rest continue.
pub fn run_ablation(
    cache: &SampleCache,
    base: &TrainConfig,
    mut on_row: impl FnMut(&AblationRow, Option<&Experiment>),
) -> Result<AblationReport> {
    let cache_hash = cache.hash()?;
    let mut rows = Vec::with_capacity(ABLATION_ARMS.len());
    for arm in ABLATION_ARMS {
        let cfg = TrainConfig {
            mask: arm.mask,
            ..base.clone()
        };
        let started = Instant::now();
        let outcome = run_experiment(cache, &cfg, |_| {});
        let mut row = AblationRow {
            mask: arm.mask,
            description: arm.mask.describe(),
            weighted_f1: None,
            samples_f1: None,
            seed: base.seed,
            train_seconds: started.elapsed().as_secs_f64(),
            epochs: 0,
            status: ArmStatus::Ok,
            reference: arm.reference,
            cache_hash: cache_hash.clone(),
        };
        match &outcome {
            Ok(exp) => {
                row.weighted_f1 = Some(exp.test.weighted_f1);
                row.samples_f1 = Some(exp.test.samples_f1);
                row.train_seconds = exp.train_seconds;
                row.epochs = exp.history.len();
            }
            Err(e) => {
                log::warn!("ablation arm `{}` failed: {e}", arm.mask);
                row.status = ArmStatus::Failed { reason: e.to_string() };
            }
        }
        on_row(&row, outcome.as_ref().ok());
        rows.push(row);
    }
    Ok(AblationReport {
        seed: base.seed,
        cache_hash,
        rows,
    })
}

/// Predicts label `i` at minute `t` iff at least half of the training
/// samples at minute `min(t, t_max)` carry label `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBaseline {
    /// Row `t` holds per-label frequencies at minute `t`.
    pub frequencies: Vec<Vec<f64>>,
}

impl FrequencyBaseline {
    pub fn fit(train: &[&Sample]) -> Result<Self> {
        let n = train
            .first()
            .map(|s| s.label.len())
            .ok_or_else(|| Error::InvalidArgument {
                arg: "train",
                reason: "empty training set".into(),
            })?;
        let t_max = train.iter().map(|s| s.minute).max().unwrap_or(0) as usize;
        let mut counts = vec![vec![0usize; n]; t_max + 1];
        let mut totals = vec![0usize; t_max + 1];
        for s in train {
            let t = s.minute as usize;
            totals[t] += 1;
            for i in s.label.active() {
                counts[t][i] += 1;
            }
        }
        let frequencies = counts
            .into_iter()
            .zip(totals)
            .map(|(c, total)| {
                c.into_iter()
                    .map(|k| if total == 0 { 0.0 } else { k as f64 / total as f64 })
                    .collect()
            })
            .collect();
        Ok(Self { frequencies })
    }

    pub fn t_max(&self) -> u32 {
        (self.frequencies.len() - 1) as u32
    }

    pub fn predict_minute(&self, minute: u32) -> Vec<bool> {
        let t = minute.min(self.t_max()) as usize;
        self.frequencies[t].iter().map(|&f| f >= 0.5).collect()
    }

    pub fn evaluate(&self, samples: &[&Sample], catalog: &ActivityCatalog) -> Result<EvalReport> {
        let n = catalog.len();
        let mut preds = Array2::from_elem((samples.len(), n), false);
        let mut truths = Array2::from_elem((samples.len(), n), false);
        for (r, s) in samples.iter().enumerate() {
            for (c, p) in self.predict_minute(s.minute).into_iter().enumerate() {
                preds[[r, c]] = p;
                truths[[r, c]] = s.label.is_set(c);
            }
        }
        EvalReport::compute(catalog, &preds, &truths, EmptySampleScore::One)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    FN,
    TN,
}

impl Outcome {
    pub fn of(predicted: bool, truth: bool) -> Self {
        match (predicted, truth) {
            (true, true) => Self::TP,
            (true, false) => Self::FP,
            (false, true) => Self::FN,
            (false, false) => Self::TN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineMinute {
    pub minute: u32,
    /// Label ids, restricted to the export's activities.
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    /// One cell per entry of [`TimelineExport::activities`].
    pub cells: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineExport {
    pub case_id: String,
    pub cutoff: f64,
    /// Label ids whose test F1 exceeds the cutoff, in catalog order.
    pub activity_ids: Vec<usize>,
    pub activities: Vec<String>,
    pub minutes: Vec<TimelineMinute>,
}

impl TimelineExport {
    pub fn render_table(&self) -> String {
        let glyph = |o: &Outcome| match o {
            Outcome::TP => '#',
            Outcome::FP => '+',
            Outcome::FN => '-',
            Outcome::TN => '.',
        };
        let mut out = format!("case {} (# TP, + FP, - FN, . TN)\n", self.case_id);
        for (row, name) in self.activities.iter().enumerate() {
            let cells: String = self.minutes.iter().map(|m| glyph(&m.cells[row])).collect();
            out.push_str(&format!("{name:<32} {cells}\n"));
        }
        out
    }
}

/// Per-minute predictions for one case, using the offline sampling path.
pub fn predict_case(bundle: &ModelBundle, case: &CaseLog) -> Result<(Array2<f64>, Array2<bool>, Array2<bool>)> {
    let thresholds = bundle.thresholds.as_ref().ok_or_else(|| Error::InvalidArgument {
        arg: "model",
        reason: "model has no calibrated thresholds".into(),
    })?;
    let samples = bundle.pipeline.sample_case(case)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let set = LabeledSet::from_samples(&refs, bundle.mask())?;
    let probs = bundle.model.predict(&set.batch)?;
    let preds = metrics::decide(&probs, thresholds)?;
    Ok((probs, preds, set.truths()))
}

/// Minute-by-minute predicted and true sets for `case_id`, restricted to
/// labels whose `label_f1` exceeds `cutoff`.
pub fn export_timeline(
    corpus: &[CaseLog],
    case_id: &str,
    bundle: &ModelBundle,
    label_f1: &[f64],
    cutoff: f64,
) -> Result<TimelineExport> {
    let case = corpus
        .iter()
        .find(|c| c.case_id == case_id)
        .ok_or_else(|| Error::NotFound(format!("case `{case_id}`")))?;
    let catalog = bundle.catalog();
    if label_f1.len() != catalog.len() {
        return Err(Error::Shape(format!(
            "{} label scores for {} labels",
            label_f1.len(),
            catalog.len()
        )));
    }
    let activity_ids: Vec<usize> = (0..catalog.len()).filter(|&i| label_f1[i] > cutoff).collect();
    let (_, preds, truths) = predict_case(bundle, case)?;
    let minutes = (0..preds.nrows())
        .map(|t| TimelineMinute {
            minute: t as u32,
            predicted: activity_ids.iter().copied().filter(|&i| preds[[t, i]]).collect(),
            truth: activity_ids.iter().copied().filter(|&i| truths[[t, i]]).collect(),
            cells: activity_ids
                .iter()
                .map(|&i| Outcome::of(preds[[t, i]], truths[[t, i]]))
                .collect(),
        })
        .collect();
    Ok(TimelineExport {
        case_id: case_id.to_string(),
        cutoff,
        activities: activity_ids
            .iter()
            .map(|&i| catalog.labels()[i].clone())
            .collect(),
        activity_ids,
        minutes,
    })
}

/// Thresholds at 0.5 for every label, for uncalibrated runs.
pub fn default_thresholds(n: usize) -> ThresholdVector {
    ThresholdVector::uniform(n, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LabelVector;
    use crate::features::ContextFeatures;

    fn sample(minute: u32, bits: &[u8]) -> Sample {
        Sample {
            case_id: "c".into(),
            minute,
            features: ContextFeatures {
                static_vec: vec![],
                dynamic_vec: vec![],
                last_k_ids: vec![],
                long_range_vec: vec![],
                timestamp_scalar: 0.0,
            },
            label: LabelVector { bits: bits.to_vec() },
        }
    }

    #[test]
    fn arms_are_distinct_and_end_with_full() {
        let mut seen: Vec<ContextMask> = ABLATION_ARMS.iter().map(|a| a.mask).collect();
        assert_eq!(seen[11], ContextMask::FULL);
        assert_eq!(seen[2], ContextMask::process());
        seen.sort_by_key(|m| m.to_string());
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn baseline_frequencies() {
        // label 0 in 9 of 10 minute-0 samples, label 1 never
        let mut train: Vec<Sample> = (0..9).map(|_| sample(0, &[1, 0])).collect();
        train.push(sample(0, &[0, 0]));
        train.push(sample(1, &[0, 0]));
        let refs: Vec<&Sample> = train.iter().collect();
        let b = FrequencyBaseline::fit(&refs).unwrap();
        assert_eq!(b.predict_minute(0), vec![true, false]);
        assert_eq!(b.predict_minute(1), vec![false, false]);
        assert_eq!(b.predict_minute(40), b.predict_minute(1));
        assert!(FrequencyBaseline::fit(&[]).is_err());
    }

    #[test]
    fn outcome_mapping() {
        assert_eq!(Outcome::of(true, true), Outcome::TP);
        assert_eq!(Outcome::of(true, false), Outcome::FP);
        assert_eq!(Outcome::of(false, true), Outcome::FN);
        assert_eq!(Outcome::of(false, false), Outcome::TN);
    }
}
