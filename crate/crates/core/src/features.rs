//! Per-minute feature extraction.
//!
//! Every case is cut at one-minute steps. At cutoff `60·t` the pipeline
//! encodes the static record, the carried-forward vitals, the last `k`
//! activity starts, the set of activities seen so far, and the scaled
//! timestamp. The label is the set of activities active during
//! `[60·t, 60·(t+1))`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    ActivityCatalog, ActivityEvent, CaseLog, DatasetManifest, DynamicContextRecord, LabelVector,
    StaticContext, MISSING_TOKEN, PAD_ID,
};
use crate::error::{Error, Result};

/// Observed range of one numeric feature on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
    /// No value was present in the training split.
    #[serde(default)]
    pub degenerate: bool,
}

impl FeatureRange {
    fn empty() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            degenerate: true,
        }
    }

    fn observe(&mut self, x: f64) {
        self.min = self.min.min(x);
        self.max = self.max.max(x);
        self.degenerate = false;
    }

    fn finish(mut self, name: &str) -> Self {
        if self.degenerate {
            log::warn!("feature `{name}` has no values in the training split");
            self.min = 0.0;
            self.max = 0.0;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub static_numeric: Vec<FeatureRange>,
    pub dynamic_numeric: Vec<FeatureRange>,
    /// Minutes since arrival.
    pub timestamp: FeatureRange,
}

/// Min/max of every numeric feature over the training cases.
///
/// The timestamp range is `[0, longest duration in minutes]`, optionally
/// capped at `max_minutes`.
pub fn fit_normalizer(train: &[CaseLog], max_minutes: Option<f64>) -> Result<NormalizerStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "train",
            reason: "training split is empty".into(),
        });
    }
    let mut stat = [FeatureRange::empty(); 5];
    let mut dynamic = [FeatureRange::empty(); 5];
    let mut longest: f64 = 0.0;
    for case in train {
        for (range, value) in stat.iter_mut().zip(case.static_ctx.numeric()) {
            if let Some(x) = value {
                range.observe(x);
            }
        }
        for record in &case.vitals {
            for (range, value) in dynamic.iter_mut().zip(record.numeric()) {
                if let Some(x) = value {
                    range.observe(x);
                }
            }
        }
        longest = longest.max(case.duration_s as f64 / 60.0);
    }
    if let Some(cap) = max_minutes {
        longest = longest.min(cap);
    }
    let names = crate::domain::STATIC_NUMERIC
        .iter()
        .chain(crate::domain::DYNAMIC_NUMERIC.iter());
    let mut names = names.copied();
    Ok(NormalizerStats {
        static_numeric: stat
            .iter()
            .map(|r| r.finish(names.next().unwrap_or("")))
            .collect(),
        dynamic_numeric: dynamic
            .iter()
            .map(|r| r.finish(names.next().unwrap_or("")))
            .collect(),
        timestamp: FeatureRange {
            min: 0.0,
            max: longest,
            degenerate: false,
        },
    })
}

/// Linear min/max scaling clamped to `[0, 1]`; a degenerate range maps to 0.
pub fn scale_numeric(x: f64, range: &FeatureRange) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("numeric feature".into()));
    }
    if range.max <= range.min {
        return Ok(0.0);
    }
    Ok(((x - range.min) / (range.max - range.min)).clamp(0.0, 1.0))
}

/// One-hot over `vocab`, whose last entry is the missing token.
pub fn encode_one_hot(value: Option<&str>, vocab: &[String]) -> Result<Vec<f64>> {
    let missing = vocab.len().checked_sub(1).ok_or(Error::InvalidArgument {
        arg: "vocab",
        reason: "empty vocabulary".into(),
    })?;
    let hot = match value {
        None => missing,
        Some(v) if v == MISSING_TOKEN => missing,
        Some(v) => vocab
            .iter()
            .position(|w| w == v)
            .ok_or_else(|| Error::UnknownCategory {
                field: vocab.join("|"),
                value: v.to_string(),
            })?,
    };
    let mut out = vec![0.0; vocab.len()];
    out[hot] = 1.0;
    Ok(out)
}

/// Latest record at or before `cutoff_s`. `vitals` must be sorted by time.
pub fn carry_forward_vitals(
    vitals: &[DynamicContextRecord],
    cutoff_s: i64,
) -> Option<&DynamicContextRecord> {
    let end = vitals.partition_point(|r| r.t_s <= cutoff_s);
    end.checked_sub(1).map(|i| &vitals[i])
}

/// The `k` most recent activity starts before `cutoff_s` as embedding ids,
/// most recent first and padded with [`PAD_ID`].
///
/// When more than `k` activities started in the last minute, `k` of them are
/// drawn uniformly without replacement.
pub fn select_last_k<R: Rng + ?Sized>(
    events: &[ActivityEvent],
    cutoff_s: i64,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut started: Vec<&ActivityEvent> = events.iter().filter(|e| e.start_s < cutoff_s).collect();
    started.sort_by(|a, b| {
        b.start_s
            .cmp(&a.start_s)
            .then(a.label_id.cmp(&b.label_id))
    });
    let in_window = started
        .iter()
        .take_while(|e| e.start_s >= cutoff_s - 60)
        .count();
    let chosen: Vec<&ActivityEvent> = if in_window > k {
        let mut picks = sample_indices(rng, in_window, k).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| started[i]).collect()
    } else {
        started.into_iter().take(k).collect()
    };
    let mut ids: Vec<usize> = chosen
        .into_iter()
        .map(|e| ActivityCatalog::embedding_id(e.label_id))
        .collect();
    ids.resize(k, PAD_ID);
    ids
}

/// Bit `i` is set iff label `i` started before `cutoff_s`.
pub fn long_range_vector(events: &[ActivityEvent], cutoff_s: i64, n_labels: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_labels];
    for e in events.iter().filter(|e| e.start_s < cutoff_s) {
        if let Some(slot) = out.get_mut(e.label_id) {
            *slot = 1.0;
        }
    }
    out
}

/// Activities whose interval intersects minute `t`.
pub fn minute_label(events: &[ActivityEvent], minute: u32, n_labels: usize) -> LabelVector {
    let lo = 60 * minute as i64;
    let mut label = LabelVector::zeros(n_labels);
    for e in events.iter().filter(|e| e.overlaps(lo, lo + 60)) {
        if let Some(bit) = label.bits.get_mut(e.label_id) {
            *bit = 1;
        }
    }
    label
}

/// Encoded context at one cutoff, before masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub static_vec: Vec<f64>,
    pub dynamic_vec: Vec<f64>,
    pub last_k_ids: Vec<usize>,
    pub long_range_vec: Vec<f64>,
    pub timestamp_scalar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub case_id: String,
    pub minute: u32,
    #[serde(flatten)]
    pub features: ContextFeatures,
    pub label: LabelVector,
}

/// Seeds the subsampling rng for one `(case, minute)` so that offline
/// preprocessing and the runtime service draw identical subsets.
pub fn minute_rng(seed: u64, case_id: &str, minute: u32) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((case_id.len() as u64).to_le_bytes());
    hasher.update(case_id.as_bytes());
    hasher.update(minute.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Everything needed to turn raw context into [`ContextFeatures`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub manifest: DatasetManifest,
    pub stats: NormalizerStats,
    pub k: usize,
    pub seed: u64,
}

impl FeaturePipeline {
    pub fn new(manifest: DatasetManifest, stats: NormalizerStats, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument {
                arg: "k",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self {
            manifest,
            stats,
            k,
            seed,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.manifest.catalog.len()
    }

    /// Width of `static_vec`.
    pub fn static_width(&self) -> usize {
        self.stats.static_numeric.len() + self.manifest.injury_type_vocab.len()
    }

    /// Width of `dynamic_vec`.
    pub fn dynamic_width(&self) -> usize {
        self.stats.dynamic_numeric.len() + self.manifest.fio2_vocab.len()
    }

    fn scale_all(values: [Option<f64>; 5], ranges: &[FeatureRange]) -> Result<Vec<f64>> {
        values
            .iter()
            .zip(ranges)
            .map(|(v, r)| v.map_or(Ok(0.0), |x| scale_numeric(x, r)))
            .collect()
    }

    pub fn encode_static(&self, ctx: &StaticContext) -> Result<Vec<f64>> {
        let mut out = Self::scale_all(ctx.numeric(), &self.stats.static_numeric)?;
        out.extend(encode_one_hot(
            ctx.injury_type.as_deref(),
            &self.manifest.injury_type_vocab,
        )?);
        Ok(out)
    }

    pub fn encode_dynamic(&self, record: Option<&DynamicContextRecord>) -> Result<Vec<f64>> {
        let numeric = record.map(|r| r.numeric()).unwrap_or([None; 5]);
        let mut out = Self::scale_all(numeric, &self.stats.dynamic_numeric)?;
        out.extend(encode_one_hot(
            record.and_then(|r| r.fio2.as_deref()),
            &self.manifest.fio2_vocab,
        )?);
        Ok(out)
    }

    /// Features at cutoff `60·minute`. `vitals` must be sorted by time.
    pub fn features_at(
        &self,
        case_id: &str,
        static_ctx: &StaticContext,
        vitals: &[DynamicContextRecord],
        events: &[ActivityEvent],
        minute: u32,
    ) -> Result<ContextFeatures> {
        let cutoff = 60 * minute as i64;
        let mut rng = minute_rng(self.seed, case_id, minute);
        Ok(ContextFeatures {
            static_vec: self.encode_static(static_ctx)?,
            dynamic_vec: self.encode_dynamic(carry_forward_vitals(vitals, cutoff))?,
            last_k_ids: select_last_k(events, cutoff, self.k, &mut rng),
            long_range_vec: long_range_vector(events, cutoff, self.n_labels()),
            timestamp_scalar: scale_numeric(minute as f64, &self.stats.timestamp)?,
        })
    }

    /// One sample per started minute of the case.
    pub fn sample_case(&self, case: &CaseLog) -> Result<Vec<Sample>> {
        (0..case.minutes())
            .map(|minute| {
                Ok(Sample {
                    case_id: case.case_id.clone(),
                    minute,
                    features: self.features_at(
                        &case.case_id,
                        &case.static_ctx,
                        &case.vitals,
                        &case.events,
                        minute,
                    )?,
                    label: minute_label(&case.events, minute, self.n_labels()),
                })
            })
            .collect()
    }

    pub fn layout(&self, mask: ContextMask, embed_dim: usize) -> InputLayout {
        InputLayout::new(
            mask,
            self.static_width(),
            self.dynamic_width(),
            self.n_labels(),
            self.k,
            embed_dim,
        )
    }
}

/// Convenience wrapper over [`FeaturePipeline::sample_case`].
pub fn sample_case(
    case: &CaseLog,
    manifest: &DatasetManifest,
    stats: &NormalizerStats,
    k: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    FeaturePipeline::new(manifest.clone(), stats.clone(), k, seed)?.sample_case(case)
}

/// Which context blocks feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextMask {
    pub use_last_k: bool,
    pub use_all_occurred: bool,
    pub use_dynamic: bool,
    pub use_static: bool,
    pub use_timestamp: bool,
}

impl ContextMask {
    pub const FULL: Self = Self {
        use_last_k: true,
        use_all_occurred: true,
        use_dynamic: true,
        use_static: true,
        use_timestamp: true,
    };

    const NONE: Self = Self {
        use_last_k: false,
        use_all_occurred: false,
        use_dynamic: false,
        use_static: false,
        use_timestamp: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    /// The process-only mask: last-k plus all occurred activities.
    pub fn process() -> Self {
        Self {
            use_last_k: true,
            use_all_occurred: true,
            ..Self::NONE
        }
    }

    pub fn only(block: &str) -> Result<Self> {
        block.parse()
    }

    fn flags(&self) -> [(&'static str, bool); 5] {
        [
            ("last_k", self.use_last_k),
            ("all_occurred", self.use_all_occurred),
            ("dynamic", self.use_dynamic),
            ("static", self.use_static),
            ("timestamp", self.use_timestamp),
        ]
    }

    /// Human-readable row label, e.g. `Last k acts + Timestamp`.
    pub fn describe(&self) -> String {
        let names = [
            "Last k acts",
            "All occurred acts",
            "Dynamic context",
            "Static context",
            "Timestamp",
        ];
        self.flags()
            .iter()
            .zip(names)
            .filter(|((_, on), _)| *on)
            .map(|(_, name)| name)
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

impl fmt::Display for ContextMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::FULL {
            return f.write_str("full");
        }
        let on: Vec<&str> = self
            .flags()
            .iter()
            .filter(|(_, on)| *on)
            .map(|(name, _)| *name)
            .collect();
        f.write_str(&on.join("+"))
    }
}

impl FromStr for ContextMask {
    type Err = Error;

    /// Parses `full`, `process`, or blocks joined by `+`/`,`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = Self::NONE;
        for token in s.split(['+', ',']).map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "full" | "all" => mask = Self::FULL,
                "process" => {
                    mask.use_last_k = true;
                    mask.use_all_occurred = true;
                }
                "last_k" | "last-k" => mask.use_last_k = true,
                "all_occurred" | "all-occurred" => mask.use_all_occurred = true,
                "dynamic" => mask.use_dynamic = true,
                "static" => mask.use_static = true,
                "timestamp" => mask.use_timestamp = true,
                other => {
                    return Err(Error::InvalidArgument {
                        arg: "mask",
                        reason: format!("unknown context block `{other}`"),
                    })
                }
            }
        }
        if mask.is_empty() {
            return Err(Error::InvalidArgument {
                arg: "mask",
                reason: "at least one context block is required".into(),
            });
        }
        Ok(mask)
    }
}

/// Shape of the model input for a given mask.
///
/// The dense part is `[static | dynamic | long-range | timestamp]` with
/// masked-off blocks omitted; when last-k is enabled the pooled embedding is
/// spliced in at `embed_at`, right after the dynamic block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub mask: ContextMask,
    pub dense_width: usize,
    pub embed_at: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub n_labels: usize,
}

impl InputLayout {
    pub fn new(
        mask: ContextMask,
        static_width: usize,
        dynamic_width: usize,
        n_labels: usize,
        k: usize,
        embed_dim: usize,
    ) -> Self {
        let mut dense = 0;
        if mask.use_static {
            dense += static_width;
        }
        if mask.use_dynamic {
            dense += dynamic_width;
        }
        let embed_at = dense;
        if mask.use_all_occurred {
            dense += n_labels;
        }
        if mask.use_timestamp {
            dense += 1;
        }
        Self {
            mask,
            dense_width: dense,
            embed_at,
            k,
            embed_dim,
            n_labels,
        }
    }

    pub fn uses_ids(&self) -> bool {
        self.mask.use_last_k
    }

    /// Width seen by the first dense layer, after pooling.
    pub fn input_width(&self) -> usize {
        self.dense_width + if self.uses_ids() { self.embed_dim } else { 0 }
    }
}

/// Masked model input for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub dense: Vec<f64>,
    pub ids: Option<Vec<usize>>,
    pub embed_at: usize,
}

pub fn assemble_features(features: &ContextFeatures, mask: ContextMask) -> Result<FeatureBundle> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "mask",
            reason: "at least one context block is required".into(),
        });
    }
    let mut dense = Vec::new();
    if mask.use_static {
        dense.extend_from_slice(&features.static_vec);
    }
    if mask.use_dynamic {
        dense.extend_from_slice(&features.dynamic_vec);
    }
    let embed_at = dense.len();
    if mask.use_all_occurred {
        dense.extend_from_slice(&features.long_range_vec);
    }
    if mask.use_timestamp {
        dense.push(features.timestamp_scalar);
    }
    Ok(FeatureBundle {
        dense,
        ids: mask.use_last_k.then(|| features.last_k_ids.clone()),
        embed_at,
    })
}

/// Train/validation/test case ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle of the case ids, then partition by `ratio`
/// (train:validation:test). Validation and test sizes round down, with a floor
/// of one case each; the remainder goes to train.
pub fn split_cases(cases: &[CaseLog], ratio: (u32, u32, u32), seed: u64) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratio;
    if rt == 0 || rv == 0 || rs == 0 {
        return Err(Error::InvalidArgument {
            arg: "ratio",
            reason: "all ratio parts must be positive".into(),
        });
    }
    if cases.len() < 3 {
        return Err(Error::InvalidArgument {
            arg: "cases",
            reason: format!("{} cases cannot fill 3 splits", cases.len()),
        });
    }
    let mut ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);

    let n = ids.len();
    let total = (rt + rv + rs) as usize;
    let n_val = (n * rv as usize / total).max(1);
    let n_test = (n * rs as usize / total).max(1);
    let test = ids.split_off(n - n_test);
    let validation = ids.split_off(n - n_test - n_val);
    Ok(DatasetSplit {
        train: ids,
        validation,
        test,
        seed,
    })
}

pub const SAMPLE_CACHE_VERSION: u32 = 1;

/// Preprocessed samples for a whole corpus plus everything needed to
/// reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCache {
    pub version: u32,
    pub seed: u64,
    pub mask: ContextMask,
    pub pipeline: FeaturePipeline,
    pub split: DatasetSplit,
    pub samples: Vec<Sample>,
}

impl SampleCache {
    /// Splits the corpus, fits the normalizer on the training cases and
    /// samples every case.
    pub fn build(
        manifest: &DatasetManifest,
        cases: &[CaseLog],
        ratio: (u32, u32, u32),
        k: usize,
        seed: u64,
        mask: ContextMask,
    ) -> Result<Self> {
        let split = split_cases(cases, ratio, seed)?;
        let train: Vec<CaseLog> = cases
            .iter()
            .filter(|c| split.train.contains(&c.case_id))
            .cloned()
            .collect();
        let stats = fit_normalizer(&train, None)?;
        let pipeline = FeaturePipeline::new(manifest.clone(), stats, k, seed)?;
        let mut samples = Vec::new();
        for case in cases {
            samples.extend(pipeline.sample_case(case)?);
        }
        Ok(Self {
            version: SAMPLE_CACHE_VERSION,
            seed,
            mask,
            pipeline,
            split,
            samples,
        })
    }

    fn select(&self, ids: &[String]) -> Vec<&Sample> {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.samples
            .iter()
            .filter(|s| wanted.contains(s.case_id.as_str()))
            .collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.select(&self.split.train)
    }

    pub fn validation(&self) -> Vec<&Sample> {
        self.select(&self.split.validation)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.select(&self.split.test)
    }

    /// SHA-256 of the serialized cache.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cache: Self = serde_json::from_slice(&bytes)?;
        if cache.version != SAMPLE_CACHE_VERSION {
            return Err(Error::Version {
                what: "sample cache",
                found: cache.version,
                expected: SAMPLE_CACHE_VERSION,
            });
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(label_id: usize, start_s: i64, end_s: i64) -> ActivityEvent {
        ActivityEvent {
            label_id,
            start_s,
            end_s,
        }
    }

    fn range(min: f64, max: f64) -> FeatureRange {
        FeatureRange {
            min,
            max,
            degenerate: false,
        }
    }

    fn manifest(n: usize) -> DatasetManifest {
        let catalog = ActivityCatalog::new((0..n).map(|i| format!("a{i}"))).unwrap();
        DatasetManifest::new(catalog, &["blunt", "penetrating", "burn"], &["room_air", "mask"])
            .unwrap()
    }

    fn case(id: &str, duration_s: i64, hr: &[f64], events: Vec<ActivityEvent>) -> CaseLog {
        CaseLog {
            case_id: id.into(),
            static_ctx: StaticContext::default(),
            vitals: hr
                .iter()
                .enumerate()
                .map(|(i, &h)| DynamicContextRecord {
                    t_s: 60 * i as i64,
                    heart_rate: Some(h),
                    ..Default::default()
                })
                .collect(),
            events,
            duration_s,
        }
    }

    #[test]
    fn scaling() {
        assert_eq!(scale_numeric(5.0, &range(0.0, 10.0)).unwrap(), 0.5);
        assert_eq!(scale_numeric(12.0, &range(0.0, 10.0)).unwrap(), 1.0);
        assert_eq!(scale_numeric(-3.0, &range(0.0, 10.0)).unwrap(), 0.0);
        assert_eq!(scale_numeric(7.0, &range(7.0, 7.0)).unwrap(), 0.0);
        assert!(scale_numeric(f64::NAN, &range(0.0, 1.0)).is_err());
    }

    #[test]
    fn one_hot() {
        let vocab: Vec<String> = ["blunt", "penetrating", "burn", "missing"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            encode_one_hot(Some("penetrating"), &vocab).unwrap(),
            vec![0.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(
            encode_one_hot(None, &vocab).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        assert!(encode_one_hot(Some("stab"), &vocab).is_err());
    }

    #[test]
    fn fit_uses_extrema_and_flags_absent_features() {
        let cases = vec![
            case("a", 2400, &[60.0, 100.0], vec![]),
            case("b", 600, &[140.0], vec![]),
        ];
        let stats = fit_normalizer(&cases, None).unwrap();
        assert_eq!(stats.dynamic_numeric[0], range(60.0, 140.0));
        let absent = stats.dynamic_numeric[1];
        assert!(absent.degenerate);
        assert_eq!((absent.min, absent.max), (0.0, 0.0));
        assert_eq!(stats.timestamp.max, 40.0);
        assert!(fit_normalizer(&[], None).is_err());
    }

    #[test]
    fn carry_forward() {
        let c = case("a", 600, &[], vec![]);
        let mut vitals = c.vitals;
        for t in [30, 250] {
            vitals.push(DynamicContextRecord {
                t_s: t,
                ..Default::default()
            });
        }
        assert_eq!(carry_forward_vitals(&vitals, 120).unwrap().t_s, 30);
        assert!(carry_forward_vitals(&vitals, 20).is_none());
        assert_eq!(carry_forward_vitals(&vitals, 250).unwrap().t_s, 250);
    }

    #[test]
    fn last_k_fewer_than_k() {
        let events = vec![ev(0, 10, 15), ev(1, 20, 25), ev(2, 70, 80)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = select_last_k(&events, 120, 5, &mut rng);
        assert_eq!(ids, vec![3, 2, 1, PAD_ID, PAD_ID]);
        assert_eq!(select_last_k(&events, 0, 5, &mut rng), vec![PAD_ID; 5]);
    }

    #[test]
    fn last_k_ties_break_by_label() {
        let events = vec![ev(2, 50, 55), ev(0, 50, 55), ev(1, 50, 55)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_last_k(&events, 120, 2, &mut rng), vec![1, 2]);
    }

    #[test]
    fn last_k_subsamples_a_crowded_minute() {
        let events: Vec<_> = (0..7).map(|i| ev(i, 60 + 5 * i as i64, 200)).collect();
        let draw = |seed| select_last_k(&events, 120, 5, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = draw(7);
        assert_eq!(a, draw(7));
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|&id| (1..=7).contains(&id)));
        let mut uniq = a.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 5);
        // Most-recent-first ordering survives subsampling.
        assert!(a.windows(2).all(|w| w[0] > w[1]));
        // Some seed picks a different subset.
        assert!((0..20).any(|s| draw(s) != a));
    }

    #[test]
    fn long_range_bits() {
        let events = vec![ev(0, 5, 30), ev(2, 65, 300), ev(0, 80, 90)];
        assert_eq!(long_range_vector(&events, 120, 3), vec![1.0, 0.0, 1.0]);
        assert_eq!(long_range_vector(&events, 0, 3), vec![0.0; 3]);
    }

    #[test]
    fn label_overlap_enumeration() {
        // Oracle: enumerate every second of the event and collect its minute.
        let e = ev(0, 90, 200);
        let mut minutes: Vec<i64> = (e.start_s..=e.end_s).map(|s| s / 60).collect();
        minutes.dedup();
        assert_eq!(minutes, vec![1, 2, 3]);
        for t in 0..6u32 {
            let bit = minute_label(&[e], t, 1).is_set(0);
            assert_eq!(bit, minutes.contains(&(t as i64)), "minute {t}");
        }
    }

    #[test]
    fn first_minute_is_empty_context() {
        let m = manifest(3);
        let c = case("a", 300, &[80.0], vec![ev(1, 0, 100)]);
        let stats = fit_normalizer(std::slice::from_ref(&c), None).unwrap();
        let samples = sample_case(&c, &m, &stats, 5, 1).unwrap();
        assert_eq!(samples.len(), 5);
        let s0 = &samples[0];
        assert_eq!(s0.features.last_k_ids, vec![PAD_ID; 5]);
        assert_eq!(s0.features.long_range_vec, vec![0.0; 3]);
        assert_eq!(s0.features.timestamp_scalar, 0.0);
        assert_eq!(s0.label.bits, vec![0, 1, 0]);
        assert_eq!(samples[1].features.last_k_ids[0], 2);
    }

    #[test]
    fn dynamic_without_record_is_missing_encoded() {
        let m = manifest(2);
        let stats = fit_normalizer(&[case("a", 120, &[70.0], vec![])], None).unwrap();
        let p = FeaturePipeline::new(m, stats, 5, 0).unwrap();
        let v = p.encode_dynamic(None).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn masks_and_widths() {
        let m = manifest(61);
        let c = case("a", 300, &[80.0], vec![ev(1, 0, 100)]);
        let stats = fit_normalizer(std::slice::from_ref(&c), None).unwrap();
        let p = FeaturePipeline::new(m, stats, 5, 1).unwrap();
        let samples = p.sample_case(&c).unwrap();

        let full = p.layout(ContextMask::FULL, 16);
        let h = p.static_width();
        let big_m = p.dynamic_width();
        assert_eq!(full.input_width(), h + big_m + 16 + 61 + 1);

        let ts = ContextMask::only("timestamp").unwrap();
        let b = assemble_features(&samples[2].features, ts).unwrap();
        assert_eq!(b.dense.len(), 1);
        assert!(b.ids.is_none());
        assert_eq!(p.layout(ts, 16).input_width(), 1);

        let w0 = assemble_features(&samples[0].features, ContextMask::FULL).unwrap();
        let w1 = assemble_features(&samples[1].features, ContextMask::FULL).unwrap();
        assert_eq!(w0.dense.len(), w1.dense.len());
        assert_eq!(w0.dense.len(), full.dense_width);
        assert_eq!(w0.embed_at, h + big_m);

        assert!(assemble_features(&samples[0].features, ContextMask::NONE).is_err());
    }

    #[test]
    fn mask_parsing() {
        assert_eq!("full".parse::<ContextMask>().unwrap(), ContextMask::FULL);
        assert_eq!(
            "last_k+all_occurred".parse::<ContextMask>().unwrap(),
            ContextMask::process()
        );
        assert_eq!(ContextMask::process().to_string(), "last_k+all_occurred");
        assert!("".parse::<ContextMask>().is_err());
        assert!("vibes".parse::<ContextMask>().is_err());
        assert_eq!(
            ContextMask::FULL.describe(),
            "Last k acts + All occurred acts + Dynamic context + Static context + Timestamp"
        );
    }

    #[test]
    fn splits() {
        let cases: Vec<_> = (0..201).map(|i| case(&format!("c{i:03}"), 60, &[], vec![])).collect();
        let s = split_cases(&cases, (161, 20, 20), 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (161, 20, 20));
        let mut all: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 201);

        let ten = &cases[..10];
        assert_eq!(
            split_cases(ten, (8, 1, 1), 9).unwrap(),
            split_cases(ten, (8, 1, 1), 9).unwrap()
        );
        assert!(split_cases(&cases[..2], (1, 1, 1), 0).is_err());
        assert!(split_cases(ten, (1, 0, 1), 0).is_err());
    }
}
