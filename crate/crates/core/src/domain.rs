//! Cases, catalogs, and the contexts attached to them.
//!
//! Times are integer seconds since patient arrival. Activity labels are
//! catalog-order indices `0..n`; the embedding id space shifts them by one so
//! that id 0 can act as the padding token.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Embedding id reserved for padding.
pub const PAD_ID: usize = 0;

/// Name of the trailing token every categorical vocabulary carries.
pub const MISSING_TOKEN: &str = "missing";

pub const STATIC_NUMERIC: [&str; 5] = ["age", "gcs", "ais", "heart_rate", "systolic_bp"];
pub const DYNAMIC_NUMERIC: [&str; 5] = [
    "heart_rate",
    "respiratory_rate",
    "systolic_bp",
    "diastolic_bp",
    "oxygen_saturation",
];

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Ordered list of activity names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ActivityCatalog {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ActivityCatalog {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidCatalog("catalog is empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, name) in labels.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::InvalidCatalog(format!("label {i} is empty")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidCatalog(format!("duplicate label `{name}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.labels.get(label).map(String::as_str)
    }

    /// 0-based label index of `name`.
    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Embedding id for a label index.
    pub fn embedding_id(label: usize) -> usize {
        label + 1
    }

    /// SHA-256 over the newline-joined label names, hex encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for name in &self.labels {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

impl TryFrom<Vec<String>> for ActivityCatalog {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<ActivityCatalog> for Vec<String> {
    fn from(catalog: ActivityCatalog) -> Self {
        catalog.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub label_id: usize,
    pub start_s: i64,
    pub end_s: i64,
}

impl ActivityEvent {
    /// Whether the closed interval `[start_s, end_s]` intersects `[lo, hi)`.
    pub fn overlaps(&self, lo: i64, hi: i64) -> bool {
        self.start_s < hi && self.end_s >= lo
    }
}

/// Arrival-time patient record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticContext {
    pub age: Option<f64>,
    pub gcs: Option<f64>,
    pub ais: Option<f64>,
    pub heart_rate: Option<f64>,
    pub systolic_bp: Option<f64>,
    pub injury_type: Option<String>,
}

impl StaticContext {
    /// Numeric fields in [`STATIC_NUMERIC`] order.
    pub fn numeric(&self) -> [Option<f64>; 5] {
        [
            self.age,
            self.gcs,
            self.ais,
            self.heart_rate,
            self.systolic_bp,
        ]
    }

    pub fn numeric_mut(&mut self, name: &str) -> Option<&mut Option<f64>> {
        match name {
            "age" => Some(&mut self.age),
            "gcs" => Some(&mut self.gcs),
            "ais" => Some(&mut self.ais),
            "heart_rate" => Some(&mut self.heart_rate),
            "systolic_bp" => Some(&mut self.systolic_bp),
            _ => None,
        }
    }
}

/// One vital-sign check recorded during the process.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicContextRecord {
    pub t_s: i64,
    pub heart_rate: Option<f64>,
    pub respiratory_rate: Option<f64>,
    pub systolic_bp: Option<f64>,
    pub diastolic_bp: Option<f64>,
    pub oxygen_saturation: Option<f64>,
    pub fio2: Option<String>,
}

impl DynamicContextRecord {
    /// Numeric fields in [`DYNAMIC_NUMERIC`] order.
    pub fn numeric(&self) -> [Option<f64>; 5] {
        [
            self.heart_rate,
            self.respiratory_rate,
            self.systolic_bp,
            self.diastolic_bp,
            self.oxygen_saturation,
        ]
    }

    pub fn numeric_mut(&mut self, name: &str) -> Option<&mut Option<f64>> {
        match name {
            "heart_rate" => Some(&mut self.heart_rate),
            "respiratory_rate" => Some(&mut self.respiratory_rate),
            "systolic_bp" => Some(&mut self.systolic_bp),
            "diastolic_bp" => Some(&mut self.diastolic_bp),
            "oxygen_saturation" => Some(&mut self.oxygen_saturation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLog {
    pub case_id: String,
    #[serde(rename = "static")]
    pub static_ctx: StaticContext,
    pub vitals: Vec<DynamicContextRecord>,
    pub events: Vec<ActivityEvent>,
    pub duration_s: i64,
}

impl CaseLog {
    /// Number of one-minute samples the case yields.
    pub fn minutes(&self) -> u32 {
        ((self.duration_s.max(0) + 59) / 60) as u32
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-minute binary target over the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector {
    pub bits: Vec<u8>,
}

impl LabelVector {
    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, label: usize) -> bool {
        self.bits.get(label).is_some_and(|&b| b == 1)
    }

    /// Indices of set bits, ascending.
    pub fn active(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Checks every case invariant and returns the case with vitals stably sorted.
///
/// The first violated invariant is reported.
pub fn validate_case(mut case: CaseLog, catalog: &ActivityCatalog) -> Result<CaseLog> {
    let id = case.case_id.clone();
    if id.trim().is_empty() {
        return Err(Error::invalid_case(&id, "empty case id"));
    }
    if case.duration_s <= 0 {
        return Err(Error::invalid_case(&id, "duration must be positive"));
    }
    for (name, value) in STATIC_NUMERIC.iter().zip(case.static_ctx.numeric()) {
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::invalid_case(&id, format!("static `{name}` is not finite")));
        }
    }
    for record in &case.vitals {
        if record.t_s < 0 {
            return Err(Error::invalid_case(&id, "negative vitals time"));
        }
        for (name, value) in DYNAMIC_NUMERIC.iter().zip(record.numeric()) {
            if value.is_some_and(|v| !v.is_finite()) {
                return Err(Error::invalid_case(
                    &id,
                    format!("vitals `{name}` at {}s is not finite", record.t_s),
                ));
            }
        }
    }
    for event in &case.events {
        if event.label_id >= catalog.len() {
            return Err(Error::invalid_case(
                &id,
                format!("unknown label id {}", event.label_id),
            ));
        }
        if event.start_s < 0 {
            return Err(Error::invalid_case(&id, "negative event time"));
        }
        if event.end_s < event.start_s {
            return Err(Error::invalid_case(&id, "event interval inverted"));
        }
        if event.end_s > case.duration_s {
            return Err(Error::invalid_case(&id, "event beyond case duration"));
        }
    }
    case.vitals.sort_by_key(|r| r.t_s);
    Ok(case)
}

/// Declares the catalog and feature layout shared by a corpus and the models
/// trained on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub catalog: ActivityCatalog,
    pub injury_type_vocab: Vec<String>,
    pub fio2_vocab: Vec<String>,
    pub static_numeric: Vec<String>,
    pub dynamic_numeric: Vec<String>,
}

impl DatasetManifest {
    pub fn new(
        catalog: ActivityCatalog,
        injury_types: &[&str],
        fio2_levels: &[&str],
    ) -> Result<Self> {
        let vocab = |values: &[&str]| -> Vec<String> {
            values
                .iter()
                .map(|s| s.to_string())
                .chain(std::iter::once(MISSING_TOKEN.to_string()))
                .collect()
        };
        let manifest = Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            catalog,
            injury_type_vocab: vocab(injury_types),
            fio2_vocab: vocab(fio2_levels),
            static_numeric: STATIC_NUMERIC.iter().map(|s| s.to_string()).collect(),
            dynamic_numeric: DYNAMIC_NUMERIC.iter().map(|s| s.to_string()).collect(),
        };
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Version {
                what: "manifest",
                found: self.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        for (field, vocab) in [
            ("injury_type", &self.injury_type_vocab),
            ("fio2", &self.fio2_vocab),
        ] {
            if vocab.last().map(String::as_str) != Some(MISSING_TOKEN) {
                return Err(Error::InvalidCatalog(format!(
                    "`{field}` vocabulary must end with `{MISSING_TOKEN}`"
                )));
            }
            let mut seen = std::collections::HashSet::new();
            if !vocab.iter().all(|v| seen.insert(v)) {
                return Err(Error::InvalidCatalog(format!(
                    "`{field}` vocabulary has duplicates"
                )));
            }
        }
        if self.static_numeric != STATIC_NUMERIC || self.dynamic_numeric != DYNAMIC_NUMERIC {
            return Err(Error::InvalidCatalog(
                "numeric feature lists do not match the supported layout".into(),
            ));
        }
        Ok(())
    }

    /// [`validate_case`] plus vocabulary checks for the categorical fields.
    pub fn validate_case(&self, case: CaseLog) -> Result<CaseLog> {
        let case = validate_case(case, &self.catalog)?;
        let in_vocab = |value: &Option<String>, vocab: &[String]| {
            value.as_ref().is_none_or(|v| vocab.contains(v))
        };
        if !in_vocab(&case.static_ctx.injury_type, &self.injury_type_vocab) {
            return Err(Error::invalid_case(&case.case_id, "injury_type outside vocabulary"));
        }
        if let Some(r) = case
            .vitals
            .iter()
            .find(|r| !in_vocab(&r.fio2, &self.fio2_vocab))
        {
            return Err(Error::invalid_case(
                &case.case_id,
                format!("fio2 at {}s outside vocabulary", r.t_s),
            ));
        }
        Ok(case)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> ActivityCatalog {
        ActivityCatalog::new(["A", "B", "C"]).unwrap()
    }

    fn case(events: Vec<ActivityEvent>, vitals: Vec<DynamicContextRecord>) -> CaseLog {
        CaseLog {
            case_id: "c1".into(),
            static_ctx: StaticContext::default(),
            vitals,
            events,
            duration_s: 600,
        }
    }

    fn vitals_at(t_s: i64, hr: f64) -> DynamicContextRecord {
        DynamicContextRecord {
            t_s,
            heart_rate: Some(hr),
            ..Default::default()
        }
    }

    #[test]
    fn label_lookup() {
        let catalog = abc();
        assert_eq!(catalog.label_index("B"), Some(1));
        assert_eq!(ActivityCatalog::embedding_id(1), 2);
        assert_eq!(catalog.label_index("Z"), None);

        let big = ActivityCatalog::new((0..61).map(|i| format!("act{i}"))).unwrap();
        assert_eq!(big.label_index("act60"), Some(60));
    }

    #[test]
    fn catalog_rejects_duplicates_and_blanks() {
        assert!(ActivityCatalog::new(["A", "A"]).is_err());
        assert!(ActivityCatalog::new(["A", " "]).is_err());
        assert!(ActivityCatalog::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let c = case(
            vec![ActivityEvent {
                label_id: 0,
                start_s: 50,
                end_s: 40,
            }],
            vec![],
        );
        let err = validate_case(c, &abc()).unwrap_err();
        assert!(err.to_string().contains("event interval inverted"), "{err}");
    }

    #[test]
    fn other_violations() {
        let unknown = case(
            vec![ActivityEvent {
                label_id: 3,
                start_s: 0,
                end_s: 1,
            }],
            vec![],
        );
        assert!(validate_case(unknown, &abc()).is_err());
        let beyond = case(
            vec![ActivityEvent {
                label_id: 0,
                start_s: 0,
                end_s: 601,
            }],
            vec![],
        );
        assert!(validate_case(beyond, &abc())
            .unwrap_err()
            .to_string()
            .contains("beyond"));
        let negative = case(vec![], vec![vitals_at(-5, 80.0)]);
        assert!(validate_case(negative, &abc()).is_err());
        let nan = case(vec![], vec![vitals_at(5, f64::NAN)]);
        assert!(validate_case(nan, &abc()).is_err());
    }

    #[test]
    fn vitals_are_stably_sorted() {
        let c = case(
            vec![],
            vec![vitals_at(250, 1.0), vitals_at(30, 2.0), vitals_at(250, 3.0)],
        );
        let v = validate_case(c, &abc()).unwrap();
        let order: Vec<_> = v.vitals.iter().map(|r| (r.t_s, r.heart_rate)).collect();
        assert_eq!(
            order,
            vec![(30, Some(2.0)), (250, Some(1.0)), (250, Some(3.0))]
        );
    }

    #[test]
    fn well_formed_case_is_unchanged() {
        let c = case(
            vec![
                ActivityEvent {
                    label_id: 0,
                    start_s: 5,
                    end_s: 30,
                },
                ActivityEvent {
                    label_id: 2,
                    start_s: 65,
                    end_s: 300,
                },
            ],
            vec![vitals_at(30, 90.0), vitals_at(250, 100.0)],
        );
        assert_eq!(validate_case(c.clone(), &abc()).unwrap(), c);
    }

    #[test]
    fn manifest_checks_vocabularies() {
        let m = DatasetManifest::new(abc(), &["blunt", "penetrating"], &["room_air"]).unwrap();
        let mut c = case(vec![], vec![]);
        c.static_ctx.injury_type = Some("stab".into());
        assert!(m.validate_case(c.clone()).is_err());
        c.static_ctx.injury_type = Some("blunt".into());
        assert!(m.validate_case(c).is_ok());
    }

    #[test]
    fn catalog_json_round_trip() {
        let catalog = abc();
        let text = serde_json::to_string(&catalog).unwrap();
        assert_eq!(text, r#"["A","B","C"]"#);
        let back: ActivityCatalog = serde_json::from_str(&text).unwrap();
        assert_eq!(back, catalog);
        assert_eq!(back.hash(), catalog.hash());
    }

    proptest! {
        #[test]
        fn label_index_round_trips(names in prop::collection::hash_set("[a-z]{1,8}", 1..40)) {
            let names: Vec<String> = names.into_iter().collect();
            let catalog = ActivityCatalog::new(names.clone()).unwrap();
            for (i, name) in names.iter().enumerate() {
                prop_assert_eq!(catalog.label_index(name), Some(i));
            }
            let text = serde_json::to_string(&catalog).unwrap();
            let back: ActivityCatalog = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.labels(), catalog.labels());
        }

        #[test]
        fn validation_is_idempotent(
            times in prop::collection::vec(0i64..600, 0..12),
            spans in prop::collection::vec((0usize..3, 0i64..300, 0i64..300), 0..10),
        ) {
            let vitals = times.iter().enumerate().map(|(i, &t)| vitals_at(t, i as f64)).collect();
            let events = spans
                .iter()
                .map(|&(label_id, s, d)| ActivityEvent { label_id, start_s: s, end_s: s + d })
                .collect();
            let once = validate_case(case(events, vitals), &abc()).unwrap();
            let twice = validate_case(once.clone(), &abc()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
