//! Minute-cadence prediction sessions over replayed or live cases.
//!
//! A [`DecisionService`] owns loaded models, a corpus of cases for replay,
//! and open sessions. Each tick assembles features at cutoff `60·t` with the
//! same [`FeaturePipeline::features_at`](crate::features::FeaturePipeline::features_at)
//! used offline, runs the model in eval mode and thresholds the result.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, ModelBundle};
use crate::domain::{ActivityCatalog, ActivityEvent, CaseLog, DynamicContextRecord, StaticContext};
use crate::error::{Error, Result};
use crate::features::{assemble_features, carry_forward_vitals, minute_label, ContextFeatures};
use crate::harness::{export_timeline, Outcome, TimelineExport};
use crate::nn::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Replay,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SessionSource {
    Replay {
        case_id: String,
    },
    Live {
        #[serde(default, rename = "static")]
        static_ctx: StaticContext,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub model_id: String,
    #[serde(flatten)]
    pub source: SessionSource,
}

/// Replacement values; `None` leaves a field as recorded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VitalsPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respiratory_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systolic_bp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diastolic_bp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oxygen_saturation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fio2: Option<String>,
}

impl VitalsPatch {
    fn apply(&self, rec: &mut DynamicContextRecord) {
        let fields = [
            ("heart_rate", self.heart_rate),
            ("respiratory_rate", self.respiratory_rate),
            ("systolic_bp", self.systolic_bp),
            ("diastolic_bp", self.diastolic_bp),
            ("oxygen_saturation", self.oxygen_saturation),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                *rec.numeric_mut(name).expect("known field") = Some(v);
            }
        }
        if let Some(f) = &self.fio2 {
            rec.fio2 = Some(f.clone());
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.heart_rate,
            self.respiratory_rate,
            self.systolic_bp,
            self.diastolic_bp,
            self.oxygen_saturation,
        ]
        .into_iter()
        .flatten()
    }
}

/// A what-if change to a session's context. Overrides only change model
/// inputs; replay ground truth always comes from the source case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Override {
    /// From `t_s` on, the patched fields hold these values.
    Vitals { t_s: i64, patch: VitalsPatch },
    /// Replaces static fields that are `Some` in `patch`.
    Static { patch: StaticContext },
    InjectEvent {
        activity: String,
        start_s: i64,
        end_s: i64,
    },
    /// Hides source events of `activity` starting at `start_s`.
    SuppressEvent { activity: String, start_s: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideEntry {
    pub override_id: u64,
    #[serde(flatten)]
    pub change: Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFrame {
    pub session_id: String,
    pub minute: u32,
    pub probabilities: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Label ids with probability at or above their threshold.
    pub predicted: Vec<usize>,
    /// Replay only: labels active in the source case this minute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<Outcome>>,
    pub context: ContextFeatures,
}

impl PredictionFrame {
    /// Whether `predicted` agrees with the frame's own probabilities and
    /// thresholds.
    pub fn is_consistent(&self) -> bool {
        let recomputed: Vec<usize> = self
            .probabilities
            .iter()
            .zip(&self.thresholds)
            .enumerate()
            .filter(|(_, (p, t))| p >= t)
            .map(|(i, _)| i)
            .collect();
        recomputed == self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub model_id: String,
    pub mode: SessionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub minute: u32,
    /// Replay only: number of minutes in the source case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_minutes: Option<u32>,
    pub overrides: Vec<OverrideEntry>,
    pub frames: usize,
}

struct Session {
    id: String,
    model_id: String,
    model: Arc<ModelBundle>,
    mode: SessionMode,
    source: Option<Arc<CaseLog>>,
    static_ctx: StaticContext,
    vitals: Vec<DynamicContextRecord>,
    events: Vec<ActivityEvent>,
    minute: u32,
    overrides: Vec<OverrideEntry>,
    next_override: u64,
    frames: Vec<PredictionFrame>,
    subscribers: Vec<mpsc::Sender<PredictionFrame>>,
}

impl Session {
    fn catalog(&self) -> &ActivityCatalog {
        self.model.catalog()
    }

    fn info(&self) -> SessionInfo {
        SessionInfo {
            session_id: self.id.clone(),
            model_id: self.model_id.clone(),
            mode: self.mode,
            case_id: self.source.as_ref().map(|c| c.case_id.clone()),
            minute: self.minute,
            case_minutes: self.source.as_ref().map(|c| c.minutes()),
            overrides: self.overrides.clone(),
            frames: self.frames.len(),
        }
    }

    fn rng_key(&self) -> &str {
        self.source.as_ref().map_or(&self.id, |c| &c.case_id)
    }

    /// Static context, vitals and events with overrides applied.
    fn effective(&self) -> (StaticContext, Vec<DynamicContextRecord>, Vec<ActivityEvent>) {
        let mut static_ctx = self.static_ctx.clone();
        let mut vitals = self.vitals.clone();
        let mut events = self.events.clone();
        for entry in &self.overrides {
            match &entry.change {
                Override::Static { patch } => {
                    for (name, value) in crate::domain::STATIC_NUMERIC.iter().zip(patch.numeric()) {
                        if value.is_some() {
                            *static_ctx.numeric_mut(name).expect("known field") = value;
                        }
                    }
                    if patch.injury_type.is_some() {
                        static_ctx.injury_type = patch.injury_type.clone();
                    }
                }
                Override::Vitals { t_s, patch } => {
                    if !vitals.iter().any(|r| r.t_s == *t_s) {
                        let mut rec = carry_forward_vitals(&vitals, *t_s).cloned().unwrap_or_default();
                        rec.t_s = *t_s;
                        let at = vitals.partition_point(|r| r.t_s <= *t_s);
                        vitals.insert(at, rec);
                    }
                    for rec in vitals.iter_mut().filter(|r| r.t_s >= *t_s) {
                        patch.apply(rec);
                    }
                }
                Override::InjectEvent {
                    activity,
                    start_s,
                    end_s,
                } => events.push(ActivityEvent {
                    label_id: self.catalog().label_index(activity).expect("checked on apply"),
                    start_s: *start_s,
                    end_s: *end_s,
                }),
                Override::SuppressEvent { activity, start_s } => {
                    let label = self.catalog().label_index(activity).expect("checked on apply");
                    events.retain(|e| !(e.label_id == label && e.start_s == *start_s));
                }
            }
        }
        (static_ctx, vitals, events)
    }

    fn tick(&mut self) -> Result<PredictionFrame> {
        let minute = self.minute;
        if let Some(case) = &self.source {
            if minute >= case.minutes() {
                return Err(Error::EndOfCase(minute));
            }
        }
        let bundle = &self.model;
        let thresholds = bundle.thresholds.as_ref().ok_or_else(|| Error::InvalidArgument {
            arg: "model",
            reason: "model has no calibrated thresholds".into(),
        })?;
        let (static_ctx, vitals, events) = self.effective();
        let context = bundle
            .pipeline
            .features_at(self.rng_key(), &static_ctx, &vitals, &events, minute)?;
        let features = assemble_features(&context, bundle.mask())?;
        let batch = Batch::from_bundles([&features])?;
        let probs = bundle.model.predict(&batch)?;
        let probabilities: Vec<f64> = probs.row(0).to_vec();
        let predicted: Vec<usize> = probabilities
            .iter()
            .zip(&thresholds.thresholds)
            .enumerate()
            .filter(|(_, (p, t))| p >= t)
            .map(|(i, _)| i)
            .collect();
        let (truth, outcomes) = match &self.source {
            Some(case) => {
                let label = minute_label(&case.events, minute, self.catalog().len());
                let outcomes = (0..label.len())
                    .map(|i| Outcome::of(predicted.contains(&i), label.is_set(i)))
                    .collect();
                (Some(label.active()), Some(outcomes))
            }
            None => (None, None),
        };
        let frame = PredictionFrame {
            session_id: self.id.clone(),
            minute,
            probabilities,
            thresholds: thresholds.thresholds.clone(),
            predicted,
            truth,
            outcomes,
            context,
        };
        self.minute += 1;
        self.frames.push(frame.clone());
        self.subscribers.retain(|tx| tx.send(frame.clone()).is_ok());
        Ok(frame)
    }

    fn check_override(&self, change: &Override) -> Result<()> {
        let catalog = self.catalog();
        let known = |name: &str| {
            catalog
                .label_index(name)
                .map(|_| ())
                .ok_or_else(|| Error::UnknownActivity(name.to_string()))
        };
        let manifest = &self.model.pipeline.manifest;
        match change {
            Override::Vitals { t_s, patch } => {
                if *t_s < 0 {
                    return Err(Error::InvalidArgument {
                        arg: "t_s",
                        reason: "negative time".into(),
                    });
                }
                if patch.values().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("vitals override".into()));
                }
                if let Some(f) = &patch.fio2 {
                    if !manifest.fio2_vocab.contains(f) {
                        return Err(Error::UnknownCategory {
                            field: "fio2".into(),
                            value: f.clone(),
                        });
                    }
                }
                Ok(())
            }
            Override::Static { patch } => {
                if patch.numeric().iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("static override".into()));
                }
                if let Some(t) = &patch.injury_type {
                    if !manifest.injury_type_vocab.contains(t) {
                        return Err(Error::UnknownCategory {
                            field: "injury_type".into(),
                            value: t.clone(),
                        });
                    }
                }
                Ok(())
            }
            Override::InjectEvent {
                activity,
                start_s,
                end_s,
            } => {
                known(activity)?;
                check_interval(*start_s, *end_s)
            }
            Override::SuppressEvent { activity, .. } => known(activity),
        }
    }
}

fn check_interval(start_s: i64, end_s: i64) -> Result<()> {
    if start_s < 0 || end_s < start_s {
        return Err(Error::InvalidArgument {
            arg: "event",
            reason: format!("bad interval [{start_s}, {end_s}]"),
        });
    }
    Ok(())
}

/// Shared state behind the HTTP API. All methods take `&self`; each session
/// serializes its own mutations.
#[derive(Default)]
pub struct DecisionService {
    models: RwLock<BTreeMap<String, Arc<ModelBundle>>>,
    cases: RwLock<BTreeMap<String, Arc<CaseLog>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

fn poisoned<T>(_: T) -> Error {
    Error::Closed
}

impl DecisionService {
    pub fn new() -> Self {
        Self::default()
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1)
    }

    pub fn add_cases(&self, cases: impl IntoIterator<Item = CaseLog>) {
        let mut map = self.cases.write().expect("case map lock");
        for case in cases {
            map.insert(case.case_id.clone(), Arc::new(case));
        }
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.cases.read().expect("case map lock").keys().cloned().collect()
    }

    pub fn case(&self, case_id: &str) -> Result<Arc<CaseLog>> {
        self.cases
            .read()
            .expect("case map lock")
            .get(case_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("case `{case_id}`")))
    }

    /// Registers a model under `model_id`, or a fresh id when `None`.
    pub fn insert_model(&self, model_id: Option<String>, bundle: ModelBundle) -> String {
        let id = model_id.unwrap_or_else(|| self.fresh_id("model"));
        self.models
            .write()
            .expect("model map lock")
            .insert(id.clone(), Arc::new(bundle));
        id
    }

    pub fn load_model(&self, path: impl AsRef<Path>, model_id: Option<String>) -> Result<String> {
        let bundle = load_checkpoint(path, None)?;
        if let Some(existing) = self.models.read().expect("model map lock").values().next() {
            let (expected, found) = (existing.catalog().hash(), bundle.catalog().hash());
            if expected != found {
                return Err(Error::CatalogMismatch { expected, found });
            }
        }
        Ok(self.insert_model(model_id, bundle))
    }

    pub fn model(&self, model_id: &str) -> Result<Arc<ModelBundle>> {
        self.models
            .read()
            .expect("model map lock")
            .get(model_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("model `{model_id}`")))
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.read().expect("model map lock").keys().cloned().collect()
    }

    /// The catalog of a loaded model, or of `model_id` when given.
    pub fn catalog(&self, model_id: Option<&str>) -> Result<ActivityCatalog> {
        match model_id {
            Some(id) => Ok(self.model(id)?.catalog().clone()),
            None => self
                .models
                .read()
                .expect("model map lock")
                .values()
                .next()
                .map(|m| m.catalog().clone())
                .ok_or_else(|| Error::NotFound("no model loaded".into())),
        }
    }

    pub fn create_session(&self, req: CreateSession) -> Result<SessionInfo> {
        let model = self.model(&req.model_id)?;
        if model.thresholds.is_none() {
            return Err(Error::InvalidArgument {
                arg: "model_id",
                reason: "model is not calibrated".into(),
            });
        }
        let (mode, source, static_ctx, vitals, events) = match req.source {
            SessionSource::Replay { case_id } => {
                let case = self.case(&case_id)?;
                let case = Arc::new(model.pipeline.manifest.validate_case((*case).clone())?);
                (
                    SessionMode::Replay,
                    Some(case.clone()),
                    case.static_ctx.clone(),
                    case.vitals.clone(),
                    case.events.clone(),
                )
            }
            SessionSource::Live { static_ctx } => {
                model.pipeline.encode_static(&static_ctx)?;
                (SessionMode::Live, None, static_ctx, Vec::new(), Vec::new())
            }
        };
        let session = Session {
            id: self.fresh_id("session"),
            model_id: req.model_id,
            model,
            mode,
            source,
            static_ctx,
            vitals,
            events,
            minute: 0,
            overrides: Vec::new(),
            next_override: 1,
            frames: Vec::new(),
            subscribers: Vec::new(),
        };
        let info = session.info();
        self.sessions
            .write()
            .expect("session map lock")
            .insert(info.session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(info)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let session = self.session(id)?;
        let mut guard = session.lock().map_err(poisoned)?;
        f(&mut guard)
    }

    pub fn session_info(&self, id: &str) -> Result<SessionInfo> {
        self.with_session(id, |s| Ok(s.info()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("session map lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Predicts the current minute and advances the session by one.
    pub fn tick(&self, id: &str) -> Result<PredictionFrame> {
        self.with_session(id, Session::tick)
    }

    pub fn frames(&self, id: &str) -> Result<Vec<PredictionFrame>> {
        self.with_session(id, |s| Ok(s.frames.clone()))
    }

    pub fn apply_override(&self, id: &str, change: Override) -> Result<OverrideEntry> {
        self.with_session(id, |s| {
            s.check_override(&change)?;
            let entry = OverrideEntry {
                override_id: s.next_override,
                change,
            };
            s.next_override += 1;
            s.overrides.push(entry.clone());
            Ok(entry)
        })
    }

    pub fn remove_override(&self, id: &str, override_id: u64) -> Result<()> {
        self.with_session(id, |s| {
            let before = s.overrides.len();
            s.overrides.retain(|o| o.override_id != override_id);
            if s.overrides.len() == before {
                return Err(Error::NotFound(format!("override {override_id}")));
            }
            Ok(())
        })
    }

    /// Appends an observed activity to a live session.
    pub fn record_event(&self, id: &str, activity: &str, start_s: i64, end_s: i64) -> Result<ActivityEvent> {
        self.with_session(id, |s| {
            if s.mode != SessionMode::Live {
                return Err(Error::Mode("replay sessions take overrides, not recorded events".into()));
            }
            let label_id = s
                .catalog()
                .label_index(activity)
                .ok_or_else(|| Error::UnknownActivity(activity.to_string()))?;
            check_interval(start_s, end_s)?;
            let event = ActivityEvent {
                label_id,
                start_s,
                end_s,
            };
            s.events.push(event);
            Ok(event)
        })
    }

    /// Appends a vitals record to a live session.
    pub fn record_vitals(&self, id: &str, record: DynamicContextRecord) -> Result<()> {
        self.with_session(id, |s| {
            if s.mode != SessionMode::Live {
                return Err(Error::Mode("replay sessions take overrides, not recorded vitals".into()));
            }
            if record.t_s < 0 || record.numeric().iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument {
                    arg: "vitals",
                    reason: "negative time or non-finite value".into(),
                });
            }
            s.model.pipeline.encode_dynamic(Some(&record))?;
            let at = s.vitals.partition_point(|r| r.t_s <= record.t_s);
            s.vitals.insert(at, record);
            Ok(())
        })
    }

    /// Frames from every later tick, in order. The channel closes when the
    /// session does.
    pub fn subscribe(&self, id: &str) -> Result<mpsc::Receiver<PredictionFrame>> {
        self.with_session(id, |s| {
            let (tx, rx) = mpsc::channel();
            s.subscribers.push(tx);
            Ok(rx)
        })
    }

    pub fn close_session(&self, id: &str) -> Result<()> {
        let session = self
            .sessions
            .write()
            .expect("session map lock")
            .remove(id)
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))?;
        session.lock().map_err(poisoned)?.subscribers.clear();
        Ok(())
    }

    /// Offline timeline for a stored case, filtered by the model's test F1.
    pub fn timeline(&self, case_id: &str, model_id: &str, cutoff: f64) -> Result<TimelineExport> {
        let model = self.model(model_id)?;
        let label_f1 = model.test_label_f1.clone().ok_or_else(|| Error::InvalidArgument {
            arg: "model_id",
            reason: "model carries no test report".into(),
        })?;
        let case = self.case(case_id)?;
        export_timeline(std::slice::from_ref(&*case), case_id, &model, &label_f1, cutoff)
    }
}
