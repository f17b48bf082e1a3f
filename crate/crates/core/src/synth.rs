//! Synthetic resuscitation cases with known generative structure.
//!
//! A scenario combines phase templates (base-rate activities), dependency
//! rules (an activity follows another within a delay window), and context
//! rules tying activity probabilities to the patient: injury type, arrival
//! measurements, and vitals crossing bounds during the case. Every emitted
//! event is recorded in a [`GroundTruthTrace`] together with the rule that
//! produced it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_case, ActivityCatalog, ActivityEvent, CaseLog, DatasetManifest, DynamicContextRecord,
    StaticContext, DYNAMIC_NUMERIC, MISSING_TOKEN, STATIC_NUMERIC,
};
use crate::error::{Error, Result};

/// The scenario shipped with the crate.
pub const DEFAULT_SCENARIO_JSON: &str = include_str!("../scenarios/default.json");

/// Normal distribution truncated to `[min, max]` by rejection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    #[serde(default = "f64_infinity", skip_serializing_if = "is_infinite")]
    pub max: f64,
}

fn f64_infinity() -> f64 {
    f64::INFINITY
}

fn is_infinite(v: &f64) -> bool {
    v.is_infinite()
}

impl TruncNormal {
    fn check(&self, what: &str) -> Result<()> {
        if !(self.sd >= 0.0) || !self.mean.is_finite() || !(self.min <= self.max) {
            return Err(Error::InvalidScenario(format!("bad distribution for {what}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sd == 0.0 {
            return self.mean.clamp(self.min, self.max);
        }
        let normal = Normal::new(self.mean, self.sd).expect("sd checked positive");
        for _ in 0..1000 {
            let x = normal.sample(rng);
            if x >= self.min && x <= self.max {
                return x;
            }
        }
        self.mean.clamp(self.min, self.max)
    }
}

/// Uniform delay window in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationSpec {
    Minutes(TruncNormal),
    /// Lasts until the case ends.
    UntilEnd,
}

/// When an activity starts, either in absolute minutes or as a fraction of
/// the case duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartSpec {
    Minute(TruncNormal),
    Fraction(TruncNormal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseActivity {
    pub activity: String,
    pub probability: f64,
    pub start: StartSpec,
    pub duration: DurationSpec,
    /// Chance of each further repetition after the first.
    #[serde(default)]
    pub repeat_probability: f64,
    #[serde(default)]
    pub repeat_gap: Option<TruncNormal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTemplate {
    pub name: String,
    pub members: Vec<PhaseActivity>,
}

/// `consequent` starts `delay` minutes after the first start of
/// `antecedent`, with probability `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyRule {
    pub antecedent: String,
    pub consequent: String,
    pub delay: Window,
    pub probability: f64,
    pub duration: DurationSpec,
}

impl DependencyRule {
    pub fn is_deterministic(&self) -> bool {
        self.probability >= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above: Option<f64>,
}

impl Bound {
    pub fn holds(&self, x: f64) -> bool {
        self.below.is_none_or(|b| x < b) && self.above.is_none_or(|a| x > a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextRule {
    /// Scales a phase activity's probability for one injury type.
    InjuryType {
        value: String,
        activity: String,
        multiplier: f64,
    },
    /// Scales a phase activity's probability when a static measurement is
    /// within `when`.
    Static {
        field: String,
        when: Bound,
        activity: String,
        multiplier: f64,
    },
    /// Starts `activity` after the first vitals record within `when`.
    Vitals {
        field: String,
        when: Bound,
        activity: String,
        probability: f64,
        delay: Window,
        duration: DurationSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticModel {
    pub age: Window,
    pub gcs_normal_probability: f64,
    pub gcs_abnormal: Window,
    pub ais: Window,
    /// Injury types with relative weights.
    pub injury_types: Vec<(String, f64)>,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fio2Rule {
    pub activity: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsModel {
    /// Minutes between consecutive records.
    pub interval: TruncNormal,
    pub stable: BTreeMap<String, Gaussian>,
    pub unstable: BTreeMap<String, Gaussian>,
    /// Chance of deterioration per injury type; `missing` covers unknown.
    pub unstable_probability: BTreeMap<String, f64>,
    /// Minute at which an unstable patient deteriorates.
    pub onset: TruncNormal,
    pub fio2_levels: Vec<String>,
    pub fio2_default: String,
    /// Later rules take precedence once their activity has started.
    pub fio2_rules: Vec<Fio2Rule>,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub activities: Vec<String>,
    pub phases: Vec<PhaseTemplate>,
    pub dependencies: Vec<DependencyRule>,
    pub context_rules: Vec<ContextRule>,
    /// Case duration in minutes.
    pub duration: TruncNormal,
    pub static_model: StaticModel,
    pub vitals: VitalsModel,
    pub seed: u64,
}

fn unit(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidScenario(format!("{what}: probability {p} outside [0, 1]")))
    }
}

fn check_duration(d: &DurationSpec, what: &str) -> Result<()> {
    match d {
        DurationSpec::Minutes(t) => t.check(what),
        DurationSpec::UntilEnd => Ok(()),
    }
}

fn check_window(w: &Window, what: &str) -> Result<()> {
    if w.lo >= 0.0 && w.lo <= w.hi {
        Ok(())
    } else {
        Err(Error::InvalidScenario(format!("{what}: bad window [{}, {}]", w.lo, w.hi)))
    }
}

impl ScenarioConfig {
    pub fn default_scenario() -> Self {
        Self::from_json(DEFAULT_SCENARIO_JSON).expect("shipped scenario is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Self = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn catalog(&self) -> Result<ActivityCatalog> {
        ActivityCatalog::new(self.activities.iter().cloned())
    }

    pub fn injury_types(&self) -> Vec<&str> {
        self.static_model
            .injury_types
            .iter()
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let fio2: Vec<&str> = self.vitals.fio2_levels.iter().map(String::as_str).collect();
        DatasetManifest::new(self.catalog()?, &self.injury_types(), &fio2)
    }

    /// Labels produced by some rule with probability 1.
    pub fn deterministic_labels(&self) -> Vec<usize> {
        let catalog = self.catalog().expect("validated");
        let mut out: Vec<usize> = self
            .dependencies
            .iter()
            .filter(|r| r.is_deterministic())
            .filter_map(|r| catalog.label_index(&r.consequent))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn known(&self, catalog: &ActivityCatalog, name: &str, what: &str) -> Result<usize> {
        catalog
            .label_index(name)
            .ok_or_else(|| Error::InvalidScenario(format!("{what}: unknown activity `{name}`")))
    }

    /// Checks ranges, references and that the dependency graph is acyclic.
    pub fn validate(&self) -> Result<()> {
        let catalog = self.catalog()?;
        self.duration.check("case duration")?;
        if self.duration.min <= 0.0 {
            return Err(Error::InvalidScenario("case duration must be truncated above 0".into()));
        }
        for phase in &self.phases {
            for m in &phase.members {
                let what = format!("phase `{}` member `{}`", phase.name, m.activity);
                self.known(&catalog, &m.activity, &what)?;
                unit(m.probability, &what)?;
                unit(m.repeat_probability, &what)?;
                if m.repeat_probability >= 1.0 {
                    return Err(Error::InvalidScenario(format!("{what}: repeats never stop")));
                }
                match m.start {
                    StartSpec::Minute(t) | StartSpec::Fraction(t) => t.check(&what)?,
                }
                if let Some(gap) = m.repeat_gap {
                    gap.check(&what)?;
                }
                check_duration(&m.duration, &what)?;
            }
        }
        for (i, r) in self.dependencies.iter().enumerate() {
            let what = format!("dependency {i}");
            self.known(&catalog, &r.antecedent, &what)?;
            self.known(&catalog, &r.consequent, &what)?;
            unit(r.probability, &what)?;
            check_window(&r.delay, &what)?;
            check_duration(&r.duration, &what)?;
        }
        for (i, rule) in self.context_rules.iter().enumerate() {
            let what = format!("context rule {i}");
            match rule {
                ContextRule::InjuryType {
                    value,
                    activity,
                    multiplier,
                } => {
                    self.known(&catalog, activity, &what)?;
                    if !self.injury_types().contains(&value.as_str()) {
                        return Err(Error::InvalidScenario(format!("{what}: unknown injury type `{value}`")));
                    }
                    if !(*multiplier >= 0.0) {
                        return Err(Error::InvalidScenario(format!("{what}: negative multiplier")));
                    }
                }
                ContextRule::Static {
                    field,
                    activity,
                    multiplier,
                    ..
                } => {
                    self.known(&catalog, activity, &what)?;
                    if !STATIC_NUMERIC.contains(&field.as_str()) {
                        return Err(Error::InvalidScenario(format!("{what}: unknown static field `{field}`")));
                    }
                    if !(*multiplier >= 0.0) {
                        return Err(Error::InvalidScenario(format!("{what}: negative multiplier")));
                    }
                }
                ContextRule::Vitals {
                    field,
                    activity,
                    probability,
                    delay,
                    duration,
                    ..
                } => {
                    self.known(&catalog, activity, &what)?;
                    if !DYNAMIC_NUMERIC.contains(&field.as_str()) {
                        return Err(Error::InvalidScenario(format!("{what}: unknown vitals field `{field}`")));
                    }
                    unit(*probability, &what)?;
                    check_window(delay, &what)?;
                    check_duration(duration, &what)?;
                }
            }
        }
        let v = &self.vitals;
        v.interval.check("vitals interval")?;
        if v.interval.min <= 0.0 {
            return Err(Error::InvalidScenario("vitals interval must be truncated above 0".into()));
        }
        v.onset.check("vitals onset")?;
        unit(v.missing_rate, "vitals missing rate")?;
        for field in DYNAMIC_NUMERIC {
            for (name, table) in [("stable", &v.stable), ("unstable", &v.unstable)] {
                let g = table
                    .get(field)
                    .ok_or_else(|| Error::InvalidScenario(format!("{name} vitals lack `{field}`")))?;
                if !(g.sd >= 0.0) {
                    return Err(Error::InvalidScenario(format!("{name} vitals `{field}`: negative sd")));
                }
            }
        }
        for p in v.unstable_probability.values() {
            unit(*p, "unstable probability")?;
        }
        if !v.fio2_levels.contains(&v.fio2_default) {
            return Err(Error::InvalidScenario("fio2 default is not a declared level".into()));
        }
        for r in &v.fio2_rules {
            self.known(&catalog, &r.activity, "fio2 rule")?;
            if !v.fio2_levels.contains(&r.level) {
                return Err(Error::InvalidScenario(format!("fio2 rule level `{}` undeclared", r.level)));
            }
        }
        let s = &self.static_model;
        unit(s.missing_rate, "static missing rate")?;
        unit(s.gcs_normal_probability, "gcs normal probability")?;
        if s.injury_types.is_empty() || s.injury_types.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::InvalidScenario("injury types need non-negative weights".into()));
        }
        for (name, w) in [("age", s.age), ("gcs", s.gcs_abnormal), ("ais", s.ais)] {
            check_window(&w, name)?;
        }
        self.dependency_order(&catalog)?;
        Ok(())
    }

    /// Dependency rule indices ordered so that every rule producing an
    /// activity runs before any rule consuming it.
    fn dependency_order(&self, catalog: &ActivityCatalog) -> Result<Vec<usize>> {
        let n = catalog.len();
        let mut indegree = vec![0usize; n];
        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
        for r in &self.dependencies {
            let a = catalog.label_index(&r.antecedent).expect("checked");
            let c = catalog.label_index(&r.consequent).expect("checked");
            edges[a].push(c);
            indegree[c] += 1;
        }
        let mut rank = vec![usize::MAX; n];
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut next = 0;
        while let Some(node) = ready.pop() {
            rank[node] = next;
            next += 1;
            for &c in &edges[node] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if next < n {
            return Err(Error::InvalidScenario("dependency rules form a cycle".into()));
        }
        let mut order: Vec<usize> = (0..self.dependencies.len()).collect();
        order.sort_by_key(|&i| rank[catalog.label_index(&self.dependencies[i].antecedent).expect("checked")]);
        Ok(order)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EventSource {
    Phase { phase: String, repeat: u32 },
    Dependency { index: usize, antecedent_start_s: i64 },
    Vitals { index: usize, record_t_s: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub activity: String,
    pub label_id: usize,
    pub start_s: i64,
    pub end_s: i64,
    #[serde(flatten)]
    pub source: EventSource,
}

/// A context rule that changed a probability in this case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifierHit {
    pub index: usize,
    pub activity: String,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrace {
    pub case_id: String,
    pub unstable: bool,
    pub onset_s: Option<i64>,
    pub modifiers: Vec<ModifierHit>,
    /// Parallel to the case's events.
    pub events: Vec<TraceEvent>,
}

struct Draft {
    label: usize,
    start_s: i64,
    duration: DurationSpec,
    source: EventSource,
}

fn maybe<R: Rng + ?Sized>(rng: &mut R, missing_rate: f64, value: f64) -> Option<f64> {
    (!rng.random_bool(missing_rate)).then_some(value)
}

fn pick_weighted<'a, R: Rng + ?Sized>(rng: &mut R, items: &'a [(String, f64)]) -> &'a str {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    for (name, w) in items {
        if x < *w {
            return name;
        }
        x -= w;
    }
    &items.last().expect("non-empty").0
}

fn minutes_to_s(m: f64) -> i64 {
    (m * 60.0).round() as i64
}

fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:04}")
}

/// Generates one case. The scenario must be valid.
pub fn generate_case<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    case_id: &str,
    rng: &mut R,
) -> Result<(CaseLog, GroundTruthTrace)> {
    let catalog = scenario.catalog()?;
    let label = |name: &str| catalog.label_index(name).expect("validated");
    let sm = &scenario.static_model;
    let vm = &scenario.vitals;

    let duration_min = scenario.duration.sample(rng);
    let mut duration_s = minutes_to_s(duration_min).max(1);

    let injury = pick_weighted(rng, &sm.injury_types).to_string();
    let gcs = if rng.random_bool(sm.gcs_normal_probability) {
        15.0
    } else {
        rng.random_range(sm.gcs_abnormal.lo..=sm.gcs_abnormal.hi).round()
    };
    let unstable_p = vm
        .unstable_probability
        .get(&injury)
        .or_else(|| vm.unstable_probability.get(MISSING_TOKEN))
        .copied()
        .unwrap_or(0.0);
    let unstable = rng.random_bool(unstable_p);
    let onset_s = unstable.then(|| minutes_to_s(vm.onset.sample(rng)));

    // Vitals records from t = 0 at sampled intervals.
    let mut vitals = Vec::new();
    let mut t_s = 0i64;
    while t_s < duration_s {
        let deteriorated = onset_s.is_some_and(|o| t_s >= o);
        let table = if deteriorated { &vm.unstable } else { &vm.stable };
        let mut rec = DynamicContextRecord {
            t_s,
            ..Default::default()
        };
        for field in DYNAMIC_NUMERIC {
            let g = table[field];
            let value = (g.mean + g.sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).max(0.0).round();
            *rec.numeric_mut(field).expect("known field") = Some(value);
        }
        vitals.push(rec);
        t_s += minutes_to_s(vm.interval.sample(rng)).max(1);
    }
    let arrival = vitals[0].clone();
    let static_raw = StaticContext {
        age: Some(rng.random_range(sm.age.lo..=sm.age.hi).round()),
        gcs: Some(gcs),
        ais: Some(rng.random_range(sm.ais.lo..=sm.ais.hi).round()),
        heart_rate: arrival.heart_rate,
        systolic_bp: arrival.systolic_bp,
        injury_type: Some(injury.clone()),
    };

    // Context multipliers for phase activities.
    let mut multiplier: HashMap<usize, f64> = HashMap::new();
    let mut modifiers = Vec::new();
    for (index, rule) in scenario.context_rules.iter().enumerate() {
        let hit = match rule {
            ContextRule::InjuryType {
                value,
                activity,
                multiplier,
            } => (value == &injury).then_some((activity, *multiplier)),
            ContextRule::Static {
                field,
                when,
                activity,
                multiplier,
            } => {
                let i = STATIC_NUMERIC.iter().position(|f| f == field).expect("validated");
                static_raw.numeric()[i]
                    .filter(|&x| when.holds(x))
                    .map(|_| (activity, *multiplier))
            }
            ContextRule::Vitals { .. } => None,
        };
        if let Some((activity, m)) = hit {
            *multiplier.entry(label(activity)).or_insert(1.0) *= m;
            modifiers.push(ModifierHit {
                index,
                activity: activity.clone(),
                multiplier: m,
            });
        }
    }

    let mut drafts: Vec<Draft> = Vec::new();
    for phase in &scenario.phases {
        for m in &phase.members {
            let id = label(&m.activity);
            let p = (m.probability * multiplier.get(&id).copied().unwrap_or(1.0)).min(1.0);
            if !rng.random_bool(p) {
                continue;
            }
            let start_min = match m.start {
                StartSpec::Minute(t) => t.sample(rng),
                StartSpec::Fraction(t) => t.sample(rng) * duration_s as f64 / 60.0,
            };
            let mut start_s = minutes_to_s(start_min).max(0);
            if start_s >= duration_s {
                continue;
            }
            let mut repeat = 0;
            loop {
                drafts.push(Draft {
                    label: id,
                    start_s,
                    duration: m.duration,
                    source: EventSource::Phase {
                        phase: phase.name.clone(),
                        repeat,
                    },
                });
                let Some(gap) = m.repeat_gap else { break };
                if !rng.random_bool(m.repeat_probability) {
                    break;
                }
                start_s += minutes_to_s(gap.sample(rng)).max(1);
                if start_s >= duration_s {
                    break;
                }
                repeat += 1;
            }
        }
    }

    for (index, rule) in scenario.context_rules.iter().enumerate() {
        if let ContextRule::Vitals {
            field,
            when,
            activity,
            probability,
            delay,
            duration,
        } = rule
        {
            let i = DYNAMIC_NUMERIC.iter().position(|f| f == field).expect("validated");
            let first = vitals.iter().find(|r| r.numeric()[i].is_some_and(|x| when.holds(x)));
            if let Some(record) = first {
                if rng.random_bool(*probability) {
                    drafts.push(Draft {
                        label: label(activity),
                        start_s: record.t_s + minutes_to_s(delay.sample(rng)),
                        duration: *duration,
                        source: EventSource::Vitals {
                            index,
                            record_t_s: record.t_s,
                        },
                    });
                }
            }
        }
    }

    for index in scenario.dependency_order(&catalog)? {
        let rule = &scenario.dependencies[index];
        let a = label(&rule.antecedent);
        let Some(first) = drafts.iter().filter(|d| d.label == a).map(|d| d.start_s).min() else {
            continue;
        };
        if !rng.random_bool(rule.probability) {
            continue;
        }
        drafts.push(Draft {
            label: label(&rule.consequent),
            start_s: first + minutes_to_s(rule.delay.sample(rng)),
            duration: rule.duration,
            source: EventSource::Dependency {
                index,
                antecedent_start_s: first,
            },
        });
    }

    // Rule-driven starts may run past the sampled end; the case then lasts
    // until shortly after the last start.
    if let Some(last) = drafts.iter().map(|d| d.start_s).max() {
        duration_s = duration_s.max(last + 30);
    }
    let mut events: Vec<(ActivityEvent, TraceEvent)> = drafts
        .into_iter()
        .map(|d| {
            let end_s = match d.duration {
                DurationSpec::UntilEnd => duration_s,
                DurationSpec::Minutes(t) => (d.start_s + minutes_to_s(t.sample(rng))).min(duration_s),
            };
            let event = ActivityEvent {
                label_id: d.label,
                start_s: d.start_s,
                end_s,
            };
            let trace = TraceEvent {
                activity: catalog.labels()[d.label].clone(),
                label_id: d.label,
                start_s: d.start_s,
                end_s,
                source: d.source,
            };
            (event, trace)
        })
        .collect();
    events.sort_by_key(|(e, _)| (e.start_s, e.label_id));

    // FiO2 follows the latest-declared rule whose activity has started.
    for rec in &mut vitals {
        let mut level = vm.fio2_default.clone();
        for rule in &vm.fio2_rules {
            let id = label(&rule.activity);
            if events.iter().any(|(e, _)| e.label_id == id && e.start_s <= rec.t_s) {
                level = rule.level.clone();
            }
        }
        rec.fio2 = Some(level);
    }

    // Missingness is applied last so rules see complete values.
    let mut static_ctx = static_raw;
    for field in STATIC_NUMERIC {
        let slot = static_ctx.numeric_mut(field).expect("known field");
        *slot = slot.and_then(|v| maybe(rng, sm.missing_rate, v));
    }
    if rng.random_bool(sm.missing_rate) {
        static_ctx.injury_type = None;
    }
    for rec in &mut vitals {
        for field in DYNAMIC_NUMERIC {
            let slot = rec.numeric_mut(field).expect("known field");
            *slot = slot.and_then(|v| maybe(rng, vm.missing_rate, v));
        }
        if rng.random_bool(vm.missing_rate) {
            rec.fio2 = None;
        }
    }

    let (events, trace_events): (Vec<_>, Vec<_>) = events.into_iter().unzip();
    let case = CaseLog {
        case_id: case_id.to_string(),
        static_ctx,
        vitals,
        events,
        duration_s,
    };
    let case = validate_case(case, &catalog)?;
    let trace = GroundTruthTrace {
        case_id: case_id.to_string(),
        unstable,
        onset_s,
        modifiers,
        events: trace_events,
    };
    Ok((case, trace))
}

/// A generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub cases: Vec<CaseLog>,
    pub traces: Vec<GroundTruthTrace>,
}

/// `n_cases` independent cases; case `i` draws from its own stream of the
/// seeded generator, so any case can be regenerated alone.
pub fn generate_dataset(scenario: &ScenarioConfig, n_cases: usize, seed: u64) -> Result<Corpus> {
    scenario.validate()?;
    if n_cases < 3 {
        return Err(Error::InvalidArgument {
            arg: "n_cases",
            reason: format!("need at least 3 cases, got {n_cases}"),
        });
    }
    let manifest = scenario.manifest()?;
    let mut cases = Vec::with_capacity(n_cases);
    let mut traces = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let mut rng = case_rng(seed, i as u64);
        let (case, trace) = generate_case(scenario, &case_id(i), &mut rng)?;
        let case = manifest.validate_case(case)?;
        cases.push(case);
        traces.push(trace);
    }
    Ok(Corpus {
        manifest,
        cases,
        traces,
    })
}

impl Corpus {
    /// Writes `manifest.json`, `cases/<id>.json` and `traces.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let cases_dir = dir.join("cases");
        std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
        self.manifest.save(dir.join("manifest.json"))?;
        for case in &self.cases {
            case.save(cases_dir.join(format!("{}.json", case.case_id)))?;
        }
        let path = dir.join("traces.json");
        let text = serde_json::to_string(&self.traces)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a corpus directory; `traces.json` is optional.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir.join("manifest.json"))?;
        let cases_dir = dir.join("cases");
        let mut paths: Vec<_> = std::fs::read_dir(&cases_dir)
            .map_err(|e| Error::io(&cases_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let cases = paths
            .iter()
            .map(|p| manifest.validate_case(CaseLog::load(p)?))
            .collect::<Result<Vec<_>>>()?;
        let trace_path = dir.join("traces.json");
        let traces = if trace_path.exists() {
            let text = std::fs::read_to_string(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            serde_json::from_str(&text)?
        } else {
            Vec::new()
        };
        Ok(Self {
            manifest,
            cases,
            traces,
        })
    }
}
