//! Synthetic cohorts with injected, ledgered data-quality flaws.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{DqaError, Result};
use crate::ingest::OBSERVATION_COLUMNS;
use crate::model::{CohortManifest, ElementCategory, Locator, Month, TimestampRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedValue {
    pub value: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ValueDist {
    Normal { mean: f64, sd: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Categorical { values: Vec<WeightedValue> },
}

/// An alternative unit drawn with the given probability; the value is
/// multiplied by `factor` when it is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitShare {
    pub unit: String,
    pub proportion: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementGen {
    pub source_id: String,
    pub source_name: String,
    pub category: ElementCategory,
    pub value: ValueDist,
    /// Mean records per patient (Poisson).
    pub rate: f64,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub alt_units: Vec<UnitShare>,
    #[serde(default = "default_decimals")]
    pub decimals: usize,
    #[serde(default)]
    pub specimen_source: Option<String>,
    #[serde(default)]
    pub mar_action: Option<String>,
    #[serde(default)]
    pub route: Option<String>,
}

fn default_decimals() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlawKind {
    Sentinel,
    UnitMix,
    SpecimenContamination,
    OutOfRangeStrings,
    TypoUnits,
    DropoutAfterMonth,
    CompositeStrings,
    HeldActions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlawParams {
    /// Sentinel literal, or the number written after the comparator.
    #[serde(default)]
    pub value: Option<String>,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub factor: Option<f64>,
    #[serde(default)]
    pub specimen: Option<String>,
    #[serde(default)]
    pub comparator: Option<String>,
    #[serde(default)]
    pub month: Option<Month>,
    #[serde(default)]
    pub action: Option<String>,
    /// Second part of a composite as a fraction of the first.
    #[serde(default)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flaw {
    pub kind: FlawKind,
    /// Source id of the targeted element generator.
    pub element: String,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub params: FlawParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_project")]
    pub project_name: String,
    pub patients: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub seed: Option<u64>,
    #[serde(default = "default_file")]
    pub file_name: String,
    pub elements: Vec<ElementGen>,
    #[serde(default)]
    pub flaws: Vec<Flaw>,
}

fn default_project() -> String {
    "synthetic".into()
}

fn default_file() -> String {
    "observations.csv".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: FlawKind,
    pub element: String,
    /// Absent for dropout entries, which cover suppressed records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locator: Option<Locator>,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub csv: String,
    pub ledger: Vec<LedgerEntry>,
    pub manifest: CohortManifest,
}

impl SynthOutput {
    /// Writes the observation CSV, `ledger.jsonl` and `manifest.json`.
    pub fn write(&self, dir: &Path, file_name: &str) -> Result<()> {
        crate::io::write_text(&dir.join(file_name), &self.csv)?;
        crate::io::write_jsonl(&dir.join("ledger.jsonl"), &self.ledger)?;
        crate::io::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn ledger_count(&self, kind: FlawKind) -> u64 {
        self.ledger.iter().filter(|e| e.kind == kind).map(|e| e.count).sum()
    }
}

fn bad(field: &str, message: impl Into<String>) -> DqaError {
    DqaError::SynthSpec {
        field: field.to_string(),
        message: message.into(),
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn validate(&self) -> Result<u64> {
        let seed = self.seed.ok_or_else(|| bad("seed", "a seed is required"))?;
        if self.patients == 0 {
            return Err(bad("patients", "must be positive"));
        }
        if self.start_date > self.end_date {
            return Err(bad("end_date", "must not precede start_date"));
        }
        let mut ids = BTreeSet::new();
        for (i, e) in self.elements.iter().enumerate() {
            let f = |name: &str| format!("elements[{i}].{name}");
            if e.source_id.trim().is_empty() || !ids.insert(e.source_id.as_str()) {
                return Err(bad(&f("source_id"), "must be non-empty and unique"));
            }
            if [&e.source_id, &e.source_name].iter().any(|s| s.contains(['\n', '\r'])) {
                return Err(bad(&f("source_name"), "must be a single line"));
            }
            if !(e.rate.is_finite() && e.rate >= 0.0) {
                return Err(bad(&f("rate"), "must be a finite non-negative mean"));
            }
            let share: f64 = e.alt_units.iter().map(|u| u.proportion).sum();
            if e.alt_units.iter().any(|u| !(0.0..=1.0).contains(&u.proportion)) || share > 1.0 {
                return Err(bad(&f("alt_units"), "proportions must lie in [0,1] and sum to at most 1"));
            }
            match &e.value {
                ValueDist::Normal { sd, .. } if !(*sd >= 0.0) => return Err(bad(&f("value.sd"), "must be >= 0")),
                ValueDist::Lognormal { sigma, .. } if !(*sigma >= 0.0) => {
                    return Err(bad(&f("value.sigma"), "must be >= 0"))
                }
                ValueDist::Categorical { values }
                    if values.is_empty() || values.iter().any(|w| !(w.weight >= 0.0)) || values.iter().all(|w| w.weight == 0.0) =>
                {
                    return Err(bad(&f("value.values"), "need non-negative weights with a positive total"))
                }
                _ => {}
            }
        }
        for (i, fl) in self.flaws.iter().enumerate() {
            let f = |name: &str| format!("flaws[{i}].{name}");
            if !ids.contains(fl.element.as_str()) {
                return Err(bad(&f("element"), format!("no element with source_id `{}`", fl.element)));
            }
            if !(0.0..=1.0).contains(&fl.rate) {
                return Err(bad(&f("rate"), "must lie in [0,1]"));
            }
            let p = &fl.params;
            match fl.kind {
                FlawKind::UnitMix if p.unit.is_none() || p.factor.is_none() => {
                    return Err(bad(&f("params"), "unit_mix needs unit and factor"))
                }
                FlawKind::TypoUnits if p.unit.is_none() => return Err(bad(&f("params.unit"), "required")),
                FlawKind::DropoutAfterMonth if p.month.is_none() => {
                    return Err(bad(&f("params.month"), "required"))
                }
                FlawKind::OutOfRangeStrings
                    if p.comparator.as_deref().is_some_and(|c| !matches!(c, ">" | "<" | ">=" | "<=")) =>
                {
                    return Err(bad(&f("params.comparator"), "must be one of > < >= <="))
                }
                _ => {}
            }
        }
        Ok(seed)
    }
}

struct Row {
    patient: usize,
    gen: usize,
    at: DateTime<Utc>,
    value: String,
    unit: Option<String>,
    specimen: Option<String>,
    mar_action: Option<String>,
}

fn time_role(category: ElementCategory) -> TimestampRole {
    match category {
        ElementCategory::Order => TimestampRole::Order,
        c => c.required_roles().first().copied().unwrap_or(TimestampRole::Admission),
    }
}

fn fmt_value(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Builds the cohort. Output depends only on the synth spec and its seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    let seed = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patient_ids: Vec<String> = (1..=spec.patients).map(|i| format!("P{i:05}")).collect();
    let start = Utc.from_utc_datetime(&spec.start_date.and_hms_opt(0, 0, 0).expect("midnight"));
    let span = (spec.end_date - spec.start_date).num_seconds() + 86_399;

    let mut rows = Vec::new();
    for (gi, g) in spec.elements.iter().enumerate() {
        let poisson = (g.rate > 0.0)
            .then(|| Poisson::new(g.rate).map_err(|e| bad("rate", e.to_string())))
            .transpose()?;
        let unit_pick = if g.alt_units.is_empty() {
            None
        } else {
            let rest = 1.0 - g.alt_units.iter().map(|u| u.proportion).sum::<f64>();
            let weights: Vec<f64> = std::iter::once(rest.max(0.0)).chain(g.alt_units.iter().map(|u| u.proportion)).collect();
            Some(WeightedIndex::new(weights).map_err(|e| bad("alt_units", e.to_string()))?)
        };
        for p in 0..spec.patients {
            let n = poisson.map_or(0, |d| d.sample(&mut rng) as u64);
            for _ in 0..n {
                let at = start + Duration::seconds(rng.gen_range(0..=span));
                let (mut x, label) = match &g.value {
                    ValueDist::Normal { mean, sd } => (
                        Normal::new(*mean, *sd).map_err(|e| bad("value", e.to_string()))?.sample(&mut rng),
                        None,
                    ),
                    ValueDist::Lognormal { mu, sigma } => (
                        LogNormal::new(*mu, *sigma).map_err(|e| bad("value", e.to_string()))?.sample(&mut rng),
                        None,
                    ),
                    ValueDist::Categorical { values } => {
                        let w = WeightedIndex::new(values.iter().map(|v| v.weight))
                            .map_err(|e| bad("value", e.to_string()))?;
                        (0.0, Some(values[w.sample(&mut rng)].value.clone()))
                    }
                };
                let mut unit = g.unit.clone();
                if let Some(pick) = &unit_pick {
                    let k = pick.sample(&mut rng);
                    if k > 0 {
                        let share = &g.alt_units[k - 1];
                        x *= share.factor;
                        unit = Some(share.unit.clone());
                    }
                }
                rows.push(Row {
                    patient: p,
                    gen: gi,
                    at,
                    value: label.unwrap_or_else(|| fmt_value(x, g.decimals)),
                    unit,
                    specimen: g.specimen_source.clone(),
                    mar_action: match g.category {
                        ElementCategory::Medication => Some(g.mar_action.clone().unwrap_or_else(|| "Given".into())),
                        _ => g.mar_action.clone(),
                    },
                });
            }
        }
    }

    let mut ledger = Vec::new();
    for fl in spec.flaws.iter().filter(|f| f.kind == FlawKind::DropoutAfterMonth) {
        let gi = spec.elements.iter().position(|g| g.source_id == fl.element).expect("validated");
        let cutoff = fl.params.month.expect("validated");
        let before = rows.len();
        rows.retain(|r| !(r.gen == gi && Month::of_instant(r.at) > cutoff));
        ledger.push(LedgerEntry {
            kind: FlawKind::DropoutAfterMonth,
            element: fl.element.clone(),
            locator: None,
            count: (before - rows.len()) as u64,
            original: Some(cutoff.to_string()),
        });
    }

    rows.sort_by(|a, b| (a.at, a.patient, a.gen).cmp(&(b.at, b.patient, b.gen)));

    let per_record: Vec<(usize, &Flaw)> = spec
        .flaws
        .iter()
        .filter(|f| f.kind != FlawKind::DropoutAfterMonth)
        .map(|f| (spec.elements.iter().position(|g| g.source_id == f.element).expect("validated"), f))
        .collect();
    let mut record_ledger = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        let locator = Locator::new(spec.file_name.clone(), i as u64 + 2);
        let g = &spec.elements[row.gen];
        for (gi, fl) in &per_record {
            if *gi != row.gen || !rng.gen_bool(fl.rate) {
                continue;
            }
            let original = row.value.clone();
            let p = &fl.params;
            let applied = match fl.kind {
                FlawKind::Sentinel => {
                    row.value = p.value.clone().unwrap_or_else(|| "999999".into());
                    true
                }
                FlawKind::UnitMix => match original.parse::<f64>() {
                    Ok(x) => {
                        row.value = fmt_value(x * p.factor.expect("validated"), g.decimals.max(2));
                        row.unit = p.unit.clone();
                        true
                    }
                    Err(_) => false,
                },
                FlawKind::SpecimenContamination => {
                    row.specimen = Some(p.specimen.clone().unwrap_or_else(|| "Urine".into()));
                    true
                }
                FlawKind::OutOfRangeStrings => {
                    let cmp = p.comparator.clone().unwrap_or_else(|| ">".into());
                    let v = p.value.clone().unwrap_or_else(|| original.clone());
                    let unit = row.unit.clone().map(|u| format!(" {u}")).unwrap_or_default();
                    row.value = format!("{cmp}{v}{unit}");
                    true
                }
                FlawKind::TypoUnits => {
                    row.unit = p.unit.clone();
                    true
                }
                FlawKind::CompositeStrings => match original.parse::<f64>() {
                    Ok(x) => {
                        let second = (x * p.ratio.unwrap_or(0.65)).round();
                        row.value = format!("{}/{}", x.round(), second);
                        true
                    }
                    Err(_) => false,
                },
                FlawKind::HeldActions => {
                    row.mar_action = Some(p.action.clone().unwrap_or_else(|| "Held".into()));
                    true
                }
                FlawKind::DropoutAfterMonth => unreachable!(),
            };
            if applied {
                record_ledger.push(LedgerEntry {
                    kind: fl.kind,
                    element: fl.element.clone(),
                    locator: Some(locator.clone()),
                    count: 1,
                    original: Some(original),
                });
                break;
            }
        }
    }
    ledger.extend(record_ledger);

    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| DqaError::Invalid(format!("csv write: {e}"));
    w.write_record(OBSERVATION_COLUMNS).map_err(io_err)?;
    for row in &rows {
        let g = &spec.elements[row.gen];
        let role = time_role(g.category);
        let mut cells: Vec<String> = vec![
            patient_ids[row.patient].clone(),
            format!("E{:05}", row.patient + 1),
            g.category.as_str().to_string(),
            g.source_id.clone(),
            g.source_name.clone(),
            row.value.clone(),
            row.unit.clone().unwrap_or_default(),
            row.specimen.clone().unwrap_or_default(),
            row.mar_action.clone().unwrap_or_default(),
            g.route.clone().unwrap_or_default(),
        ];
        let stamp = row.at.format("%Y-%m-%dT%H:%M:%SZ").to_string();
        cells.extend(TimestampRole::ALL.iter().map(|r| if *r == role { stamp.clone() } else { String::new() }));
        w.write_record(&cells).map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| DqaError::Invalid(e.to_string()))?;
    let csv = String::from_utf8(bytes).map_err(|e| DqaError::Invalid(e.to_string()))?;

    let manifest = CohortManifest {
        project_name: spec.project_name.clone(),
        patient_ids: patient_ids.into_iter().collect(),
        start_date: spec.start_date,
        end_date: spec.end_date,
        inclusion_note: "synthetic cohort".into(),
    };
    Ok(SynthOutput { csv, ledger, manifest })
}

/// Ledger counts by kind, for quick scoring.
pub fn ledger_totals(ledger: &[LedgerEntry]) -> BTreeMap<FlawKind, u64> {
    let mut out = BTreeMap::new();
    for e in ledger {
        *out.entry(e.kind).or_default() += e.count;
    }
    out
}
