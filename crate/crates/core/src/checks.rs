//! Check assignment per element type and check execution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DqaError, Result};
use crate::metadata::{frequency, ValueCount};
use crate::model::{
    CohortManifest, DataElement, ElementCategory, ElementRecord, ElementRegistry, ElementStatus,
    ElementStore, Month, Value, ValueKind,
};
use crate::stats::{box_stats, deciles, mean, median, sample_sd, BoxStats};

pub const DEFAULT_HISTOGRAM_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Conformance,
    Completeness,
    Plausibility,
}

impl CheckKind {
    pub const ALL: [CheckKind; 3] = [
        CheckKind::Conformance,
        CheckKind::Completeness,
        CheckKind::Plausibility,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Conformance => "conformance",
            CheckKind::Completeness => "completeness",
            CheckKind::Plausibility => "plausibility",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    UnitFrequency,
    SpecimenFrequency,
    ValueDeciles,
    StringFrequency,
    MarActionFrequency,
    RawNameFrequency,
    TotalCount,
    PatientProportion,
    PerPatientHistogram,
    MonthlyCounts,
    MonthlyValueBoxstats,
    MonthlyCategoryLines,
    MonthlyPerPatientBoxstats,
    Association,
}

impl Subtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::UnitFrequency => "unit_frequency",
            Subtype::SpecimenFrequency => "specimen_frequency",
            Subtype::ValueDeciles => "value_deciles",
            Subtype::StringFrequency => "string_frequency",
            Subtype::MarActionFrequency => "mar_action_frequency",
            Subtype::RawNameFrequency => "raw_name_frequency",
            Subtype::TotalCount => "total_count",
            Subtype::PatientProportion => "patient_proportion",
            Subtype::PerPatientHistogram => "per_patient_histogram",
            Subtype::MonthlyCounts => "monthly_counts",
            Subtype::MonthlyValueBoxstats => "monthly_value_boxstats",
            Subtype::MonthlyCategoryLines => "monthly_category_lines",
            Subtype::MonthlyPerPatientBoxstats => "monthly_per_patient_boxstats",
            Subtype::Association => "association",
        }
    }

    pub fn kind(self) -> CheckKind {
        use Subtype::*;
        match self {
            UnitFrequency | SpecimenFrequency | ValueDeciles | StringFrequency
            | MarActionFrequency | RawNameFrequency => CheckKind::Conformance,
            TotalCount | PatientProportion | PerPatientHistogram => CheckKind::Completeness,
            MonthlyCounts | MonthlyValueBoxstats | MonthlyCategoryLines
            | MonthlyPerPatientBoxstats | Association => CheckKind::Plausibility,
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const COMPLETENESS: [Subtype; 3] = [
    Subtype::TotalCount,
    Subtype::PatientProportion,
    Subtype::PerPatientHistogram,
];

/// Subtypes assigned to an element of the given type, in section order.
///
/// Orders, comorbidities and demographics use the encounter-level template.
pub fn subtypes_for(category: ElementCategory, kind: ValueKind) -> Vec<Subtype> {
    use Subtype::*;
    let (conformance, plausibility): (&[Subtype], &[Subtype]) = match (category, kind) {
        (ElementCategory::Analyte, ValueKind::Numeric) => (
            &[UnitFrequency, SpecimenFrequency, ValueDeciles],
            &[MonthlyCounts, MonthlyValueBoxstats],
        ),
        (ElementCategory::Analyte, ValueKind::Categorical) => (
            &[UnitFrequency, SpecimenFrequency, StringFrequency],
            &[MonthlyCounts, MonthlyCategoryLines],
        ),
        (ElementCategory::Medication, _) => (
            &[MarActionFrequency, RawNameFrequency],
            &[MonthlyCounts, MonthlyPerPatientBoxstats],
        ),
        (_, ValueKind::Numeric) => (&[ValueDeciles], &[MonthlyCounts, MonthlyValueBoxstats]),
        (_, ValueKind::Categorical) => (&[StringFrequency], &[MonthlyCounts, MonthlyCategoryLines]),
    };
    conformance
        .iter()
        .chain(COMPLETENESS.iter())
        .chain(plausibility.iter())
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub check_id: String,
    pub element_name: String,
    pub kind: CheckKind,
    pub subtype: Subtype,
}

impl CheckSpec {
    pub fn new(element_name: &str, subtype: Subtype) -> Self {
        CheckSpec {
            check_id: format!("{element_name}:{subtype}"),
            element_name: element_name.to_string(),
            kind: subtype.kind(),
            subtype,
        }
    }
}

/// Checks for every element that is not excluded, in registry order.
pub fn assign_checks(registry: &ElementRegistry) -> Vec<CheckSpec> {
    registry
        .iter()
        .filter(|e| e.status != ElementStatus::Excluded)
        .flat_map(|e| {
            subtypes_for(e.category, e.value_kind)
                .into_iter()
                .map(|s| CheckSpec::new(&e.name, s))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Split {
    Median,
    Threshold { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationSpec {
    pub factor_element: String,
    pub outcome_element: String,
    pub direction: Direction,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Median
}

impl AssociationSpec {
    pub fn check_id(&self) -> String {
        format!("{}:association:{}", self.factor_element, self.outcome_element)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraCheck {
    pub element_name: String,
    pub subtype: Subtype,
}

/// Optional overrides layered on the default assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    #[serde(default = "default_cap")]
    pub histogram_cap: usize,
    #[serde(default)]
    pub extra_checks: Vec<ExtraCheck>,
    #[serde(default)]
    pub associations: Vec<AssociationSpec>,
}

fn default_cap() -> usize {
    DEFAULT_HISTOGRAM_CAP
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            histogram_cap: DEFAULT_HISTOGRAM_CAP,
            extra_checks: Vec::new(),
            associations: Vec::new(),
        }
    }
}

impl CheckConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    /// Default assignment plus validated extra checks.
    pub fn specs(&self, registry: &ElementRegistry) -> Result<Vec<CheckSpec>> {
        if self.histogram_cap == 0 {
            return Err(DqaError::CheckConfig("histogram_cap must be positive".into()));
        }
        let mut specs = assign_checks(registry);
        let mut ids: BTreeSet<String> = specs.iter().map(|s| s.check_id.clone()).collect();
        for extra in &self.extra_checks {
            if registry.get(&extra.element_name).is_none() {
                return Err(DqaError::CheckConfig(format!(
                    "extra check on unknown element `{}`",
                    extra.element_name
                )));
            }
            if extra.subtype == Subtype::Association {
                return Err(DqaError::CheckConfig(
                    "association checks go in `associations`".into(),
                ));
            }
            let spec = CheckSpec::new(&extra.element_name, extra.subtype);
            if !ids.insert(spec.check_id.clone()) {
                return Err(DqaError::CheckConfig(format!("duplicate check `{}`", spec.check_id)));
            }
            specs.push(spec);
        }
        for a in &self.associations {
            for name in [&a.factor_element, &a.outcome_element] {
                if registry.get(name).is_none() {
                    return Err(DqaError::CheckConfig(format!(
                        "association references unknown element `{name}`"
                    )));
                }
            }
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Ok,
    Warning,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub label: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthCount {
    pub month: Month,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthBox {
    pub month: Month,
    pub stats: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryLine {
    pub category: String,
    /// One count per cohort month.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub patients: u64,
    pub with_outcome: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Frequency {
        total: u64,
        rows: Vec<ValueCount>,
    },
    Deciles {
        numeric: u64,
        non_numeric: u64,
        missing: u64,
        mean: Option<f64>,
        /// Sample standard deviation; needs two values.
        sd: Option<f64>,
        values: Option<[f64; 11]>,
    },
    Count {
        count: u64,
    },
    Proportion {
        patients: u64,
        denominator: u64,
        proportion: f64,
    },
    Histogram {
        cap: usize,
        bins: Vec<HistogramBin>,
    },
    MonthlyCounts {
        series: Vec<MonthCount>,
    },
    MonthlyBoxStats {
        series: Vec<MonthBox>,
    },
    MonthlyCategoryLines {
        months: Vec<Month>,
        lines: Vec<CategoryLine>,
    },
    Association {
        factor_element: String,
        outcome_element: String,
        direction: Direction,
        split_value: Option<f64>,
        high: Option<GroupRate>,
        low: Option<GroupRate>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: String,
    pub element_name: String,
    pub kind: CheckKind,
    pub subtype: Subtype,
    pub status: CheckStatus,
    pub payload: Payload,
}

/// Runs `specs` against the store. Results are ordered by element name and
/// then check id.
pub fn run_checks(
    store: &ElementStore,
    specs: &[CheckSpec],
    manifest: &CohortManifest,
    histogram_cap: usize,
) -> Vec<CheckResult> {
    let by_element = store.by_element();
    let mut per_element: BTreeMap<&str, Vec<&CheckSpec>> = BTreeMap::new();
    for s in specs {
        per_element.entry(s.element_name.as_str()).or_default().push(s);
    }
    let months = manifest.months();
    let jobs: Vec<(&str, Vec<&CheckSpec>)> = per_element.into_iter().collect();
    let mut results: Vec<CheckResult> = jobs
        .into_par_iter()
        .flat_map_iter(|(name, specs)| {
            let records: &[&ElementRecord] = by_element.get(name).map(Vec::as_slice).unwrap_or(&[]);
            let ctx = Ctx {
                records,
                manifest,
                months: &months,
                cap: histogram_cap.max(1),
            };
            specs.into_iter().map(move |s| ctx.run(s)).collect::<Vec<_>>()
        })
        .collect();
    results.sort_by(|a, b| {
        (a.element_name.as_str(), a.check_id.as_str()).cmp(&(b.element_name.as_str(), b.check_id.as_str()))
    });
    results
}

struct Ctx<'a> {
    records: &'a [&'a ElementRecord],
    manifest: &'a CohortManifest,
    months: &'a [Month],
    cap: usize,
}

impl Ctx<'_> {
    fn run(&self, spec: &CheckSpec) -> CheckResult {
        let (payload, status) = self.payload(spec.subtype);
        let status = if self.records.is_empty() { CheckStatus::Empty } else { status };
        CheckResult {
            check_id: spec.check_id.clone(),
            element_name: spec.element_name.clone(),
            kind: spec.kind,
            subtype: spec.subtype,
            status,
            payload,
        }
    }

    fn freq<'b>(&self, labels: impl Iterator<Item = &'b str>) -> Payload {
        let rows = frequency(labels);
        Payload::Frequency {
            total: self.records.len() as u64,
            rows,
        }
    }

    fn month_index(&self, r: &ElementRecord) -> Option<usize> {
        let m = Month::of_instant(r.source.event_time()?);
        self.months.binary_search(&m).ok()
    }

    fn payload(&self, subtype: Subtype) -> (Payload, CheckStatus) {
        const MISSING: &str = "MISSING";
        let recs = self.records;
        let ok = CheckStatus::Ok;
        match subtype {
            Subtype::UnitFrequency => {
                let p = self.freq(recs.iter().map(|r| r.unit.as_deref().unwrap_or(MISSING)));
                let Payload::Frequency { rows, .. } = &p else { unreachable!() };
                let units = rows.iter().filter(|r| r.value != MISSING).count();
                (p, if units > 1 { CheckStatus::Warning } else { ok })
            }
            Subtype::SpecimenFrequency => (
                self.freq(recs.iter().map(|r| {
                    r.source.specimen_source.as_deref().filter(|s| !s.is_empty()).unwrap_or(MISSING)
                })),
                ok,
            ),
            Subtype::MarActionFrequency => (
                self.freq(recs.iter().map(|r| {
                    r.source.mar_action.as_deref().filter(|s| !s.is_empty()).unwrap_or(MISSING)
                })),
                ok,
            ),
            Subtype::RawNameFrequency => (
                self.freq(recs.iter().map(|r| r.source.source_name.as_str())),
                ok,
            ),
            Subtype::StringFrequency => {
                let labels: Vec<String> = recs.iter().map(|r| r.value.label()).collect();
                (self.freq(labels.iter().map(String::as_str)), ok)
            }
            Subtype::ValueDeciles => {
                let nums: Vec<f64> = recs.iter().filter_map(|r| r.value.as_number()).collect();
                let missing = recs.iter().filter(|r| r.value.is_missing()).count() as u64;
                let non_numeric = recs.len() as u64 - nums.len() as u64 - missing;
                let status = if non_numeric > 0 { CheckStatus::Warning } else { ok };
                (
                    Payload::Deciles {
                        numeric: nums.len() as u64,
                        non_numeric,
                        missing,
                        mean: mean(&nums),
                        sd: sample_sd(&nums),
                        values: deciles(&nums),
                    },
                    status,
                )
            }
            Subtype::TotalCount => (Payload::Count { count: recs.len() as u64 }, ok),
            Subtype::PatientProportion => {
                let patients: BTreeSet<&str> = recs
                    .iter()
                    .map(|r| r.source.patient_id.as_str())
                    .filter(|p| self.manifest.patient_ids.contains(*p))
                    .collect();
                let denominator = self.manifest.patient_count() as u64;
                let proportion = if denominator == 0 {
                    0.0
                } else {
                    patients.len() as f64 / denominator as f64
                };
                (
                    Payload::Proportion {
                        patients: patients.len() as u64,
                        denominator,
                        proportion,
                    },
                    ok,
                )
            }
            Subtype::PerPatientHistogram => {
                let mut per_patient: BTreeMap<&str, usize> = self
                    .manifest
                    .patient_ids
                    .iter()
                    .map(|p| (p.as_str(), 0))
                    .collect();
                for r in recs {
                    if let Some(c) = per_patient.get_mut(r.source.patient_id.as_str()) {
                        *c += 1;
                    }
                }
                let mut counts = vec![0u64; self.cap + 1];
                for c in per_patient.values() {
                    counts[(*c).min(self.cap)] += 1;
                }
                let bins = counts
                    .into_iter()
                    .enumerate()
                    .map(|(i, count)| HistogramBin {
                        label: if i == self.cap { format!("{i}+") } else { i.to_string() },
                        count,
                    })
                    .collect();
                (Payload::Histogram { cap: self.cap, bins }, ok)
            }
            Subtype::MonthlyCounts => {
                let mut counts = vec![0u64; self.months.len()];
                for r in recs {
                    if let Some(i) = self.month_index(r) {
                        counts[i] += 1;
                    }
                }
                let series = self
                    .months
                    .iter()
                    .zip(counts)
                    .map(|(m, count)| MonthCount { month: *m, count })
                    .collect();
                (Payload::MonthlyCounts { series }, ok)
            }
            Subtype::MonthlyValueBoxstats => {
                let mut buckets = vec![Vec::new(); self.months.len()];
                for r in recs {
                    if let (Some(i), Some(x)) = (self.month_index(r), r.value.as_number()) {
                        buckets[i].push(x);
                    }
                }
                (self.box_series(buckets), ok)
            }
            Subtype::MonthlyPerPatientBoxstats => {
                let mut buckets: Vec<BTreeMap<&str, u64>> = vec![BTreeMap::new(); self.months.len()];
                for r in recs {
                    if let Some(i) = self.month_index(r) {
                        *buckets[i].entry(r.source.patient_id.as_str()).or_default() += 1;
                    }
                }
                let buckets = buckets
                    .into_iter()
                    .map(|b| b.into_values().map(|c| c as f64).collect())
                    .collect();
                (self.box_series(buckets), ok)
            }
            Subtype::MonthlyCategoryLines => {
                let mut lines: BTreeMap<String, Vec<u64>> = BTreeMap::new();
                for r in recs {
                    if let Some(i) = self.month_index(r) {
                        lines
                            .entry(r.value.label())
                            .or_insert_with(|| vec![0; self.months.len()])[i] += 1;
                    }
                }
                let lines = lines
                    .into_iter()
                    .map(|(category, counts)| CategoryLine { category, counts })
                    .collect();
                (
                    Payload::MonthlyCategoryLines {
                        months: self.months.to_vec(),
                        lines,
                    },
                    ok,
                )
            }
            Subtype::Association => (
                Payload::Count { count: recs.len() as u64 },
                CheckStatus::Empty,
            ),
        }
    }

    fn box_series(&self, buckets: Vec<Vec<f64>>) -> Payload {
        Payload::MonthlyBoxStats {
            series: self
                .months
                .iter()
                .zip(buckets)
                .map(|(m, b)| MonthBox {
                    month: *m,
                    stats: box_stats(&b),
                })
                .collect(),
        }
    }
}

/// Per-patient factor values: the mean of numeric values, or 1/0 presence
/// over the whole cohort when the factor has no numeric values.
fn factor_values(
    element: &DataElement,
    records: &[&ElementRecord],
    manifest: &CohortManifest,
) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
    for r in records {
        let x = match &r.value {
            Value::Number(x) => Some(*x),
            Value::Text(s) if element.value_kind == ValueKind::Categorical => crate::model::parse_numeric(s),
            _ => None,
        };
        if let Some(x) = x {
            let e = sums.entry(r.source.patient_id.as_str()).or_default();
            e.0 += x;
            e.1 += 1;
        }
    }
    if !sums.is_empty() {
        return sums
            .into_iter()
            .filter(|(p, _)| manifest.patient_ids.contains(*p))
            .map(|(p, (s, n))| (p.to_string(), s / n as f64))
            .collect();
    }
    let present: BTreeSet<&str> = records.iter().map(|r| r.source.patient_id.as_str()).collect();
    manifest
        .patient_ids
        .iter()
        .map(|p| (p.clone(), if present.contains(p.as_str()) { 1.0 } else { 0.0 }))
        .collect()
}

/// Outcome rate on each side of the factor split. A patient has the
/// outcome when they have at least one non-missing outcome record.
pub fn run_association(
    store: &ElementStore,
    registry: &ElementRegistry,
    spec: &AssociationSpec,
    manifest: &CohortManifest,
) -> Result<CheckResult> {
    let factor = registry.get(&spec.factor_element).ok_or_else(|| {
        DqaError::CheckConfig(format!("unknown factor element `{}`", spec.factor_element))
    })?;
    if registry.get(&spec.outcome_element).is_none() {
        return Err(DqaError::CheckConfig(format!(
            "unknown outcome element `{}`",
            spec.outcome_element
        )));
    }
    let by_element = store.by_element();
    let empty = Vec::new();
    let factor_recs = by_element.get(spec.factor_element.as_str()).unwrap_or(&empty);
    let outcome_recs = by_element.get(spec.outcome_element.as_str()).unwrap_or(&empty);
    let values = factor_values(factor, factor_recs, manifest);
    let with_outcome: BTreeSet<&str> = outcome_recs
        .iter()
        .filter(|r| !r.value.is_missing())
        .map(|r| r.source.patient_id.as_str())
        .collect();

    let split_value = match spec.split {
        Split::Threshold { value } => Some(value),
        Split::Median => median(&values.values().copied().collect::<Vec<_>>()),
    };
    let mut high = (0u64, 0u64);
    let mut low = (0u64, 0u64);
    if let Some(t) = split_value {
        for (p, x) in &values {
            let side = if *x > t { &mut high } else { &mut low };
            side.0 += 1;
            side.1 += u64::from(with_outcome.contains(p.as_str()));
        }
    }
    let rate = |(n, k): (u64, u64)| GroupRate {
        patients: n,
        with_outcome: k,
        rate: if n == 0 { 0.0 } else { k as f64 / n as f64 },
    };
    let (status, high, low) = if high.0 < 2 || low.0 < 2 {
        (CheckStatus::Empty, None, None)
    } else {
        let (h, l) = (rate(high), rate(low));
        // Cross-multiplied so equal rates compare exactly.
        let lhs = u128::from(high.1) * u128::from(low.0);
        let rhs = u128::from(low.1) * u128::from(high.0);
        let contradicts = match spec.direction {
            Direction::Positive => lhs < rhs,
            Direction::Negative => lhs > rhs,
        };
        let status = if contradicts { CheckStatus::Warning } else { CheckStatus::Ok };
        (status, Some(h), Some(l))
    };
    Ok(CheckResult {
        check_id: spec.check_id(),
        element_name: spec.factor_element.clone(),
        kind: CheckKind::Plausibility,
        subtype: Subtype::Association,
        status,
        payload: Payload::Association {
            factor_element: spec.factor_element.clone(),
            outcome_element: spec.outcome_element.clone(),
            direction: spec.direction,
            split_value,
            high,
            low,
        },
    })
}

/// Default checks, extras and associations for the whole registry.
pub fn run_all(
    store: &ElementStore,
    registry: &ElementRegistry,
    manifest: &CohortManifest,
    config: &CheckConfig,
) -> Result<Vec<CheckResult>> {
    let specs = config.specs(registry)?;
    let mut results = run_checks(store, &specs, manifest, config.histogram_cap);
    for a in &config.associations {
        results.push(run_association(store, registry, a, manifest)?);
    }
    results.sort_by(|a, b| {
        (a.element_name.as_str(), a.check_id.as_str()).cmp(&(b.element_name.as_str(), b.check_id.as_str()))
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Locator, ObservationRecord, TimestampRole};
    use chrono::{NaiveDate, TimeZone, Utc};

    fn manifest(n: usize, start: (i32, u32), end: (i32, u32, u32)) -> CohortManifest {
        CohortManifest {
            project_name: "t".into(),
            patient_ids: (0..n).map(|i| format!("p{i}")).collect(),
            start_date: NaiveDate::from_ymd_opt(start.0, start.1, 1).unwrap(),
            end_date: NaiveDate::from_ymd_opt(end.0, end.1, end.2).unwrap(),
            inclusion_note: String::new(),
        }
    }

    fn rec(element: &str, patient: &str, month: u32, value: Value) -> ElementRecord {
        let mut timestamps = BTreeMap::new();
        timestamps.insert(
            TimestampRole::Result,
            Utc.with_ymd_and_hms(2020, month, 15, 12, 0, 0).unwrap(),
        );
        ElementRecord {
            element: element.into(),
            value,
            unit: None,
            flags: vec![],
            source: ObservationRecord {
                locator: Locator::new("a.csv", 2),
                patient_id: patient.into(),
                encounter_id: None,
                category: ElementCategory::Analyte,
                source_id: "1".into(),
                source_name: element.into(),
                value_raw: String::new(),
                unit_raw: None,
                specimen_source: None,
                mar_action: None,
                route: None,
                timestamps,
            },
        }
    }

    #[test]
    fn per_type_counts() {
        use ElementCategory::*;
        use ValueKind::*;
        let expected = [
            (Analyte, Numeric, 8),
            (Analyte, Categorical, 8),
            (Flowsheet, Numeric, 6),
            (Flowsheet, Categorical, 6),
            (Medication, Categorical, 7),
            (Encounter, Numeric, 6),
            (Encounter, Categorical, 6),
        ];
        for (c, k, n) in expected {
            assert_eq!(subtypes_for(c, k).len(), n, "{c} {k:?}");
        }
        let med = subtypes_for(Medication, Categorical);
        assert_eq!(med.iter().filter(|s| s.kind() == CheckKind::Conformance).count(), 2);
        assert!(med.contains(&Subtype::MarActionFrequency));
        assert!(assign_checks(&ElementRegistry::new()).is_empty());
    }

    #[test]
    fn proportion_uses_manifest_denominator() {
        let m = manifest(5, (2020, 1), (2020, 6, 30));
        let store = ElementStore::seal(vec![
            rec("g", "p0", 1, Value::Number(1.0)),
            rec("g", "p0", 2, Value::Number(2.0)),
            rec("g", "p1", 2, Value::Number(3.0)),
            rec("g", "p2", 3, Value::Number(4.0)),
        ]);
        let specs = vec![
            CheckSpec::new("g", Subtype::PatientProportion),
            CheckSpec::new("g", Subtype::MonthlyCounts),
            CheckSpec::new("g", Subtype::PerPatientHistogram),
        ];
        let results = run_checks(&store, &specs, &m, 50);
        let by_sub: BTreeMap<Subtype, &CheckResult> = results.iter().map(|r| (r.subtype, r)).collect();
        let Payload::Proportion { proportion, .. } = by_sub[&Subtype::PatientProportion].payload else { panic!() };
        assert_eq!(proportion, 0.6);
        let Payload::MonthlyCounts { series } = &by_sub[&Subtype::MonthlyCounts].payload else { panic!() };
        let counts: Vec<u64> = series.iter().map(|s| s.count).collect();
        assert_eq!(counts, vec![1, 2, 1, 0, 0, 0]);
        let Payload::Histogram { bins, .. } = &by_sub[&Subtype::PerPatientHistogram].payload else { panic!() };
        assert_eq!(bins.len(), 51);
        assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), 5);
        assert_eq!((bins[0].count, bins[1].count, bins[2].count), (2, 2, 1));
        assert_eq!(bins[50].label, "50+");
    }

    #[test]
    fn empty_element_gives_empty_status() {
        let m = manifest(3, (2020, 1), (2020, 2, 28));
        let reg = ElementRegistry::from_elements([DataElement::new("x", ElementCategory::Medication, ValueKind::Categorical)]).unwrap();
        let results = run_checks(&ElementStore::default(), &assign_checks(&reg), &m, 50);
        assert_eq!(results.len(), 7);
        assert!(results.iter().all(|r| r.status == CheckStatus::Empty));
    }

    #[test]
    fn unit_mix_warns() {
        let m = manifest(1, (2020, 1), (2020, 1, 31));
        let mut a = rec("g", "p0", 1, Value::Number(1.0));
        a.unit = Some("mg/dL".into());
        let mut b = rec("g", "p0", 1, Value::Number(1.0));
        b.unit = Some("mmol/L".into());
        let r = run_checks(&ElementStore::seal(vec![a, b]), &[CheckSpec::new("g", Subtype::UnitFrequency)], &m, 50);
        assert_eq!(r[0].status, CheckStatus::Warning);
    }
}
