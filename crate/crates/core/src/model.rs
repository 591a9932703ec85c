//! Domain model shared by every stage of the workflow.
//!
//! Observations enter as [`ObservationRecord`]s inside a sealed
//! [`ObservationStore`]. Grouping resolves them onto canonical
//! [`DataElement`]s held in an [`ElementRegistry`], whose statuses are only
//! moved by the adjudication module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{DqaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementCategory {
    Analyte,
    Flowsheet,
    Medication,
    Encounter,
    Order,
    Comorbidity,
    Demographic,
}

impl ElementCategory {
    pub const ALL: [ElementCategory; 7] = [
        ElementCategory::Analyte,
        ElementCategory::Flowsheet,
        ElementCategory::Medication,
        ElementCategory::Encounter,
        ElementCategory::Order,
        ElementCategory::Comorbidity,
        ElementCategory::Demographic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementCategory::Analyte => "analyte",
            ElementCategory::Flowsheet => "flowsheet",
            ElementCategory::Medication => "medication",
            ElementCategory::Encounter => "encounter",
            ElementCategory::Order => "order",
            ElementCategory::Comorbidity => "comorbidity",
            ElementCategory::Demographic => "demographic",
        }
    }

    /// Name of the quality report that covers this category.
    pub fn report_name(self) -> &'static str {
        match self {
            ElementCategory::Analyte => "Analytes",
            ElementCategory::Flowsheet => "Flowsheets",
            ElementCategory::Medication => "Medications",
            ElementCategory::Encounter => "Encounters",
            ElementCategory::Order => "Orders",
            ElementCategory::Comorbidity => "Comorbidities",
            ElementCategory::Demographic => "Demographics",
        }
    }

    pub fn from_report_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.report_name() == name)
    }

    /// Timestamp roles that must be present on an ingested record. An empty
    /// slice means no timestamp is required; more than one entry means any of
    /// them suffices.
    pub fn required_roles(self) -> &'static [TimestampRole] {
        match self {
            ElementCategory::Analyte => &[TimestampRole::Result],
            ElementCategory::Flowsheet => &[TimestampRole::Measurement],
            ElementCategory::Medication => &[TimestampRole::Administration],
            ElementCategory::Encounter => &[TimestampRole::Admission, TimestampRole::EdArrival],
            _ => &[],
        }
    }
}

impl fmt::Display for ElementCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementCategory {
    type Err = DqaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| DqaError::Invalid(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Numeric,
    Categorical,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Numeric => "numeric",
            ValueKind::Categorical => "categorical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampRole {
    Order,
    Collection,
    Result,
    Measurement,
    Administration,
    EdArrival,
    Admission,
    Discharge,
}

impl TimestampRole {
    pub const ALL: [TimestampRole; 8] = [
        TimestampRole::Order,
        TimestampRole::Collection,
        TimestampRole::Result,
        TimestampRole::Measurement,
        TimestampRole::Administration,
        TimestampRole::EdArrival,
        TimestampRole::Admission,
        TimestampRole::Discharge,
    ];

    /// Column name in the observation CSV.
    pub fn column(self) -> &'static str {
        match self {
            TimestampRole::Order => "order_time",
            TimestampRole::Collection => "collection_time",
            TimestampRole::Result => "result_time",
            TimestampRole::Measurement => "measurement_time",
            TimestampRole::Administration => "administration_time",
            TimestampRole::EdArrival => "ed_arrival_time",
            TimestampRole::Admission => "admission_time",
            TimestampRole::Discharge => "discharge_time",
        }
    }
}

/// Where a record came from: input file name and 1-based physical line.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Locator {
    pub file: String,
    pub line: u64,
}

impl Locator {
    pub fn new(file: impl Into<String>, line: u64) -> Self {
        Locator {
            file: file.into(),
            line,
        }
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

impl FromStr for Locator {
    type Err = DqaError;

    fn from_str(s: &str) -> Result<Self> {
        let (file, line) = s
            .rsplit_once(':')
            .ok_or_else(|| DqaError::Invalid(format!("bad locator `{s}`")))?;
        let line = line
            .parse()
            .map_err(|_| DqaError::Invalid(format!("bad locator line in `{s}`")))?;
        Ok(Locator::new(file, line))
    }
}

impl Serialize for Locator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Locator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One raw fact from the source extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub locator: Locator,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encounter_id: Option<String>,
    pub category: ElementCategory,
    pub source_id: String,
    pub source_name: String,
    /// Empty string means missing.
    pub value_raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specimen_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mar_action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
    pub timestamps: BTreeMap<TimestampRole, DateTime<Utc>>,
}

impl ObservationRecord {
    /// The instant used for monthly bucketing: the category's required role
    /// if present, otherwise the first populated role in column order.
    pub fn event_time(&self) -> Option<DateTime<Utc>> {
        self.category
            .required_roles()
            .iter()
            .find_map(|r| self.timestamps.get(r).copied())
            .or_else(|| {
                TimestampRole::ALL
                    .iter()
                    .find_map(|r| self.timestamps.get(r).copied())
            })
    }
}

/// Immutable set of ingested observations.
///
/// Cloning shares the underlying records; there is no way to mutate them
/// once sealed. Transform stages build new stores.
#[derive(Debug, Clone, Default)]
pub struct ObservationStore {
    records: Arc<[ObservationRecord]>,
}

impl ObservationStore {
    pub fn seal(records: Vec<ObservationRecord>) -> Self {
        ObservationStore {
            records: records.into(),
        }
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_category(&self, category: ElementCategory) -> usize {
        self.records.iter().filter(|r| r.category == category).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub project_name: String,
    pub patient_ids: BTreeSet<String>,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    #[serde(default)]
    pub inclusion_note: String,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        if self.start_date > self.end_date {
            return Err(DqaError::Manifest(format!(
                "start_date {} is after end_date {}",
                self.start_date, self.end_date
            )));
        }
        if self.patient_ids.is_empty() {
            return Err(DqaError::Manifest("patient_ids is empty".into()));
        }
        if self.patient_ids.iter().any(|p| p.trim().is_empty()) {
            return Err(DqaError::Manifest("blank patient id".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DqaError::io(path, e))?;
        let manifest: CohortManifest =
            serde_json::from_str(&text).map_err(|e| DqaError::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn patient_count(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn contains_date(&self, date: NaiveDate) -> bool {
        self.start_date <= date && date <= self.end_date
    }

    /// Calendar months covered by the cohort, inclusive, as `YYYY-MM`.
    pub fn months(&self) -> Vec<Month> {
        let mut out = Vec::new();
        let mut m = Month::of(self.start_date);
        let last = Month::of(self.end_date);
        while m <= last {
            out.push(m);
            m = m.next();
        }
        out
    }
}

/// A UTC calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn of(date: NaiveDate) -> Self {
        Month {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn of_instant(t: DateTime<Utc>) -> Self {
        Month::of(t.date_naive())
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Month {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Month {
                year: self.year,
                month: self.month + 1,
            }
        }
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = DqaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DqaError::Invalid(format!("bad month `{s}`, expected YYYY-MM"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Month { year, month })
    }
}

impl Serialize for Month {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementStatus {
    Pending,
    FitForUse,
    NeedsRework,
    Excluded,
}

impl ElementStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementStatus::Pending => "pending",
            ElementStatus::FitForUse => "fit_for_use",
            ElementStatus::NeedsRework => "needs_rework",
            ElementStatus::Excluded => "excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataElement {
    pub name: String,
    pub category: ElementCategory,
    pub value_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_unit: Option<String>,
    pub status: ElementStatus,
}

impl DataElement {
    pub fn new(name: impl Into<String>, category: ElementCategory, value_kind: ValueKind) -> Self {
        DataElement {
            name: name.into(),
            category,
            value_kind,
            reference_unit: None,
            status: ElementStatus::Pending,
        }
    }

    pub fn with_reference_unit(mut self, unit: impl Into<String>) -> Self {
        self.reference_unit = Some(unit.into());
        self
    }
}

/// Canonical data elements keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElementRegistry {
    elements: BTreeMap<String, DataElement>,
}

impl ElementRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, element: DataElement) -> Result<()> {
        if element.value_kind == ValueKind::Categorical && element.reference_unit.is_some() {
            return Err(DqaError::Registry(format!(
                "categorical element `{}` cannot carry a reference unit",
                element.name
            )));
        }
        if self.elements.contains_key(&element.name) {
            return Err(DqaError::Registry(format!(
                "duplicate element name `{}`",
                element.name
            )));
        }
        self.elements.insert(element.name.clone(), element);
        Ok(())
    }

    pub fn from_elements(elements: impl IntoIterator<Item = DataElement>) -> Result<Self> {
        let mut reg = ElementRegistry::new();
        for e in elements {
            reg.insert(e)?;
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Option<&DataElement> {
        self.elements.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.elements.contains_key(name)
    }

    /// Elements in name order.
    pub fn iter(&self) -> impl Iterator<Item = &DataElement> {
        self.elements.values()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn in_category(&self, category: ElementCategory) -> impl Iterator<Item = &DataElement> {
        self.elements.values().filter(move |e| e.category == category)
    }

    pub fn count_status(&self, status: ElementStatus) -> usize {
        self.elements.values().filter(|e| e.status == status).count()
    }
}

/// Working value of a grouped observation as rules reshape it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Missing,
    Number(f64),
    Text(String),
    Composite(BTreeMap<String, f64>),
}

impl Value {
    /// Initial typed value for a raw cell, given the element's value kind.
    pub fn from_raw(raw: &str, kind: ValueKind) -> Value {
        if raw.trim().is_empty() {
            return Value::Missing;
        }
        match kind {
            ValueKind::Numeric => match parse_numeric(raw) {
                Some(x) => Value::Number(x),
                None => Value::Text(raw.to_string()),
            },
            ValueKind::Categorical => Value::Text(raw.to_string()),
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    /// String form used in frequency tables and the audit log.
    pub fn label(&self) -> String {
        match self {
            Value::Missing => "MISSING".to_string(),
            Value::Number(x) => format_number(*x),
            Value::Text(s) => s.clone(),
            Value::Composite(parts) => parts
                .iter()
                .map(|(k, v)| format!("{k}={}", format_number(*v)))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

/// An observation resolved onto a data element, with its working value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub element: String,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// Conformance flags raised by rules that passed the record through.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub source: ObservationRecord,
}

impl ElementRecord {
    pub fn locator(&self) -> &Locator {
        &self.source.locator
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub(crate) fn add_flag(&mut self, flag: impl Into<String>) {
        let flag = flag.into();
        if !self.has_flag(&flag) {
            self.flags.push(flag);
        }
    }
}

/// Sealed collection of element-tagged records. Grouping produces one and
/// every transform pass produces a new one.
#[derive(Debug, Clone, Default)]
pub struct ElementStore {
    records: Arc<[ElementRecord]>,
}

pub type GroupedStore = ElementStore;
pub type TransformedStore = ElementStore;

impl ElementStore {
    pub fn seal(records: Vec<ElementRecord>) -> Self {
        ElementStore {
            records: records.into(),
        }
    }

    pub fn records(&self) -> &[ElementRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records grouped by element name, each group in store order.
    pub fn by_element(&self) -> BTreeMap<&str, Vec<&ElementRecord>> {
        let mut out: BTreeMap<&str, Vec<&ElementRecord>> = BTreeMap::new();
        for r in self.records.iter() {
            out.entry(r.element.as_str()).or_default().push(r);
        }
        out
    }

    pub fn count_element(&self, element: &str) -> usize {
        self.records.iter().filter(|r| r.element == element).count()
    }
}

/// Shortest round-trip rendering without a trailing `.0` on integers.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Parses a numeric cell.
///
/// Accepts surrounding whitespace, an optional sign, and comma thousands
/// separators in well-formed groups of three. Exponents, `inf`, `nan` and
/// any other text are rejected.
pub fn parse_numeric(raw: &str) -> Option<f64> {
    let s = raw.trim();
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    if body.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    if let Some(f) = frac_part {
        if f.is_empty() && int_part.is_empty() {
            return None;
        }
        if !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    if int_part.contains(',') {
        let mut groups = int_part.split(',');
        let lead = groups.next()?;
        if lead.is_empty() || lead.len() > 3 || !lead.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        for g in groups {
            if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
        }
    } else if !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if int_part.is_empty() && frac_part.map_or(true, str::is_empty) {
        return None;
    }
    let cleaned: String = s.chars().filter(|c| *c != ',').collect();
    cleaned.parse::<f64>().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_parsing_accepts_whitespace_and_thousands() {
        assert_eq!(parse_numeric(" 600 "), Some(600.0));
        assert_eq!(parse_numeric("1,200"), Some(1200.0));
        assert_eq!(parse_numeric("-3.5"), Some(-3.5));
        assert_eq!(parse_numeric(".5"), Some(0.5));
        assert_eq!(parse_numeric("12,345,678.25"), Some(12_345_678.25));
    }

    #[test]
    fn numeric_parsing_rejects_everything_else() {
        for s in ["", " ", "NA", "1,2", "12,34", "1e5", "inf", "nan", ">600", "5 mg", "1.2.3", "-", "."] {
            assert_eq!(parse_numeric(s), None, "{s:?}");
        }
    }

    #[test]
    fn missing_is_empty_string_not_na() {
        assert_eq!(Value::from_raw("", ValueKind::Numeric), Value::Missing);
        assert_eq!(
            Value::from_raw("NA", ValueKind::Numeric),
            Value::Text("NA".into())
        );
    }

    #[test]
    fn cohort_months_are_contiguous() {
        let m = CohortManifest {
            project_name: "p".into(),
            patient_ids: ["a".to_string()].into(),
            start_date: NaiveDate::from_ymd_opt(2019, 11, 15).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2020, 2, 1).unwrap(),
            inclusion_note: String::new(),
        };
        let months: Vec<String> = m.months().iter().map(|m| m.to_string()).collect();
        assert_eq!(months, ["2019-11", "2019-12", "2020-01", "2020-02"]);
    }

    #[test]
    fn manifest_rejects_inverted_dates() {
        let m = CohortManifest {
            project_name: "p".into(),
            patient_ids: ["a".to_string()].into(),
            start_date: NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            inclusion_note: String::new(),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn registry_rejects_unit_on_categorical() {
        let mut reg = ElementRegistry::new();
        let e = DataElement::new("culture", ElementCategory::Analyte, ValueKind::Categorical)
            .with_reference_unit("mg");
        assert!(reg.insert(e).is_err());
    }

    #[test]
    fn locator_round_trips_through_text() {
        let l = Locator::new("obs:2019.csv", 12);
        assert_eq!(l.to_string().parse::<Locator>().unwrap(), l);
    }
}
