//! Per-source-id metadata tables used when building groupers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DqaError, Result};
use crate::model::{parse_numeric, ElementCategory, ObservationRecord, ObservationStore};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueCount {
    pub value: String,
    pub count: u64,
}

/// Most frequent non-empty values, count descending, ties by value.
pub fn top_k<'a>(values: impl IntoIterator<Item = &'a str>, k: usize) -> Vec<ValueCount> {
    let mut ranked = frequency(values);
    ranked.truncate(k);
    ranked
}

/// Full frequency table, count descending, ties by value. Empty strings are
/// skipped.
pub fn frequency<'a>(values: impl IntoIterator<Item = &'a str>) -> Vec<ValueCount> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for v in values {
        if !v.is_empty() {
            *counts.entry(v).or_default() += 1;
        }
    }
    let mut ranked: Vec<ValueCount> = counts
        .into_iter()
        .map(|(value, count)| ValueCount {
            value: value.to_string(),
            count,
        })
        .collect();
    ranked.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.value.cmp(&b.value)));
    ranked
}

fn modal<'a>(values: impl IntoIterator<Item = &'a str>) -> String {
    frequency(values)
        .into_iter()
        .next()
        .map(|v| v.value)
        .unwrap_or_default()
}

fn distinct_joined<'a>(values: impl IntoIterator<Item = &'a str>) -> String {
    let mut set: Vec<&str> = values.into_iter().filter(|v| !v.is_empty()).collect();
    set.sort_unstable();
    set.dedup();
    set.join(" | ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyteMetadata {
    pub component_id: String,
    pub component_name: String,
    pub component_count: u64,
    /// Distinct source names seen for this component.
    pub names: String,
    pub numeric_value_count: u64,
    pub numeric_mean: Option<f64>,
    pub top_specimen_sources: Vec<ValueCount>,
    pub top_reference_units: Vec<ValueCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationMetadata {
    pub medication_id: String,
    pub mar_medication_count: u64,
    pub raw_mar_name: String,
    pub top_mar_actions: Vec<ValueCount>,
    pub top_routes: Vec<ValueCount>,
    pub top_dose_values: Vec<ValueCount>,
    pub top_dose_units: Vec<ValueCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowsheetMetadata {
    pub measure_id: String,
    pub measure_name: String,
    pub name_count: u64,
    pub display_name: String,
    /// `numeric`, `string`, `mixed`, or `empty`.
    pub value_type_label: String,
    pub top_values: Vec<ValueCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetadataRow {
    Analyte(AnalyteMetadata),
    Medication(MedicationMetadata),
    Flowsheet(FlowsheetMetadata),
}

impl MetadataRow {
    pub fn count(&self) -> u64 {
        match self {
            MetadataRow::Analyte(a) => a.component_count,
            MetadataRow::Medication(m) => m.mar_medication_count,
            MetadataRow::Flowsheet(f) => f.name_count,
        }
    }

    pub fn source_id(&self) -> &str {
        match self {
            MetadataRow::Analyte(a) => &a.component_id,
            MetadataRow::Medication(m) => &m.medication_id,
            MetadataRow::Flowsheet(f) => &f.measure_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataTable {
    pub category: ElementCategory,
    /// One row per distinct source id, ordered by source id.
    pub rows: Vec<MetadataRow>,
}

pub fn curate_metadata(
    store: &ObservationStore,
    category: ElementCategory,
    k: usize,
) -> Result<MetadataTable> {
    if k == 0 {
        return Err(DqaError::Invalid("top-k must be positive".into()));
    }
    if !matches!(
        category,
        ElementCategory::Analyte | ElementCategory::Medication | ElementCategory::Flowsheet
    ) {
        return Err(DqaError::NoMetadataSchema(category.to_string()));
    }
    let mut by_source: BTreeMap<&str, Vec<&ObservationRecord>> = BTreeMap::new();
    for r in store.records().iter().filter(|r| r.category == category) {
        by_source.entry(r.source_id.as_str()).or_default().push(r);
    }
    let rows = by_source
        .into_iter()
        .map(|(id, recs)| match category {
            ElementCategory::Analyte => MetadataRow::Analyte(analyte_row(id, &recs, k)),
            ElementCategory::Medication => MetadataRow::Medication(medication_row(id, &recs, k)),
            _ => MetadataRow::Flowsheet(flowsheet_row(id, &recs, k)),
        })
        .collect();
    Ok(MetadataTable { category, rows })
}

fn opt_str(o: &Option<String>) -> &str {
    o.as_deref().unwrap_or("")
}

fn analyte_row(id: &str, recs: &[&ObservationRecord], k: usize) -> AnalyteMetadata {
    let numeric: Vec<f64> = recs.iter().filter_map(|r| parse_numeric(&r.value_raw)).collect();
    let numeric_mean =
        (!numeric.is_empty()).then(|| numeric.iter().sum::<f64>() / numeric.len() as f64);
    AnalyteMetadata {
        component_id: id.to_string(),
        component_name: modal(recs.iter().map(|r| r.source_name.as_str())),
        component_count: recs.len() as u64,
        names: distinct_joined(recs.iter().map(|r| r.source_name.as_str())),
        numeric_value_count: numeric.len() as u64,
        numeric_mean,
        top_specimen_sources: top_k(recs.iter().map(|r| opt_str(&r.specimen_source)), k),
        top_reference_units: top_k(recs.iter().map(|r| opt_str(&r.unit_raw)), k),
    }
}

fn medication_row(id: &str, recs: &[&ObservationRecord], k: usize) -> MedicationMetadata {
    MedicationMetadata {
        medication_id: id.to_string(),
        mar_medication_count: recs.len() as u64,
        raw_mar_name: modal(recs.iter().map(|r| r.source_name.as_str())),
        top_mar_actions: top_k(recs.iter().map(|r| opt_str(&r.mar_action)), k),
        top_routes: top_k(recs.iter().map(|r| opt_str(&r.route)), k),
        top_dose_values: top_k(recs.iter().map(|r| r.value_raw.trim()), k),
        top_dose_units: top_k(recs.iter().map(|r| opt_str(&r.unit_raw)), k),
    }
}

fn flowsheet_row(id: &str, recs: &[&ObservationRecord], k: usize) -> FlowsheetMetadata {
    let present: Vec<&str> = recs
        .iter()
        .map(|r| r.value_raw.trim())
        .filter(|v| !v.is_empty())
        .collect();
    let n_numeric = present.iter().filter(|v| parse_numeric(v).is_some()).count();
    let value_type_label = match (present.len(), n_numeric) {
        (0, _) => "empty",
        (n, m) if n == m => "numeric",
        (_, 0) => "string",
        _ => "mixed",
    };
    FlowsheetMetadata {
        measure_id: id.to_string(),
        measure_name: modal(recs.iter().map(|r| r.source_name.as_str())),
        name_count: recs.len() as u64,
        display_name: distinct_joined(recs.iter().map(|r| r.source_name.as_str())),
        value_type_label: value_type_label.to_string(),
        top_values: top_k(present.iter().copied(), k),
    }
}
