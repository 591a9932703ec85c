//! Rules-based transformations with an audit log.

pub mod ops;
pub mod rules;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{DataElement, ElementRecord, ElementRegistry, ElementStore, Locator, Value};
use ops::{
    categorical_map, clean_unit, composite_split, exceeds_threshold, is_date_sentinel,
    is_numeric_sentinel, out_of_range_string_to_bound, record_subset, unit_normalize,
    CategoryTable, Comparator, MapMode, MapOutcome, NormalizeOutcome, SplitOutcome,
    SubsetDecision,
};
pub use rules::{
    admissible, load_rules, resolve_targets, validate_rules, RuleKind, RuleSpec, TransformRule,
    TAXONOMY,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogAction {
    #[serde(rename = "modified")]
    Modified,
    #[serde(rename = "dropped")]
    Dropped,
    /// Record left as is but flagged for adjudication.
    #[serde(rename = "passthrough-counted")]
    PassthroughCounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedValue {
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl LoggedValue {
    fn of(r: &ElementRecord) -> Self {
        LoggedValue {
            value: r.value.label(),
            unit: r.unit.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformLogEntry {
    pub rule_id: String,
    pub element_name: String,
    pub action: LogAction,
    pub before: LoggedValue,
    /// `None` when the record was dropped.
    pub after: Option<LoggedValue>,
    pub locator: Locator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementCounts {
    pub input: usize,
    pub output: usize,
    pub dropped: usize,
    pub modified: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone)]
pub struct TransformOutcome {
    pub store: ElementStore,
    pub log: Vec<TransformLogEntry>,
    pub counts: BTreeMap<String, ElementCounts>,
}

/// A rule with its lookup tables prepared once.
struct Compiled<'a> {
    rule: &'a TransformRule,
    table: Option<CategoryTable>,
}

impl<'a> Compiled<'a> {
    fn new(rule: &'a TransformRule) -> Self {
        let table = match &rule.spec {
            RuleSpec::HierarchicalMap(t) | RuleSpec::BinaryMap(t) => Some(CategoryTable::new(t.table.rows())),
            RuleSpec::MultiSelectResolve(m) => Some(CategoryTable::new(m.table.rows())),
            _ => None,
        };
        Compiled { rule, table }
    }
}

enum Step {
    Untouched,
    Modified(Option<String>),
    Dropped(Option<String>),
    Flagged(String),
}

/// Applies `rules` in listed order to every targeted element.
///
/// Output records are ordered by element name and then locator, as is the
/// log. Elements without rules pass through unchanged.
pub fn apply_rules(
    grouped: &ElementStore,
    rules: &[TransformRule],
    registry: &ElementRegistry,
) -> Result<TransformOutcome> {
    validate_rules(rules, registry)?;
    let mut per_element: BTreeMap<&str, Vec<Compiled>> = BTreeMap::new();
    for rule in rules {
        for element in resolve_targets(rule, registry)? {
            per_element
                .entry(element.name.as_str())
                .or_default()
                .push(Compiled::new(rule));
        }
    }
    let groups: Vec<(&str, Vec<&ElementRecord>)> = grouped.by_element().into_iter().collect();
    let results: Vec<(String, Vec<ElementRecord>, Vec<TransformLogEntry>, ElementCounts)> = groups
        .into_par_iter()
        .map(|(name, mut recs)| {
            recs.sort_by(|a, b| a.locator().cmp(b.locator()));
            let element = registry.get(name);
            let compiled = per_element.get(name).map(Vec::as_slice).unwrap_or(&[]);
            let (kept, log, counts) = transform_element(name, element, &recs, compiled);
            (name.to_string(), kept, log, counts)
        })
        .collect();

    let mut records = Vec::with_capacity(grouped.len());
    let mut log = Vec::new();
    let mut counts = BTreeMap::new();
    for (name, kept, entries, c) in results {
        records.extend(kept);
        log.extend(entries);
        counts.insert(name, c);
    }
    Ok(TransformOutcome {
        store: ElementStore::seal(records),
        log,
        counts,
    })
}

fn transform_element(
    name: &str,
    element: Option<&DataElement>,
    recs: &[&ElementRecord],
    rules: &[Compiled],
) -> (Vec<ElementRecord>, Vec<TransformLogEntry>, ElementCounts) {
    let mut counts = ElementCounts {
        input: recs.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(recs.len());
    let mut log = Vec::new();
    for &orig in recs {
        let mut rec = orig.clone();
        let mut dropped = false;
        let mut modified = false;
        let mut flagged = false;
        let locator = orig.locator().clone();
        for c in rules {
            let before = LoggedValue::of(&rec);
            let step = apply_one(c, element, &mut rec);
            let entry = |action, after, flag| TransformLogEntry {
                rule_id: c.rule.rule_id.clone(),
                element_name: name.to_string(),
                action,
                before: before.clone(),
                after,
                locator: locator.clone(),
                flag,
            };
            match step {
                Step::Untouched => {}
                Step::Modified(flag) => {
                    modified = true;
                    log.push(entry(LogAction::Modified, Some(LoggedValue::of(&rec)), flag));
                }
                Step::Flagged(flag) => {
                    if !rec.has_flag(&flag) {
                        flagged = true;
                        rec.add_flag(flag.clone());
                        log.push(entry(LogAction::PassthroughCounted, Some(LoggedValue::of(&rec)), Some(flag)));
                    }
                }
                Step::Dropped(flag) => {
                    log.push(entry(LogAction::Dropped, None, flag));
                    dropped = true;
                    break;
                }
            }
        }
        if dropped {
            counts.dropped += 1;
            continue;
        }
        counts.modified += usize::from(modified);
        counts.flagged += usize::from(flagged);
        kept.push(rec);
    }
    counts.output = kept.len();
    (kept, log, counts)
}

fn apply_one(c: &Compiled, element: Option<&DataElement>, rec: &mut ElementRecord) -> Step {
    match &c.rule.spec {
        RuleSpec::UnitStringCleanup(t) => {
            let Some(unit) = &rec.unit else { return Step::Untouched };
            let cleaned = clean_unit(unit, t.table.rows());
            if &cleaned == unit {
                return Step::Untouched;
            }
            rec.unit = (!cleaned.is_empty()).then_some(cleaned);
            Step::Modified(None)
        }
        RuleSpec::UnitNormalize(t) => {
            let Some(reference) = element.and_then(|e| e.reference_unit.as_deref()) else {
                return Step::Untouched;
            };
            let Value::Number(x) = rec.value else { return Step::Untouched };
            let Some(unit) = rec.unit.clone() else {
                return Step::Flagged("missing_unit".into());
            };
            match unit_normalize(x, &unit, reference, t.table.rows()) {
                NormalizeOutcome::AlreadyReference if unit == reference => Step::Untouched,
                NormalizeOutcome::AlreadyReference => {
                    rec.unit = Some(reference.to_string());
                    Step::Modified(None)
                }
                NormalizeOutcome::Converted(y) => {
                    rec.value = Value::Number(y);
                    rec.unit = Some(reference.to_string());
                    Step::Modified(None)
                }
                NormalizeOutcome::UnknownUnit => Step::Flagged(format!("unknown_unit:{unit}")),
            }
        }
        RuleSpec::SpecimenSubset(s) => subset(rec.source.specimen_source.as_deref(), s, "missing_specimen"),
        RuleSpec::MarActionSubset(s) => subset(rec.source.mar_action.as_deref(), s, "missing_mar_action"),
        RuleSpec::BoundFilter(b) => {
            let Value::Number(x) = rec.value else { return Step::Untouched };
            let over = b.upper.is_some_and(|u| x > u);
            let under = b.lower.is_some_and(|l| x < l);
            if over || under {
                Step::Dropped(None)
            } else {
                Step::Untouched
            }
        }
        RuleSpec::OutOfRangeStringToBound => {
            let Value::Text(raw) = &rec.value else { return Step::Untouched };
            let Some(parsed) = out_of_range_string_to_bound(raw) else {
                return Step::Untouched;
            };
            rec.value = Value::Number(parsed.value);
            if rec.unit.is_none() && !parsed.trailing.is_empty() {
                rec.unit = Some(parsed.trailing);
            }
            let flag = match parsed.comparator {
                Comparator::Upper => Some("reporting_limit:upper".to_string()),
                Comparator::Lower => Some("reporting_limit:lower".to_string()),
                Comparator::None => None,
            };
            if let Some(f) = &flag {
                rec.add_flag(f.clone());
            }
            Step::Modified(flag)
        }
        // Ingest already stores every timestamp as UTC.
        RuleSpec::UtcConvert => Step::Untouched,
        RuleSpec::HierarchicalMap(_) => map_text(rec, c.table.as_ref(), MapMode::Hierarchical, ""),
        RuleSpec::BinaryMap(_) => map_text(rec, c.table.as_ref(), MapMode::Binary, ""),
        RuleSpec::MultiSelectResolve(m) => map_text(rec, c.table.as_ref(), MapMode::MultiSelectMin, &m.delimiter),
        RuleSpec::IndeterminateToMissing(v) => {
            let Value::Text(raw) = &rec.value else { return Step::Untouched };
            let raw = raw.trim();
            if v.values.iter().any(|x| x.trim().eq_ignore_ascii_case(raw)) {
                rec.value = Value::Missing;
                Step::Modified(None)
            } else {
                Step::Untouched
            }
        }
        RuleSpec::CompositeSplit(p) => {
            let raw = match &rec.value {
                Value::Text(s) => s.clone(),
                Value::Number(_) => rec.source.value_raw.clone(),
                Value::Missing | Value::Composite(_) => return Step::Untouched,
            };
            match composite_split(&raw, &p.separator, &p.parts) {
                SplitOutcome::Split(parts) => {
                    rec.value = Value::Composite(parts);
                    Step::Modified(None)
                }
                SplitOutcome::Mismatch => Step::Flagged(format!("composite_mismatch:{}", c.rule.rule_id)),
            }
        }
        RuleSpec::ThresholdUnitImpute(p) => {
            let Value::Number(x) = rec.value else { return Step::Untouched };
            let marker = format!("unit_imputed:{}", c.rule.rule_id);
            if rec.has_flag(&marker) || !exceeds_threshold(x, p) {
                return Step::Untouched;
            }
            rec.value = Value::Number(p.conversion.apply(x));
            rec.unit = Some(p.target_unit.clone());
            rec.add_flag(marker.clone());
            Step::Modified(Some(marker))
        }
        RuleSpec::SentinelNumericToMissing(s) => match rec.value {
            Value::Number(x) if is_numeric_sentinel(x, &s.sentinels) => {
                rec.value = Value::Missing;
                Step::Modified(None)
            }
            _ => Step::Untouched,
        },
        RuleSpec::SentinelDateToMissing(s) => match &rec.value {
            Value::Text(raw) if is_date_sentinel(raw, &s.sentinels) => {
                rec.value = Value::Missing;
                Step::Modified(None)
            }
            _ => Step::Untouched,
        },
    }
}

fn subset(field: Option<&str>, s: &rules::SubsetParams, missing_flag: &str) -> Step {
    match record_subset(field, &s.keep, &s.drop) {
        SubsetDecision::Keep => Step::Untouched,
        SubsetDecision::Drop => Step::Dropped(None),
        SubsetDecision::DropMissing => Step::Dropped(Some(missing_flag.to_string())),
    }
}

fn map_text(rec: &mut ElementRecord, table: Option<&CategoryTable>, mode: MapMode, delimiter: &str) -> Step {
    let Some(table) = table else { return Step::Untouched };
    let Value::Text(raw) = &rec.value else { return Step::Untouched };
    match categorical_map(raw, table, mode, delimiter) {
        MapOutcome::AlreadyMapped => Step::Untouched,
        MapOutcome::Mapped(out) => {
            rec.value = Value::Text(out);
            Step::Modified(None)
        }
        MapOutcome::Missing => {
            rec.value = Value::Missing;
            Step::Modified(None)
        }
        MapOutcome::Unmatched => {
            rec.value = Value::Missing;
            rec.add_flag("unmapped");
            Step::Modified(Some("unmapped".into()))
        }
    }
}

/// Writes the log as JSON lines.
pub fn write_log(path: &Path, log: &[TransformLogEntry]) -> Result<()> {
    crate::io::write_jsonl(path, log)
}
