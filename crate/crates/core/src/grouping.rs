//! Entity resolution: curated grouper definitions map raw source ids onto
//! canonical data elements.
//!
//! Matching is by exact `(category, source_id)`; member names are kept for
//! reviewers but never consulted. Analyte and flowsheet id spaces are
//! disjoint, so one id may belong to groupers of different categories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DqaError, Result};
use crate::model::{
    DataElement, ElementCategory, ElementRecord, ElementRegistry, ElementStatus, GroupedStore,
    ObservationStore, Value, ValueKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrouperMember {
    pub source_id: String,
    #[serde(default)]
    pub source_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouper {
    pub element_name: String,
    pub category: ElementCategory,
    pub value_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_unit: Option<String>,
    pub members: Vec<GrouperMember>,
}

/// A validated set of groupers.
#[derive(Debug, Clone, Default)]
pub struct GrouperRegistry {
    groupers: Vec<Grouper>,
    index: HashMap<(ElementCategory, String), usize>,
}

impl GrouperRegistry {
    /// Validates the registry invariants: unique element names, unique member
    /// ids within a grouper, and no id shared by two groupers of the same
    /// category.
    pub fn new(groupers: Vec<Grouper>) -> Result<Self> {
        let mut names = BTreeSet::new();
        let mut index = HashMap::new();
        for (gi, g) in groupers.iter().enumerate() {
            if g.element_name.trim().is_empty() {
                return Err(DqaError::Registry("grouper with empty element_name".into()));
            }
            if !names.insert(g.element_name.as_str()) {
                return Err(DqaError::Registry(format!(
                    "duplicate element_name `{}`",
                    g.element_name
                )));
            }
            if g.value_kind == ValueKind::Categorical && g.reference_unit.is_some() {
                return Err(DqaError::Registry(format!(
                    "categorical grouper `{}` has a reference unit",
                    g.element_name
                )));
            }
            let mut seen = BTreeSet::new();
            for m in &g.members {
                if !seen.insert(m.source_id.as_str()) {
                    return Err(DqaError::Registry(format!(
                        "source_id `{}` listed twice in grouper `{}`",
                        m.source_id, g.element_name
                    )));
                }
                if let Some(prev) = index.insert((g.category, m.source_id.clone()), gi) {
                    return Err(DqaError::Registry(format!(
                        "{} source_id `{}` appears in groupers `{}` and `{}`",
                        g.category, m.source_id, groupers[prev].element_name, g.element_name
                    )));
                }
            }
        }
        Ok(GrouperRegistry { groupers, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let groupers: Vec<Grouper> = crate::io::read_json(path)?;
        Self::new(groupers)
    }

    pub fn groupers(&self) -> &[Grouper] {
        &self.groupers
    }

    pub fn len(&self) -> usize {
        self.groupers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groupers.is_empty()
    }

    pub fn lookup(&self, category: ElementCategory, source_id: &str) -> Option<&Grouper> {
        self.index
            .get(&(category, source_id.to_string()))
            .map(|&i| &self.groupers[i])
    }

    /// One pending data element per grouper.
    pub fn element_registry(&self) -> ElementRegistry {
        let mut reg = ElementRegistry::new();
        for g in &self.groupers {
            let e = DataElement {
                name: g.element_name.clone(),
                category: g.category,
                value_kind: g.value_kind,
                reference_unit: g.reference_unit.clone(),
                status: ElementStatus::Pending,
            };
            // Names were validated unique above.
            reg.insert(e).expect("validated grouper registry");
        }
        reg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UngroupedRow {
    pub category: ElementCategory,
    pub source_id: String,
    pub source_name: String,
    pub count: u64,
}

/// Observations no grouper claimed, tallied per source id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UngroupedReport {
    pub total: u64,
    /// Count descending, then source id, then category.
    pub rows: Vec<UngroupedRow>,
}

impl UngroupedReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "source_id", "source_name", "count"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.category.as_str(),
                &r.source_id,
                &r.source_name,
                &r.count.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

#[derive(Debug, Clone)]
pub struct GroupingOutcome {
    pub grouped: GroupedStore,
    pub ungrouped: UngroupedReport,
    /// Records matched per grouper, in registry order.
    pub matched_per_grouper: BTreeMap<String, u64>,
}

/// Tags every observation matching a grouper member with the grouper's
/// element; everything else lands in the ungrouped report.
pub fn apply_groupers(store: &ObservationStore, registry: &GrouperRegistry) -> GroupingOutcome {
    let tagged: Vec<Option<ElementRecord>> = store
        .records()
        .par_iter()
        .map(|r| {
            registry.lookup(r.category, &r.source_id).map(|g| ElementRecord {
                element: g.element_name.clone(),
                value: Value::from_raw(&r.value_raw, g.value_kind),
                unit: r.unit_raw.clone(),
                flags: Vec::new(),
                source: r.clone(),
            })
        })
        .collect();

    let mut grouped = Vec::new();
    let mut ungrouped: BTreeMap<(ElementCategory, &str), (u64, &str)> = BTreeMap::new();
    let mut matched: BTreeMap<String, u64> = registry
        .groupers()
        .iter()
        .map(|g| (g.element_name.clone(), 0))
        .collect();
    for (rec, tag) in store.records().iter().zip(tagged) {
        match tag {
            Some(er) => {
                *matched.get_mut(&er.element).expect("known element") += 1;
                grouped.push(er);
            }
            None => {
                let e = ungrouped
                    .entry((rec.category, rec.source_id.as_str()))
                    .or_insert((0, rec.source_name.as_str()));
                e.0 += 1;
            }
        }
    }
    let mut rows: Vec<UngroupedRow> = ungrouped
        .into_iter()
        .map(|((category, id), (count, name))| UngroupedRow {
            category,
            source_id: id.to_string(),
            source_name: name.to_string(),
            count,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.source_id.cmp(&b.source_id))
            .then_with(|| a.category.cmp(&b.category))
    });
    GroupingOutcome {
        grouped: GroupedStore::seal(grouped),
        ungrouped: UngroupedReport {
            total: rows.iter().map(|r| r.count).sum(),
            rows,
        },
        matched_per_grouper: matched,
    }
}
