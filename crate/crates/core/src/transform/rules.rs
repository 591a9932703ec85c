//! Rule configuration: kinds, parameters, and which element types each kind
//! may target.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ops::{
    default_date_sentinels, CategoryRow, FactorRow, SubstitutionRow, ThresholdParams,
    DEFAULT_NUMERIC_SENTINELS,
};
use crate::error::{DqaError, Result};
use crate::model::{DataElement, ElementCategory, ElementRegistry, ValueKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    UnitNormalize,
    SpecimenSubset,
    UnitStringCleanup,
    BoundFilter,
    OutOfRangeStringToBound,
    UtcConvert,
    HierarchicalMap,
    BinaryMap,
    IndeterminateToMissing,
    CompositeSplit,
    ThresholdUnitImpute,
    MultiSelectResolve,
    MarActionSubset,
    SentinelNumericToMissing,
    SentinelDateToMissing,
}

impl RuleKind {
    pub const ALL: [RuleKind; 15] = [
        RuleKind::UnitNormalize,
        RuleKind::SpecimenSubset,
        RuleKind::UnitStringCleanup,
        RuleKind::BoundFilter,
        RuleKind::OutOfRangeStringToBound,
        RuleKind::UtcConvert,
        RuleKind::HierarchicalMap,
        RuleKind::BinaryMap,
        RuleKind::IndeterminateToMissing,
        RuleKind::CompositeSplit,
        RuleKind::ThresholdUnitImpute,
        RuleKind::MultiSelectResolve,
        RuleKind::MarActionSubset,
        RuleKind::SentinelNumericToMissing,
        RuleKind::SentinelDateToMissing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::UnitNormalize => "unit_normalize",
            RuleKind::SpecimenSubset => "specimen_subset",
            RuleKind::UnitStringCleanup => "unit_string_cleanup",
            RuleKind::BoundFilter => "bound_filter",
            RuleKind::OutOfRangeStringToBound => "out_of_range_string_to_bound",
            RuleKind::UtcConvert => "utc_convert",
            RuleKind::HierarchicalMap => "hierarchical_map",
            RuleKind::BinaryMap => "binary_map",
            RuleKind::IndeterminateToMissing => "indeterminate_to_missing",
            RuleKind::CompositeSplit => "composite_split",
            RuleKind::ThresholdUnitImpute => "threshold_unit_impute",
            RuleKind::MultiSelectResolve => "multi_select_resolve",
            RuleKind::MarActionSubset => "mar_action_subset",
            RuleKind::SentinelNumericToMissing => "sentinel_numeric_to_missing",
            RuleKind::SentinelDateToMissing => "sentinel_date_to_missing",
        }
    }

    /// Site rules apply to any element regardless of type.
    pub fn is_site_rule(self) -> bool {
        matches!(
            self,
            RuleKind::SentinelNumericToMissing | RuleKind::SentinelDateToMissing
        )
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleKind {
    type Err = DqaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DqaError::RuleConfig(format!("unknown rule kind `{s}`")))
    }
}

/// One cell of the element-type by transformation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub category: ElementCategory,
    pub value_kind: ValueKind,
    pub kind: RuleKind,
    pub example: &'static str,
}

const fn entry(
    category: ElementCategory,
    value_kind: ValueKind,
    kind: RuleKind,
    example: &'static str,
) -> TaxonomyEntry {
    TaxonomyEntry {
        category,
        value_kind,
        kind,
        example,
    }
}

use ElementCategory::{Analyte, Flowsheet, Medication};
use ValueKind::{Categorical, Numeric};

/// The 22 rules-based transformation categories, by element type.
pub const TAXONOMY: [TaxonomyEntry; 22] = [
    entry(Analyte, Numeric, RuleKind::UnitNormalize, "creatinine mg/mL -> mg/dL"),
    entry(Analyte, Numeric, RuleKind::SpecimenSubset, "drop urine glucose from serum glucose"),
    entry(Analyte, Numeric, RuleKind::UnitStringCleanup, "greek mu and unit typos to ASCII"),
    entry(Analyte, Numeric, RuleKind::BoundFilter, "drop creatinine over 150 mg/dL"),
    entry(Analyte, Numeric, RuleKind::OutOfRangeStringToBound, "\">600 mg/dL\" -> 600"),
    entry(Analyte, Numeric, RuleKind::UtcConvert, "EDT -> UTC"),
    entry(Analyte, Categorical, RuleKind::SpecimenSubset, "drop pleural-fluid blood cultures"),
    entry(Analyte, Categorical, RuleKind::HierarchicalMap, "culture text -> negative / contaminant / pathogen"),
    entry(Analyte, Categorical, RuleKind::BinaryMap, "antibody titer -> positive / negative"),
    entry(Analyte, Categorical, RuleKind::IndeterminateToMissing, "\"hemolyzed sample\" -> missing"),
    entry(Analyte, Categorical, RuleKind::UtcConvert, "EDT -> UTC"),
    entry(Flowsheet, Numeric, RuleKind::BoundFilter, "drop pulse over 400"),
    entry(Flowsheet, Numeric, RuleKind::CompositeSplit, "120/80 -> systolic 120, diastolic 80"),
    entry(Flowsheet, Numeric, RuleKind::UnitNormalize, "kg -> lbs"),
    entry(Flowsheet, Numeric, RuleKind::ThresholdUnitImpute, "weight over 1200 is ounces; temperature at or below 60 is Celsius"),
    entry(Flowsheet, Numeric, RuleKind::UtcConvert, "EDT -> UTC"),
    entry(Flowsheet, Categorical, RuleKind::HierarchicalMap, "room air < nasal cannula < CPAP < ventilation"),
    entry(Flowsheet, Categorical, RuleKind::BinaryMap, "device documented -> 1"),
    entry(Flowsheet, Categorical, RuleKind::MultiSelectResolve, "multi-select consciousness -> minimum level"),
    entry(Flowsheet, Categorical, RuleKind::UtcConvert, "EDT -> UTC"),
    entry(Medication, Categorical, RuleKind::MarActionSubset, "drop held administrations"),
    entry(Medication, Categorical, RuleKind::UtcConvert, "EDT -> UTC"),
];

/// Whether a rule kind may target an element of this type.
///
/// The taxonomy matrix is authoritative, with three widenings: site sentinel
/// rules and UTC conversion apply everywhere, bound filters apply to any
/// numeric element (adjudication emits them for whatever element it bounds),
/// and medication rules ignore value kind.
pub fn admissible(kind: RuleKind, category: ElementCategory, value_kind: ValueKind) -> bool {
    if kind.is_site_rule() || kind == RuleKind::UtcConvert {
        return true;
    }
    if kind == RuleKind::BoundFilter && value_kind == ValueKind::Numeric {
        return true;
    }
    let value_kind = if category == ElementCategory::Medication {
        ValueKind::Categorical
    } else {
        value_kind
    };
    TAXONOMY
        .iter()
        .any(|e| e.kind == kind && e.category == category && e.value_kind == value_kind)
}

/// A lookup table given either inline or as a CSV path relative to the rule
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableSource<T> {
    Path(PathBuf),
    Rows(Vec<T>),
}

impl<T: DeserializeOwned> TableSource<T> {
    fn resolve(&mut self, base: &Path) -> Result<()> {
        if let TableSource::Path(p) = self {
            let path = if p.is_absolute() { p.clone() } else { base.join(&p) };
            *self = TableSource::Rows(crate::ontology::read_csv_rows(&path)?);
        }
        Ok(())
    }
}

impl<T> TableSource<T> {
    pub fn rows(&self) -> &[T] {
        match self {
            TableSource::Rows(r) => r,
            TableSource::Path(_) => &[],
        }
    }

    fn is_resolved(&self) -> bool {
        matches!(self, TableSource::Rows(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetParams {
    #[serde(default)]
    pub keep: Vec<String>,
    #[serde(default)]
    pub drop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableParams<T> {
    pub table: TableSource<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueListParams {
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeParams {
    #[serde(default = "default_separator")]
    pub separator: String,
    pub parts: Vec<String>,
}

fn default_separator() -> String {
    "/".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSelectParams {
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    pub table: TableSource<CategoryRow>,
}

fn default_delimiter() -> String {
    ";".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericSentinelParams {
    #[serde(default = "default_numeric_sentinels")]
    pub sentinels: Vec<f64>,
}

fn default_numeric_sentinels() -> Vec<f64> {
    DEFAULT_NUMERIC_SENTINELS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateSentinelParams {
    #[serde(default = "default_date_sentinels")]
    pub sentinels: Vec<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleSpec {
    UnitNormalize(TableParams<FactorRow>),
    SpecimenSubset(SubsetParams),
    UnitStringCleanup(TableParams<SubstitutionRow>),
    BoundFilter(BoundParams),
    OutOfRangeStringToBound,
    UtcConvert,
    HierarchicalMap(TableParams<CategoryRow>),
    BinaryMap(TableParams<CategoryRow>),
    IndeterminateToMissing(ValueListParams),
    CompositeSplit(CompositeParams),
    ThresholdUnitImpute(ThresholdParams),
    MultiSelectResolve(MultiSelectParams),
    MarActionSubset(SubsetParams),
    SentinelNumericToMissing(NumericSentinelParams),
    SentinelDateToMissing(DateSentinelParams),
}

impl RuleSpec {
    pub fn kind(&self) -> RuleKind {
        match self {
            RuleSpec::UnitNormalize(_) => RuleKind::UnitNormalize,
            RuleSpec::SpecimenSubset(_) => RuleKind::SpecimenSubset,
            RuleSpec::UnitStringCleanup(_) => RuleKind::UnitStringCleanup,
            RuleSpec::BoundFilter(_) => RuleKind::BoundFilter,
            RuleSpec::OutOfRangeStringToBound => RuleKind::OutOfRangeStringToBound,
            RuleSpec::UtcConvert => RuleKind::UtcConvert,
            RuleSpec::HierarchicalMap(_) => RuleKind::HierarchicalMap,
            RuleSpec::BinaryMap(_) => RuleKind::BinaryMap,
            RuleSpec::IndeterminateToMissing(_) => RuleKind::IndeterminateToMissing,
            RuleSpec::CompositeSplit(_) => RuleKind::CompositeSplit,
            RuleSpec::ThresholdUnitImpute(_) => RuleKind::ThresholdUnitImpute,
            RuleSpec::MultiSelectResolve(_) => RuleKind::MultiSelectResolve,
            RuleSpec::MarActionSubset(_) => RuleKind::MarActionSubset,
            RuleSpec::SentinelNumericToMissing(_) => RuleKind::SentinelNumericToMissing,
            RuleSpec::SentinelDateToMissing(_) => RuleKind::SentinelDateToMissing,
        }
    }

    fn from_params(kind: RuleKind, params: serde_json::Value) -> std::result::Result<Self, serde_json::Error> {
        use serde_json::from_value as p;
        let params = if params.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            params
        };
        Ok(match kind {
            RuleKind::UnitNormalize => RuleSpec::UnitNormalize(p(params)?),
            RuleKind::SpecimenSubset => RuleSpec::SpecimenSubset(p(params)?),
            RuleKind::UnitStringCleanup => RuleSpec::UnitStringCleanup(p(params)?),
            RuleKind::BoundFilter => RuleSpec::BoundFilter(p(params)?),
            RuleKind::OutOfRangeStringToBound => RuleSpec::OutOfRangeStringToBound,
            RuleKind::UtcConvert => RuleSpec::UtcConvert,
            RuleKind::HierarchicalMap => RuleSpec::HierarchicalMap(p(params)?),
            RuleKind::BinaryMap => RuleSpec::BinaryMap(p(params)?),
            RuleKind::IndeterminateToMissing => RuleSpec::IndeterminateToMissing(p(params)?),
            RuleKind::CompositeSplit => RuleSpec::CompositeSplit(p(params)?),
            RuleKind::ThresholdUnitImpute => RuleSpec::ThresholdUnitImpute(p(params)?),
            RuleKind::MultiSelectResolve => RuleSpec::MultiSelectResolve(p(params)?),
            RuleKind::MarActionSubset => RuleSpec::MarActionSubset(p(params)?),
            RuleKind::SentinelNumericToMissing => RuleSpec::SentinelNumericToMissing(p(params)?),
            RuleKind::SentinelDateToMissing => RuleSpec::SentinelDateToMissing(p(params)?),
        })
    }

    fn params(&self) -> serde_json::Value {
        use serde_json::to_value as v;
        let empty = || serde_json::Value::Object(Default::default());
        match self {
            RuleSpec::UnitNormalize(x) => v(x),
            RuleSpec::SpecimenSubset(x) | RuleSpec::MarActionSubset(x) => v(x),
            RuleSpec::UnitStringCleanup(x) => v(x),
            RuleSpec::BoundFilter(x) => v(x),
            RuleSpec::OutOfRangeStringToBound | RuleSpec::UtcConvert => Ok(empty()),
            RuleSpec::HierarchicalMap(x) | RuleSpec::BinaryMap(x) => v(x),
            RuleSpec::IndeterminateToMissing(x) => v(x),
            RuleSpec::CompositeSplit(x) => v(x),
            RuleSpec::ThresholdUnitImpute(x) => v(x),
            RuleSpec::MultiSelectResolve(x) => v(x),
            RuleSpec::SentinelNumericToMissing(x) => v(x),
            RuleSpec::SentinelDateToMissing(x) => v(x),
        }
        .expect("rule params serialize")
    }

    fn resolve_tables(&mut self, base: &Path) -> Result<()> {
        match self {
            RuleSpec::UnitNormalize(t) => t.table.resolve(base),
            RuleSpec::UnitStringCleanup(t) => t.table.resolve(base),
            RuleSpec::HierarchicalMap(t) | RuleSpec::BinaryMap(t) => t.table.resolve(base),
            RuleSpec::MultiSelectResolve(m) => m.table.resolve(base),
            _ => Ok(()),
        }
    }
}

/// One configured transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRule {
    pub rule_id: String,
    /// Element name, or a category token to hit every admissible element of
    /// that category.
    pub target: String,
    pub spec: RuleSpec,
}

impl TransformRule {
    pub fn new(rule_id: impl Into<String>, target: impl Into<String>, spec: RuleSpec) -> Self {
        TransformRule {
            rule_id: rule_id.into(),
            target: target.into(),
            spec,
        }
    }

    pub fn kind(&self) -> RuleKind {
        self.spec.kind()
    }

    /// Upper/lower bound filter, as emitted from adjudication decisions.
    pub fn bound_filter(
        rule_id: impl Into<String>,
        target: impl Into<String>,
        lower: Option<f64>,
        upper: Option<f64>,
    ) -> Self {
        TransformRule::new(rule_id, target, RuleSpec::BoundFilter(BoundParams { lower, upper }))
    }
}

#[derive(Serialize, Deserialize)]
struct RawRule {
    rule_id: String,
    kind: String,
    target: String,
    #[serde(default)]
    params: serde_json::Value,
}

impl Serialize for TransformRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawRule {
            rule_id: self.rule_id.clone(),
            kind: self.kind().as_str().to_string(),
            target: self.target.clone(),
            params: self.spec.params(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TransformRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let raw = RawRule::deserialize(d)?;
        let kind: RuleKind = raw.kind.parse().map_err(D::Error::custom)?;
        let spec = RuleSpec::from_params(kind, raw.params)
            .map_err(|e| D::Error::custom(format!("rule `{}` params: {e}", raw.rule_id)))?;
        Ok(TransformRule {
            rule_id: raw.rule_id,
            target: raw.target,
            spec,
        })
    }
}

/// Reads a rule file, resolving table paths relative to the file.
pub fn load_rules(path: &Path) -> Result<Vec<TransformRule>> {
    let text = std::fs::read_to_string(path).map_err(|e| DqaError::io(path, e))?;
    let mut rules: Vec<TransformRule> =
        serde_json::from_str(&text).map_err(|e| DqaError::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for r in &mut rules {
        r.spec.resolve_tables(base)?;
    }
    Ok(rules)
}

/// Elements a rule applies to. An element-name target must be admissible;
/// a category target silently skips elements of the wrong value kind.
pub fn resolve_targets<'a>(rule: &TransformRule, registry: &'a ElementRegistry) -> Result<Vec<&'a DataElement>> {
    if let Some(e) = registry.get(&rule.target) {
        if !admissible(rule.kind(), e.category, e.value_kind) {
            return Err(DqaError::RuleConfig(format!(
                "rule `{}`: {} is not admissible for {} {} element `{}`",
                rule.rule_id,
                rule.kind(),
                e.value_kind.as_str(),
                e.category,
                e.name
            )));
        }
        return Ok(vec![e]);
    }
    if let Ok(cat) = rule.target.parse::<ElementCategory>() {
        return Ok(registry
            .in_category(cat)
            .filter(|e| admissible(rule.kind(), e.category, e.value_kind))
            .collect());
    }
    Err(DqaError::RuleConfig(format!(
        "rule `{}` references unknown element `{}`",
        rule.rule_id, rule.target
    )))
}

/// Checks parameter completeness and target admissibility for a rule list.
pub fn validate_rules(rules: &[TransformRule], registry: &ElementRegistry) -> Result<()> {
    let mut ids = std::collections::BTreeSet::new();
    for r in rules {
        let bad = |msg: &str| Err(DqaError::RuleConfig(format!("rule `{}`: {msg}", r.rule_id)));
        if r.rule_id.trim().is_empty() {
            return Err(DqaError::RuleConfig("rule with empty rule_id".into()));
        }
        if !ids.insert(r.rule_id.as_str()) {
            return bad("duplicate rule_id");
        }
        match &r.spec {
            RuleSpec::UnitNormalize(t) if !t.table.is_resolved() || t.table.rows().is_empty() => {
                return bad("unit_normalize needs a non-empty factor table")
            }
            RuleSpec::UnitStringCleanup(t) if !t.table.is_resolved() || t.table.rows().is_empty() => {
                return bad("unit_string_cleanup needs a non-empty substitution table")
            }
            RuleSpec::HierarchicalMap(t) if !t.table.is_resolved() || t.table.rows().is_empty() => {
                return bad("hierarchical_map needs a non-empty reference table")
            }
            RuleSpec::BinaryMap(t) => {
                let outs: std::collections::BTreeSet<String> = t
                    .table
                    .rows()
                    .iter()
                    .filter(|r| !r.output.is_empty())
                    .map(|r| r.output.trim().to_lowercase())
                    .collect();
                if !t.table.is_resolved() || outs.is_empty() || outs.len() > 2 {
                    return bad("binary_map needs a reference table with at most two outputs");
                }
            }
            RuleSpec::MultiSelectResolve(m) => {
                if !m.table.is_resolved() || m.table.rows().is_empty() || m.delimiter.is_empty() {
                    return bad("multi_select_resolve needs a delimiter and a ranked table");
                }
                if m.table.rows().iter().any(|r| !r.output.is_empty() && r.rank.is_none()) {
                    return bad("multi_select_resolve table rows need a rank");
                }
            }
            RuleSpec::BoundFilter(b) => match (b.lower, b.upper) {
                (None, None) => return bad("bound_filter needs lower or upper"),
                (Some(l), Some(u)) if l >= u => return bad("bound_filter lower must be < upper"),
                _ => {}
            },
            RuleSpec::SpecimenSubset(s) | RuleSpec::MarActionSubset(s)
                if s.keep.is_empty() && s.drop.is_empty() =>
            {
                return bad("subset rule needs a keep or drop list")
            }
            RuleSpec::IndeterminateToMissing(v) if v.values.is_empty() => {
                return bad("indeterminate_to_missing needs values")
            }
            RuleSpec::CompositeSplit(c) if c.separator.is_empty() || c.parts.len() < 2 => {
                return bad("composite_split needs a separator and at least two parts")
            }
            RuleSpec::ThresholdUnitImpute(t) if !t.threshold.is_finite() || t.conversion.factor == 0.0 => {
                return bad("threshold_unit_impute needs a finite threshold and non-zero factor")
            }
            RuleSpec::SentinelNumericToMissing(s) if s.sentinels.is_empty() => {
                return bad("sentinel list is empty")
            }
            RuleSpec::SentinelDateToMissing(s) if s.sentinels.is_empty() => {
                return bad("sentinel list is empty")
            }
            _ => {}
        }
        let targets = resolve_targets(r, registry)?;
        if r.kind() == RuleKind::UnitNormalize {
            if let Some(e) = targets.iter().find(|e| e.reference_unit.is_none()) {
                return bad(&format!("element `{}` has no reference unit", e.name));
            }
        }
    }
    Ok(())
}
