//! Pure value-level operations behind each rule kind.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::model::parse_numeric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// `>` or `≥`: the instrument's upper reporting limit.
    Upper,
    /// `<` or `≤`: the instrument's lower reporting limit.
    Lower,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutOfRange {
    pub value: f64,
    pub comparator: Comparator,
    /// Text after the number, usually a unit.
    pub trailing: String,
}

/// Reads strings such as `">600 mg/dL"` or `"<0.01"` as the reporting
/// limit they encode. Plain numbers parse as themselves. Anything else gives
/// `None` and should be left for later rules.
pub fn out_of_range_string_to_bound(raw: &str) -> Option<OutOfRange> {
    let s = raw.trim();
    let (comparator, rest) = if let Some(r) = s.strip_prefix(">=").or_else(|| s.strip_prefix('≥')) {
        (Comparator::Upper, r)
    } else if let Some(r) = s.strip_prefix('>') {
        (Comparator::Upper, r)
    } else if let Some(r) = s.strip_prefix("<=").or_else(|| s.strip_prefix('≤')) {
        (Comparator::Lower, r)
    } else if let Some(r) = s.strip_prefix('<') {
        (Comparator::Lower, r)
    } else {
        (Comparator::None, s)
    };
    let rest = rest.trim_start();
    let end = rest
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || matches!(c, '.' | ',' | '+' | '-')))
        .map(|(i, _)| i)
        .unwrap_or(rest.len());
    let (number, trailing) = rest.split_at(end);
    let value = parse_numeric(number)?;
    if comparator == Comparator::None && !trailing.trim().is_empty() {
        return None;
    }
    Some(OutOfRange {
        value,
        comparator,
        trailing: trailing.trim().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdDirection {
    Above,
    Below,
}

/// `out = factor * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub factor: f64,
    #[serde(default)]
    pub offset: f64,
}

impl Affine {
    pub fn apply(&self, x: f64) -> f64 {
        self.factor * x + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub threshold: f64,
    #[serde(default = "default_direction")]
    pub direction: ThresholdDirection,
    /// Unit the out-of-threshold values are assumed to be in.
    pub assumed_unit: String,
    pub target_unit: String,
    pub conversion: Affine,
}

fn default_direction() -> ThresholdDirection {
    ThresholdDirection::Above
}

/// Whether `value` lies strictly beyond the threshold.
pub fn exceeds_threshold(value: f64, p: &ThresholdParams) -> bool {
    match p.direction {
        ThresholdDirection::Above => value > p.threshold,
        ThresholdDirection::Below => value < p.threshold,
    }
}

/// Converts values strictly beyond the threshold from the assumed unit to
/// the target unit; the threshold value itself is returned unchanged.
pub fn threshold_unit_impute(value: f64, p: &ThresholdParams) -> f64 {
    if exceeds_threshold(value, p) {
        p.conversion.apply(value)
    } else {
        value
    }
}

pub const DEFAULT_NUMERIC_SENTINELS: [f64; 2] = [999_999.0, 9_999_999.0];

pub fn default_date_sentinels() -> Vec<NaiveDate> {
    vec![NaiveDate::from_ymd_opt(1841, 12, 31).expect("valid date")]
}

pub fn is_numeric_sentinel(value: f64, sentinels: &[f64]) -> bool {
    sentinels.iter().any(|s| *s == value)
}

/// Parses the leading `YYYY-MM-DD` of a date or datetime string.
pub fn leading_date(raw: &str) -> Option<NaiveDate> {
    let s = raw.trim();
    let head = s.get(..10)?;
    let date = NaiveDate::parse_from_str(head, "%Y-%m-%d").ok()?;
    match s[10..].chars().next() {
        None | Some('T') | Some(' ') => Some(date),
        _ => None,
    }
}

pub fn is_date_sentinel(raw: &str, sentinels: &[NaiveDate]) -> bool {
    leading_date(raw).is_some_and(|d| sentinels.contains(&d))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitOutcome {
    Split(BTreeMap<String, f64>),
    /// Wrong number of parts, or a part that is not numeric.
    Mismatch,
}

/// Splits `"120/80"` style values into named numeric parts.
pub fn composite_split(raw: &str, separator: &str, parts: &[String]) -> SplitOutcome {
    let pieces: Vec<&str> = raw.split(separator).collect();
    if pieces.len() != parts.len() {
        return SplitOutcome::Mismatch;
    }
    let mut out = BTreeMap::new();
    for (name, piece) in parts.iter().zip(pieces) {
        match parse_numeric(piece) {
            Some(x) => {
                out.insert(name.clone(), x);
            }
            None => return SplitOutcome::Mismatch,
        }
    }
    SplitOutcome::Split(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub input: String,
    /// Empty output marks an indeterminate entry that maps to missing.
    #[serde(default)]
    pub output: String,
    #[serde(default)]
    pub rank: Option<i64>,
}

/// Case-insensitive lookup table for categorical mapping.
#[derive(Debug, Clone, Default)]
pub struct CategoryTable {
    by_input: HashMap<String, (String, Option<i64>)>,
    /// Folded output -> output as written in the table.
    outputs: HashMap<String, String>,
}

impl CategoryTable {
    pub fn new(rows: &[CategoryRow]) -> Self {
        let mut by_input = HashMap::new();
        let mut outputs = HashMap::new();
        for r in rows {
            by_input.insert(fold(&r.input), (r.output.clone(), r.rank));
            if !r.output.is_empty() {
                outputs.entry(fold(&r.output)).or_insert_with(|| r.output.clone());
            }
        }
        CategoryTable { by_input, outputs }
    }

    pub fn get(&self, raw: &str) -> Option<(&str, Option<i64>)> {
        self.by_input
            .get(&fold(raw))
            .map(|(o, r)| (o.as_str(), *r))
    }

    /// The table's spelling of `raw` when it is already an output value.
    pub fn canonical_output(&self, raw: &str) -> Option<&str> {
        self.outputs.get(&fold(raw)).map(String::as_str)
    }
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    Hierarchical,
    Binary,
    MultiSelectMin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapOutcome {
    /// Already a table output; left alone so mapping is idempotent.
    AlreadyMapped,
    Mapped(String),
    /// Listed as indeterminate.
    Missing,
    /// Not in the table; becomes missing and is flagged.
    Unmatched,
}

/// Maps a categorical string through an expert reference table.
pub fn categorical_map(raw: &str, table: &CategoryTable, mode: MapMode, delimiter: &str) -> MapOutcome {
    if let Some(canon) = table.canonical_output(raw) {
        return if canon == raw {
            MapOutcome::AlreadyMapped
        } else {
            MapOutcome::Mapped(canon.to_string())
        };
    }
    match mode {
        MapMode::Hierarchical | MapMode::Binary => match table.get(raw) {
            Some(("", _)) => MapOutcome::Missing,
            Some((out, _)) => MapOutcome::Mapped(out.to_string()),
            None => MapOutcome::Unmatched,
        },
        MapMode::MultiSelectMin => {
            let mut best: Option<(i64, &str)> = None;
            let mut any_listed = false;
            for piece in raw.split(delimiter).map(str::trim).filter(|p| !p.is_empty()) {
                let Some((out, rank)) = table.get(piece) else { continue };
                any_listed = true;
                if out.is_empty() {
                    continue;
                }
                let rank = rank.unwrap_or(i64::MAX);
                if best.map_or(true, |(r, o)| (rank, out) < (r, o)) {
                    best = Some((rank, out));
                }
            }
            match best {
                Some((_, out)) => MapOutcome::Mapped(out.to_string()),
                None if any_listed => MapOutcome::Missing,
                None => MapOutcome::Unmatched,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetDecision {
    Keep,
    Drop,
    /// Field is empty but a keep list is configured.
    DropMissing,
}

/// Keep/drop decision on a record field, compared case-insensitively.
pub fn record_subset(field: Option<&str>, keep: &[String], drop: &[String]) -> SubsetDecision {
    let value = field.map(fold).filter(|v| !v.is_empty());
    match value {
        None if !keep.is_empty() => SubsetDecision::DropMissing,
        None => SubsetDecision::Keep,
        Some(v) => {
            if drop.iter().any(|d| fold(d) == v) {
                SubsetDecision::Drop
            } else if !keep.is_empty() && !keep.iter().any(|k| fold(k) == v) {
                SubsetDecision::Drop
            } else {
                SubsetDecision::Keep
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub from_unit: String,
    pub to_unit: String,
    pub factor: f64,
    #[serde(default, deserialize_with = "zero_if_empty")]
    pub offset: f64,
}

fn zero_if_empty<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormalizeOutcome {
    AlreadyReference,
    Converted(f64),
    UnknownUnit,
}

/// Converts a value into the element's reference unit.
pub fn unit_normalize(value: f64, unit: &str, reference: &str, factors: &[FactorRow]) -> NormalizeOutcome {
    let unit = unit.trim();
    if unit.eq_ignore_ascii_case(reference) {
        return NormalizeOutcome::AlreadyReference;
    }
    factors
        .iter()
        .find(|f| f.from_unit.trim().eq_ignore_ascii_case(unit) && f.to_unit.trim().eq_ignore_ascii_case(reference))
        .map(|f| NormalizeOutcome::Converted(f.factor * value + f.offset))
        .unwrap_or(NormalizeOutcome::UnknownUnit)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionRow {
    pub find: String,
    #[serde(default)]
    pub replace: String,
}

/// Applies find/replace substitutions until nothing changes (bounded), then
/// trims surrounding whitespace.
pub fn clean_unit(unit: &str, subs: &[SubstitutionRow]) -> String {
    let mut current = unit.trim().to_string();
    for _ in 0..8 {
        let mut next = current.clone();
        for s in subs.iter().filter(|s| !s.find.is_empty()) {
            next = next.replace(&s.find, &s.replace);
        }
        let next = next.trim().to_string();
        if next == current {
            break;
        }
        current = next;
    }
    current
}
