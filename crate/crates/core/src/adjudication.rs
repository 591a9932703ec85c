//! Reviewer forms, decision application, the rework loop and impact
//! accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::checks::{CheckKind, CheckResult, Payload, Subtype};
use crate::error::{DqaError, Result};
use crate::model::{format_number, parse_numeric, DataElement, ElementRegistry, ElementStatus, ValueKind};
use crate::report::round_sig;
use crate::transform::ops::{out_of_range_string_to_bound, Comparator};
use crate::transform::{LogAction, TransformLogEntry, TransformRule};

pub const FORM_COLUMNS: [&str; 23] = [
    "element",
    "category",
    "n_total",
    "pct_patients",
    "mean",
    "sd",
    "reference_unit",
    "ref_mean",
    "ref_sd",
    "ref_source",
    "sufficiently_complete",
    "completeness_notes",
    "sufficiently_conformant",
    "conformance_notes",
    "sufficiently_plausible",
    "plausibility_notes",
    "include",
    "transform",
    "exclude_values",
    "values_excluded",
    "lower_bound",
    "upper_bound",
    "comments",
];

pub const DEFAULT_MAX_REWORK_ROUNDS: u32 = 3;

/// One row of the reviewer form, as raw cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FormRow {
    pub element: String,
    pub category: String,
    pub n_total: String,
    pub pct_patients: String,
    pub mean: String,
    pub sd: String,
    pub reference_unit: String,
    pub ref_mean: String,
    pub ref_sd: String,
    pub ref_source: String,
    pub sufficiently_complete: String,
    pub completeness_notes: String,
    pub sufficiently_conformant: String,
    pub conformance_notes: String,
    pub sufficiently_plausible: String,
    pub plausibility_notes: String,
    pub include: String,
    pub transform: String,
    pub exclude_values: String,
    pub values_excluded: String,
    pub lower_bound: String,
    pub upper_bound: String,
    pub comments: String,
}

impl FormRow {
    /// Fills sections 2 and 3 with the given answers.
    pub fn answer(&mut self, complete: bool, conformant: bool, plausible: bool, include: bool, transform: bool) {
        let yn = |b: bool| if b { "Y" } else { "N" }.to_string();
        self.sufficiently_complete = yn(complete);
        self.sufficiently_conformant = yn(conformant);
        self.sufficiently_plausible = yn(plausible);
        self.include = yn(include);
        self.transform = yn(transform);
        self.exclude_values = yn(false);
    }
}

/// Previously curated aggregates shown next to this project's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAggregate {
    pub element: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    #[serde(default)]
    pub source: String,
}

pub fn load_references(path: &Path) -> Result<Vec<ReferenceAggregate>> {
    crate::ontology::read_csv_rows(path)
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format_number(round_sig(v))).unwrap_or_default()
}

/// One row per pending element with section 1 prefilled.
pub fn emit_form(
    registry: &ElementRegistry,
    results: &[CheckResult],
    references: &[ReferenceAggregate],
) -> Result<Vec<FormRow>> {
    let refs: BTreeMap<&str, &ReferenceAggregate> =
        references.iter().map(|r| (r.element.as_str(), r)).collect();
    let mut by_id: BTreeMap<&str, &CheckResult> = BTreeMap::new();
    for r in results {
        by_id.insert(r.check_id.as_str(), r);
    }
    let mut rows = Vec::new();
    for e in registry.iter().filter(|e| e.status == ElementStatus::Pending) {
        let get = |s: Subtype| {
            by_id
                .get(format!("{}:{s}", e.name).as_str())
                .copied()
                .ok_or_else(|| DqaError::Coverage(format!("element `{}` has no `{s}` result", e.name)))
        };
        let Payload::Count { count } = get(Subtype::TotalCount)?.payload else {
            return Err(DqaError::Coverage(format!("bad total_count payload for `{}`", e.name)));
        };
        let Payload::Proportion { proportion, .. } = get(Subtype::PatientProportion)?.payload else {
            return Err(DqaError::Coverage(format!("bad patient_proportion payload for `{}`", e.name)));
        };
        let (mean, sd) = match by_id.get(format!("{}:value_deciles", e.name).as_str()) {
            Some(CheckResult { payload: Payload::Deciles { mean, sd, .. }, .. }) => (*mean, *sd),
            _ => (None, None),
        };
        let r = refs.get(e.name.as_str());
        rows.push(FormRow {
            element: e.name.clone(),
            category: e.category.to_string(),
            n_total: count.to_string(),
            pct_patients: format_number(round_sig(proportion * 100.0)),
            mean: cell(mean),
            sd: cell(sd),
            reference_unit: e.reference_unit.clone().unwrap_or_default(),
            ref_mean: cell(r.and_then(|r| r.mean)),
            ref_sd: cell(r.and_then(|r| r.sd)),
            ref_source: r.map(|r| r.source.clone()).unwrap_or_default(),
            ..Default::default()
        });
    }
    Ok(rows)
}

pub fn write_form(path: &Path, rows: &[FormRow]) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| DqaError::csv(path, e))?;
    if rows.is_empty() {
        w.write_record(FORM_COLUMNS).map_err(|e| DqaError::csv(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| DqaError::csv(path, e))?;
    }
    w.flush().map_err(|e| DqaError::io(path, e))
}

/// Reads a filled form. Header must match the column set exactly.
pub fn read_form(path: &Path) -> Result<Vec<FormRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| DqaError::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| DqaError::csv(path, e))?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != FORM_COLUMNS {
        return Err(DqaError::MalformedHeader {
            path: path.to_path_buf(),
            message: format!("expected {}", FORM_COLUMNS.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<FormRow>().enumerate() {
        rows.push(rec.map_err(|e| DqaError::Form {
            row: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section2 {
    pub complete: bool,
    pub complete_notes: String,
    pub conformant: bool,
    pub conformant_notes: String,
    pub plausible: bool,
    pub plausible_notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section3 {
    pub include: bool,
    pub transform: bool,
    pub exclude_values: bool,
    pub values_excluded: String,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
}

/// A validated reviewer decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationRecord {
    pub element_name: String,
    pub section2: Section2,
    pub section3: Section3,
    pub comments: String,
}

fn yes_no(raw: &str, column: &str, row: usize) -> Result<bool> {
    match raw.trim() {
        "Y" | "y" => Ok(true),
        "N" | "n" => Ok(false),
        other => Err(DqaError::Form {
            row,
            message: format!("`{column}` must be Y or N, got `{other}`"),
        }),
    }
}

fn bound(raw: &str, column: &str, row: usize) -> Result<Option<f64>> {
    if raw.trim().is_empty() {
        return Ok(None);
    }
    parse_numeric(raw).map(Some).ok_or_else(|| DqaError::Form {
        row,
        message: format!("`{column}` is not numeric: `{raw}`"),
    })
}

impl AdjudicationRecord {
    /// `row` is the 1-based line number used in error messages.
    pub fn parse(r: &FormRow, row: usize) -> Result<Self> {
        if r.element.trim().is_empty() {
            return Err(DqaError::Form { row, message: "empty element".into() });
        }
        let section2 = Section2 {
            complete: yes_no(&r.sufficiently_complete, "sufficiently_complete", row)?,
            complete_notes: r.completeness_notes.clone(),
            conformant: yes_no(&r.sufficiently_conformant, "sufficiently_conformant", row)?,
            conformant_notes: r.conformance_notes.clone(),
            plausible: yes_no(&r.sufficiently_plausible, "sufficiently_plausible", row)?,
            plausible_notes: r.plausibility_notes.clone(),
        };
        let section3 = Section3 {
            include: yes_no(&r.include, "include", row)?,
            transform: yes_no(&r.transform, "transform", row)?,
            exclude_values: yes_no(&r.exclude_values, "exclude_values", row)?,
            values_excluded: r.values_excluded.clone(),
            lower_bound: bound(&r.lower_bound, "lower_bound", row)?,
            upper_bound: bound(&r.upper_bound, "upper_bound", row)?,
        };
        if let (Some(l), Some(u)) = (section3.lower_bound, section3.upper_bound) {
            if l >= u {
                return Err(DqaError::Form {
                    row,
                    message: format!("lower_bound {l} must be below upper_bound {u}"),
                });
            }
        }
        Ok(AdjudicationRecord {
            element_name: r.element.trim().to_string(),
            section2,
            section3,
            comments: r.comments.clone(),
        })
    }

    pub fn has_bounds(&self) -> bool {
        self.section3.lower_bound.is_some() || self.section3.upper_bound.is_some()
    }

    pub fn outcome(&self) -> Outcome {
        let s2 = &self.section2;
        let s3 = &self.section3;
        if !s3.include {
            Outcome::Excluded
        } else if s2.complete && s2.conformant && s2.plausible && !s3.transform && !s3.exclude_values && !self.has_bounds() {
            Outcome::FitForUse
        } else {
            Outcome::NeedsRework
        }
    }

    /// Bounds for a follow-up filter: explicit bounds first, otherwise a
    /// `>x` / `<x` expression in `values_excluded`.
    fn filter_bounds(&self) -> Option<(Option<f64>, Option<f64>)> {
        if self.has_bounds() {
            return Some((self.section3.lower_bound, self.section3.upper_bound));
        }
        if !self.section3.exclude_values {
            return None;
        }
        let mut lower = None;
        let mut upper = None;
        for part in self.section3.values_excluded.split([';', ',']) {
            if let Some(p) = out_of_range_string_to_bound(part) {
                match p.comparator {
                    Comparator::Upper => upper = Some(p.value),
                    Comparator::Lower => lower = Some(p.value),
                    Comparator::None => {}
                }
            }
        }
        (lower.is_some() || upper.is_some()).then_some((lower, upper))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    FitForUse,
    NeedsRework,
    Excluded,
}

impl Outcome {
    fn status(self) -> ElementStatus {
        match self {
            Outcome::FitForUse => ElementStatus::FitForUse,
            Outcome::NeedsRework => ElementStatus::NeedsRework,
            Outcome::Excluded => ElementStatus::Excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedExclusion {
    pub element: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationRound {
    pub round_number: u32,
    pub timestamp: DateTime<Utc>,
    pub outcomes: BTreeMap<String, Outcome>,
    #[serde(default)]
    pub forced_exclusions: Vec<ForcedExclusion>,
    #[serde(default)]
    pub followup_rules: Vec<TransformRule>,
    /// Rows asking to exclude values that could not be turned into a bound.
    #[serde(default)]
    pub unresolved_exclusions: Vec<String>,
    #[serde(default)]
    pub records: Vec<AdjudicationRecord>,
}

/// Everything persisted between commands for one project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub project_name: String,
    pub elements: Vec<DataElement>,
    #[serde(default)]
    pub rounds: Vec<AdjudicationRound>,
    /// Times each element went from needs_rework back to pending.
    #[serde(default)]
    pub rework_passes: BTreeMap<String, u32>,
    /// Elements ever sent back for transformation.
    #[serde(default)]
    pub transformed: BTreeSet<String>,
    #[serde(default = "default_max_rework")]
    pub max_rework_rounds: u32,
    #[serde(default)]
    pub groupers_used: usize,
    #[serde(default)]
    pub checks_run: BTreeMap<CheckKind, usize>,
    #[serde(default)]
    pub reports_generated: BTreeSet<String>,
    #[serde(default)]
    pub personnel_notes: Vec<String>,
}

fn default_max_rework() -> u32 {
    DEFAULT_MAX_REWORK_ROUNDS
}

impl ProjectState {
    pub fn new(project_name: &str, registry: &ElementRegistry) -> Self {
        ProjectState {
            project_name: project_name.to_string(),
            elements: registry.iter().cloned().collect(),
            rounds: Vec::new(),
            rework_passes: BTreeMap::new(),
            transformed: BTreeSet::new(),
            max_rework_rounds: DEFAULT_MAX_REWORK_ROUNDS,
            groupers_used: 0,
            checks_run: BTreeMap::new(),
            reports_generated: BTreeSet::new(),
            personnel_notes: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn registry(&self) -> Result<ElementRegistry> {
        ElementRegistry::from_elements(self.elements.iter().cloned())
    }

    /// Carries statuses over to a freshly built registry. Elements new to
    /// the registry start pending; elements no longer defined are dropped.
    pub fn sync(&mut self, fresh: &ElementRegistry) {
        let old: BTreeMap<&str, ElementStatus> =
            self.elements.iter().map(|e| (e.name.as_str(), e.status)).collect();
        let elements = fresh
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.status = old.get(e.name.as_str()).copied().unwrap_or(ElementStatus::Pending);
                e
            })
            .collect();
        self.elements = elements;
    }

    fn set_status(&mut self, name: &str, status: ElementStatus) {
        if let Some(e) = self.elements.iter_mut().find(|e| e.name == name) {
            e.status = status;
        }
    }

    /// Moves needs_rework elements back to pending for the next pass.
    pub fn start_rework_pass(&mut self) -> Vec<String> {
        let mut moved = Vec::new();
        for e in self.elements.iter_mut().filter(|e| e.status == ElementStatus::NeedsRework) {
            e.status = ElementStatus::Pending;
            *self.rework_passes.entry(e.name.clone()).or_default() += 1;
            moved.push(e.name.clone());
        }
        moved
    }

    pub fn status_counts(&self) -> BTreeMap<ElementStatus, usize> {
        let mut out: BTreeMap<ElementStatus, usize> = [
            ElementStatus::Pending,
            ElementStatus::FitForUse,
            ElementStatus::NeedsRework,
            ElementStatus::Excluded,
        ]
        .into_iter()
        .map(|s| (s, 0))
        .collect();
        for e in &self.elements {
            *out.entry(e.status).or_default() += 1;
        }
        out
    }
}

/// Applies one filled form to the project state and returns the round.
///
/// Only pending elements may be decided. An element that would need
/// rework after `max_rework_rounds` passes is excluded instead.
pub fn apply_form(state: &mut ProjectState, rows: &[FormRow], now: DateTime<Utc>) -> Result<AdjudicationRound> {
    let round_number = state.rounds.len() as u32 + 1;
    let registry = state.registry()?;
    let mut records = Vec::with_capacity(rows.len());
    let mut seen = BTreeSet::new();
    for (i, r) in rows.iter().enumerate() {
        let row = i + 2;
        let rec = AdjudicationRecord::parse(r, row)?;
        let Some(e) = registry.get(&rec.element_name) else {
            return Err(DqaError::Form {
                row,
                message: format!("unknown element `{}`", rec.element_name),
            });
        };
        if e.status != ElementStatus::Pending {
            return Err(DqaError::Form {
                row,
                message: format!("element `{}` is {}, not pending", e.name, e.status.as_str()),
            });
        }
        if !seen.insert(rec.element_name.clone()) {
            return Err(DqaError::Form {
                row,
                message: format!("element `{}` appears twice", e.name),
            });
        }
        if rec.has_bounds() && e.value_kind != ValueKind::Numeric {
            return Err(DqaError::Form {
                row,
                message: format!("bounds given for categorical element `{}`", e.name),
            });
        }
        records.push(rec);
    }

    let mut round = AdjudicationRound {
        round_number,
        timestamp: now,
        outcomes: BTreeMap::new(),
        forced_exclusions: Vec::new(),
        followup_rules: Vec::new(),
        unresolved_exclusions: Vec::new(),
        records: Vec::new(),
    };
    for rec in &records {
        let mut outcome = rec.outcome();
        let passes = state.rework_passes.get(&rec.element_name).copied().unwrap_or(0);
        if outcome == Outcome::NeedsRework && passes >= state.max_rework_rounds {
            outcome = Outcome::Excluded;
            round.forced_exclusions.push(ForcedExclusion {
                element: rec.element_name.clone(),
                reason: format!("still not fit for use after {passes} rework rounds"),
            });
            tracing::warn!(element = %rec.element_name, passes, "rework limit reached, excluding");
        }
        if outcome == Outcome::NeedsRework {
            state.transformed.insert(rec.element_name.clone());
            if let Some((lower, upper)) = rec.filter_bounds() {
                let numeric = registry.get(&rec.element_name).is_some_and(|e| e.value_kind == ValueKind::Numeric);
                if numeric {
                    round.followup_rules.push(TransformRule::bound_filter(
                        format!("adjudication-r{round_number}-{}", rec.element_name),
                        rec.element_name.clone(),
                        lower,
                        upper,
                    ));
                } else {
                    round.unresolved_exclusions.push(rec.element_name.clone());
                }
            } else if rec.section3.exclude_values {
                round.unresolved_exclusions.push(rec.element_name.clone());
            }
        }
        state.set_status(&rec.element_name, outcome.status());
        round.outcomes.insert(rec.element_name.clone(), outcome);
        if !rec.comments.trim().is_empty() {
            state.personnel_notes.push(format!("{}: {}", rec.element_name, rec.comments.trim()));
        }
    }
    round.records = records;
    state.rounds.push(round.clone());
    Ok(round)
}

/// Appends follow-up rules to a JSON rule file, creating it if needed.
pub fn append_followup_rules(path: &Path, rules: &[TransformRule]) -> Result<()> {
    let mut all: Vec<TransformRule> = if path.exists() {
        crate::io::read_json(path)?
    } else {
        Vec::new()
    };
    for r in rules {
        if !all.iter().any(|x| x.rule_id == r.rule_id) {
            all.push(r.clone());
        }
    }
    crate::io::write_json(path, &all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksRun {
    pub conformance: usize,
    pub completeness: usize,
    pub plausibility: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactSummary {
    pub project_name: String,
    pub total_elements: usize,
    pub pending: usize,
    pub fit_for_use: usize,
    pub needs_rework: usize,
    pub excluded: usize,
    /// Elements sent back for transformation at least once and not
    /// excluded since.
    pub transformed: usize,
    pub groupers_used: usize,
    pub checks_run: ChecksRun,
    pub reports_generated: usize,
    pub rounds_completed: usize,
    pub records_modified: usize,
    pub records_dropped: usize,
    pub elements_with_rule_activity: usize,
    pub personnel_notes: Vec<String>,
}

/// Counts for one project from its state and latest transform log.
pub fn summarize_impact(state: &ProjectState, log: &[TransformLogEntry]) -> ImpactSummary {
    let counts = state.status_counts();
    let excluded: BTreeSet<&str> = state
        .elements
        .iter()
        .filter(|e| e.status == ElementStatus::Excluded)
        .map(|e| e.name.as_str())
        .collect();
    let get = |k| state.checks_run.get(&k).copied().unwrap_or(0);
    let checks_run = ChecksRun {
        conformance: get(CheckKind::Conformance),
        completeness: get(CheckKind::Completeness),
        plausibility: get(CheckKind::Plausibility),
        total: state.checks_run.values().sum(),
    };
    let touched: BTreeSet<(&str, &crate::model::Locator)> = log
        .iter()
        .filter(|e| e.action == LogAction::Modified)
        .map(|e| (e.element_name.as_str(), &e.locator))
        .collect();
    let active: BTreeSet<&str> = log
        .iter()
        .filter(|e| e.action != LogAction::PassthroughCounted)
        .map(|e| e.element_name.as_str())
        .collect();
    ImpactSummary {
        project_name: state.project_name.clone(),
        total_elements: state.elements.len(),
        pending: counts[&ElementStatus::Pending],
        fit_for_use: counts[&ElementStatus::FitForUse],
        needs_rework: counts[&ElementStatus::NeedsRework],
        excluded: counts[&ElementStatus::Excluded],
        transformed: state
            .transformed
            .iter()
            .filter(|n| !excluded.contains(n.as_str()))
            .count(),
        groupers_used: state.groupers_used,
        checks_run,
        reports_generated: state.reports_generated.len(),
        rounds_completed: state.rounds.len(),
        records_modified: touched.len(),
        records_dropped: log.iter().filter(|e| e.action == LogAction::Dropped).count(),
        elements_with_rule_activity: active.len(),
        personnel_notes: state.personnel_notes.clone(),
    }
}

impl ImpactSummary {
    /// Two-column plain-text table.
    pub fn to_text(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("Project", self.project_name.clone()),
            ("Data elements", self.total_elements.to_string()),
            ("Groupers used", self.groupers_used.to_string()),
            ("Checks run", self.checks_run.total.to_string()),
            ("  conformance", self.checks_run.conformance.to_string()),
            ("  completeness", self.checks_run.completeness.to_string()),
            ("  plausibility", self.checks_run.plausibility.to_string()),
            ("Reports generated", self.reports_generated.to_string()),
            ("Adjudication rounds", self.rounds_completed.to_string()),
            ("Elements transformed", self.transformed.to_string()),
            ("Elements excluded", self.excluded.to_string()),
            ("Fit for use", self.fit_for_use.to_string()),
            ("Needs rework", self.needs_rework.to_string()),
            ("Pending", self.pending.to_string()),
            ("Records modified", self.records_modified.to_string()),
            ("Records dropped", self.records_dropped.to_string()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        for n in &self.personnel_notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}
