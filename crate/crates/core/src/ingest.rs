//! Observation CSV ingestion.
//!
//! Every input row is either stored or logged to a reject list with a reason,
//! so `stored + rejected == rows` holds per file. Timestamps are normalized to
//! UTC here; rows without an explicit offset are read in the configured site
//! zone.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use chrono::{DateTime, LocalResult, NaiveDate, NaiveDateTime, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{DqaError, Result};
use crate::io::ensure_parent;
use crate::model::{
    CohortManifest, ElementCategory, Locator, ObservationRecord, ObservationStore, TimestampRole,
};

pub const OBSERVATION_COLUMNS: [&str; 18] = [
    "patient_id",
    "encounter_id",
    "category",
    "source_id",
    "source_name",
    "value_raw",
    "unit_raw",
    "specimen_source",
    "mar_action",
    "route",
    "order_time",
    "collection_time",
    "result_time",
    "measurement_time",
    "administration_time",
    "ed_arrival_time",
    "admission_time",
    "discharge_time",
];

const TIMESTAMP_OFFSET: usize = 10;

#[derive(Debug, Clone)]
pub struct TzConfig {
    pub site_zone: Tz,
}

impl TzConfig {
    pub fn new(zone: &str) -> Result<Self> {
        let site_zone = zone
            .parse::<Tz>()
            .map_err(|e| DqaError::Invalid(format!("unknown time zone `{zone}`: {e}")))?;
        Ok(TzConfig { site_zone })
    }
}

impl Default for TzConfig {
    fn default() -> Self {
        TzConfig {
            site_zone: chrono_tz::UTC,
        }
    }
}

/// One rejected or warned row, in reject-file column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectEntry {
    pub line_no: u64,
    pub reason: String,
    pub raw_line: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileTally {
    pub file: String,
    pub input_rows: u64,
    pub stored: u64,
    pub rejected: u64,
    pub warnings: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FileIngest {
    pub tally: FileTally,
    pub rejects: Vec<RejectEntry>,
    pub warnings: Vec<RejectEntry>,
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub store: ObservationStore,
    pub files: Vec<FileIngest>,
}

impl IngestOutcome {
    pub fn rejected_count(&self) -> u64 {
        self.files.iter().map(|f| f.tally.rejected).sum()
    }

    /// Appends each file's rejects and warnings to `<stem>.rejects.csv` and
    /// `<stem>.warnings.csv` under `dir`.
    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let stem = Path::new(&f.tally.file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| f.tally.file.clone());
            append_reject_file(&dir.join(format!("{stem}.rejects.csv")), &f.rejects)?;
            append_reject_file(&dir.join(format!("{stem}.warnings.csv")), &f.warnings)?;
        }
        Ok(())
    }
}

/// Ingests observation CSVs into a sealed store.
pub fn ingest_observations(
    files: &[PathBuf],
    manifest: &CohortManifest,
    tz: &TzConfig,
) -> Result<IngestOutcome> {
    manifest.validate()?;
    let mut records = Vec::new();
    let mut per_file = Vec::new();
    for path in files {
        let bytes = std::fs::read(path).map_err(|e| DqaError::io(path, e))?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let fi = ingest_bytes(&name, &bytes, manifest, tz, &mut records)
            .map_err(|e| match e {
                DqaError::MalformedHeader { message, .. } => DqaError::MalformedHeader {
                    path: path.clone(),
                    message,
                },
                other => other,
            })?;
        per_file.push(fi);
    }
    Ok(IngestOutcome {
        store: ObservationStore::seal(records),
        files: per_file,
    })
}

/// Ingests one in-memory CSV document, appending accepted rows to `out`.
pub fn ingest_bytes(
    file_name: &str,
    bytes: &[u8],
    manifest: &CohortManifest,
    tz: &TzConfig,
    out: &mut Vec<ObservationRecord>,
) -> Result<FileIngest> {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut result = FileIngest {
        tally: FileTally {
            file: file_name.to_string(),
            ..FileTally::default()
        },
        ..FileIngest::default()
    };

    let mut rec = csv::ByteRecord::new();
    let header_ok = rdr
        .read_byte_record(&mut rec)
        .map_err(|e| header_error(file_name, e.to_string()))?;
    if !header_ok {
        return Err(header_error(file_name, "empty file".into()));
    }
    let header: Vec<String> = rec
        .iter()
        .map(|f| String::from_utf8_lossy(f).trim().to_string())
        .collect();
    if header != OBSERVATION_COLUMNS {
        return Err(header_error(
            file_name,
            format!("expected columns {}", OBSERVATION_COLUMNS.join(",")),
        ));
    }

    loop {
        let start = rdr.position().byte() as usize;
        match rdr.read_byte_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let end = rdr.position().byte() as usize;
                let line_no = rec.position().map(|p| p.line()).unwrap_or(0);
                let raw = String::from_utf8_lossy(&bytes[start.min(end)..end])
                    .trim_end_matches(['\r', '\n'])
                    .to_string();
                result.tally.input_rows += 1;
                let locator = Locator::new(file_name, line_no);
                match parse_row(&rec, locator, manifest, tz) {
                    Ok((record, warns)) => {
                        for reason in warns {
                            result.warnings.push(RejectEntry {
                                line_no,
                                reason,
                                raw_line: raw.clone(),
                            });
                        }
                        result.tally.stored += 1;
                        out.push(record);
                    }
                    Err(reason) => {
                        result.tally.rejected += 1;
                        result.rejects.push(RejectEntry {
                            line_no,
                            reason,
                            raw_line: raw,
                        });
                    }
                }
            }
            Err(e) => {
                // A broken quote or similar; the reader has already moved past it.
                let end = rdr.position().byte() as usize;
                let line_no = e.position().map(|p| p.line()).unwrap_or(0);
                result.tally.input_rows += 1;
                result.tally.rejected += 1;
                result.rejects.push(RejectEntry {
                    line_no,
                    reason: "unparseable_row".into(),
                    raw_line: String::from_utf8_lossy(&bytes[start.min(end)..end])
                        .trim_end_matches(['\r', '\n'])
                        .to_string(),
                });
                if end <= start {
                    break;
                }
            }
        }
    }
    result.tally.warnings = result.warnings.len() as u64;
    Ok(result)
}

fn header_error(file: &str, message: String) -> DqaError {
    DqaError::MalformedHeader {
        path: PathBuf::from(file),
        message,
    }
}

fn opt(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

type RowResult = std::result::Result<(ObservationRecord, Vec<String>), String>;

fn parse_row(
    rec: &csv::ByteRecord,
    locator: Locator,
    manifest: &CohortManifest,
    tz: &TzConfig,
) -> RowResult {
    if rec.len() != OBSERVATION_COLUMNS.len() {
        return Err(format!("field_count:{}", rec.len()));
    }
    let mut fields = Vec::with_capacity(rec.len());
    for f in rec.iter() {
        fields.push(std::str::from_utf8(f).map_err(|_| "invalid_utf8".to_string())?);
    }
    let patient_id = fields[0].trim();
    if patient_id.is_empty() {
        return Err("missing_patient_id".into());
    }
    if !manifest.patient_ids.contains(patient_id) {
        return Err("not_in_cohort".into());
    }
    let category: ElementCategory = fields[2]
        .parse()
        .map_err(|_| "unknown_category".to_string())?;
    let source_id = fields[3].trim();
    if source_id.is_empty() {
        return Err("missing_source_id".into());
    }

    let mut warnings = Vec::new();
    let mut timestamps = BTreeMap::new();
    for (i, role) in TimestampRole::ALL.iter().enumerate() {
        let cell = fields[TIMESTAMP_OFFSET + i].trim();
        if cell.is_empty() {
            continue;
        }
        match parse_timestamp(cell, tz) {
            Ok(Parsed::Exact(t)) => {
                timestamps.insert(*role, t);
            }
            Ok(Parsed::Ambiguous(t)) => {
                warnings.push(format!("ambiguous_local_time:{}", role.column()));
                timestamps.insert(*role, t);
            }
            Err(TimestampError::Nonexistent) => {
                return Err(format!("nonexistent_local_time:{}", role.column()))
            }
            Err(TimestampError::Unparseable) => {
                return Err(format!("bad_timestamp:{}", role.column()))
            }
        }
    }
    let required = category.required_roles();
    if !required.is_empty() && !required.iter().any(|r| timestamps.contains_key(r)) {
        return Err("missing_required_timestamp".into());
    }

    let record = ObservationRecord {
        locator,
        patient_id: patient_id.to_string(),
        encounter_id: opt(fields[1]),
        category,
        source_id: source_id.to_string(),
        source_name: fields[4].trim().to_string(),
        value_raw: fields[5].to_string(),
        unit_raw: opt(fields[6]),
        specimen_source: opt(fields[7]),
        mar_action: opt(fields[8]),
        route: opt(fields[9]),
        timestamps,
    };
    if let Some(t) = record.event_time() {
        if !manifest.contains_date(t.date_naive()) {
            return Err("outside_cohort_window".into());
        }
    }
    Ok((record, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parsed {
    Exact(DateTime<Utc>),
    /// Local time fell in a backward clock change; resolved to the earlier
    /// offset.
    Ambiguous(DateTime<Utc>),
}

impl Parsed {
    pub fn instant(self) -> DateTime<Utc> {
        match self {
            Parsed::Exact(t) | Parsed::Ambiguous(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampError {
    Unparseable,
    /// Local time skipped by a forward clock change.
    Nonexistent,
}

const NAIVE_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 timestamp and normalizes it to UTC.
pub fn parse_timestamp(s: &str, tz: &TzConfig) -> std::result::Result<Parsed, TimestampError> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(Parsed::Exact(t.with_timezone(&Utc)));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%:z"] {
        if let Ok(t) = DateTime::parse_from_str(s, fmt) {
            return Ok(Parsed::Exact(t.with_timezone(&Utc)));
        }
    }
    let naive = NAIVE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
        .ok_or(TimestampError::Unparseable)?;
    match tz.site_zone.from_local_datetime(&naive) {
        LocalResult::Single(t) => Ok(Parsed::Exact(t.with_timezone(&Utc))),
        LocalResult::Ambiguous(earliest, _) => Ok(Parsed::Ambiguous(earliest.with_timezone(&Utc))),
        LocalResult::None => Err(TimestampError::Nonexistent),
    }
}

/// Appends entries to a reject-format CSV, writing the header only when the
/// file is new or empty.
pub fn append_reject_file(path: &Path, entries: &[RejectEntry]) -> Result<()> {
    ensure_parent(path)?;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DqaError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["line_no", "reason", "raw_line"])
            .map_err(|e| DqaError::csv(path, e))?;
    }
    for e in entries {
        w.write_record([e.line_no.to_string().as_str(), &e.reason, &e.raw_line])
            .map_err(|e| DqaError::csv(path, e))?;
    }
    w.flush().map_err(|e| DqaError::io(path, e))
}
