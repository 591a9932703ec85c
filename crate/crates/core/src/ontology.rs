//! Default groupings for comorbidities and medication therapeutic classes.
//!
//! Diagnosis codes resolve through a code-to-group table. Medication names are
//! tokenized and looked up in a token-to-class table, falling back to an
//! optional terminology service whose answers are cached locally.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{DqaError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisMapRow {
    pub code: String,
    pub code_system: String,
    pub group_name: String,
}

#[derive(Debug, Clone, Default)]
pub struct DiagnosisMap {
    rows: HashMap<(String, String), String>,
}

impl DiagnosisMap {
    pub fn new(rows: impl IntoIterator<Item = DiagnosisMapRow>) -> Result<Self> {
        let mut map = HashMap::new();
        for r in rows {
            if r.group_name.trim().is_empty() {
                return Err(DqaError::Invalid(format!(
                    "diagnosis map: empty group_name for {}/{}",
                    r.code_system, r.code
                )));
            }
            let key = (r.code.trim().to_string(), r.code_system.trim().to_string());
            if map.insert(key, r.group_name).is_some() {
                return Err(DqaError::Invalid(format!(
                    "diagnosis map: duplicate ({}, {})",
                    r.code, r.code_system
                )));
            }
        }
        Ok(DiagnosisMap { rows: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_csv_rows::<DiagnosisMapRow>(path)?)
    }

    pub fn group_of(&self, code: &str, code_system: &str) -> Option<&str> {
        self.rows
            .get(&(code.trim().to_string(), code_system.trim().to_string()))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisAssignment {
    pub code: String,
    pub code_system: String,
    pub group_name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisMapping {
    pub assigned: Vec<DiagnosisAssignment>,
    pub residual: Vec<(String, String)>,
}

impl DiagnosisMapping {
    pub fn group_counts(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for a in &self.assigned {
            *out.entry(a.group_name.clone()).or_default() += 1;
        }
        out
    }
}

/// Maps each `(code, code_system)` to at most one comorbidity group.
pub fn map_diagnoses(codes: &[(String, String)], dmap: &DiagnosisMap) -> DiagnosisMapping {
    let mut out = DiagnosisMapping::default();
    for (code, system) in codes {
        match dmap.group_of(code, system) {
            Some(g) => out.assigned.push(DiagnosisAssignment {
                code: code.clone(),
                code_system: system.clone(),
                group_name: g.to_string(),
            }),
            None => out.residual.push((code.clone(), system.clone())),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedClassRow {
    pub token: String,
    pub therapeutic_class: String,
}

#[derive(Debug, Clone, Default)]
pub struct MedClassMap {
    tokens: HashMap<String, String>,
}

impl MedClassMap {
    pub fn new(rows: impl IntoIterator<Item = MedClassRow>) -> Result<Self> {
        let mut tokens = HashMap::new();
        for r in rows {
            let t = r.token.trim().to_lowercase();
            if tokens.insert(t.clone(), r.therapeutic_class).is_some() {
                return Err(DqaError::Invalid(format!("med class map: duplicate token `{t}`")));
            }
        }
        Ok(MedClassMap { tokens })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_csv_rows::<MedClassRow>(path)?)
    }

    pub fn class_of(&self, token: &str) -> Option<&str> {
        self.tokens.get(&token.to_lowercase()).map(String::as_str)
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, thiserror::Error)]
#[error("terminology service: {0}")]
pub struct ClientError(pub String);

/// A service that suggests therapeutic classes for a raw medication name.
pub trait TerminologyClient {
    fn classes(&self, raw_name: &str) -> std::result::Result<Vec<String>, ClientError>;
}

/// Offline client backed by a JSON object of `name -> [class, ...]`, keyed by
/// the normalized (tokenized, space-joined) name.
#[derive(Debug, Clone, Default)]
pub struct FileTerminologyClient {
    entries: BTreeMap<String, Vec<String>>,
}

impl FileTerminologyClient {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Self {
        let entries = entries
            .into_iter()
            .map(|(k, v)| (normalized_name(&k), v))
            .collect();
        FileTerminologyClient { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(crate::io::read_json(path)?))
    }
}

impl TerminologyClient for FileTerminologyClient {
    fn classes(&self, raw_name: &str) -> std::result::Result<Vec<String>, ClientError> {
        Ok(self
            .entries
            .get(&normalized_name(raw_name))
            .cloned()
            .unwrap_or_default())
    }
}

/// HTTP client: `GET <endpoint>?name=<raw name>` answering a JSON array of
/// class strings.
pub struct HttpTerminologyClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpTerminologyClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        HttpTerminologyClient {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl TerminologyClient for HttpTerminologyClient {
    fn classes(&self, raw_name: &str) -> std::result::Result<Vec<String>, ClientError> {
        let body = self
            .agent
            .get(&self.endpoint)
            .query("name", raw_name)
            .call()
            .map_err(|e| ClientError(e.to_string()))?
            .into_string()
            .map_err(|e| ClientError(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| ClientError(format!("bad response: {e}")))
    }
}

/// Remote answers keyed by normalized medication name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCache {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl ClassCache {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            crate::io::read_json(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn get(&self, raw_name: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(&normalized_name(raw_name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn normalized_name(raw: &str) -> String {
    tokenize(raw).join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSource {
    Local,
    Cache,
    Remote,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedClassLookup {
    pub classes: BTreeSet<String>,
    pub source: ClassSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Resolves a raw medication name to therapeutic classes.
///
/// The local token table wins. Only when it yields nothing are the cache and
/// then the remote client consulted. A remote failure degrades to the local
/// (empty) answer with a warning.
pub fn map_medication_class(
    raw_name: &str,
    mmap: &MedClassMap,
    cache: &mut ClassCache,
    remote: Option<&dyn TerminologyClient>,
) -> Result<MedClassLookup> {
    if raw_name.trim().is_empty() {
        return Err(DqaError::Invalid("medication name is empty".into()));
    }
    let local: BTreeSet<String> = tokenize(raw_name)
        .iter()
        .filter_map(|t| mmap.class_of(t))
        .map(String::from)
        .collect();
    if !local.is_empty() {
        return Ok(MedClassLookup {
            classes: local,
            source: ClassSource::Local,
            warnings: Vec::new(),
        });
    }
    if let Some(hit) = cache.get(raw_name) {
        return Ok(MedClassLookup {
            classes: hit.clone(),
            source: ClassSource::Cache,
            warnings: Vec::new(),
        });
    }
    let Some(client) = remote else {
        return Ok(MedClassLookup {
            classes: BTreeSet::new(),
            source: ClassSource::None,
            warnings: Vec::new(),
        });
    };
    match client.classes(raw_name) {
        Ok(classes) => {
            let set: BTreeSet<String> = classes.into_iter().collect();
            cache.entries.insert(normalized_name(raw_name), set.clone());
            Ok(MedClassLookup {
                classes: set,
                source: ClassSource::Remote,
                warnings: Vec::new(),
            })
        }
        Err(e) => {
            warn!(medication = raw_name, error = %e, "terminology lookup failed; using local result");
            Ok(MedClassLookup {
                classes: local,
                source: ClassSource::None,
                warnings: vec![e.to_string()],
            })
        }
    }
}

pub(crate) fn read_csv_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| DqaError::io(path, e))?;
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| DqaError::csv(path, e)))
        .collect()
}
