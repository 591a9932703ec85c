use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use dqa_core::model::ElementCategory;
use dqa_core::report::DEFAULT_REPORTS;
use dqa_core::{DqaError, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub observations: Vec<PathBuf>,
    pub groupers: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub checks: Option<PathBuf>,
    pub diagnosis_map: Option<PathBuf>,
    pub med_class_map: Option<PathBuf>,
    /// JSON map from medication name to classes, used in place of a remote
    /// terminology service.
    pub terminology_file: Option<PathBuf>,
    pub reference_aggregates: Option<PathBuf>,
    pub synth_spec: Option<PathBuf>,
}

/// Per-project settings. Relative paths resolve against the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub project_name: String,
    #[serde(default = "default_tz")]
    pub site_timezone: String,
    pub report_categories: Option<Vec<String>>,
    #[serde(default)]
    pub sentinels: Vec<f64>,
    #[serde(default)]
    pub date_sentinels: Vec<NaiveDate>,
    pub seed: Option<u64>,
    pub max_rework_rounds: Option<u32>,
    pub metadata_top_k: Option<usize>,
    pub terminology_endpoint: Option<String>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(skip)]
    pub base: PathBuf,
}

fn default_tz() -> String {
    "UTC".into()
}

impl ProjectConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DqaError::io(path, e))?;
        let mut cfg: ProjectConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| DqaError::json(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| DqaError::Invalid(format!("{}: {e}", path.display())))?
        };
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.project_name.trim().is_empty()
            || self.project_name.contains(['/', '\\'])
            || self.project_name.starts_with('.')
        {
            return Err(DqaError::Invalid(format!(
                "project_name `{}` must be a plain directory name",
                self.project_name
            )));
        }
        self.report_categories()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn require(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        p.as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| DqaError::Invalid(format!("config has no `paths.{what}`")))
    }

    pub fn report_categories(&self) -> Result<Vec<ElementCategory>> {
        match &self.report_categories {
            None => Ok(DEFAULT_REPORTS.to_vec()),
            Some(v) if v.is_empty() => Err(DqaError::Invalid("report_categories is empty".into())),
            Some(v) => v
                .iter()
                .map(|name| {
                    ElementCategory::from_report_name(name)
                        .or_else(|| name.parse().ok())
                        .ok_or_else(|| DqaError::Invalid(format!("unknown report category `{name}`")))
                })
                .collect(),
        }
    }
}
