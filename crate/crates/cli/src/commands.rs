use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use dqa_core::adjudication::{
    append_followup_rules, apply_form, emit_form, load_references, read_form, summarize_impact,
    write_form, ProjectState,
};
use dqa_core::checks::{run_all, CheckConfig, CheckKind, CheckResult};
use dqa_core::grouping::{apply_groupers, GrouperRegistry};
use dqa_core::ingest::{ingest_observations, TzConfig};
use dqa_core::io::{read_json, read_jsonl, write_json, write_jsonl, write_text};
use dqa_core::metadata::curate_metadata;
use dqa_core::model::{
    CohortManifest, ElementCategory, ElementRecord, ElementRegistry, ElementStore,
    ObservationRecord, ObservationStore,
};
use dqa_core::ontology::{
    map_diagnoses, map_medication_class, ClassCache, DiagnosisMap, FileTerminologyClient,
    HttpTerminologyClient, MedClassLookup, MedClassMap, TerminologyClient,
};
use dqa_core::report::{build_report, write_report};
use dqa_core::synth::{generate, SynthSpec};
use dqa_core::transform::rules::{DateSentinelParams, NumericSentinelParams};
use dqa_core::transform::{apply_rules, load_rules, write_log, RuleSpec, TransformLogEntry, TransformRule};
use dqa_core::{DqaError, Result};
use tracing::info;

use crate::config::ProjectConfig;

/// Shared inputs for every command.
pub struct Ctx {
    pub cfg: ProjectConfig,
    pub out: PathBuf,
    pub now: DateTime<Utc>,
    pub seed: Option<u64>,
}

impl Ctx {
    fn dir(&self) -> PathBuf {
        self.out.join(&self.cfg.project_name)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir().join(name)
    }

    fn require_artifact(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.artifact(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(DqaError::Invalid(format!(
                "{} not found; run `{producer}` first",
                p.display()
            )))
        }
    }

    fn manifest(&self) -> Result<CohortManifest> {
        CohortManifest::load(&self.cfg.require(&self.cfg.paths.manifest, "manifest")?)
    }

    fn state_path(&self) -> PathBuf {
        self.artifact("state.json")
    }

    fn state(&self) -> Result<ProjectState> {
        ProjectState::load(&self.require_artifact("state.json", "group")?)
    }

    fn element_store(&self, name: &str, producer: &str) -> Result<ElementStore> {
        let recs: Vec<ElementRecord> = read_jsonl(&self.require_artifact(name, producer)?)?;
        Ok(ElementStore::seal(recs))
    }

    fn results(&self) -> Result<Vec<CheckResult>> {
        read_json(&self.require_artifact("check_results.json", "check")?)
    }
}

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let tz = TzConfig::new(&ctx.cfg.site_timezone)?;
    if ctx.cfg.paths.observations.is_empty() {
        return Err(DqaError::Invalid("config has no `paths.observations`".into()));
    }
    let files: Vec<PathBuf> = ctx.cfg.paths.observations.iter().map(|p| ctx.cfg.resolve(p)).collect();
    let outcome = ingest_observations(&files, &manifest, &tz)?;
    let dir = ctx.dir();
    for name in outcome.files.iter().map(|f| &f.tally.file) {
        let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for suffix in ["rejects", "warnings"] {
            let p = dir.join(format!("{stem}.{suffix}.csv"));
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| DqaError::io(&p, e))?;
            }
        }
    }
    outcome.write_logs(&dir)?;
    write_jsonl(&ctx.artifact("observations.jsonl"), outcome.store.records())?;
    let tallies: Vec<_> = outcome.files.iter().map(|f| &f.tally).collect();
    write_json(&ctx.artifact("ingest_summary.json"), &tallies)?;
    info!(
        stored = outcome.store.len(),
        rejected = outcome.rejected_count(),
        "ingest complete"
    );
    Ok(())
}

fn observations(ctx: &Ctx) -> Result<ObservationStore> {
    let recs: Vec<ObservationRecord> = read_jsonl(&ctx.require_artifact("observations.jsonl", "ingest")?)?;
    Ok(ObservationStore::seal(recs))
}

pub fn metadata(ctx: &Ctx) -> Result<()> {
    let store = observations(ctx)?;
    let k = ctx.cfg.metadata_top_k.unwrap_or(dqa_core::metadata::DEFAULT_TOP_K);
    for cat in [ElementCategory::Analyte, ElementCategory::Flowsheet, ElementCategory::Medication] {
        let table = curate_metadata(&store, cat, k)?;
        write_json(&ctx.artifact(&format!("metadata.{}.json", cat.as_str())), &table)?;
    }

    if let Some(p) = &ctx.cfg.paths.med_class_map {
        let mmap = MedClassMap::load(&ctx.cfg.resolve(p))?;
        let cache_path = ctx.artifact("medication_class_cache.json");
        let mut cache = ClassCache::load_or_default(&cache_path)?;
        let file_client = ctx
            .cfg
            .paths
            .terminology_file
            .as_ref()
            .map(|p| FileTerminologyClient::load(&ctx.cfg.resolve(p)))
            .transpose()?;
        let http_client = ctx
            .cfg
            .terminology_endpoint
            .as_ref()
            .map(|u| HttpTerminologyClient::new(u.clone(), Duration::from_secs(10)));
        let remote: Option<&dyn TerminologyClient> = match (&file_client, &http_client) {
            (Some(f), _) => Some(f),
            (None, Some(h)) => Some(h),
            (None, None) => None,
        };
        let names: BTreeSet<&str> = store
            .records()
            .iter()
            .filter(|r| r.category == ElementCategory::Medication && !r.source_name.trim().is_empty())
            .map(|r| r.source_name.as_str())
            .collect();
        let mut classes: BTreeMap<&str, MedClassLookup> = BTreeMap::new();
        for n in names {
            classes.insert(n, map_medication_class(n, &mmap, &mut cache, remote)?);
        }
        cache.save(&cache_path)?;
        write_json(&ctx.artifact("medication_classes.json"), &classes)?;
    }

    if let Some(p) = &ctx.cfg.paths.diagnosis_map {
        let dmap = DiagnosisMap::load(&ctx.cfg.resolve(p))?;
        // Comorbidity rows carry the code in source_id and its system in unit_raw.
        let codes: Vec<(String, String)> = store
            .records()
            .iter()
            .filter(|r| r.category == ElementCategory::Comorbidity)
            .map(|r| (r.source_id.clone(), r.unit_raw.clone().unwrap_or_default()))
            .collect();
        write_json(&ctx.artifact("diagnosis_groups.json"), &map_diagnoses(&codes, &dmap))?;
    }
    info!("metadata curated");
    Ok(())
}

pub fn group(ctx: &Ctx) -> Result<()> {
    let store = observations(ctx)?;
    let groupers = GrouperRegistry::load(&ctx.cfg.require(&ctx.cfg.paths.groupers, "groupers")?)?;
    let outcome = apply_groupers(&store, &groupers);
    write_jsonl(&ctx.artifact("grouped.jsonl"), outcome.grouped.records())?;
    write_text(&ctx.artifact("ungrouped.csv"), &outcome.ungrouped.to_csv())?;
    write_json(&ctx.artifact("grouping_summary.json"), &outcome.matched_per_grouper)?;

    let fresh = groupers.element_registry();
    let mut state = match ProjectState::load(&ctx.state_path()) {
        Ok(s) => s,
        Err(e) if e.is_io() => ProjectState::new(&ctx.cfg.project_name, &fresh),
        Err(e) => return Err(e),
    };
    state.sync(&fresh);
    state.groupers_used = groupers.len();
    if let Some(m) = ctx.cfg.max_rework_rounds {
        state.max_rework_rounds = m;
    }
    state.save(&ctx.state_path())?;
    info!(
        grouped = outcome.grouped.len(),
        ungrouped = outcome.ungrouped.total,
        "grouping complete"
    );
    Ok(())
}

fn site_rules(ctx: &Ctx, registry: &ElementRegistry) -> Vec<TransformRule> {
    let cats: BTreeSet<ElementCategory> = registry.iter().map(|e| e.category).collect();
    let mut out = Vec::new();
    for c in cats {
        if !ctx.cfg.sentinels.is_empty() {
            out.push(TransformRule::new(
                format!("site-sentinel-numeric-{c}"),
                c.as_str(),
                RuleSpec::SentinelNumericToMissing(NumericSentinelParams { sentinels: ctx.cfg.sentinels.clone() }),
            ));
        }
        if !ctx.cfg.date_sentinels.is_empty() {
            out.push(TransformRule::new(
                format!("site-sentinel-date-{c}"),
                c.as_str(),
                RuleSpec::SentinelDateToMissing(DateSentinelParams { sentinels: ctx.cfg.date_sentinels.clone() }),
            ));
        }
    }
    out
}

pub fn transform(ctx: &Ctx) -> Result<()> {
    let mut state = ctx.state()?;
    let reopened = state.start_rework_pass();
    if !reopened.is_empty() {
        info!(elements = reopened.len(), "rework pass: elements back to pending");
    }
    let registry = state.registry()?;
    let grouped = ctx.element_store("grouped.jsonl", "group")?;
    let mut rules = site_rules(ctx, &registry);
    if let Some(p) = &ctx.cfg.paths.rules {
        rules.extend(load_rules(&ctx.cfg.resolve(p))?);
    }
    let followup = ctx.artifact("followup_rules.json");
    if followup.exists() {
        rules.extend(load_rules(&followup)?);
    }
    let outcome = apply_rules(&grouped, &rules, &registry)?;
    write_jsonl(&ctx.artifact("transformed.jsonl"), outcome.store.records())?;
    write_log(&ctx.artifact("transform_log.jsonl"), &outcome.log)?;
    write_json(&ctx.artifact("transform_counts.json"), &outcome.counts)?;
    state.save(&ctx.state_path())?;
    info!(
        rules = rules.len(),
        records = outcome.store.len(),
        log_entries = outcome.log.len(),
        "transform complete"
    );
    Ok(())
}

pub fn check(ctx: &Ctx) -> Result<()> {
    let mut state = ctx.state()?;
    let registry = state.registry()?;
    let store = ctx.element_store("transformed.jsonl", "transform")?;
    let manifest = ctx.manifest()?;
    let config = match &ctx.cfg.paths.checks {
        Some(p) => CheckConfig::load(&ctx.cfg.resolve(p))?,
        None => CheckConfig::default(),
    };
    let results = run_all(&store, &registry, &manifest, &config)?;
    write_json(&ctx.artifact("check_results.json"), &results)?;
    let mut by_kind: BTreeMap<CheckKind, usize> = CheckKind::ALL.iter().map(|k| (*k, 0)).collect();
    for r in &results {
        *by_kind.entry(r.kind).or_default() += 1;
    }
    state.checks_run = by_kind;
    state.save(&ctx.state_path())?;
    info!(checks = results.len(), "checks complete");
    Ok(())
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let mut state = ctx.state()?;
    let registry = state.registry()?;
    let results = ctx.results()?;
    for cat in ctx.cfg.report_categories()? {
        let r = build_report(&results, &registry, cat, &ctx.cfg.project_name, ctx.now)?;
        let (json, _) = write_report(&ctx.out, &r)?;
        info!(path = %json.display(), elements = r.elements.len(), "report written");
        state.reports_generated.insert(r.report_category);
    }
    state.save(&ctx.state_path())
}

pub fn adjudicate_emit(ctx: &Ctx, form: Option<PathBuf>) -> Result<()> {
    let state = ctx.state()?;
    let registry = state.registry()?;
    let results = ctx.results()?;
    let refs = match &ctx.cfg.paths.reference_aggregates {
        Some(p) => load_references(&ctx.cfg.resolve(p))?,
        None => Vec::new(),
    };
    let rows = emit_form(&registry, &results, &refs)?;
    let path = form.unwrap_or_else(|| ctx.artifact("adjudication_form.csv"));
    write_form(&path, &rows)?;
    info!(rows = rows.len(), path = %path.display(), "form written");
    Ok(())
}

pub fn adjudicate_apply(ctx: &Ctx, form: &Path) -> Result<()> {
    let mut state = ctx.state()?;
    let rows = read_form(form)?;
    let round = apply_form(&mut state, &rows, ctx.now)?;
    append_followup_rules(&ctx.artifact("followup_rules.json"), &round.followup_rules)?;
    write_json(&ctx.artifact(&format!("adjudication_round_{}.json", round.round_number)), &round)?;
    state.save(&ctx.state_path())?;
    info!(round = round.round_number, decisions = round.outcomes.len(), "adjudication applied");
    Ok(())
}

pub fn summarize(ctx: &Ctx) -> Result<()> {
    let state = ctx.state()?;
    let log_path = ctx.artifact("transform_log.jsonl");
    let log: Vec<TransformLogEntry> = if log_path.exists() { read_jsonl(&log_path)? } else { Vec::new() };
    let summary = summarize_impact(&state, &log);
    write_json(&ctx.artifact("impact_summary.json"), &summary)?;
    write_text(&ctx.artifact("impact_summary.txt"), &summary.to_text())?;
    info!(transformed = summary.transformed, excluded = summary.excluded, "summary written");
    Ok(())
}

pub fn synth(ctx: &Ctx, spec: Option<PathBuf>) -> Result<()> {
    let path = match spec {
        Some(p) => p,
        None => ctx.cfg.require(&ctx.cfg.paths.synth_spec, "synth_spec")?,
    };
    let mut spec = SynthSpec::load(&path)?;
    if let Some(seed) = ctx.seed.or(ctx.cfg.seed) {
        spec.seed = Some(seed);
    }
    let out = generate(&spec)?;
    let dir = ctx.artifact("synth");
    out.write(&dir, &spec.file_name)?;
    info!(dir = %dir.display(), ledger = out.ledger.len(), "synthetic cohort written");
    Ok(())
}

pub fn pipeline(ctx: &Ctx) -> Result<()> {
    ingest(ctx)?;
    group(ctx)?;
    transform(ctx)?;
    check(ctx)?;
    report(ctx)
}
