//! Acceptance criteria, one pass/fail line each. Exits nonzero if any fail.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chrono::{NaiveDate, TimeZone, Utc};
use dqa_core::adjudication::{apply_form, emit_form, summarize_impact, ProjectState};
use dqa_core::checks::{
    assign_checks, run_all, run_association, run_checks, subtypes_for, AssociationSpec, CheckConfig, CheckKind,
    CheckSpec, CheckStatus, Direction, Payload, Split, Subtype,
};
use dqa_core::grouping::{apply_groupers, Grouper, GrouperMember, GrouperRegistry};
use dqa_core::ingest::{ingest_bytes, TzConfig, OBSERVATION_COLUMNS};
use dqa_core::model::ElementCategory::{self, *};
use dqa_core::model::ValueKind::{self, *};
use dqa_core::model::{
    CohortManifest, DataElement, ElementRecord, ElementRegistry, ElementStore, Locator, Month, ObservationRecord,
    ObservationStore, TimestampRole, Value,
};
use dqa_core::stats::{box_stats, deciles};
use dqa_core::synth::{generate, FlawKind, SynthSpec};
use dqa_core::transform::ops::{
    Affine, CategoryRow, FactorRow, SubstitutionRow, ThresholdDirection, ThresholdParams,
};
use dqa_core::transform::rules::{
    CompositeParams, DateSentinelParams, MultiSelectParams, NumericSentinelParams, SubsetParams, TableParams,
    TableSource, ValueListParams,
};
use dqa_core::transform::{apply_rules, LogAction, RuleKind, RuleSpec, TransformOutcome, TransformRule, TAXONOMY};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- helpers

fn t(y: i32, m: u32, d: u32) -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 12, 0, 0).unwrap()
}

fn obs(category: ElementCategory, line: u64, patient: &str, raw: &str) -> ObservationRecord {
    let role = category.required_roles().first().copied().unwrap_or(TimestampRole::Order);
    ObservationRecord {
        locator: Locator::new("obs.csv", line),
        patient_id: patient.into(),
        encounter_id: None,
        category,
        source_id: "1".into(),
        source_name: "src".into(),
        value_raw: raw.into(),
        unit_raw: None,
        specimen_source: None,
        mar_action: None,
        route: None,
        timestamps: BTreeMap::from([(role, t(2021, 1, 15))]),
    }
}

fn rec(element: &str, category: ElementCategory, kind: ValueKind, line: u64, raw: &str) -> ElementRecord {
    ElementRecord {
        element: element.into(),
        value: Value::from_raw(raw, kind),
        unit: None,
        flags: vec![],
        source: obs(category, line, "P1", raw),
    }
}

fn with_unit(mut r: ElementRecord, u: &str) -> ElementRecord {
    r.unit = Some(u.into());
    r.source.unit_raw = Some(u.into());
    r
}

fn with_specimen(mut r: ElementRecord, s: &str) -> ElementRecord {
    r.source.specimen_source = Some(s.into());
    r
}

fn with_action(mut r: ElementRecord, a: &str) -> ElementRecord {
    r.source.mar_action = Some(a.into());
    r
}

fn manifest(patients: usize, start: NaiveDate, end: NaiveDate) -> CohortManifest {
    CohortManifest {
        project_name: "acceptance".into(),
        patient_ids: (1..=patients).map(|i| format!("P{i}")).collect(),
        start_date: start,
        end_date: end,
        inclusion_note: String::new(),
    }
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn one_element(name: &str, c: ElementCategory, k: ValueKind, unit: Option<&str>) -> ElementRegistry {
    let e = DataElement::new(name, c, k);
    ElementRegistry::from_elements([match unit {
        Some(u) => e.with_reference_unit(u),
        None => e,
    }])
    .unwrap()
}

fn transform(reg: &ElementRegistry, rule: TransformRule, records: Vec<ElementRecord>) -> Result<TransformOutcome, String> {
    apply_rules(&ElementStore::seal(records), &[rule], reg).map_err(|e| e.to_string())
}

fn vals(out: &TransformOutcome) -> Vec<Value> {
    out.store.records().iter().map(|r| r.value.clone()).collect()
}

fn num(x: f64) -> Value {
    Value::Number(x)
}

fn text(s: &str) -> Value {
    Value::Text(s.into())
}

fn near(v: &Value, want: f64, tol: f64) -> bool {
    v.as_number().is_some_and(|x| (x - want).abs() <= tol)
}

fn cats(pairs: &[(&str, &str, Option<i64>)]) -> TableSource<CategoryRow> {
    TableSource::Rows(
        pairs
            .iter()
            .map(|(i, o, r)| CategoryRow { input: i.to_string(), output: o.to_string(), rank: *r })
            .collect(),
    )
}

fn factor_table(pairs: &[(&str, &str, f64)]) -> TableSource<FactorRow> {
    TableSource::Rows(
        pairs
            .iter()
            .map(|(f, to, x)| FactorRow { from_unit: f.to_string(), to_unit: to.to_string(), factor: *x, offset: 0.0 })
            .collect(),
    )
}

fn subset(keep: &[&str], drop: &[&str]) -> SubsetParams {
    SubsetParams {
        keep: keep.iter().map(|s| s.to_string()).collect(),
        drop: drop.iter().map(|s| s.to_string()).collect(),
    }
}

// ---------------------------------------------------------------- AC-1

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut elements = Vec::new();
    let mut add = |prefix: &str, n: usize, c: ElementCategory, k: ValueKind| {
        for i in 0..n {
            elements.push(DataElement::new(format!("{prefix}{i}"), c, k));
        }
    };
    add("an", 10, Analyte, Numeric);
    add("ac", 5, Analyte, Categorical);
    add("fn", 8, Flowsheet, Numeric);
    add("fc", 4, Flowsheet, Categorical);
    add("med", 6, Medication, Categorical);
    add("en", 3, Encounter, Numeric);
    add("ec", 2, Encounter, Categorical);
    let reg = ElementRegistry::from_elements(elements).map_err(|e| e.to_string())?;
    let specs = assign_checks(&reg);
    let elapsed = start.elapsed();

    let expected = 10 * 8 + 5 * 8 + 8 * 6 + 4 * 6 + 6 * 7 + 5 * 6;
    ensure!(specs.len() == expected && expected == 264, "{} checks, want 264", specs.len());
    // Independent per-kind sums from the per-type (conformance, completeness, plausibility) splits.
    let per_type = [(10, (3, 3, 2)), (5, (3, 3, 2)), (8, (1, 3, 2)), (4, (1, 3, 2)), (6, (2, 3, 2)), (5, (1, 3, 2))];
    let want = per_type.iter().fold((0, 0, 0), |acc, (n, (a, b, c))| (acc.0 + n * a, acc.1 + n * b, acc.2 + n * c));
    let count = |k: CheckKind| specs.iter().filter(|s| s.kind == k).count();
    let got = (count(CheckKind::Conformance), count(CheckKind::Completeness), count(CheckKind::Plausibility));
    ensure!(got == want, "kind partition {got:?}, want {want:?}");
    let ids: BTreeSet<_> = specs.iter().map(|s| &s.check_id).collect();
    ensure!(ids.len() == specs.len(), "duplicate check ids");
    ensure!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Ok(format!("264 checks = {} conformance + {} completeness + {} plausibility in {elapsed:.2?}", got.0, got.1, got.2))
}

// ---------------------------------------------------------------- AC-2

fn ac2() -> Outcome {
    let golden: BTreeMap<String, BTreeMap<String, Vec<String>>> =
        serde_json::from_str(include_str!("../../core/tests/fixtures/check_matrix.json")).map_err(|e| e.to_string())?;
    ensure!(golden.len() == 7, "golden has {} rows", golden.len());
    for (row, want) in &golden {
        let (c, k) = row.split_once('/').ok_or("bad golden key")?;
        let category: ElementCategory = c.parse().map_err(|_| format!("bad category {c}"))?;
        let kind = if k == "numeric" { Numeric } else { Categorical };
        let mut got: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in subtypes_for(category, kind) {
            got.entry(s.kind().as_str().into()).or_default().push(s.as_str().into());
        }
        ensure!(&got == want, "{row}: got {got:?}, want {want:?}");
    }
    let med = &golden["medication/categorical"]["conformance"];
    ensure!(med.contains(&"mar_action_frequency".to_string()), "medication lacks MAR action table");
    Ok("7 element-type rows match the golden subtype matrix".into())
}

// ---------------------------------------------------------------- AC-3

fn utc_case(category: ElementCategory, kind: ValueKind, raw: &str) -> Result<(), String> {
    let role = category.required_roles()[0];
    let mut cells = vec![""; OBSERVATION_COLUMNS.len()];
    cells[0] = "P1";
    cells[2] = category.as_str();
    cells[3] = "1";
    cells[4] = "x";
    cells[5] = raw;
    let col = OBSERVATION_COLUMNS.iter().position(|c| *c == role.column()).unwrap();
    cells[col] = "2021-07-01 08:00";
    let csv = format!("{}\n{}\n", OBSERVATION_COLUMNS.join(","), cells.join(","));
    let tz = TzConfig::new("America/New_York").map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    ingest_bytes("obs.csv", csv.as_bytes(), &manifest(1, date(2021, 1, 1), date(2021, 12, 31)), &tz, &mut out)
        .map_err(|e| e.to_string())?;
    let source = out.pop().ok_or("row rejected")?;
    let r = ElementRecord { element: "e".into(), value: Value::from_raw(raw, kind), unit: None, flags: vec![], source };
    let out = transform(&one_element("e", category, kind, None), TransformRule::new("u", "e", RuleSpec::UtcConvert), vec![r])?;
    let ts = out.store.records()[0].source.timestamps[&role];
    ensure!(ts == Utc.with_ymd_and_hms(2021, 7, 1, 12, 0, 0).unwrap(), "got {ts}");
    Ok(())
}

fn taxonomy_case(category: ElementCategory, kind: ValueKind, rule: RuleKind) -> Result<(), String> {
    use RuleKind as K;
    let el = |n: &str, u: Option<&str>| one_element(n, category, kind, u);
    match (category, kind, rule) {
        (_, _, K::UtcConvert) => utc_case(category, kind, if kind == Numeric { "1" } else { "a" }),
        (Analyte, Numeric, K::UnitNormalize) => {
            let out = transform(
                &el("creatinine", Some("mg/dL")),
                TransformRule::new("r", "creatinine", RuleSpec::UnitNormalize(TableParams { table: factor_table(&[("mg/mL", "mg/dL", 100.0)]) })),
                vec![with_unit(rec("creatinine", category, kind, 2, "2.5"), "mg/mL")],
            )?;
            ensure!(near(&out.store.records()[0].value, 250.0, 1e-9), "{:?}", vals(&out));
            Ok(())
        }
        (Analyte, _, K::SpecimenSubset) => {
            let out = transform(
                &el("glucose", None),
                TransformRule::new("r", "glucose", RuleSpec::SpecimenSubset(subset(&[], &["urine"]))),
                vec![
                    with_specimen(rec("glucose", category, kind, 2, "90"), "Urine"),
                    with_specimen(rec("glucose", category, kind, 3, "91"), "Serum"),
                ],
            )?;
            ensure!(out.store.len() == 1 && out.store.records()[0].locator().line == 3, "{:?}", vals(&out));
            Ok(())
        }
        (Analyte, Numeric, K::UnitStringCleanup) => {
            let subs = vec![SubstitutionRow { find: "µ".into(), replace: "u".into() }];
            let out = transform(
                &el("ammonia", Some("umol/L")),
                TransformRule::new("r", "ammonia", RuleSpec::UnitStringCleanup(TableParams { table: TableSource::Rows(subs) })),
                vec![with_unit(rec("ammonia", category, kind, 2, "30"), "µmol/L")],
            )?;
            ensure!(out.store.records()[0].unit.as_deref() == Some("umol/L"), "unit not cleaned");
            Ok(())
        }
        (Analyte, Numeric, K::BoundFilter) => {
            let out = transform(
                &el("creatinine", None),
                TransformRule::bound_filter("r", "creatinine", None, Some(150.0)),
                vec![rec("creatinine", category, kind, 2, "200"), rec("creatinine", category, kind, 3, "150")],
            )?;
            ensure!(vals(&out) == vec![num(150.0)], "creatinine >150 not dropped: {:?}", vals(&out));
            Ok(())
        }
        (Analyte, Numeric, K::OutOfRangeStringToBound) => {
            let out = transform(
                &el("glucose", None),
                TransformRule::new("r", "glucose", RuleSpec::OutOfRangeStringToBound),
                vec![rec("glucose", category, kind, 2, ">600 mg/dL"), rec("glucose", category, kind, 3, "<0.01")],
            )?;
            ensure!(vals(&out) == vec![num(600.0), num(0.01)], "{:?}", vals(&out));
            Ok(())
        }
        (_, Categorical, K::HierarchicalMap) => {
            let table = cats(&[("no growth", "negative", Some(0)), ("staph aureus", "pathogen", Some(2))]);
            let out = transform(
                &el("culture", None),
                TransformRule::new("r", "culture", RuleSpec::HierarchicalMap(TableParams { table })),
                vec![rec("culture", category, kind, 2, "No growth"), rec("culture", category, kind, 3, "Staph aureus")],
            )?;
            ensure!(vals(&out) == vec![text("negative"), text("pathogen")], "{:?}", vals(&out));
            Ok(())
        }
        (_, Categorical, K::BinaryMap) => {
            let table = cats(&[("reactive", "1", None), ("non-reactive", "0", None)]);
            let out = transform(
                &el("titer", None),
                TransformRule::new("r", "titer", RuleSpec::BinaryMap(TableParams { table })),
                vec![rec("titer", category, kind, 2, "Reactive"), rec("titer", category, kind, 3, "non-reactive")],
            )?;
            ensure!(vals(&out) == vec![text("1"), text("0")], "{:?}", vals(&out));
            Ok(())
        }
        (Analyte, Categorical, K::IndeterminateToMissing) => {
            let out = transform(
                &el("potassium", None),
                TransformRule::new(
                    "r",
                    "potassium",
                    RuleSpec::IndeterminateToMissing(ValueListParams { values: vec!["hemolyzed sample".into()] }),
                ),
                vec![rec("potassium", category, kind, 2, "hemolyzed sample")],
            )?;
            ensure!(vals(&out) == vec![Value::Missing], "{:?}", vals(&out));
            Ok(())
        }
        (Flowsheet, Numeric, K::BoundFilter) => {
            let out = transform(
                &el("pulse", None),
                TransformRule::bound_filter("r", "pulse", None, Some(400.0)),
                vec![rec("pulse", category, kind, 2, "450"), rec("pulse", category, kind, 3, "400")],
            )?;
            ensure!(vals(&out) == vec![num(400.0)], "pulse >400 not dropped: {:?}", vals(&out));
            Ok(())
        }
        (Flowsheet, Numeric, K::CompositeSplit) => {
            let out = transform(
                &el("bp", None),
                TransformRule::new(
                    "r",
                    "bp",
                    RuleSpec::CompositeSplit(CompositeParams { separator: "/".into(), parts: vec!["systolic".into(), "diastolic".into()] }),
                ),
                vec![rec("bp", category, kind, 2, "120/80")],
            )?;
            let want = Value::Composite(BTreeMap::from([("systolic".into(), 120.0), ("diastolic".into(), 80.0)]));
            ensure!(vals(&out) == vec![want], "{:?}", vals(&out));
            Ok(())
        }
        (Flowsheet, Numeric, K::UnitNormalize) => {
            let out = transform(
                &el("weight", Some("lbs")),
                TransformRule::new("r", "weight", RuleSpec::UnitNormalize(TableParams { table: factor_table(&[("kg", "lbs", 2.204623)]) })),
                vec![with_unit(rec("weight", category, kind, 2, "70"), "kg")],
            )?;
            ensure!(near(&out.store.records()[0].value, 154.32, 0.005), "{:?}", vals(&out));
            Ok(())
        }
        (Flowsheet, Numeric, K::ThresholdUnitImpute) => {
            let impute = |threshold, direction, factor, offset| {
                RuleSpec::ThresholdUnitImpute(ThresholdParams {
                    threshold,
                    direction,
                    assumed_unit: "x".into(),
                    target_unit: "y".into(),
                    conversion: Affine { factor, offset },
                })
            };
            let w = transform(
                &el("weight", None),
                TransformRule::new("r", "weight", impute(1200.0, ThresholdDirection::Above, 1.0 / 16.0, 0.0)),
                vec![rec("weight", category, kind, 2, "2400"), rec("weight", category, kind, 3, "1200")],
            )?;
            ensure!(vals(&w) == vec![num(150.0), num(1200.0)], "weight over 1,200 oz: {:?}", vals(&w));
            let temp = transform(
                &el("temp", None),
                TransformRule::new("r", "temp", impute(60.0, ThresholdDirection::Below, 9.0 / 5.0, 32.0)),
                vec![rec("temp", category, kind, 2, "37"), rec("temp", category, kind, 3, "98.6")],
            )?;
            let v = vals(&temp);
            ensure!(near(&v[0], 98.6, 1e-9) && v[1] == num(98.6), "temperature over 60 is Fahrenheit: {v:?}");
            Ok(())
        }
        (Flowsheet, Categorical, K::MultiSelectResolve) => {
            let table = cats(&[("alert and oriented", "alert and oriented", Some(3)), ("sedated", "sedated", Some(1))]);
            let out = transform(
                &el("loc", None),
                TransformRule::new("r", "loc", RuleSpec::MultiSelectResolve(MultiSelectParams { delimiter: ";".into(), table })),
                vec![rec("loc", category, kind, 2, "alert and oriented;sedated")],
            )?;
            ensure!(vals(&out) == vec![text("sedated")], "{:?}", vals(&out));
            Ok(())
        }
        (Medication, _, K::MarActionSubset) => {
            let out = transform(
                &el("vanc", None),
                TransformRule::new("r", "vanc", RuleSpec::MarActionSubset(subset(&[], &["held"]))),
                vec![with_action(rec("vanc", category, kind, 2, "1"), "Held"), with_action(rec("vanc", category, kind, 3, "1"), "Given")],
            )?;
            ensure!(out.store.len() == 1 && out.log[0].action == LogAction::Dropped, "held not dropped");
            Ok(())
        }
        other => Err(format!("no example for {other:?}")),
    }
}

fn sentinel_cases() -> Result<(), String> {
    let reg = one_element("pulse", Flowsheet, Numeric, None);
    let out = transform(
        &reg,
        TransformRule::new("s", "pulse", RuleSpec::SentinelNumericToMissing(NumericSentinelParams { sentinels: vec![999999.0, 9999999.0] })),
        vec![
            rec("pulse", Flowsheet, Numeric, 2, "999999"),
            rec("pulse", Flowsheet, Numeric, 3, "9999999"),
            rec("pulse", Flowsheet, Numeric, 4, "72"),
        ],
    )?;
    ensure!(vals(&out) == vec![Value::Missing, Value::Missing, num(72.0)], "{:?}", vals(&out));
    let reg = one_element("dob", Demographic, Categorical, None);
    let out = transform(
        &reg,
        TransformRule::new("d", "dob", RuleSpec::SentinelDateToMissing(DateSentinelParams { sentinels: vec![date(1841, 12, 31)] })),
        vec![rec("dob", Demographic, Categorical, 2, "1841-12-31"), rec("dob", Demographic, Categorical, 3, "1990-01-01")],
    )?;
    ensure!(vals(&out) == vec![Value::Missing, text("1990-01-01")], "{:?}", vals(&out));
    Ok(())
}

fn ac3() -> Outcome {
    let mut cells = BTreeSet::new();
    for e in TAXONOMY.iter() {
        taxonomy_case(e.category, e.value_kind, e.kind).map_err(|m| format!("{} {} {}: {m}", e.category, e.value_kind.as_str(), e.kind))?;
        cells.insert((e.category, e.value_kind, e.kind));
    }
    ensure!(cells.len() == 22, "{} distinct cells", cells.len());
    sentinel_cases()?;
    Ok("22 matrix cells and both sentinel rules pass their examples".into())
}

// ---------------------------------------------------------------- AC-4

const POOL_ELEMENTS: [(&str, ElementCategory, ValueKind, Option<&str>); 6] = [
    ("pulse", Flowsheet, Numeric, None),
    ("weight", Flowsheet, Numeric, Some("lbs")),
    ("bp", Flowsheet, Numeric, None),
    ("creatinine", Analyte, Numeric, Some("mg/dL")),
    ("culture", Analyte, Categorical, None),
    ("vanc", Medication, Categorical, None),
];

fn rule_pool() -> Vec<TransformRule> {
    vec![
        TransformRule::new(
            "clean",
            "creatinine",
            RuleSpec::UnitStringCleanup(TableParams { table: TableSource::Rows(vec![SubstitutionRow { find: "µ".into(), replace: "u".into() }]) }),
        ),
        TransformRule::new("oor", "creatinine", RuleSpec::OutOfRangeStringToBound),
        TransformRule::new(
            "norm",
            "creatinine",
            RuleSpec::UnitNormalize(TableParams { table: factor_table(&[("mg/mL", "mg/dL", 100.0), ("ug/dL", "mg/dL", 0.001)]) }),
        ),
        TransformRule::new("specimen", "creatinine", RuleSpec::SpecimenSubset(subset(&["serum"], &[]))),
        TransformRule::new("sentinel", "flowsheet", RuleSpec::SentinelNumericToMissing(NumericSentinelParams { sentinels: vec![999999.0] })),
        TransformRule::bound_filter("cr-bound", "creatinine", Some(0.0), Some(150.0)),
        TransformRule::bound_filter("pulse-bound", "pulse", None, Some(400.0)),
        TransformRule::new(
            "oz",
            "weight",
            RuleSpec::ThresholdUnitImpute(ThresholdParams {
                threshold: 1200.0,
                direction: ThresholdDirection::Above,
                assumed_unit: "oz".into(),
                target_unit: "lbs".into(),
                conversion: Affine { factor: 1.0 / 16.0, offset: 0.0 },
            }),
        ),
        TransformRule::new("split", "bp", RuleSpec::CompositeSplit(CompositeParams { separator: "/".into(), parts: vec!["s".into(), "d".into()] })),
        TransformRule::new("indet", "culture", RuleSpec::IndeterminateToMissing(ValueListParams { values: vec!["hemolyzed sample".into()] })),
        TransformRule::new("map", "culture", RuleSpec::HierarchicalMap(TableParams { table: cats(&[("no growth", "negative", Some(0))]) })),
        TransformRule::new("held", "vanc", RuleSpec::MarActionSubset(subset(&[], &["held"]))),
    ]
}

fn random_store(rng: &mut ChaCha8Rng) -> ElementStore {
    let n = rng.gen_range(0..80);
    let records = (0..n)
        .map(|i| {
            let which = rng.gen_range(0..POOL_ELEMENTS.len());
            let (name, c, k, _) = POOL_ELEMENTS[which];
            let raw = match which {
                0 => *["999999", "450", "400", "72", "abc", ""].choose(rng).unwrap(),
                1 => *["2400", "1201", "1200", "180"].choose(rng).unwrap(),
                2 => *["120/80", "120", "1/2/3"].choose(rng).unwrap(),
                3 => *[">150 mg/dL", "<0.1", "2.5", "151", "1.0", "clotted"].choose(rng).unwrap(),
                4 => *["no growth", "negative", "hemolyzed sample", "mystery"].choose(rng).unwrap(),
                _ => "1000",
            };
            let mut r = rec(name, c, k, i as u64 + 2, raw);
            match which {
                3 => {
                    if let Some(u) = [Some("mg/dL"), Some("mg/mL"), Some("µg/dL"), Some("furlong"), None].choose(rng).unwrap() {
                        r = with_unit(r, u);
                    }
                    if let Some(s) = [Some("Serum"), Some("Urine"), None].choose(rng).unwrap() {
                        r = with_specimen(r, s);
                    }
                }
                5 => {
                    if let Some(a) = [Some("Given"), Some("Held"), None].choose(rng).unwrap() {
                        r = with_action(r, a);
                    }
                }
                _ => {}
            }
            r
        })
        .collect();
    ElementStore::seal(records)
}

fn conservation(input: &ElementStore, rules: &[TransformRule], reg: &ElementRegistry) -> Result<(), String> {
    let out = apply_rules(input, rules, reg).map_err(|e| e.to_string())?;
    let before: BTreeMap<&Locator, &ElementRecord> = input.records().iter().map(|r| (r.locator(), r)).collect();
    let after: BTreeMap<&Locator, &ElementRecord> = out.store.records().iter().map(|r| (r.locator(), r)).collect();
    for (el, c) in &out.counts {
        ensure!(c.input == c.output + c.dropped, "{el}: {} != {} + {}", c.input, c.output, c.dropped);
        ensure!(c.input == input.count_element(el), "{el}: input count");
    }
    ensure!(out.counts.values().map(|c| c.input).sum::<usize>() == input.len(), "records missing from counts");
    let dropped: Vec<&Locator> = out.log.iter().filter(|e| e.action == LogAction::Dropped).map(|e| &e.locator).collect();
    let dropped_set: BTreeSet<&Locator> = dropped.iter().copied().collect();
    ensure!(dropped.len() == dropped_set.len(), "record dropped twice");
    ensure!(dropped.len() == out.counts.values().map(|c| c.dropped).sum::<usize>(), "dropped count vs log");
    for (loc, r) in &before {
        match after.get(loc) {
            None => ensure!(dropped_set.contains(loc), "{loc} vanished unlogged"),
            Some(n) => {
                ensure!(!dropped_set.contains(loc), "{loc} logged as dropped but kept");
                if n.value != r.value || n.unit != r.unit {
                    ensure!(
                        out.log.iter().any(|e| &e.locator == *loc && e.action == LogAction::Modified),
                        "{loc} changed unlogged"
                    );
                }
            }
        }
    }
    ensure!(after.keys().all(|k| before.contains_key(k)), "record appeared from nowhere");
    Ok(())
}

fn ac4() -> Outcome {
    let start = Instant::now();
    let reg = ElementRegistry::from_elements(POOL_ELEMENTS.iter().map(|(n, c, k, u)| {
        let e = DataElement::new(*n, *c, *k);
        match u {
            Some(u) => e.with_reference_unit(*u),
            None => e,
        }
    }))
    .map_err(|e| e.to_string())?;
    let pool = rule_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut records = 0;
    for case in 0..1000 {
        let store = random_store(&mut rng);
        records += store.len();
        let k = rng.gen_range(0..=pool.len());
        let mut rules: Vec<TransformRule> = pool.choose_multiple(&mut rng, k).cloned().collect();
        rules.shuffle(&mut rng);
        conservation(&store, &rules, &reg).map_err(|m| format!("case {case}: {m}"))?;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed.as_secs() < 60, "took {elapsed:?}");
    Ok(format!("1000 random rule/store combinations ({records} records) conserved in {elapsed:.2?}"))
}

// ---------------------------------------------------------------- AC-5

const SYNTH_SPEC: &str = r#"{
  "patients": 40,
  "start_date": "2021-01-01",
  "end_date": "2021-06-30",
  "seed": 20210101,
  "elements": [
    {"source_id": "G1", "source_name": "GLUCOSE", "category": "analyte", "value": {"family": "normal", "mean": 100, "sd": 15}, "rate": 6, "unit": "mg/dL", "specimen_source": "Serum"},
    {"source_id": "P1", "source_name": "PULSE", "category": "flowsheet", "value": {"family": "normal", "mean": 85, "sd": 12}, "rate": 8},
    {"source_id": "V1", "source_name": "VANCOMYCIN", "category": "medication", "value": {"family": "categorical", "values": [{"value": "1000", "weight": 1}]}, "rate": 5, "unit": "mg", "mar_action": "Given"}
  ],
  "flaws": [
    {"kind": "sentinel", "element": "P1", "rate": 0.1, "params": {"value": "999999"}},
    {"kind": "specimen_contamination", "element": "G1", "rate": 0.12, "params": {"specimen": "Urine"}},
    {"kind": "held_actions", "element": "V1", "rate": 0.15, "params": {"action": "Held"}},
    {"kind": "dropout_after_month", "element": "V1", "params": {"month": "2021-03"}}
  ]
}"#;

fn ac5() -> Outcome {
    let spec: SynthSpec = serde_json::from_str(SYNTH_SPEC).map_err(|e| e.to_string())?;
    let synth = generate(&spec).map_err(|e| e.to_string())?;
    let mut observations = Vec::new();
    let ingest = ingest_bytes(&spec.file_name, synth.csv.as_bytes(), &synth.manifest, &TzConfig::default(), &mut observations)
        .map_err(|e| e.to_string())?;
    ensure!(ingest.rejects.is_empty(), "{} rows rejected", ingest.rejects.len());

    let grouper = |name: &str, c, k, id: &str| Grouper {
        element_name: name.into(),
        category: c,
        value_kind: k,
        reference_unit: None,
        members: vec![GrouperMember { source_id: id.into(), source_name: String::new() }],
    };
    let groupers = GrouperRegistry::new(vec![
        grouper("glucose", Analyte, Numeric, "G1"),
        grouper("pulse", Flowsheet, Numeric, "P1"),
        grouper("vancomycin", Medication, Categorical, "V1"),
    ])
    .map_err(|e| e.to_string())?;
    let grouped = apply_groupers(&ObservationStore::seal(observations), &groupers);
    ensure!(grouped.ungrouped.total == 0, "ungrouped rows");
    let registry = groupers.element_registry();
    let rules = vec![
        TransformRule::new("sentinel", "flowsheet", RuleSpec::SentinelNumericToMissing(NumericSentinelParams { sentinels: vec![999999.0, 9999999.0] })),
        TransformRule::new("serum-only", "glucose", RuleSpec::SpecimenSubset(subset(&["serum"], &[]))),
        TransformRule::new("drop-held", "vancomycin", RuleSpec::MarActionSubset(subset(&[], &["held"]))),
    ];
    let out = apply_rules(&grouped.grouped, &rules, &registry).map_err(|e| e.to_string())?;

    // (a) no sentinel survives
    let left = out.store.records().iter().filter(|r| matches!(r.value, Value::Number(x) if x == 999999.0)).count();
    ensure!(left == 0, "{left} sentinels remain");

    // (b) log activity equals the ledger, count for count and locator for locator
    let logged = |rule: &str, action: LogAction| -> BTreeSet<Locator> {
        out.log.iter().filter(|e| e.rule_id == rule && e.action == action).map(|e| e.locator.clone()).collect()
    };
    let ledgered = |kind: FlawKind| -> BTreeSet<Locator> {
        synth.ledger.iter().filter(|e| e.kind == kind).filter_map(|e| e.locator.clone()).collect()
    };
    let pairs = [
        ("sentinel", LogAction::Modified, FlawKind::Sentinel),
        ("serum-only", LogAction::Dropped, FlawKind::SpecimenContamination),
        ("drop-held", LogAction::Dropped, FlawKind::HeldActions),
    ];
    let mut summary = Vec::new();
    for (rule, action, kind) in pairs {
        let got = logged(rule, action);
        let want = ledgered(kind);
        ensure!(!want.is_empty(), "no {kind:?} flaws injected");
        ensure!(got.len() as u64 == synth.ledger_count(kind), "{rule}: {} logged vs {} ledgered", got.len(), synth.ledger_count(kind));
        ensure!(got == want, "{rule}: logged locators differ from ledger");
        summary.push(format!("{rule}={}", got.len()));
    }

    // (c) monthly counts are zero after the dropout month
    let cutoff = Month { year: 2021, month: 3 };
    let res = run_checks(&out.store, &[CheckSpec::new("vancomycin", Subtype::MonthlyCounts)], &synth.manifest, 50);
    let Payload::MonthlyCounts { series } = &res[0].payload else { return Err("wrong payload".into()) };
    ensure!(series.len() == 6, "series covers {} months", series.len());
    ensure!(series.iter().filter(|m| m.month > cutoff).all(|m| m.count == 0), "records after dropout: {series:?}");
    ensure!(series.iter().filter(|m| m.month <= cutoff).any(|m| m.count > 0), "no records before dropout");
    ensure!(synth.ledger_count(FlawKind::DropoutAfterMonth) > 0, "dropout suppressed nothing");
    Ok(format!("ledger matched exactly ({}), zero sentinels, zero counts after 2021-03", summary.join(", ")))
}

// ---------------------------------------------------------------- AC-6

fn fixture() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demo")
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_dqa"))
        .arg("--config")
        .arg(fixture().join("project.toml"))
        .arg("--out")
        .arg(out)
        .args(["--now", "2024-01-01T00:00:00Z", "--seed", "7"])
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "dqa {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    Ok(())
}

fn ac6() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for dir in [a.path(), b.path()] {
        run_cli(dir, &["pipeline"])?;
        run_cli(dir, &["adjudicate", "emit"])?;
    }
    let mut compared = 0;
    let da = a.path().join("demo");
    let mut names: Vec<_> = std::fs::read_dir(&da)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") || n.ends_with("adjudication_form.csv"))
        .collect();
    names.sort();
    let reports = names.iter().filter(|n| n.ends_with(".report.json")).count();
    ensure!(reports == 4, "{reports} JSON reports");
    for n in &names {
        let x = std::fs::read(da.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join("demo").join(n)).map_err(|e| format!("{n}: {e}"))?;
        ensure!(x == y, "{n} differs between runs");
        compared += 1;
    }
    Ok(format!("{compared} JSON artifacts and the form are byte-identical across two runs"))
}

// ---------------------------------------------------------------- AC-7

fn ac7() -> Outcome {
    let reg = ElementRegistry::from_elements((0..20).map(|i| DataElement::new(format!("el{i:02}"), Flowsheet, Numeric)))
        .map_err(|e| e.to_string())?;
    let m = manifest(5, date(2021, 1, 1), date(2021, 6, 30));
    let results = run_all(&ElementStore::seal(vec![]), &reg, &m, &CheckConfig::default()).map_err(|e| e.to_string())?;
    let mut state = ProjectState::new("pediatric-sepsis", &reg);
    let mut rows = emit_form(&reg, &results, &[]).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 20, "{} form rows", rows.len());
    for (i, r) in rows.iter_mut().enumerate() {
        if i < 11 {
            r.answer(true, true, false, true, true);
        } else {
            r.answer(false, true, true, false, false);
        }
    }
    apply_form(&mut state, &rows, t(2024, 1, 1)).map_err(|e| e.to_string())?;
    let s = summarize_impact(&state, &[]);
    ensure!(s.transformed == 11 && s.excluded == 9, "transformed {} excluded {}", s.transformed, s.excluded);
    ensure!(s.fit_for_use + s.needs_rework + s.excluded + s.pending == s.total_elements, "status counts do not add up");
    Ok(format!("impact summary transformed={} excluded={}", s.transformed, s.excluded))
}

// ---------------------------------------------------------------- AC-8

fn ac8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..500 {
        let n = rng.gen_range(1..300);
        let v: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { rng.gen_range(0..5) as f64 } else { rng.gen_range(-1e4..1e4) })
            .collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Smallest 1-based rank whose cumulative share reaches p, by scanning.
        let pick = |num: usize, den: usize| sorted[(1..=n).find(|k| k * den >= num * n).unwrap() - 1];
        let d = deciles(&v).ok_or("no deciles")?;
        for (i, x) in d.iter().enumerate() {
            ensure!(*x == pick(i, 10), "case {case}: decile {i} {x} != {}", pick(i, 10));
        }
        let b = box_stats(&v).ok_or("no box stats")?;
        let want = (n, sorted[0], pick(1, 4), pick(2, 4), pick(3, 4), sorted[n - 1]);
        ensure!((b.n, b.min, b.q1, b.median, b.q3, b.max) == want, "case {case}: box {b:?} != {want:?}");
    }
    Ok("500 random vectors match the sort-and-scan oracle".into())
}

// ---------------------------------------------------------------- AC-9

fn ac9() -> Outcome {
    // 20 patients aged 1..=20; 3 of the older 10 and 1 of the younger 10 die.
    let deaths = [2usize, 13, 16, 19];
    let mut records = Vec::new();
    let mut line = 2;
    for p in 1..=20usize {
        let mut r = rec("age", Encounter, Numeric, line, &p.to_string());
        r.source.patient_id = format!("P{p}");
        records.push(r);
        line += 1;
        if deaths.contains(&p) {
            let mut r = rec("mortality", Encounter, Categorical, line, "Expired");
            r.source.patient_id = format!("P{p}");
            records.push(r);
            line += 1;
        }
    }
    let store = ElementStore::seal(records);
    let reg = ElementRegistry::from_elements([
        DataElement::new("age", Encounter, Numeric),
        DataElement::new("mortality", Encounter, Categorical),
    ])
    .map_err(|e| e.to_string())?;
    let m = manifest(20, date(2021, 1, 1), date(2021, 12, 31));

    // Brute-force rates: older half is ages 11..=20.
    let rate = |lo: usize, hi: usize| deaths.iter().filter(|d| (lo..=hi).contains(*d)).count() as f64 / 10.0;
    let (old, young) = (rate(11, 20), rate(1, 10));
    ensure!((old, young) == (0.3, 0.1), "construction wrong: {old} {young}");

    let run = |direction| {
        let spec = AssociationSpec { factor_element: "age".into(), outcome_element: "mortality".into(), direction, split: Split::Median };
        run_association(&store, &reg, &spec, &m).map_err(|e| e.to_string())
    };
    let pos = run(Direction::Positive)?;
    let neg = run(Direction::Negative)?;
    ensure!(pos.status == CheckStatus::Ok, "positive direction gave {:?}", pos.status);
    ensure!(neg.status == CheckStatus::Warning, "inverted direction gave {:?}", neg.status);
    let Payload::Association { high, low, .. } = &pos.payload else { return Err("wrong payload".into()) };
    let (h, l) = (high.as_ref().ok_or("no high group")?, low.as_ref().ok_or("no low group")?);
    ensure!((h.rate, l.rate) == (old, young), "rates {} {}", h.rate, l.rate);
    Ok(format!("rates {old} vs {young}: positive ok, negative warning"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("AC-1", "check-count arithmetic", ac1),
        ("AC-2", "check subtype coverage", ac2),
        ("AC-3", "rule taxonomy coverage", ac3),
        ("AC-4", "transform conservation", ac4),
        ("AC-5", "flaw-detection round trip", ac5),
        ("AC-6", "determinism", ac6),
        ("AC-7", "adjudication accounting", ac7),
        ("AC-8", "quantile oracle", ac8),
        ("AC-9", "association check", ac9),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {why}");
            }
        }
    }
    println!("{} of 9 acceptance criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
