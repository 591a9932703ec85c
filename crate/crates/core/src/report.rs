//! Per-category quality reports: canonical JSON and a self-contained HTML
//! rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::checks::{subtypes_for, CheckKind, CheckResult, Payload};
use crate::error::{DqaError, Result};
use crate::model::{ElementCategory, ElementRegistry, ElementStatus, ValueKind};

/// Report categories produced when a project does not configure its own.
pub const DEFAULT_REPORTS: [ElementCategory; 4] = [
    ElementCategory::Analyte,
    ElementCategory::Encounter,
    ElementCategory::Flowsheet,
    ElementCategory::Medication,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSection {
    pub kind: CheckKind,
    pub results: Vec<CheckResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSection {
    pub element_name: String,
    pub category: ElementCategory,
    pub value_kind: ValueKind,
    pub reference_unit: Option<String>,
    pub status: ElementStatus,
    pub sections: Vec<KindSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub project_name: String,
    pub report_category: String,
    #[serde(with = "instant")]
    pub generated_at: DateTime<Utc>,
    pub elements: Vec<ElementSection>,
}

mod instant {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// Assembles the report for one category. Excluded elements are left out;
/// every other element must have all of its assigned checks in `results`.
pub fn build_report(
    results: &[CheckResult],
    registry: &ElementRegistry,
    category: ElementCategory,
    project_name: &str,
    generated_at: DateTime<Utc>,
) -> Result<QualityReport> {
    let mut by_element: BTreeMap<&str, Vec<&CheckResult>> = BTreeMap::new();
    for r in results {
        by_element.entry(r.element_name.as_str()).or_default().push(r);
    }
    let mut elements = Vec::new();
    for e in registry
        .in_category(category)
        .filter(|e| e.status != ElementStatus::Excluded)
    {
        let mine = by_element.get(e.name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let order = subtypes_for(e.category, e.value_kind);
        for s in &order {
            if !mine.iter().any(|r| r.subtype == *s && r.check_id == format!("{}:{s}", e.name)) {
                return Err(DqaError::Coverage(format!(
                    "element `{}` is missing check `{}:{s}`",
                    e.name, e.name
                )));
            }
        }
        let rank = |r: &CheckResult| {
            let assigned = order.iter().position(|s| *s == r.subtype && r.check_id == format!("{}:{s}", e.name));
            (assigned.unwrap_or(usize::MAX), r.check_id.clone())
        };
        let sections = CheckKind::ALL
            .iter()
            .map(|k| {
                let mut rs: Vec<CheckResult> = mine.iter().filter(|r| r.kind == *k).map(|r| (*r).clone()).collect();
                rs.sort_by_key(rank);
                KindSection { kind: *k, results: rs }
            })
            .collect();
        elements.push(ElementSection {
            element_name: e.name.clone(),
            category: e.category,
            value_kind: e.value_kind,
            reference_unit: e.reference_unit.clone(),
            status: e.status,
            sections,
        });
    }
    Ok(QualityReport {
        project_name: project_name.to_string(),
        report_category: category.report_name().to_string(),
        generated_at,
        elements,
    })
}

/// Rounds to six significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn canonicalize(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64().map(round_sig) {
                if let Some(m) = serde_json::Number::from_f64(x) {
                    *n = m;
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(canonicalize),
        serde_json::Value::Object(o) => o.values_mut().for_each(canonicalize),
        _ => {}
    }
}

/// Sorted keys, floats at six significant digits, trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| DqaError::Invalid(e.to_string()))?;
    canonicalize(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| DqaError::Invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn report_paths(out_dir: &Path, report: &QualityReport) -> (PathBuf, PathBuf) {
    let dir = out_dir.join(&report.project_name);
    (
        dir.join(format!("{}.report.json", report.report_category)),
        dir.join(format!("{}.report.html", report.report_category)),
    )
}

/// Writes `{category}.report.json` and `.report.html` under
/// `out_dir/{project}`.
pub fn write_report(out_dir: &Path, report: &QualityReport) -> Result<(PathBuf, PathBuf)> {
    let (json, html) = report_paths(out_dir, report);
    crate::io::write_text(&json, &canonical_json(report)?)?;
    crate::io::write_text(&html, &render_html(report))?;
    Ok((json, html))
}

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn num(x: f64) -> String {
    crate::model::format_number(round_sig(x))
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse;margin:.5em 0}td,th{border:1px solid #ccc;padding:2px 6px;text-align:right}\
th{background:#f3f3f3}.check{margin:1em 0;padding:.5em;border-left:4px solid #8a8}\
.check.warning{border-color:#d90}.check.empty{border-color:#aaa}\
.chart{display:block;background:#fafafa;border:1px solid #ddd}\
h2{border-bottom:2px solid #444}";

const W: f64 = 640.0;
const H: f64 = 200.0;
const PAD: f64 = 30.0;

fn svg_open(out: &mut String, kind: CheckKind, label: &str) {
    let _ = write!(
        out,
        "<svg class=\"chart {}\" xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" role=\"img\" aria-label=\"{}\">",
        kind.as_str(),
        esc(label)
    );
    let _ = write!(
        out,
        "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"#999\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y}\" stroke=\"#999\"/>",
        y = H - PAD,
        x = W - PAD
    );
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    (H - PAD) - (v - lo) / span * (H - 2.0 * PAD)
}

fn x_at(i: usize, n: usize) -> f64 {
    let step = (W - 2.0 * PAD) / n.max(1) as f64;
    PAD + step * (i as f64 + 0.5)
}

fn axis_labels(out: &mut String, lo: f64, hi: f64) {
    let _ = write!(
        out,
        "<text x=\"2\" y=\"{}\" font-size=\"10\">{}</text><text x=\"2\" y=\"{}\" font-size=\"10\">{}</text>",
        H - PAD,
        num(lo),
        PAD,
        num(hi)
    );
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn line_chart(out: &mut String, kind: CheckKind, label: &str, lines: &[(&str, Vec<f64>)]) {
    let hi = lines
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0_f64, f64::max);
    svg_open(out, kind, label);
    axis_labels(out, 0.0, hi);
    for (li, (name, values)) in lines.iter().enumerate() {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i, values.len()), scale(*v, 0.0, hi)))
            .collect();
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"><title>{}</title></polyline>",
            PALETTE[li % PALETTE.len()],
            points.join(" "),
            esc(name)
        );
    }
    out.push_str("</svg>");
}

fn table(out: &mut String, head: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
    out.push_str("<table><tr>");
    for h in head {
        let _ = write!(out, "<th>{}</th>", esc(h));
    }
    out.push_str("</tr>");
    for row in rows {
        out.push_str("<tr>");
        for c in row {
            let _ = write!(out, "<td>{}</td>", esc(&c));
        }
        out.push_str("</tr>");
    }
    out.push_str("</table>");
}

fn render_payload(out: &mut String, r: &CheckResult) {
    match &r.payload {
        Payload::Frequency { total, rows } => {
            let _ = write!(out, "<p>records: {total}</p>");
            table(out, &["value", "count"], rows.iter().map(|v| vec![v.value.clone(), v.count.to_string()]));
        }
        Payload::Deciles { numeric, non_numeric, missing, mean, sd, values } => {
            let opt = |x: &Option<f64>| x.map(num).unwrap_or_else(|| "n/a".into());
            let _ = write!(
                out,
                "<p>numeric: {numeric}, non-numeric: {non_numeric}, missing: {missing}, mean: {}, sd: {}</p>",
                opt(mean),
                opt(sd)
            );
            if let Some(v) = values {
                table(
                    out,
                    &["percentile", "value"],
                    v.iter().enumerate().map(|(i, x)| vec![format!("{}", i * 10), num(*x)]),
                );
            }
        }
        Payload::Count { count } => {
            let _ = write!(out, "<p>count: {count}</p>");
        }
        Payload::Proportion { patients, denominator, proportion } => {
            let _ = write!(out, "<p>{patients} of {denominator} patients ({})</p>", num(*proportion));
        }
        Payload::Histogram { bins, .. } => {
            let hi = bins.iter().map(|b| b.count).max().unwrap_or(0) as f64;
            svg_open(out, r.kind, &r.check_id);
            axis_labels(out, 0.0, hi);
            let step = (W - 2.0 * PAD) / bins.len().max(1) as f64;
            for (i, b) in bins.iter().enumerate() {
                let y = scale(b.count as f64, 0.0, hi);
                let _ = write!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#4a7\"><title>{}: {}</title></rect>",
                    PAD + step * i as f64,
                    (step - 1.0).max(0.5),
                    (H - PAD) - y,
                    esc(&b.label),
                    b.count
                );
            }
            out.push_str("</svg>");
            table(out, &["records per patient", "patients"], bins.iter().map(|b| vec![b.label.clone(), b.count.to_string()]));
        }
        Payload::MonthlyCounts { series } => {
            let values: Vec<f64> = series.iter().map(|m| m.count as f64).collect();
            line_chart(out, r.kind, &r.check_id, &[("count", values)]);
            table(out, &["month", "count"], series.iter().map(|m| vec![m.month.to_string(), m.count.to_string()]));
        }
        Payload::MonthlyBoxStats { series } => {
            let all: Vec<f64> = series
                .iter()
                .filter_map(|m| m.stats)
                .flat_map(|s| [s.min, s.max])
                .collect();
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if all.is_empty() { (0.0, 1.0) } else { (lo, hi) };
            svg_open(out, r.kind, &r.check_id);
            axis_labels(out, lo, hi);
            let half = ((W - 2.0 * PAD) / series.len().max(1) as f64 * 0.3).max(1.0);
            for (i, m) in series.iter().enumerate() {
                let Some(s) = m.stats else { continue };
                let x = x_at(i, series.len());
                let (ymin, yq1, ymed, yq3, ymax) = (
                    scale(s.min, lo, hi),
                    scale(s.q1, lo, hi),
                    scale(s.median, lo, hi),
                    scale(s.q3, lo, hi),
                    scale(s.max, lo, hi),
                );
                let _ = write!(
                    out,
                    "<g><title>{}: n={} median={}</title>\
<line x1=\"{x:.1}\" y1=\"{ymin:.1}\" x2=\"{x:.1}\" y2=\"{ymax:.1}\" stroke=\"#555\"/>\
<rect x=\"{:.1}\" y=\"{yq3:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#9bd\" stroke=\"#555\"/>\
<line x1=\"{:.1}\" y1=\"{ymed:.1}\" x2=\"{:.1}\" y2=\"{ymed:.1}\" stroke=\"#000\" stroke-width=\"2\"/></g>",
                    m.month,
                    s.n,
                    num(s.median),
                    x - half,
                    2.0 * half,
                    (yq1 - yq3).max(0.5),
                    x - half,
                    x + half
                );
            }
            out.push_str("</svg>");
            table(
                out,
                &["month", "n", "min", "q1", "median", "q3", "max"],
                series.iter().map(|m| match m.stats {
                    Some(s) => vec![m.month.to_string(), s.n.to_string(), num(s.min), num(s.q1), num(s.median), num(s.q3), num(s.max)],
                    None => vec![m.month.to_string(), "0".into(), String::new(), String::new(), String::new(), String::new(), String::new()],
                }),
            );
        }
        Payload::MonthlyCategoryLines { months, lines } => {
            let series: Vec<(&str, Vec<f64>)> = lines
                .iter()
                .map(|l| (l.category.as_str(), l.counts.iter().map(|c| *c as f64).collect()))
                .collect();
            line_chart(out, r.kind, &r.check_id, &series);
            let mut head = vec!["month"];
            head.extend(lines.iter().map(|l| l.category.as_str()));
            table(
                out,
                &head,
                months.iter().enumerate().map(|(i, m)| {
                    let mut row = vec![m.to_string()];
                    row.extend(lines.iter().map(|l| l.counts[i].to_string()));
                    row
                }),
            );
        }
        Payload::Association { factor_element, outcome_element, direction, split_value, high, low } => {
            let _ = write!(
                out,
                "<p>{} vs {} (expected {:?}), split at {}</p>",
                esc(factor_element),
                esc(outcome_element),
                direction,
                split_value.map(num).unwrap_or_else(|| "n/a".into())
            );
            let rows = [("high", high), ("low", low)]
                .into_iter()
                .filter_map(|(n, g)| g.as_ref().map(|g| vec![n.to_string(), g.patients.to_string(), g.with_outcome.to_string(), num(g.rate)]));
            table(out, &["group", "patients", "with outcome", "rate"], rows);
        }
    }
}

/// Renders one standalone HTML document with inline styles and SVG.
pub fn render_html(report: &QualityReport) -> String {
    let mut out = String::new();
    let title = format!("{} - {}", report.project_name, report.report_category);
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\"><head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head><body>\n<h1>{}</h1>\n<p>Generated {}. {} element(s).</p>\n",
        esc(&title),
        esc(&title),
        report.generated_at.to_rfc3339_opts(SecondsFormat::Secs, true),
        report.elements.len()
    );
    for e in &report.elements {
        let _ = write!(out, "<section class=\"element\" id=\"{}\"><h2>{}</h2>\n", esc(&e.element_name), esc(&e.element_name));
        table(
            &mut out,
            &["category", "value kind", "reference unit", "status"],
            [vec![
                e.category.to_string(),
                e.value_kind.as_str().to_string(),
                e.reference_unit.clone().unwrap_or_default(),
                e.status.as_str().to_string(),
            ]],
        );
        for s in &e.sections {
            let _ = write!(out, "<h3>{}</h3>\n", s.kind);
            for r in &s.results {
                let status = match r.status {
                    crate::checks::CheckStatus::Ok => "ok",
                    crate::checks::CheckStatus::Warning => "warning",
                    crate::checks::CheckStatus::Empty => "empty",
                };
                let _ = write!(
                    out,
                    "<div class=\"check {status}\" data-check-id=\"{}\"><h4>{} <small>[{status}]</small></h4>",
                    esc(&r.check_id),
                    esc(r.subtype.as_str())
                );
                render_payload(&mut out, r);
                out.push_str("</div>\n");
            }
        }
        out.push_str("</section>\n");
    }
    out.push_str("</body></html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::{assign_checks, run_checks};
    use crate::model::{CohortManifest, DataElement, ElementStore};
    use chrono::{NaiveDate, TimeZone};

    fn manifest() -> CohortManifest {
        CohortManifest {
            project_name: "demo".into(),
            patient_ids: ["a", "b"].iter().map(|s| s.to_string()).collect(),
            start_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2020, 3, 31).unwrap(),
            inclusion_note: String::new(),
        }
    }

    #[test]
    fn significant_digit_rounding() {
        assert_eq!(round_sig(1.0 / 3.0), 0.333333);
        assert_eq!(round_sig(2.0 / 3.0 * 1e6), 666667.0);
        assert_eq!(round_sig(0.0), 0.0);
        assert_eq!(round_sig(154.3236), 154.324);
    }

    #[test]
    fn empty_category_is_valid_shell() {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let r = build_report(&[], &ElementRegistry::new(), ElementCategory::Order, "demo", t).unwrap();
        assert_eq!(r.report_category, "Orders");
        assert!(r.elements.is_empty());
        let html = render_html(&r);
        assert!(html.starts_with("<!DOCTYPE html>"));
        assert!(html.ends_with("</html>\n"));
    }

    #[test]
    fn missing_check_is_coverage_error() {
        let reg = ElementRegistry::from_elements([DataElement::new("g", ElementCategory::Analyte, ValueKind::Numeric)]).unwrap();
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let err = build_report(&[], &reg, ElementCategory::Analyte, "demo", t).unwrap_err();
        assert!(matches!(err, DqaError::Coverage(_)));
    }

    #[test]
    fn zero_series_still_draws_a_line() {
        let reg = ElementRegistry::from_elements([DataElement::new("g", ElementCategory::Analyte, ValueKind::Numeric)]).unwrap();
        let results = run_checks(&ElementStore::default(), &assign_checks(&reg), &manifest(), 50);
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let r = build_report(&results, &reg, ElementCategory::Analyte, "demo", t).unwrap();
        let html = render_html(&r);
        assert_eq!(html.matches("<polyline").count(), 1);
        assert_eq!(html.matches("data-check-id=").count(), 8);
        let json = canonical_json(&r).unwrap();
        assert_eq!(json, canonical_json(&r).unwrap());
    }
}
