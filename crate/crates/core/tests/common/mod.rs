#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use dqa_core::model::{
    CohortManifest, ElementCategory, ElementRecord, Locator, ObservationRecord, TimestampRole, Value,
    ValueKind,
};

pub fn at(y: i32, m: u32, d: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 12, 0, 0).unwrap()
}

pub fn observation(category: ElementCategory, line: u64, patient: &str, raw: &str) -> ObservationRecord {
    let role = category.required_roles().first().copied().unwrap_or(TimestampRole::ALL[0]);
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
        timestamps: BTreeMap::from([(role, at(2021, 1, 15))]),
    }
}

pub struct Rec(pub ElementRecord);

impl Rec {
    pub fn new(element: &str, category: ElementCategory, kind: ValueKind, line: u64, raw: &str) -> Self {
        Rec(ElementRecord {
            element: element.into(),
            value: Value::from_raw(raw, kind),
            unit: None,
            flags: vec![],
            source: observation(category, line, "P1", raw),
        })
    }

    pub fn unit(mut self, u: &str) -> Self {
        self.0.unit = Some(u.into());
        self.0.source.unit_raw = Some(u.into());
        self
    }

    pub fn specimen(mut self, s: &str) -> Self {
        self.0.source.specimen_source = Some(s.into());
        self
    }

    pub fn action(mut self, a: &str) -> Self {
        self.0.source.mar_action = Some(a.into());
        self
    }

    pub fn patient(mut self, p: &str) -> Self {
        self.0.source.patient_id = p.into();
        self
    }

    pub fn time(mut self, t: DateTime<Utc>) -> Self {
        for v in self.0.source.timestamps.values_mut() {
            *v = t;
        }
        self
    }

    pub fn build(self) -> ElementRecord {
        self.0
    }
}

pub fn manifest(patients: usize, start: (i32, u32, u32), end: (i32, u32, u32)) -> CohortManifest {
    CohortManifest {
        project_name: "test".into(),
        patient_ids: (1..=patients).map(|i| format!("P{i}")).collect(),
        start_date: NaiveDate::from_ymd_opt(start.0, start.1, start.2).unwrap(),
        end_date: NaiveDate::from_ymd_opt(end.0, end.1, end.2).unwrap(),
        inclusion_note: String::new(),
    }
}
