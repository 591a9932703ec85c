//! Data-quality assurance for structured EHR extracts.
//!
//! The pipeline runs ingest, grouping, rules-based transforms, checks,
//! reports and expert adjudication, in that order. Each stage consumes
//! sealed stores from the previous one.

pub mod adjudication;
pub mod checks;
pub mod error;
pub mod grouping;
pub mod ingest;
pub mod io;
pub mod metadata;
pub mod model;
pub mod ontology;
pub mod report;
pub mod stats;
pub mod synth;
pub mod transform;

pub use error::{DqaError, Result};
