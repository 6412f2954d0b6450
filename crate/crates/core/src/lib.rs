//! Schema-constrained, provenance-linked field extraction from PDF corpora.
//!
//! A run discovers PDFs, splits each into page chunks and caption units,
//! annotates every unit under every payload schema through a bounded and
//! rate-limited backend, merges per-unit annotations into one study record,
//! and exports tables, aggregates, markdown and quality reports. A resume
//! index makes repeated runs skip finished documents.
//!
//! The [`sim`] module ships a synthetic corpus generator and a scenario
//! runner on simulated time for deterministic benchmarking.

pub mod backend;
pub mod chunking;
pub mod clock;
pub mod consolidate;
pub mod error;
pub mod export;
pub mod ingest;
pub mod orchestrator;
pub mod pdf;
pub mod quality;
pub mod schema;
pub mod sim;
pub mod text;

pub use backend::{AnnotationBackend, HttpBackend, HttpConfig, MockBackend};
pub use error::{Error, Result};
pub use orchestrator::{run_corpus, OutputOptions, Pipeline, RunConfig, RunReport};
pub use schema::{PayloadId, SchemaSet};

/// Quality indicators over `f64`.
pub type Indicators = quality::QualityIndicators<f64>;
/// Proxy-score weights over `f64`.
pub type Weights = quality::Weights<f64>;
