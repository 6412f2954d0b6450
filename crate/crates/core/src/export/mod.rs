//! Run artifacts: study tables, markdown reconstructions, aggregates and reports.

mod aggregates;
mod markdown;
mod table;

use std::fs;
use std::path::{Path, PathBuf};

pub use aggregates::{
    cell_value, completeness_summary, composite_stratification, frequency_tables,
    missingness_matrix, write_aggregates, AggregateOptions, CompletenessRow, FrequencyTable,
    Missingness, CHART_MIN_COUNT, CHART_TOP_N,
};
pub use markdown::render_markdown;
pub use table::{
    decode_cell, encode_value, record_row, split_column, KeyedTable, EVIDENCE_SEP, LIST_SEP,
};

use crate::backend::UnitAnnotation;
use crate::error::{Error, Result};
use crate::ingest::{SourceKey, EXCLUDED_FILE, INDEX_FILE};
use crate::quality::QualityIndicators;
use crate::schema::{derive_columns, SchemaSet};

/// File locations under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn studies_csv(&self) -> PathBuf {
        self.root.join("studies.csv")
    }

    pub fn studies_parquet(&self) -> PathBuf {
        self.root.join("studies.parquet")
    }

    pub fn markdown(&self, key: &SourceKey) -> PathBuf {
        self.root.join("markdown").join(format!("{key}.md"))
    }

    pub fn cache(&self, unit_id: &str, payload: &str) -> PathBuf {
        self.root.join("cache").join(format!("{unit_id}.{payload}.json"))
    }

    pub fn index(&self) -> PathBuf {
        self.root.join(INDEX_FILE)
    }

    pub fn excluded(&self) -> PathBuf {
        self.root.join(EXCLUDED_FILE)
    }

    pub fn run_report(&self) -> PathBuf {
        self.root.join("run_report.json")
    }

    pub fn calls(&self) -> PathBuf {
        self.root.join("calls.jsonl")
    }

    pub fn quality_report(&self) -> PathBuf {
        self.root.join("quality_report.csv")
    }

    pub fn columns(&self) -> PathBuf {
        self.root.join("columns.txt")
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in [self.root.clone(), self.root.join("markdown"), self.root.join("cache")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

/// Writes the derived column list, one per line.
pub fn write_columns(path: &Path, set: &SchemaSet) -> Result<()> {
    let mut text = derive_columns(set).join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_cached(layout: &Layout, annotation: &UnitAnnotation) -> Result<()> {
    let path = layout.cache(&annotation.unit_id, annotation.payload_id.as_str());
    let json = serde_json::to_vec(annotation)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// A cached annotation, if present and readable.
pub fn read_cached(layout: &Layout, unit_id: &str, payload: &str) -> Option<UnitAnnotation> {
    let bytes = fs::read(layout.cache(unit_id, payload)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

pub const QUALITY_COLUMNS: [&str; 6] = [
    "source_key",
    "corruption",
    "numeric_sanity",
    "type_conformance",
    "structural_completeness",
    "proxy_score",
];

/// Upserts one row per document into `quality_report.csv`.
pub fn write_quality_rows(
    path: &Path,
    rows: &[(SourceKey, QualityIndicators<f64>, f64)],
) -> Result<()> {
    let cols: Vec<String> = QUALITY_COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut table = KeyedTable::open(path, &cols)?;
    for (key, ind, score) in rows {
        table.upsert(vec![
            key.to_string(),
            format!("{:.4}", ind.corruption),
            format!("{:.4}", ind.numeric_sanity),
            format!("{:.4}", ind.type_conformance),
            format!("{:.4}", ind.structural_completeness),
            format!("{score:.1}"),
        ])?;
    }
    Ok(())
}
