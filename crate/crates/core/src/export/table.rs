//! Row-oriented study table (CSV) with its columnar twin (Parquet).

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parquet::basic::{LogicalType, Repetition, Type as PhysicalType};
use parquet::data_type::{ByteArray, ByteArrayType};
use parquet::file::properties::WriterProperties;
use parquet::file::writer::SerializedFileWriter;
use parquet::schema::types::Type;

use crate::consolidate::StudyRecord;
use crate::error::{Error, Result};
use crate::schema::{FieldKind, PayloadId, SchemaSet, Value};

pub const LIST_SEP: char = '|';
pub const EVIDENCE_SEP: char = '\u{b6}';

fn escape_item(item: &str, sep: char) -> String {
    let mut out = String::with_capacity(item.len());
    for c in item.chars() {
        if c == '\\' || c == sep {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn split_escaped(cell: &str, sep: char) -> Vec<String> {
    let mut items = Vec::new();
    let mut cur = String::new();
    let mut chars = cell.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(next) = chars.next() {
                cur.push(next);
            }
        } else if c == sep {
            items.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    items.push(cur);
    items
}

fn separator(kind: FieldKind) -> char {
    if kind == FieldKind::EvidenceText {
        EVIDENCE_SEP
    } else {
        LIST_SEP
    }
}

/// Cell text for a non-null value of a field of `kind`.
pub fn encode_value(kind: FieldKind, value: &Value) -> String {
    match value {
        Value::List(items) => {
            let sep = separator(kind);
            items
                .iter()
                .map(|i| escape_item(i, sep))
                .collect::<Vec<_>>()
                .join(&sep.to_string())
        }
        other => other.to_string(),
    }
}

/// Inverse of [`encode_value`]; an empty cell is null.
pub fn decode_cell(kind: FieldKind, cell: &str) -> Result<Option<Value>> {
    if cell.is_empty() {
        return Ok(None);
    }
    let bad = || Error::InvalidArgument(format!("cell {cell:?} is not a valid {kind:?} value"));
    Ok(Some(match kind {
        FieldKind::Integer => Value::Integer(cell.parse().map_err(|_| bad())?),
        FieldKind::Real => Value::Real(cell.parse().map_err(|_| bad())?),
        FieldKind::Text | FieldKind::Enum => Value::Text(cell.to_string()),
        FieldKind::ListOfEnum | FieldKind::ListOfText | FieldKind::EvidenceText => {
            Value::List(split_escaped(cell, separator(kind)))
        }
    }))
}

/// The study table row for `record`, in `columns` order.
pub fn record_row(record: &StudyRecord, set: &SchemaSet, columns: &[String]) -> Result<Vec<String>> {
    columns
        .iter()
        .map(|col| {
            Ok(match col.as_str() {
                "source_key" => record.key.to_string(),
                "review_needed" => record.review_needed.to_string(),
                "failed_units" => record
                    .failed_units
                    .iter()
                    .map(|u| escape_item(u, LIST_SEP))
                    .collect::<Vec<_>>()
                    .join("|"),
                "conflict_flags" => record.conflict_flags_cell(),
                qualified => {
                    let (payload, field) = split_column(qualified)?;
                    let spec = set.payload(payload).field(field).ok_or_else(|| {
                        Error::SchemaVersion(format!("column {qualified} is not in schema {}", set.version))
                    })?;
                    record
                        .get(payload, field)
                        .map(|v| encode_value(spec.kind, &v))
                        .unwrap_or_default()
                }
            })
        })
        .collect()
}

/// `payload.field` into its parts.
pub fn split_column(column: &str) -> Result<(PayloadId, &str)> {
    let (p, f) = column
        .split_once('.')
        .ok_or_else(|| Error::InvalidArgument(format!("column {column:?} is not payload.field")))?;
    Ok((p.parse()?, f))
}

fn csv_line(cells: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(cells)?;
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// A CSV file keyed by its first column. New keys are appended in place;
/// replacing an existing key rewrites the file.
#[derive(Debug)]
pub struct KeyedTable {
    path: PathBuf,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl KeyedTable {
    /// Opens `path`, creating it with `columns` as header when missing. An
    /// existing file must carry exactly this header.
    pub fn open(path: impl Into<PathBuf>, columns: &[String]) -> Result<Self> {
        let path = path.into();
        if path.exists() && fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len() > 0 {
            let table = Self::read(&path)?;
            if table.columns != columns {
                return Err(Error::SchemaVersion(format!(
                    "{} has a different header; refusing to mix schema versions in one table",
                    path.display()
                )));
            }
            return Ok(table);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, csv_line(columns)?).map_err(|e| Error::io(&path, e))?;
        Ok(KeyedTable {
            path,
            columns: columns.to_vec(),
            rows: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// Loads an existing table with whatever header it has.
    pub fn read(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)?;
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut table = KeyedTable {
            path,
            columns,
            rows: Vec::new(),
            index: HashMap::new(),
        };
        for rec in reader.records() {
            let row: Vec<String> = rec?.iter().map(str::to_string).collect();
            table.put(row);
        }
        Ok(table)
    }

    fn put(&mut self, row: Vec<String>) -> bool {
        let key = row.first().cloned().unwrap_or_default();
        match self.index.get(&key) {
            Some(&i) => {
                self.rows[i] = row;
                true
            }
            None => {
                self.index.insert(key, self.rows.len());
                self.rows.push(row);
                false
            }
        }
    }

    pub fn upsert(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::SchemaVersion(format!(
                "row has {} cells, {} has {} columns",
                row.len(),
                self.path.display(),
                self.columns.len()
            )));
        }
        let line = csv_line(&row)?;
        if self.put(row) {
            return self.rewrite();
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }

    fn rewrite(&self) -> Result<()> {
        let mut bytes = csv_line(&self.columns)?;
        for row in &self.rows {
            bytes.extend(csv_line(row)?);
        }
        fs::write(&self.path, bytes).map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn row(&self, key: &str) -> Option<&[String]> {
        self.index.get(key).map(|&i| self.rows[i].as_slice())
    }

    /// Regenerate `path` as a Parquet file with one optional UTF-8 column per
    /// table column; empty cells become nulls.
    pub fn write_parquet(&self, path: &Path) -> Result<()> {
        let fields = self
            .columns
            .iter()
            .map(|c| {
                Type::primitive_type_builder(c, PhysicalType::BYTE_ARRAY)
                    .with_repetition(Repetition::OPTIONAL)
                    .with_logical_type(Some(LogicalType::String))
                    .build()
                    .map(Arc::new)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let schema = Arc::new(Type::group_type_builder("study").with_fields(fields).build()?);
        let props = Arc::new(WriterProperties::builder().build());
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = SerializedFileWriter::new(file, schema, props)?;
        let mut group = writer.next_row_group()?;
        let mut i = 0;
        while let Some(mut col) = group.next_column()? {
            let mut values = Vec::new();
            let mut levels = Vec::with_capacity(self.rows.len());
            for row in &self.rows {
                let cell = &row[i];
                if cell.is_empty() {
                    levels.push(0i16);
                } else {
                    levels.push(1);
                    values.push(ByteArray::from(cell.as_str()));
                }
            }
            col.typed::<ByteArrayType>()
                .write_batch(&values, Some(&levels), None)?;
            col.close()?;
            i += 1;
        }
        group.close()?;
        writer.close()?;
        Ok(())
    }
}
