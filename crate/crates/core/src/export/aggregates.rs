//! Distributional summaries computed from the study table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::table::{decode_cell, split_column, KeyedTable};
use crate::error::{Error, Result};
use crate::schema::{FieldKind, FieldSpec, PayloadId, SchemaSet, Value};

/// Chart data keeps values occurring more than this many times.
pub const CHART_MIN_COUNT: usize = 3;
pub const CHART_TOP_N: usize = 20;

/// One schema field located in the table.
struct Column<'a> {
    qualified: String,
    payload: PayloadId,
    spec: &'a FieldSpec,
    index: usize,
}

fn schema_columns<'a>(table: &KeyedTable, set: &'a SchemaSet) -> Result<Vec<Column<'a>>> {
    let mut cols = Vec::new();
    for p in set.payloads() {
        for f in &p.fields {
            let qualified = format!("{}.{}", p.id, f.name);
            let index = table.column_index(&qualified).ok_or_else(|| {
                Error::SchemaVersion(format!(
                    "{} lacks column {qualified} of schema {}",
                    table.path().display(),
                    set.version
                ))
            })?;
            cols.push(Column {
                qualified,
                payload: p.id,
                spec: f,
                index,
            });
        }
    }
    Ok(cols)
}

/// Distinct items a study contributes for one field.
fn study_items(spec: &FieldSpec, cell: &str) -> Result<Vec<String>> {
    let Some(value) = decode_cell(spec.kind, cell)? else {
        return Ok(Vec::new());
    };
    let mut seen = BTreeSet::new();
    Ok(value
        .items()
        .into_iter()
        .filter(|i| seen.insert(i.clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub column: String,
    pub kind: FieldKind,
    /// (value, count) by count descending then value ascending.
    pub counts: Vec<(String, usize)>,
    /// Studies with a non-null value for the field.
    pub studies_with_value: usize,
}

impl FrequencyTable {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, c)| c).sum()
    }

    /// Top values above the chart cut.
    pub fn chart_data(&self) -> Vec<(String, usize)> {
        self.counts
            .iter()
            .filter(|(_, c)| *c > CHART_MIN_COUNT)
            .take(CHART_TOP_N)
            .cloned()
            .collect()
    }
}

fn sorted_counts(map: BTreeMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = map.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Value counts for every schema field; list items count once per study.
pub fn frequency_tables(table: &KeyedTable, set: &SchemaSet) -> Result<Vec<FrequencyTable>> {
    let cols = schema_columns(table, set)?;
    let mut out = Vec::with_capacity(cols.len());
    for col in &cols {
        let mut counts = BTreeMap::new();
        let mut studies = 0;
        for row in table.rows() {
            let items = study_items(col.spec, &row[col.index])?;
            if !items.is_empty() {
                studies += 1;
            }
            for i in items {
                *counts.entry(i).or_insert(0) += 1;
            }
        }
        out.push(FrequencyTable {
            column: col.qualified.clone(),
            kind: col.spec.kind,
            counts: sorted_counts(counts),
            studies_with_value: studies,
        });
    }
    Ok(out)
}

/// Counts of (a, b) pairs over the per-study Cartesian product of two fields.
pub fn composite_stratification(
    table: &KeyedTable,
    set: &SchemaSet,
    field_a: &str,
    field_b: &str,
) -> Result<Vec<(String, String, usize)>> {
    let locate = |name: &str| -> Result<(&FieldSpec, usize)> {
        let unknown = || Error::Config(format!("unknown stratification field {name:?}"));
        let (payload, field) = split_column(name).map_err(|_| unknown())?;
        let spec = set.payload(payload).field(field).ok_or_else(unknown)?;
        let index = table.column_index(name).ok_or_else(unknown)?;
        Ok((spec, index))
    };
    let (spec_a, ia) = locate(field_a)?;
    let (spec_b, ib) = locate(field_b)?;
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for row in table.rows() {
        let xs = study_items(spec_a, &row[ia])?;
        let ys = study_items(spec_b, &row[ib])?;
        for x in &xs {
            for y in &ys {
                *counts.entry((x.clone(), y.clone())).or_insert(0) += 1;
            }
        }
    }
    let mut v: Vec<(String, String, usize)> = counts.into_iter().map(|((a, b), c)| (a, b, c)).collect();
    v.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| (&a.0, &a.1).cmp(&(&b.0, &b.1))));
    Ok(v)
}

/// Binary study-by-field matrix: 1 where the field is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Missingness {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<u8>)>,
}

impl Missingness {
    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.columns.len()];
        for (_, bits) in &self.rows {
            for (s, b) in sums.iter_mut().zip(bits) {
                *s += usize::from(*b);
            }
        }
        sums
    }
}

pub fn missingness_matrix(table: &KeyedTable, set: &SchemaSet) -> Result<Missingness> {
    let cols = schema_columns(table, set)?;
    let rows = table
        .rows()
        .iter()
        .map(|row| {
            let bits = cols.iter().map(|c| u8::from(row[c.index].is_empty())).collect();
            (row[0].clone(), bits)
        })
        .collect();
    Ok(Missingness {
        columns: cols.into_iter().map(|c| c.qualified).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessRow {
    /// `payload` or `field`.
    pub scope: String,
    pub name: String,
    pub studies_with_value: usize,
    pub studies: usize,
    pub percent: f64,
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

/// Per payload: share of studies where any field of the payload is filled. Then the
/// same share for every individual field.
pub fn completeness_summary(table: &KeyedTable, set: &SchemaSet) -> Result<Vec<CompletenessRow>> {
    let cols = schema_columns(table, set)?;
    let n = table.len();
    let mut out = Vec::new();
    for p in PayloadId::ALL {
        let idx: Vec<usize> = cols.iter().filter(|c| c.payload == p).map(|c| c.index).collect();
        let k = table
            .rows()
            .iter()
            .filter(|row| idx.iter().any(|&i| !row[i].is_empty()))
            .count();
        out.push(CompletenessRow {
            scope: "payload".into(),
            name: p.to_string(),
            studies_with_value: k,
            studies: n,
            percent: percent(k, n),
        });
    }
    for c in &cols {
        let k = table.rows().iter().filter(|row| !row[c.index].is_empty()).count();
        out.push(CompletenessRow {
            scope: "field".into(),
            name: c.qualified.clone(),
            studies_with_value: k,
            studies: n,
            percent: percent(k, n),
        });
    }
    Ok(out)
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn bar_chart_svg(title: &str, data: &[(String, usize)]) -> String {
    let esc = |s: &str| {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
            .replace('"', "&quot;")
    };
    let row_h = 22;
    let label_w = 260;
    let bar_w = 360;
    let height = 40 + row_h * data.len();
    let max = data.iter().map(|(_, c)| *c).max().unwrap_or(1).max(1);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        label_w + bar_w + 60
    );
    let _ = writeln!(svg, r#"<text x="4" y="18" font-weight="bold">{}</text>"#, esc(title));
    for (i, (label, count)) in data.iter().enumerate() {
        let y = 30 + i * row_h;
        let w = bar_w * count / max;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text><rect x="{}" y="{y}" width="{w}" height="{}" fill="steelblue"/><text x="{}" y="{}">{count}</text>"#,
            label_w - 6,
            y + 14,
            esc(label),
            label_w,
            row_h - 4,
            label_w + w + 4,
            y + 14
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, Default)]
pub struct AggregateOptions {
    /// Qualified field pairs for composite stratification.
    pub strata: Vec<(String, String)>,
    /// Also render SVG bar charts next to the chart data.
    pub charts: bool,
}

/// Writes `aggregates/`, `missingness.csv` and `completeness.csv` under `out`.
pub fn write_aggregates(
    table: &KeyedTable,
    set: &SchemaSet,
    out: &Path,
    opts: &AggregateOptions,
) -> Result<Vec<FrequencyTable>> {
    let dir = out.join("aggregates");
    let charts = dir.join("charts");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&charts).map_err(|e| Error::io(&charts, e))?;

    let tables = frequency_tables(table, set)?;
    let mut manifest = Vec::new();
    for t in &tables {
        let file = format!("{}.csv", t.column);
        write_csv(
            &dir.join(&file),
            &["value", "count"],
            t.counts.iter().map(|(v, c)| [v.clone(), c.to_string()]),
        )?;
        let chart = t.chart_data();
        write_csv(
            &charts.join(&file),
            &["value", "count"],
            chart.iter().map(|(v, c)| [v.clone(), c.to_string()]),
        )?;
        if opts.charts && !chart.is_empty() {
            let svg_path = charts.join(format!("{}.svg", t.column));
            fs::write(&svg_path, bar_chart_svg(&t.column, &chart)).map_err(|e| Error::io(&svg_path, e))?;
        }
        manifest.push([
            file,
            t.column.clone(),
            format!("{:?}", t.kind).to_lowercase(),
            t.studies_with_value.to_string(),
            t.counts.len().to_string(),
            t.total().to_string(),
        ]);
    }
    for (a, b) in &opts.strata {
        let pairs = composite_stratification(table, set, a, b)?;
        let file = format!("strata.{a}__{b}.csv");
        write_csv(
            &dir.join(&file),
            &[a.as_str(), b.as_str(), "count"],
            pairs.iter().map(|(x, y, c)| [x.clone(), y.clone(), c.to_string()]),
        )?;
        manifest.push([
            file,
            format!("{a} x {b}"),
            "strata".into(),
            String::new(),
            pairs.len().to_string(),
            pairs.iter().map(|p| p.2).sum::<usize>().to_string(),
        ]);
    }
    write_csv(
        &dir.join("manifest.csv"),
        &["file", "column", "kind", "studies_with_value", "distinct_values", "total_count"],
        manifest,
    )?;

    let miss = missingness_matrix(table, set)?;
    let mut header = vec!["source_key"];
    header.extend(miss.columns.iter().map(String::as_str));
    write_csv(
        &out.join("missingness.csv"),
        &header,
        miss.rows.iter().map(|(key, bits)| {
            std::iter::once(key.clone())
                .chain(bits.iter().map(|b| b.to_string()))
                .collect::<Vec<_>>()
        }),
    )?;

    let comp = completeness_summary(table, set)?;
    write_csv(
        &out.join("completeness.csv"),
        &["scope", "name", "studies_with_value", "studies", "percent"],
        comp.iter().map(|r| {
            [
                r.scope.clone(),
                r.name.clone(),
                r.studies_with_value.to_string(),
                r.studies.to_string(),
                format!("{:.1}", r.percent),
            ]
        }),
    )?;
    Ok(tables)
}

/// Non-null typed value of one table cell for a schema field.
pub fn cell_value(table: &KeyedTable, row: usize, set: &SchemaSet, column: &str) -> Result<Option<Value>> {
    let (payload, field) = split_column(column)?;
    let spec = set
        .payload(payload)
        .field(field)
        .ok_or_else(|| Error::Config(format!("unknown field {column}")))?;
    let index = table
        .column_index(column)
        .ok_or_else(|| Error::Config(format!("table lacks column {column}")))?;
    decode_cell(spec.kind, &table.rows()[row][index])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::derive_columns;

    fn table(dir: &Path, rows: &[&[(&str, &str)]]) -> (KeyedTable, SchemaSet) {
        let set = SchemaSet::bundled_doac();
        let cols = derive_columns(&set);
        let mut t = KeyedTable::open(dir.join("studies.csv"), &cols).unwrap();
        for (i, cells) in rows.iter().enumerate() {
            let mut row = vec![String::new(); cols.len()];
            row[0] = format!("{i:040x}");
            for (c, v) in *cells {
                row[cols.iter().position(|x| x == c).unwrap()] = v.to_string();
            }
            t.upsert(row).unwrap();
        }
        (t, set)
    }

    const MOL: &str = "population_indications.doac_molecules";
    const TESTS: &str = "methods.concurrent_tests";

    #[test]
    fn frequency_counts_once_per_study() {
        let dir = tempfile::tempdir().unwrap();
        let (t, set) = table(dir.path(), &[&[(MOL, "A")], &[(MOL, "A|B")], &[(MOL, "B")], &[]]);
        let f = frequency_tables(&t, &set).unwrap();
        let mol = f.iter().find(|f| f.column == MOL).unwrap();
        assert_eq!(mol.counts, vec![("A".into(), 2), ("B".into(), 2)]);
        assert_eq!(mol.studies_with_value, 3);
        assert!(f.iter().find(|f| f.column == TESTS).unwrap().counts.is_empty());
    }

    #[test]
    fn strata_product() {
        let dir = tempfile::tempdir().unwrap();
        let (t, set) = table(
            dir.path(),
            &[&[(MOL, "Apixaban"), (TESTS, "aPTT|PT")], &[(MOL, "Apixaban")]],
        );
        let s = composite_stratification(&t, &set, MOL, TESTS).unwrap();
        assert_eq!(
            s,
            vec![
                ("Apixaban".into(), "PT".into(), 1),
                ("Apixaban".into(), "aPTT".into(), 1)
            ]
        );
        assert!(composite_stratification(&t, &set, MOL, "methods.nope").is_err());
    }

    #[test]
    fn missingness_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        let (t, set) = table(dir.path(), &[&[(MOL, "A"), ("meta_design.publication_year", "2020")], &[]]);
        let m = missingness_matrix(&t, &set).unwrap();
        assert!(m.rows[1].1.iter().all(|&b| b == 1));
        let sums = m.column_sums();
        let freq = frequency_tables(&t, &set).unwrap();
        for (s, f) in sums.iter().zip(&freq) {
            assert_eq!(*s, t.len() - f.studies_with_value);
        }
        let c = completeness_summary(&t, &set).unwrap();
        assert_eq!(c[0].percent, 50.0);
        assert_eq!(c[2].percent, 0.0);
        write_aggregates(&t, &set, dir.path(), &AggregateOptions { strata: vec![(MOL.into(), TESTS.into())], charts: true }).unwrap();
        assert!(dir.path().join("aggregates").join(format!("strata.{MOL}__{TESTS}.csv")).exists());
        assert!(dir.path().join("completeness.csv").exists());
    }
}
