use std::fs::File;

use doclift::consolidate::{integrate_payloads, MergedPayload};
use doclift::export::{decode_cell, encode_value, record_row, KeyedTable};
use doclift::ingest::source_key;
use doclift::schema::{derive_columns, FieldKind, PayloadId, SchemaSet, Value};
use parquet::file::reader::{FileReader, SerializedFileReader};
use parquet::record::Field;
use proptest::prelude::*;

fn text_item() -> impl Strategy<Value = String> {
    // Separators, escapes, quotes, newlines and non-ASCII all appear.
    "[a-z|\\\\¶\",\n é]{1,12}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn list_cells_round_trip(items in proptest::collection::vec(text_item(), 1..5)) {
        let v = Value::List(items);
        for kind in [FieldKind::ListOfText, FieldKind::ListOfEnum, FieldKind::EvidenceText] {
            let cell = encode_value(kind, &v);
            prop_assert_eq!(decode_cell(kind, &cell).unwrap(), Some(v.clone()));
        }
    }

    #[test]
    fn table_round_trips_through_csv_and_parquet(
        rows in proptest::collection::vec(proptest::collection::vec(proptest::option::of(text_item()), 3), 0..8)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let cols: Vec<String> = ["source_key", "a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let csv = dir.path().join("t.csv");
        let mut t = KeyedTable::open(&csv, &cols).unwrap();
        let mut expected = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let mut row = vec![format!("{i:040x}")];
            row.extend(r.iter().map(|c| c.clone().unwrap_or_default()));
            t.upsert(row.clone()).unwrap();
            expected.push(row);
        }
        let back = KeyedTable::read(&csv).unwrap();
        prop_assert_eq!(back.columns(), cols.as_slice());
        prop_assert_eq!(back.rows(), expected.as_slice());

        let pq = dir.path().join("t.parquet");
        t.write_parquet(&pq).unwrap();
        let reader = SerializedFileReader::new(File::open(&pq).unwrap()).unwrap();
        prop_assert_eq!(reader.metadata().file_metadata().num_rows() as usize, expected.len());
        let mut got = Vec::new();
        for row in reader.get_row_iter(None).unwrap() {
            let row = row.unwrap();
            let cells: Vec<String> = row
                .get_column_iter()
                .map(|(_, f)| match f {
                    Field::Str(s) => s.clone(),
                    Field::Null => String::new(),
                    other => panic!("unexpected parquet field {other:?}"),
                })
                .collect();
            got.push(cells);
        }
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn record_rows_decode_to_record_values() {
    let set = SchemaSet::bundled_doac();
    let cols = derive_columns(&set);
    let mut merged: Vec<MergedPayload> = PayloadId::ALL.iter().map(|&p| MergedPayload::empty(p)).collect();
    merged[0].values.insert("publication_year".into(), Value::Integer(2021));
    merged[1]
        .values
        .insert("doac_molecules".into(), Value::List(vec!["Apixaban".into(), "Edoxaban".into()]));
    merged[1]
        .evidence
        .insert("subgroups_evidence".into(), vec!["One; two | three.".into()]);
    merged[4].values.insert("correlation_coefficient".into(), Value::Real(-0.25));
    let record = integrate_payloads(merged, source_key("r.pdf"), vec!["u:p0-8".into()]).unwrap();
    let row = record_row(&record, &set, &cols).unwrap();
    assert_eq!(row.len(), cols.len());
    assert_eq!(row[0], source_key("r.pdf").as_str());
    for (col, cell) in cols.iter().zip(&row).skip(4) {
        let (payload, field) = col.split_once('.').unwrap();
        let p = set.payloads().iter().find(|p| p.id.as_str() == payload).unwrap();
        let kind = p.field(field).unwrap().kind;
        assert_eq!(decode_cell(kind, cell).unwrap(), record.get(p.id, field), "{col}");
    }
}
