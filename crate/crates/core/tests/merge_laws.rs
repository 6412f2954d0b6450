mod support;

use doclift::consolidate::merge_payload;
use doclift::ingest::source_key;
use doclift::schema::{FieldValues, Value};
use support::merge::*;

const FIXTURES: usize = 10_000;

#[test]
fn merge_matches_brute_force_oracle() {
    let conflicted = check_oracle(20, FIXTURES).unwrap();
    assert!(conflicted > FIXTURES / 20, "fixtures rarely conflict: {conflicted}");
}

#[test]
fn permutation_invariance() {
    check_permutation(21, FIXTURES).unwrap();
}

#[test]
fn idempotence() {
    check_idempotence(22, FIXTURES).unwrap();
}

#[test]
fn monotonicity_and_null_preservation() {
    check_monotonicity(23, FIXTURES).unwrap();
}

#[test]
fn failed_annotations_contribute_nothing() {
    let ps = payloads();
    let p = &ps[3];
    let unit = Unit {
        order: (0, 0, 0),
        id: format!("{}:p0-8", source_key("fixture.pdf")),
    };
    let mut values = FieldValues::new();
    values.insert("turnaround_time".into(), Value::Text("1 hour".into()));
    let mut failed = annotation(p, &unit, FieldValues::new(), false);
    failed.values = values;
    let m = merge_payload(p, &[failed]).unwrap();
    assert!(!m.has_any_value());
}
