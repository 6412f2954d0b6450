//! Merge laws on random small fixtures, each checked against a brute-force
//! oracle that lists every non-null value per field in reading order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use doclift::backend::{AnnotationStatus, UnitAnnotation, ValidationSummary};
use doclift::consolidate::{merge_payload, MergedPayload};
use doclift::ingest::source_key;
use doclift::schema::{FieldKind, FieldValues, PayloadId, PayloadSchema, SchemaSet, Value};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A unit with its reading-order position known up front.
#[derive(Clone)]
pub struct Unit {
    pub order: (u8, u32, u32),
    pub id: String,
}

fn units(rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let key = source_key("fixture.pdf");
    let mut out = Vec::new();
    let chunks = rng.gen_range(1..=3u32);
    for c in 0..chunks {
        out.push(Unit {
            order: (0, c * 8, 0),
            id: format!("{key}:p{}-{}", c * 8, c * 8 + 8),
        });
    }
    for _ in 0..rng.gen_range(0..=2) {
        let page = rng.gen_range(0..chunks * 8);
        let ord = rng.gen_range(0..3u32);
        let id = format!("{key}:c{page}.{ord}");
        if !out.iter().any(|u| u.id == id) {
            out.push(Unit { order: (1, page, ord), id });
        }
    }
    out
}

const TEXTS: &[&str] = &["6 months", " 6 months", "12 months", "2 weeks"];
const ITEMS: &[&str] = &["peak", "trough", "random", "not reported"];
const SENTENCES: &[&str] = &["A.", " A.", "B.", "C. "];

fn random_value(kind: FieldKind, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        FieldKind::Integer => Value::Integer(rng.gen_range(1..=3)),
        FieldKind::Real => Value::Real(f64::from(rng.gen_range(0..3u8)) / 2.0),
        FieldKind::EvidenceText => {
            let n = rng.gen_range(1..=2);
            Value::List(SENTENCES.choose_multiple(rng, n).map(|s| s.to_string()).collect())
        }
        k if k.is_list() => {
            let n = rng.gen_range(1..=3);
            Value::List(ITEMS.choose_multiple(rng, n).map(|s| s.to_string()).collect())
        }
        _ => Value::Text(TEXTS.choose(rng).unwrap().to_string()),
    }
}

pub fn annotation(payload: &PayloadSchema, unit: &Unit, values: FieldValues, ok: bool) -> UnitAnnotation {
    UnitAnnotation {
        parent: source_key("fixture.pdf"),
        unit_id: unit.id.clone(),
        payload_id: payload.id,
        values: if ok { values } else { FieldValues::new() },
        page_markdowns: Vec::new(),
        images: Vec::new(),
        status: if ok { AnnotationStatus::Ok } else { AnnotationStatus::Failed },
        error: (!ok).then(|| "scripted".to_string()),
        attempts: 1,
        validation: ValidationSummary::default(),
    }
}

pub struct Fixture {
    pub annotations: Vec<UnitAnnotation>,
    pub orders: Vec<(u8, u32, u32)>,
}

pub fn fixture(payload: &PayloadSchema, rng: &mut ChaCha8Rng) -> Fixture {
    let mut annotations = Vec::new();
    let mut orders = Vec::new();
    // Few fields per fixture keep collisions, and so conflicts, frequent.
    let fields: Vec<_> = payload.fields.choose_multiple(rng, 4).collect();
    for u in units(rng) {
        let mut values = FieldValues::new();
        for f in &fields {
            if rng.gen_bool(0.5) {
                values.insert(f.name.clone(), random_value(f.kind, rng));
            }
        }
        annotations.push(annotation(payload, &u, values, rng.gen_bool(0.9)));
        orders.push(u.order);
    }
    Fixture { annotations, orders }
}

/// Expected merge: (values, evidence, conflicted field names).
pub type Expected = (FieldValues, BTreeMap<String, Vec<String>>, BTreeSet<String>);

pub fn oracle(payload: &PayloadSchema, fx: &Fixture) -> Expected {
    let mut idx: Vec<usize> = (0..fx.annotations.len()).filter(|&i| fx.annotations[i].is_ok()).collect();
    idx.sort_by_key(|&i| fx.orders[i]);
    let mut values = FieldValues::new();
    let mut evidence = BTreeMap::new();
    let mut conflicts = BTreeSet::new();
    for f in &payload.fields {
        // Every non-null observation of this field, in reading order.
        let all: Vec<&Value> = idx.iter().filter_map(|&i| fx.annotations[i].values.get(&f.name)).collect();
        if all.is_empty() {
            continue;
        }
        if f.kind.is_list() {
            let mut items: Vec<String> = Vec::new();
            for v in &all {
                let Value::List(xs) = v else { unreachable!() };
                for x in xs {
                    let x = if f.kind == FieldKind::EvidenceText { x.trim().to_string() } else { x.clone() };
                    if !items.contains(&x) {
                        items.push(x);
                    }
                }
            }
            if f.kind == FieldKind::EvidenceText {
                evidence.insert(f.name.clone(), items);
            } else {
                values.insert(f.name.clone(), Value::List(items));
            }
            continue;
        }
        let key = |v: &Value| match v {
            Value::Text(t) => t.trim().to_string(),
            other => format!("{other:?}"),
        };
        let distinct: BTreeSet<String> = all.iter().map(|v| key(v)).collect();
        if distinct.len() == 1 {
            values.insert(f.name.clone(), all[0].clone());
        } else {
            conflicts.insert(f.name.clone());
        }
    }
    (values, evidence, conflicts)
}

pub fn conflict_set(m: &MergedPayload) -> BTreeSet<String> {
    m.conflicts.iter().map(|c| c.field.clone()).collect()
}

pub fn payloads() -> Vec<Arc<PayloadSchema>> {
    let set = SchemaSet::bundled_doac();
    PayloadId::ALL.iter().map(|&p| set.payload(p).clone()).collect()
}

type Law = fn(&PayloadSchema, &Fixture, &mut ChaCha8Rng) -> Result<bool, String>;

/// Runs `law` over `n` fixtures cycling through the payloads. Returns how many
/// fixtures the law reported as conflicted.
fn check(seed: u64, n: usize, law: Law) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = payloads();
    let mut conflicted = 0;
    for i in 0..n {
        let p = &ps[i % ps.len()];
        let fx = fixture(p, &mut rng);
        conflicted += usize::from(law(p, &fx, &mut rng).map_err(|e| format!("fixture {i}: {e}"))?);
    }
    Ok(conflicted)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn merge(p: &PayloadSchema, anns: &[UnitAnnotation]) -> Result<MergedPayload, String> {
    merge_payload(p, anns).map_err(|e| e.to_string())
}

fn matches_oracle(p: &PayloadSchema, fx: &Fixture, _: &mut ChaCha8Rng) -> Result<bool, String> {
    let merged = merge(p, &fx.annotations)?;
    let (values, evidence, conflicts) = oracle(p, fx);
    ensure(merged.values == values, || format!("values {:?} vs {values:?}", merged.values))?;
    ensure(merged.evidence == evidence, || format!("evidence {:?} vs {evidence:?}", merged.evidence))?;
    ensure(conflict_set(&merged) == conflicts, || format!("conflicts {:?} vs {conflicts:?}", conflict_set(&merged)))?;
    for c in &merged.conflicts {
        let observed = fx
            .annotations
            .iter()
            .filter(|a| a.is_ok() && a.values.contains_key(&c.field))
            .count();
        ensure(c.observed.len() == observed, || format!("{} keeps {} of {observed} observations", c.field, c.observed.len()))?;
    }
    Ok(!conflicts.is_empty())
}

fn permutation_invariant(p: &PayloadSchema, fx: &Fixture, rng: &mut ChaCha8Rng) -> Result<bool, String> {
    let base = merge(p, &fx.annotations)?;
    let mut shuffled = fx.annotations.clone();
    shuffled.shuffle(rng);
    let again = merge(p, &shuffled)?;
    ensure(again == base, || "merge depends on input order".into())?;
    Ok(!base.conflicts.is_empty())
}

fn idempotent(p: &PayloadSchema, fx: &Fixture, _: &mut ChaCha8Rng) -> Result<bool, String> {
    let once = merge(p, &fx.annotations)?;
    let doubled: Vec<UnitAnnotation> = fx.annotations.iter().chain(&fx.annotations).cloned().collect();
    let twice = merge(p, &doubled)?;
    ensure(twice.values == once.values, || "values change when annotations repeat".into())?;
    ensure(twice.evidence == once.evidence, || "evidence changes when annotations repeat".into())?;
    ensure(conflict_set(&twice) == conflict_set(&once), || "conflicts change when annotations repeat".into())?;
    Ok(!once.conflicts.is_empty())
}

fn monotone(p: &PayloadSchema, fx: &Fixture, rng: &mut ChaCha8Rng) -> Result<bool, String> {
    let prefix = rng.gen_range(0..fx.annotations.len());
    let small = merge(p, &fx.annotations[..prefix])?;
    let big = merge(p, &fx.annotations)?;
    for f in &p.fields {
        let name = &f.name;
        if f.kind.is_list() {
            let items = |m: &MergedPayload| m.get(name).map(|v| v.items()).unwrap_or_default();
            let (a, b) = (items(&small), items(&big));
            ensure(a.iter().all(|x| b.contains(x)), || format!("{name} lost items"))?;
        } else if conflict_set(&small).contains(name) {
            ensure(conflict_set(&big).contains(name), || format!("{name} conflict resolved"))?;
        } else if small.values.contains_key(name) {
            ensure(
                big.values.contains_key(name) || conflict_set(&big).contains(name),
                || format!("{name} value vanished"),
            )?;
        }
        let seen = fx.annotations.iter().any(|a| a.is_ok() && a.values.contains_key(name));
        if !seen {
            ensure(big.get(name).is_none() && !conflict_set(&big).contains(name), || {
                format!("{name} filled without an observation")
            })?;
        }
    }
    Ok(!big.conflicts.is_empty())
}

pub fn check_oracle(seed: u64, n: usize) -> Result<usize, String> {
    check(seed, n, matches_oracle)
}

pub fn check_permutation(seed: u64, n: usize) -> Result<usize, String> {
    check(seed, n, permutation_invariant)
}

pub fn check_idempotence(seed: u64, n: usize) -> Result<usize, String> {
    check(seed, n, idempotent)
}

pub fn check_monotonicity(seed: u64, n: usize) -> Result<usize, String> {
    check(seed, n, monotone)
}
