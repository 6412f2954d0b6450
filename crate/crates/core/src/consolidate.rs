//! Study-level consolidation of per-unit annotations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::UnitAnnotation;
use crate::chunking::UnitOrder;
use crate::error::{Error, Result};
use crate::ingest::SourceKey;
use crate::schema::{FieldKind, FieldValues, PayloadId, PayloadSchema, Value};
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub value: Value,
    pub unit_id: String,
}

/// A scalar field that received two or more distinct non-null values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictFlag {
    pub payload_id: PayloadId,
    pub field: String,
    /// Every non-null observation, in unit order.
    pub observed: Vec<Observation>,
}

impl ConflictFlag {
    /// Distinct observed values in first-seen order.
    pub fn distinct_values(&self) -> Vec<&Value> {
        let mut seen: Vec<&Value> = Vec::new();
        for o in &self.observed {
            if !seen.iter().any(|v| scalar_eq(v, &o.value)) {
                seen.push(&o.value);
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedPayload {
    pub payload_id: PayloadId,
    /// Non-evidence fields; absent means null.
    pub values: FieldValues,
    /// Evidence fields; each list is non-empty and holds distinct sentences.
    pub evidence: BTreeMap<String, Vec<String>>,
    pub conflicts: Vec<ConflictFlag>,
}

impl MergedPayload {
    pub fn empty(payload_id: PayloadId) -> Self {
        MergedPayload {
            payload_id,
            values: FieldValues::new(),
            evidence: BTreeMap::new(),
            conflicts: Vec::new(),
        }
    }

    /// Field value with evidence fields presented as lists.
    pub fn get(&self, field: &str) -> Option<Value> {
        self.values
            .get(field)
            .cloned()
            .or_else(|| self.evidence.get(field).map(|e| Value::List(e.clone())))
    }

    pub fn has_any_value(&self) -> bool {
        !self.values.is_empty() || !self.evidence.is_empty()
    }
}

/// Reading-order key recovered from a unit id (`…:p<s>-<e>` or `…:c<page>.<ord>`).
pub fn unit_order(unit_id: &str) -> Option<UnitOrder> {
    let (_, tail) = unit_id.rsplit_once(':')?;
    if let Some(range) = tail.strip_prefix('p') {
        let (start, _) = range.split_once('-')?;
        return start.parse().ok().map(UnitOrder::Chunk);
    }
    let (page, ord) = tail.strip_prefix('c')?.split_once('.')?;
    Some(UnitOrder::Caption(page.parse().ok()?, ord.parse().ok()?))
}

fn scalar_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Text(x), Value::Text(y)) => normalize(x) == normalize(y),
        _ => a == b,
    }
}

fn push_distinct(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

/// Merge all annotations of one payload for one document.
///
/// Failed annotations contribute nothing. Lists and evidence are unioned in
/// reading order of their units regardless of input order.
pub fn merge_payload(schema: &PayloadSchema, annotations: &[UnitAnnotation]) -> Result<MergedPayload> {
    if let Some(first) = annotations.first() {
        for a in annotations {
            if a.payload_id != schema.id || a.parent != first.parent {
                return Err(Error::Consolidation(format!(
                    "annotation {} ({}) does not belong to {} of {}",
                    a.unit_id, a.payload_id, schema.id, first.parent
                )));
            }
        }
    }
    let mut ordered: Vec<&UnitAnnotation> = annotations.iter().filter(|a| a.is_ok()).collect();
    ordered.sort_by(|a, b| {
        unit_order(&a.unit_id)
            .cmp(&unit_order(&b.unit_id))
            .then_with(|| a.unit_id.cmp(&b.unit_id))
    });

    let mut merged = MergedPayload::empty(schema.id);
    for field in &schema.fields {
        let name = field.name.as_str();
        if field.kind.is_list() {
            let mut items: Vec<String> = Vec::new();
            for a in &ordered {
                if let Some(Value::List(xs)) = a.values.get(name) {
                    for x in xs {
                        let x = if field.kind == FieldKind::EvidenceText { x.trim() } else { x.as_str() };
                        push_distinct(&mut items, x);
                    }
                }
            }
            if items.is_empty() {
                continue;
            }
            if field.kind == FieldKind::EvidenceText {
                merged.evidence.insert(name.to_string(), items);
            } else {
                merged.values.insert(name.to_string(), Value::List(items));
            }
            continue;
        }
        let observed: Vec<Observation> = ordered
            .iter()
            .filter_map(|a| {
                a.values.get(name).map(|v| Observation {
                    value: v.clone(),
                    unit_id: a.unit_id.clone(),
                })
            })
            .collect();
        let Some(first) = observed.first() else {
            continue;
        };
        if observed.iter().all(|o| scalar_eq(&o.value, &first.value)) {
            merged.values.insert(name.to_string(), first.value.clone());
        } else {
            merged.conflicts.push(ConflictFlag {
                payload_id: schema.id,
                field: name.to_string(),
                observed,
            });
        }
    }
    Ok(merged)
}

/// One document's consolidated annotations across all payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub key: SourceKey,
    /// One entry per payload, in payload order.
    pub payloads: Vec<MergedPayload>,
    pub review_needed: bool,
    pub failed_units: Vec<String>,
}

impl StudyRecord {
    pub fn payload(&self, id: PayloadId) -> &MergedPayload {
        self.payloads
            .iter()
            .find(|p| p.payload_id == id)
            .expect("study record holds every payload")
    }

    pub fn get(&self, id: PayloadId, field: &str) -> Option<Value> {
        self.payload(id).get(field)
    }

    pub fn conflicts(&self) -> impl Iterator<Item = &ConflictFlag> {
        self.payloads.iter().flat_map(|p| p.conflicts.iter())
    }

    /// `payload.field{v1|v2}` entries joined by `;`. Literal `\ | ; { }`
    /// inside values are backslash-escaped.
    pub fn conflict_flags_cell(&self) -> String {
        let escape = |s: &str| {
            let mut out = String::with_capacity(s.len());
            for c in s.chars() {
                if matches!(c, '\\' | '|' | ';' | '{' | '}') {
                    out.push('\\');
                }
                out.push(c);
            }
            out
        };
        self.conflicts()
            .map(|c| {
                let values: Vec<String> = c
                    .distinct_values()
                    .into_iter()
                    .map(|v| escape(&v.to_string()))
                    .collect();
                format!("{}.{}{{{}}}", c.payload_id, c.field, values.join("|"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Place the five merged payloads side by side. No value crosses payloads.
pub fn integrate_payloads(
    merged: Vec<MergedPayload>,
    key: SourceKey,
    mut failed_units: Vec<String>,
) -> Result<StudyRecord> {
    let mut slots: Vec<Option<MergedPayload>> = vec![None; PayloadId::ALL.len()];
    for m in merged {
        let i = PayloadId::ALL
            .iter()
            .position(|p| *p == m.payload_id)
            .expect("payload id is one of ALL");
        if slots[i].is_some() {
            return Err(Error::Consolidation(format!("payload {} merged twice", m.payload_id)));
        }
        slots[i] = Some(m);
    }
    let mut payloads = Vec::with_capacity(slots.len());
    for (slot, id) in slots.into_iter().zip(PayloadId::ALL) {
        payloads.push(slot.ok_or_else(|| Error::Consolidation(format!("payload {id} missing")))?);
    }
    failed_units.sort();
    failed_units.dedup();
    let review_needed = !failed_units.is_empty() || payloads.iter().any(|p| !p.conflicts.is_empty());
    Ok(StudyRecord {
        key,
        payloads,
        review_needed,
        failed_units,
    })
}
