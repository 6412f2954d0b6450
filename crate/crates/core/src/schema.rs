//! Payload schemas: typed fields, closed vocabularies, evidence pairing and
//! the null-when-unsupported validation contract.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::error::{Error, Result};
use crate::text::normalize;

/// Bundled DOAC schema set definition.
pub const DOAC_V1: &str = include_str!("../schemas/doac.v1.toml");
pub const DOAC_V1_NAME: &str = "doac.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadId {
    MetaDesign,
    PopulationIndications,
    Methods,
    Outcomes,
    DiagnosticPerformance,
}

impl PayloadId {
    pub const ALL: [PayloadId; 5] = [
        PayloadId::MetaDesign,
        PayloadId::PopulationIndications,
        PayloadId::Methods,
        PayloadId::Outcomes,
        PayloadId::DiagnosticPerformance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PayloadId::MetaDesign => "meta_design",
            PayloadId::PopulationIndications => "population_indications",
            PayloadId::Methods => "methods",
            PayloadId::Outcomes => "outcomes",
            PayloadId::DiagnosticPerformance => "diagnostic_performance",
        }
    }
}

impl fmt::Display for PayloadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PayloadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PayloadId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown payload id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Integer,
    Real,
    Text,
    Enum,
    ListOfEnum,
    ListOfText,
    EvidenceText,
}

impl FieldKind {
    pub fn is_list(self) -> bool {
        matches!(self, FieldKind::ListOfEnum | FieldKind::ListOfText | FieldKind::EvidenceText)
    }

    pub fn is_scalar(self) -> bool {
        !self.is_list()
    }

    pub fn has_vocabulary(self) -> bool {
        matches!(self, FieldKind::Enum | FieldKind::ListOfEnum)
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, FieldKind::Integer | FieldKind::Real)
    }
}

/// A typed, non-null field value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Integer(i64),
    Real(f64),
    Text(String),
    List(Vec<String>),
}

impl Value {
    pub fn to_json(&self) -> Json {
        match self {
            Value::Integer(i) => Json::from(*i),
            Value::Real(r) => serde_json::Number::from_f64(*r).map_or(Json::Null, Json::Number),
            Value::Text(s) => Json::from(s.as_str()),
            Value::List(items) => Json::from(items.clone()),
        }
    }

    /// Items for counting purposes: one for scalars, each element for lists.
    pub fn items(&self) -> Vec<String> {
        match self {
            Value::List(items) => items.clone(),
            other => vec![other.to_string()],
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(s) => f.write_str(s),
            Value::List(items) => f.write_str(&items.join(", ")),
        }
    }
}

/// Non-null typed values by field name; absent means null.
pub type FieldValues = BTreeMap<String, Value>;

pub fn values_to_json(values: &FieldValues) -> Map<String, Json> {
    values.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()
}

#[derive(Debug, Clone)]
pub struct VocabularyEntry {
    pub label: String,
    pub aliases: Vec<String>,
}

/// Plausibility rule used by the numeric sanity indicator.
#[derive(Debug, Clone)]
pub struct SanityRule {
    pub range: Option<(f64, f64)>,
    pub unit_pattern: Option<Regex>,
}

#[derive(Debug, Clone)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub vocabulary: Vec<VocabularyEntry>,
    pub description: String,
    pub evidence_partner: Option<String>,
    pub nullable: bool,
    pub sanity: Option<SanityRule>,
    lookup: HashMap<String, String>,
}

impl FieldSpec {
    /// Canonical label for a label or alias (exact after trim + NFC).
    pub fn resolve_label(&self, raw: &str) -> Option<&str> {
        self.lookup.get(&normalize(raw)).map(String::as_str)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.vocabulary.iter().map(|v| v.label.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct PayloadSchema {
    pub id: PayloadId,
    pub version: String,
    pub instructions: String,
    pub fields: Vec<FieldSpec>,
    by_name: HashMap<String, usize>,
    evidence_for: HashMap<String, Vec<String>>,
}

impl PayloadSchema {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.by_name.get(name).map(|&i| &self.fields[i])
    }

    /// Fields whose evidence partner is `evidence_field`.
    pub fn evidence_owners(&self, evidence_field: &str) -> &[String] {
        self.evidence_for
            .get(evidence_field)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// JSON Schema describing the annotation format, as sent to remote backends.
    pub fn json_schema(&self) -> Json {
        let mut props = Map::new();
        for f in &self.fields {
            let labels: Vec<Json> = f.labels().map(Json::from).collect();
            let schema = match f.kind {
                FieldKind::Integer => serde_json::json!({"type": ["integer", "null"]}),
                FieldKind::Real => serde_json::json!({"type": ["number", "null"]}),
                FieldKind::Text => serde_json::json!({"type": ["string", "null"]}),
                FieldKind::Enum => {
                    let mut options = labels;
                    options.push(Json::Null);
                    serde_json::json!({"type": ["string", "null"], "enum": options})
                }
                FieldKind::ListOfEnum => serde_json::json!({
                    "type": ["array", "null"],
                    "items": {"type": "string", "enum": labels}
                }),
                FieldKind::ListOfText | FieldKind::EvidenceText => serde_json::json!({
                    "type": ["array", "null"],
                    "items": {"type": "string"}
                }),
            };
            let mut schema = schema;
            schema["description"] = Json::from(f.description.as_str());
            props.insert(f.name.clone(), schema);
        }
        serde_json::json!({
            "title": self.id.as_str(),
            "description": self.instructions,
            "type": "object",
            "properties": props,
            "required": self.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(),
            "additionalProperties": false,
        })
    }
}

/// The five validated payloads of one schema version.
#[derive(Debug, Clone)]
pub struct SchemaSet {
    pub name: String,
    pub version: String,
    payloads: Vec<Arc<PayloadSchema>>,
    document: SchemaDocument,
}

impl SchemaSet {
    pub fn payloads(&self) -> &[Arc<PayloadSchema>] {
        &self.payloads
    }

    pub fn payload(&self, id: PayloadId) -> &Arc<PayloadSchema> {
        self.payloads
            .iter()
            .find(|p| p.id == id)
            .expect("validated schema set holds every payload")
    }

    pub fn bundled_doac() -> Self {
        load_schema_set(DOAC_V1).expect("bundled DOAC schema is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        load_schema_set(&text)
    }

    /// Serialized definition; loading it again yields an identical set.
    pub fn to_definition(&self) -> Result<String> {
        toml::to_string_pretty(&self.document)
            .map_err(|e| Error::schema("<document>", e.to_string()))
    }
}

// On-disk definition format.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDocument {
    name: String,
    version: String,
    #[serde(rename = "payload", default)]
    payloads: Vec<PayloadDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PayloadDocument {
    id: String,
    #[serde(default)]
    instructions: String,
    #[serde(rename = "field", default)]
    fields: Vec<FieldDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldDocument {
    name: String,
    kind: FieldKind,
    #[serde(default)]
    description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evidence_partner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    vocabulary: Vec<VocabularyDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum VocabularyDocument {
    Label(String),
    WithAliases {
        label: String,
        #[serde(default)]
        aliases: Vec<String>,
    },
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Parse and validate a schema definition document.
pub fn load_schema_set(definition: &str) -> Result<SchemaSet> {
    let document: SchemaDocument = toml::from_str(definition)?;
    build_schema_set(document)
}

fn build_schema_set(document: SchemaDocument) -> Result<SchemaSet> {
    if document.version.trim().is_empty() {
        return Err(Error::schema("version", "schema version must not be empty"));
    }
    if document.payloads.len() != PayloadId::ALL.len() {
        return Err(Error::schema(
            "payload",
            format!("expected 5 payloads, found {}", document.payloads.len()),
        ));
    }
    let mut payloads = Vec::with_capacity(5);
    for pd in &document.payloads {
        let id: PayloadId = pd
            .id
            .parse()
            .map_err(|_| Error::schema(&pd.id, "unknown payload id"))?;
        if payloads.iter().any(|p: &PayloadSchema| p.id == id) {
            return Err(Error::schema(&pd.id, "duplicate payload"));
        }
        payloads.push(build_payload(id, &document.version, pd)?);
    }
    payloads.sort_by_key(|p| p.id);
    Ok(SchemaSet {
        name: document.name.clone(),
        version: document.version.clone(),
        payloads: payloads.into_iter().map(Arc::new).collect(),
        document,
    })
}

fn build_payload(id: PayloadId, version: &str, pd: &PayloadDocument) -> Result<PayloadSchema> {
    let qualified = |name: &str| format!("{id}.{name}");
    let mut fields = Vec::with_capacity(pd.fields.len());
    let mut by_name = HashMap::new();
    for (i, fd) in pd.fields.iter().enumerate() {
        let name = qualified(&fd.name);
        if !is_identifier(&fd.name) {
            return Err(Error::schema(name, "field names must be lowercase identifiers"));
        }
        if by_name.insert(fd.name.clone(), i).is_some() {
            return Err(Error::schema(name, "duplicate field name"));
        }
        let (vocabulary, lookup) = build_vocabulary(&name, fd)?;
        let sanity = build_sanity(&name, fd)?;
        fields.push(FieldSpec {
            name: fd.name.clone(),
            kind: fd.kind,
            vocabulary,
            description: fd.description.clone(),
            evidence_partner: fd.evidence_partner.clone(),
            nullable: true,
            sanity,
            lookup,
        });
    }

    let mut evidence_for: HashMap<String, Vec<String>> = HashMap::new();
    for f in &fields {
        let Some(partner) = &f.evidence_partner else {
            continue;
        };
        if f.kind == FieldKind::EvidenceText {
            return Err(Error::schema(qualified(&f.name), "evidence fields cannot have partners"));
        }
        match by_name.get(partner).map(|&i| &fields[i]) {
            Some(p) if p.kind == FieldKind::EvidenceText => {
                evidence_for.entry(partner.clone()).or_default().push(f.name.clone());
            }
            Some(_) => {
                return Err(Error::schema(
                    qualified(&f.name),
                    format!("evidence partner `{partner}` is not an evidence_text field"),
                ))
            }
            None => {
                return Err(Error::schema(
                    qualified(&f.name),
                    format!("evidence partner `{partner}` does not exist"),
                ))
            }
        }
    }

    Ok(PayloadSchema {
        id,
        version: version.to_string(),
        instructions: pd.instructions.clone(),
        fields,
        by_name,
        evidence_for,
    })
}

fn build_vocabulary(
    name: &str,
    fd: &FieldDocument,
) -> Result<(Vec<VocabularyEntry>, HashMap<String, String>)> {
    if !fd.kind.has_vocabulary() {
        if !fd.vocabulary.is_empty() {
            return Err(Error::schema(name, "vocabulary given for a non-enum field"));
        }
        return Ok((Vec::new(), HashMap::new()));
    }
    if fd.vocabulary.is_empty() {
        return Err(Error::schema(name, "enum field requires a non-empty vocabulary"));
    }
    let mut entries = Vec::new();
    let mut lookup = HashMap::new();
    let mut labels = HashSet::new();
    for v in &fd.vocabulary {
        let (label, aliases) = match v {
            VocabularyDocument::Label(l) => (normalize(l), Vec::new()),
            VocabularyDocument::WithAliases { label, aliases } => {
                (normalize(label), aliases.iter().map(|a| normalize(a)).collect())
            }
        };
        if label.is_empty() {
            return Err(Error::schema(name, "empty vocabulary label"));
        }
        if !labels.insert(label.clone()) {
            return Err(Error::schema(name, format!("duplicate label `{label}`")));
        }
        for key in std::iter::once(&label).chain(&aliases) {
            if let Some(prev) = lookup.insert(key.clone(), label.clone()) {
                if prev != label {
                    return Err(Error::schema(
                        name,
                        format!("`{key}` maps to both `{prev}` and `{label}`"),
                    ));
                }
            }
        }
        entries.push(VocabularyEntry { label, aliases });
    }
    Ok((entries, lookup))
}

fn build_sanity(name: &str, fd: &FieldDocument) -> Result<Option<SanityRule>> {
    let range = match fd.range {
        Some(_) if !fd.kind.is_numeric() => {
            return Err(Error::schema(name, "range applies to integer or real fields only"));
        }
        Some([lo, hi]) if lo.is_nan() || hi.is_nan() || lo > hi => {
            return Err(Error::schema(name, "range minimum exceeds maximum"));
        }
        Some([lo, hi]) => Some((lo, hi)),
        None => None,
    };
    let unit_pattern = match &fd.unit_pattern {
        Some(_) if fd.kind != FieldKind::Text => {
            return Err(Error::schema(name, "unit_pattern applies to text fields only"));
        }
        Some(p) => Some(
            Regex::new(p).map_err(|e| Error::schema(name, format!("bad unit_pattern: {e}")))?,
        ),
        None => None,
    };
    Ok((range.is_some() || unit_pattern.is_some()).then_some(SanityRule {
        range,
        unit_pattern,
    }))
}

/// Fixed leading columns of the study table.
pub const PROVENANCE_COLUMNS: [&str; 4] = ["source_key", "review_needed", "failed_units", "conflict_flags"];

/// Columns of the study table: fixed provenance columns, then every payload
/// field as `<payload>.<field>` in payload then declaration order.
pub fn derive_columns(set: &SchemaSet) -> Vec<String> {
    let mut cols: Vec<String> = PROVENANCE_COLUMNS.iter().map(|c| c.to_string()).collect();
    for p in set.payloads() {
        cols.extend(p.fields.iter().map(|f| format!("{}.{}", p.id, f.name)));
    }
    cols
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TypeMismatch,
    OutOfVocabulary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Result of validating one raw annotation against a payload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Validated {
    pub values: FieldValues,
    pub violations: Vec<Violation>,
    pub unknown_keys: Vec<String>,
    /// Schema fields present in the raw document (null included).
    pub present: usize,
    /// Present fields that produced no violation.
    pub conforming: usize,
}

impl Validated {
    /// Share of present schema fields without violation; 1 when none present.
    pub fn conformance(&self) -> f64 {
        if self.present == 0 {
            1.0
        } else {
            self.conforming as f64 / self.present as f64
        }
    }
}

/// Map a raw key-value document onto typed values. Never fails: anything that
/// does not conform becomes null and is recorded as a violation.
pub fn validate_annotation(payload: &PayloadSchema, raw: &Map<String, Json>) -> Validated {
    let mut out = Validated::default();
    for (key, value) in raw {
        let Some(field) = payload.field(key) else {
            out.unknown_keys.push(key.clone());
            continue;
        };
        out.present += 1;
        let before = out.violations.len();
        if let Some(v) = convert(field, value, &mut out.violations) {
            out.values.insert(field.name.clone(), v);
        }
        if out.violations.len() == before {
            out.conforming += 1;
        }
    }
    out
}

fn convert(field: &FieldSpec, raw: &Json, violations: &mut Vec<Violation>) -> Option<Value> {
    let mut violate = |kind, detail: String| {
        violations.push(Violation {
            field: field.name.clone(),
            kind,
            detail,
        })
    };
    if raw.is_null() {
        return None;
    }
    match field.kind {
        FieldKind::Integer => match raw.as_i64() {
            Some(i) => Some(Value::Integer(i)),
            None => {
                violate(ViolationKind::TypeMismatch, format!("expected integer, got {raw}"));
                None
            }
        },
        FieldKind::Real => match raw.as_f64() {
            Some(r) if raw.is_number() => Some(Value::Real(r)),
            _ => {
                violate(ViolationKind::TypeMismatch, format!("expected number, got {raw}"));
                None
            }
        },
        FieldKind::Text => match raw.as_str() {
            Some(s) => {
                let s = normalize(s);
                (!s.is_empty()).then_some(Value::Text(s))
            }
            None => {
                violate(ViolationKind::TypeMismatch, format!("expected string, got {raw}"));
                None
            }
        },
        FieldKind::Enum => match raw.as_str() {
            Some(s) => match field.resolve_label(s) {
                Some(label) => Some(Value::Text(label.to_string())),
                None if normalize(s).is_empty() => None,
                None => {
                    violate(ViolationKind::OutOfVocabulary, format!("label {s:?}"));
                    None
                }
            },
            None => {
                violate(ViolationKind::TypeMismatch, format!("expected label, got {raw}"));
                None
            }
        },
        FieldKind::ListOfEnum | FieldKind::ListOfText | FieldKind::EvidenceText => {
            let items: Vec<&Json> = match raw {
                Json::Array(items) => items.iter().collect(),
                Json::String(_) => vec![raw],
                _ => {
                    violate(ViolationKind::TypeMismatch, format!("expected list, got {raw}"));
                    return None;
                }
            };
            let mut out: Vec<String> = Vec::new();
            for item in items {
                let Some(s) = item.as_str() else {
                    violate(ViolationKind::TypeMismatch, format!("non-string list item {item}"));
                    continue;
                };
                let s = normalize(s);
                if s.is_empty() {
                    continue;
                }
                let s = if field.kind == FieldKind::ListOfEnum {
                    match field.resolve_label(&s) {
                        Some(label) => label.to_string(),
                        None => {
                            violate(ViolationKind::OutOfVocabulary, format!("label {s:?}"));
                            continue;
                        }
                    }
                } else {
                    s
                };
                if !out.contains(&s) {
                    out.push(s);
                }
            }
            (!out.is_empty()).then_some(Value::List(out))
        }
    }
}
