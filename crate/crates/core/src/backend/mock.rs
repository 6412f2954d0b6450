use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use sha1::{Digest, Sha1};

use super::{
    AnnotationBackend, AnnotationRequest, ImageObject, PageMarkdown, RegionType,
    TransportError, UnitAnnotation,
};
use crate::chunking::is_caption;
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::ingest::decode_data_url;
use crate::schema::{FieldKind, PayloadId, PayloadSchema, SchemaSet};
use crate::text;

pub const DEFAULT_KEYWORDS: &str = include_str!("../../mock/keywords.tsv");

// 1x1 transparent PNG.
const PLACEHOLDER_PNG: &str =
    "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mNkYPhfDwAChwGA60e6kgAAAABJRU5ErkJggg==";

#[derive(Debug, Clone)]
pub struct KeywordRule {
    pub pattern: Regex,
    pub payload: PayloadId,
    pub field: String,
    pub value: String,
    pub evidence: Option<String>,
}

/// Trigger phrases mapped to schema field values.
#[derive(Debug, Clone, Default)]
pub struct KeywordTable {
    rules: Vec<KeywordRule>,
}

impl KeywordTable {
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_KEYWORDS).expect("bundled keyword table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Tab-separated `pattern, payload, field, value[, evidence]`; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(4..=5).contains(&cols.len()) {
                return Err(Error::Config(format!(
                    "keyword table line {}: expected 4 or 5 tab-separated columns",
                    n + 1
                )));
            }
            let pattern = Regex::new(cols[0])
                .map_err(|e| Error::Config(format!("keyword table line {}: {e}", n + 1)))?;
            rules.push(KeywordRule {
                pattern,
                payload: cols[1].parse()?,
                field: cols[2].to_string(),
                value: cols[3].to_string(),
                evidence: cols.get(4).filter(|s| !s.is_empty()).map(|s| s.to_string()),
            });
        }
        Ok(KeywordTable { rules })
    }

    pub fn rules(&self) -> &[KeywordRule] {
        &self.rules
    }

    /// Every rule must target an existing field of its payload.
    pub fn check_against(&self, schema: &SchemaSet) -> Result<()> {
        for r in &self.rules {
            if schema.payload(r.payload).field(&r.field).is_none() {
                return Err(Error::Config(format!(
                    "keyword rule {:?} targets unknown field {}.{}",
                    r.pattern.as_str(),
                    r.payload,
                    r.field
                )));
            }
        }
        Ok(())
    }

    /// Raw annotation for `payload` from the given paragraphs. Scalars keep
    /// their first match; lists accumulate distinct values; the matching
    /// sentence is quoted into the target field's evidence partner.
    pub fn extract<'a>(
        &self,
        payload: &PayloadSchema,
        paragraphs: impl IntoIterator<Item = &'a str>,
    ) -> Map<String, Json> {
        let mut raw = Map::new();
        let rules: Vec<&KeywordRule> = self.rules.iter().filter(|r| r.payload == payload.id).collect();
        if rules.is_empty() {
            return raw;
        }
        for para in paragraphs {
            for sentence in text::sentences(para) {
                for rule in &rules {
                    let Some(caps) = rule.pattern.captures(&sentence) else {
                        continue;
                    };
                    let Some(field) = payload.field(&rule.field) else {
                        continue;
                    };
                    let mut value = String::new();
                    caps.expand(&rule.value, &mut value);
                    put(&mut raw, &field.name, field.kind, &value);
                    if let Some(partner) = &field.evidence_partner {
                        let quote = rule.evidence.clone().unwrap_or_else(|| sentence.clone());
                        put(&mut raw, partner, FieldKind::EvidenceText, &quote);
                    }
                }
            }
        }
        raw
    }
}

fn put(raw: &mut Map<String, Json>, name: &str, kind: FieldKind, value: &str) {
    if kind.is_list() {
        let entry = raw.entry(name.to_string()).or_insert_with(|| Json::Array(Vec::new()));
        if let Json::Array(items) = entry {
            if !items.iter().any(|i| i.as_str() == Some(value)) {
                items.push(Json::from(value));
            }
        }
        return;
    }
    if raw.contains_key(name) {
        return;
    }
    let json = match kind {
        FieldKind::Integer => value.parse::<i64>().map(Json::from).unwrap_or_else(|_| Json::from(value)),
        FieldKind::Real => value
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Json::Number)
            .unwrap_or_else(|| Json::from(value)),
        _ => Json::from(value),
    };
    raw.insert(name.to_string(), json);
}

/// Scripted transport failures keyed by (unit, payload, 1-based attempt).
#[derive(Debug, Clone, Default)]
pub struct FaultSchedule {
    faults: HashMap<(String, PayloadId, u32), u16>,
}

impl FaultSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lines of `<unit_id> <payload_id> <attempt_no> <status_code>`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schedule = FaultSchedule::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("fault schedule line {}: {line:?}", n + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            let attempt: u32 = cols[2].parse().map_err(|_| bad())?;
            let status: u16 = cols[3].parse().map_err(|_| bad())?;
            if attempt == 0 {
                return Err(bad());
            }
            schedule.insert(cols[0], cols[1].parse()?, attempt, status);
        }
        Ok(schedule)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, unit_id: &str, payload: PayloadId, attempt: u32, status: u16) {
        self.faults.insert((unit_id.to_string(), payload, attempt), status);
    }

    pub fn lookup(&self, unit_id: &str, payload: PayloadId, attempt: u32) -> Option<u16> {
        self.faults.get(&(unit_id.to_string(), payload, attempt)).copied()
    }

    pub fn len(&self) -> usize {
        self.faults.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self
            .faults
            .iter()
            .map(|((u, p, a), s)| format!("{u} {p} {a} {s}"))
            .collect();
        lines.sort();
        lines.join("\n") + "\n"
    }
}

fn fault_message(status: u16) -> &'static str {
    match status {
        429 => "rate limit exceeded",
        500..=599 => "service temporarily unavailable",
        400 => "bad request",
        401 | 403 => "unauthorized",
        _ => "request failed",
    }
}

/// Per-call service latency.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LatencyModel {
    #[default]
    Zero,
    Fixed { seconds: f64 },
    LogNormal { median_seconds: f64, sigma: f64 },
}

impl LatencyModel {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Duration {
        match *self {
            LatencyModel::Zero => Duration::ZERO,
            LatencyModel::Fixed { seconds } => Duration::from_secs_f64(seconds.max(0.0)),
            LatencyModel::LogNormal {
                median_seconds,
                sigma,
            } => match LogNormal::new(median_seconds.max(1e-9).ln(), sigma.max(0.0)) {
                Ok(d) => Duration::from_secs_f64(d.sample(rng)),
                Err(_) => Duration::from_secs_f64(median_seconds.max(0.0)),
            },
        }
    }
}

fn seeded_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha1::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes[..20].copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Deterministic stand-in for a schema-aware OCR service.
///
/// Page text is read from the PDF's content streams; field values come from a
/// keyword table; failures come from a fault schedule keyed by attempt number.
/// Output depends only on the seed and the request.
pub struct MockBackend {
    seed: u64,
    keywords: KeywordTable,
    faults: FaultSchedule,
    latency: LatencyModel,
    clock: Arc<dyn Clock>,
    attempts: Mutex<HashMap<(String, PayloadId), u32>>,
}

impl MockBackend {
    pub fn new(seed: u64, clock: Arc<dyn Clock>) -> Self {
        MockBackend {
            seed,
            keywords: KeywordTable::bundled(),
            faults: FaultSchedule::new(),
            latency: LatencyModel::Zero,
            clock,
            attempts: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_keywords(mut self, keywords: KeywordTable) -> Self {
        self.keywords = keywords;
        self
    }

    pub fn with_faults(mut self, faults: FaultSchedule) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    fn next_attempt(&self, request: &AnnotationRequest) -> u32 {
        let mut map = self.attempts.lock().expect("attempt counter poisoned");
        let n = map
            .entry((request.unit_id.clone(), request.payload.id))
            .or_insert(0);
        *n += 1;
        *n
    }

    fn transcribe(&self, request: &AnnotationRequest) -> Result<(Vec<PageMarkdown>, Vec<ImageObject>)> {
        let Some(range) = request.pages else {
            return Ok((Vec::new(), Vec::new()));
        };
        let bytes = decode_data_url(&request.data_url)?;
        let texts = crate::pdf::page_texts(&bytes)?;
        let mut pages = Vec::new();
        let mut images = Vec::new();
        for page in range.pages() {
            let Some(raw) = texts.get(page as usize) else {
                continue;
            };
            let mut blocks = Vec::new();
            for para in text::paragraphs(raw) {
                if request.include_images && is_caption(&para) {
                    let image = self.image_for(request, page, images.len(), &para);
                    blocks.push(format!("![{0}]({0})", image.id));
                    images.push(image);
                }
                blocks.push(para);
            }
            pages.push(PageMarkdown {
                page,
                markdown: blocks.join("\n\n"),
            });
        }
        Ok((pages, images))
    }

    fn image_for(&self, request: &AnnotationRequest, page: u32, ordinal: usize, caption: &str) -> ImageObject {
        let mut rng = seeded_rng(
            self.seed,
            &[&request.unit_id, "image", &page.to_string(), &ordinal.to_string()],
        );
        let x0 = rng.gen_range(0..300);
        let y0 = rng.gen_range(0..500);
        let region_type = if caption.to_lowercase().contains("table") {
            RegionType::Table
        } else {
            RegionType::Graph
        };
        let label = text::sentences(caption).into_iter().next().unwrap_or_default();
        ImageObject {
            id: format!("img-{page}-{ordinal}.png"),
            page,
            bbox: [x0, y0, x0 + rng.gen_range(100..300), y0 + rng.gen_range(80..250)],
            image_base64: PLACEHOLDER_PNG.to_string(),
            description: format!("{} region for {label}", region_type.as_str()),
            region_type,
        }
    }
}

#[async_trait]
impl AnnotationBackend for MockBackend {
    async fn annotate(&self, request: &AnnotationRequest) -> Result<UnitAnnotation, TransportError> {
        let attempt = self.next_attempt(request);
        let mut rng = seeded_rng(
            self.seed,
            &[&request.unit_id, request.payload.id.as_str(), &attempt.to_string()],
        );
        let latency = self.latency.sample(&mut rng);
        if !latency.is_zero() {
            self.clock.sleep(latency).await;
        }
        if let Some(status) = self.faults.lookup(&request.unit_id, request.payload.id, attempt) {
            return Err(TransportError::new(status, fault_message(status)));
        }

        let (pages, images) = self
            .transcribe(request)
            .map_err(|e| TransportError::new(400, format!("unreadable document: {e}")))?;
        let paragraphs: Vec<String> = match &request.caption_text {
            Some(caption) => vec![text::collapse_whitespace(caption)],
            None => pages.iter().flat_map(|p| text::paragraphs(&p.markdown)).collect(),
        };
        let raw = self
            .keywords
            .extract(&request.payload, paragraphs.iter().map(String::as_str));
        Ok(UnitAnnotation::from_raw(request, &raw, pages, images))
    }
}
