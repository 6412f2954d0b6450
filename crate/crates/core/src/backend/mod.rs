//! Annotation backends: the uniform request/response contract, transport error
//! classification, a deterministic mock and an HTTP adapter.

mod http;
mod mock;

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::chunking::{DocumentUnit, PageRange, UnitKind};
use crate::ingest::SourceKey;
use crate::schema::{validate_annotation, FieldValues, PayloadId, PayloadSchema};

pub use http::{HttpBackend, HttpConfig, API_KEY_ENV, API_URL_ENV};
pub use mock::{
    FaultSchedule, KeywordRule, KeywordTable, LatencyModel, MockBackend, DEFAULT_KEYWORDS,
};

/// One schema-aware annotation call for a single unit under a single payload.
#[derive(Debug, Clone)]
pub struct AnnotationRequest {
    pub parent: SourceKey,
    pub unit_id: String,
    pub data_url: Arc<str>,
    pub pages: Option<PageRange>,
    pub caption_text: Option<String>,
    pub payload: Arc<PayloadSchema>,
    pub include_images: bool,
}

impl AnnotationRequest {
    /// Page chunks are sent as page ranges, captions as standalone text.
    pub fn for_unit(
        unit: &DocumentUnit,
        data_url: Arc<str>,
        payload: Arc<PayloadSchema>,
        include_images: bool,
    ) -> Self {
        let (pages, caption_text) = match &unit.kind {
            UnitKind::PageChunk { pages } => (Some(*pages), None),
            UnitKind::CaptionUnit { text, .. } => (None, Some(text.clone())),
        };
        AnnotationRequest {
            parent: unit.parent.clone(),
            unit_id: unit.unit_id.clone(),
            data_url,
            pages,
            caption_text,
            payload,
            include_images,
        }
    }

    pub fn payload_id(&self) -> PayloadId {
        self.payload.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionType {
    Graph,
    Table,
    TextOnly,
    Other,
}

impl RegionType {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionType::Graph => "graph",
            RegionType::Table => "table",
            RegionType::TextOnly => "text_only",
            RegionType::Other => "other",
        }
    }

    /// Lenient mapping of provider labels; unknown labels become `Other`.
    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "graph" | "chart" | "plot" | "figure" => RegionType::Graph,
            "table" => RegionType::Table,
            "text_only" | "text" | "text_only_image" => RegionType::TextOnly,
            _ => RegionType::Other,
        }
    }
}

/// A detected image region on a page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageObject {
    /// Placeholder name used in the page markdown, e.g. `img-0.png`.
    pub id: String,
    pub page: u32,
    pub bbox: [i64; 4],
    pub image_base64: String,
    pub description: String,
    pub region_type: RegionType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageMarkdown {
    pub page: u32,
    pub markdown: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    Ok,
    Failed,
}

/// Counts from the validation gate, kept for the type-conformance indicator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub present: usize,
    pub conforming: usize,
    pub violations: usize,
    pub unknown_keys: usize,
}

/// One backend result for a (unit, payload) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAnnotation {
    pub parent: SourceKey,
    pub unit_id: String,
    pub payload_id: PayloadId,
    pub values: FieldValues,
    pub page_markdowns: Vec<PageMarkdown>,
    pub images: Vec<ImageObject>,
    pub status: AnnotationStatus,
    pub error: Option<String>,
    pub attempts: u32,
    pub validation: ValidationSummary,
}

impl UnitAnnotation {
    /// Validate a raw backend response against the request's payload. Every
    /// successful annotation passes through here before leaving this module.
    pub fn from_raw(
        request: &AnnotationRequest,
        raw: &Map<String, Json>,
        page_markdowns: Vec<PageMarkdown>,
        images: Vec<ImageObject>,
    ) -> Self {
        let validated = validate_annotation(&request.payload, raw);
        UnitAnnotation {
            parent: request.parent.clone(),
            unit_id: request.unit_id.clone(),
            payload_id: request.payload.id,
            validation: ValidationSummary {
                present: validated.present,
                conforming: validated.conforming,
                violations: validated.violations.len(),
                unknown_keys: validated.unknown_keys.len(),
            },
            values: validated.values,
            page_markdowns,
            images,
            status: AnnotationStatus::Ok,
            error: None,
            attempts: 1,
        }
    }

    pub fn failed(request: &AnnotationRequest, error: impl Into<String>, attempts: u32) -> Self {
        UnitAnnotation {
            parent: request.parent.clone(),
            unit_id: request.unit_id.clone(),
            payload_id: request.payload.id,
            values: FieldValues::new(),
            page_markdowns: Vec::new(),
            images: Vec::new(),
            status: AnnotationStatus::Failed,
            error: Some(error.into()),
            attempts,
            validation: ValidationSummary::default(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == AnnotationStatus::Ok
    }
}

/// Error reported by a backend call. `status` is the HTTP status, or 0 when
/// no response was received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportError {
    pub status: u16,
    pub message: String,
}

impl TransportError {
    pub fn new(status: u16, message: impl Into<String>) -> Self {
        TransportError {
            status,
            message: message.into(),
        }
    }
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "status {}: {}", self.status, self.message)
    }
}

impl std::error::Error for TransportError {}

/// Transient failures: throttling (429), gateway/server errors, and any
/// message mentioning a rate limit or quota.
pub fn is_retryable(err: &TransportError) -> bool {
    if matches!(err.status, 429 | 500 | 502 | 503 | 504) {
        return true;
    }
    let msg = err.message.to_lowercase();
    msg.contains("rate limit") || msg.contains("quota")
}

#[async_trait]
pub trait AnnotationBackend: Send + Sync {
    /// A single attempt. Implementations never retry internally.
    async fn annotate(&self, request: &AnnotationRequest) -> Result<UnitAnnotation, TransportError>;
}

#[async_trait]
impl<B: AnnotationBackend + ?Sized> AnnotationBackend for Arc<B> {
    async fn annotate(&self, request: &AnnotationRequest) -> Result<UnitAnnotation, TransportError> {
        (**self).annotate(request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_classification() {
        assert!(is_retryable(&TransportError::new(429, "Too Many Requests")));
        assert!(!is_retryable(&TransportError::new(400, "bad schema")));
        assert!(is_retryable(&TransportError::new(200, "Quota exceeded")));
        assert!(is_retryable(&TransportError::new(0, "upstream RATE LIMIT hit")));
        for s in [500, 502, 503, 504] {
            assert!(is_retryable(&TransportError::new(s, "")));
        }
        assert!(!is_retryable(&TransportError::new(501, "not implemented")));
        assert!(!is_retryable(&TransportError::new(401, "unauthorized")));
    }

    #[test]
    fn region_labels() {
        assert_eq!(RegionType::from_label("Text-only"), RegionType::TextOnly);
        assert_eq!(RegionType::from_label("table"), RegionType::Table);
        assert_eq!(RegionType::from_label("photo"), RegionType::Other);
    }
}
