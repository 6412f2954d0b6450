use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Map, Value as Json};

use super::{
    AnnotationBackend, AnnotationRequest, ImageObject, PageMarkdown, RegionType,
    TransportError, UnitAnnotation,
};
use crate::error::{Error, Result};

pub const API_URL_ENV: &str = "EXTRACTOR_API_URL";
pub const API_KEY_ENV: &str = "EXTRACTOR_API_KEY";

const DEFAULT_MODEL: &str = "mistral-ocr-latest";
const MAX_ERROR_BODY: usize = 512;

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: DEFAULT_MODEL.to_string(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Base URL and key from the environment; both are required.
    pub fn from_env() -> Result<Self> {
        let get = |name: &str| {
            std::env::var(name)
                .ok()
                .filter(|v| !v.trim().is_empty())
                .ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))
        };
        Ok(Self::new(get(API_URL_ENV)?, get(API_KEY_ENV)?))
    }
}

/// Adapter for a document-annotation OCR endpoint (`POST {base}/v1/ocr`).
///
/// The request carries the payload's JSON schema as the document annotation
/// format and, when images are requested, a region schema for each detected
/// image. Only the validated post-image of a response leaves this adapter.
pub struct HttpBackend {
    client: reqwest::Client,
    config: HttpConfig,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend { client, config })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/ocr", self.config.base_url.trim_end_matches('/'))
    }
}

fn region_schema() -> Json {
    json!({
        "type": "json_schema",
        "json_schema": {
            "name": "image_region",
            "strict": true,
            "schema": {
                "type": "object",
                "properties": {
                    "description": {"type": "string"},
                    "region_type": {"type": "string", "enum": ["graph", "table", "text_only", "other"]}
                },
                "required": ["description", "region_type"],
                "additionalProperties": false
            }
        }
    })
}

pub(crate) fn request_body(request: &AnnotationRequest, model: &str) -> Json {
    let document = match &request.caption_text {
        Some(text) => json!({"type": "text", "text": text}),
        None => json!({"type": "document_url", "document_url": &*request.data_url}),
    };
    let mut body = json!({
        "model": model,
        "document": document,
        "include_image_base64": request.include_images,
        "document_annotation_format": {
            "type": "json_schema",
            "json_schema": {
                "name": request.payload.id.as_str(),
                "strict": true,
                "schema": request.payload.json_schema(),
            }
        },
    });
    if let Some(range) = request.pages {
        body["pages"] = Json::from(range.pages().collect::<Vec<_>>());
    }
    if request.include_images {
        body["bbox_annotation_format"] = region_schema();
    }
    body
}

#[derive(Debug, Deserialize)]
struct OcrResponse {
    #[serde(default)]
    pages: Vec<OcrPage>,
    #[serde(default)]
    document_annotation: Option<Json>,
    #[serde(default)]
    error: Option<Json>,
}

#[derive(Debug, Deserialize)]
struct OcrPage {
    index: u32,
    #[serde(default)]
    markdown: String,
    #[serde(default)]
    images: Vec<OcrImage>,
}

#[derive(Debug, Deserialize)]
struct OcrImage {
    id: String,
    #[serde(default)]
    top_left_x: i64,
    #[serde(default)]
    top_left_y: i64,
    #[serde(default)]
    bottom_right_x: i64,
    #[serde(default)]
    bottom_right_y: i64,
    #[serde(default)]
    image_base64: Option<String>,
    #[serde(default)]
    image_annotation: Option<Json>,
}

/// JSON that may arrive either inline or as a string holding JSON.
fn embedded_object(value: Option<Json>) -> std::result::Result<Map<String, Json>, String> {
    match value {
        None | Some(Json::Null) => Ok(Map::new()),
        Some(Json::Object(m)) => Ok(m),
        Some(Json::String(s)) => match serde_json::from_str::<Json>(&s) {
            Ok(Json::Object(m)) => Ok(m),
            Ok(other) => Err(format!("annotation is not an object: {other}")),
            Err(e) => Err(format!("annotation is not valid JSON: {e}")),
        },
        Some(other) => Err(format!("annotation is not an object: {other}")),
    }
}

fn error_message(error: &Json) -> String {
    match error {
        Json::String(s) => s.clone(),
        Json::Object(m) => m
            .get("message")
            .and_then(Json::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| error.to_string()),
        other => other.to_string(),
    }
}

fn strip_data_prefix(b64: &str) -> &str {
    match b64.find(";base64,") {
        Some(i) if b64.starts_with("data:") => &b64[i + ";base64,".len()..],
        _ => b64,
    }
}

pub(crate) fn parse_response(
    request: &AnnotationRequest,
    body: &str,
) -> std::result::Result<UnitAnnotation, TransportError> {
    let response: OcrResponse = serde_json::from_str(body)
        .map_err(|e| TransportError::new(200, format!("malformed response: {e}")))?;
    if let Some(error) = &response.error {
        return Err(TransportError::new(200, error_message(error)));
    }
    let raw = embedded_object(response.document_annotation)
        .map_err(|e| TransportError::new(200, e))?;

    let mut pages = Vec::new();
    let mut images = Vec::new();
    for page in response.pages {
        for img in page.images {
            let b64 = img
                .image_base64
                .as_deref()
                .map(strip_data_prefix)
                .unwrap_or_default()
                .to_string();
            if !b64.is_empty() && base64::engine::general_purpose::STANDARD.decode(&b64).is_err() {
                return Err(TransportError::new(200, format!("image {} is not base64", img.id)));
            }
            let meta = embedded_object(img.image_annotation).unwrap_or_default();
            images.push(ImageObject {
                id: img.id,
                page: page.index,
                bbox: [img.top_left_x, img.top_left_y, img.bottom_right_x, img.bottom_right_y],
                image_base64: b64,
                description: meta
                    .get("description")
                    .and_then(Json::as_str)
                    .unwrap_or_default()
                    .to_string(),
                region_type: meta
                    .get("region_type")
                    .and_then(Json::as_str)
                    .map(RegionType::from_label)
                    .unwrap_or(RegionType::Other),
            });
        }
        pages.push(PageMarkdown {
            page: page.index,
            markdown: page.markdown,
        });
    }
    pages.sort_by_key(|p| p.page);
    Ok(UnitAnnotation::from_raw(request, &raw, pages, images))
}

#[async_trait]
impl AnnotationBackend for HttpBackend {
    async fn annotate(&self, request: &AnnotationRequest) -> Result<UnitAnnotation, TransportError> {
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&request_body(request, &self.config.model))
            .send()
            .await
            .map_err(|e| TransportError::new(e.status().map_or(0, |s| s.as_u16()), e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| TransportError::new(status.as_u16(), e.to_string()))?;
        if !status.is_success() {
            let mut msg = body;
            if msg.len() > MAX_ERROR_BODY {
                let cut = (0..=MAX_ERROR_BODY).rev().find(|&i| msg.is_char_boundary(i)).unwrap_or(0);
                msg.truncate(cut);
            }
            return Err(TransportError::new(status.as_u16(), msg));
        }
        parse_response(request, &body)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::is_retryable;
    use crate::chunking::PageRange;
    use crate::schema::{PayloadId, SchemaSet, Value};

    fn request(include_images: bool) -> AnnotationRequest {
        let set = SchemaSet::bundled_doac();
        AnnotationRequest {
            parent: crate::ingest::source_key("a.pdf"),
            unit_id: "k:p0-2".into(),
            data_url: Arc::from("data:application/pdf;base64,JVBERi0xLjQ="),
            pages: Some(PageRange { start: 0, end: 2 }),
            caption_text: None,
            payload: set.payload(PayloadId::PopulationIndications).clone(),
            include_images,
        }
    }

    #[test]
    fn body_carries_schema_and_pages() {
        let body = request_body(&request(true), "m");
        assert_eq!(body["pages"], json!([0, 1]));
        assert_eq!(body["document"]["type"], "document_url");
        assert_eq!(
            body["document_annotation_format"]["json_schema"]["name"],
            "population_indications"
        );
        assert!(body["bbox_annotation_format"].is_object());
        assert!(request_body(&request(false), "m").get("bbox_annotation_format").is_none());
    }

    #[test]
    fn response_is_validated() {
        let body = json!({
            "pages": [
                {"index": 1, "markdown": "second", "images": []},
                {"index": 0, "markdown": "first ![img-0.png](img-0.png)", "images": [{
                    "id": "img-0.png", "top_left_x": 1, "top_left_y": 2,
                    "bottom_right_x": 3, "bottom_right_y": 4,
                    "image_base64": "data:image/png;base64,AAAA",
                    "image_annotation": "{\"description\": \"bar chart\", \"region_type\": \"graph\"}"
                }]}
            ],
            "document_annotation": "{\"doac_molecules\": [\"Apixaban\", \"Warfarin\"], \"total_patients_with_levels\": 120}"
        });
        let a = parse_response(&request(true), &body.to_string()).unwrap();
        assert_eq!(a.values["doac_molecules"], Value::List(vec!["Apixaban".into()]));
        assert_eq!(a.values["total_patients_with_levels"], Value::Integer(120));
        assert_eq!(a.validation.violations, 1);
        assert_eq!(a.page_markdowns[0].markdown, "first ![img-0.png](img-0.png)");
        assert_eq!(a.images[0].image_base64, "AAAA");
        assert_eq!(a.images[0].region_type, RegionType::Graph);
        assert_eq!(a.images[0].bbox, [1, 2, 3, 4]);
    }

    #[test]
    fn error_body_with_success_status() {
        let e = parse_response(&request(false), r#"{"error": {"message": "Quota exceeded"}}"#)
            .unwrap_err();
        assert_eq!(e.status, 200);
        assert!(is_retryable(&e));
    }
}
