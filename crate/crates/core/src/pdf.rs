//! Minimal PDF reading helpers built on lopdf.

use lopdf::content::Content;
use lopdf::{Document, Object};

use crate::error::{Error, Result};

const MAX_PAGE_CONTENT: usize = 64 << 20;

fn decode_string(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

/// Text of every page in page order: each text-showing operator becomes one
/// line. This is a rough transcription, adequate for born-digital test
/// documents; layout-aware OCR is the backend's job.
pub fn page_texts(pdf_bytes: &[u8]) -> Result<Vec<String>> {
    let doc = Document::load_mem(pdf_bytes)
        .map_err(|e| Error::Excluded(format!("unparseable pdf: {e}")))?;
    let mut out = Vec::new();
    for (_, page_id) in doc.get_pages() {
        let content = doc
            .get_page_content_with_limit(page_id, MAX_PAGE_CONTENT)
            .map_err(|e| Error::Excluded(format!("unreadable page content: {e}")))?;
        let ops = Content::decode(&content)
            .map_err(|e| Error::Excluded(format!("bad content stream: {e}")))?;
        let mut lines = Vec::new();
        for op in ops.operations {
            match op.operator.as_str() {
                "Tj" | "'" | "\"" => {
                    if let Some(Object::String(bytes, _)) = op.operands.last() {
                        lines.push(decode_string(bytes));
                    }
                }
                "TJ" => {
                    if let Some(Object::Array(parts)) = op.operands.first() {
                        let mut line = String::new();
                        for p in parts {
                            if let Object::String(bytes, _) = p {
                                line.push_str(&decode_string(bytes));
                            }
                        }
                        lines.push(line);
                    }
                }
                _ => {}
            }
        }
        out.push(lines.join("\n"));
    }
    Ok(out)
}
