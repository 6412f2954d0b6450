//! Provenance-linked markdown reconstruction of one document.

use std::collections::HashMap;
use std::fmt::Write;
use std::sync::OnceLock;

use regex::{Captures, Regex};

use crate::backend::{ImageObject, PageMarkdown};
use crate::consolidate::StudyRecord;
use crate::schema::{FieldKind, SchemaSet, Value};

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"!\[([^\]]*)\]\(([^)\s]*)\)").expect("placeholder pattern"))
}

fn mime_for(b64: &str) -> &'static str {
    if b64.starts_with("/9j/") {
        "image/jpeg"
    } else if b64.starts_with("R0lGOD") {
        "image/gif"
    } else {
        "image/png"
    }
}

fn inline_image(img: &ImageObject) -> String {
    let alt = img.description.replace(['[', ']', '\n'], " ");
    format!(
        "![{alt}](data:{};base64,{})\n\n*{}: {}*",
        mime_for(&img.image_base64),
        img.image_base64,
        img.region_type.as_str(),
        img.description
    )
}

/// Header of bolded key-value pairs for every non-null field (schema
/// declaration order), then every page in order with image placeholders
/// replaced by inline base64 images.
pub fn render_markdown(
    title: &str,
    record: &StudyRecord,
    set: &SchemaSet,
    page_count: u32,
    pages: &[PageMarkdown],
    images: &[ImageObject],
) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# {title}\n");
    let _ = writeln!(md, "- **source_key**: `{}`", record.key);
    let _ = writeln!(md, "- **schema_version**: {}", set.version);
    let _ = writeln!(
        md,
        "- **review_needed**: {}",
        if record.review_needed { "yes" } else { "no" }
    );
    if !record.failed_units.is_empty() {
        let _ = writeln!(md, "- **failed_units**: {}", record.failed_units.join(", "));
    }
    let conflicts = record.conflict_flags_cell();
    if !conflicts.is_empty() {
        let _ = writeln!(md, "- **conflict_flags**: `{conflicts}`");
    }

    for payload in set.payloads() {
        let merged = record.payload(payload.id);
        if !merged.has_any_value() {
            continue;
        }
        let _ = writeln!(md, "\n## {}\n", payload.id);
        for field in &payload.fields {
            let Some(value) = merged.get(&field.name) else {
                continue;
            };
            match (field.kind, &value) {
                (FieldKind::EvidenceText, Value::List(items)) => {
                    let _ = writeln!(md, "- **{}**:", field.name);
                    for s in items {
                        let _ = writeln!(md, "  - > {s}");
                    }
                }
                (_, Value::List(items)) => {
                    let _ = writeln!(md, "- **{}**: {}", field.name, items.join("; "));
                }
                (_, v) => {
                    let _ = writeln!(md, "- **{}**: {v}", field.name);
                }
            }
        }
    }

    let by_page: HashMap<u32, &PageMarkdown> = pages.iter().map(|p| (p.page, p)).collect();
    let _ = writeln!(md, "\n---");
    for page in 0..page_count {
        let _ = writeln!(md, "\n## Page {}\n", page + 1);
        let Some(pm) = by_page.get(&page) else {
            let _ = writeln!(md, "[page {} unavailable]", page + 1);
            continue;
        };
        let page_images: Vec<&ImageObject> = images.iter().filter(|i| i.page == page).collect();
        let mut used = vec![false; page_images.len()];
        let body = placeholder().replace_all(&pm.markdown, |caps: &Captures| {
            match page_images.iter().position(|i| i.id == caps[2] || i.id == caps[1]) {
                Some(k) => {
                    used[k] = true;
                    inline_image(page_images[k])
                }
                None => caps[0].to_string(),
            }
        });
        let _ = writeln!(md, "{}", body.trim_end());
        for (img, _) in page_images.iter().zip(&used).filter(|(_, u)| !**u) {
            let _ = writeln!(md, "\n{}", inline_image(img));
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use base64::Engine;

    use super::*;
    use crate::backend::RegionType;
    use crate::consolidate::{integrate_payloads, MergedPayload};
    use crate::ingest::source_key;
    use crate::schema::PayloadId;

    fn record() -> StudyRecord {
        let mut merged: Vec<MergedPayload> = PayloadId::ALL.iter().map(|&p| MergedPayload::empty(p)).collect();
        merged[0].values.insert("publication_year".into(), Value::Integer(2020));
        merged[1].values.insert(
            "doac_molecules".into(),
            Value::List(vec!["Apixaban".into(), "Dabigatran".into()]),
        );
        merged[1]
            .evidence
            .insert("anticoagulation_indications_evidence".into(), vec!["Patients had AF.".into()]);
        integrate_payloads(merged, source_key("a.pdf"), vec![]).unwrap()
    }

    #[test]
    fn header_and_images() {
        let set = SchemaSet::bundled_doac();
        let img = ImageObject {
            id: "img-0-0.png".into(),
            page: 0,
            bbox: [0, 0, 10, 10],
            image_base64: "iVBORw0KGgo=".into(),
            description: "bar chart of levels".into(),
            region_type: RegionType::Graph,
        };
        let pages = vec![PageMarkdown {
            page: 0,
            markdown: "Intro.\n\n![img-0-0.png](img-0-0.png)\n\nFigure 1. Levels.".into(),
        }];
        let md = render_markdown("a.pdf", &record(), &set, 2, &pages, &[img.clone()]);
        assert!(md.contains("- **publication_year**: 2020"));
        assert!(md.contains("- **doac_molecules**: Apixaban; Dabigatran"));
        assert!(md.contains("  - > Patients had AF."));
        assert_eq!(md.matches("**publication_year**").count(), 1);
        assert!(md.contains("[page 2 unavailable]"));
        assert!(!md.contains("](img-0-0.png)"));
        let b64 = md.split("base64,").nth(1).unwrap().split(')').next().unwrap();
        assert!(base64::engine::general_purpose::STANDARD.decode(b64).is_ok());
        assert!(md.contains("*graph: bar chart of levels*"));
        assert_eq!(md, render_markdown("a.pdf", &record(), &set, 2, &pages, &[img]));
    }
}
