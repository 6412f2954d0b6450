//! Page chunk planning and caption isolation.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SourceKey;
use crate::text;

pub const DEFAULT_MAX_PAGES: u32 = 8;

/// Half-open range of 0-based page indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PageRange {
    pub start: u32,
    pub end: u32,
}

impl PageRange {
    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn pages(&self) -> std::ops::Range<u32> {
        self.start..self.end
    }
}

impl fmt::Display for PageRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// `ceil(n/k)` disjoint ranges covering `[0, n)`; only the last may be shorter than `k`.
pub fn plan_page_chunks(n: u32, k: u32) -> Result<Vec<PageRange>> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "page count and chunk size must be positive (n={n}, k={k})"
        )));
    }
    Ok((0..n.div_ceil(k))
        .map(|i| PageRange {
            start: i * k,
            end: ((i + 1) * k).min(n),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitKind {
    PageChunk { pages: PageRange },
    CaptionUnit { text: String, page: u32, ordinal: u32 },
}

/// An independently annotatable piece of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentUnit {
    pub parent: SourceKey,
    pub unit_id: String,
    #[serde(flatten)]
    pub kind: UnitKind,
}

/// Reading order: page chunks by start page, then captions by (page, ordinal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitOrder {
    Chunk(u32),
    Caption(u32, u32),
}

impl DocumentUnit {
    pub fn page_chunk(parent: &SourceKey, pages: PageRange) -> Self {
        DocumentUnit {
            unit_id: format!("{parent}:p{}-{}", pages.start, pages.end),
            parent: parent.clone(),
            kind: UnitKind::PageChunk { pages },
        }
    }

    pub fn caption(parent: &SourceKey, text: String, page: u32, ordinal: u32) -> Self {
        DocumentUnit {
            unit_id: format!("{parent}:c{page}.{ordinal}"),
            parent: parent.clone(),
            kind: UnitKind::CaptionUnit {
                text,
                page,
                ordinal,
            },
        }
    }

    pub fn pages(&self) -> Option<PageRange> {
        match &self.kind {
            UnitKind::PageChunk { pages } => Some(*pages),
            UnitKind::CaptionUnit { .. } => None,
        }
    }

    pub fn caption_text(&self) -> Option<&str> {
        match &self.kind {
            UnitKind::CaptionUnit { text, .. } => Some(text),
            UnitKind::PageChunk { .. } => None,
        }
    }

    pub fn order(&self) -> UnitOrder {
        match &self.kind {
            UnitKind::PageChunk { pages } => UnitOrder::Chunk(pages.start),
            UnitKind::CaptionUnit { page, ordinal, .. } => UnitOrder::Caption(*page, *ordinal),
        }
    }
}

/// Page-chunk units for an `n`-page document.
pub fn build_chunk_units(parent: &SourceKey, n: u32, k: u32) -> Result<Vec<DocumentUnit>> {
    Ok(plan_page_chunks(n, k)?
        .into_iter()
        .map(|r| DocumentUnit::page_chunk(parent, r))
        .collect())
}

fn caption_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^(?:supplementary\s+(?:figure|table)|figure|fig\.|table)\s*(?:[a-z]{0,2}\d+[a-z]?|[a-z])\s*[.:|]",
        )
        .expect("caption grammar")
    })
}

/// True when a paragraph opens like a figure or table caption.
pub fn is_caption(paragraph: &str) -> bool {
    caption_grammar().is_match(paragraph.trim_start())
}

/// Harvest caption units from page text, in (page, position) order.
///
/// Each caption extends to the end of its paragraph; pages are handled
/// independently so a caption never spans a page break.
pub fn extract_caption_units(
    page_markdowns: &[(u32, String)],
    parent: &SourceKey,
) -> Vec<DocumentUnit> {
    let mut pages: Vec<&(u32, String)> = page_markdowns.iter().collect();
    pages.sort_by_key(|(p, _)| *p);
    let mut units = Vec::new();
    for (page, markdown) in pages {
        let mut ordinal = 0;
        for para in text::paragraphs(markdown) {
            if is_caption(&para) {
                units.push(DocumentUnit::caption(parent, para, *page, ordinal));
                ordinal += 1;
            }
        }
    }
    units
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::source_key;

    fn r(start: u32, end: u32) -> PageRange {
        PageRange { start, end }
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(plan_page_chunks(8, 8).unwrap(), vec![r(0, 8)]);
        assert_eq!(plan_page_chunks(20, 8).unwrap(), vec![r(0, 8), r(8, 16), r(16, 20)]);
        assert_eq!(plan_page_chunks(1, 8).unwrap(), vec![r(0, 1)]);
        assert!(plan_page_chunks(0, 8).is_err());
        assert!(plan_page_chunks(5, 0).is_err());
    }

    #[test]
    fn unit_ids() {
        let key = source_key("a.pdf");
        let units = build_chunk_units(&key, 20, 8).unwrap();
        assert_eq!(units[2].unit_id, format!("{key}:p16-20"));
        let cap = DocumentUnit::caption(&key, "Figure 1. X".into(), 3, 0);
        assert_eq!(cap.unit_id, format!("{key}:c3.0"));
        assert!(UnitOrder::Chunk(16) < UnitOrder::Caption(0, 0));
    }

    #[test]
    fn caption_grammar_cases() {
        for yes in [
            "Figure 2. Study flow diagram",
            "Table 1: Baseline characteristics",
            "Figure 3 | Kaplan-Meier curves",
            "Fig. 4. Anti-Xa levels",
            "fig. 4: lower case",
            "Supplementary Table S2. Assays",
            "TABLE 3. Outcomes",
            "Figure A. Appendix",
        ] {
            assert!(is_caption(yes), "{yes}");
        }
        for no in [
            "Table of contents: none",
            "Figures were prepared in R.",
            "The table shows. Nothing",
            "As shown in Figure 2. we",
            "Figure shows data.",
        ] {
            assert!(!is_caption(no), "{no}");
        }
    }

    #[test]
    fn captions_in_page_order() {
        let key = source_key("doc.pdf");
        let pages = vec![
            (1, "Body text.\n\nFigure 3 | Kaplan\u{2013}Meier curve for\nmajor bleeding.\n".to_string()),
            (
                0,
                "Intro.\n\nTable 1: Baseline characteristics\n\nMore text.\n\nFigure 2. Study flow diagram"
                    .to_string(),
            ),
        ];
        let units = extract_caption_units(&pages, &key);
        let got: Vec<(&str, &str)> = units
            .iter()
            .map(|u| (u.unit_id.rsplit(':').next().unwrap(), u.caption_text().unwrap()))
            .collect();
        assert_eq!(
            got,
            vec![
                ("c0.0", "Table 1: Baseline characteristics"),
                ("c0.1", "Figure 2. Study flow diagram"),
                ("c1.0", "Figure 3 | Kaplan\u{2013}Meier curve for major bleeding."),
            ]
        );
        assert!(extract_caption_units(&[(0, "no captions".into())], &key).is_empty());
    }
}
