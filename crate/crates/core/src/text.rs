//! Small text utilities shared by validation, caption harvesting and the mock backend.

use unicode_normalization::UnicodeNormalization;

/// Trim and NFC-normalize. This is the equality basis for text scalars and
/// vocabulary labels.
pub fn normalize(s: &str) -> String {
    s.trim().nfc().collect()
}

/// Collapse every run of whitespace to one space and strip both ends.
pub fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Split page text into paragraphs (blank-line separated), whitespace collapsed.
pub fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(collapse_whitespace(&current));
                current.clear();
            }
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.is_empty() {
        out.push(collapse_whitespace(&current));
    }
    out
}

const ABBREVIATIONS: &[&str] = &["fig", "figs", "e.g", "i.e", "al", "vs", "dr", "approx", "no"];

/// Sentence segmentation over one paragraph.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace and an uppercase
/// letter, unless the terminating word is a known abbreviation.
pub fn sentences(paragraph: &str) -> Vec<String> {
    let text = collapse_whitespace(paragraph);
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let next = chars.get(i + 1).map(|&(_, c)| c);
        let after = chars.get(i + 2).map(|&(_, c)| c);
        if next != Some(' ') || !after.is_some_and(char::is_uppercase) {
            continue;
        }
        let word = text[start..pos]
            .rsplit(' ')
            .next()
            .unwrap_or("")
            .to_lowercase();
        if c == '.' && ABBREVIATIONS.contains(&word.as_str()) {
            continue;
        }
        let end = pos + c.len_utf8();
        out.push(text[start..end].trim().to_string());
        start = end;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}
