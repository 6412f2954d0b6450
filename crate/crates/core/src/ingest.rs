//! Corpus ingestion: discovery, canonical identifiers, source keys, data URLs,
//! page introspection and the resume index.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const DATA_URL_PREFIX: &str = "data:application/pdf;base64,";
pub const INDEX_FILE: &str = "processed.index.jsonl";
pub const EXCLUDED_FILE: &str = "excluded.log";

/// SHA-1 surrogate identifier of a document, as 40 lowercase hex chars.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SourceKey(String);

impl SourceKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for SourceKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() == 40 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(SourceKey(s.to_string()))
        } else {
            Err(Error::InvalidArgument(format!("not a source key: {s:?}")))
        }
    }
}

impl TryFrom<String> for SourceKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SourceKey> for String {
    fn from(k: SourceKey) -> String {
        k.0
    }
}

impl fmt::Display for SourceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Normalized identifier of a file: NFC, full Unicode case folding, forward
/// slashes and collapsed whitespace.
pub fn canonical_id(path: &str) -> Result<String> {
    if path.is_empty() {
        return Err(Error::InvalidPath("empty path".into()));
    }
    let nfc: String = path.nfc().collect();
    // Folding can leave decomposed sequences behind; recompose so the
    // function is idempotent.
    let folded: String = caseless::default_case_fold_str(&nfc).nfc().collect();
    let slashed = folded.replace('\\', "/");
    Ok(crate::text::collapse_whitespace(&slashed))
}

/// Lowercase hex SHA-1 of the UTF-8 bytes of `canonical`.
pub fn source_key(canonical: &str) -> SourceKey {
    let digest = Sha1::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(40);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    SourceKey(hex)
}

pub fn encode_data_url(pdf_bytes: &[u8]) -> Result<String> {
    if pdf_bytes.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let mut url = String::with_capacity(DATA_URL_PREFIX.len() + pdf_bytes.len() * 4 / 3 + 4);
    url.push_str(DATA_URL_PREFIX);
    STANDARD.encode_string(pdf_bytes, &mut url);
    Ok(url)
}

pub fn decode_data_url(url: &str) -> Result<Vec<u8>> {
    let body = url
        .strip_prefix(DATA_URL_PREFIX)
        .ok_or_else(|| Error::InvalidArgument("not a PDF data URL".into()))?;
    STANDARD
        .decode(body)
        .map_err(|e| Error::InvalidArgument(format!("bad base64 payload: {e}")))
}

/// Page count from structural parsing. Unparseable input and empty page trees
/// come back as [`Error::Excluded`].
pub fn page_count(pdf_bytes: &[u8]) -> Result<u32> {
    let doc = lopdf::Document::load_mem(pdf_bytes)
        .map_err(|e| Error::Excluded(format!("unparseable pdf: {e}")))?;
    match doc.get_pages().len() {
        0 => Err(Error::Excluded("zero pages".into())),
        n => Ok(n as u32),
    }
}

/// A document ready for unit planning.
#[derive(Debug, Clone)]
pub struct DocumentDescriptor {
    pub path: PathBuf,
    pub canonical_id: String,
    pub key: SourceKey,
    pub page_count: u32,
    pub data_url: String,
}

impl DocumentDescriptor {
    pub fn new(path: PathBuf, canonical_id: String, pdf_bytes: &[u8]) -> Result<Self> {
        let data_url = encode_data_url(pdf_bytes)?;
        let page_count = page_count(pdf_bytes)?;
        Ok(DocumentDescriptor {
            path,
            key: source_key(&canonical_id),
            canonical_id,
            page_count,
            data_url,
        })
    }
}

/// A file found during discovery, keyed by its path relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoveredFile {
    pub path: PathBuf,
    pub canonical_id: String,
    pub key: SourceKey,
}

impl DiscoveredFile {
    pub fn read_descriptor(&self) -> Result<DocumentDescriptor> {
        let bytes = fs::read(&self.path).map_err(|e| Error::io(&self.path, e))?;
        DocumentDescriptor::new(self.path.clone(), self.canonical_id.clone(), &bytes)
    }
}

/// Every `.pdf` file below `root` (recursive, case-insensitive extension),
/// ordered by canonical id with the raw relative path as tie-break.
pub fn discover(root: &Path) -> Result<Vec<DiscoveredFile>> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "corpus directory {} does not exist",
            root.display()
        )));
    }
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(root) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.into());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let is_pdf = entry
            .path()
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("pdf"));
        if !is_pdf {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .to_string_lossy()
            .into_owned();
        let canonical = canonical_id(&rel)?;
        found.push((rel, DiscoveredFile {
            path: entry.path().to_path_buf(),
            key: source_key(&canonical),
            canonical_id: canonical,
        }));
    }
    found.sort_by(|a, b| {
        a.1.canonical_id
            .cmp(&b.1.canonical_id)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(found.into_iter().map(|(_, f)| f).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: SourceKey,
    pub completed_at: String,
    pub schema_version: String,
    pub unit_count: u64,
}

impl IndexEntry {
    pub fn new(key: SourceKey, at: DateTime<Utc>, schema_version: &str, unit_count: u64) -> Self {
        IndexEntry {
            key,
            completed_at: at.to_rfc3339_opts(SecondsFormat::Millis, true),
            schema_version: schema_version.to_string(),
            unit_count,
        }
    }
}

/// Append-only registry of completed documents, optionally backed by a JSONL file.
#[derive(Debug, Default)]
pub struct ProcessedIndex {
    entries: HashMap<SourceKey, IndexEntry>,
    order: Vec<SourceKey>,
    file: Option<PathBuf>,
}

impl ProcessedIndex {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; later appends go to the same file. A torn
    /// trailing line from an interrupted append is ignored.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut index = ProcessedIndex {
            file: Some(path.clone()),
            ..Default::default()
        };
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(index),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(&path, e))?;
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<IndexEntry>(line) {
                Ok(entry) => {
                    if !index.entries.contains_key(&entry.key) {
                        index.order.push(entry.key.clone());
                        index.entries.insert(entry.key.clone(), entry);
                    }
                }
                Err(e) if i == last => {
                    tracing::warn!(path = %path.display(), "ignoring torn index line: {e}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(index)
    }

    pub fn is_processed(&self, key: &SourceKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &SourceKey) -> Option<&IndexEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in the order they were written.
    pub fn entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.order.iter().map(|k| &self.entries[k])
    }

    pub fn mark_processed(&mut self, entry: IndexEntry) -> Result<()> {
        if self.entries.contains_key(&entry.key) {
            return Err(Error::AlreadyIndexed(entry.key.to_string()));
        }
        if let Some(path) = &self.file {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.order.push(entry.key.clone());
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }
}

/// Audit trail for documents skipped at ingestion: `canonical_id<TAB>reason`.
#[derive(Debug)]
pub struct ExclusionLog {
    path: PathBuf,
}

impl ExclusionLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ExclusionLog { path: path.into() }
    }

    pub fn record(&self, canonical_id: &str, reason: &str) -> Result<()> {
        let reason = reason.replace(['\t', '\n'], " ");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{canonical_id}\t{reason}").map_err(|e| Error::io(&self.path, e))
    }
}
