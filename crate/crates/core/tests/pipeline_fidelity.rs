//! End to end over a small generated corpus: every study table cell against
//! the planted manifest, cache-only regeneration, and standalone aggregation.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use doclift::backend::{AnnotationBackend, AnnotationRequest, TransportError, UnitAnnotation};
use doclift::clock::{Clock, TokioClock};
use doclift::export::{decode_cell, split_column, write_aggregates, KeyedTable, Layout};
use doclift::orchestrator::RunOutcome;
use doclift::schema::{derive_columns, FieldKind, PROVENANCE_COLUMNS};
use doclift::sim::{artifact_digests, generate_corpus, simulated_runtime, CorpusSpec, DocSpec, Manifest};
use doclift::{MockBackend, OutputOptions, Pipeline, RunConfig, SchemaSet};

/// Fails every call; a run that reaches the backend cannot finish clean.
struct Unreachable;

#[async_trait]
impl AnnotationBackend for Unreachable {
    async fn annotate(&self, _: &AnnotationRequest) -> Result<UnitAnnotation, TransportError> {
        Err(TransportError::new(400, "backend must not be called"))
    }
}

fn spec() -> CorpusSpec {
    let doc = |pages, captions, population, conflict| DocSpec {
        pages,
        captions,
        population,
        conflict,
        facts: true,
    };
    CorpusSpec {
        seed: 3,
        max_pages: 8,
        docs: vec![
            doc(5, 0, true, false),
            doc(12, 2, true, true),
            doc(16, 1, false, false),
            doc(20, 3, true, true),
            doc(1, 1, false, false),
            doc(9, 0, true, false),
        ],
    }
}

type Make = fn(Arc<dyn Clock>) -> Arc<dyn AnnotationBackend>;

fn run(config: RunConfig, make: Make, corpus: &Path, out: &Path) -> RunOutcome {
    let rt = simulated_runtime().unwrap();
    rt.block_on(async {
        let clock: Arc<dyn Clock> = Arc::new(TokioClock::simulated());
        let backend = make(clock.clone());
        let pipeline = Pipeline::new(config, Arc::new(SchemaSet::bundled_doac()), backend, clock);
        pipeline.run(corpus, &OutputOptions::new(out)).await.unwrap()
    })
}

fn mock(clock: Arc<dyn Clock>) -> Arc<dyn AnnotationBackend> {
    Arc::new(MockBackend::new(3, clock))
}

fn unreachable(_: Arc<dyn Clock>) -> Arc<dyn AnnotationBackend> {
    Arc::new(Unreachable)
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: std::path::PathBuf,
    out: std::path::PathBuf,
    manifest: Manifest,
    first: RunOutcome,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    let manifest = generate_corpus(&spec(), &corpus, &SchemaSet::bundled_doac()).unwrap();
    fs::write(corpus.join("broken.pdf"), b"not a pdf at all").unwrap();
    let first = run(RunConfig::default(), mock, &corpus, &out);
    Fixture {
        _dir: dir,
        corpus,
        out,
        manifest,
        first,
    }
}

#[test]
fn study_table_matches_planted_manifest() {
    let fx = fixture();
    let set = SchemaSet::bundled_doac();
    let r = &fx.first.report;
    assert_eq!(r.docs_processed, 6);
    assert_eq!(r.docs_excluded, 1);
    assert_eq!(r.failed_units, 0);
    assert_eq!(r.requests_issued, (fx.manifest.total_chunks() + fx.manifest.total_captions()) * 5);
    let excluded = fs::read_to_string(Layout::new(&fx.out).excluded()).unwrap();
    assert!(excluded.starts_with("broken.pdf\t"));

    let table = KeyedTable::read(fx.out.join("studies.csv")).unwrap();
    assert_eq!(table.columns(), derive_columns(&set).as_slice());
    assert_eq!(table.len(), 6);
    let flags_at = table.column_index("conflict_flags").unwrap();
    let review_at = table.column_index("review_needed").unwrap();
    let mut conflicted = 0;
    for doc in &fx.manifest.documents {
        let row = table.row(doc.source_key.as_str()).unwrap();
        for (i, col) in table.columns().iter().enumerate().skip(PROVENANCE_COLUMNS.len()) {
            let (payload, field) = split_column(col).unwrap();
            let kind = set.payload(payload).field(field).unwrap().kind;
            let got = decode_cell(kind, &row[i]).unwrap();
            let planted = if kind == FieldKind::EvidenceText {
                doc.evidence.get(col).cloned().map(doclift::schema::Value::List)
            } else {
                doc.expected.get(col).cloned()
            };
            assert_eq!(got, planted, "{} {col}", doc.canonical_id);
        }
        let flags = &row[flags_at];
        for c in &doc.conflicts {
            assert!(flags.contains(&format!("{c}{{")), "{}: {c} not flagged in {flags}", doc.canonical_id);
        }
        assert_eq!(flags.matches('{').count(), doc.conflicts.len(), "{}", doc.canonical_id);
        assert_eq!(row[review_at], (!doc.conflicts.is_empty()).to_string());
        conflicted += usize::from(!doc.conflicts.is_empty());
    }
    assert_eq!(conflicted, 2);
}

#[test]
fn overwrite_regenerates_from_cache_alone() {
    let fx = fixture();
    let before = artifact_digests(&fx.out).unwrap();
    for rel in before.keys().filter(|k| k.starts_with("markdown/")) {
        fs::remove_file(fx.out.join(rel)).unwrap();
    }
    let config = RunConfig {
        overwrite: true,
        ..RunConfig::default()
    };
    let again = run(config, unreachable, &fx.corpus, &fx.out);
    assert_eq!(again.report.backend_calls, 0);
    assert_eq!(again.report.failed_units, 0);
    assert_eq!(again.report.docs_regenerated, 6);
    assert_eq!(artifact_digests(&fx.out).unwrap(), before);

    // Without overwrite everything indexed is skipped.
    let skipped = run(RunConfig::default(), unreachable, &fx.corpus, &fx.out);
    assert_eq!(skipped.report.docs_skipped, 6);
    assert_eq!(skipped.report.backend_calls, 0);
}

#[test]
fn standalone_aggregation_reproduces_run_output() {
    let fx = fixture();
    let set = SchemaSet::bundled_doac();
    let in_run = artifact_digests(&fx.out).unwrap();
    let copy = fx.out.parent().unwrap().join("copy");
    fs::create_dir_all(&copy).unwrap();
    fs::copy(fx.out.join("studies.csv"), copy.join("studies.csv")).unwrap();
    let table = KeyedTable::read(copy.join("studies.csv")).unwrap();
    write_aggregates(&table, &set, &copy, &Default::default()).unwrap();
    let standalone = artifact_digests(&copy).unwrap();
    for (rel, digest) in &standalone {
        assert_eq!(in_run.get(rel), Some(digest), "{rel}");
    }
    let aggregated = in_run.keys().filter(|k| !k.starts_with("markdown/")).count();
    assert_eq!(standalone.len(), aggregated);
}

#[test]
fn markdown_headers_quote_evidence() {
    let fx = fixture();
    let layout = Layout::new(&fx.out);
    for doc in &fx.manifest.documents {
        let md = fs::read_to_string(layout.markdown(&doc.source_key)).unwrap();
        let (header, body) = md.split_once("\n---\n").unwrap();
        for sentences in doc.evidence.values() {
            for s in sentences {
                assert!(header.contains(&format!("  - > {s}\n")), "{}: {s}", doc.canonical_id);
            }
        }
        for page in 1..=doc.pages {
            assert!(body.contains(&format!("\n## Page {page}\n")), "{} page {page}", doc.canonical_id);
        }
    }
}
