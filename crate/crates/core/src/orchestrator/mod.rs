//! Corpus driver: per-document fan-out of units x payloads under the shared
//! limits, then consolidation, export and index update in discovery order.

mod limits;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use futures::StreamExt;
use serde::{Deserialize, Serialize};

pub use limits::{
    bounded_call, CallLog, CallRecord, CallStats, CallTrace, Limits, RateLimiter, RetryPolicy,
    RETRY_EXHAUSTED,
};

use crate::backend::{AnnotationBackend, AnnotationRequest, ImageObject, PageMarkdown, UnitAnnotation};
use crate::chunking::{build_chunk_units, extract_caption_units, DocumentUnit, DEFAULT_MAX_PAGES};
use crate::clock::Clock;
use crate::consolidate::{integrate_payloads, merge_payload, StudyRecord};
use crate::error::{Error, Result};
use crate::export::{
    read_cached, record_row, render_markdown, write_aggregates, write_cached, write_columns,
    write_quality_rows, AggregateOptions, KeyedTable, Layout,
};
use crate::ingest::{discover, DiscoveredFile, DocumentDescriptor, ExclusionLog, IndexEntry, ProcessedIndex};
use crate::quality::{
    median, numeric_sanity, proxy_score, structural_completeness, token_count, CheckTally,
    CorruptionThresholds, LineTally, QualityIndicators, Weights,
};
use crate::schema::{derive_columns, PayloadId, PayloadSchema, SchemaSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Maximum pages per request.
    pub max_pages: u32,
    /// Maximum simultaneous backend calls.
    pub concurrency: usize,
    /// Target requests per second.
    pub rps: f64,
    pub retry: RetryPolicy,
    pub include_images: bool,
    /// Regenerate artifacts of already indexed documents from cached annotations.
    pub overwrite: bool,
    /// Documents annotated concurrently; only the global limits bound calls.
    pub docs_in_flight: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_pages: DEFAULT_MAX_PAGES,
            concurrency: 3,
            rps: 5.0,
            retry: RetryPolicy::default(),
            include_images: true,
            overwrite: false,
            docs_in_flight: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_pages == 0 {
            return Err(Error::Config("max pages per request must be at least 1".into()));
        }
        if self.docs_in_flight == 0 {
            return Err(Error::Config("documents in flight must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if !(self.rps.is_finite() && self.rps > 0.0) {
            return Err(Error::Config("request rate must be positive".into()));
        }
        self.retry.validate()
    }
}

#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub out: PathBuf,
    pub aggregates: AggregateOptions,
    pub weights: Weights<f64>,
}

impl OutputOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        OutputOptions {
            out: out.into(),
            aggregates: AggregateOptions::default(),
            weights: Weights::equal(),
        }
    }
}

/// Run-level accounting. `requests_issued` counts first attempts only, so
/// backend invocations equal `requests_issued + retries`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub docs_seen: u64,
    pub docs_skipped: u64,
    pub docs_excluded: u64,
    pub docs_processed: u64,
    pub docs_regenerated: u64,
    pub chunks: u64,
    pub captions: u64,
    pub requests_issued: u64,
    pub retries: u64,
    /// Error responses of any kind, retryable or not.
    pub transient_errors: u64,
    /// (unit, payload) pairs that ended failed.
    pub failed_units: u64,
    pub backend_calls: u64,
    pub peak_in_flight: u64,
    pub wall_clock: f64,
    pub observed_rps: f64,
    pub mean_doc_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub records: Vec<StudyRecord>,
    /// Every granted dispatch time of the run, in grant order.
    pub dispatch_times: Vec<Duration>,
}

/// Annotations of a document keyed by payload, each list in unit order.
pub type AnnotationMap = BTreeMap<PayloadId, Vec<UnitAnnotation>>;

async fn annotate_pairs(
    backend: &dyn AnnotationBackend,
    units: &[DocumentUnit],
    payloads: &[Arc<PayloadSchema>],
    data_url: &Arc<str>,
    include_images: bool,
    limits: &Limits,
    cache: Option<&Layout>,
) -> Vec<UnitAnnotation> {
    let calls = units.iter().flat_map(|unit| {
        payloads.iter().map(move |payload| async move {
            if let Some(hit) = cache.and_then(|l| read_cached(l, &unit.unit_id, payload.id.as_str())) {
                return hit;
            }
            let request = AnnotationRequest::for_unit(unit, data_url.clone(), payload.clone(), include_images);
            bounded_call(backend, &request, limits).await.annotation
        })
    });
    join_all(calls).await
}

/// Annotate every (unit, payload) pair; the map is complete even when
/// individual pairs fail.
pub async fn process_document_units(
    backend: &dyn AnnotationBackend,
    units: &[DocumentUnit],
    payloads: &[Arc<PayloadSchema>],
    data_url: Arc<str>,
    include_images: bool,
    limits: &Limits,
) -> AnnotationMap {
    let all = annotate_pairs(backend, units, payloads, &data_url, include_images, limits, None).await;
    let mut map = AnnotationMap::new();
    for a in all {
        map.entry(a.payload_id).or_default().push(a);
    }
    map
}

struct AnnotatedDoc {
    descriptor: DocumentDescriptor,
    regenerated: bool,
    chunks: usize,
    captions: usize,
    annotations: Vec<UnitAnnotation>,
    pages: Vec<PageMarkdown>,
    images: Vec<ImageObject>,
    elapsed: Duration,
}

enum DocOutcome {
    Annotated(Box<AnnotatedDoc>),
    Excluded { canonical_id: String, reason: String },
}

/// Page text and images of each chunk, from its first successful payload.
fn chunk_pages(chunks: &[DocumentUnit], annotations: &[UnitAnnotation]) -> (Vec<PageMarkdown>, Vec<ImageObject>) {
    let mut pages = Vec::new();
    let mut images = Vec::new();
    for chunk in chunks {
        let first = PayloadId::ALL.iter().find_map(|p| {
            annotations
                .iter()
                .find(|a| a.unit_id == chunk.unit_id && a.payload_id == *p && a.is_ok())
        });
        if let Some(a) = first {
            pages.extend(a.page_markdowns.iter().cloned());
            images.extend(a.images.iter().cloned());
        }
    }
    (pages, images)
}

struct DocQuality {
    key: crate::ingest::SourceKey,
    lines: LineTally,
    sanity: CheckTally,
    present: usize,
    conforming: usize,
    page_tokens: Vec<usize>,
}

/// Drives a corpus run against one backend, schema and clock.
pub struct Pipeline {
    pub config: RunConfig,
    pub schema: Arc<SchemaSet>,
    pub backend: Arc<dyn AnnotationBackend>,
    pub clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(
        config: RunConfig,
        schema: Arc<SchemaSet>,
        backend: Arc<dyn AnnotationBackend>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Pipeline {
            config,
            schema,
            backend,
            clock,
        }
    }

    async fn annotate_document(
        &self,
        file: DiscoveredFile,
        regenerate: bool,
        limits: &Limits,
        layout: &Layout,
    ) -> Result<DocOutcome> {
        let started = self.clock.now();
        let descriptor = match file.read_descriptor() {
            Ok(d) => d,
            Err(e) => {
                return Ok(DocOutcome::Excluded {
                    canonical_id: file.canonical_id,
                    reason: e.to_string(),
                })
            }
        };
        let data_url: Arc<str> = Arc::from(descriptor.data_url.as_str());
        let payloads = self.schema.payloads();
        let cache = regenerate.then_some(layout);
        let images = self.config.include_images;

        let chunks = build_chunk_units(&descriptor.key, descriptor.page_count, self.config.max_pages)?;
        let mut annotations =
            annotate_pairs(self.backend.as_ref(), &chunks, payloads, &data_url, images, limits, cache).await;
        let (pages, page_images) = chunk_pages(&chunks, &annotations);
        let page_text: Vec<(u32, String)> = pages.iter().map(|p| (p.page, p.markdown.clone())).collect();
        let captions = extract_caption_units(&page_text, &descriptor.key);
        annotations.extend(
            annotate_pairs(self.backend.as_ref(), &captions, payloads, &data_url, images, limits, cache).await,
        );
        Ok(DocOutcome::Annotated(Box::new(AnnotatedDoc {
            descriptor,
            regenerated: regenerate,
            chunks: chunks.len(),
            captions: captions.len(),
            annotations,
            pages,
            images: page_images,
            elapsed: self.clock.now().saturating_sub(started),
        })))
    }

    /// Consolidate, export, then index one annotated document.
    fn finish_document(
        &self,
        doc: &AnnotatedDoc,
        layout: &Layout,
        table: &mut KeyedTable,
        columns: &[String],
        index: &mut ProcessedIndex,
    ) -> Result<(StudyRecord, DocQuality)> {
        let key = &doc.descriptor.key;
        let mut merged = Vec::with_capacity(PayloadId::ALL.len());
        for payload in self.schema.payloads() {
            let anns: Vec<UnitAnnotation> = doc
                .annotations
                .iter()
                .filter(|a| a.payload_id == payload.id)
                .cloned()
                .collect();
            merged.push(merge_payload(payload, &anns)?);
        }
        let failed: Vec<String> = doc
            .annotations
            .iter()
            .filter(|a| !a.is_ok())
            .map(|a| a.unit_id.clone())
            .collect();
        let record = integrate_payloads(merged, key.clone(), failed)?;

        if !doc.regenerated {
            for a in doc.annotations.iter().filter(|a| a.is_ok()) {
                write_cached(layout, a)?;
            }
        }
        table.upsert(record_row(&record, &self.schema, columns)?)?;
        let md = render_markdown(
            &doc.descriptor.canonical_id,
            &record,
            &self.schema,
            doc.descriptor.page_count,
            &doc.pages,
            &doc.images,
        );
        let md_path = layout.markdown(key);
        std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;

        if !index.is_processed(key) {
            let units = (doc.chunks + doc.captions) as u64;
            index.mark_processed(IndexEntry::new(key.clone(), self.clock.wall_time(), &self.schema.version, units))?;
        }

        let thresholds = CorruptionThresholds::default();
        let mut quality = DocQuality {
            key: key.clone(),
            lines: LineTally::default(),
            sanity: CheckTally::default(),
            present: 0,
            conforming: 0,
            page_tokens: doc.pages.iter().map(|p| token_count(&p.markdown)).collect(),
        };
        for p in &doc.pages {
            quality.lines.add(LineTally::of(&p.markdown, &thresholds));
        }
        for payload in self.schema.payloads() {
            quality
                .sanity
                .add(numeric_sanity(payload, &record.payload(payload.id).values));
        }
        for a in doc.annotations.iter().filter(|a| a.is_ok()) {
            quality.present += a.validation.present;
            quality.conforming += a.validation.conforming;
        }
        Ok((record, quality))
    }

    pub async fn run(&self, corpus: &Path, output: &OutputOptions) -> Result<RunOutcome> {
        self.config.validate()?;
        output.weights.validate()?;
        let start = self.clock.now();
        let layout = Layout::new(&output.out);
        layout.create_dirs()?;
        let columns = derive_columns(&self.schema);
        let mut table = KeyedTable::open(layout.studies_csv(), &columns)?;
        let mut index = ProcessedIndex::open(layout.index())?;
        let exclusions = ExclusionLog::new(layout.excluded());
        let limits = Limits::new(
            self.config.concurrency,
            self.config.rps,
            self.config.retry,
            self.clock.clone(),
        )?
        .with_log(CallLog::create(&layout.calls())?);

        let files = discover(corpus)?;
        let mut report = RunReport {
            docs_seen: files.len() as u64,
            ..Default::default()
        };
        let mut work = Vec::new();
        for f in files {
            match (index.is_processed(&f.key), self.config.overwrite) {
                (false, _) => work.push((f, false)),
                (true, true) => work.push((f, true)),
                (true, false) => report.docs_skipped += 1,
            }
        }

        let mut records = Vec::new();
        let mut qualities = Vec::new();
        let mut doc_seconds = Vec::new();
        let mut stream = futures::stream::iter(work)
            .map(|(f, regen)| self.annotate_document(f, regen, &limits, &layout))
            .buffered(self.config.docs_in_flight);
        while let Some(outcome) = stream.next().await {
            match outcome? {
                DocOutcome::Excluded { canonical_id, reason } => {
                    tracing::warn!(document = %canonical_id, "excluded: {reason}");
                    exclusions.record(&canonical_id, &reason)?;
                    report.docs_excluded += 1;
                }
                DocOutcome::Annotated(doc) => {
                    let (record, quality) = self.finish_document(&doc, &layout, &mut table, &columns, &mut index)?;
                    if doc.regenerated {
                        report.docs_regenerated += 1;
                    } else {
                        report.docs_processed += 1;
                        report.chunks += doc.chunks as u64;
                        report.captions += doc.captions as u64;
                        doc_seconds.push(doc.elapsed.as_secs_f64());
                    }
                    records.push(record);
                    qualities.push(quality);
                }
            }
        }
        drop(stream);

        table.write_parquet(&layout.studies_parquet())?;
        write_aggregates(&table, &self.schema, layout.root(), &output.aggregates)?;
        write_columns(&layout.columns(), &self.schema)?;
        self.write_quality(&layout, &qualities, &output.weights)?;
        if let Some(log) = &limits.log {
            log.flush()?;
        }

        let s = &limits.stats;
        report.requests_issued = CallStats::get(&s.requests_issued);
        report.retries = CallStats::get(&s.retries);
        report.transient_errors = CallStats::get(&s.transient_errors);
        report.failed_units = CallStats::get(&s.failed_units);
        report.backend_calls = CallStats::get(&s.backend_calls);
        report.peak_in_flight = s.peak_in_flight.load(Ordering::SeqCst) as u64;
        report.wall_clock = self.clock.now().saturating_sub(start).as_secs_f64();
        report.observed_rps = if report.wall_clock > 0.0 {
            report.requests_issued as f64 / report.wall_clock
        } else {
            0.0
        };
        report.mean_doc_seconds = if doc_seconds.is_empty() {
            0.0
        } else {
            doc_seconds.iter().sum::<f64>() / doc_seconds.len() as f64
        };
        let json = serde_json::to_string_pretty(&report)?;
        let path = layout.run_report();
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

        Ok(RunOutcome {
            report,
            records,
            dispatch_times: limits.limiter.dispatch_times(),
        })
    }

    fn write_quality(&self, layout: &Layout, docs: &[DocQuality], weights: &Weights<f64>) -> Result<()> {
        let all_tokens: Vec<usize> = docs.iter().flat_map(|d| d.page_tokens.iter().copied()).collect();
        let corpus_median = median(&all_tokens);
        let mut rows = Vec::with_capacity(docs.len());
        for d in docs {
            let ind = QualityIndicators {
                corruption: d.lines.clean_fraction(),
                numeric_sanity: d.sanity.fraction(),
                type_conformance: CheckTally {
                    passed: d.conforming,
                    checked: d.present,
                }
                .fraction(),
                structural_completeness: structural_completeness(&d.page_tokens, corpus_median),
            };
            rows.push((d.key.clone(), ind, proxy_score(&ind, weights)?));
        }
        write_quality_rows(&layout.quality_report(), &rows)
    }
}

/// Convenience wrapper over [`Pipeline::run`].
pub async fn run_corpus(
    config: RunConfig,
    corpus: &Path,
    output: &OutputOptions,
    schema: Arc<SchemaSet>,
    backend: Arc<dyn AnnotationBackend>,
    clock: Arc<dyn Clock>,
) -> Result<RunOutcome> {
    Pipeline::new(config, schema, backend, clock).run(corpus, output).await
}
