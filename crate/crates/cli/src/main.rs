use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use async_trait::async_trait;
use clap::{Args, Parser, Subcommand, ValueEnum};
use doclift::backend::{
    AnnotationBackend, AnnotationRequest, FaultSchedule, HttpBackend, HttpConfig, LatencyModel, MockBackend,
    TransportError, UnitAnnotation,
};
use doclift::clock::{Clock, TokioClock};
use doclift::export::{write_aggregates, AggregateOptions, KeyedTable, Layout};
use doclift::orchestrator::{OutputOptions, Pipeline, RetryPolicy, RunConfig, RunReport};
use doclift::quality::{wilson_interval, Weights};
use doclift::schema::{derive_columns, SchemaSet};
use doclift::sim::{generate_corpus, run_scenario, CorpusSpec, Scenario};

/// `println!` that ends the process quietly once stdout is closed, as when
/// piped into `head`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("writing to stdout: {e}");
        }
    }};
}

#[derive(Parser)]
#[command(name = "doclift", version, about = "Schema-constrained field extraction from PDF corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate a corpus and write every artifact; indexed documents are skipped.
    Run(RunArgs),
    /// Rebuild artifacts of indexed documents from cached annotations only.
    Render(RenderArgs),
    /// Recompute aggregates from an existing studies table.
    Aggregate(AggregateArgs),
    /// Validate a schema and print its payloads or derived columns.
    Schema(SchemaArgs),
    /// Wilson score interval for a proportion, in percent.
    Wilson(WilsonArgs),
    /// Print the report of the last run in an output directory.
    Report(ReportArgs),
    /// Write a synthetic corpus with a ground-truth manifest.
    Generate(GenerateArgs),
    /// Execute a scenario under simulated time and check its assertions.
    Scenario(ScenarioArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct SchemaOpt {
    /// Schema definition file; `.toml` may be omitted. Defaults to the bundled DOAC schema.
    #[arg(long, default_value = "doac.v1")]
    schema: String,
}

impl SchemaOpt {
    fn load(&self) -> Result<SchemaSet> {
        let direct = PathBuf::from(&self.schema);
        let with_ext = PathBuf::from(format!("{}.toml", self.schema));
        for p in [&direct, &with_ext] {
            if p.is_file() {
                return SchemaSet::load(p).with_context(|| format!("loading schema {}", p.display()));
            }
        }
        let bundled = SchemaSet::bundled_doac();
        let stem = direct.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if stem == bundled.version || stem == format!("{}.toml", bundled.version) {
            return Ok(bundled);
        }
        bail!("schema {} not found", self.schema)
    }
}

#[derive(Args)]
struct OutOpt {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateFlags {
    /// Composite stratification over two qualified fields; repeatable.
    #[arg(long, num_args = 2, value_names = ["FIELD_A", "FIELD_B"], action = clap::ArgAction::Append)]
    strata: Vec<String>,
    /// Also draw SVG bar charts of the chart data.
    #[arg(long)]
    charts: bool,
}

impl AggregateFlags {
    fn options(&self) -> AggregateOptions {
        AggregateOptions {
            strata: self
                .strata
                .chunks(2)
                .map(|p| (p[0].clone(), p[1].clone()))
                .collect(),
            charts: self.charts,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Corpus root, searched recursively for PDFs.
    #[arg(long, env = "DOCLIFT_CORPUS")]
    corpus: PathBuf,
    #[command(flatten)]
    schema: SchemaOpt,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Seed of the mock backend.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum pages per request.
    #[arg(long, default_value_t = 8)]
    max_pages: u32,
    /// Maximum simultaneous backend calls.
    #[arg(long, default_value_t = 3)]
    concurrency: usize,
    /// Target requests per second.
    #[arg(long, default_value_t = 5.0)]
    rps: f64,
    /// Maximum retries per request.
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Initial backoff in seconds.
    #[arg(long, default_value_t = 1.0)]
    backoff_min: f64,
    /// Backoff ceiling in seconds.
    #[arg(long, default_value_t = 60.0)]
    backoff_max: f64,
    /// Request image regions and annotations [default: on].
    #[arg(long, overrides_with = "no_images")]
    images: bool,
    /// Do not request image regions.
    #[arg(long, overrides_with = "images")]
    no_images: bool,
    /// Regenerate artifacts of indexed documents from cached annotations.
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    out: OutOpt,
    /// Mock fault schedule: `<unit_id> <payload_id> <attempt> <status>` per line.
    #[arg(long)]
    fault_schedule: Option<PathBuf>,
    /// Documents annotated concurrently.
    #[arg(long, default_value_t = 4)]
    docs_in_flight: usize,
    /// Proxy score weights: corruption, numeric sanity, type conformance, structure.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [0.25, 0.25, 0.25, 0.25])]
    weights: Vec<f64>,
    #[command(flatten)]
    aggregates: AggregateFlags,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            max_pages: self.max_pages,
            concurrency: self.concurrency,
            rps: self.rps,
            retry: RetryPolicy {
                r_max: self.retries,
                b_min: Duration::from_secs_f64(self.backoff_min.max(0.0)),
                b_max: Duration::from_secs_f64(self.backoff_max.max(0.0)),
            },
            include_images: self.images || !self.no_images,
            overwrite: self.overwrite,
            docs_in_flight: self.docs_in_flight,
        }
    }

    fn output(&self) -> Result<OutputOptions> {
        let mut o = OutputOptions::new(&self.out.out);
        o.aggregates = self.aggregates.options();
        o.weights = Weights([self.weights[0], self.weights[1], self.weights[2], self.weights[3]]);
        o.weights.validate()?;
        Ok(o)
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, env = "DOCLIFT_CORPUS")]
    corpus: PathBuf,
    #[command(flatten)]
    schema: SchemaOpt,
    #[command(flatten)]
    out: OutOpt,
    /// Maximum pages per request used by the original run.
    #[arg(long, default_value_t = 8)]
    max_pages: u32,
}

#[derive(Args)]
struct AggregateArgs {
    #[command(flatten)]
    schema: SchemaOpt,
    #[command(flatten)]
    out: OutOpt,
    #[command(flatten)]
    aggregates: AggregateFlags,
}

#[derive(Args)]
struct SchemaArgs {
    #[command(flatten)]
    schema: SchemaOpt,
    /// Print the derived table columns instead of the payload summary.
    #[arg(long)]
    columns: bool,
}

#[derive(Args)]
struct WilsonArgs {
    successes: u64,
    n: u64,
    /// Two-sided normal critical value.
    #[arg(default_value_t = 1.96)]
    z: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    out: OutOpt,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shape {
    /// 734 documents, 7228 pages, 824 captions.
    Reference,
    /// Identical documents sized by --docs, --pages and --captions.
    Uniform,
}

#[derive(Args)]
struct GenerateArgs {
    /// Target directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "reference")]
    shape: Shape,
    #[arg(long, default_value_t = 10)]
    docs: usize,
    #[arg(long, default_value_t = 12)]
    pages: u32,
    #[arg(long, default_value_t = 1)]
    captions: u32,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Bundled scenario name or path to a scenario file.
    scenario: String,
    /// Working directory for the corpus and outputs; a temporary one by default.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

/// Serves only cached annotations; every uncached request fails.
struct CacheOnly;

#[async_trait]
impl AnnotationBackend for CacheOnly {
    async fn annotate(&self, request: &AnnotationRequest) -> Result<UnitAnnotation, TransportError> {
        Err(TransportError::new(
            0,
            format!("no cached annotation for {} {}", request.unit_id, request.payload_id()),
        ))
    }
}

fn print_report(r: &RunReport) {
    out!("documents: {}", r.docs_seen);
    out!("processed: {}", r.docs_processed);
    out!("regenerated: {}", r.docs_regenerated);
    out!("skipped: {}", r.docs_skipped);
    out!("excluded: {}", r.docs_excluded);
    out!("chunks: {}", r.chunks);
    out!("captions: {}", r.captions);
    out!("requests: {}", r.requests_issued);
    out!("retries: {}", r.retries);
    out!("errors: {}", r.transient_errors);
    out!("failed units: {}", r.failed_units);
    out!("backend calls: {}", r.backend_calls);
    out!("peak in flight: {}", r.peak_in_flight);
    out!("wall clock: {:.2} s", r.wall_clock);
    out!("observed rps: {:.3}", r.observed_rps);
    out!("mean per document: {:.2} s", r.mean_doc_seconds);
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let schema = Arc::new(args.schema.load()?);
    let config = args.config();
    config.validate()?;
    let output = args.output()?;
    let rt = runtime()?;
    let report = rt.block_on(async {
        let clock: Arc<dyn Clock> = Arc::new(TokioClock::system());
        let backend: Arc<dyn AnnotationBackend> = match args.backend {
            BackendKind::Mock => {
                let mut mock = MockBackend::new(args.seed, clock.clone()).with_latency(LatencyModel::Zero);
                if let Some(path) = &args.fault_schedule {
                    mock = mock.with_faults(FaultSchedule::load(path)?);
                }
                Arc::new(mock)
            }
            BackendKind::Http => {
                if args.fault_schedule.is_some() {
                    bail!("--fault-schedule applies to the mock backend only");
                }
                Arc::new(HttpBackend::new(HttpConfig::from_env()?)?)
            }
        };
        let pipeline = Pipeline::new(config, schema, backend, clock);
        Ok(pipeline.run(&args.corpus, &output).await?.report)
    })?;
    print_report(&report);
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let schema = Arc::new(args.schema.load()?);
    let config = RunConfig {
        max_pages: args.max_pages,
        overwrite: true,
        ..RunConfig::default()
    };
    let output = OutputOptions::new(&args.out.out);
    let rt = runtime()?;
    let report = rt.block_on(async {
        let clock: Arc<dyn Clock> = Arc::new(TokioClock::system());
        Pipeline::new(config, schema, Arc::new(CacheOnly), clock)
            .run(&args.corpus, &output)
            .await
    })?;
    print_report(&report.report);
    Ok(())
}

fn cmd_aggregate(args: &AggregateArgs) -> Result<()> {
    let schema = args.schema.load()?;
    let layout = Layout::new(&args.out.out);
    let path = layout.studies_csv();
    if !path.is_file() {
        bail!("no studies table at {}", path.display());
    }
    let table = KeyedTable::read(&path)?;
    let expected = derive_columns(&schema);
    if table.columns() != expected.as_slice() {
        bail!(
            "{} does not match the columns of schema {}",
            path.display(),
            schema.version
        );
    }
    let tables = write_aggregates(&table, &schema, layout.root(), &args.aggregates.options())?;
    out!("studies: {}", table.len());
    out!("fields: {}", tables.len());
    Ok(())
}

fn cmd_schema(args: &SchemaArgs) -> Result<()> {
    let schema = args.schema.load()?;
    if args.columns {
        for c in derive_columns(&schema) {
            out!("{c}");
        }
        return Ok(());
    }
    out!("{} {}", schema.name, schema.version);
    for p in schema.payloads() {
        out!("{}: {} fields", p.id, p.fields.len());
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let path = Layout::new(&args.out.out).run_report();
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: RunReport = serde_json::from_str(&text)?;
    print_report(&report);
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = match args.shape {
        Shape::Reference => CorpusSpec::reference_shape(args.seed),
        Shape::Uniform => CorpusSpec::uniform(args.seed, args.docs, args.pages, args.captions, true),
    };
    let manifest = generate_corpus(&spec, &args.corpus, &SchemaSet::bundled_doac())?;
    out!("documents: {}", manifest.documents.len());
    out!("pages: {}", manifest.total_pages());
    out!("chunks: {}", manifest.total_chunks());
    out!("captions: {}", manifest.total_captions());
    Ok(())
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.is_file() {
        return Ok(Scenario::load(path)?);
    }
    Ok(Scenario::builtin(name)?)
}

fn cmd_scenario(args: &ScenarioArgs) -> Result<bool> {
    let scenario = load_scenario(&args.scenario)?;
    let temp;
    let workdir = match &args.workdir {
        Some(d) => d.clone(),
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    let result = run_scenario(&scenario, &workdir)?;
    out!("{result}");
    Ok(result.passed())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Render(a) => cmd_render(a).map(|_| true),
        Command::Aggregate(a) => cmd_aggregate(a).map(|_| true),
        Command::Schema(a) => cmd_schema(a).map(|_| true),
        Command::Wilson(a) => wilson_interval(a.successes, a.n, a.z)
            .map(|(lo, hi)| out!("{lo:.1} {hi:.1}"))
            .map(|_| true)
            .map_err(Into::into),
        Command::Report(a) => cmd_report(a).map(|_| true),
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::Scenario(a) => cmd_scenario(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
