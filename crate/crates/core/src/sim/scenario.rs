//! Declarative end-to-end runs under the simulated clock.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::corpus::{generate_corpus, CorpusSpec, Manifest};
use super::simulated_runtime;
use crate::backend::{FaultSchedule, LatencyModel, MockBackend};
use crate::chunking::build_chunk_units;
use crate::clock::{Clock, TokioClock};
use crate::error::{Error, Result};
use crate::export::Layout;
use crate::ingest::{IndexEntry, ProcessedIndex};
use crate::orchestrator::{OutputOptions, Pipeline, RunConfig, RunOutcome, RunReport};
use crate::schema::{PayloadId, SchemaSet};

/// Scenarios shipped with the crate, by name.
pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    ("reference_shape", include_str!("../../scenarios/reference_shape.toml")),
    ("throughput", include_str!("../../scenarios/throughput.toml")),
    ("throughput_slow", include_str!("../../scenarios/throughput_slow.toml")),
    ("resume", include_str!("../../scenarios/resume.toml")),
    ("faults", include_str!("../../scenarios/faults.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    ReferenceShape,
    Uniform {
        docs: usize,
        pages: u32,
        #[serde(default)]
        captions: u32,
        #[serde(default = "yes")]
        facts: bool,
    },
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// Optional overrides of the run defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub max_pages: Option<u32>,
    pub concurrency: Option<usize>,
    pub rps: Option<f64>,
    pub retries: Option<u32>,
    pub backoff_min: Option<f64>,
    pub backoff_max: Option<f64>,
    pub include_images: Option<bool>,
    pub docs_in_flight: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, mut c: RunConfig) -> RunConfig {
        if let Some(v) = self.max_pages {
            c.max_pages = v;
        }
        if let Some(v) = self.concurrency {
            c.concurrency = v;
        }
        if let Some(v) = self.rps {
            c.rps = v;
        }
        if let Some(v) = self.retries {
            c.retry.r_max = v;
        }
        if let Some(v) = self.backoff_min {
            c.retry.b_min = Duration::from_secs_f64(v.max(0.0));
        }
        if let Some(v) = self.backoff_max {
            c.retry.b_max = Duration::from_secs_f64(v.max(0.0));
        }
        if let Some(v) = self.include_images {
            c.include_images = v;
        }
        if let Some(v) = self.docs_in_flight {
            c.docs_in_flight = v;
        }
        c
    }
}

/// Scripted failures. Counted faults hit attempt 1 of the first (chunk,
/// payload) pairs in discovery order: retryable ones first, then
/// non-retryable ones on the following pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default)]
    pub retryable: usize,
    #[serde(default)]
    pub non_retryable: usize,
    #[serde(default = "default_retryable_status")]
    pub retryable_status: u16,
    #[serde(default = "default_fatal_status")]
    pub non_retryable_status: u16,
    /// Extra schedule lines: `<unit_id> <payload_id> <attempt> <status>`.
    #[serde(default)]
    pub script: String,
}

fn default_retryable_status() -> u16 {
    429
}

fn default_fatal_status() -> u16 {
    400
}

impl Default for FaultPlan {
    fn default() -> Self {
        FaultPlan {
            retryable: 0,
            non_retryable: 0,
            retryable_status: default_retryable_status(),
            non_retryable_status: default_fatal_status(),
            script: String::new(),
        }
    }
}

impl FaultPlan {
    pub fn schedule(&self, manifest: &Manifest, max_pages: u32) -> Result<FaultSchedule> {
        let mut sched = FaultSchedule::parse(&self.script)?;
        let wanted = self.retryable + self.non_retryable;
        let mut pairs = Vec::with_capacity(wanted);
        'outer: for doc in &manifest.documents {
            let units = build_chunk_units(&doc.source_key, doc.pages, max_pages)?;
            for unit in &units {
                for p in PayloadId::ALL {
                    if pairs.len() == wanted {
                        break 'outer;
                    }
                    pairs.push((unit.unit_id.clone(), p));
                }
            }
        }
        if pairs.len() < wanted {
            return Err(Error::Config(format!(
                "fault plan needs {wanted} chunk requests, corpus has {}",
                pairs.len()
            )));
        }
        for (i, (unit, p)) in pairs.iter().enumerate() {
            let status = if i < self.retryable {
                self.retryable_status
            } else {
                self.non_retryable_status
            };
            sched.insert(unit, *p, 1, status);
        }
        Ok(sched)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    /// 1-based pass the assertion reads.
    #[serde(default = "one")]
    pub pass: usize,
    pub metric: String,
    pub equals: Option<f64>,
    pub approx: Option<f64>,
    /// Relative tolerance for `approx`.
    #[serde(default)]
    pub rel_tol: f64,
    pub at_least: Option<f64>,
    pub at_most: Option<f64>,
}

impl Assertion {
    fn expectation(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.equals {
            parts.push(format!("== {v}"));
        }
        if let Some(v) = self.approx {
            parts.push(format!("~= {v} (rel {})", self.rel_tol));
        }
        if let Some(v) = self.at_least {
            parts.push(format!(">= {v}"));
        }
        if let Some(v) = self.at_most {
            parts.push(format!("<= {v}"));
        }
        parts.join(", ")
    }

    fn holds(&self, actual: f64) -> bool {
        self.equals.map_or(true, |v| actual == v)
            && self.approx.map_or(true, |v| (actual - v).abs() <= self.rel_tol * v.abs())
            && self.at_least.map_or(true, |v| actual >= v)
            && self.at_most.map_or(true, |v| actual <= v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub config: ConfigOverrides,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub faults: FaultPlan,
    /// Consecutive runs over the same output directory.
    #[serde(default = "one")]
    pub passes: usize,
    /// Documents, in discovery order, marked processed before the first pass.
    #[serde(default)]
    pub preindex: usize,
    #[serde(default, rename = "assert")]
    pub assertions: Vec<Assertion>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        if s.passes == 0 {
            return Err(Error::Config("scenario needs at least one pass".into()));
        }
        for a in &s.assertions {
            if a.pass == 0 || a.pass > s.passes {
                return Err(Error::Config(format!(
                    "assertion on {} reads pass {} of {}",
                    a.metric, a.pass, s.passes
                )));
            }
            if a.equals.is_none() && a.approx.is_none() && a.at_least.is_none() && a.at_most.is_none() {
                return Err(Error::Config(format!("assertion on {} states no bound", a.metric)));
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// A bundled scenario by name.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = BUILTIN_SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("no bundled scenario named {name:?}")))?;
        Self::parse(text)
    }

    pub fn run_config(&self) -> RunConfig {
        self.config.apply(RunConfig::default())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let mut spec = match &self.corpus {
            CorpusSource::ReferenceShape => CorpusSpec::reference_shape(self.seed),
            CorpusSource::Uniform {
                docs,
                pages,
                captions,
                facts,
            } => CorpusSpec::uniform(self.seed, *docs, *pages, *captions, *facts),
        };
        spec.max_pages = self.run_config().max_pages;
        spec
    }
}

/// Measurements of one pass.
#[derive(Debug, Clone)]
pub struct PassResult {
    pub report: RunReport,
    /// Smallest gap between consecutive granted dispatches, in seconds.
    pub min_dispatch_gap: Option<f64>,
    /// Digests of the deterministic artifacts, by relative path.
    pub digests: BTreeMap<String, String>,
}

impl PassResult {
    fn from_outcome(outcome: &RunOutcome, out: &Path) -> Result<Self> {
        let min_dispatch_gap = outcome
            .dispatch_times
            .windows(2)
            .map(|w| w[1].saturating_sub(w[0]).as_secs_f64())
            .reduce(f64::min);
        Ok(PassResult {
            report: outcome.report.clone(),
            min_dispatch_gap,
            digests: artifact_digests(out)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub pass: usize,
    pub metric: String,
    pub expectation: String,
    pub actual: Option<f64>,
    pub ok: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actual = self.actual.map_or("missing".to_string(), |v| format!("{v}"));
        write!(
            f,
            "{} pass {} {}: expected {}, got {actual}",
            if self.ok { "ok  " } else { "FAIL" },
            self.pass,
            self.metric,
            self.expectation
        )
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub manifest: Manifest,
    pub passes: Vec<PassResult>,
    pub checks: Vec<Check>,
    pub out_dir: PathBuf,
    pub corpus_dir: PathBuf,
}

impl ScenarioResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    /// Numeric value of a metric for a 1-based pass. Report fields are
    /// addressed by name; `min_dispatch_gap` and `artifacts_changed` are
    /// derived.
    pub fn metric(&self, pass: usize, name: &str) -> Option<f64> {
        let p = self.passes.get(pass.checked_sub(1)?)?;
        match name {
            "min_dispatch_gap" => p.min_dispatch_gap,
            "artifacts_changed" => {
                let prev = self.passes.get(pass.checked_sub(2)?)?;
                let keys: std::collections::BTreeSet<&String> = p.digests.keys().chain(prev.digests.keys()).collect();
                Some(keys.into_iter().filter(|k| p.digests.get(*k) != prev.digests.get(*k)).count() as f64)
            }
            "manifest_docs" => Some(self.manifest.documents.len() as f64),
            "manifest_units" => Some((self.manifest.total_chunks() + self.manifest.total_captions()) as f64),
            _ => serde_json::to_value(&p.report).ok()?.get(name)?.as_f64(),
        }
    }
}

impl fmt::Display for ScenarioResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}", self.name)?;
        for (i, p) in self.passes.iter().enumerate() {
            let r = &p.report;
            writeln!(
                f,
                "  pass {}: processed {} skipped {} requests {} retries {} errors {} failed {} rps {:.3} wall {:.1}s",
                i + 1,
                r.docs_processed,
                r.docs_skipped,
                r.requests_issued,
                r.retries,
                r.transient_errors,
                r.failed_units,
                r.observed_rps,
                r.wall_clock
            )?;
        }
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        write!(f, "  {}", if self.passed() { "PASSED" } else { "FAILED" })
    }
}

/// SHA-1 of every deterministic artifact under `out`: the study table,
/// aggregates, missingness, completeness and markdown files.
pub fn artifact_digests(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut digests = BTreeMap::new();
    let mut add = |path: &Path| -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/");
        let hex: String = Sha1::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        digests.insert(rel, hex);
        Ok(())
    };
    for name in ["studies.csv", "missingness.csv", "completeness.csv"] {
        let p = out.join(name);
        if p.exists() {
            add(&p)?;
        }
    }
    for dir in ["aggregates", "markdown"] {
        let root = out.join(dir);
        if !root.exists() {
            continue;
        }
        for entry in walkdir::WalkDir::new(&root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::io(&root, e.into()))?;
            if entry.file_type().is_file() {
                add(entry.path())?;
            }
        }
    }
    Ok(digests)
}

/// Runs a scenario inside the current runtime, which must have paused time.
pub async fn run_scenario_async(scenario: &Scenario, workdir: &Path) -> Result<ScenarioResult> {
    let schema = Arc::new(SchemaSet::bundled_doac());
    let config = scenario.run_config();
    let corpus_dir = workdir.join("corpus");
    let out_dir = workdir.join("out");
    let manifest = generate_corpus(&scenario.corpus_spec(), &corpus_dir, &schema)?;
    let faults = scenario.faults.schedule(&manifest, config.max_pages)?;
    let clock: Arc<dyn Clock> = Arc::new(TokioClock::simulated());

    if scenario.preindex > 0 {
        let layout = Layout::new(&out_dir);
        layout.create_dirs()?;
        let mut index = ProcessedIndex::open(layout.index())?;
        for doc in manifest.documents.iter().take(scenario.preindex) {
            let units = u64::from(doc.chunks) + doc.captions.len() as u64;
            index.mark_processed(IndexEntry::new(doc.source_key.clone(), clock.wall_time(), &schema.version, units))?;
        }
    }

    let output = OutputOptions::new(&out_dir);
    let mut passes = Vec::with_capacity(scenario.passes);
    for _ in 0..scenario.passes {
        let backend = MockBackend::new(scenario.seed, clock.clone())
            .with_faults(faults.clone())
            .with_latency(scenario.latency);
        let pipeline = Pipeline::new(config.clone(), schema.clone(), Arc::new(backend), clock.clone());
        let outcome = pipeline.run(&corpus_dir, &output).await?;
        passes.push(PassResult::from_outcome(&outcome, &out_dir)?);
    }

    let mut result = ScenarioResult {
        name: scenario.name.clone(),
        manifest,
        passes,
        checks: Vec::new(),
        out_dir,
        corpus_dir,
    };
    result.checks = scenario
        .assertions
        .iter()
        .map(|a| {
            let actual = result.metric(a.pass, &a.metric);
            Check {
                pass: a.pass,
                metric: a.metric.clone(),
                expectation: a.expectation(),
                ok: actual.is_some_and(|v| a.holds(v)),
                actual,
            }
        })
        .collect();
    Ok(result)
}

/// Runs a scenario on a fresh simulated-time runtime.
pub fn run_scenario(scenario: &Scenario, workdir: &Path) -> Result<ScenarioResult> {
    let rt = simulated_runtime().map_err(|e| Error::io(workdir, e))?;
    rt.block_on(run_scenario_async(scenario, workdir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for (name, _) in BUILTIN_SCENARIOS {
            let s = Scenario::builtin(name).unwrap();
            assert_eq!(&s.name, name);
            s.run_config().validate().unwrap();
            s.corpus_spec().validate().unwrap();
        }
        assert!(Scenario::builtin("nope").is_err());
    }

    #[test]
    fn rejects_unbounded_or_out_of_range_assertions() {
        let base = "name = \"x\"\nseed = 1\n[corpus]\nkind = \"uniform\"\ndocs = 1\npages = 1\n";
        assert!(Scenario::parse(&format!("{base}[[assert]]\nmetric = \"retries\"\n")).is_err());
        assert!(Scenario::parse(&format!("{base}[[assert]]\npass = 2\nmetric = \"retries\"\nequals = 0\n")).is_err());
        assert!(Scenario::parse(&format!("{base}[[assert]]\nmetric = \"retries\"\nequals = 0\n")).is_ok());
    }

    #[test]
    fn small_resume_scenario_runs() {
        let text = r#"
name = "tiny"
seed = 5
passes = 2
[corpus]
kind = "uniform"
docs = 3
pages = 10
captions = 1
[[assert]]
metric = "requests_issued"
equals = 45
[[assert]]
pass = 2
metric = "backend_calls"
equals = 0
[[assert]]
pass = 2
metric = "artifacts_changed"
equals = 0
"#;
        let s = Scenario::parse(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_scenario(&s, dir.path()).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.passes[1].report.docs_skipped, 3);
    }

    #[test]
    fn fault_plan_targets_first_pairs() {
        let set = SchemaSet::bundled_doac();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&CorpusSpec::uniform(1, 2, 3, 0, false), dir.path(), &set).unwrap();
        let plan = FaultPlan {
            retryable: 6,
            non_retryable: 2,
            ..Default::default()
        };
        let s = plan.schedule(&m, 8).unwrap();
        assert_eq!(s.len(), 8);
        let first = format!("{}:p0-3", m.documents[0].source_key);
        assert_eq!(s.lookup(&first, PayloadId::ALL[0], 1), Some(429));
        let second = format!("{}:p0-3", m.documents[1].source_key);
        assert_eq!(s.lookup(&second, PayloadId::ALL[0], 1), Some(429));
        assert_eq!(s.lookup(&second, PayloadId::ALL[1], 1), Some(400));
        let too_many = FaultPlan {
            retryable: 11,
            ..Default::default()
        };
        assert!(too_many.schedule(&m, 8).is_err());
    }
}
