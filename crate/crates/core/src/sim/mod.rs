//! Deterministic harness: synthetic corpora, ground-truth manifests and
//! scenario runs under simulated time.

mod corpus;
mod pdf;
mod scenario;

pub use corpus::{
    generate_corpus, reference_shape, CaptionPlant, CorpusSpec, DocSpec, Effect, Fact, FactGroup, Manifest,
    ManifestDoc, Placement, CAPTIONS, FACTS, MANIFEST_FILE,
};
pub use pdf::write_pdf;
pub use scenario::{
    artifact_digests, run_scenario, run_scenario_async, Assertion, Check, ConfigOverrides, CorpusSource,
    FaultPlan, PassResult, Scenario, ScenarioResult, BUILTIN_SCENARIOS,
};

/// Single-threaded runtime with paused time: every sleep advances a virtual
/// clock instantly, so a run's timings depend only on its inputs.
pub fn simulated_runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
}
