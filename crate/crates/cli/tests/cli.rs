use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use doclift::ingest::source_key;
use doclift::schema::derive_columns;
use doclift::SchemaSet;

fn doclift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doclift"))
        .args(args)
        .env_remove("DOCLIFT_CORPUS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The value printed after `label: ` in a run report.
fn field(report: &str, label: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{label}: ")))
        .unwrap_or_else(|| panic!("no {label} in\n{report}"))
        .to_string()
}

fn generate(dir: &Path, docs: &str, pages: &str) -> String {
    let corpus = dir.join("corpus");
    let corpus = corpus.to_str().unwrap();
    let o = doclift(&[
        "generate", "--corpus", corpus, "--shape", "uniform", "--docs", docs, "--pages", pages, "--captions", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    corpus.to_string()
}

#[test]
fn wilson_prints_rounded_percentages() {
    assert_eq!(stdout(&doclift(&["wilson", "50", "50"])), "92.9 100.0\n");
    assert_eq!(stdout(&doclift(&["wilson", "0", "50"])), "0.0 7.1\n");
    assert_eq!(doclift(&["wilson", "1", "0"]).status.code(), Some(2));
}

#[test]
fn run_help_lists_defaults() {
    let help = stdout(&doclift(&["run", "--help"]));
    for flag in ["--max-pages", "--concurrency", "--rps", "--retries", "--backoff-min", "--backoff-max"] {
        assert!(help.contains(flag), "{flag} missing");
    }
    for default in ["[default: 8]", "[default: 3]", "[default: 5]", "[default: 60]", "[default: out]"] {
        assert!(help.contains(default), "{default} missing");
    }
}

#[test]
fn schema_columns_match_derivation() {
    let printed = stdout(&doclift(&["schema", "--columns"]));
    let expected = derive_columns(&SchemaSet::bundled_doac()).join("\n") + "\n";
    assert_eq!(printed, expected);
    assert_eq!(doclift(&["schema", "--schema", "missing.v9"]).status.code(), Some(2));
}

#[test]
fn second_run_skips_everything_and_render_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(dir.path(), "2", "1");
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let first = doclift(&["run", "--corpus", &corpus, "--out", out]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let report = stdout(&first);
    assert_eq!(field(&report, "processed"), "2");
    assert_eq!(field(&report, "requests"), "10");

    let second = stdout(&doclift(&["run", "--corpus", &corpus, "--out", out]));
    assert_eq!(field(&second, "skipped"), "2");
    assert_eq!(field(&second, "backend calls"), "0");

    let studies = fs::read(Path::new(out).join("studies.csv")).unwrap();
    let render = doclift(&["render", "--corpus", &corpus, "--out", out]);
    assert!(render.status.success(), "{}", String::from_utf8_lossy(&render.stderr));
    let rendered = stdout(&render);
    assert_eq!(field(&rendered, "regenerated"), "2");
    assert_eq!(field(&rendered, "backend calls"), "0");
    assert_eq!(fs::read(Path::new(out).join("studies.csv")).unwrap(), studies);

    assert_eq!(stdout(&doclift(&["report", "--out", out])), rendered);
}

#[test]
fn aggregate_writes_strata() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(dir.path(), "2", "3");
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(doclift(&["run", "--corpus", &corpus, "--out", out_s]).status.success());
    let a = "population_indications.doac_molecules";
    let b = "methods.measurement_methods";
    let o = doclift(&["aggregate", "--out", out_s, "--strata", a, b, "--charts"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let strata = fs::read_to_string(out.join("aggregates").join(format!("strata.{a}__{b}.csv"))).unwrap();
    assert!(strata.starts_with(&format!("{a},{b},count")));
    assert!(out.join("missingness.csv").is_file());

    let bad = doclift(&["aggregate", "--out", out_s, "--strata", "nope.field", b]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn fault_schedule_fails_the_scripted_unit_only() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(dir.path(), "1", "1");
    let key = source_key("batch_00/study_0000.pdf");
    let schedule = dir.path().join("faults.txt");
    fs::write(&schedule, format!("{key}:p0-1 methods 1 400\n")).unwrap();
    let out = dir.path().join("out");
    let o = doclift(&[
        "run",
        "--corpus",
        &corpus,
        "--out",
        out.to_str().unwrap(),
        "--fault-schedule",
        schedule.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    assert_eq!(field(&report, "failed units"), "1");
    assert_eq!(field(&report, "errors"), "1");
    assert_eq!(field(&report, "processed"), "1");
    let studies = fs::read_to_string(out.join("studies.csv")).unwrap();
    assert!(studies.contains(&format!("{key}:p0-1")));
}

#[test]
fn scenario_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = doclift(&["scenario", "resume"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).trim_end().ends_with("PASSED"));

    let failing = dir.path().join("failing.toml");
    fs::write(
        &failing,
        "name = \"failing\"\nseed = 1\n[corpus]\nkind = \"uniform\"\ndocs = 1\npages = 1\n\
         [[assert]]\nmetric = \"retries\"\nequals = 1\n",
    )
    .unwrap();
    let o = doclift(&["scenario", failing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL pass 1 retries"));

    assert_eq!(doclift(&["scenario", "nope"]).status.code(), Some(2));
}
