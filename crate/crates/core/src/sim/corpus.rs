//! Synthetic corpora with planted captions and field facts, plus the
//! ground-truth manifest the mock backend is expected to reproduce.
//!
//! Planted facts are fixed sentences whose effect on the record is written
//! out by hand in [`FACTS`]; the manifest folds those effects in reading
//! order. Filler prose uses a vocabulary that triggers no keyword rule and
//! never opens like a caption.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pdf::write_pdf;
use crate::error::{Error, Result};
use crate::ingest::{canonical_id, source_key, SourceKey};
use crate::schema::{FieldKind, SchemaSet, Value};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One planted consequence: `value` lands in `column`, and the fact's quoted
/// sentence lands in `evidence` when the field has an evidence partner.
#[derive(Debug, Clone, Copy)]
pub struct Effect {
    pub column: &'static str,
    pub value: &'static str,
    pub evidence: Option<&'static str>,
}

const fn eff(column: &'static str, value: &'static str) -> Effect {
    Effect {
        column,
        value,
        evidence: None,
    }
}

const fn evd(column: &'static str, value: &'static str, evidence: &'static str) -> Effect {
    Effect {
        column,
        value,
        evidence: Some(evidence),
    }
}

/// A plantable sentence. `{x}` in the sentence and in effect values is
/// replaced by a per-plant parameter. Effects are listed in the order the
/// keyword table fires them.
#[derive(Debug, Clone, Copy)]
pub struct Fact {
    pub id: &'static str,
    pub sentence: &'static str,
    pub effects: &'static [Effect],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactGroup {
    Meta,
    Population,
    Methods,
    Outcomes,
    Diagnostic,
}

const YEAR: &str = "meta_design.publication_year";
const MOL: &str = "population_indications.doac_molecules";
const IND: &str = "population_indications.anticoagulation_indications";
const IND_EV: &str = "population_indications.anticoagulation_indications_evidence";
const SUB: &str = "population_indications.subgroups";
const SUB_EV: &str = "population_indications.subgroups_evidence";
const LMI: &str = "population_indications.level_measurement_indications";
const LMI_EV: &str = "population_indications.level_measurement_indications_evidence";
const MM: &str = "methods.measurement_methods";
const MM_EV: &str = "methods.measurement_methods_evidence";
const PRE: &str = "methods.preanalytical_conditions";
const PRE_EV: &str = "methods.preanalytical_conditions_evidence";
const CT: &str = "methods.concurrent_tests";
const CT_EV: &str = "methods.concurrent_tests_evidence";
const ST: &str = "outcomes.sample_timing";
const ST_EV: &str = "outcomes.sample_timing_evidence";
const OD: &str = "outcomes.outcome_definitions";
const OD_EV: &str = "outcomes.outcome_definitions_evidence";
const OT: &str = "outcomes.outcome_types";
const DM: &str = "diagnostic_performance.diagnostic_metrics";
const DM_EV: &str = "diagnostic_performance.diagnostic_metrics_evidence";
const CM: &str = "diagnostic_performance.correlation_methods";

pub const FACTS: &[(FactGroup, Fact)] = {
    use FactGroup::*;
    &[
        (Meta, Fact { id: "year", sentence: "The study was published in {x}.", effects: &[eff(YEAR, "{x}")] }),
        (Meta, Fact {
            id: "prospective",
            sentence: "This was a prospective cohort of consecutive patients.",
            effects: &[evd("meta_design.study_design", "prospective cohort", "meta_design.study_design_evidence")],
        }),
        (Meta, Fact {
            id: "retrospective",
            sentence: "We conducted a retrospective cohort analysis.",
            effects: &[evd("meta_design.study_design", "retrospective cohort", "meta_design.study_design_evidence")],
        }),
        (Meta, Fact {
            id: "journal",
            sentence: "The work appeared in the journal Thrombosis Research.",
            effects: &[eff("meta_design.journal", "Thrombosis Research")],
        }),
        (Population, Fact {
            id: "total",
            sentence: "A total of {x} patients had drug levels measured.",
            effects: &[eff("population_indications.total_patients_with_levels", "{x}")],
        }),
        (Population, Fact {
            id: "apixaban_af",
            sentence: "Patients received apixaban for atrial fibrillation.",
            effects: &[eff(MOL, "Apixaban"), evd(IND, "atrial fibrillation", IND_EV)],
        }),
        (Population, Fact {
            id: "rivaroxaban_vte",
            sentence: "Rivaroxaban was prescribed after venous thromboembolism.",
            effects: &[eff(MOL, "Rivaroxaban"), evd(IND, "venous thromboembolism", IND_EV)],
        }),
        (Population, Fact {
            id: "dabigatran_ckd",
            sentence: "Dabigatran users with chronic kidney disease were included.",
            effects: &[eff(MOL, "Dabigatran"), evd(SUB, "CKD", SUB_EV)],
        }),
        (Population, Fact {
            id: "edoxaban_adherence",
            sentence: "Levels were drawn to confirm adherence in edoxaban users.",
            effects: &[eff(MOL, "Edoxaban"), evd(LMI, "confirm adherence", LMI_EV)],
        }),
        (Population, Fact {
            id: "urgent_surgery",
            sentence: "Testing was performed before urgent surgery.",
            effects: &[evd(LMI, "before urgent surgery", LMI_EV)],
        }),
        (Population, Fact {
            id: "bariatric",
            sentence: "Several patients had undergone bariatric surgery.",
            effects: &[evd(SUB, "bariatric surgery", SUB_EV)],
        }),
        (Methods, Fact {
            id: "lcms",
            sentence: "Plasma concentrations were quantified by LC-MS/MS.",
            effects: &[evd(MM, "LC-MS/MS", MM_EV)],
        }),
        (Methods, Fact {
            id: "anti_xa",
            sentence: "A calibrated anti-Xa assay was used for all samples.",
            effects: &[evd(MM, "calibrated anti-Xa", MM_EV)],
        }),
        (Methods, Fact {
            id: "tubes",
            sentence: "Samples were collected in citrate tubes and centrifuged twice.",
            effects: &[evd(PRE, "tube type", PRE_EV), evd(PRE, "centrifugation", PRE_EV)],
        }),
        (Methods, Fact {
            id: "frozen",
            sentence: "Aliquots were frozen until analysis.",
            effects: &[evd(PRE, "freezing", PRE_EV)],
        }),
        (Methods, Fact {
            id: "aptt",
            sentence: "The aPTT was recorded at baseline.",
            effects: &[evd(CT, "aPTT", CT_EV)],
        }),
        (Methods, Fact {
            id: "thrombin_generation",
            sentence: "Thrombin generation was assessed in a subset.",
            effects: &[evd(CT, "thrombin generation", CT_EV)],
        }),
        (Methods, Fact {
            id: "rotem",
            sentence: "Viscoelastic testing used ROTEM in the emergency department.",
            effects: &[evd(CT, "viscoelastic tests", CT_EV)],
        }),
        (Outcomes, Fact {
            id: "trough",
            sentence: "Blood was drawn at trough before the next dose.",
            effects: &[evd(ST, "trough", ST_EV)],
        }),
        (Outcomes, Fact {
            id: "peak",
            sentence: "Blood was drawn at peak two hours after intake.",
            effects: &[evd(ST, "peak", ST_EV)],
        }),
        (Outcomes, Fact {
            id: "threshold",
            sentence: "A {x} ng/mL threshold was applied.",
            effects: &[eff("outcomes.concentration_thresholds", "{x} ng/mL")],
        }),
        (Outcomes, Fact {
            id: "guided",
            sentence: "Management was threshold guided in all cases.",
            effects: &[evd("outcomes.thresholds_used_for_management", "yes", "outcomes.thresholds_evidence")],
        }),
        (Outcomes, Fact {
            id: "isth",
            sentence: "Bleeding was classified according to ISTH criteria.",
            effects: &[evd(OD, "ISTH", OD_EV)],
        }),
        (Outcomes, Fact {
            id: "major_bleeding",
            sentence: "Major bleeding occurred in three patients.",
            effects: &[eff(OT, "bleeding")],
        }),
        (Outcomes, Fact {
            id: "follow_up",
            sentence: "Patients were followed for {x} months.",
            effects: &[eff("outcomes.follow_up_duration", "{x} months")],
        }),
        (Outcomes, Fact {
            id: "barc",
            sentence: "Thromboembolic events were adjudicated using BARC definitions.",
            effects: &[evd(OD, "BARC", OD_EV), eff(OT, "thromboembolism")],
        }),
        (Diagnostic, Fact {
            id: "sens_spec",
            sentence: "Sensitivity and specificity were calculated for the 50 ng/mL cut.",
            effects: &[evd(DM, "sensitivity", DM_EV), evd(DM, "specificity", DM_EV)],
        }),
        (Diagnostic, Fact {
            id: "spearman_aptt",
            sentence: "Drug levels showed Spearman correlation with the aPTT.",
            effects: &[
                evd(CT, "aPTT", CT_EV),
                eff(CM, "Spearman"),
                eff("diagnostic_performance.comparator_assays", "aPTT"),
            ],
        }),
        (Diagnostic, Fact {
            id: "pearson",
            sentence: "Pearson coefficients were reported.",
            effects: &[eff(CM, "Pearson")],
        }),
    ]
};

/// Caption plants. A `Figure n.` label is split off as its own sentence, so
/// only the body is quoted; a `Table n:` caption is quoted whole.
#[derive(Debug, Clone, Copy)]
pub struct CaptionPlant {
    pub id: &'static str,
    pub figure: bool,
    pub body: &'static str,
    pub effects: &'static [Effect],
}

pub const CAPTIONS: &[CaptionPlant] = &[
    CaptionPlant {
        id: "fig_bleeding",
        figure: true,
        body: "Major bleeding per ISTH.",
        effects: &[evd(OD, "ISTH", OD_EV), eff(OT, "bleeding")],
    },
    CaptionPlant {
        id: "tab_anti_xa",
        figure: false,
        body: "Drug levels by calibrated anti-Xa assay.",
        effects: &[evd(MM, "calibrated anti-Xa", MM_EV)],
    },
    CaptionPlant {
        id: "fig_distribution",
        figure: true,
        body: "Distribution of plasma levels.",
        effects: &[],
    },
    CaptionPlant {
        id: "tab_baseline",
        figure: false,
        body: "Baseline characteristics.",
        effects: &[],
    },
];

impl CaptionPlant {
    pub fn text(&self, number: u32) -> String {
        if self.figure {
            format!("Figure {number}. {}", self.body)
        } else {
            format!("Table {number}: {}", self.body)
        }
    }

    /// The sentence the backend quotes as evidence.
    pub fn quoted(&self, number: u32) -> String {
        if self.figure {
            self.body.to_string()
        } else {
            self.text(number)
        }
    }
}

const SUBJECTS: &[&str] = &[
    "The cohort",
    "Participants",
    "Investigators",
    "The protocol",
    "Each center",
    "The analysis",
    "Clinicians",
    "The laboratory",
];
const VERBS: &[&str] = &["reviewed", "documented", "described", "summarized", "compared", "examined"];
const OBJECTS: &[&str] = &[
    "baseline characteristics",
    "clinical records",
    "demographic data",
    "medication histories",
    "renal function",
    "hospital stays",
    "dosing schedules",
    "laboratory workflows",
];
const TAILS: &[&str] = &["in detail", "across sites", "over time", "where available", "for each visit"];

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {} {}.",
        SUBJECTS.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap(),
        TAILS.choose(rng).unwrap()
    )
}

/// Shape of one synthetic document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSpec {
    pub pages: u32,
    pub captions: u32,
    /// Carry at least one population plant.
    pub population: bool,
    /// Plant two different publication years in different chunks. Needs
    /// more than one chunk.
    pub conflict: bool,
    /// Plant facts at all; without plants only filler and captions remain.
    pub facts: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Chunk size the conflict plants are placed against.
    pub max_pages: u32,
    pub docs: Vec<DocSpec>,
}

/// Aggregate shape of the reference corpus.
pub mod reference_shape {
    pub const DOCS: usize = 734;
    pub const PAGES: u32 = 7228;
    pub const CHUNKS: u32 = 978;
    pub const CAPTIONS: u32 = 824;
    pub const POPULATION_DOCS: usize = 672;
    pub const CONFLICT_DOCS: usize = 12;
    /// Documents split into one, two and three chunks of eight pages.
    pub const CHUNK_MIX: [(u32, usize); 3] = [(1, 500), (2, 224), (3, 10)];
}

impl CorpusSpec {
    /// 734 documents, 7228 pages, 978 chunks at eight pages per chunk, 824
    /// captions, 672 documents with population plants.
    pub fn reference_shape(seed: u64) -> Self {
        use reference_shape::*;
        let k = 8u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let mut chunks: Vec<u32> = CHUNK_MIX
            .iter()
            .flat_map(|&(c, n)| std::iter::repeat(c).take(n))
            .collect();
        chunks.shuffle(&mut rng);
        // Start every document at the top of its chunk band, then trim random
        // pages until the total matches; trims never cross a band floor.
        let mut pages: Vec<u32> = chunks.iter().map(|c| c * k).collect();
        let mut excess = pages.iter().sum::<u32>() - PAGES;
        while excess > 0 {
            let i = rng.gen_range(0..pages.len());
            let floor = (chunks[i] - 1) * k + 1;
            if pages[i] > floor {
                pages[i] -= 1;
                excess -= 1;
            }
        }
        let mut docs: Vec<DocSpec> = pages
            .iter()
            .map(|&p| DocSpec {
                pages: p,
                captions: 0,
                population: false,
                conflict: false,
                facts: true,
            })
            .collect();
        for _ in 0..CAPTIONS {
            let i = rng.gen_range(0..docs.len());
            docs[i].captions += 1;
        }
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..POPULATION_DOCS] {
            docs[i].population = true;
        }
        let multi: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].pages > k).collect();
        for &i in multi.choose_multiple(&mut rng, CONFLICT_DOCS) {
            docs[i].conflict = true;
        }
        CorpusSpec {
            seed,
            max_pages: k,
            docs,
        }
    }

    /// `docs` identical documents.
    pub fn uniform(seed: u64, docs: usize, pages: u32, captions: u32, facts: bool) -> Self {
        CorpusSpec {
            seed,
            max_pages: 8,
            docs: vec![
                DocSpec {
                    pages,
                    captions,
                    population: facts,
                    conflict: false,
                    facts,
                };
                docs
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_pages == 0 {
            return Err(Error::Config("corpus chunk size must be at least 1".into()));
        }
        for (i, d) in self.docs.iter().enumerate() {
            if d.pages == 0 {
                return Err(Error::Config(format!("document {i} has no pages")));
            }
            if d.conflict && d.pages <= self.max_pages {
                return Err(Error::Config(format!(
                    "document {i} needs more than {} pages for a conflict plant",
                    self.max_pages
                )));
            }
        }
        Ok(())
    }

    pub fn total_pages(&self) -> u64 {
        self.docs.iter().map(|d| u64::from(d.pages)).sum()
    }

    pub fn total_chunks(&self) -> u64 {
        self.docs
            .iter()
            .map(|d| u64::from(d.pages.div_ceil(self.max_pages)))
            .sum()
    }

    pub fn total_captions(&self) -> u64 {
        self.docs.iter().map(|d| u64::from(d.captions)).sum()
    }
}

/// A placed plant: fact sentence or caption, with its location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub plant: String,
    pub page: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDoc {
    /// Path relative to the corpus root.
    pub file: String,
    pub canonical_id: String,
    pub source_key: SourceKey,
    pub pages: u32,
    pub chunks: u32,
    pub population_planted: bool,
    /// Plants in reading order.
    pub placements: Vec<Placement>,
    pub captions: Vec<Placement>,
    /// Qualified column to value; fields absent here must be null.
    pub expected: BTreeMap<String, Value>,
    /// Qualified evidence column to quoted sentences in reading order.
    pub evidence: BTreeMap<String, Vec<String>>,
    /// Qualified columns expected to carry a conflict flag.
    pub conflicts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub max_pages: u32,
    pub schema_version: String,
    pub documents: Vec<ManifestDoc>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn doc(&self, key: &SourceKey) -> Option<&ManifestDoc> {
        self.documents.iter().find(|d| &d.source_key == key)
    }

    pub fn total_pages(&self) -> u64 {
        self.documents.iter().map(|d| u64::from(d.pages)).sum()
    }

    pub fn total_chunks(&self) -> u64 {
        self.documents.iter().map(|d| u64::from(d.chunks)).sum()
    }

    pub fn total_captions(&self) -> u64 {
        self.documents.iter().map(|d| d.captions.len() as u64).sum()
    }

    /// Documents with at least one expected value in `payload`.
    pub fn docs_with_payload(&self, payload: &str) -> usize {
        let prefix = format!("{payload}.");
        self.documents
            .iter()
            .filter(|d| {
                d.expected.keys().any(|k| k.starts_with(&prefix))
                    || d.evidence.keys().any(|k| k.starts_with(&prefix))
            })
            .count()
    }

    /// Planted per-study counts for one field, as frequency tables report them.
    pub fn value_counts(&self, column: &str) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.documents {
            let items: BTreeSet<String> = d
                .expected
                .get(column)
                .map(|v| v.items().into_iter().collect())
                .unwrap_or_default();
            for i in items {
                *counts.entry(i).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Folds effects into expected values, the way a faithful extraction merges
/// them: scalars keep one value or become conflicts, lists and evidence
/// accumulate distinct items in reading order.
#[derive(Default)]
struct Expectation {
    scalars: BTreeMap<String, Vec<String>>,
    lists: BTreeMap<String, Vec<String>>,
    evidence: BTreeMap<String, Vec<String>>,
}

impl Expectation {
    fn apply(&mut self, set: &SchemaSet, effects: &[Effect], param: &str, quoted: &str) -> Result<()> {
        for e in effects {
            let kind = column_kind(set, e.column)?;
            let value = e.value.replace("{x}", param);
            let slot = if kind.is_list() {
                self.lists.entry(e.column.to_string()).or_default()
            } else {
                self.scalars.entry(e.column.to_string()).or_default()
            };
            if !slot.contains(&value) {
                slot.push(value);
            }
            if let Some(ev) = e.evidence {
                let list = self.evidence.entry(ev.to_string()).or_default();
                if !list.iter().any(|s| s == quoted) {
                    list.push(quoted.to_string());
                }
            }
        }
        Ok(())
    }

    fn finish(self, set: &SchemaSet) -> Result<(BTreeMap<String, Value>, BTreeMap<String, Vec<String>>, Vec<String>)> {
        let mut expected = BTreeMap::new();
        let mut conflicts = Vec::new();
        for (col, vals) in self.scalars {
            if vals.len() > 1 {
                conflicts.push(col);
                continue;
            }
            let v = &vals[0];
            let value = match column_kind(set, &col)? {
                FieldKind::Integer => Value::Integer(
                    v.parse()
                        .map_err(|_| Error::Config(format!("planted {col} is not an integer: {v}")))?,
                ),
                FieldKind::Real => Value::Real(
                    v.parse()
                        .map_err(|_| Error::Config(format!("planted {col} is not a number: {v}")))?,
                ),
                _ => Value::Text(v.clone()),
            };
            expected.insert(col, value);
        }
        for (col, vals) in self.lists {
            expected.insert(col, Value::List(vals));
        }
        Ok((expected, self.evidence, conflicts))
    }
}

fn column_kind(set: &SchemaSet, column: &str) -> Result<FieldKind> {
    let (payload, field) = column
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("bad column {column}")))?;
    set.payloads()
        .iter()
        .find(|p| p.id.as_str() == payload)
        .and_then(|p| p.field(field))
        .map(|f| f.kind)
        .ok_or_else(|| Error::Config(format!("plant targets unknown column {column}")))
}

fn fact(id: &str) -> &'static Fact {
    &FACTS.iter().find(|(_, f)| f.id == id).expect("fact id").1
}

fn group_facts(group: FactGroup) -> Vec<&'static Fact> {
    FACTS.iter().filter(|(g, _)| *g == group).map(|(_, f)| f).collect()
}

fn param_for(id: &str, rng: &mut ChaCha8Rng) -> String {
    match id {
        "year" => rng.gen_range(2005..=2024).to_string(),
        "total" => rng.gen_range(12..=900).to_string(),
        "threshold" => [30, 50, 75, 100].choose(rng).unwrap().to_string(),
        "follow_up" => rng.gen_range(1..=24).to_string(),
        _ => String::new(),
    }
}

/// A planned plant before layout: (fact, parameter, page).
struct Planned {
    fact: &'static Fact,
    param: String,
    page: u32,
}

fn plan_facts(spec: &DocSpec, k: u32, rng: &mut ChaCha8Rng) -> Vec<Planned> {
    let mut out = Vec::new();
    let any_page = |rng: &mut ChaCha8Rng| rng.gen_range(0..spec.pages);
    if spec.conflict {
        let a = rng.gen_range(2005..=2014);
        let b = rng.gen_range(2015..=2024);
        out.push(Planned {
            fact: fact("year"),
            param: a.to_string(),
            page: rng.gen_range(0..k.min(spec.pages)),
        });
        out.push(Planned {
            fact: fact("year"),
            param: b.to_string(),
            page: rng.gen_range(k..spec.pages),
        });
    }
    if !spec.facts {
        return out;
    }
    let pick = |f: &'static Fact, rng: &mut ChaCha8Rng, out: &mut Vec<Planned>| {
        let param = param_for(f.id, rng);
        let page = any_page(rng);
        out.push(Planned { fact: f, param, page });
    };
    if !spec.conflict {
        pick(fact("year"), rng, &mut out);
    }
    if rng.gen_bool(0.6) {
        let f = if rng.gen_bool(0.5) { "prospective" } else { "retrospective" };
        pick(fact(f), rng, &mut out);
    }
    if rng.gen_bool(0.5) {
        pick(fact("journal"), rng, &mut out);
    }
    let mut apixaban = false;
    if spec.population {
        if rng.gen_bool(0.7) {
            pick(fact("total"), rng, &mut out);
        }
        let others: Vec<&Fact> = group_facts(FactGroup::Population)
            .into_iter()
            .filter(|f| f.id != "total")
            .collect();
        let n = rng.gen_range(1..=3);
        for f in others.choose_multiple(rng, n) {
            apixaban |= f.id == "apixaban_af";
            pick(f, rng, &mut out);
        }
    }
    let mut methods: Vec<&Fact> = Vec::new();
    if apixaban && rng.gen_bool(0.8) {
        methods.push(fact("anti_xa"));
    }
    if rng.gen_bool(0.8) {
        let n = rng.gen_range(1..=3);
        for f in group_facts(FactGroup::Methods).choose_multiple(rng, n) {
            if !methods.iter().any(|m| m.id == f.id) {
                methods.push(f);
            }
        }
    }
    for f in methods {
        pick(f, rng, &mut out);
    }
    if rng.gen_bool(0.75) {
        let n = rng.gen_range(1..=3);
        for f in group_facts(FactGroup::Outcomes).choose_multiple(rng, n) {
            pick(f, rng, &mut out);
        }
    }
    if rng.gen_bool(0.4) {
        let n = rng.gen_range(1..=2);
        for f in group_facts(FactGroup::Diagnostic).choose_multiple(rng, n) {
            pick(f, rng, &mut out);
        }
    }
    out
}

/// Breaks a paragraph into lines of at most ~88 characters at spaces.
fn wrap(paragraph: &str) -> Vec<String> {
    let mut lines = Vec::new();
    let mut line = String::new();
    for word in paragraph.split(' ') {
        if !line.is_empty() && line.len() + 1 + word.len() > 88 {
            lines.push(std::mem::take(&mut line));
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(word);
    }
    if !line.is_empty() {
        lines.push(line);
    }
    lines
}

/// A page under construction: paragraphs of sentences, with fact and caption
/// tags carried alongside for the reading-order fold.
#[derive(Default)]
struct PageDraft {
    paragraphs: Vec<Vec<(String, Option<Tag>)>>,
}

#[derive(Clone)]
enum Tag {
    Fact(&'static Fact, String),
    Caption(&'static CaptionPlant, u32),
}

fn file_name(i: usize) -> String {
    format!("batch_{:02}/study_{i:04}.pdf", i / 100)
}

/// Builds one document: returns PDF bytes and its manifest entry.
fn build_document(index: usize, spec: &DocSpec, corpus: &CorpusSpec, set: &SchemaSet) -> Result<(Vec<u8>, ManifestDoc)> {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let mut drafts: Vec<PageDraft> = (0..spec.pages)
        .map(|_| {
            let paras = rng.gen_range(2..=4);
            PageDraft {
                paragraphs: (0..paras)
                    .map(|_| {
                        let n = rng.gen_range(2..=4);
                        (0..n).map(|_| (filler_sentence(&mut rng), None)).collect()
                    })
                    .collect(),
            }
        })
        .collect();

    for p in plan_facts(spec, corpus.max_pages, &mut rng) {
        let draft = &mut drafts[p.page as usize];
        let para = rng.gen_range(0..draft.paragraphs.len());
        let sentences = &mut draft.paragraphs[para];
        // Captions are whole paragraphs; facts only join filler paragraphs.
        let at = rng.gen_range(0..=sentences.len());
        let text = p.fact.sentence.replace("{x}", &p.param);
        sentences.insert(at, (text, Some(Tag::Fact(p.fact, p.param))));
    }
    let mut caption_pages: Vec<u32> = (0..spec.captions).map(|_| rng.gen_range(0..spec.pages)).collect();
    caption_pages.sort_unstable();
    let (mut figures, mut tables) = (0u32, 0u32);
    for page in caption_pages {
        let plant = CAPTIONS.choose(&mut rng).unwrap();
        let number = if plant.figure {
            figures += 1;
            figures
        } else {
            tables += 1;
            tables
        };
        let draft = &mut drafts[page as usize];
        // Keep captions in numbering order on the page: append after the
        // last paragraph holding an earlier caption.
        let last_caption = draft
            .paragraphs
            .iter()
            .rposition(|p| matches!(p.first(), Some((_, Some(Tag::Caption(..))))))
            .map_or(0, |i| i + 1);
        let at = rng.gen_range(last_caption..=draft.paragraphs.len());
        draft
            .paragraphs
            .insert(at, vec![(plant.text(number), Some(Tag::Caption(plant, number)))]);
    }

    let mut fold = Expectation::default();
    let mut placements = Vec::new();
    let mut captions = Vec::new();
    let mut pages_lines = Vec::with_capacity(drafts.len());
    for (page, draft) in drafts.iter().enumerate() {
        let mut lines = Vec::new();
        for (pi, para) in draft.paragraphs.iter().enumerate() {
            if pi > 0 {
                lines.push(String::new());
            }
            let text: Vec<&str> = para.iter().map(|(s, _)| s.as_str()).collect();
            lines.extend(wrap(&text.join(" ")));
            for (sentence, tag) in para {
                match tag {
                    Some(Tag::Fact(f, param)) => {
                        fold.apply(set, f.effects, param, sentence)?;
                        placements.push(Placement {
                            plant: f.id.to_string(),
                            page: page as u32,
                            text: sentence.clone(),
                        });
                    }
                    Some(Tag::Caption(c, n)) => {
                        fold.apply(set, c.effects, "", &c.quoted(*n))?;
                        captions.push(Placement {
                            plant: c.id.to_string(),
                            page: page as u32,
                            text: sentence.clone(),
                        });
                    }
                    None => {}
                }
            }
        }
        pages_lines.push(lines);
    }
    let (expected, evidence, conflicts) = fold.finish(set)?;
    let file = file_name(index);
    let canonical = canonical_id(&file)?;
    let doc = ManifestDoc {
        source_key: source_key(&canonical),
        canonical_id: canonical,
        file,
        pages: spec.pages,
        chunks: spec.pages.div_ceil(corpus.max_pages),
        population_planted: expected.keys().chain(evidence.keys()).any(|k| k.starts_with("population_indications.")),
        placements,
        captions,
        expected,
        evidence,
        conflicts,
    };
    Ok((write_pdf(&pages_lines), doc))
}

/// Writes the corpus PDFs and `manifest.json` under `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path, set: &SchemaSet) -> Result<Manifest> {
    spec.validate()?;
    let mut documents = Vec::with_capacity(spec.docs.len());
    for (i, d) in spec.docs.iter().enumerate() {
        let (bytes, doc) = build_document(i, d, spec, set)?;
        let path: PathBuf = dir.join(&doc.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        documents.push(doc);
    }
    documents.sort_by(|a, b| a.canonical_id.cmp(&b.canonical_id));
    let manifest = Manifest {
        seed: spec.seed,
        max_pages: spec.max_pages,
        schema_version: set.version.clone(),
        documents,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::KeywordTable;
    use crate::chunking::is_caption;
    use crate::schema::PayloadId;

    /// Every fact and caption fires exactly its listed effects.
    #[test]
    fn keyword_table_reproduces_catalog_effects() {
        let set = SchemaSet::bundled_doac();
        let table = KeywordTable::bundled();
        let check = |paragraph: &str, effects: &[Effect], param: &str, quoted: &str| {
            let mut want = Expectation::default();
            want.apply(&set, effects, param, quoted).unwrap();
            let (expected, evidence, _) = want.finish(&set).unwrap();
            for p in set.payloads() {
                let raw = table.extract(p, [paragraph]);
                for (field, json) in &raw {
                    let col = format!("{}.{field}", p.id);
                    let got: Value = serde_json::from_value(json.clone()).unwrap();
                    let spec = p.field(field).unwrap();
                    if spec.kind == FieldKind::EvidenceText {
                        assert_eq!(Some(&got.items()), evidence.get(&col), "{paragraph}: {col}");
                    } else {
                        assert_eq!(Some(&got), expected.get(&col), "{paragraph}: {col}");
                    }
                }
                let fired = raw.len();
                let wanted = expected.keys().chain(evidence.keys()).filter(|k| k.starts_with(&format!("{}.", p.id))).count();
                assert_eq!(fired, wanted, "{paragraph}: payload {}", p.id);
            }
        };
        for (_, f) in FACTS {
            let param = match f.id {
                "year" => "2019",
                "total" => "120",
                "threshold" => "50",
                "follow_up" => "6",
                _ => "",
            };
            let s = f.sentence.replace("{x}", param);
            check(&s, f.effects, param, &s);
        }
        for c in CAPTIONS {
            assert!(is_caption(&c.text(12)));
            check(&c.text(12), c.effects, "", &c.quoted(12));
        }
    }

    #[test]
    fn filler_triggers_nothing() {
        let set = SchemaSet::bundled_doac();
        let table = KeywordTable::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let s = filler_sentence(&mut rng);
            assert!(!is_caption(&s));
            for p in PayloadId::ALL {
                assert!(table.extract(set.payload(p), [s.as_str()]).is_empty(), "{s}");
            }
        }
    }

    #[test]
    fn reference_shape_totals() {
        let spec = CorpusSpec::reference_shape(7);
        assert_eq!(spec.docs.len(), reference_shape::DOCS);
        assert_eq!(spec.total_pages(), u64::from(reference_shape::PAGES));
        assert_eq!(spec.total_chunks(), u64::from(reference_shape::CHUNKS));
        assert_eq!(spec.total_captions(), u64::from(reference_shape::CAPTIONS));
        assert_eq!(spec.docs.iter().filter(|d| d.population).count(), reference_shape::POPULATION_DOCS);
        spec.validate().unwrap();
        assert_eq!(spec, CorpusSpec::reference_shape(7));
    }

    #[test]
    fn single_page_document_and_determinism() {
        let set = SchemaSet::bundled_doac();
        let spec = CorpusSpec::uniform(3, 1, 1, 1, true);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m1 = generate_corpus(&spec, a.path(), &set).unwrap();
        let m2 = generate_corpus(&spec, b.path(), &set).unwrap();
        assert_eq!(m1, m2);
        let doc = &m1.documents[0];
        let bytes = fs::read(a.path().join(&doc.file)).unwrap();
        assert_eq!(crate::ingest::page_count(&bytes).unwrap(), 1);
        assert_eq!(bytes, fs::read(b.path().join(&doc.file)).unwrap());
        assert!(doc.expected.contains_key(YEAR));
        assert_eq!(doc.captions.len(), 1);
    }

    #[test]
    fn conflict_plants_yield_conflicts() {
        let set = SchemaSet::bundled_doac();
        let spec = CorpusSpec {
            seed: 1,
            max_pages: 8,
            docs: vec![DocSpec {
                pages: 12,
                captions: 0,
                population: false,
                conflict: true,
                facts: false,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&spec, dir.path(), &set).unwrap();
        assert_eq!(m.documents[0].conflicts, vec![YEAR.to_string()]);
        assert!(!m.documents[0].expected.contains_key(YEAR));
        let bad = CorpusSpec {
            docs: vec![DocSpec { pages: 8, ..spec.docs[0].clone() }],
            ..spec
        };
        assert!(bad.validate().is_err());
    }
}
