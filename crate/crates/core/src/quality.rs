//! Rule-based transcription quality indicators and the Wilson score interval.
//!
//! The arithmetic is generic over the float type; the crate root exports
//! `f64` aliases.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FieldKind, FieldSpec, FieldValues, PayloadSchema, Value};

/// A line is an artifact when it holds a run of at least `min_run` identical
/// non-alphanumeric, non-whitespace characters, or when more than
/// `max_symbol_share` of its non-whitespace characters are non-alphanumeric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionThresholds {
    pub min_run: usize,
    pub max_symbol_share: f64,
}

impl Default for CorruptionThresholds {
    fn default() -> Self {
        CorruptionThresholds {
            min_run: 4,
            max_symbol_share: 0.40,
        }
    }
}

/// Structural sparsity cut: pages below this share of the corpus median
/// token count are flagged.
pub const SPARSE_PAGE_SHARE: f64 = 0.10;

pub fn is_artifact_line(line: &str, t: &CorruptionThresholds) -> bool {
    let mut run = 0usize;
    let mut prev: Option<char> = None;
    let mut symbols = 0usize;
    let mut visible = 0usize;
    for c in line.chars() {
        if c.is_whitespace() {
            prev = None;
            run = 0;
            continue;
        }
        visible += 1;
        if c.is_alphanumeric() {
            prev = None;
            run = 0;
            continue;
        }
        symbols += 1;
        run = if prev == Some(c) { run + 1 } else { 1 };
        prev = Some(c);
        if run >= t.min_run {
            return true;
        }
    }
    visible > 0 && symbols as f64 > t.max_symbol_share * visible as f64
}

/// Artifact and non-empty line counts; pools across pages of a document.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineTally {
    pub artifact: usize,
    pub nonempty: usize,
}

impl LineTally {
    pub fn of(text: &str, t: &CorruptionThresholds) -> Self {
        let mut tally = LineTally::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            tally.nonempty += 1;
            if is_artifact_line(line, t) {
                tally.artifact += 1;
            }
        }
        tally
    }

    pub fn add(&mut self, other: LineTally) {
        self.artifact += other.artifact;
        self.nonempty += other.nonempty;
    }

    /// Share of clean lines; 0 when there is no text at all.
    pub fn clean_fraction<T: Float>(&self) -> T {
        if self.nonempty == 0 {
            return T::zero();
        }
        T::one() - ratio(self.artifact, self.nonempty)
    }
}

fn ratio<T: Float>(num: usize, den: usize) -> T {
    T::from(num).expect("count fits float") / T::from(den).expect("count fits float")
}

/// Share of clean lines in `text` under default thresholds; empty text scores 0.
pub fn corruption_indicator<T: Float>(text: &str) -> T {
    LineTally::of(text, &CorruptionThresholds::default()).clean_fraction()
}

/// Passed and checked plausibility tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckTally {
    pub passed: usize,
    pub checked: usize,
}

impl CheckTally {
    pub fn add(&mut self, other: CheckTally) {
        self.passed += other.passed;
        self.checked += other.checked;
    }

    /// Vacuously 1 when nothing was checked.
    pub fn fraction<T: Float>(&self) -> T {
        if self.checked == 0 {
            T::one()
        } else {
            ratio(self.passed, self.checked)
        }
    }
}

/// Whether one field value passes its sanity rule; `None` when the field has
/// no rule applicable to this value.
pub fn check_value(field: &FieldSpec, value: &Value) -> Option<bool> {
    let rule = field.sanity.as_ref()?;
    match (field.kind, value) {
        (FieldKind::Integer | FieldKind::Real, v) => {
            let x = match v {
                Value::Integer(i) => *i as f64,
                Value::Real(r) => *r,
                _ => return Some(false),
            };
            let (lo, hi) = rule.range?;
            Some(x.is_finite() && lo <= x && x <= hi)
        }
        (_, Value::Text(s)) => rule.unit_pattern.as_ref().map(|re| re.is_match(s.trim())),
        (_, Value::List(items)) => {
            let re = rule.unit_pattern.as_ref()?;
            Some(items.iter().all(|s| re.is_match(s.trim())))
        }
        _ => None,
    }
}

/// Sanity checks over every ruled, non-null field of one payload's values.
pub fn numeric_sanity(payload: &PayloadSchema, values: &FieldValues) -> CheckTally {
    let mut tally = CheckTally::default();
    for field in &payload.fields {
        let Some(value) = values.get(&field.name) else {
            continue;
        };
        if let Some(ok) = check_value(field, value) {
            tally.checked += 1;
            tally.passed += usize::from(ok);
        }
    }
    tally
}

/// Share of pages whose token count reaches `SPARSE_PAGE_SHARE` of the
/// corpus median; 0 for a document without pages.
pub fn structural_completeness<T: Float>(page_tokens: &[usize], corpus_median: f64) -> T {
    if page_tokens.is_empty() {
        return T::zero();
    }
    let cut = SPARSE_PAGE_SHARE * corpus_median;
    let ok = page_tokens.iter().filter(|&&n| n as f64 >= cut).count();
    ratio(ok, page_tokens.len())
}

/// Median of token counts (mean of the middle pair for even lengths); 0 when empty.
pub fn median(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let mut v = counts.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] as f64 + v[m] as f64) / 2.0
    }
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityIndicators<T> {
    pub corruption: T,
    pub numeric_sanity: T,
    pub type_conformance: T,
    pub structural_completeness: T,
}

impl<T: Float> QualityIndicators<T> {
    pub fn components(&self) -> [T; 4] {
        [
            self.corruption,
            self.numeric_sanity,
            self.type_conformance,
            self.structural_completeness,
        ]
    }

    pub fn uniform(x: T) -> Self {
        QualityIndicators {
            corruption: x,
            numeric_sanity: x,
            type_conformance: x,
            structural_completeness: x,
        }
    }
}

/// Non-negative component weights summing to one, in indicator order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights<T>(pub [T; 4]);

impl<T: Float> Weights<T> {
    pub fn equal() -> Self {
        let q = T::one() / T::from(4).expect("small constant");
        Weights([q; 4])
    }

    pub fn validate(&self) -> Result<()> {
        let tol = T::from(1e-6).expect("small constant");
        if self.0.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::Config("quality weights must be finite and non-negative".into()));
        }
        let sum = self.0.iter().fold(T::zero(), |a, &w| a + w);
        if (sum - T::one()).abs() > tol {
            return Err(Error::Config("quality weights must sum to 1".into()));
        }
        Ok(())
    }
}

impl<T: Float> Default for Weights<T> {
    fn default() -> Self {
        Self::equal()
    }
}

/// Weighted sum of the components as a percentage in [0, 100].
pub fn proxy_score<T: Float>(ind: &QualityIndicators<T>, weights: &Weights<T>) -> Result<T> {
    weights.validate()?;
    let hundred = T::from(100).expect("small constant");
    let sum = ind
        .components()
        .iter()
        .zip(weights.0)
        .fold(T::zero(), |acc, (&c, w)| acc + w * c.max(T::zero()).min(T::one()));
    Ok((hundred * sum).max(T::zero()).min(hundred))
}

/// Wilson score interval for `successes` of `n` as unrounded proportions.
pub fn wilson_bounds<T: Float>(successes: u64, n: u64, z: T) -> Result<(T, T)> {
    if n == 0 {
        return Err(Error::InvalidArgument("wilson interval needs n > 0".into()));
    }
    if successes > n {
        return Err(Error::InvalidArgument(format!(
            "successes ({successes}) exceed trials ({n})"
        )));
    }
    if !z.is_finite() || z <= T::zero() {
        return Err(Error::InvalidArgument("critical value must be positive".into()));
    }
    let nf = T::from(n).expect("count fits float");
    let p = T::from(successes).expect("count fits float") / nf;
    let two = T::one() + T::one();
    let z2 = z * z;
    let denom = T::one() + z2 / nf;
    let center = (p + z2 / (two * nf)) / denom;
    let half = z * (p * (T::one() - p) / nf + z2 / (two * two * nf * nf)).sqrt() / denom;
    let lo = (center - half).max(T::zero());
    let hi = (center + half).min(T::one());
    Ok((lo, hi))
}

/// Wilson interval as percentages rounded to one decimal.
pub fn wilson_interval<T: Float>(successes: u64, n: u64, z: T) -> Result<(T, T)> {
    let (lo, hi) = wilson_bounds(successes, n, z)?;
    let thousand = T::from(1000).expect("small constant");
    let ten = T::from(10).expect("small constant");
    let pct = |x: T| (x * thousand).round() / ten;
    Ok((pct(lo), pct(hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_examples() {
        assert_eq!(corruption_indicator::<f64>("Plasma levels were measured.\nAll fine."), 1.0);
        assert_eq!(corruption_indicator::<f64>("####\n####\n"), 0.0);
        assert_eq!(corruption_indicator::<f64>(""), 0.0);
        let mut page: Vec<&str> = vec!["A clean line of text."; 8];
        page.push("~~~~ stray");
        page.push("%$#@!&*");
        assert_eq!(corruption_indicator::<f64>(&page.join("\n")), 0.8);
        assert!((corruption_indicator::<f32>(&page.join("\n")) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn artifact_rules() {
        let t = CorruptionThresholds::default();
        assert!(!is_artifact_line("Levels -- measured at peak --- and trough.", &t));
        assert!(is_artifact_line("a -- b --- c", &t));
        assert!(is_artifact_line("a ---- b", &t));
        assert!(is_artifact_line("--  --", &t));
        assert!(is_artifact_line("(a) [b] {c}", &t));
        assert!(!is_artifact_line("Measured by LC-MS/MS (n=12).", &t));
    }

    #[test]
    fn proxy_examples() {
        let w = Weights::<f64>::equal();
        assert_eq!(proxy_score(&QualityIndicators::uniform(1.0), &w).unwrap(), 100.0);
        assert_eq!(proxy_score(&QualityIndicators::uniform(0.0), &w).unwrap(), 0.0);
        let ind = QualityIndicators {
            corruption: 1.0,
            numeric_sanity: 1.0,
            type_conformance: 0.9,
            structural_completeness: 0.8,
        };
        assert!((proxy_score(&ind, &w).unwrap() - 92.5).abs() < 1e-12);
        assert!(proxy_score(&ind, &Weights([0.5, 0.5, 0.5, 0.0])).is_err());
        assert!(proxy_score(&ind, &Weights([1.5, -0.5, 0.0, 0.0])).is_err());
    }

    #[test]
    fn wilson_examples() {
        assert_eq!(wilson_interval(50, 50, 1.96).unwrap(), (92.9, 100.0));
        assert_eq!(wilson_interval(0, 50, 1.96).unwrap(), (0.0, 7.1));
        assert_eq!(wilson_interval(50, 50, 1.96f32).unwrap(), (92.9, 100.0));
        assert!(wilson_interval(0, 0, 1.96).is_err());
        assert!(wilson_interval(3, 2, 1.96).is_err());
    }

    #[test]
    fn median_and_structure() {
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[4, 1, 2, 3]), 2.5);
        assert_eq!(structural_completeness::<f64>(&[100, 5, 200, 150], 100.0), 0.75);
        assert_eq!(structural_completeness::<f64>(&[], 100.0), 0.0);
    }

    #[test]
    fn sanity_rules() {
        let set = crate::schema::SchemaSet::bundled_doac();
        let pop = set.payload(crate::schema::PayloadId::PopulationIndications);
        let out = set.payload(crate::schema::PayloadId::Outcomes);
        let mut v = FieldValues::new();
        v.insert("total_patients_with_levels".into(), Value::Integer(120));
        assert_eq!(numeric_sanity(pop, &v), CheckTally { passed: 1, checked: 1 });
        let mut v = FieldValues::new();
        v.insert("follow_up_duration".into(), Value::Text("\u{2212}3 months".into()));
        assert_eq!(numeric_sanity(out, &v), CheckTally { passed: 0, checked: 1 });
        assert_eq!(numeric_sanity(out, &FieldValues::new()).fraction::<f64>(), 1.0);
        let t = CheckTally { passed: 7, checked: 10 };
        assert_eq!(t.fraction::<f64>(), 0.7);
    }
}
