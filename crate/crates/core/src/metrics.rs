//! Confusion counts and balanced accuracy for correct-vs-incorrect prediction.
//!
//! The positive class is "syntactically incorrect": sensitivity measures how
//! many incorrect images are caught, specificity how many correct images pass.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::Correctness;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("the {class} class is empty (no {role} samples); {rate} is undefined")]
    EmptyClass {
        class: &'static str,
        role: &'static str,
        rate: &'static str,
    },
    #[error("report needs at least one summary")]
    NoSummaries,
    #[error("rate {0} is outside [0, 1]")]
    InvalidRate(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
    /// Records with unknown ground truth, excluded from the four cells.
    #[serde(default)]
    pub unlabeled: u64,
}

impl ConfusionMatrix {
    /// Adds one prediction. `predicted_correct` is the checker's flag.
    pub fn record(&mut self, predicted_correct: bool, truth: Correctness) {
        match (truth, predicted_correct) {
            (Correctness::Incorrect, false) => self.tp += 1,
            (Correctness::Incorrect, true) => self.fn_ += 1,
            (Correctness::Correct, true) => self.tn += 1,
            (Correctness::Correct, false) => self.fp += 1,
            (Correctness::Unknown, _) => self.unlabeled += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            tp: self.tp * k,
            fn_: self.fn_ * k,
            tn: self.tn * k,
            fp: self.fp * k,
            unlabeled: self.unlabeled * k,
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            unlabeled: self.unlabeled + o.unlabeled,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Builds a matrix from `(predicted_correct, truth)` pairs.
pub fn accumulate<I>(records: I) -> ConfusionMatrix
where
    I: IntoIterator<Item = (bool, Correctness)>,
{
    let mut m = ConfusionMatrix::default();
    for (pred, truth) in records {
        m.record(pred, truth);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

impl MetricSummary {
    pub fn from_rates(sensitivity: f64, specificity: f64) -> Result<Self, MetricsError> {
        for r in [sensitivity, specificity] {
            if !(0.0..=1.0).contains(&r) {
                return Err(MetricsError::InvalidRate(r));
            }
        }
        Ok(Self {
            sensitivity,
            specificity,
            balanced_accuracy: (sensitivity + specificity) / 2.0,
        })
    }
}

pub fn summarize(m: &ConfusionMatrix) -> Result<MetricSummary, MetricsError> {
    if m.tp + m.fn_ == 0 {
        return Err(MetricsError::EmptyClass {
            class: "incorrect",
            role: "positive",
            rate: "sensitivity",
        });
    }
    if m.tn + m.fp == 0 {
        return Err(MetricsError::EmptyClass {
            class: "correct",
            role: "negative",
            rate: "specificity",
        });
    }
    MetricSummary::from_rates(
        m.tp as f64 / (m.tp + m.fn_) as f64,
        m.tn as f64 / (m.tn + m.fp) as f64,
    )
}

/// Metrics for one object class (or the overall row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<ConfusionMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<MetricSummary>,
    /// Why `summary` is absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricRow {
    pub fn from_counts(class: impl Into<String>, counts: ConfusionMatrix) -> Self {
        let (summary, note) = match summarize(&counts) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            class: class.into(),
            counts: Some(counts),
            summary,
            note,
        }
    }

    pub fn from_summary(class: impl Into<String>, summary: MetricSummary) -> Self {
        Self {
            class: class.into(),
            counts: None,
            summary: Some(summary),
            note: None,
        }
    }
}

/// Everything a report states about how the numbers were produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nms_original: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nms_reconstructed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_scenes: Vec<String>,
}

pub const REPORT_SCHEMA: &str = "vissyn-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub run: RunMetadata,
    pub classes: Vec<MetricRow>,
    pub overall: MetricRow,
    /// `pooled` when every class row has counts, otherwise `macro`.
    pub overall_method: String,
}

/// Builds a report from per-class rows. Rows are sorted by class name.
pub fn report(mut rows: Vec<MetricRow>, run: RunMetadata) -> Result<Report, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::NoSummaries);
    }
    rows.sort_by(|a, b| a.class.cmp(&b.class));
    let (overall, method) = if rows.iter().all(|r| r.counts.is_some()) {
        let pooled: ConfusionMatrix = rows.iter().filter_map(|r| r.counts).sum();
        (MetricRow::from_counts("overall", pooled), "pooled")
    } else {
        let sums: Vec<&MetricSummary> = rows.iter().filter_map(|r| r.summary.as_ref()).collect();
        let n = sums.len() as f64;
        let row = if sums.is_empty() {
            MetricRow {
                class: "overall".into(),
                counts: None,
                summary: None,
                note: Some("no class has defined rates".into()),
            }
        } else {
            let sens = sums.iter().map(|s| s.sensitivity).sum::<f64>() / n;
            let spec = sums.iter().map(|s| s.specificity).sum::<f64>() / n;
            MetricRow::from_summary("overall", MetricSummary::from_rates(sens, spec)?)
        };
        (row, "macro")
    };
    Ok(Report {
        schema: REPORT_SCHEMA.to_owned(),
        run,
        classes: rows,
        overall,
        overall_method: method.to_owned(),
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text table: counts, then rates as percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let r = &self.run;
        let mut meta = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{k:<18} {v}");
            }
        };
        meta("run", r.run_id.clone());
        meta("manifest sha256", r.manifest_sha256.clone());
        meta("backend", r.backend.clone());
        meta("masking", r.masking.clone());
        meta("mask ratio", r.mask_ratio.map(|v| format!("{v}")));
        meta("iou threshold", r.iou_threshold.map(|v| format!("{v}")));
        meta("nms original", r.nms_original.map(|v| format!("{v}")));
        meta("nms reconstructed", r.nms_reconstructed.map(|v| format!("{v}")));
        meta("patch size", r.patch_size.map(|v| v.to_string()));
        meta("seed", r.seed.map(|v| v.to_string()));
        meta("scenes", r.scenes.map(|v| v.to_string()));
        if !r.failed_scenes.is_empty() {
            let _ = writeln!(out, "{:<18} {}", "failed scenes", r.failed_scenes.join(", "));
        }
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
            "class", "TP", "FN", "TN", "FP", "sens%", "spec%", "bacc%"
        );
        for row in self.classes.iter().chain(std::iter::once(&self.overall)) {
            let c = |f: fn(&ConfusionMatrix) -> u64| {
                row.counts.as_ref().map_or("-".to_owned(), |m| f(m).to_string())
            };
            let p = |f: fn(&MetricSummary) -> f64| {
                row.summary
                    .as_ref()
                    .map_or("-".to_owned(), |s| format!("{:.2}", f(s) * 100.0))
            };
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
                row.class,
                c(|m| m.tp),
                c(|m| m.fn_),
                c(|m| m.tn),
                c(|m| m.fp),
                p(|s| s.sensitivity),
                p(|s| s.specificity),
                p(|s| s.balanced_accuracy),
            );
        }
        for row in self.classes.iter().chain(std::iter::once(&self.overall)) {
            if let Some(note) = &row.note {
                let _ = writeln!(out, "note ({}): {note}", row.class);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use Correctness::{Correct, Incorrect, Unknown};

    #[test]
    fn perfect_predictions() {
        let m = accumulate([(true, Correct), (false, Incorrect), (false, Incorrect)]);
        assert_eq!((m.fn_, m.fp), (0, 0));
        assert_eq!(summarize(&m).unwrap().balanced_accuracy, 1.0);
    }

    #[test]
    fn counting() {
        let recs = (0..10).map(|i| (i == 0, Incorrect));
        let m = accumulate(recs);
        assert_eq!((m.tp, m.fn_), (9, 1));
    }

    #[test]
    fn unknown_truth_is_tallied_separately() {
        let m = accumulate([(true, Unknown), (false, Unknown), (true, Correct)]);
        assert_eq!(m.unlabeled, 2);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn empty_matrix_cannot_be_summarized() {
        let m = accumulate(std::iter::empty());
        assert_eq!(m, ConfusionMatrix::default());
        assert!(summarize(&m).is_err());
    }

    #[test]
    fn all_correct_names_the_empty_class() {
        let m = accumulate([(true, Correct), (true, Correct)]);
        let err = summarize(&m).unwrap_err();
        assert!(err.to_string().contains("incorrect class is empty"), "{err}");
        let m = accumulate([(false, Incorrect)]);
        assert!(summarize(&m).unwrap_err().to_string().contains("correct class is empty"));
    }

    #[test]
    fn formula_arithmetic() {
        let m = ConfusionMatrix {
            tp: 9,
            fn_: 1,
            tn: 19,
            fp: 1,
            unlabeled: 0,
        };
        let s = summarize(&m).unwrap();
        assert!((s.sensitivity - 0.9).abs() < 1e-12);
        assert!((s.specificity - 0.95).abs() < 1e-12);
        assert!((s.balanced_accuracy - 0.925).abs() < 1e-12);
    }

    #[test]
    fn published_rate_pairs() {
        let face = MetricSummary::from_rates(0.867, 0.975).unwrap();
        let cat = MetricSummary::from_rates(0.907, 0.975).unwrap();
        assert_eq!(format!("{:.2}", face.balanced_accuracy * 100.0), "92.10");
        assert_eq!(format!("{:.2}", cat.balanced_accuracy * 100.0), "94.10");
    }

    #[test]
    fn scale_invariance() {
        let m = ConfusionMatrix {
            tp: 3,
            fn_: 4,
            tn: 11,
            fp: 2,
            unlabeled: 0,
        };
        for k in [2, 7, 1000] {
            assert_eq!(summarize(&m.scaled(k)).unwrap(), summarize(&m).unwrap());
        }
    }

    #[test]
    fn shards_merge() {
        let recs: Vec<(bool, Correctness)> = (0..40)
            .map(|i| (i % 3 == 0, if i % 4 == 0 { Incorrect } else { Correct }))
            .collect();
        let whole = accumulate(recs.iter().copied());
        let merged = accumulate(recs[..17].iter().copied()) + accumulate(recs[17..].iter().copied());
        assert_eq!(whole, merged);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(accumulate(rev), whole);
    }

    #[test]
    fn coin_flip_predictor_is_at_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let m = accumulate((0..10_000).map(|i| {
            let truth = if i % 6 == 0 { Incorrect } else { Correct };
            (rng.random_bool(0.5), truth)
        }));
        let ba = summarize(&m).unwrap().balanced_accuracy;
        assert!((ba - 0.5).abs() <= 0.02, "{ba}");
    }

    #[test]
    fn report_layout_is_stable() {
        let rows = vec![
            MetricRow::from_summary("wild", MetricSummary::from_rates(0.799, 0.955).unwrap()),
            MetricRow::from_summary("face", MetricSummary::from_rates(0.867, 0.975).unwrap()),
            MetricRow::from_summary("cat", MetricSummary::from_rates(0.907, 0.975).unwrap()),
        ];
        let r = report(rows.clone(), RunMetadata::default()).unwrap();
        assert_eq!(r.overall_method, "macro");
        let text = r.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("cat") && lines[1].ends_with("94.10"));
        assert!(lines[2].starts_with("face") && lines[2].ends_with("92.10"));
        assert!(lines[3].starts_with("wild") && lines[3].ends_with("87.70"));
        assert!(lines[4].starts_with("overall"));
        let again = report(rows, RunMetadata::default()).unwrap();
        assert_eq!(again.to_json(), r.to_json());
        assert_eq!(again.to_text(), text);
        assert!(matches!(report(vec![], RunMetadata::default()), Err(MetricsError::NoSummaries)));
    }

    #[test]
    fn pooled_overall_when_counts_known() {
        let a = ConfusionMatrix { tp: 1, fn_: 1, tn: 2, fp: 0, unlabeled: 0 };
        let b = ConfusionMatrix { tp: 3, fn_: 0, tn: 0, fp: 0, unlabeled: 0 };
        let r = report(
            vec![MetricRow::from_counts("x", a), MetricRow::from_counts("y", b)],
            RunMetadata::default(),
        )
        .unwrap();
        assert_eq!(r.overall_method, "pooled");
        assert_eq!(r.overall.counts, Some(a + b));
        assert!(r.classes[1].summary.is_none() && r.classes[1].note.is_some());
        assert!(r.to_json().contains("\"fn\": 1"));
    }
}
