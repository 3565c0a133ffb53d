//! Detection metrics: confusion counts, F1 / sensitivity / specificity, EER
//! and per-partition reports.
//!
//! The positive class is "fake"; a score at or above the threshold predicts
//! fake.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition axes a report can be broken down by.
pub const AXES: [&str; 4] = ["algorithm", "fake_type", "singer_seen", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::config(format!("unknown label {other:?}"))),
        }
    }
}

/// A scored example with its partition values (axis name -> value).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub id: String,
    /// P(fake).
    pub score: f64,
    pub label: Label,
    pub partitions: BTreeMap<String, String>,
}

impl ScoredExample {
    pub fn new(id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            id: id.into(),
            score,
            label,
            partitions: BTreeMap::new(),
        }
    }

    pub fn with(mut self, axis: &str, value: impl Into<String>) -> Self {
        self.partitions.insert(axis.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

pub fn confusion(examples: &[ScoredExample], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for e in examples {
        match (e.score >= threshold, e.label) {
            (true, Label::Fake) => c.tp += 1,
            (true, Label::Real) => c.fp += 1,
            (false, Label::Real) => c.tn += 1,
            (false, Label::Fake) => c.fn_ += 1,
        }
    }
    c
}

/// F1, sensitivity (TPR) and specificity (TNR).
///
/// A rate with an empty denominator is reported as 0 with its flag set, so
/// callers can tell "undefined" from "zero".
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1_undefined: bool,
    pub sensitivity_undefined: bool,
    pub specificity_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn f1_sens_spec(c: &Confusion) -> Rates {
    let (sensitivity, sensitivity_undefined) = ratio(c.tp, c.tp + c.fn_);
    let (specificity, specificity_undefined) = ratio(c.tn, c.tn + c.fp);
    let (f1, f1_undefined) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Rates {
        f1,
        sensitivity,
        specificity,
        f1_undefined,
        sensitivity_undefined,
        specificity_undefined,
    }
}

/// Equal error rate.
///
/// Thresholds sweep the distinct scores (ascending) plus `+inf`; FPR falls
/// from 1 to 0 while FNR rises from 0 to 1. The crossing is located between
/// the two adjacent thresholds where `FPR - FNR` changes sign and the rates
/// are linearly interpolated there.
pub fn eer(examples: &[ScoredExample]) -> Result<f64> {
    let n_pos = examples.iter().filter(|e| e.label.is_fake()).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "EER needs both classes ({n_pos} fake, {n_neg} real)"
        )));
    }
    if let Some(e) = examples.iter().find(|e| !e.score.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("score of {}", e.id),
        });
    }
    let mut sorted: Vec<(f64, bool)> = examples.iter().map(|e| (e.score, e.label.is_fake())).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // At threshold = lowest score every example is predicted fake.
    let (mut fp, mut fn_) = (n_neg, 0usize);
    let rates = |fp: usize, fn_: usize| (fp as f64 / n_neg as f64, fn_ as f64 / n_pos as f64);
    let mut prev = rates(fp, fn_);
    let mut i = 0;
    while i < sorted.len() {
        // Raise the threshold past every example sharing this score.
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                fn_ += 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let cur = rates(fp, fn_);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d0 == 0.0 {
            return Ok(prev.0);
        }
        if d1 <= 0.0 {
            let w = d0 / (d0 - d1);
            let fpr = prev.0 + w * (cur.0 - prev.0);
            let fnr = prev.1 + w * (cur.1 - prev.1);
            return Ok(0.5 * (fpr + fnr));
        }
        prev = cur;
    }
    unreachable!("FPR - FNR ends at -1")
}

/// Which rate is meaningful for a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Primary {
    /// Only fake examples: sensitivity.
    Sensitivity,
    /// Only real examples: specificity.
    Specificity,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionMetrics {
    pub axis: String,
    pub value: String,
    pub n_fake: usize,
    pub n_real: usize,
    pub confusion: Confusion,
    pub rates: Rates,
    pub eer: Option<f64>,
    pub primary: Primary,
}

impl PartitionMetrics {
    fn compute(axis: &str, value: &str, examples: &[ScoredExample], threshold: f64) -> Self {
        let confusion = confusion(examples, threshold);
        let n_fake = confusion.positives();
        let n_real = confusion.negatives();
        let primary = match (n_fake, n_real) {
            (_, 0) => Primary::Sensitivity,
            (0, _) => Primary::Specificity,
            _ => Primary::Both,
        };
        Self {
            axis: axis.to_string(),
            value: value.to_string(),
            n_fake,
            n_real,
            confusion,
            rates: f1_sens_spec(&confusion),
            eer: eer(examples).ok(),
            primary,
        }
    }

    pub fn support(&self) -> usize {
        self.n_fake + self.n_real
    }
}

/// Overall metrics plus one row per (axis, value).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub overall: PartitionMetrics,
    pub partitions: Vec<PartitionMetrics>,
}

pub fn partitioned_report(examples: &[ScoredExample], axes: &[&str], threshold: f64) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Empty("scored examples"));
    }
    if let Some(e) = examples.iter().find(|e| !e.score.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("score of {}", e.id),
        });
    }
    let mut partitions = Vec::new();
    for &axis in axes {
        if !AXES.contains(&axis) {
            return Err(Error::config(format!(
                "unknown partition axis {axis:?} (known: {})",
                AXES.join(", ")
            )));
        }
        let mut groups: BTreeMap<&str, Vec<ScoredExample>> = BTreeMap::new();
        for e in examples {
            let v = e
                .partitions
                .get(axis)
                .ok_or_else(|| Error::config(format!("example {} has no {axis:?} value", e.id)))?;
            groups.entry(v.as_str()).or_default().push(e.clone());
        }
        for (value, group) in groups {
            partitions.push(PartitionMetrics::compute(axis, value, &group, threshold));
        }
    }
    Ok(MetricReport {
        threshold,
        overall: PartitionMetrics::compute("overall", "all", examples, threshold),
        partitions,
    })
}

const CSV_HEADER: [&str; 13] = [
    "axis",
    "value",
    "n_fake",
    "n_real",
    "tp",
    "fp",
    "tn",
    "fn",
    "f1",
    "sensitivity",
    "specificity",
    "eer",
    "primary",
];

fn fmt_rate(v: f64, undefined: bool) -> String {
    if undefined {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    fn rows(&self) -> impl Iterator<Item = &PartitionMetrics> {
        std::iter::once(&self.overall).chain(&self.partitions)
    }

    /// One CSV row per partition; undefined values are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for p in self.rows() {
            let primary = serde_json::to_value(p.primary)?;
            w.write_record([
                p.axis.clone(),
                p.value.clone(),
                p.n_fake.to_string(),
                p.n_real.to_string(),
                p.confusion.tp.to_string(),
                p.confusion.fp.to_string(),
                p.confusion.tn.to_string(),
                p.confusion.fn_.to_string(),
                fmt_rate(p.rates.f1, p.rates.f1_undefined),
                fmt_rate(p.rates.sensitivity, p.rates.sensitivity_undefined),
                fmt_rate(p.rates.specificity, p.rates.specificity_undefined),
                p.eer.map(|e| format!("{e:.6}")).unwrap_or_default(),
                primary.as_str().unwrap_or_default().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threshold {:.3}", self.threshold);
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}",
            "axis", "value", "fake", "real", "F1", "sens", "spec", "EER"
        );
        let na = |v: f64, u: bool| if u { "-".to_string() } else { format!("{v:.4}") };
        for p in self.rows() {
            let _ = writeln!(
                s,
                "{:<12} {:<16} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}",
                p.axis,
                p.value,
                p.n_fake,
                p.n_real,
                na(p.rates.f1, p.rates.f1_undefined),
                na(p.rates.sensitivity, p.rates.sensitivity_undefined),
                na(p.rates.specificity, p.rates.specificity_undefined),
                p.eer.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into()),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(score: f64, fake: bool) -> ScoredExample {
        ScoredExample::new("x", score, if fake { Label::Fake } else { Label::Real })
    }

    #[test]
    fn hand_computed_rates() {
        let c = Confusion { tp: 8, fp: 2, tn: 6, fn_: 4 };
        let r = f1_sens_spec(&c);
        assert!((r.f1 - 16.0 / 22.0).abs() < 1e-12);
        assert!((r.sensitivity - 8.0 / 12.0).abs() < 1e-12);
        assert!((r.specificity - 6.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_flags() {
        let r = f1_sens_spec(&Confusion { tp: 0, fp: 1, tn: 3, fn_: 0 });
        assert!(r.sensitivity_undefined);
        assert!(!r.specificity_undefined);
        assert_eq!(r.specificity, 0.75);
    }

    #[test]
    fn eer_of_separable_scores_is_zero() {
        let xs = vec![ex(0.1, false), ex(0.2, false), ex(0.8, true), ex(0.9, true)];
        assert_eq!(eer(&xs).unwrap(), 0.0);
    }

    #[test]
    fn eer_of_inverted_scores_is_one() {
        let xs = vec![ex(0.9, false), ex(0.8, false), ex(0.2, true), ex(0.1, true)];
        assert_eq!(eer(&xs).unwrap(), 1.0);
    }

    #[test]
    fn eer_all_tied_is_half() {
        let xs = vec![ex(0.5, false), ex(0.5, true), ex(0.5, false), ex(0.5, true)];
        assert_eq!(eer(&xs).unwrap(), 0.5);
    }

    #[test]
    fn eer_needs_both_classes() {
        assert!(matches!(eer(&[ex(0.3, true)]), Err(Error::Metric(_))));
    }

    #[test]
    fn report_rejects_unknown_axis() {
        let xs = vec![ex(0.3, true).with("split", "test")];
        assert!(partitioned_report(&xs, &["colour"], 0.5).is_err());
    }

    #[test]
    fn report_support_sums_per_axis() {
        let xs: Vec<_> = (0..10)
            .map(|i| {
                ex(i as f64 / 10.0, i % 2 == 0)
                    .with("algorithm", if i < 4 { "a" } else { "b" })
                    .with("split", "test")
            })
            .collect();
        let r = partitioned_report(&xs, &["algorithm", "split"], 0.5).unwrap();
        for axis in ["algorithm", "split"] {
            let total: usize = r.partitions.iter().filter(|p| p.axis == axis).map(|p| p.support()).sum();
            assert_eq!(total, 10);
        }
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 1 + 3);
    }
}
