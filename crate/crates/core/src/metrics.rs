//! Per-class confusion counts and the metrics derived from them.
//!
//! Predictions are decoded by argmax (ties go to the lowest class index).
//! Counts are summed over every pixel of every image before any ratio is
//! taken, then per-class values are macro-averaged.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// `num / den`, with `1` when the class is absent from both prediction and
/// truth and `0` for any other zero denominator.
fn defined_ratio(num: u64, den: u64, c: &ClassCounts) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        0.0
    }
}

impl ClassCounts {
    pub fn metrics(&self) -> ClassMetrics {
        let (tp, fp, fn_) = (self.tp, self.fp, self.fn_);
        let precision = defined_ratio(tp, tp + fp, self);
        let recall = defined_ratio(tp, tp + fn_, self);
        let f1 = f1_score(precision, recall);
        ClassMetrics {
            dice: defined_ratio(2 * tp, 2 * tp + fp + fn_, self),
            jaccard: defined_ratio(tp, tp + fp + fn_, self),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub const NAMES: [&'static str; 5] = ["dice", "jaccard", "precision", "recall", "f1"];

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.jaccard, self.precision, self.recall, self.f1]
    }

    fn mean(all: &[ClassMetrics]) -> ClassMetrics {
        let n = all.len() as f64;
        let mut m = ClassMetrics::default();
        for c in all {
            m.dice += c.dice / n;
            m.jaccard += c.jaccard / n;
            m.precision += c.precision / n;
            m.recall += c.recall / n;
            m.f1 += c.f1 / n;
        }
        m
    }
}

/// Confusion counts for `K` classes, accumulated over any number of batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, k: usize) -> &ClassCounts {
        &self.classes[k]
    }

    /// Adds a batch of probabilities and one-hot targets, both `[..., K]`.
    pub fn accumulate(&mut self, yhat: &Tensor, y: &Tensor) -> Result<()> {
        if yhat.shape() != y.shape() {
            return Err(Error::shape("confusion", y.shape(), yhat.shape()));
        }
        let k = self.classes.len();
        if yhat.channels() != k {
            return Err(Error::invalid(
                "confusion",
                format!("expected {k} classes, got {}", yhat.channels()),
            ));
        }
        for (p, t) in yhat.data().chunks(k).zip(y.data().chunks(k)) {
            let (pred, truth) = (argmax(p), argmax(t));
            for (c, counts) in self.classes.iter_mut().enumerate() {
                match (pred == c, truth == c) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => counts.tn += 1,
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let per_class: Vec<_> = self.classes.iter().map(ClassCounts::metrics).collect();
        MetricReport {
            macro_avg: ClassMetrics::mean(&per_class),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: ClassMetrics,
}

impl MetricReport {
    /// Plain-text table with one row per class and a macro row.
    pub fn table(&self, class_names: &[String]) -> String {
        self.to_string_with(class_names)
    }

    fn to_string_with(&self, names: &[String]) -> String {
        let width = names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}", "class");
        for n in ClassMetrics::NAMES {
            s.push_str(&format!(" {n:>9}"));
        }
        s.push('\n');
        let rows = self
            .per_class
            .iter()
            .enumerate()
            .map(|(i, m)| (names.get(i).cloned().unwrap_or_else(|| format!("class{i}")), m))
            .chain(std::iter::once(("macro".to_string(), &self.macro_avg)));
        for (name, m) in rows {
            s.push_str(&format!("{name:<width$}"));
            for v in m.values() {
                s.push_str(&format!(" {v:>9.4}"));
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_string_with(&[]))
    }
}
