//! Confusion matrices, classification metrics and wall-clock section timing.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k + predicted]
    }

    pub fn row(&self, actual: usize) -> &[u64] {
        &self.counts[actual * self.k..(actual + 1) * self.k]
    }

    pub fn add(&mut self, actual: usize, predicted: usize) -> Result<()> {
        for label in [actual, predicted] {
            if label >= self.k {
                return Err(Error::LabelOutOfRange { label, classes: self.k });
            }
        }
        self.counts[actual * self.k + predicted] += 1;
        Ok(())
    }

    /// Elementwise sum, used to combine shards scored independently.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Config(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&a| a != c).map(|a| self.get(a, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() - self.true_positives(c) - self.false_positives(c) - self.false_negatives(c)
    }

    /// Row-normalized fractions; an empty row stays all zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|a| {
                let row = self.row(a);
                let sum: u64 = row.iter().sum();
                row.iter().map(|&v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 }).collect()
            })
            .collect()
    }
}

pub fn confusion(actual: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![actual.len()],
            rhs: vec![predicted.len()],
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&a, &p) in actual.iter().zip(predicted) {
        cm.add(a, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when any of the three values came from a 0/0 division.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.k)
        .map(|c| {
            let tp = cm.true_positives(c) as f64;
            let fp = cm.false_positives(c) as f64;
            let fneg = cm.false_negatives(c) as f64;
            let mut degenerate = false;
            let precision = ratio(tp, tp + fp, &mut degenerate);
            let recall = ratio(tp, tp + fneg, &mut degenerate);
            let f1 = ratio(2.0 * precision * recall, precision + recall, &mut degenerate);
            ClassMetrics { precision, recall, f1, support: cm.row(c).iter().sum(), degenerate }
        })
        .collect();
    let k = cm.k as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let weighted = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
    })
}

/// Micro-averaged recall: pooled TP over pooled TP + FN.
pub fn micro_recall(cm: &ConfusionMatrix) -> f64 {
    let tp: u64 = (0..cm.k).map(|c| cm.true_positives(c)).sum();
    let fneg: u64 = (0..cm.k).map(|c| cm.false_negatives(c)).sum();
    tp as f64 / (tp + fneg) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionRecord {
    pub path: String,
    pub depth: usize,
    pub seconds: f64,
}

/// Records nested wall-clock sections in the order they are entered.
#[derive(Debug, Default)]
pub struct Timer {
    stack: Vec<(usize, Instant)>,
    records: Vec<SectionRecord>,
}

impl Timer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(&mut self, name: &str) {
        let path = match self.stack.last() {
            Some(&(parent, _)) => format!("{}/{name}", self.records[parent].path),
            None => name.to_string(),
        };
        self.records.push(SectionRecord { path, depth: self.stack.len(), seconds: 0.0 });
        self.stack.push((self.records.len() - 1, Instant::now()));
    }

    /// Closes the innermost open section and returns its elapsed seconds.
    pub fn stop(&mut self) -> Option<f64> {
        let (idx, t0) = self.stack.pop()?;
        let s = t0.elapsed().as_secs_f64();
        self.records[idx].seconds = s;
        Some(s)
    }

    pub fn section<R>(&mut self, name: &str, f: impl FnOnce(&mut Timer) -> R) -> R {
        self.start(name);
        let r = f(self);
        self.stop();
        r
    }

    pub fn records(&self) -> &[SectionRecord] {
        &self.records
    }

    /// Sum of all closed sections with this exact path.
    pub fn total(&self, path: &str) -> f64 {
        self.records.iter().filter(|r| r.path == path).map(|r| r.seconds).sum()
    }
}

/// Runs `f` and returns its result with the elapsed wall time.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t0 = Instant::now();
    let r = f();
    (r, t0.elapsed())
}
