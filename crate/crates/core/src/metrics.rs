//! Confusion matrices and support-weighted precision, recall and F1.

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// `counts[i][j]` = samples of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("confusion matrix needs >= 2 classes, got {classes}")));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
            total: 0,
        })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let mut cm = Self::new(counts.len())?;
        for (i, row) in counts.iter().enumerate() {
            if row.len() != cm.classes {
                return Err(Error::shape(&[cm.classes, cm.classes], &[i, row.len()], "confusion rows"));
            }
            for (j, &c) in row.iter().enumerate() {
                cm.counts[i * cm.classes + j] = c;
                cm.total += c;
            }
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, true_label: usize, pred_label: usize) -> u64 {
        self.counts[true_label * self.classes + pred_label]
    }

    pub fn accumulate(&mut self, true_label: usize, pred_label: usize) -> Result<()> {
        for label in [true_label, pred_label] {
            if label >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[true_label * self.classes + pred_label] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(|r| r.to_vec()).collect()
    }

    /// Per-class support, i.e. row sums.
    pub fn support(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    fn predicted(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// Row-normalized matrix; rows with no samples stay zero.
    pub fn normalize_rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.total == 0 {
            return Err(Error::Empty("confusion matrix"));
        }
        Ok(self
            .counts
            .chunks(self.classes)
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect())
    }

    pub fn compute_metrics(&self) -> Result<MetricReport> {
        if self.total == 0 {
            return Err(Error::Empty("confusion matrix"));
        }
        let tp: Vec<u64> = (0..self.classes).map(|i| self.get(i, i)).collect();
        Ok(MetricReport::from_tallies(&tp, &self.predicted(), &self.support()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub wprecision: f64,
    pub wrecall: f64,
    pub wf1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricReport {
    /// Aggregates from per-class true positives, predicted counts (TP+FP) and
    /// supports (TP+FN). Zero denominators yield zero.
    fn from_tallies(tp: &[u64], predicted: &[u64], support: &[u64]) -> Self {
        let n: u64 = support.iter().sum();
        let n = n as f64;
        let mut per_class = Vec::with_capacity(tp.len());
        let (mut correct, mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..tp.len() {
            let t = tp[i] as f64;
            let ni = support[i] as f64;
            let precision = ratio(t, predicted[i] as f64);
            let recall = ratio(t, ni);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            correct += t;
            wp += ni * precision;
            wr += ni * recall;
            wf += ni * f1;
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1,
            });
        }
        Self {
            accuracy: correct / n,
            wprecision: wp / n,
            wrecall: wr / n,
            wf1: wf / n,
            per_class,
        }
    }

    /// Flat JSON object: the four aggregates then `precision_class_i`,
    /// `recall_class_i` and `f1_class_i` for every class.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("accuracy".into(), self.accuracy.into());
        map.insert("wprecision".into(), self.wprecision.into());
        map.insert("wrecall".into(), self.wrecall.into());
        map.insert("wf1".into(), self.wf1.into());
        map.insert("classes".into(), self.per_class.len().into());
        for (i, c) in self.per_class.iter().enumerate() {
            map.insert(format!("precision_class_{i}"), c.precision.into());
            map.insert(format!("recall_class_{i}"), c.recall.into());
            map.insert(format!("f1_class_{i}"), c.f1.into());
        }
        Value::Object(map)
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    cm.compute_metrics()
}

pub fn normalize_rows(cm: &ConfusionMatrix) -> Result<Vec<Vec<f64>>> {
    cm.normalize_rows()
}

/// Computes the same report straight from label lists, without a confusion
/// matrix: one pass collects TP, predicted and support tallies per class, and
/// the aggregation uses different (algebraically equal) formulas.
pub fn per_sample_oracle(true_labels: &[usize], pred_labels: &[usize], classes: usize) -> Result<MetricReport> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::shape(&[true_labels.len()], &[pred_labels.len()], "label list lengths"));
    }
    if true_labels.is_empty() {
        return Err(Error::Empty("label lists"));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        if t >= classes || p >= classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes,
            });
        }
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    // Aggregate as support-fraction weighted means rather than weighted sums over N.
    let n = true_labels.len() as f64;
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|i| {
            let precision = frac(tp[i], predicted[i]);
            let recall = frac(tp[i], support[i]);
            let f1 = if tp[i] == 0 {
                0.0
            } else {
                // harmonic mean written via counts: 2TP / (2TP + FP + FN)
                2.0 * tp[i] as f64 / (predicted[i] + support[i]) as f64
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let weighted = |f: &dyn Fn(&ClassMetrics) -> f64| -> f64 {
        per_class
            .iter()
            .zip(&support)
            .map(|(c, &s)| (s as f64 / n) * f(c))
            .sum()
    };
    Ok(MetricReport {
        accuracy: true_labels.iter().zip(pred_labels).filter(|(t, p)| t == p).count() as f64 / n,
        wprecision: weighted(&|c| c.precision),
        wrecall: weighted(&|c| c.recall),
        wf1: weighted(&|c| c.f1),
        per_class,
    })
}

/// CSV with a header row of class labels; the first column holds the true label.
pub fn matrix_csv<T: std::fmt::Display>(rows: &[Vec<T>]) -> String {
    let m = rows.len();
    let mut out = String::from("true\\pred");
    for j in 0..m {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
