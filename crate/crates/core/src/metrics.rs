//! Accuracy, macro recall and macro F1 from a confusion matrix.
//!
//! Macro averages run over the classes that occur in the ground truth
//! (nonzero row sum); classes absent from the evaluated labels are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major, rows = true class, columns = predicted class.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for class in [truth, pred] {
            if class >= self.num_classes {
                return Err(Error::ClassOutOfRange {
                    class,
                    num_classes: self.num_classes,
                });
            }
        }
        self.counts[truth * self.num_classes + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::DimensionMismatch {
                left: self.num_classes,
                right: other.num_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    fn present(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes).filter(|&c| self.row_sum(c) > 0)
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::EmptyBatch(
                "metrics need at least one evaluated example",
            ));
        }
        Ok(())
    }

    pub fn recall(&self, c: usize) -> f64 {
        let rows = self.row_sum(c);
        if rows == 0 {
            0.0
        } else {
            self.get(c, c) as f64 / rows as f64
        }
    }

    pub fn precision(&self, c: usize) -> f64 {
        let cols = self.col_sum(c);
        if cols == 0 {
            0.0
        } else {
            self.get(c, c) as f64 / cols as f64
        }
    }

    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn accumulate(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let trace: u64 = (0..cm.num_classes).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / cm.total() as f64)
}

fn macro_mean(cm: &ConfusionMatrix, per_class: impl Fn(usize) -> f64) -> Result<f64> {
    cm.nonempty()?;
    let (sum, n) = cm
        .present()
        .fold((0.0, 0usize), |(s, n), c| (s + per_class(c), n + 1));
    Ok(sum / n as f64)
}

pub fn macro_recall(cm: &ConfusionMatrix) -> Result<f64> {
    macro_mean(cm, |c| cm.recall(c))
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    macro_mean(cm, |c| cm.f1(c))
}

/// The three headline numbers for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl Scores {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Scores {
            accuracy: accuracy(cm)?,
            macro_recall: macro_recall(cm)?,
            macro_f1: macro_f1(cm)?,
        })
    }

    pub fn mean(all: &[Scores]) -> Scores {
        let n = all.len().max(1) as f64;
        Scores {
            accuracy: all.iter().map(|s| s.accuracy).sum::<f64>() / n,
            macro_recall: all.iter().map(|s| s.macro_recall).sum::<f64>() / n,
            macro_f1: all.iter().map(|s| s.macro_f1).sum::<f64>() / n,
        }
    }
}
