//! Confusion matrix and the OA / AA / kappa summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self { classes: m, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Dimension(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Tallies the pixels where `mask` is set.
    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize], mask: &[bool]) -> Result<()> {
        if truth.len() != pred.len() || truth.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "tally over {} labels, {} predictions, {} mask entries",
                truth.len(),
                pred.len(),
                mask.len()
            )));
        }
        for ((&t, &p), &m) in truth.iter().zip(pred).zip(mask) {
            if m {
                self.record(t, p)?;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// `null` for classes without any true pixel.
    pub per_class_recall: Vec<Option<f64>>,
}

/// AA averages recall over the classes that occur in the ground truth. When
/// chance agreement is total (`pe = 1`) kappa is 1 for perfect agreement and
/// 0 otherwise.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    let m = cm.classes();
    let n = total as f64;
    let trace: u64 = (0..m).map(|k| cm.get(k, k)).sum();
    let oa = trace as f64 / n;
    let row = |k: usize| (0..m).map(|j| cm.get(k, j)).sum::<u64>();
    let col = |k: usize| (0..m).map(|i| cm.get(i, k)).sum::<u64>();
    let per_class_recall: Vec<Option<f64>> =
        (0..m).map(|k| (row(k) > 0).then(|| cm.get(k, k) as f64 / row(k) as f64)).collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = (0..m).map(|k| row(k) as f64 * col(k) as f64).sum::<f64>() / (n * n);
    let kappa = if pe == 1.0 {
        if trace == total {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(Metrics { oa, aa, kappa, per_class_recall })
}
