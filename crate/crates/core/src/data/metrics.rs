use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

/// Classification quality over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Unweighted mean of recall over classes present in the labels.
    pub balanced_accuracy: f64,
    /// Recall per class; 0 for classes absent from the labels.
    pub per_class_recall: [f64; NUM_CLASSES],
    /// Number of labels per class.
    pub support: [usize; NUM_CLASSES],
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

pub fn compute_metrics(preds: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "metrics need equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::Index(format!("class index {bad} out of range")));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let mut support = [0usize; NUM_CLASSES];
    let mut per_class_recall = [0.0; NUM_CLASSES];
    let mut recall_sum = 0.0;
    let mut present = 0;
    for c in 0..NUM_CLASSES {
        support[c] = confusion[c].iter().sum();
        if support[c] > 0 {
            per_class_recall[c] = confusion[c][c] as f64 / support[c] as f64;
            recall_sum += per_class_recall[c];
            present += 1;
        }
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: correct as f64 / preds.len() as f64,
        balanced_accuracy: recall_sum / present as f64,
        per_class_recall,
        support,
        confusion,
    })
}
