//! Scoring of recovered label counts: instance-level multiset overlap and
//! class-level support recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two accuracy figures for one recovery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub ins_acc: f64,
    pub cls_acc: f64,
    pub batch_size: usize,
}

/// Instance-level accuracy: `sum_c min(predicted_c, truth_c) / B`.
///
/// Both count vectors must sum to the same batch size.
pub fn ins_acc(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "count vectors differ in length: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let batch: usize = truth.iter().sum();
    if predicted.iter().sum::<usize>() != batch {
        return Err(Error::Contract(format!(
            "count sums differ: predicted {} vs truth {batch}",
            predicted.iter().sum::<usize>()
        )));
    }
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let overlap: usize = predicted
        .iter()
        .zip(truth)
        .map(|(&p, &t)| p.min(t))
        .sum();
    Ok(overlap as f64 / batch as f64)
}

/// Class-level accuracy: fraction of truly present classes that the
/// prediction also marks present (support recall).
pub fn cls_acc(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "count vectors differ in length: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let present: usize = truth.iter().filter(|&&t| t > 0).count();
    if present == 0 {
        return Err(Error::Contract("truth has no present classes".into()));
    }
    let hit = predicted
        .iter()
        .zip(truth)
        .filter(|&(&p, &t)| p > 0 && t > 0)
        .count();
    Ok(hit as f64 / present as f64)
}

/// Convenience wrapper computing both metrics.
pub fn score(predicted: &[usize], truth: &[usize]) -> Result<RecoveryScore> {
    Ok(RecoveryScore {
        ins_acc: ins_acc(predicted, truth)?,
        cls_acc: cls_acc(predicted, truth)?,
        batch_size: truth.iter().sum(),
    })
}
