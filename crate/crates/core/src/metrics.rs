//! Evaluation metrics: accuracy, macro-F1, confusion counts, and the
//! structure-awareness gain over a set of labelled results.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction and gold label counts differ ({preds} vs {gold})")]
    LengthMismatch { preds: usize, gold: usize },
    #[error("metric over an empty label set")]
    Empty,
    #[error("label {label} outside the {classes}-class vocabulary")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error("no {0} entries to take a maximum over")]
    MissingGroup(&'static str),
}

fn check_pairs(preds: &[usize], gold: &[usize]) -> Result<(), MetricsError> {
    if preds.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gold: gold.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Exact fraction of matching labels.
pub fn accuracy(preds: &[usize], gold: &[usize]) -> Result<f64, MetricsError> {
    check_pairs(preds, gold)?;
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Confusion counts; `result[g][p]` counts gold class `g` predicted as `p`,
/// so each row sums to that class's support.
pub fn confusion(
    preds: &[usize],
    gold: &[usize],
    classes: usize,
) -> Result<Vec<Vec<usize>>, MetricsError> {
    check_pairs(preds, gold)?;
    let mut table = vec![vec![0usize; classes]; classes];
    for (&p, &g) in preds.iter().zip(gold) {
        for label in [p, g] {
            if label >= classes {
                return Err(MetricsError::ClassOutOfRange { label, classes });
            }
        }
        table[g][p] += 1;
    }
    Ok(table)
}

/// Unweighted mean of per-class F1 scores. A class with neither support nor
/// predictions contributes 0.
pub fn macro_f1(preds: &[usize], gold: &[usize], classes: usize) -> Result<f64, MetricsError> {
    if classes == 0 {
        return Err(MetricsError::Empty);
    }
    let table = confusion(preds, gold, classes)?;
    let mut total = 0.0f64;
    for c in 0..classes {
        let tp = table[c][c];
        let support: usize = table[c].iter().sum();
        let predicted: usize = (0..classes).map(|g| table[g][c]).sum();
        let denom = support + predicted; // = 2tp + fp + fn
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / classes as f64)
}

/// One evaluated setting, flagged by whether the method consumed graph
/// structure.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GainEntry {
    pub setting: String,
    pub structure_aware: bool,
    pub accuracy: f64,
}

/// Best structure-aware accuracy minus best structure-agnostic accuracy;
/// negative when structure hurts.
pub fn structure_gain(entries: &[GainEntry]) -> Result<f64, MetricsError> {
    let best = |aware: bool, tag: &'static str| -> Result<f64, MetricsError> {
        entries
            .iter()
            .filter(|e| e.structure_aware == aware)
            .map(|e| e.accuracy)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
            .ok_or(MetricsError::MissingGroup(tag))
    };
    Ok(best(true, "structure-aware")? - best(false, "structure-agnostic")?)
}
