use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nwhead::PredictionSimplex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    WorstGroupAccuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::WorstGroupAccuracy => "worst_group_accuracy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            "worst_group_accuracy" => Ok(Metric::WorstGroupAccuracy),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scores argmax decisions against `labels`.
///
/// `groups` is only read by worst-group accuracy; it falls back to the
/// labels when absent.
pub fn compute_metric(
    preds: &[PredictionSimplex],
    labels: &[usize],
    groups: Option<&[usize]>,
    metric: Metric,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("cannot score an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape("compute_metric", &[preds.len()], &[labels.len()]));
    }
    let decided: Vec<usize> = preds.iter().map(PredictionSimplex::argmax).collect();
    match metric {
        Metric::Accuracy => Ok(accuracy(&decided, labels)),
        Metric::MacroF1 => {
            let n_classes = preds[0].probs.len().max(labels.iter().max().map_or(0, |m| m + 1));
            Ok(macro_f1(&decided, labels, n_classes))
        }
        Metric::WorstGroupAccuracy => {
            let groups = groups.unwrap_or(labels);
            if groups.len() != labels.len() {
                return Err(Error::shape("compute_metric groups", &[groups.len()], &[labels.len()]));
            }
            let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for ((&d, &y), &g) in decided.iter().zip(labels).zip(groups) {
                let slot = per.entry(g).or_default();
                slot.0 += usize::from(d == y);
                slot.1 += 1;
            }
            Ok(per
                .values()
                .map(|&(c, n)| c as f64 / n as f64)
                .fold(f64::INFINITY, f64::min))
        }
    }
}

fn accuracy(decided: &[usize], labels: &[usize]) -> f64 {
    let correct = decided.iter().zip(labels).filter(|(d, y)| d == y).count();
    correct as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1; a class with a zero denominator scores 0.
fn macro_f1(decided: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&d, &y) in decided.iter().zip(labels) {
        if d == y {
            tp[y] += 1;
        } else {
            fp[d] += 1;
            fneg[y] += 1;
        }
    }
    let f1: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    f1 / n_classes as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
