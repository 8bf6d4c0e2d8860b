//! The Nadaraya-Watson head: a softmax over support similarities, used to
//! average one-hot support labels. Similarity is negative Euclidean
//! distance at temperature 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::FeatureBatch;
use crate::numcore::{sqdist, Tape, Tensor, Var};

/// Support features with their labels and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportBatch {
    features: Tensor,
    onehot: Tensor,
    labels: Vec<usize>,
    pub source_envs: Vec<usize>,
    pub source_indices: Vec<usize>,
}

impl SupportBatch {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        source_envs: Vec<usize>,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2
            || labels.len() != n
            || source_envs.len() != n
            || source_indices.len() != n
        {
            return Err(Error::shape(
                "support batch",
                features.shape(),
                &[labels.len(), source_envs.len(), source_indices.len()],
            ));
        }
        let onehot = onehot(&labels, n_classes)?;
        Ok(SupportBatch {
            features,
            onehot,
            labels,
            source_envs,
            source_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn onehot(&self) -> &Tensor {
        &self.onehot
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.onehot.cols()
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        SupportBatch::new(
            self.features.gather_rows(order),
            order.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes(),
            order.iter().map(|&i| self.source_envs[i]).collect(),
            order.iter().map(|&i| self.source_indices[i]).collect(),
        )
    }
}

/// One-hot rows for `labels`.
pub fn onehot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        data[i * n_classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), n_classes, data)
}

/// A probability vector over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSimplex {
    pub probs: Vec<f64>,
}

impl PredictionSimplex {
    pub fn new(probs: Vec<f64>) -> Self {
        PredictionSimplex { probs }
    }

    pub fn uniform(n_classes: usize) -> Self {
        PredictionSimplex {
            probs: vec![1.0 / n_classes as f64; n_classes],
        }
    }

    /// Highest-probability class; ties go to the lower class id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0 && p.is_finite())
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// `-‖a_i - b_j‖₂` for every pair of rows.
pub fn similarity(a: &FeatureBatch, b: &FeatureBatch) -> Result<Tensor> {
    if a.dim() != b.dim() {
        return Err(Error::shape("similarity", a.tensor().shape(), b.tensor().shape()));
    }
    let d2 = a.tensor().pairwise_sqdist(b.tensor())?;
    Ok(d2.sqrt()?.scale(-1.0))
}

/// NW prediction for each query row.
pub fn nw_predict(queries: &FeatureBatch, support: &SupportBatch) -> Result<Vec<PredictionSimplex>> {
    nw_predict_weighted(queries, support, None)
}

/// NW prediction where support row `i` counts `multiplicity[i]` times, as if
/// it had been duplicated. Integer multiplicities reproduce exact duplication.
pub fn nw_predict_weighted(
    queries: &FeatureBatch,
    support: &SupportBatch,
    multiplicity: Option<&[f64]>,
) -> Result<Vec<PredictionSimplex>> {
    if support.is_empty() {
        return Err(Error::Contract("NW head needs a nonempty support".into()));
    }
    if queries.dim() != support.features.cols() {
        return Err(Error::shape(
            "nw_predict",
            queries.tensor().shape(),
            support.features.shape(),
        ));
    }
    let log_mult: Option<Vec<f64>> = match multiplicity {
        Some(m) if m.len() != support.len() => {
            return Err(Error::shape("nw_predict multiplicity", &[m.len()], &[support.len()]));
        }
        Some(m) => Some(m.iter().map(|&w| w.ln()).collect()),
        None => None,
    };
    let c = support.n_classes();
    let predict_one = |q: &[f64]| {
        let mut logits: Vec<f64> = support
            .features
            .row_iter()
            .map(|s| -sqdist(q, s).sqrt())
            .collect();
        if let Some(lm) = &log_mult {
            for (l, w) in logits.iter_mut().zip(lm) {
                *l += w;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; c];
        let mut z = 0.0;
        for (l, &y) in logits.iter().zip(&support.labels) {
            let w = (l - max).exp();
            probs[y] += w;
            z += w;
        }
        for p in probs.iter_mut() {
            *p /= z;
        }
        PredictionSimplex { probs }
    };
    let rows: Vec<&[f64]> = queries.tensor().row_iter().collect();
    Ok(if rows.len() * support.len() > 1 << 16 {
        rows.par_iter().map(|q| predict_one(q)).collect()
    } else {
        rows.iter().map(|q| predict_one(q)).collect()
    })
}

/// Differentiable NW probabilities (`n_query × n_classes`).
pub fn nw_probs_tracked(tape: &mut Tape, queries: Var, support: Var, onehot: Var) -> Result<Var> {
    if tape.value(support).rows() == 0 {
        return Err(Error::Contract("NW head needs a nonempty support".into()));
    }
    let d2 = tape.pairwise_sqdist(queries, support)?;
    let d = tape.sqrt(d2)?;
    let sim = tape.scale(d, -1.0)?;
    let weights = tape.softmax_rows(sim)?;
    tape.matmul(weights, onehot)
}

/// Mean cross-entropy of probability rows against one-hot targets.
pub fn cross_entropy_tracked(tape: &mut Tape, probs: Var, targets: Var) -> Result<Var> {
    let n = tape.value(probs).rows();
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, targets)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Mean over rows of the squared L2 distance between two probability matrices.
pub fn prediction_gap_tracked(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).rows();
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n as f64)
}
