//! Linear softmax probe trained on frozen cached features.

use crate::error::Result;
use crate::featnet::{FeatureBatch, Linear};
use crate::numcore::{OptimHyper, Optimizer, OptimizerKind, ParamId, Tape, Tensor};
use crate::nwhead::{cross_entropy_tracked, onehot, PredictionSimplex};

use super::cache::FeatureCache;

pub const DEFAULT_PROBE_LR: f64 = 1e-2;
pub const DEFAULT_PROBE_EPOCHS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub head: Linear,
}

impl LinearProbe {
    pub fn predict(&self, feats: &FeatureBatch) -> Result<Vec<PredictionSimplex>> {
        softmax_predictions(&self.head, feats.tensor())
    }
}

pub fn softmax_predictions(head: &Linear, feats: &Tensor) -> Result<Vec<PredictionSimplex>> {
    let probs = head.forward(feats)?.softmax_rows();
    Ok(probs
        .row_iter()
        .map(|r| PredictionSimplex::new(r.to_vec()))
        .collect())
}

/// Full-batch Adam on cross-entropy, starting from a zero head.
pub fn train_probe(cache: &FeatureCache, lr: f64, epochs: usize) -> Result<LinearProbe> {
    let mut head = Linear::zeros(cache.dim(), cache.n_classes());
    let mut opt = Optimizer::new(
        OptimizerKind::Adam,
        OptimHyper {
            lr,
            ..OptimHyper::default()
        },
    )?;
    let targets = onehot(cache.labels(), cache.n_classes())?;
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), head.weight.clone());
        let b = tape.param(ParamId(1), head.bias.clone());
        let x = tape.constant(cache.features().clone());
        let y = tape.constant(targets.clone());
        let logits = head.forward_tracked(&mut tape, x, &[w, b])?;
        let probs = tape.softmax_rows(logits)?;
        let loss = cross_entropy_tracked(&mut tape, probs, y)?;
        let grads = tape.backward(loss)?;
        let g = grads.ordered(&[head.weight.shape(), head.bias.shape()]);
        opt.step(&mut [&mut head.weight, &mut head.bias], &g)?;
    }
    Ok(LinearProbe { head })
}
