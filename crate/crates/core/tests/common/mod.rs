#![allow(dead_code)]

use nwinv::dataset::{Dataset, LabeledExample};
use nwinv::featnet::FeatureBatch;
use nwinv::numcore::{Rng, Tensor};
use nwinv::nwhead::SupportBatch;

pub fn gaussian_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

pub fn batch(rows: &[Vec<f64>]) -> FeatureBatch {
    FeatureBatch::new(Tensor::from_rows(rows).unwrap()).unwrap()
}

pub fn support(rows: &[Vec<f64>], labels: &[usize], n_classes: usize) -> SupportBatch {
    let n = labels.len();
    SupportBatch::new(
        Tensor::from_rows(rows).unwrap(),
        labels.to_vec(),
        n_classes,
        vec![0; n],
        (0..n).collect(),
    )
    .unwrap()
}

/// Rows `(y, e)` with Gaussian inputs of width `d`.
pub fn dataset_from(cells: &[(usize, usize)], d: usize, n_classes: usize, rng: &mut Rng) -> Dataset {
    let ex = cells
        .iter()
        .map(|&(y, e)| LabeledExample::new((0..d).map(|_| rng.normal()).collect(), y, e))
        .collect();
    Dataset::new(ex, Some(n_classes)).unwrap()
}

/// Every (env, class) bucket filled with `per_cell` examples.
pub fn full_grid(n_envs: usize, n_classes: usize, per_cell: usize, d: usize, rng: &mut Rng) -> Dataset {
    let mut cells = Vec::new();
    for e in 0..n_envs {
        for y in 0..n_classes {
            cells.extend(std::iter::repeat_n((y, e), per_cell));
        }
    }
    dataset_from(&cells, d, n_classes, rng)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
