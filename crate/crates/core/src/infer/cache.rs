use std::collections::BTreeMap;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::featnet::{FeatureBatch, FeatureNet};
use crate::numcore::Tensor;
use crate::nwhead::SupportBatch;

/// Features of every training example under a frozen network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    features: Tensor,
    labels: Vec<usize>,
    envs: Vec<usize>,
    indices: Vec<usize>,
    n_classes: usize,
    by_class: Vec<Vec<usize>>,
    by_env_class: BTreeMap<usize, Vec<Vec<usize>>>,
}

impl FeatureCache {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        envs: Vec<usize>,
        indices: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2 || labels.len() != n || envs.len() != n || indices.len() != n {
            return Err(Error::shape("feature cache", features.shape(), &[labels.len()]));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        let mut by_env_class: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        for (row, (&y, &e)) in labels.iter().zip(&envs).enumerate() {
            if y >= n_classes {
                return Err(Error::Contract(format!("label {y} out of range")));
            }
            by_class[y].push(row);
            by_env_class
                .entry(e)
                .or_insert_with(|| vec![Vec::new(); n_classes])[y]
                .push(row);
        }
        Ok(FeatureCache {
            features,
            labels,
            envs,
            indices,
            n_classes,
            by_class,
            by_env_class,
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

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn envs(&self) -> &[usize] {
        &self.envs
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Cache rows of class `c`.
    pub fn class_rows(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    pub fn env_ids(&self) -> Vec<usize> {
        self.by_env_class.keys().copied().collect()
    }

    /// Cache rows of class `c` in environment `e`.
    pub fn env_class_rows(&self, e: usize, c: usize) -> &[usize] {
        self.by_env_class.get(&e).map_or(&[], |v| v[c].as_slice())
    }

    /// Classes with at least one cached row.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.n_classes)
            .filter(|&c| !self.by_class[c].is_empty())
            .collect()
    }

    /// Support over the given cache rows.
    pub fn support(&self, rows: &[usize]) -> Result<SupportBatch> {
        SupportBatch::new(
            self.features.gather_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.n_classes,
            rows.iter().map(|&r| self.envs[r]).collect(),
            rows.iter().map(|&r| self.indices[r]).collect(),
        )
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        FeatureCache::new(
            self.features.gather_rows(order),
            order.iter().map(|&r| self.labels[r]).collect(),
            order.iter().map(|&r| self.envs[r]).collect(),
            order.iter().map(|&r| self.indices[r]).collect(),
            self.n_classes,
        )
    }
}

/// Extracts and caches features for every example of `ds`.
pub fn build_cache(net: &FeatureNet, ds: &Dataset) -> Result<FeatureCache> {
    let FeatureBatch(features) = net.extract(&ds.all_inputs())?;
    FeatureCache::new(
        features,
        ds.labels(),
        ds.envs(),
        (0..ds.len()).collect(),
        ds.n_classes(),
    )
}
