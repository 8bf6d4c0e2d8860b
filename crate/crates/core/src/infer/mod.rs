//! Test-time inference over a frozen feature extractor.
//!
//! Every mode builds a support set from the cached training features and
//! applies the NW head, except `Probe`, which fits a linear classifier on
//! the same features.

mod cache;
mod hnsw;
mod kmeans;
mod probe;

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

pub use cache::{build_cache, FeatureCache};
pub use hnsw::{exact_knn, HnswIndex, HnswParams};
pub use kmeans::{kmeans, KMeans};
pub use probe::{softmax_predictions as probe_predictions, train_probe, LinearProbe, DEFAULT_PROBE_EPOCHS, DEFAULT_PROBE_LR};

use crate::error::{Error, Result};
use crate::featnet::FeatureBatch;
use crate::numcore::{Rng, Tensor};
use crate::nwhead::{nw_predict, nw_predict_weighted, PredictionSimplex, SupportBatch};

/// Source env recorded for synthetic support rows such as centroids.
pub const NO_SOURCE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Random,
    Full,
    /// Every cached row once, no class balancing.
    FullUnbalanced,
    Ensemble,
    Cluster,
    Knn,
    Hnsw,
    Probe,
}

impl ModeKind {
    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Random => "random",
            ModeKind::Full => "full",
            ModeKind::FullUnbalanced => "full_unbalanced",
            ModeKind::Ensemble => "ensemble",
            ModeKind::Cluster => "cluster",
            ModeKind::Knn => "knn",
            ModeKind::Hnsw => "hnsw",
            ModeKind::Probe => "probe",
        }
    }

    fn default_k(self) -> usize {
        match self {
            ModeKind::Knn | ModeKind::Hnsw => 20,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InferenceMode {
    pub kind: ModeKind,
    /// Per-class count for random/cluster, neighbor count for knn/hnsw.
    pub k: usize,
}

impl InferenceMode {
    pub fn new(kind: ModeKind) -> Self {
        InferenceMode {
            kind,
            k: kind.default_k(),
        }
    }

    pub fn with_k(kind: ModeKind, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config(format!("{} needs k >= 1", kind.name())));
        }
        Ok(InferenceMode { kind, k })
    }

    /// Label used in metrics records: the mode name, with `:k` when it
    /// differs from the default.
    pub fn label(&self) -> String {
        let uses_k = matches!(
            self.kind,
            ModeKind::Random | ModeKind::Cluster | ModeKind::Knn | ModeKind::Hnsw
        );
        if uses_k && self.k != self.kind.default_k() {
            format!("{}:{}", self.kind.name(), self.k)
        } else {
            self.kind.name().to_string()
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    /// `name` or `name:k`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad k in mode '{s}'")))?,
                ),
            ),
            None => (s, None),
        };
        let kind = match name.trim() {
            "random" => ModeKind::Random,
            "full" => ModeKind::Full,
            "full_unbalanced" => ModeKind::FullUnbalanced,
            "ensemble" => ModeKind::Ensemble,
            "cluster" => ModeKind::Cluster,
            "knn" => ModeKind::Knn,
            "hnsw" => ModeKind::Hnsw,
            "probe" => ModeKind::Probe,
            other => return Err(Error::Config(format!("unknown inference mode '{other}'"))),
        };
        match k {
            Some(k) => InferenceMode::with_k(kind, k),
            None => Ok(InferenceMode::new(kind)),
        }
    }
}

/// Predicts every query under `mode`.
pub fn predict(
    mode: &InferenceMode,
    cache: &FeatureCache,
    queries: &FeatureBatch,
    rng: &mut Rng,
) -> Result<Vec<PredictionSimplex>> {
    if cache.is_empty() {
        return Err(Error::Contract("inference needs a nonempty feature cache".into()));
    }
    match mode.kind {
        ModeKind::Random => {
            let rows = random_rows(cache, mode.k, rng)?;
            nw_predict(queries, &cache.support(&rows)?)
        }
        ModeKind::Full => predict_full(cache, queries),
        ModeKind::FullUnbalanced => {
            let rows: Vec<usize> = (0..cache.len()).collect();
            nw_predict(queries, &cache.support(&rows)?)
        }
        ModeKind::Ensemble => predict_ensemble(cache, queries),
        ModeKind::Cluster => nw_predict(queries, &cluster_support(cache, mode.k)?),
        ModeKind::Knn => knn_predict(cache, queries, mode.k, true),
        ModeKind::Hnsw => knn_predict(cache, queries, mode.k, false),
        ModeKind::Probe => {
            train_probe(cache, DEFAULT_PROBE_LR, DEFAULT_PROBE_EPOCHS)?.predict(queries)
        }
    }
}

fn require_classes(cache: &FeatureCache) -> Result<()> {
    for c in 0..cache.n_classes() {
        if cache.class_rows(c).is_empty() {
            return Err(Error::Coverage { env: None, class: c });
        }
    }
    Ok(())
}

fn random_rows(cache: &FeatureCache, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    require_classes(cache)?;
    let mut rows = Vec::with_capacity(k * cache.n_classes());
    for c in 0..cache.n_classes() {
        let b = cache.class_rows(c);
        if b.len() >= k {
            rows.extend(rng.sample_indices(b.len(), k).into_iter().map(|j| b[j]));
        } else {
            rows.extend((0..k).map(|_| b[rng.below(b.len())]));
        }
    }
    Ok(rows)
}

/// Multiplicities that duplicate each class's rows cyclically, in
/// ascending dataset-index order, up to the largest class count.
fn balancing_multiplicity(cache: &FeatureCache, rows_by_class: &[&[usize]]) -> Vec<(usize, f64)> {
    let target = rows_by_class.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for rows in rows_by_class {
        if rows.is_empty() {
            continue;
        }
        let mut ordered = rows.to_vec();
        ordered.sort_by_key(|&r| cache.indices()[r]);
        let (base, extra) = (target / ordered.len(), target % ordered.len());
        for (j, &r) in ordered.iter().enumerate() {
            out.push((r, (base + usize::from(j < extra)) as f64));
        }
    }
    out
}

fn predict_balanced(
    cache: &FeatureCache,
    rows_by_class: &[&[usize]],
    queries: &FeatureBatch,
) -> Result<Vec<PredictionSimplex>> {
    let weighted = balancing_multiplicity(cache, rows_by_class);
    let rows: Vec<usize> = weighted.iter().map(|w| w.0).collect();
    let mult: Vec<f64> = weighted.iter().map(|w| w.1).collect();
    nw_predict_weighted(queries, &cache.support(&rows)?, Some(&mult))
}

fn predict_full(cache: &FeatureCache, queries: &FeatureBatch) -> Result<Vec<PredictionSimplex>> {
    require_classes(cache)?;
    let by_class: Vec<&[usize]> = (0..cache.n_classes()).map(|c| cache.class_rows(c)).collect();
    predict_balanced(cache, &by_class, queries)
}

fn predict_ensemble(cache: &FeatureCache, queries: &FeatureBatch) -> Result<Vec<PredictionSimplex>> {
    let classes = cache.present_classes();
    let mut sum = vec![vec![0.0; cache.n_classes()]; queries.len()];
    let mut used = 0;
    for e in cache.env_ids() {
        if let Some(&missing) = classes.iter().find(|&&c| cache.env_class_rows(e, c).is_empty()) {
            warn!("ensemble: environment {e} has no class {missing}; skipping it");
            continue;
        }
        let by_class: Vec<&[usize]> = classes.iter().map(|&c| cache.env_class_rows(e, c)).collect();
        let preds = predict_balanced(cache, &by_class, queries)?;
        for (s, p) in sum.iter_mut().zip(&preds) {
            for (a, b) in s.iter_mut().zip(&p.probs) {
                *a += b;
            }
        }
        used += 1;
    }
    if used == 0 {
        let class = classes.first().copied().unwrap_or(0);
        return Err(Error::Coverage { env: None, class });
    }
    Ok(sum
        .into_iter()
        .map(|s| PredictionSimplex::new(s.into_iter().map(|v| v / used as f64).collect()))
        .collect())
}

/// Support of `k` k-means centroids per class.
pub fn cluster_support(cache: &FeatureCache, k: usize) -> Result<SupportBatch> {
    require_classes(cache)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..cache.n_classes() {
        let members: Vec<&[f64]> = cache
            .class_rows(c)
            .iter()
            .map(|&r| cache.features().row(r))
            .collect();
        let km = kmeans(&members, k);
        for centroid in km.centroids {
            rows.push(centroid);
            labels.push(c);
        }
    }
    let n = labels.len();
    SupportBatch::new(
        Tensor::from_rows(&rows)?,
        labels,
        cache.n_classes(),
        vec![NO_SOURCE; n],
        vec![NO_SOURCE; n],
    )
}

/// NW restricted to each query's `k` nearest cached rows, found by exact
/// scan or through an HNSW index with default parameters.
pub fn knn_predict(
    cache: &FeatureCache,
    queries: &FeatureBatch,
    k: usize,
    exact: bool,
) -> Result<Vec<PredictionSimplex>> {
    if cache.is_empty() {
        return Err(Error::Contract("k-NN needs a nonempty feature cache".into()));
    }
    if k == 0 || k > cache.len() {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={}",
            cache.len()
        )));
    }
    let neighbors = if exact {
        neighbor_rows_exact(cache, queries, k)
    } else {
        let index = HnswIndex::build(cache.features(), HnswParams::default());
        index.search_batch(queries.tensor(), k, None)
    };
    knn_from_neighbors(cache, queries, &neighbors)
}

/// k-NN prediction against a prebuilt index.
pub fn knn_predict_with_index(
    cache: &FeatureCache,
    index: &HnswIndex,
    queries: &FeatureBatch,
    k: usize,
) -> Result<Vec<PredictionSimplex>> {
    let neighbors = index.search_batch(queries.tensor(), k, None);
    knn_from_neighbors(cache, queries, &neighbors)
}

fn neighbor_rows_exact(cache: &FeatureCache, queries: &FeatureBatch, k: usize) -> Vec<Vec<(usize, f64)>> {
    use rayon::prelude::*;
    let rows: Vec<&[f64]> = queries.tensor().row_iter().collect();
    rows.par_iter()
        .map(|q| exact_knn(cache.features(), q, k))
        .collect()
}

fn knn_from_neighbors(
    cache: &FeatureCache,
    queries: &FeatureBatch,
    neighbors: &[Vec<(usize, f64)>],
) -> Result<Vec<PredictionSimplex>> {
    let mut out = Vec::with_capacity(queries.len());
    for (i, nb) in neighbors.iter().enumerate() {
        let rows: Vec<usize> = nb.iter().map(|n| n.0).collect();
        let q = FeatureBatch::new(Tensor::from_rows(&[queries.row(i)])?)?;
        out.extend(nw_predict(&q, &cache.support(&rows)?)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub label: usize,
    pub env: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborDump {
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Share of each environment among the top-k, averaged over queries.
    pub env_histogram: BTreeMap<usize, f64>,
}

/// Ranked nearest cached rows per query (ascending distance, ties by
/// dataset index) and the environment histogram over them.
pub fn dump_neighbors(cache: &FeatureCache, queries: &FeatureBatch, top_k: usize) -> Result<NeighborDump> {
    if top_k == 0 || top_k > cache.len() {
        return Err(Error::Config(format!(
            "top_k = {top_k} must be in 1..={}",
            cache.len()
        )));
    }
    let mut neighbors = Vec::with_capacity(queries.len());
    let mut hist: BTreeMap<usize, f64> = cache.env_ids().into_iter().map(|e| (e, 0.0)).collect();
    for q in queries.tensor().row_iter() {
        let mut all: Vec<Neighbor> = (0..cache.len())
            .map(|r| Neighbor {
                index: cache.indices()[r],
                distance: crate::numcore::sqdist(q, cache.features().row(r)).sqrt(),
                label: cache.labels()[r],
                env: cache.envs()[r],
            })
            .collect();
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
        all.truncate(top_k);
        for n in &all {
            *hist.entry(n.env).or_default() += 1.0 / top_k as f64;
        }
        neighbors.push(all);
    }
    if !neighbors.is_empty() {
        for v in hist.values_mut() {
            *v /= neighbors.len() as f64;
        }
    }
    Ok(NeighborDump {
        neighbors,
        env_histogram: hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache_from(rows: &[&[f64]], labels: &[usize], envs: &[usize], c: usize) -> FeatureCache {
        FeatureCache::new(
            Tensor::from_rows(rows).unwrap(),
            labels.to_vec(),
            envs.to_vec(),
            (0..labels.len()).collect(),
            c,
        )
        .unwrap()
    }

    fn q(rows: &[&[f64]]) -> FeatureBatch {
        FeatureBatch::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn mode_parsing() {
        let m: InferenceMode = "cluster:5".parse().unwrap();
        assert_eq!(m, InferenceMode { kind: ModeKind::Cluster, k: 5 });
        assert_eq!("knn".parse::<InferenceMode>().unwrap().k, 20);
        assert_eq!("random".parse::<InferenceMode>().unwrap().k, 3);
        assert!("cluster:0".parse::<InferenceMode>().is_err());
        assert!("bogus".parse::<InferenceMode>().is_err());
        assert_eq!(m.label(), "cluster:5");
        assert_eq!(InferenceMode::new(ModeKind::Full).label(), "full");
    }

    #[test]
    fn full_balances_by_duplication() {
        // class 0 has 1 row, class 1 has 2 rows; balanced = class 0 row twice
        let cache = cache_from(&[&[0.0], &[1.0], &[2.0]], &[0, 1, 1], &[0, 0, 0], 2);
        let p = predict(&InferenceMode::new(ModeKind::Full), &cache, &q(&[&[0.5]]), &mut Rng::new(0)).unwrap();
        let w = |d: f64| (-d).exp();
        let p0 = 2.0 * w(0.5) / (2.0 * w(0.5) + w(0.5) + w(1.5));
        assert!((p[0].probs[0] - p0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_is_mean_of_env_predictions() {
        let cache = cache_from(
            &[&[0.0], &[1.0], &[0.0], &[3.0]],
            &[0, 1, 0, 1],
            &[0, 0, 1, 1],
            2,
        );
        let query = q(&[&[0.2]]);
        let env0 = nw_predict(&query, &cache.support(&[0, 1]).unwrap()).unwrap();
        let env1 = nw_predict(&query, &cache.support(&[2, 3]).unwrap()).unwrap();
        let p = predict(&InferenceMode::new(ModeKind::Ensemble), &cache, &query, &mut Rng::new(0)).unwrap();
        for c in 0..2 {
            assert!((p[0].probs[c] - (env0[0].probs[c] + env1[0].probs[c]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_skips_env_missing_a_class() {
        let cache = cache_from(&[&[0.0], &[1.0], &[0.5]], &[0, 1, 0], &[0, 0, 1], 2);
        let query = q(&[&[0.2]]);
        let env0 = nw_predict(&query, &cache.support(&[0, 1]).unwrap()).unwrap();
        let p = predict(&InferenceMode::new(ModeKind::Ensemble), &cache, &query, &mut Rng::new(0)).unwrap();
        assert_eq!(p, env0);
    }

    #[test]
    fn cluster_of_identical_features() {
        let cache = cache_from(&[&[1.0, 1.0], &[1.0, 1.0], &[5.0, 5.0]], &[0, 0, 1], &[0, 0, 0], 2);
        let s = cluster_support(&cache, 3).unwrap();
        for (row, &y) in s.features().row_iter().zip(s.labels()) {
            if y == 0 {
                assert_eq!(row, &[1.0, 1.0]);
            }
        }
    }

    #[test]
    fn missing_class_is_coverage_error() {
        let cache = cache_from(&[&[0.0]], &[0], &[0], 2);
        let r = predict(&InferenceMode::new(ModeKind::Full), &cache, &q(&[&[0.0]]), &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Coverage { class: 1, .. })));
    }

    #[test]
    fn knn_self_retrieval() {
        let cache = cache_from(&[&[0.0], &[1.0], &[5.0]], &[0, 1, 1], &[0, 0, 0], 2);
        let p = knn_predict(&cache, &q(&[&[1.0]]), 1, true).unwrap();
        assert_eq!(p[0].probs, vec![0.0, 1.0]);
        assert!(knn_predict(&cache, &q(&[&[1.0]]), 4, true).is_err());
    }

    #[test]
    fn neighbor_dump_sorted_and_normalized() {
        let cache = cache_from(&[&[2.0], &[1.0], &[1.0], &[0.0]], &[0, 1, 1, 0], &[0, 1, 0, 1], 2);
        let d = dump_neighbors(&cache, &q(&[&[0.9], &[3.0]]), 3).unwrap();
        let idx: Vec<usize> = d.neighbors[0].iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
        let total: f64 = d.env_histogram.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_env_histogram_is_one_hot() {
        let cache = cache_from(&[&[2.0], &[1.0]], &[0, 1], &[4, 4], 2);
        let d = dump_neighbors(&cache, &q(&[&[0.0]]), 2).unwrap();
        assert_eq!(d.env_histogram.get(&4), Some(&1.0));
    }

    #[test]
    fn probe_zero_epochs_is_uniform() {
        let cache = cache_from(&[&[0.0], &[1.0]], &[0, 1], &[0, 0], 2);
        let p = train_probe(&cache, 0.1, 0).unwrap().predict(&q(&[&[3.0]])).unwrap();
        assert_eq!(p[0].probs, vec![0.5, 0.5]);
    }

    #[test]
    fn probe_on_one_class() {
        let cache = cache_from(&[&[0.0], &[1.0], &[-1.0]], &[1, 1, 1], &[0, 0, 0], 3);
        let probe = train_probe(&cache, 0.1, 50).unwrap();
        let p = probe.predict(&q(&[&[0.3], &[-7.0], &[9.0]])).unwrap();
        assert!(p.iter().all(|s| s.argmax() == 1));
    }

    #[test]
    fn probe_separates() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 - 9.5, 1.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let cache = cache_from(&refs, &labels, &[0; 20], 2);
        let probe = train_probe(&cache, 0.1, 300).unwrap();
        let p = probe.predict(&FeatureBatch::new(cache.features().clone()).unwrap()).unwrap();
        assert!(p.iter().zip(&labels).all(|(s, &y)| s.argmax() == y));
    }
}
