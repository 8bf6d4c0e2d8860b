//! Support-set samplers.
//!
//! Balancing draws the same number of examples for every included class;
//! conditioning restricts every draw to one environment. The union of the
//! drawn labels always covers the labels of the query batch it serves.

use std::collections::BTreeSet;

use log::warn;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::featnet::FeatureBatch;
use crate::numcore::Rng;
use crate::nwhead::SupportBatch;

/// How a support set is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSpec {
    pub balanced: bool,
    pub env: Option<usize>,
    /// Examples per class when balanced; the unbalanced sampler draws
    /// `n_per_class × |classes|` examples in total.
    pub n_per_class: usize,
    pub subsample_classes: Option<Vec<usize>>,
    /// Sorted rows kept out of the draw (the queries themselves). A bucket
    /// holding nothing else falls back to its full contents.
    pub exclude: Vec<usize>,
}

impl SupportSpec {
    pub fn balanced(n_per_class: usize) -> Self {
        SupportSpec {
            balanced: true,
            env: None,
            n_per_class,
            subsample_classes: None,
            exclude: Vec::new(),
        }
    }

    pub fn balanced_in_env(n_per_class: usize, env: usize) -> Self {
        SupportSpec {
            env: Some(env),
            ..SupportSpec::balanced(n_per_class)
        }
    }

    pub fn unbalanced(n_per_class: usize) -> Self {
        SupportSpec {
            balanced: false,
            ..SupportSpec::balanced(n_per_class)
        }
    }

    pub fn excluding(mut self, rows: &[usize]) -> Self {
        self.exclude = rows.to_vec();
        self.exclude.sort_unstable();
        self.exclude.dedup();
        self
    }

    fn keep<'a>(&self, rows: &'a [usize]) -> std::borrow::Cow<'a, [usize]> {
        if self.exclude.is_empty() {
            return rows.into();
        }
        let kept: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|i| self.exclude.binary_search(i).is_err())
            .collect();
        if kept.is_empty() {
            rows.into()
        } else {
            kept.into()
        }
    }
}

/// Dataset rows chosen for a support set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportDraw {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub envs: Vec<usize>,
}

impl SupportDraw {
    fn from_indices(ds: &Dataset, indices: Vec<usize>) -> Self {
        let labels = indices.iter().map(|&i| ds.example(i).y).collect();
        let envs = indices.iter().map(|&i| ds.example(i).e).collect();
        SupportDraw {
            indices,
            labels,
            envs,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Pairs the drawn rows with their extracted features.
    pub fn into_batch(self, features: FeatureBatch, n_classes: usize) -> Result<SupportBatch> {
        SupportBatch::new(features.0, self.labels, n_classes, self.envs, self.indices)
    }
}

/// Draws a support set for a query batch whose labels are `query_labels`.
pub fn sample_support(
    ds: &Dataset,
    spec: &SupportSpec,
    query_labels: &BTreeSet<usize>,
    rng: &mut Rng,
) -> Result<SupportDraw> {
    if spec.n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if let Some(env) = spec.env {
        if !ds.has_env(env) {
            return Err(Error::Config(format!("environment {env} not in dataset")));
        }
    }
    if let Some(&y) = query_labels.iter().find(|&&y| y >= ds.n_classes()) {
        return Err(Error::Coverage {
            env: spec.env,
            class: y,
        });
    }
    let classes: BTreeSet<usize> = match &spec.subsample_classes {
        Some(sub) => sub
            .iter()
            .copied()
            .filter(|&c| c < ds.n_classes())
            .chain(query_labels.iter().copied())
            .collect(),
        None => (0..ds.n_classes()).collect(),
    };
    let full_bucket = |c: usize| -> &[usize] {
        match spec.env {
            Some(e) => ds.env_class_indices(e, c),
            None => ds.class_indices(c),
        }
    };
    let bucket = |c: usize| spec.keep(full_bucket(c));
    for &y in query_labels {
        if full_bucket(y).is_empty() {
            return Err(Error::Coverage {
                env: spec.env,
                class: y,
            });
        }
    }

    let mut indices = Vec::new();
    if spec.balanced {
        for &c in &classes {
            let b = bucket(c);
            if b.is_empty() {
                continue;
            }
            if b.len() >= spec.n_per_class {
                indices.extend(rng.sample_indices(b.len(), spec.n_per_class).into_iter().map(|j| b[j]));
            } else {
                warn!(
                    "class {c} has {} examples (env {:?}), fewer than {}; sampling with replacement",
                    b.len(),
                    spec.env,
                    spec.n_per_class
                );
                indices.extend((0..spec.n_per_class).map(|_| b[rng.below(b.len())]));
            }
        }
    } else {
        // one per class first, then a uniform fill from the rest of the pool
        let all: Vec<usize>;
        let pool: &[usize] = match spec.env {
            Some(e) => ds.env_indices(e),
            None => {
                all = (0..ds.len()).collect();
                &all
            }
        };
        let pool: Vec<usize> = spec
            .keep(pool)
            .iter()
            .copied()
            .filter(|&i| classes.contains(&ds.example(i).y))
            .collect();
        let mut taken = BTreeSet::new();
        for &c in &classes {
            let b = bucket(c);
            if b.is_empty() {
                continue;
            }
            let pick = b[rng.below(b.len())];
            taken.insert(pick);
            indices.push(pick);
        }
        let total = spec.n_per_class * classes.len();
        let rest: Vec<usize> = pool.into_iter().filter(|i| !taken.contains(i)).collect();
        let fill = total.saturating_sub(indices.len()).min(rest.len());
        indices.extend(rng.sample_indices(rest.len(), fill).into_iter().map(|j| rest[j]));
    }
    Ok(SupportDraw::from_indices(ds, indices))
}

/// Two balanced supports, each conditioned on a different environment.
/// The environments are a uniform draw without replacement.
pub fn sample_env_pair(
    ds: &Dataset,
    n_per_class: usize,
    query_labels: &BTreeSet<usize>,
    exclude: &[usize],
    rng: &mut Rng,
) -> Result<((usize, SupportDraw), (usize, SupportDraw))> {
    let envs = ds.env_ids();
    if envs.len() < 2 {
        return Err(Error::Config(format!(
            "an environment pair needs at least 2 environments, dataset has {}",
            envs.len()
        )));
    }
    let pick = rng.sample_indices(envs.len(), 2);
    let (e1, e2) = (envs[pick[0]], envs[pick[1]]);
    let spec = |e| SupportSpec::balanced_in_env(n_per_class, e).excluding(exclude);
    let s1 = sample_support(ds, &spec(e1), query_labels, rng)?;
    let s2 = sample_support(ds, &spec(e2), query_labels, rng)?;
    Ok(((e1, s1), (e2, s2)))
}

/// `n_q` distinct dataset indices, uniformly at random.
pub fn sample_query_batch(ds: &Dataset, n_q: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_q == 0 {
        return Err(Error::Config("query batch size must be at least 1".into()));
    }
    if n_q > ds.len() {
        return Err(Error::Config(format!(
            "query batch of {n_q} exceeds dataset size {}",
            ds.len()
        )));
    }
    Ok(rng.sample_indices(ds.len(), n_q))
}

/// Query batch with `ceil(n_q / C)` examples of every class; each example's
/// environment is drawn uniformly among the environments holding that class.
pub fn sample_balanced_query_batch(ds: &Dataset, n_q: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_q == 0 {
        return Err(Error::Config("query batch size must be at least 1".into()));
    }
    let classes: Vec<usize> = (0..ds.n_classes())
        .filter(|&c| !ds.class_indices(c).is_empty())
        .collect();
    if classes.is_empty() {
        return Err(Error::Config("cannot draw queries from an empty dataset".into()));
    }
    let per_class = n_q.div_ceil(classes.len());
    let envs = ds.env_ids();
    let mut out = Vec::with_capacity(per_class * classes.len());
    for &c in &classes {
        let holding: Vec<usize> = envs
            .iter()
            .copied()
            .filter(|&e| !ds.env_class_indices(e, c).is_empty())
            .collect();
        for _ in 0..per_class {
            let e = holding[rng.below(holding.len())];
            let b = ds.env_class_indices(e, c);
            out.push(b[rng.below(b.len())]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledExample;

    fn toy() -> Dataset {
        // env 0: classes 0,1 ; env 1: classes 0,1,2
        let mut ex = Vec::new();
        for i in 0..6 {
            ex.push(LabeledExample::new(vec![i as f64], i % 2, 0));
        }
        for i in 0..9 {
            ex.push(LabeledExample::new(vec![i as f64], i % 3, 1));
        }
        Dataset::new(ex, None).unwrap()
    }

    fn labels(ls: &[usize]) -> BTreeSet<usize> {
        ls.iter().copied().collect()
    }

    #[test]
    fn balanced_counts() {
        let ds = toy();
        let d = sample_support(&ds, &SupportSpec::balanced(2), &labels(&[0]), &mut Rng::new(0)).unwrap();
        assert_eq!(d.len(), 6);
        for c in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&y| y == c).count(), 2);
        }
    }

    #[test]
    fn env_filter() {
        let ds = toy();
        let d = sample_support(&ds, &SupportSpec::balanced_in_env(2, 1), &labels(&[2]), &mut Rng::new(0)).unwrap();
        assert!(d.envs.iter().all(|&e| e == 1));
    }

    #[test]
    fn missing_bucket_is_coverage_error() {
        let ds = toy();
        let err = sample_support(&ds, &SupportSpec::balanced_in_env(2, 0), &labels(&[0, 2]), &mut Rng::new(0))
            .unwrap_err();
        assert!(matches!(err, Error::Coverage { env: Some(0), class: 2 }));
        // not required: silently skipped
        let d = sample_support(&ds, &SupportSpec::balanced_in_env(2, 0), &labels(&[0]), &mut Rng::new(0)).unwrap();
        assert_eq!(d.label_set(), labels(&[0, 1]));
    }

    #[test]
    fn unknown_label_is_coverage_error() {
        let ds = toy();
        assert!(matches!(
            sample_support(&ds, &SupportSpec::balanced(1), &labels(&[7]), &mut Rng::new(0)),
            Err(Error::Coverage { class: 7, .. })
        ));
    }

    #[test]
    fn unknown_env_is_config_error() {
        let ds = toy();
        assert!(matches!(
            sample_support(&ds, &SupportSpec::balanced_in_env(1, 9), &labels(&[0]), &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn without_replacement_when_possible() {
        let ds = toy();
        let d = sample_support(&ds, &SupportSpec::balanced_in_env(3, 0), &labels(&[0, 1]), &mut Rng::new(4)).unwrap();
        let uniq: BTreeSet<_> = d.indices.iter().collect();
        assert_eq!(uniq.len(), d.len());
    }

    #[test]
    fn small_bucket_falls_back_to_replacement() {
        let ds = toy();
        let d = sample_support(&ds, &SupportSpec::balanced_in_env(5, 0), &labels(&[0]), &mut Rng::new(4)).unwrap();
        assert_eq!(d.len(), 10);
    }

    #[test]
    fn excluded_rows_stay_out_unless_alone() {
        let ds = toy();
        let all: Vec<usize> = (0..ds.len()).collect();
        let spec = SupportSpec::balanced(2).excluding(&all[..ds.len() / 2]);
        for seed in 0..20 {
            let draw = sample_support(&ds, &spec, &labels(&[0, 1]), &mut Rng::new(seed)).unwrap();
            for (&i, &y) in draw.indices.iter().zip(&draw.labels) {
                let others_left = ds.class_indices(y).iter().any(|&j| j >= ds.len() / 2);
                assert!(!others_left || i >= ds.len() / 2);
            }
        }
        let everything = SupportSpec::balanced(2).excluding(&all);
        let draw = sample_support(&ds, &everything, &labels(&[0, 1]), &mut Rng::new(0)).unwrap();
        assert_eq!(draw.len(), 3 * 2);
    }

    #[test]
    fn subsampled_classes_include_query_labels() {
        let ds = toy();
        let spec = SupportSpec {
            subsample_classes: Some(vec![1]),
            ..SupportSpec::balanced(1)
        };
        let d = sample_support(&ds, &spec, &labels(&[2]), &mut Rng::new(0)).unwrap();
        assert_eq!(d.label_set(), labels(&[1, 2]));
    }

    #[test]
    fn unbalanced_covers_then_fills() {
        let ds = toy();
        let d = sample_support(&ds, &SupportSpec::unbalanced(2), &labels(&[2]), &mut Rng::new(1)).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.label_set(), labels(&[0, 1, 2]));
        let uniq: BTreeSet<_> = d.indices.iter().collect();
        assert_eq!(uniq.len(), 6);
    }

    #[test]
    fn env_pair_distinct() {
        let ds = toy();
        let ((e1, a), (e2, b)) = sample_env_pair(&ds, 1, &labels(&[0]), &[], &mut Rng::new(2)).unwrap();
        assert_ne!(e1, e2);
        assert!(a.envs.iter().all(|&e| e == e1));
        assert!(b.envs.iter().all(|&e| e == e2));
        let single = ds.filter_envs(&[1]);
        assert!(matches!(
            sample_env_pair(&single, 1, &labels(&[0]), &[], &mut Rng::new(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn query_batch_bounds() {
        let ds = toy();
        let mut all = sample_query_batch(&ds, ds.len(), &mut Rng::new(0)).unwrap();
        all.sort();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        assert!(sample_query_batch(&ds, ds.len() + 1, &mut Rng::new(0)).is_err());
        assert!(sample_query_batch(&ds, 0, &mut Rng::new(0)).is_err());
        assert_eq!(
            sample_query_batch(&ds, 4, &mut Rng::new(9)).unwrap(),
            sample_query_batch(&ds, 4, &mut Rng::new(9)).unwrap()
        );
    }

    #[test]
    fn balanced_queries_equal_per_class() {
        let ds = toy();
        let q = sample_balanced_query_batch(&ds, 6, &mut Rng::new(0)).unwrap();
        for c in 0..3 {
            assert_eq!(q.iter().filter(|&&i| ds.example(i).y == c).count(), 2);
        }
    }
}
