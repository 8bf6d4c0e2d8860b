use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One observation. Latents are kept for diagnostics only; nothing
/// model-facing reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
    pub e: usize,
    pub latent_zc: Option<Vec<f64>>,
    pub latent_zs: Option<Vec<f64>>,
}

impl LabeledExample {
    pub fn new(x: Vec<f64>, y: usize, e: usize) -> Self {
        LabeledExample {
            x,
            y,
            e,
            latent_zc: None,
            latent_zs: None,
        }
    }
}

/// Examples indexed by class, environment, and (environment, class).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    n_classes: usize,
    input_dim: usize,
    by_class: Vec<Vec<usize>>,
    by_env: BTreeMap<usize, Vec<usize>>,
    by_env_class: BTreeMap<(usize, usize), Vec<usize>>,
}

impl Dataset {
    /// `n_classes` defaults to one past the largest label.
    pub fn new(examples: Vec<LabeledExample>, n_classes: Option<usize>) -> Result<Self> {
        let input_dim = examples.first().map_or(0, |e| e.x.len());
        let max_label = examples.iter().map(|e| e.y + 1).max().unwrap_or(0);
        let n_classes = n_classes.unwrap_or(max_label);
        if max_label > n_classes {
            return Err(Error::Config(format!(
                "label {} out of range for {n_classes} classes",
                max_label - 1
            )));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        let mut by_env: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut by_env_class: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != input_dim {
                return Err(Error::shape("dataset row", &[input_dim], &[ex.x.len()]));
            }
            by_class[ex.y].push(i);
            by_env.entry(ex.e).or_default().push(i);
            by_env_class.entry((ex.e, ex.y)).or_default().push(i);
        }
        Ok(Dataset {
            examples,
            n_classes,
            input_dim,
            by_class,
            by_env,
            by_env_class,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_envs(&self) -> usize {
        self.by_env.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Environment ids present, ascending.
    pub fn env_ids(&self) -> Vec<usize> {
        self.by_env.keys().copied().collect()
    }

    pub fn has_env(&self, env: usize) -> bool {
        self.by_env.contains_key(&env)
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.by_class.get(class).map_or(&[], |v| v.as_slice())
    }

    pub fn env_indices(&self, env: usize) -> &[usize] {
        self.by_env.get(&env).map_or(&[], |v| v.as_slice())
    }

    pub fn env_class_indices(&self, env: usize, class: usize) -> &[usize] {
        self.by_env_class
            .get(&(env, class))
            .map_or(&[], |v| v.as_slice())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    pub fn envs(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.e).collect()
    }

    /// Input rows for `indices`, stacked.
    pub fn inputs(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            data.extend_from_slice(&self.examples[i].x);
        }
        Tensor::matrix(indices.len(), self.input_dim, data).expect("rows share input_dim")
    }

    pub fn all_inputs(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.inputs(&idx)
    }

    /// New dataset holding `indices` in the given order; keeps `n_classes`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Dataset::new(examples, Some(self.n_classes)).expect("subset of a valid dataset")
    }

    /// Examples from the listed environments only.
    pub fn filter_envs(&self, envs: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| envs.contains(&self.examples[i].e))
            .collect();
        self.subset(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_tile_the_examples() {
        let ex = vec![
            LabeledExample::new(vec![0.0], 0, 1),
            LabeledExample::new(vec![1.0], 1, 1),
            LabeledExample::new(vec![2.0], 1, 4),
        ];
        let ds = Dataset::new(ex, None).unwrap();
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.env_ids(), vec![1, 4]);
        let total: usize = ds.by_env_class.values().map(Vec::len).sum();
        assert_eq!(total, 3);
        assert_eq!(ds.env_class_indices(1, 1), &[1]);
        assert!(ds.env_class_indices(4, 0).is_empty());
    }

    #[test]
    fn ragged_rows_rejected() {
        let ex = vec![
            LabeledExample::new(vec![0.0], 0, 0),
            LabeledExample::new(vec![1.0, 2.0], 1, 0),
        ];
        assert!(Dataset::new(ex, None).is_err());
    }
}
