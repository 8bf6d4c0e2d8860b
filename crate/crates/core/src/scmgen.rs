//! Synthetic data from a linear-Gaussian structural causal model.
//!
//! Graph: `E → Y`, `Y → Z_C`, `{Y, E} → Z_S`, `(Z_C, Z_S) → X`. The content
//! latent depends on the label only, so `P(Y | Z_C)` is the same in every
//! environment; the style latent also depends on the environment. `X` is an
//! injective linear image of the concatenated latents.

use crate::dataset::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ScmConfig {
    pub env_prior: Vec<f64>,
    /// `label_prior_per_env[e][y] = P(Y = y | E = e)`.
    pub label_prior_per_env: Vec<Vec<f64>>,
    /// `content_means[y]`, length `d_C`.
    pub content_means: Vec<Vec<f64>>,
    /// `style_means[y][e]`, length `d_S`.
    pub style_means: Vec<Vec<Vec<f64>>>,
    pub noise_std: f64,
    /// `(d_C + d_S) × d_X`; `x = [z_C, z_S] · mix`.
    pub mix_matrix: Tensor,
    pub ood_env_ids: Vec<usize>,
}

impl ScmConfig {
    pub fn n_envs(&self) -> usize {
        self.env_prior.len()
    }

    pub fn n_classes(&self) -> usize {
        self.content_means.len()
    }

    pub fn content_dim(&self) -> usize {
        self.content_means[0].len()
    }

    pub fn style_dim(&self) -> usize {
        self.style_means[0][0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.mix_matrix.cols()
    }

    pub fn train_env_ids(&self) -> Vec<usize> {
        (0..self.n_envs())
            .filter(|e| !self.ood_env_ids.contains(e))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n_envs = self.n_envs();
        let n_classes = self.n_classes();
        if n_envs == 0 || n_classes == 0 {
            return Err(Error::Config("need at least one environment and one class".into()));
        }
        check_simplex(&self.env_prior, "env_prior")?;
        if self.label_prior_per_env.len() != n_envs {
            return Err(Error::Config("label_prior_per_env needs one row per environment".into()));
        }
        for (e, p) in self.label_prior_per_env.iter().enumerate() {
            if p.len() != n_classes {
                return Err(Error::Config(format!("label prior of env {e} has wrong length")));
            }
            check_simplex(p, "label_prior_per_env")?;
        }
        let d_c = self.content_dim();
        if self.content_means.iter().any(|m| m.len() != d_c) {
            return Err(Error::Config("content means differ in length".into()));
        }
        if self.style_means.len() != n_classes {
            return Err(Error::Config("style_means needs one entry per class".into()));
        }
        let d_s = self.style_dim();
        for per_env in &self.style_means {
            if per_env.len() != n_envs || per_env.iter().any(|m| m.len() != d_s) {
                return Err(Error::Config("style_means must be class × env × d_S".into()));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if self.mix_matrix.rows() != d_c + d_s || self.mix_matrix.shape().len() != 2 {
            return Err(Error::shape("mix_matrix", self.mix_matrix.shape(), &[d_c + d_s, 0]));
        }
        let r = rank(&self.mix_matrix);
        if r != d_c + d_s {
            return Err(Error::Config(format!(
                "mix_matrix must have rank {} to be injective, has rank {r}",
                d_c + d_s
            )));
        }
        if self.ood_env_ids.iter().any(|&e| e >= n_envs) {
            return Err(Error::Config("ood_env_ids out of range".into()));
        }
        Ok(())
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Config(format!("{what} is not a probability vector: {p:?}")));
    }
    Ok(())
}

/// Row rank by modified Gram-Schmidt.
pub fn rank(m: &Tensor) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in m.row_iter() {
        let mut v = row.to_vec();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        if norm > 1e-10 * scale {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.len()
}

/// `k` orthonormal vectors in `R^d` (`k <= d`) from Gaussian draws.
pub fn random_orthonormal(k: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    assert!(k <= d);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Draws `n` examples from the listed environments.
pub fn sample_dataset(cfg: &ScmConfig, n: usize, envs: &[usize], rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    if envs.is_empty() {
        return Err(Error::Config("need at least one environment to sample from".into()));
    }
    for &e in envs {
        if e >= cfg.n_envs() {
            return Err(Error::Config(format!("environment {e} not in config")));
        }
        if cfg.env_prior[e] == 0.0 {
            return Err(Error::Config(format!("environment {e} has zero prior probability")));
        }
    }
    let weights: Vec<f64> = envs.iter().map(|&e| cfg.env_prior[e]).collect();
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let e = envs[rng.categorical(&weights)];
        let y = rng.categorical(&cfg.label_prior_per_env[e]);
        examples.push(draw_example(cfg, y, e, rng));
    }
    Dataset::new(examples, Some(cfg.n_classes()))
}

fn draw_example(cfg: &ScmConfig, y: usize, e: usize, rng: &mut Rng) -> LabeledExample {
    let sigma = cfg.noise_std;
    let zc: Vec<f64> = cfg.content_means[y]
        .iter()
        .map(|m| m + sigma * rng.normal())
        .collect();
    let zs: Vec<f64> = cfg.style_means[y][e]
        .iter()
        .map(|m| m + sigma * rng.normal())
        .collect();
    let x = mix(&cfg.mix_matrix, &zc, &zs);
    LabeledExample {
        x,
        y,
        e,
        latent_zc: Some(zc),
        latent_zs: Some(zs),
    }
}

/// `[z_C, z_S] · mix`.
pub fn mix(m: &Tensor, zc: &[f64], zs: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; m.cols()];
    for (i, z) in zc.iter().chain(zs).enumerate() {
        for (xv, mv) in x.iter_mut().zip(m.row(i)) {
            *xv += z * mv;
        }
    }
    x
}

/// Train / OOD-validation / OOD-test splits plus the generating config.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: ScmConfig,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub const SPURIOUS_TRAIN_ENVS: [usize; 3] = [0, 1, 2];
pub const SPURIOUS_VAL_ENV: usize = 3;
pub const SPURIOUS_TEST_ENV: usize = 4;
const SPURIOUS_CONTENT_GAP: f64 = 3.4;
const SPURIOUS_STYLE_OFFSET: f64 = 3.0;
/// `P(Y = 1 | E = e)` for the training environments.
const SPURIOUS_TRAIN_PREVALENCE: [f64; 3] = [0.9, 0.95, 0.98];
const SPURIOUS_FLIPPED_PREVALENCE: f64 = 0.1;
const BENCH_TRAIN: usize = 3000;
const BENCH_VAL: usize = 1000;
const BENCH_TEST: usize = 2000;

fn signed(y: usize) -> f64 {
    if y == 1 {
        1.0
    } else {
        -1.0
    }
}

fn binary_prior(p1: f64) -> Vec<f64> {
    vec![1.0 - p1, p1]
}

/// Two classes, `d_C = d_S = 4`, `d_X = 16`, unit noise.
///
/// Content means are `±1.7 v` for one random direction `v`, identical in
/// every environment. Style is an environment signature `3 u_e` with
/// `u_0, u_1, u_2` orthonormal, and class 1 holds 90%, 95% and 98% of the
/// three training environments, so pooled over training data the
/// signature predicts the label through the environment. The validation
/// environment sits at `-(u_0 + u_1 + u_2) / √3` with balanced labels. The
/// test environment gets a fresh random signature; with `flip_ood` class 1
/// drops to 10% there, otherwise labels are balanced.
pub fn spurious_config(flip_ood: bool, rng: &mut Rng) -> ScmConfig {
    let (d_c, d_s, d_x) = (4, 4, 16);
    let v = random_orthonormal(1, d_c, rng).remove(0);
    let u = random_orthonormal(d_s, d_s, rng);
    let test_sig = random_orthonormal(1, d_s, rng).remove(0);
    let val_sig: Vec<f64> = (0..d_s)
        .map(|j| -(u[0][j] + u[1][j] + u[2][j]) / 3f64.sqrt())
        .collect();
    let signatures = [&u[0], &u[1], &u[2], &val_sig, &test_sig];
    let env_style: Vec<Vec<f64>> = signatures
        .iter()
        .map(|d| d.iter().map(|x| SPURIOUS_STYLE_OFFSET * x).collect())
        .collect();
    let content_means = (0..2)
        .map(|y| v.iter().map(|x| signed(y) * SPURIOUS_CONTENT_GAP / 2.0 * x).collect())
        .collect();
    let basis = random_orthonormal(d_c + d_s, d_x, rng);
    let mut label_prior_per_env: Vec<Vec<f64>> =
        SPURIOUS_TRAIN_PREVALENCE.iter().map(|&p| binary_prior(p)).collect();
    label_prior_per_env.push(binary_prior(0.5));
    label_prior_per_env.push(binary_prior(if flip_ood { SPURIOUS_FLIPPED_PREVALENCE } else { 0.5 }));
    ScmConfig {
        env_prior: vec![0.2; 5],
        label_prior_per_env,
        content_means,
        style_means: vec![env_style.clone(), env_style],
        noise_std: 1.0,
        mix_matrix: Tensor::from_rows(&basis).expect("orthonormal rows"),
        ood_env_ids: vec![SPURIOUS_VAL_ENV, SPURIOUS_TEST_ENV],
    }
}

/// Desk-scale benchmark with a spurious style shortcut: three training
/// environments, one OOD validation and one OOD test environment.
pub fn spurious_benchmark(flip_ood: bool, rng: &mut Rng) -> Result<Benchmark> {
    let config = spurious_config(flip_ood, &mut rng.split_named("config"));
    let mut data_rng = rng.split_named("data");
    let train = sample_dataset(&config, BENCH_TRAIN, &SPURIOUS_TRAIN_ENVS, &mut data_rng)?;
    let val = sample_dataset(&config, BENCH_VAL, &[SPURIOUS_VAL_ENV], &mut data_rng)?;
    let test = sample_dataset(&config, BENCH_TEST, &[SPURIOUS_TEST_ENV], &mut data_rng)?;
    Ok(Benchmark {
        config,
        train,
        val,
        test,
    })
}

const SKEW_CONTENT_GAP: f64 = 2.0;
const SKEW_TEST: usize = 4000;

/// Label-skewed benchmark: class 0 makes up roughly 85% of every
/// environment, content classes overlap (gap of 2 noise units), and style
/// carries only an environment offset.
pub fn label_skew_config(rng: &mut Rng) -> ScmConfig {
    let (d_c, d_s, d_x) = (4, 4, 16);
    let v = &random_orthonormal(1, d_c, rng)[0];
    let offsets: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..d_s).map(|_| rng.normal()).collect())
        .collect();
    let content_means = (0..2)
        .map(|y| v.iter().map(|x| signed(y) * SKEW_CONTENT_GAP / 2.0 * x).collect())
        .collect();
    let style_means = (0..2).map(|_| offsets.clone()).collect();
    let basis = random_orthonormal(d_c + d_s, d_x, rng);
    ScmConfig {
        env_prior: vec![0.2; 5],
        label_prior_per_env: vec![
            vec![0.8, 0.2],
            vec![0.85, 0.15],
            vec![0.9, 0.1],
            vec![0.85, 0.15],
            vec![0.85, 0.15],
        ],
        content_means,
        style_means,
        noise_std: 1.0,
        mix_matrix: Tensor::from_rows(&basis).expect("orthonormal rows"),
        ood_env_ids: vec![3, 4],
    }
}

pub fn label_skew_benchmark(rng: &mut Rng) -> Result<Benchmark> {
    let config = label_skew_config(&mut rng.split_named("config"));
    let mut data_rng = rng.split_named("data");
    let train = sample_dataset(&config, BENCH_TRAIN, &[0, 1, 2], &mut data_rng)?;
    let val = sample_dataset(&config, BENCH_VAL, &[3], &mut data_rng)?;
    let test = sample_dataset(&config, SKEW_TEST, &[4], &mut data_rng)?;
    Ok(Benchmark {
        config,
        train,
        val,
        test,
    })
}

/// Removes uniformly chosen examples of `class_id` until its share of the
/// dataset is `target` (to within one example).
pub fn prevalence_filter(ds: &Dataset, class_id: usize, target: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!("target prevalence {target} must be in [0, 1)")));
    }
    let n = ds.len() as f64;
    let members = ds.class_indices(class_id);
    let count = members.len() as f64;
    if ds.is_empty() {
        return Err(Error::Config("cannot filter an empty dataset".into()));
    }
    let current = count / n;
    if target > current + 0.5 / n {
        return Err(Error::Config(format!(
            "class {class_id} share is {current:.4}; raising it to {target} would require removing other classes"
        )));
    }
    let remove = ((count - target * n) / (1.0 - target)).round().clamp(0.0, count) as usize;
    if remove == 0 {
        return Ok(ds.clone());
    }
    let mut drop = vec![false; ds.len()];
    for j in rng.sample_indices(members.len(), remove) {
        drop[members[j]] = true;
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| !drop[i]).collect();
    Ok(ds.subset(&keep))
}
