//! Prevalence, λ and N_c sweeps.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{load_splits, run_experiment, score, seed_dir};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::infer::{InferenceMode, ModeKind};
use crate::metrics::{mean_std, Metric};
use crate::numcore::Rng;
use crate::scmgen::prevalence_filter;
use crate::trainer::{train, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Prevalence,
    Lambda,
    NC,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prevalence" => Ok(SweepKind::Prevalence),
            "lambda" => Ok(SweepKind::Lambda),
            "n_c" => Ok(SweepKind::NC),
            other => Err(Error::Config(format!("unknown sweep '{other}'"))),
        }
    }
}

/// One (setting, grid point) cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub param: f64,
    pub metric_name: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Per-seed accuracy at one prevalence point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrevalencePoint {
    pub seed: u64,
    pub model: String,
    pub target: f64,
    /// Share actually reached; the unfiltered share when the target is at
    /// or above it.
    pub prevalence: f64,
    pub accuracy: f64,
    pub n_examples: usize,
}

fn class_share(ds: &Dataset, class: usize) -> f64 {
    ds.class_counts().get(class).copied().unwrap_or(0) as f64 / ds.len() as f64
}

/// Test set with `class`'s share lowered to `target` by dropping its
/// examples; unchanged when the target is not below the current share.
pub fn test_at_prevalence(test: &Dataset, class: usize, target: f64, rng: &mut Rng) -> Result<Dataset> {
    if target >= class_share(test, class) {
        Ok(test.clone())
    } else {
        prevalence_filter(test, class, target, rng)
    }
}

const PREVALENCE_MODELS: [(Variant, ModeKind); 2] = [
    (Variant::NwBalanced, ModeKind::Full),
    (Variant::NwUnbalanced, ModeKind::FullUnbalanced),
];

fn prevalence_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PrevalencePoint>> {
    let splits = load_splits(&cfg.data, seed)?;
    let class = cfg.sweep.prevalence_class;
    let mut points = Vec::new();
    for (variant, mode) in PREVALENCE_MODELS {
        let mut tcfg = cfg.train.clone();
        tcfg.variant = variant;
        tcfg.seed = seed;
        let (model, _) = train(&splits.train, &splits.val, &tcfg)?;
        let label = format!("{}/{}", variant.name(), mode.name());
        for (i, &target) in cfg.sweep.prevalence_grid.iter().enumerate() {
            let mut rng = Rng::new(seed).split_named("prevalence").split(i as u64);
            let test = test_at_prevalence(&splits.test, class, target, &mut rng)?;
            let mut eval_rng = Rng::new(seed).split_named("eval");
            let preds = model.predict(&splits.train, &test, &InferenceMode::new(mode), &mut eval_rng)?;
            points.push(PrevalencePoint {
                seed,
                model: label.clone(),
                target,
                prevalence: class_share(&test, class),
                accuracy: score(&preds, &test, Metric::Accuracy)?,
                n_examples: test.len(),
            });
        }
    }
    Ok(points)
}

fn aggregate(points: &[PrevalencePoint]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = Vec::new();
    for p in points {
        match rows.iter_mut().find(|r| r.label == p.model && r.param == p.target) {
            Some(r) => r.values.push(p.accuracy),
            None => rows.push(SweepRow {
                label: p.model.clone(),
                param: p.target,
                metric_name: Metric::Accuracy.name().into(),
                mean: 0.0,
                std: 0.0,
                values: vec![p.accuracy],
            }),
        }
    }
    for r in &mut rows {
        (r.mean, r.std) = mean_std(&r.values);
    }
    rows
}

/// Trains a balanced-support and an unbalanced-support NW model per seed
/// and scores accuracy on the OOD test set at each prevalence of
/// `prevalence_class`, lowered by dropping that class's examples.
pub fn prevalence_sweep(cfg: &ExperimentConfig) -> Result<(Vec<PrevalencePoint>, Vec<SweepRow>)> {
    cfg.validate()?;
    let per_seed: Vec<Result<Vec<PrevalencePoint>>> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| prevalence_seed(cfg, seed).map_err(|e| e.context(format!("seed {seed}"))))
        .collect();
    let mut points = Vec::new();
    for r in per_seed {
        points.extend(r?);
    }
    let rows = aggregate(&points);
    Ok((points, rows))
}

fn grid_sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    let settings: Vec<(String, f64, ExperimentConfig)> = match kind {
        SweepKind::Lambda => cfg
            .sweep
            .lambda_grid
            .iter()
            .map(|&l| {
                let mut c = cfg.clone();
                c.train.variant = Variant::NwExplicit;
                c.train.lambda = l;
                c.out_dir = cfg.out_dir.join(format!("lambda_{l}"));
                (format!("lambda={l}"), l, c)
            })
            .collect(),
        SweepKind::NC => cfg
            .sweep
            .n_c_grid
            .iter()
            .map(|&n| {
                let mut c = cfg.clone();
                c.train.n_c = n;
                c.out_dir = cfg.out_dir.join(format!("n_c_{n}"));
                (format!("n_c={n}"), n as f64, c)
            })
            .collect(),
        SweepKind::Prevalence => unreachable!("handled by prevalence_sweep"),
    };
    let mut rows = Vec::new();
    for (label, param, c) in settings {
        let out = run_experiment(&c)?;
        for m in out.summary.modes {
            rows.push(SweepRow {
                label: format!("{label}/{}", m.mode),
                param,
                metric_name: m.metric_name,
                mean: m.mean,
                std: m.std,
                values: m.values,
            });
        }
    }
    Ok(rows)
}

/// Runs `kind` and writes `<kind>_sweep.json` (plus per-seed prevalence
/// points) under the output directory.
pub fn run_sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (name, rows) = match kind {
        SweepKind::Prevalence => {
            let (points, rows) = prevalence_sweep(cfg)?;
            write_points(&cfg.out_dir, &points)?;
            ("prevalence", rows)
        }
        SweepKind::Lambda => ("lambda", grid_sweep(cfg, kind)?),
        SweepKind::NC => ("n_c", grid_sweep(cfg, kind)?),
    };
    fs::write(
        cfg.out_dir.join(format!("{name}_sweep.json")),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    Ok(rows)
}

fn write_points(out: &Path, points: &[PrevalencePoint]) -> Result<()> {
    let mut seeds: Vec<u64> = points.iter().map(|p| p.seed).collect();
    seeds.dedup();
    for seed in seeds {
        let dir = seed_dir(out, seed);
        fs::create_dir_all(&dir)?;
        let lines: Vec<String> = points
            .iter()
            .filter(|p| p.seed == seed)
            .map(serde_json::to_string)
            .collect::<std::result::Result<_, _>>()?;
        fs::write(dir.join("prevalence.jsonl"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<36} {:>8} {:>9} {:>9}\n", "setting", "param", "mean", "std");
    for r in rows {
        s += &format!("{:<36} {:>8} {:>9.4} {:>9.4}\n", r.label, r.param, r.mean, r.std);
    }
    s
}
