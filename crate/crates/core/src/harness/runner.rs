//! Multi-seed experiment runner and metrics records.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, save_feature_cache, Checkpoint, CheckpointMeta};
use super::config::{DataSource, ExperimentConfig};
use super::csvio::load_csv;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::infer::{build_cache, InferenceMode};
use crate::metrics::{compute_metric, mean_std, Metric};
use crate::numcore::Rng;
use crate::nwhead::PredictionSimplex;
use crate::trainer::{train, Model, TrainReport};

/// Mode label used for the parametric head of ERM models.
pub const HEAD_MODE: &str = "head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub mode: String,
    pub metric_name: String,
    pub value: f64,
    pub n_examples: usize,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub metric_name: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub modes: Vec<ModeSummary>,
    pub failures: Vec<SeedFailure>,
}

impl Summary {
    pub fn mode(&self, label: &str) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Plain-text table, one row per mode.
    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:<24} {:>9} {:>9} {:>3}\n", "mode", "metric", "mean", "std", "n");
        for m in &self.modes {
            s += &format!(
                "{:<20} {:<24} {:>9.4} {:>9.4} {:>3}\n",
                m.mode, m.metric_name, m.mean, m.std, m.n
            );
        }
        for f in &self.failures {
            s += &format!("seed {} failed: {}\n", f.seed, f.error);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

impl ExperimentOutcome {
    pub fn partial_failure(&self) -> bool {
        !self.summary.failures.is_empty()
    }
}

/// Train / OOD-validation / OOD-test data for one seed.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_splits(data: &DataSource, seed: u64) -> Result<Splits> {
    match data {
        DataSource::Scm(recipe) => {
            let b = recipe.generate(&mut Rng::new(seed))?;
            Ok(Splits {
                train: b.train,
                val: b.val,
                test: b.test,
            })
        }
        DataSource::Csv { train, val, test } => Ok(Splits {
            train: load_csv(train)?,
            val: load_csv(val)?,
            test: load_csv(test)?,
        }),
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Group ids for worst-group accuracy: environments when the set spans
/// several, otherwise labels.
pub fn metric_groups(ds: &Dataset) -> Option<Vec<usize>> {
    (ds.n_envs() > 1).then(|| ds.envs())
}

pub fn score(preds: &[PredictionSimplex], ds: &Dataset, metric: Metric) -> Result<f64> {
    compute_metric(preds, &ds.labels(), metric_groups(ds).as_deref(), metric)
}

/// Evaluates `model` on `test`: every mode for NW models, the linear head
/// for ERM models.
pub fn evaluate_model(
    model: &Model,
    train_ds: &Dataset,
    test: &Dataset,
    modes: &[InferenceMode],
    metric: Metric,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let record = |mode: String, value: f64| MetricsRecord {
        seed,
        mode,
        metric_name: metric.name().to_string(),
        value,
        n_examples: test.len(),
        timestamp: now(),
    };
    match model {
        Model::Erm { .. } => {
            let mut rng = Rng::new(seed).split_named("eval/head");
            let preds = model.predict(train_ds, test, &modes[0], &mut rng)?;
            Ok(vec![record(HEAD_MODE.to_string(), score(&preds, test, metric)?)])
        }
        Model::Nw(net) => {
            let cache = build_cache(net, train_ds)?;
            let feats = net.extract(&test.all_inputs())?;
            modes
                .iter()
                .map(|mode| {
                    let mut rng = Rng::new(seed).split_named(&format!("eval/{}", mode.label()));
                    let preds = crate::infer::predict(mode, &cache, &feats, &mut rng)
                        .map_err(|e| e.context(format!("mode {}", mode.label())))?;
                    Ok(record(mode.label(), score(&preds, test, metric)?))
                })
                .collect()
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Trains and evaluates one seed, writing its artifacts under `seed_<s>/`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<MetricsRecord>, TrainReport)> {
    let dir = seed_dir(&cfg.out_dir, seed);
    fs::create_dir_all(&dir)?;
    let splits = load_splits(&cfg.data, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let (model, report) = train(&splits.train, &splits.val, &tcfg)?;
    write_jsonl(&dir.join("curve.jsonl"), &report.history)?;
    let meta = CheckpointMeta {
        seed,
        config_hash: cfg.hash(),
        epoch: report.selected.map(|c| c.epoch),
        variant: tcfg.variant,
        val_metric: report.selected.map(|c| c.metric),
    };
    save_checkpoint(&dir.join("model.nwck"), &Checkpoint::from_model(&model, meta))?;
    if let Model::Nw(net) = &model {
        save_feature_cache(&dir.join("features.nwfc"), &build_cache(net, &splits.train)?)?;
    }
    let records = evaluate_model(&model, &splits.train, &splits.test, &cfg.modes, tcfg.metric, seed)?;
    write_jsonl(&dir.join("metrics.jsonl"), &records)?;
    Ok((records, report))
}

/// Mean and std per mode, modes in order of first appearance.
pub fn summarize_records(records: &[MetricsRecord]) -> Vec<ModeSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    for r in records {
        let key = (r.mode.clone(), r.metric_name.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(mode, metric_name)| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.mode == mode && r.metric_name == metric_name)
                .map(|r| r.value)
                .collect();
            let (mean, std) = mean_std(&values);
            ModeSummary {
                mode,
                metric_name,
                mean,
                std,
                n: values.len(),
                values,
            }
        })
        .collect()
}

/// Runs every seed (in parallel), then writes `config.txt`,
/// `metrics.jsonl` and `summary.json` under the output directory. A
/// failing seed is recorded and the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.render())?;
    let results: Vec<(u64, Result<Vec<MetricsRecord>>)> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| (seed, run_seed(cfg, seed).map(|(r, _)| r)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(r) => records.extend(r),
            Err(e) => {
                error!("seed {seed} failed: {e}");
                let dir = seed_dir(&cfg.out_dir, seed);
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("error.txt"), format!("{e}\n"))?;
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let summary = Summary {
        modes: summarize_records(&records),
        failures,
    };
    write_jsonl(&cfg.out_dir.join("metrics.jsonl"), &records)?;
    fs::write(cfg.out_dir.join("summary.json"), summary.to_json()?)?;
    info!("{}: {} records, {} failed seeds", cfg.out_dir.display(), records.len(), summary.failures.len());
    Ok(ExperimentOutcome { records, summary })
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Rebuilds the summary from completed per-seed records under `dir`;
/// seeds without a `metrics.jsonl` are listed as failures if they left an
/// `error.txt`, and skipped otherwise.
pub fn summarize_dir(dir: &Path) -> Result<Summary> {
    let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(s) = name.strip_prefix("seed_").and_then(|s| s.parse().ok()) {
            seeds.push((s, entry.path()));
        }
    }
    seeds.sort();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, path) in seeds {
        let m = path.join("metrics.jsonl");
        if m.exists() {
            records.extend(read_records(&m)?);
        } else if let Ok(err) = fs::read_to_string(path.join("error.txt")) {
            failures.push(SeedFailure {
                seed,
                error: err.trim().to_string(),
            });
        }
    }
    Ok(Summary {
        modes: summarize_records(&records),
        failures,
    })
}

/// A record's JSON with the timestamp removed, for determinism checks.
pub fn strip_timestamp(line: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(line)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
    Ok(serde_json::to_string(&v)?)
}
