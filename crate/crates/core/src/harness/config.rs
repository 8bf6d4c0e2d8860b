//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{InferenceMode, ModeKind};
use crate::numcore::Rng;
use crate::scmgen::{label_skew_benchmark, spurious_benchmark, Benchmark};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScmRecipe {
    Spurious,
    SpuriousFlip,
    LabelSkew,
}

impl ScmRecipe {
    pub fn name(self) -> &'static str {
        match self {
            ScmRecipe::Spurious => "spurious",
            ScmRecipe::SpuriousFlip => "spurious_flip",
            ScmRecipe::LabelSkew => "label_skew",
        }
    }

    pub fn generate(self, rng: &mut Rng) -> Result<Benchmark> {
        match self {
            ScmRecipe::Spurious => spurious_benchmark(false, rng),
            ScmRecipe::SpuriousFlip => spurious_benchmark(true, rng),
            ScmRecipe::LabelSkew => label_skew_benchmark(rng),
        }
    }
}

impl std::str::FromStr for ScmRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spurious" => Ok(ScmRecipe::Spurious),
            "spurious_flip" => Ok(ScmRecipe::SpuriousFlip),
            "label_skew" => Ok(ScmRecipe::LabelSkew),
            other => Err(Error::Config(format!("unknown scm recipe '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Regenerated per seed from the seed itself.
    Scm(ScmRecipe),
    /// The same files for every seed.
    Csv {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Test-set shares of `prevalence_class` to evaluate at.
    pub prevalence_grid: Vec<f64>,
    pub prevalence_class: usize,
    pub lambda_grid: Vec<f64>,
    pub n_c_grid: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            prevalence_grid: vec![0.1, 0.3, 0.5, 0.7, 0.85],
            prevalence_class: 0,
            lambda_grid: crate::trainer::LAMBDA_GRID.to_vec(),
            n_c_grid: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// `train.seed` is overwritten per run; `train.metric` is the headline metric.
    pub train: TrainConfig,
    pub modes: Vec<InferenceMode>,
    pub n_seeds: usize,
    /// Seeds run are `base_seed .. base_seed + n_seeds`.
    pub base_seed: u64,
    pub out_dir: PathBuf,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Scm(ScmRecipe::SpuriousFlip),
            train: TrainConfig::default(),
            modes: vec![InferenceMode::new(ModeKind::Full)],
            n_seeds: 5,
            base_seed: 0,
            out_dir: PathBuf::from("runs/default"),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.base_seed + i).collect()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "data" => {
                self.data = match value {
                    "csv" => match &self.data {
                        DataSource::Csv { .. } => self.data.clone(),
                        _ => DataSource::Csv {
                            train: PathBuf::new(),
                            val: PathBuf::new(),
                            test: PathBuf::new(),
                        },
                    },
                    recipe => DataSource::Scm(recipe.parse()?),
                }
            }
            k @ ("train_csv" | "val_csv" | "test_csv") => {
                if !matches!(self.data, DataSource::Csv { .. }) {
                    self.data = DataSource::Csv {
                        train: PathBuf::new(),
                        val: PathBuf::new(),
                        test: PathBuf::new(),
                    };
                }
                if let DataSource::Csv { train, val, test } = &mut self.data {
                    let slot = match k {
                        "train_csv" => train,
                        "val_csv" => val,
                        _ => test,
                    };
                    *slot = PathBuf::from(value);
                }
            }
            "variant" => t.variant = value.parse()?,
            "lambda" => t.lambda = parse_value("lambda", value)?,
            "n_q" => t.n_q = parse_value("n_q", value)?,
            "n_c" => t.n_c = parse_value("n_c", value)?,
            "lr" => t.lr = parse_value("lr", value)?,
            "weight_decay" => t.weight_decay = parse_value("weight_decay", value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "max_epochs" => t.max_epochs = parse_value("max_epochs", value)?,
            "eval_every" => t.eval_every = parse_value("eval_every", value)?,
            "metric" => t.metric = value.parse()?,
            "hidden" => t.hidden = parse_list("hidden", value)?,
            "feature_dim" => t.feature_dim = parse_value("feature_dim", value)?,
            "lr_step_epochs" => t.lr_step_epochs = parse_value("lr_step_epochs", value)?,
            "lr_gamma" => t.lr_gamma = parse_value("lr_gamma", value)?,
            "modes" => self.modes = parse_list("modes", value)?,
            "n_seeds" => self.n_seeds = parse_value("n_seeds", value)?,
            "seed" => self.base_seed = parse_value("seed", value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "prevalence_grid" => self.sweep.prevalence_grid = parse_list("prevalence_grid", value)?,
            "prevalence_class" => self.sweep.prevalence_class = parse_value("prevalence_class", value)?,
            "lambda_grid" => self.sweep.lambda_grid = parse_list("lambda_grid", value)?,
            "n_c_grid" => self.sweep.n_c_grid = parse_list("n_c_grid", value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k, v)
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn merge_str(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected 'key = value', got '{line}'")))?;
            self.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.merge_str(text, path)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::parse_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one inference mode is required".into()));
        }
        if let DataSource::Csv { train, val, test } = &self.data {
            for (name, p) in [("train_csv", train), ("val_csv", val), ("test_csv", test)] {
                if p.as_os_str().is_empty() {
                    return Err(Error::Config(format!("data = csv needs '{name}'")));
                }
            }
        }
        if self.sweep.prevalence_grid.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("prevalence_grid values must lie in [0, 1)".into()));
        }
        self.train.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        match &self.data {
            DataSource::Scm(r) => {
                let _ = writeln!(s, "data = {}", r.name());
            }
            DataSource::Csv { train, val, test } => {
                let _ = writeln!(s, "data = csv");
                let _ = writeln!(s, "train_csv = {}", train.display());
                let _ = writeln!(s, "val_csv = {}", val.display());
                let _ = writeln!(s, "test_csv = {}", test.display());
            }
        }
        let modes: Vec<String> = self.modes.iter().map(|m| m.label()).collect();
        let lines = [
            ("variant", t.variant.name().to_string()),
            ("lambda", t.lambda.to_string()),
            ("n_q", t.n_q.to_string()),
            ("n_c", t.n_c.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("optimizer", t.optimizer.name().to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("metric", t.metric.name().to_string()),
            ("hidden", join(&t.hidden)),
            ("feature_dim", t.feature_dim.to_string()),
            ("lr_step_epochs", t.lr_step_epochs.to_string()),
            ("lr_gamma", t.lr_gamma.to_string()),
            ("modes", modes.join(",")),
            ("n_seeds", self.n_seeds.to_string()),
            ("seed", self.base_seed.to_string()),
            ("out", self.out_dir.display().to_string()),
            ("prevalence_grid", join(&self.sweep.prevalence_grid)),
            ("prevalence_class", self.sweep.prevalence_class.to_string()),
            ("lambda_grid", join(&self.sweep.lambda_grid)),
            ("n_c_grid", join(&self.sweep.n_c_grid)),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of everything but the output directory, hex encoded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# experiment\nvariant = nw_explicit  # trailing\n\nlambda = 0.1\nmodes = full, cluster:5\n";
        let mut cfg = ExperimentConfig::parse_str(text, Path::new("x.cfg")).unwrap();
        assert_eq!(cfg.train.variant, Variant::NwExplicit);
        assert_eq!(cfg.train.lambda, 0.1);
        assert_eq!(cfg.modes.len(), 2);
        assert_eq!(cfg.modes[1].k, 5);
        cfg.apply_override("lambda=1").unwrap();
        assert_eq!(cfg.train.lambda, 1.0);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let err = ExperimentConfig::parse_str("n_q = 8\nnonsense\n", Path::new("c.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = ExperimentConfig::parse_str("n_q = eight\n", Path::new("c.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = ExperimentConfig::parse_str("colour = red\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("data=csv").unwrap();
        cfg.apply_override("train_csv=a.csv").unwrap();
        cfg.apply_override("val_csv=b.csv").unwrap();
        cfg.apply_override("test_csv=c.csv").unwrap();
        cfg.apply_override("modes=knn:7,probe,hnsw").unwrap();
        cfg.apply_override("hidden=32,8").unwrap();
        cfg.apply_override("lr=0.00005").unwrap();
        let back = ExperimentConfig::parse_str(&cfg.render(), Path::new("r")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n_seeds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.modes.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("data=csv").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train.n_c = 3;
        assert_ne!(a.hash(), b.hash());
    }
}
