//! Python bindings: the NW head, the SCM benchmarks, checkpoints and the
//! experiment runner.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use nwinv::dataset::Dataset;
use nwinv::featnet::FeatureBatch;
use nwinv::harness::{load_checkpoint, run_experiment, ExperimentConfig, ScmRecipe};
use nwinv::infer::{build_cache, predict, InferenceMode};
use nwinv::numcore::{Rng, Tensor};
use nwinv::nwhead::{nw_predict, SupportBatch};
use nwinv::trainer::Model;
use nwinv::Error;

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(to_py)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.row_iter().map(<[f64]>::to_vec).collect()
}

type Split = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>);

fn split(ds: &Dataset) -> Split {
    (rows_of(&ds.all_inputs()), ds.labels(), ds.envs())
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<usize>, e: Vec<usize>) -> PyResult<Dataset> {
    if x.len() != y.len() || x.len() != e.len() {
        return Err(PyValueError::new_err("x, y and e must have the same length"));
    }
    let examples = x
        .into_iter()
        .zip(y.into_iter().zip(e))
        .map(|(x, (y, e))| nwinv::dataset::LabeledExample::new(x, y, e))
        .collect();
    Dataset::new(examples, None).map_err(to_py)
}

/// Class probabilities of each query under the NW head over `support`.
#[pyfunction]
fn nw_head(
    queries: Vec<Vec<f64>>,
    support: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let n = labels.len();
    let q = FeatureBatch::new(matrix(&queries)?).map_err(to_py)?;
    let s = SupportBatch::new(matrix(&support)?, labels, n_classes, vec![0; n], (0..n).collect()).map_err(to_py)?;
    let preds = nw_predict(&q, &s).map_err(to_py)?;
    Ok(preds.into_iter().map(|p| p.probs).collect())
}

/// `(train, val, test)` splits of an SCM recipe, each `(x, y, e)`.
#[pyfunction]
#[pyo3(signature = (recipe, seed=0))]
fn generate(recipe: &str, seed: u64) -> PyResult<(Split, Split, Split)> {
    let recipe: ScmRecipe = recipe.parse().map_err(to_py)?;
    let b = recipe.generate(&mut Rng::new(seed)).map_err(to_py)?;
    Ok((split(&b.train), split(&b.val), split(&b.test)))
}

/// Runs an experiment from `key = value` config text and returns the
/// summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run(py: Python<'_>, config: &str, out: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::parse_str(config, Path::new("<config>")).map_err(to_py)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let outcome = py.detach(|| run_experiment(&cfg)).map_err(to_py)?;
    outcome.summary.to_json().map_err(to_py)
}

/// A trained model loaded from a checkpoint file.
#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    seed: u64,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        let seed = ck.meta.seed;
        Ok(PyModel {
            model: ck.into_model().map_err(to_py)?,
            seed,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.seed
    }

    #[getter]
    fn is_erm(&self) -> bool {
        matches!(self.model, Model::Erm { .. })
    }

    /// Feature vectors of `x`.
    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.model.net().extract(&matrix(&x)?).map_err(to_py)?;
        Ok(rows_of(f.tensor()))
    }

    /// Class probabilities for `x` with the training set `(train_x,
    /// train_y, train_e)` as the support source.
    #[pyo3(signature = (train_x, train_y, train_e, x, mode="full", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        train_x: Vec<Vec<f64>>,
        train_y: Vec<usize>,
        train_e: Vec<usize>,
        x: Vec<Vec<f64>>,
        mode: &str,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mode: InferenceMode = mode.parse().map_err(to_py)?;
        let train = dataset(train_x, train_y, train_e)?;
        let queries = matrix(&x)?;
        let mut rng = Rng::new(seed);
        let preds = match &self.model {
            Model::Nw(net) => {
                let cache = build_cache(net, &train).map_err(to_py)?;
                let feats = net.extract(&queries).map_err(to_py)?;
                predict(&mode, &cache, &feats, &mut rng).map_err(to_py)?
            }
            Model::Erm { net, head } => {
                let feats = net.extract(&queries).map_err(to_py)?;
                nwinv::infer::probe_predictions(head, feats.tensor()).map_err(to_py)?
            }
        };
        Ok(preds.into_iter().map(|p| p.probs).collect())
    }
}

#[pymodule]
fn nwinv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(nw_head, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
