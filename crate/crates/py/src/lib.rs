//! Python bindings: embedding sets and OODF files, losses, training, scoring,
//! the R² index and the rank metrics.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use marginlab::analysis::{self, LabeledFeatureSet};
use marginlab::datagen::{self, BenchmarkConfig};
use marginlab::experiment::{self, SweepConfig};
use marginlab::io;
use marginlab::metrics;
use marginlab::model::{self, Checkpoint, TrainConfig};
use marginlab::scoring::{self, ScorerKind, ScoringOptions};
use marginlab::{Error, LossSpec, Matrix, PairTarget};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(err) => PyOSError::new_err(err.to_string()),
        Error::Diverged { .. } | Error::Fit(_) | Error::NotPositiveDefinite { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// Labelled feature rows with optional per-sample OOD flags.
#[pyclass(module = "marginlab", name = "EmbeddingSet", from_py_object)]
#[derive(Clone)]
struct PyEmbeddingSet {
    inner: marginlab::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    #[new]
    #[pyo3(signature = (features, labels, ood_flags=None))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<i32>, ood_flags: Option<Vec<bool>>) -> PyResult<Self> {
        let mut set = marginlab::EmbeddingSet::new(matrix(features)?, labels).map_err(to_py)?;
        if let Some(flags) = ood_flags {
            set = set.with_ood_flags(flags).map_err(to_py)?;
        }
        Ok(Self { inner: set })
    }

    /// Reads an OODF or CSV file.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        io::read_embedding_set(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io::write_oodf(&self.inner, path).map_err(to_py)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        io::encode_oodf(&self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        io::decode_oodf(&data, "<bytes>").map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.features())
    }

    #[getter]
    fn labels(&self) -> Vec<i32> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn ood_flags(&self) -> Option<Vec<bool>> {
        self.inner.ood_flags().map(<[bool]>::to_vec)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn class_ids(&self) -> Vec<i32> {
        self.inner.class_ids()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingSet(n={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// Pre-training pool, support set and flagged test set.
#[pyclass(module = "marginlab", name = "Benchmark", get_all)]
struct PyBenchmark {
    pretrain: PyEmbeddingSet,
    support: PyEmbeddingSet,
    test: PyEmbeddingSet,
}

/// Generates a synthetic benchmark; keyword arguments override the default config.
#[pyfunction]
#[pyo3(signature = (
    seed=0,
    input_dim=None,
    n_pretrain_classes=None,
    n_known_classes=None,
    n_unknown_classes=None,
    pretrain_per_class=None,
    support_per_class=None,
    test_per_class=None,
    class_mean_scale=None,
    within_class_std=None,
    shift=None,
))]
#[allow(clippy::too_many_arguments)]
fn gen_benchmark(
    seed: u64,
    input_dim: Option<usize>,
    n_pretrain_classes: Option<usize>,
    n_known_classes: Option<usize>,
    n_unknown_classes: Option<usize>,
    pretrain_per_class: Option<usize>,
    support_per_class: Option<usize>,
    test_per_class: Option<usize>,
    class_mean_scale: Option<f64>,
    within_class_std: Option<f64>,
    shift: Option<&str>,
) -> PyResult<PyBenchmark> {
    let d = BenchmarkConfig::default();
    let mut cfg = BenchmarkConfig {
        input_dim: input_dim.unwrap_or(d.input_dim),
        n_pretrain_classes: n_pretrain_classes.unwrap_or(d.n_pretrain_classes),
        n_known_classes: n_known_classes.unwrap_or(d.n_known_classes),
        n_unknown_classes: n_unknown_classes.unwrap_or(d.n_unknown_classes),
        pretrain_per_class: pretrain_per_class.unwrap_or(d.pretrain_per_class),
        support_per_class: support_per_class.unwrap_or(d.support_per_class),
        test_per_class: test_per_class.unwrap_or(d.test_per_class),
        class_mean_scale: class_mean_scale.unwrap_or(d.class_mean_scale),
        within_class_std: within_class_std.unwrap_or(d.within_class_std),
        shift: None,
        seed,
    };
    if let Some(spec) = shift {
        let spec = spec.parse().map_err(to_py)?;
        cfg.shift = Some(datagen::DomainShift::from_spec(cfg.input_dim, &spec, seed).map_err(to_py)?);
    }
    let split = datagen::gen_benchmark(&cfg).map_err(to_py)?;
    Ok(PyBenchmark {
        pretrain: PyEmbeddingSet { inner: split.pretrain },
        support: PyEmbeddingSet { inner: split.support },
        test: PyEmbeddingSet { inner: split.test },
    })
}

/// A pair loss parsed from `bce`, `sce`, `focal:g=2`, `mse:c=10` or `hinge:d=0.01`.
#[pyclass(module = "marginlab", name = "LossSpec", from_py_object)]
#[derive(Clone)]
struct PyLossSpec {
    inner: LossSpec,
}

#[pymethods]
impl PyLossSpec {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        spec.parse().map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    #[getter]
    fn hyperparam(&self) -> Option<f64> {
        self.inner.hyperparam()
    }

    #[getter]
    fn head_outputs(&self) -> usize {
        self.inner.head_outputs()
    }

    /// Loss value and gradient with respect to the head output.
    fn evaluate(&self, output: Vec<f64>, same: bool) -> PyResult<(f64, Vec<f64>)> {
        let out = self.inner.evaluate(&output, PairTarget::new(same)).map_err(to_py)?;
        Ok((out.value, out.grad))
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("LossSpec({:?})", self.inner.to_string())
    }
}

/// A trained relational model (checkpoint).
#[pyclass(module = "marginlab", name = "Model")]
struct PyModel {
    ckpt: Checkpoint,
    loss_curve: Vec<f64>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = model::load_checkpoint(path).map_err(to_py)?;
        Ok(Self { ckpt, loss_curve: Vec::new() })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.ckpt, path).map_err(to_py)
    }

    #[getter]
    fn loss(&self) -> String {
        self.ckpt.config.loss.to_string()
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.ckpt.final_loss
    }

    /// Mean training loss per epoch (empty for a loaded checkpoint).
    #[getter]
    fn loss_curve(&self) -> Vec<f64> {
        self.loss_curve.clone()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.ckpt.params.param_count()
    }

    fn encode(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.ckpt.params.encode(&x).map_err(to_py)
    }

    /// Pair features and head output for two inputs.
    fn forward_pair(&self, xi: Vec<f64>, xj: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let out = self.ckpt.params.forward_pair(&xi, &xj).map_err(to_py)?;
        Ok((out.features, out.score))
    }

    /// R² index of pair features on `n_pairs` pairs sampled from `set`.
    #[pyo3(signature = (set, n_pairs=1000, seed=0))]
    fn r2(&self, py: Python<'_>, set: &PyEmbeddingSet, n_pairs: usize, seed: u64) -> PyResult<Py<PyDict>> {
        let mut rng = marginlab::Rng::derive(seed, 20);
        let pairs = model::sample_pairs(&set.inner, n_pairs, &mut rng).map_err(to_py)?;
        let rep = analysis::r2_of_pairs(&self.ckpt.params, &pairs).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("r2", rep.r2)?;
        d.set_item("d_within", rep.d_within)?;
        d.set_item("d_total", rep.d_total)?;
        Ok(d.unbind())
    }
}

/// Trains a relational model on `pretrain`.
#[pyfunction]
#[pyo3(signature = (pretrain, loss, seed=0, epochs=None, learning_rate=None, pairs_per_epoch=None))]
fn train(
    py: Python<'_>,
    pretrain: &PyEmbeddingSet,
    loss: &str,
    seed: u64,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    pairs_per_epoch: Option<usize>,
) -> PyResult<PyModel> {
    let spec: LossSpec = loss.parse().map_err(to_py)?;
    let mut cfg = TrainConfig::new(spec, seed);
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(p) = pairs_per_epoch {
        cfg.pairs_per_epoch = p;
    }
    let data = pretrain.inner.clone();
    let outcome = py.detach(move || model::train(&cfg, &data)).map_err(to_py)?;
    Ok(PyModel {
        ckpt: outcome.checkpoint,
        loss_curve: outcome.loss_curve,
    })
}

/// Result of scoring a test set with one scorer.
#[pyclass(module = "marginlab", name = "EvalReport", get_all)]
struct PyEvalReport {
    scorer: String,
    auroc: f64,
    fpr_at_tpr95: f64,
    n_comp: usize,
    comparisons_performed: u64,
    scores: Vec<f64>,
    is_ood: Vec<bool>,
}

/// Scores `test` against `support` with `scorer` (`proto-msp`, `knn` or `mahalanobis`).
#[pyfunction]
#[pyo3(signature = (model, support, test, scorer="proto-msp", k=1, normalize=true))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    support: &PyEmbeddingSet,
    test: &PyEmbeddingSet,
    scorer: &str,
    k: usize,
    normalize: bool,
) -> PyResult<PyEvalReport> {
    let kind: ScorerKind = scorer.parse().map_err(to_py)?;
    let opts = ScoringOptions {
        k,
        normalize,
        ..ScoringOptions::default()
    };
    let rep = py
        .detach(|| scoring::evaluate(kind, &model.ckpt.params, &support.inner, &test.inner, &opts))
        .map_err(to_py)?;
    Ok(PyEvalReport {
        scorer: rep.scorer.to_string(),
        auroc: rep.auroc,
        fpr_at_tpr95: rep.fpr_at_tpr95,
        n_comp: rep.n_comp_per_test,
        comparisons_performed: rep.comparisons_performed,
        scores: rep.scores,
        is_ood: rep.is_ood,
    })
}

/// R² index of labelled feature rows under cosine distance: `(r2, d_within, d_total)`.
#[pyfunction]
fn r2_index(features: Vec<Vec<f64>>, labels: Vec<i32>) -> PyResult<(f64, f64, f64)> {
    let set = LabeledFeatureSet::new(matrix(features)?, labels).map_err(to_py)?;
    let rep = analysis::r2_index(&set).map_err(to_py)?;
    Ok((rep.r2, rep.d_within, rep.d_total))
}

#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&id_scores, &ood_scores).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (id_scores, ood_scores, level=0.95))]
fn fpr_at_tpr(id_scores: Vec<f64>, ood_scores: Vec<f64>, level: f64) -> PyResult<f64> {
    metrics::fpr_at_tpr(&id_scores, &ood_scores, level).map_err(to_py)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&x, &y).map_err(to_py)
}

/// Runs a loss × seed sweep on the default benchmark; returns one dict per row.
#[pyfunction]
#[pyo3(signature = (losses=None, seeds=None, scorers=None, epochs=None))]
fn sweep(
    py: Python<'_>,
    losses: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    scorers: Option<Vec<String>>,
    epochs: Option<usize>,
) -> PyResult<Vec<Py<PyDict>>> {
    let mut cfg = SweepConfig::default();
    if let Some(l) = losses {
        cfg.losses = l.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(to_py)?;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(s) = scorers {
        cfg.scorers = s.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(to_py)?;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let threads = experiment::sweep_threads().map_err(to_py)?;
    let result = py.detach(|| experiment::run_sweep(&cfg, threads)).map_err(to_py)?;
    result
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("loss", &r.loss)?;
            d.set_item("seed", r.seed)?;
            d.set_item("scorer", r.scorer.name())?;
            d.set_item("status", r.status.name())?;
            d.set_item("r2", r.r2)?;
            d.set_item("auroc", r.auroc)?;
            d.set_item("fpr95", r.fpr95)?;
            d.set_item("n_comp", r.n_comp)?;
            Ok(d.unbind())
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "marginlab")]
fn marginlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyBenchmark>()?;
    m.add_class::<PyLossSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(gen_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(r2_index, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
