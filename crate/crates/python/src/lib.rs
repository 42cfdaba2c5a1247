use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use graphprior::checkpoint::{load_checkpoint, save_checkpoint};
use graphprior::dataset::{load_dataset, save_dataset, Dataset};
use graphprior::harness::{run_training, RunConfig};
use graphprior::metrics::average_precision_single;
use graphprior::synth::{generate, SynthSpec};
use graphprior::train::{evaluate, EvalResult, MetricsRow};
use graphprior::{Error, ErrorClass, Graph, RelationMatrix, RoutingConfig, Tensor};

type Matrix = Vec<Vec<f64>>;
/// `(node count, edge list, labels)`, with None for a missing label.
type GraphTuple = (usize, Vec<(usize, usize)>, Vec<Option<bool>>);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Usage => PyValueError::new_err(msg),
        ErrorClass::File => PyOSError::new_err(msg),
        ErrorClass::Integrity => PyRuntimeError::new_err(msg),
        ErrorClass::Numeric => PyArithmeticError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for graphprior::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn tensor_from(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).py()
}

/// A multi-task graph dataset with a train/test split.
#[pyclass(name = "Dataset", module = "graphprior_py", unsendable, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Planted-cluster synthetic benchmark.
    #[staticmethod]
    #[pyo3(signature = (graphs=800, tasks=6, clusters=3, n_min=10, n_max=30, edge_prob=0.2, noise=0.05, missing=0.1, train_fraction=0.75, seed=7, cluster_map=None))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        graphs: usize,
        tasks: usize,
        clusters: usize,
        n_min: usize,
        n_max: usize,
        edge_prob: f64,
        noise: f64,
        missing: f64,
        train_fraction: f64,
        seed: u64,
        cluster_map: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            num_graphs: graphs,
            n_min,
            n_max,
            edge_prob,
            num_tasks: tasks,
            num_clusters: clusters,
            cluster_map,
            label_noise: noise,
            missing_prob: missing,
            train_fraction,
            seed,
        };
        Ok(PyDataset {
            inner: generate(&spec).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_dataset(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&path, &self.inner).py().map(|_| ())
    }

    #[getter]
    fn num_graphs(&self) -> usize {
        self.inner.graphs.len()
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.inner.meta.train_graphs
    }

    #[getter]
    fn cluster_map(&self) -> Option<Vec<usize>> {
        self.inner.meta.cluster_map.clone()
    }

    /// `(node count, edge list, labels)` of graph `i`; missing labels are None.
    fn graph(&self, i: usize) -> PyResult<GraphTuple> {
        let g = self
            .inner
            .graphs
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("graph {i} out of range")))?;
        Ok((g.num_nodes(), g.edges().to_vec(), g.labels().to_vec()))
    }

    fn __len__(&self) -> usize {
        self.inner.graphs.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(graphs={}, tasks={}, train={})",
            self.inner.graphs.len(),
            self.inner.num_tasks(),
            self.inner.meta.train_graphs
        )
    }
}

fn metrics_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("l_task", r.l_task)?;
    d.set_item("l_reg", r.l_reg)?;
    d.set_item("l_rel", r.l_rel)?;
    d.set_item("l_total", r.l_total)?;
    d.set_item("ap_mean", r.ap_mean)?;
    d.set_item("awa", r.awa)?;
    d.set_item("active_adapters_mean", r.active_adapters_mean)?;
    d.set_item("trainable_params", r.trainable_params)?;
    d.set_item("epoch_ms", r.epoch_ms)?;
    d.set_item("compose_ops", r.compose_ops)?;
    Ok(d)
}

fn eval_dict<'py>(py: Python<'py>, e: &EvalResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ap_mean", e.ap_mean())?;
    d.set_item("ap_per_task", e.ap.as_ref().map(|a| a.per_task.clone()))?;
    d.set_item("awa", e.awa)?;
    d.set_item("active_adapters_mean", e.active_adapters_mean)?;
    d.set_item("trainable_params", e.trainable_params)?;
    d.set_item("total_params", e.total_params)?;
    d.set_item("compose_ops", e.ops.composition())?;
    d.set_item("adapter_ops", e.ops.adapter)?;
    d.set_item("backbone_ops", e.ops.backbone)?;
    d.set_item("logits", rows_of(&e.logits))?;
    Ok(d)
}

/// A trained model: frozen backbone, adapter bank, relation matrices and heads.
#[pyclass(name = "Model", module = "graphprior_py", unsendable, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: graphprior::Model,
    routing: RoutingConfig,
    batch_size: usize,
}

impl PyModel {
    fn routing_for(&self, tau: Option<f64>, theta: Option<f64>) -> PyResult<RoutingConfig> {
        RoutingConfig::new(tau.unwrap_or(self.routing.tau), theta.unwrap_or(self.routing.theta)).py()
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, extra) = load_checkpoint(&path).py()?;
        let get = |k: &str| extra.get(k).and_then(|v| v.parse::<f64>().ok());
        let defaults = RoutingConfig::default();
        let routing = RoutingConfig::new(
            get("routing.tau").unwrap_or(defaults.tau),
            get("routing.theta").unwrap_or(defaults.theta),
        )
        .py()?;
        let batch_size = get("train.batch_size").map_or(32, |b| b as usize);
        Ok(PyModel {
            inner,
            routing,
            batch_size,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let extra = [
            ("routing.tau".to_string(), self.routing.tau.to_string()),
            ("routing.theta".to_string(), self.routing.theta.to_string()),
            ("train.batch_size".to_string(), self.batch_size.to_string()),
        ];
        save_checkpoint(&path, &self.inner, &extra).py()
    }

    /// Metrics on the held-out split (the whole dataset if it has none).
    #[pyo3(signature = (dataset, tau=None, theta=None, batch_size=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        tau: Option<f64>,
        theta: Option<f64>,
        batch_size: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = &dataset.inner;
        let graphs = if data.test().is_empty() {
            data.train()
        } else {
            data.test()
        };
        let routing = self.routing_for(tau, theta)?;
        let result = evaluate(
            &self.inner,
            graphs,
            &routing,
            batch_size.unwrap_or(self.batch_size),
            data.meta.cluster_map.as_deref(),
        )
        .py()?;
        eval_dict(py, &result)
    }

    /// Composition weights per relation matrix, `[tasks][adapters]` each.
    #[pyo3(signature = (tau=None, theta=None))]
    fn routing(&self, tau: Option<f64>, theta: Option<f64>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let cfg = self.routing_for(tau, theta)?;
        Ok(self
            .inner
            .routing(&cfg)
            .py()?
            .iter()
            .map(|o| rows_of(&o.alpha))
            .collect())
    }

    /// `(trainable, total)` parameter counts.
    fn count_params(&self) -> (usize, usize) {
        self.inner.count_params()
    }

    #[getter]
    fn tasks(&self) -> usize {
        self.inner.config.tasks
    }

    #[getter]
    fn adapters(&self) -> usize {
        self.inner.config.adapters
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.config.rank
    }
}

/// Output of [`train`]: per-epoch metrics, held-out evaluation and the model.
#[pyclass(name = "Run", module = "graphprior_py", unsendable)]
struct PyRun {
    rows: Vec<MetricsRow>,
    eval: EvalResult,
    relation_norm: f64,
    #[pyo3(get)]
    model: PyModel,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.rows.iter().map(|r| metrics_dict(py, r)).collect()
    }

    #[getter]
    fn eval<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        eval_dict(py, &self.eval)
    }

    #[getter]
    fn alpha(&self) -> Vec<Vec<Vec<f64>>> {
        self.eval.routing.iter().map(|o| rows_of(&o.alpha)).collect()
    }

    #[getter]
    fn relation_norm(&self) -> f64 {
        self.relation_norm
    }
}

fn config_value(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    if let Ok(list) = v.extract::<Vec<usize>>() {
        return Ok(list.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    }
    Ok(v.str()?.to_string())
}

/// Pretrains the backbone, trains adapters, routing and heads, and evaluates
/// the held-out split. `config` overrides settings by name, e.g.
/// `{"epochs": 20, "tau": 0.5, "model.insertion": [0, 2]}`.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train(dataset: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<PyRun> {
    let mut cfg = RunConfig::default();
    if let Some(d) = config {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            cfg.set(&key, &config_value(&v)?).py()?;
        }
    }
    cfg.validate().py()?;
    let run = run_training(&cfg, &dataset.inner, None).py()?;
    let relation_norm = run.relation_norm();
    Ok(PyRun {
        rows: run.rows,
        eval: run.eval,
        relation_norm,
        model: PyModel {
            inner: run.model,
            routing: cfg.train.routing,
            batch_size: cfg.train.batch_size,
        },
    })
}

/// Current settings as `{name: value}` strings.
#[pyfunction]
fn default_config() -> BTreeMap<String, String> {
    RunConfig::default().entries().into_iter().collect()
}

/// Temperature softmax with a gate: returns `(alpha, active)`.
#[pyfunction]
#[pyo3(signature = (scores, tau=1.0, theta=0.0))]
fn route(scores: Vec<Vec<f64>>, tau: f64, theta: f64) -> PyResult<(Matrix, Vec<Vec<bool>>)> {
    let rm = RelationMatrix::from_tensor(tensor_from(&scores)?).py()?;
    let out = graphprior::route(&rm, &RoutingConfig::new(tau, theta).py()?).py()?;
    let k = out.adapters();
    let active = out.active.chunks(k).map(<[bool]>::to_vec).collect();
    Ok((rows_of(&out.alpha), active))
}

/// Average precision of one task; None when a class is absent.
#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(average_precision_single(&scores, &labels))
}

/// `D^-1/2 A D^-1/2` of an undirected graph as a dense matrix.
#[pyfunction]
fn normalize_adjacency(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Vec<Vec<f64>>> {
    let g = Graph::new(n, edges, Vec::new()).py()?;
    Ok(rows_of(&graphprior::normalize_adjacency(&g)))
}

#[pymodule]
fn graphprior_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_adjacency, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
