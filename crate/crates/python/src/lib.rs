//! Python bindings: datasets, the split, samplers, training, scoring,
//! evaluation, and the k-NN and frequency baselines.

use std::path::PathBuf;

use graphimpute::baselines::{frequency_baseline, knn_impute, Distance, KnnConfig};
use graphimpute::evaluation::{evaluate, CutoffPolicy, GraphScorer, MetricsReport, RowScorer};
use graphimpute::model::{score_edges, GraphImputer, ModelConfig};
use graphimpute::sampler::{sample_batch, NegativeSampler, DEFAULT_MAX_REPAIR_SWEEPS};
use graphimpute::training::{balanced_bce, fit, TrainConfig};
use graphimpute::{checkpoint, dataset, pipeline, Error, Pair};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_)
        | Error::OutOfRange(_)
        | Error::UnknownPolicy(_)
        | Error::Config(_)
        | Error::ShapeMismatch(_)
        | Error::EmptyBatch
        | Error::EdgeNotFound { .. }
        | Error::InfeasibleNegatives { .. }
        | Error::MissingDemographics(_)
        | Error::EmptyAfterFiltering
        | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for graphimpute::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn rows_to_array(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Array2<f64>> {
    let m = rows.len();
    let mut flat = Vec::with_capacity(m * cols);
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != cols {
            return Err(PyValueError::new_err(format!("row {i} has {} values, expected {cols}", r.len())));
        }
        flat.extend(r);
    }
    Array2::from_shape_vec((m, cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_policy(cutoff: &str) -> PyResult<CutoffPolicy> {
    cutoff.parse().py()
}

fn parse_sampler(name: &str) -> PyResult<NegativeSampler> {
    match name {
        "uniform" => Ok(NegativeSampler::Uniform),
        "degree-preserving" | "degree_preserving" => Ok(NegativeSampler::DegreePreserving),
        other => Err(PyValueError::new_err(format!(
            "unknown sampler `{other}` (expected uniform or degree-preserving)"
        ))),
    }
}

/// Binary patient x event matrix stored as its positive entries.
#[pyclass(name = "Dataset", module = "pygraphimpute", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    /// `demographics` holds one `[age, sex]` row per patient.
    #[new]
    fn new(num_patients: usize, num_events: usize, positives: Vec<Pair>, demographics: Vec<Vec<f64>>) -> PyResult<Self> {
        let cols = demographics.first().map_or(2, Vec::len);
        let demo = rows_to_array(demographics, cols)?;
        Ok(Self { inner: dataset::Dataset::new(num_patients, num_events, positives, demo).py()? })
    }

    #[staticmethod]
    fn load_triplets(triplets: PathBuf, demographics: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: graphimpute::load_triplets(&triplets, &demographics).py()? })
    }

    #[getter]
    fn num_patients(&self) -> usize {
        self.inner.num_patients
    }

    #[getter]
    fn num_events(&self) -> usize {
        self.inner.num_events
    }

    #[getter]
    fn density(&self) -> f64 {
        self.inner.density()
    }

    fn positives(&self) -> Vec<Pair> {
        self.inner.positives().to_vec()
    }

    fn demographics(&self) -> Vec<Vec<f64>> {
        array_to_rows(&self.inner.demographics)
    }

    fn event_frequencies(&self) -> Vec<f64> {
        self.inner.event_frequencies()
    }

    fn event_labels(&self) -> Vec<String> {
        (0..self.inner.num_events).map(|j| self.inner.event_label(j)).collect()
    }

    fn filter_rare_events(&self, min_event_frequency: f64) -> PyResult<(PyDataset, Vec<Option<usize>>)> {
        let (d, map) = graphimpute::filter_rare_events(&self.inner, min_event_frequency).py()?;
        Ok((PyDataset { inner: d }, map))
    }

    fn __len__(&self) -> usize {
        self.inner.num_positives()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(num_patients={}, num_events={}, positives={})",
            self.inner.num_patients,
            self.inner.num_events,
            self.inner.num_positives()
        )
    }
}

/// Train patients, test patients with masked positives, and the masked
/// (held-out) entries.
#[pyclass(name = "SplitDataset", module = "pygraphimpute")]
pub struct PySplit {
    inner: dataset::SplitDataset,
}

#[pymethods]
impl PySplit {
    #[getter]
    fn train(&self) -> PyDataset {
        PyDataset { inner: self.inner.train.clone() }
    }

    #[getter]
    fn test_visible(&self) -> PyDataset {
        PyDataset { inner: self.inner.test_visible.clone() }
    }

    #[getter]
    fn test_heldout(&self) -> Vec<Pair> {
        self.inner.test_heldout.clone()
    }

    #[getter]
    fn event_index_map(&self) -> Vec<Option<usize>> {
        self.inner.event_index_map.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (patients, events, rank, density, seed = 0))]
fn generate_synthetic(patients: usize, events: usize, rank: usize, density: f64, seed: u64) -> PyResult<(PyDataset, Vec<Pair>)> {
    let spec = dataset::SyntheticSpec { patients, events, rank, density };
    let (d, truth) = graphimpute::generate_synthetic(&spec, seed).py()?;
    Ok((PyDataset { inner: d }, truth))
}

#[pyfunction]
#[pyo3(signature = (data, train_fraction = 0.7, test_mask_fraction = 0.3, min_event_frequency = 0.001, seed = 0))]
fn split(
    data: &PyDataset,
    train_fraction: f64,
    test_mask_fraction: f64,
    min_event_frequency: f64,
    seed: u64,
) -> PyResult<PySplit> {
    let spec = dataset::SplitSpec { train_fraction, test_mask_fraction, min_event_frequency, seed };
    Ok(PySplit { inner: graphimpute::split(&data.inner, &spec).py()? })
}

/// Bipartite patient-event graph with adjacency in both directions.
#[pyclass(name = "BipartiteGraph", module = "pygraphimpute")]
pub struct PyGraph {
    inner: graphimpute::BipartiteGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(positives: Vec<Pair>, num_patients: usize, num_events: usize) -> PyResult<Self> {
        Ok(Self { inner: graphimpute::BipartiteGraph::build(&positives, num_patients, num_events).py()? })
    }

    #[staticmethod]
    fn from_dataset(data: &PyDataset) -> PyResult<Self> {
        let d = &data.inner;
        Self::new(d.positives().to_vec(), d.num_patients, d.num_events)
    }

    #[getter]
    fn num_patients(&self) -> usize {
        self.inner.num_patients()
    }

    #[getter]
    fn num_events(&self) -> usize {
        self.inner.num_events()
    }

    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn contains(&self, patient: usize, event: usize) -> bool {
        self.inner.contains(patient, event)
    }

    fn patient_neighbors(&self, patient: usize) -> PyResult<Vec<usize>> {
        if patient >= self.inner.num_patients() {
            return Err(PyValueError::new_err(format!("patient {patient} out of range")));
        }
        Ok(self.inner.patient_neighbors(patient).to_vec())
    }

    fn event_neighbors(&self, event: usize) -> PyResult<Vec<usize>> {
        if event >= self.inner.num_events() {
            return Err(PyValueError::new_err(format!("event {event} out of range")));
        }
        Ok(self.inner.event_neighbors(event).to_vec())
    }

    fn patient_degrees(&self) -> Vec<usize> {
        self.inner.patient_degrees()
    }

    fn event_degrees(&self) -> Vec<usize> {
        self.inner.event_degrees()
    }
}

/// One training partition: visible, invisible, and negative edges.
#[pyfunction]
#[pyo3(signature = (graph, mask_probability = 0.2, sampler = "degree-preserving", seed = 0, iteration = 0))]
fn sample_edges<'py>(
    py: Python<'py>,
    graph: &PyGraph,
    mask_probability: f64,
    sampler: &str,
    seed: u64,
    iteration: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let s = parse_sampler(sampler)?;
    let b = sample_batch(&graph.inner, mask_probability, s, DEFAULT_MAX_REPAIR_SWEEPS, seed, iteration).py()?;
    let out = PyDict::new(py);
    out.set_item("visible", b.visible)?;
    out.set_item("invisible", b.invisible)?;
    out.set_item("negative", b.negative)?;
    out.set_item("relaxed", b.relaxed)?;
    out.set_item("event_marginal_l1_gap", b.event_marginal_l1_gap)?;
    Ok(out)
}

#[pyfunction(name = "balanced_bce")]
fn py_balanced_bce(p_invisible: Vec<f64>, p_negative: Vec<f64>) -> PyResult<f64> {
    balanced_bce(&p_invisible, &p_negative).py()
}

/// A trained graph imputer.
#[pyclass(name = "GraphImputer", module = "pygraphimpute")]
pub struct PyImputer {
    inner: GraphImputer,
    #[pyo3(get)]
    loss_history: Vec<f64>,
}

impl PyImputer {
    fn test_latents(&self, split: &PySplit) -> PyResult<(Array2<f64>, Array2<f64>)> {
        let (g, demo) = pipeline::inference_graph(&split.inner).py()?;
        self.inner.latents(&g, &demo).py()
    }
}

#[pymethods]
impl PyImputer {
    /// Trains on `train` and returns the fitted model.
    #[staticmethod]
    #[pyo3(signature = (
        train, embedding_dim = 95, num_layers = 3, scorer_hidden = 32, epochs = 200,
        learning_rate = 0.0066, mask_probability = 0.2, sampler = "degree-preserving", seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        train: &PyDataset,
        embedding_dim: usize,
        num_layers: usize,
        scorer_hidden: usize,
        epochs: usize,
        learning_rate: f64,
        mask_probability: f64,
        sampler: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let model = ModelConfig { embedding_dim, num_layers, scorer_hidden, ..ModelConfig::default() };
        let cfg = TrainConfig {
            learning_rate,
            mask_probability,
            epochs,
            seed,
            sampler: parse_sampler(sampler)?,
            ..TrainConfig::default()
        };
        let data = &train.inner;
        let (state, _) = py.detach(|| fit(data, &model, &cfg, |_| {})).py()?;
        Ok(Self { inner: state.model, loss_history: state.loss_history })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).py()?, loss_history: Vec::new() })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Probabilities for `(test patient, event)` pairs of the split.
    fn score(&self, split: &PySplit, pairs: Vec<Pair>) -> PyResult<Vec<f64>> {
        let (p, e) = self.test_latents(split)?;
        let offset = split.inner.train.num_patients;
        let shifted: Vec<Pair> = pairs.iter().map(|&(i, j)| (i + offset, j)).collect();
        score_edges(&self.inner.params, &p, &e, &shifted).py()
    }

    /// Full test-patient x event probability grid.
    fn score_grid(&self, split: &PySplit) -> PyResult<Vec<Vec<f64>>> {
        let (p, e) = self.test_latents(split)?;
        let scorer = GraphScorer::new(&self.inner, &p, &e, split.inner.train.num_patients);
        let n = scorer.num_events();
        Ok((0..split.inner.test_visible.num_patients)
            .map(|i| {
                let mut row = vec![0.0; n];
                scorer.score_row(i, &mut row);
                row
            })
            .collect())
    }

    /// Metrics on the held-out entries of the split under one cutoff policy.
    #[pyo3(signature = (split, cutoff = "0.5"))]
    fn evaluate<'py>(&self, py: Python<'py>, split: &PySplit, cutoff: &str) -> PyResult<Bound<'py, PyAny>> {
        let policy = parse_policy(cutoff)?;
        let ev = pipeline::evaluate_graph(&self.inner, &split.inner, &[policy]).py()?;
        json_to_py(py, &ev.reports[0])
    }

    /// Message-passed event latents for the split's inference graph.
    fn event_embeddings(&self, split: &PySplit) -> PyResult<Vec<Vec<f64>>> {
        Ok(array_to_rows(&self.test_latents(split)?.1))
    }
}

#[pyfunction(name = "knn_impute")]
#[pyo3(signature = (train, test_visible, pairs, k = 10, distance = "hamming"))]
fn py_knn_impute(train: &PyDataset, test_visible: &PyDataset, pairs: Vec<Pair>, k: usize, distance: &str) -> PyResult<Vec<f64>> {
    let distance = match distance {
        "hamming" => Distance::Hamming,
        "jaccard" => Distance::Jaccard,
        other => return Err(PyValueError::new_err(format!("unknown distance `{other}`"))),
    };
    knn_impute(&train.inner, &test_visible.inner, KnnConfig { k_neighbors: k, distance }, &pairs).py()
}

#[pyfunction(name = "frequency_baseline")]
fn py_frequency_baseline(train: &PyDataset, pairs: Vec<Pair>) -> PyResult<Vec<f64>> {
    frequency_baseline(&train.inner, &pairs).py()
}

/// Metrics for an arbitrary test-patient x event score grid.
#[pyfunction(name = "evaluate_scores")]
#[pyo3(signature = (scores, test_visible, heldout, train_frequencies, cutoff = "0.5"))]
fn py_evaluate_scores<'py>(
    py: Python<'py>,
    scores: Vec<Vec<f64>>,
    test_visible: &PyDataset,
    heldout: Vec<Pair>,
    train_frequencies: Vec<f64>,
    cutoff: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let grid = rows_to_array(scores, test_visible.inner.num_events)?;
    let report: MetricsReport =
        evaluate(&grid, &test_visible.inner, &heldout, parse_policy(cutoff)?, &train_frequencies).py()?;
    json_to_py(py, &report)
}

#[pymodule]
fn pygraphimpute(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyImputer>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(sample_edges, m)?)?;
    m.add_function(wrap_pyfunction!(py_balanced_bce, m)?)?;
    m.add_function(wrap_pyfunction!(py_knn_impute, m)?)?;
    m.add_function(wrap_pyfunction!(py_frequency_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(py_evaluate_scores, m)?)?;
    Ok(())
}
