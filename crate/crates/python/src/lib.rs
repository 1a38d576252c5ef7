//! Python bindings for the place-recognition toolkit.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use placerec::config::RunConfig;
use placerec::embedding::{self, EmbeddedDescriptor, ModelConfig};
use placerec::error::Error;
use placerec::geometry;
use placerec::index;
use placerec::ingest::GpsFix;
use placerec::pipeline;
use placerec::posegraph::{self, NoiseSpec};
use placerec::supervision::{self, KernelParams};
use placerec::synthworld::{self, WorldConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Singular(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_config(config: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match config {
        Some(text) => RunConfig::from_json(text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Wraps an angle to (-pi, pi].
#[pyfunction]
fn wrap_angle(a: f64) -> PyResult<f64> {
    geometry::wrap_angle(a).map_err(to_py)
}

/// Planar rigid transform.
#[pyclass(name = "Pose2", module = "pyplacerec", from_py_object)]
#[derive(Clone, Copy)]
struct PyPose2(geometry::Pose2);

#[pymethods]
impl PyPose2 {
    #[new]
    #[pyo3(signature = (x=0.0, y=0.0, theta=0.0))]
    fn new(x: f64, y: f64, theta: f64) -> PyResult<Self> {
        geometry::Pose2::new(x, y, theta).map(Self).map_err(to_py)
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    fn compose(&self, other: &PyPose2) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `self⁻¹ ∘ other`.
    fn relative(&self, other: &PyPose2) -> Self {
        Self(self.0.relative(&other.0))
    }

    fn translation_distance(&self, other: &PyPose2) -> f64 {
        self.0.translation_distance(&other.0)
    }

    fn to_tuple(&self) -> (f64, f64, f64) {
        (self.0.x, self.0.y, self.0.theta)
    }

    fn __mul__(&self, other: &PyPose2) -> Self {
        self.compose(other)
    }

    fn __repr__(&self) -> String {
        format!(
            "Pose2(x={}, y={}, theta={})",
            self.0.x, self.0.y, self.0.theta
        )
    }
}

fn poses(list: &[PyPose2]) -> Vec<geometry::Pose2> {
    list.iter().map(|p| p.0).collect()
}

/// Place similarity of two GPS fixes given as `(x, y, bearing)`.
#[pyfunction]
#[pyo3(signature = (a, b, gamma_t=None, gamma_r=None))]
fn kernel(
    a: (f64, f64, f64),
    b: (f64, f64, f64),
    gamma_t: Option<f64>,
    gamma_r: Option<f64>,
) -> PyResult<f64> {
    let mut p = KernelParams::default();
    p.gamma_t = gamma_t.unwrap_or(p.gamma_t);
    p.gamma_r = gamma_r.unwrap_or(p.gamma_r);
    p.validate().map_err(to_py)?;
    let fix = |(x, y, bearing): (f64, f64, f64)| GpsFix {
        bearing,
        ..GpsFix::new(0.0, x, y)
    };
    Ok(supervision::kernel(&fix(a), &fix(b), &p))
}

/// Root-mean-square positional error between two trajectories.
#[pyfunction]
fn ate_rmse(estimated: Vec<PyPose2>, truth: Vec<PyPose2>) -> PyResult<f64> {
    posegraph::ate_rmse(&poses(&estimated), &poses(&truth)).map_err(to_py)
}

/// Exact KD-tree over embedded descriptors.
#[pyclass(name = "KdIndex", module = "pyplacerec")]
struct PyKdIndex(index::KdIndex);

#[pymethods]
impl PyKdIndex {
    #[new]
    fn new(dim: usize) -> Self {
        Self(index::KdIndex::new(dim))
    }

    fn insert(&mut self, id: usize, vector: Vec<f64>) -> PyResult<()> {
        self.0
            .insert(&EmbeddedDescriptor {
                keyframe_id: id,
                phi: vector,
            })
            .map_err(to_py)
    }

    /// All entries within `eps`, as `(id, distance)` sorted by distance.
    fn query_radius(&self, query: Vec<f64>, eps: f64) -> PyResult<Vec<(usize, f64)>> {
        let hits = self.0.query_radius(&query, eps).map_err(to_py)?;
        Ok(hits.iter().map(|n| (n.id, n.distance)).collect())
    }

    fn query_knn(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<(usize, f64)>> {
        let hits = self.0.query_knn(&query, k).map_err(to_py)?;
        Ok(hits.iter().map(|n| (n.id, n.distance)).collect())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dimension()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Siamese embedding network.
#[pyclass(name = "EmbeddingModel", module = "pyplacerec")]
struct PyEmbeddingModel(embedding::EmbeddingModel);

#[pymethods]
impl PyEmbeddingModel {
    #[new]
    #[pyo3(signature = (input_dim, hidden=None, embedding_dim=None, margin=None, seed=0))]
    fn new(
        input_dim: usize,
        hidden: Option<Vec<usize>>,
        embedding_dim: Option<usize>,
        margin: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = ModelConfig::default();
        cfg.hidden = hidden.unwrap_or(cfg.hidden);
        cfg.embedding_dim = embedding_dim.unwrap_or(cfg.embedding_dim);
        cfg.margin = margin.unwrap_or(cfg.margin);
        embedding::EmbeddingModel::new(input_dim, &cfg, seed)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        embedding::EmbeddingModel::load(&path)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (dim, margin=1.0))]
    fn identity(dim: usize, margin: f64) -> PyResult<Self> {
        embedding::EmbeddingModel::identity(dim, margin)
            .map(Self)
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path, None).map_err(to_py)
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward(&x).map_err(to_py)
    }

    fn distance(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        embedding::pair_distance(&self.0, &a, &b).map_err(to_py)
    }

    /// Batch loss and its gradient flattened in parameter order.
    #[pyo3(signature = (batch, pos_weight=10.0))]
    fn contrastive_loss(
        &self,
        batch: Vec<(Vec<f64>, Vec<f64>, u8)>,
        pos_weight: f64,
    ) -> PyResult<(f64, Vec<f64>)> {
        let pairs: Vec<embedding::PairExample<'_>> = batch
            .iter()
            .map(|(a, b, y)| (a.as_slice(), b.as_slice(), *y))
            .collect();
        let (loss, grads) =
            embedding::contrastive_loss(&self.0, &pairs, pos_weight).map_err(to_py)?;
        Ok((loss, grads.flatten()))
    }

    fn parameters(&self) -> Vec<f64> {
        self.0.parameters()
    }

    fn set_parameters(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.0.set_parameters(&flat).map_err(to_py)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }

    #[getter]
    fn margin(&self) -> f64 {
        self.0.margin()
    }
}

/// SE(2) pose graph with odometry, loop-closure and prior factors.
#[pyclass(name = "PoseGraph", module = "pyplacerec")]
struct PyPoseGraph(posegraph::PoseGraph);

#[pymethods]
impl PyPoseGraph {
    #[new]
    #[pyo3(signature = (origin=None))]
    fn new(origin: Option<PyPose2>) -> Self {
        Self(posegraph::PoseGraph::new(
            origin.map(|p| p.0).unwrap_or_default(),
        ))
    }

    /// Appends a node reached from `i` by `measured`; returns its id.
    #[pyo3(signature = (i, measured, sigma_trans=5e-2, sigma_rot=1e-3))]
    fn add_odometry(
        &mut self,
        i: usize,
        measured: PyPose2,
        sigma_trans: f64,
        sigma_rot: f64,
    ) -> PyResult<usize> {
        let spec = NoiseSpec {
            sigma_rot,
            sigma_trans,
        };
        self.0.add_odometry(i, measured.0, &spec).map_err(to_py)
    }

    fn add_loop_closure(&mut self, i: usize, j: usize) -> PyResult<()> {
        self.0.add_loop_closure(i, j).map_err(to_py)
    }

    #[pyo3(signature = (max_iters=50, tol=1e-8))]
    fn optimize(&mut self, py: Python<'_>, max_iters: usize, tol: f64) -> PyResult<Py<PyAny>> {
        let report = self.0.optimize(max_iters, tol).map_err(to_py)?;
        json_to_py(py, &report)
    }

    fn nodes(&self) -> Vec<PyPose2> {
        self.0.nodes().iter().copied().map(PyPose2).collect()
    }

    fn chi2(&self) -> f64 {
        self.0.chi2()
    }

    fn loop_count(&self) -> usize {
        self.0.loop_count()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Synthesizes one session; `world` is an optional JSON object of world
/// settings overriding the defaults.
#[pyfunction]
#[pyo3(signature = (world=None, session=0))]
fn generate_session(py: Python<'_>, world: Option<&str>, session: u64) -> PyResult<Py<PyAny>> {
    let mut cfg: WorldConfig = match world {
        Some(text) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        None => WorldConfig::default(),
    };
    cfg.session = session;
    let s = synthworld::generate_session(&cfg).map_err(to_py)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("timestamps", &s.timestamps)?;
    out.set_item(
        "truth",
        s.truth_poses
            .iter()
            .copied()
            .map(PyPose2)
            .collect::<Vec<_>>(),
    )?;
    out.set_item(
        "descriptors",
        s.descriptor_rows
            .iter()
            .map(|d| d.vector.clone())
            .collect::<Vec<_>>(),
    )?;
    out.set_item("revisit_pairs", &s.revisit_pairs)?;
    Ok(out.into_any().unbind())
}

/// Default run configuration as JSON text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn run_generate(out_dir: PathBuf, config: Option<&str>) -> PyResult<Vec<PathBuf>> {
    pipeline::cmd_generate(&parse_config(config)?, &out_dir).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn run_train(py: Python<'_>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let summary = pipeline::cmd_train(&parse_config(config)?, &out_dir).map_err(to_py)?;
    json_to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (out_dir, config=None, checkpoint=None))]
fn run_eval(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<&str>,
    checkpoint: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let summary = pipeline::cmd_eval(&cfg, &out_dir, checkpoint.as_deref()).map_err(to_py)?;
    json_to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (out_dir, config=None, checkpoint=None))]
fn run_slam(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<&str>,
    checkpoint: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let summary =
        pipeline::cmd_slam(&cfg, &out_dir, checkpoint.as_deref().map(Path::new)).map_err(to_py)?;
    json_to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn run_pipeline(py: Python<'_>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let summary = pipeline::cmd_pipeline(&parse_config(config)?, &out_dir).map_err(to_py)?;
    json_to_py(py, &summary)
}

#[pymodule]
fn pyplacerec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose2>()?;
    m.add_class::<PyKdIndex>()?;
    m.add_class::<PyEmbeddingModel>()?;
    m.add_class::<PyPoseGraph>()?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    m.add_function(wrap_pyfunction!(kernel, m)?)?;
    m.add_function(wrap_pyfunction!(ate_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_session, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_train, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_function(wrap_pyfunction!(run_slam, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
