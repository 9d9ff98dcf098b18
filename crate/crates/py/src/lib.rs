//! Python bindings: scenes, ground-truth fans, models, training and metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtglab_core::env::{generate_scene, SceneKindTag, SceneSpec, SensorConfig};
use mtglab_core::losses;
use mtglab_core::metrics::{self, Generator};
use mtglab_core::model::{self as core_model, Mode, ModelConfig, ModelKind};
use mtglab_core::oracle::{build_ground_truth, FanConfig, Trajectory};
use mtglab_core::trainer::{self, DatasetConfig, Split, TrainConfig};
use mtglab_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        e @ (Error::Usage(_) | Error::Domain(_) | Error::Dimension { .. } | Error::Format { .. }) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

type Points = Vec<[f64; 2]>;

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {s:?}"))),
    }
}

/// A procedurally generated world with the robot placed in it.
#[pyclass(module = "mtglab")]
struct Scene {
    inner: mtglab_core::env::Scene,
}

#[pymethods]
impl Scene {
    /// Generate a scene of `kind` (corridor, junction, open-with-obstacles, cul-de-sac).
    #[staticmethod]
    fn generate(kind: &str, seed: u64) -> PyResult<Self> {
        let tag: SceneKindTag = kind.parse().map_err(py_err)?;
        let inner = generate_scene(&SceneSpec::sample(tag, seed)).map_err(py_err)?;
        Ok(Scene { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.spec.kind.tag().name()
    }

    /// `(width, height)` in cells.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.grid.width(), self.inner.grid.height())
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.inner.grid.resolution()
    }

    /// `(x, y, heading)` in world meters and radians.
    #[getter]
    fn pose(&self) -> (f64, f64, f64) {
        let p = self.inner.pose;
        (p.x, p.y, p.heading)
    }

    /// Row-major traversability, bottom row first.
    fn traversable(&self) -> Vec<bool> {
        self.inner.grid.cells().to_vec()
    }

    /// Scan frames (oldest first) and `(linear, angular)` velocity samples.
    fn observe(&self) -> PyResult<(Vec<Vec<f64>>, Vec<(f64, f64)>)> {
        let o = self.inner.observe(&SensorConfig::default()).map_err(py_err)?;
        Ok((o.scans, o.velocities.iter().map(|v| (v.linear, v.angular)).collect()))
    }

    /// A* ground-truth fan, robot-frame waypoints.
    fn ground_truth(&self) -> PyResult<Vec<Points>> {
        let gt = build_ground_truth(&self.inner.grid, &self.inner.pose, &FanConfig::default()).map_err(py_err)?;
        Ok(gt.trajectories.into_iter().map(|t| t.waypoints).collect())
    }

    /// Fraction of arclength of each robot-frame trajectory's path over blocked cells, averaged.
    fn non_traversable_rate(&self, trajectories: Vec<Points>) -> PyResult<f64> {
        let t: Vec<Trajectory> = trajectories.into_iter().map(Trajectory::new).collect();
        metrics::non_traversable_rate(&t, &self.inner.grid, &self.inner.pose).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (w, h) = self.shape();
        format!("Scene(kind={:?}, shape=({w}, {h}))", self.kind())
    }
}

/// A trajectory generator of one variant.
#[pyclass(module = "mtglab")]
struct Model {
    inner: core_model::Model,
}

#[pymethods]
impl Model {
    /// Fresh model; `tiny` selects the small test dimensions.
    #[new]
    #[pyo3(signature = (kind = "mtg", seed = 0, tiny = false))]
    fn new(kind: &str, seed: u64, tiny: bool) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(py_err)?;
        let base = if tiny { ModelConfig::tiny(kind) } else { ModelConfig { kind, ..ModelConfig::default() } };
        let inner = core_model::Model::new(ModelConfig { seed, ..base }).map_err(py_err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: core_model::Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Configuration as `key = value` text.
    fn manifest(&self) -> String {
        self.inner.config().to_manifest()
    }

    /// Trajectories and per-trajectory confidence for one observation.
    #[pyo3(signature = (scans, velocities, mode = "mean", seed = 0))]
    fn generate(
        &self,
        scans: Vec<Vec<f64>>,
        velocities: Vec<(f64, f64)>,
        mode: &str,
        seed: u64,
    ) -> PyResult<(Vec<Points>, Vec<f64>)> {
        let mode: Mode = mode.parse().map_err(py_err)?;
        let obs = mtglab_core::env::Observation {
            scans,
            velocities: velocities
                .into_iter()
                .map(|(linear, angular)| mtglab_core::env::Velocity { linear, angular })
                .collect(),
        };
        let set = self
            .inner
            .forward(&obs, mode, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(py_err)?;
        let conf = set.latents.iter().map(|l| core_model::confidence(l).confidence).collect();
        Ok((set.trajectories.into_iter().map(|t| t.waypoints).collect(), conf))
    }
}

/// Write a JSON-lines dataset; returns the number of kept scenes.
#[pyfunction]
#[pyo3(signature = (path, scenes = 500, seed = 0, train_fraction = 0.8))]
fn generate_dataset(path: PathBuf, scenes: usize, seed: u64, train_fraction: f64) -> PyResult<usize> {
    let cfg = DatasetConfig {
        scenes,
        seed,
        train_fraction,
        ..DatasetConfig::default()
    };
    let records = trainer::build_dataset(&cfg, &mut |_| {}).map_err(py_err)?;
    let f = File::create(&path).map_err(|e| py_err(e.into()))?;
    trainer::write_dataset(BufWriter::new(f), &records).map_err(py_err)?;
    Ok(records.len())
}

fn load(path: &PathBuf, split: Split) -> PyResult<Vec<trainer::LabeledScene>> {
    let f = File::open(path).map_err(|e| py_err(e.into()))?;
    let records = trainer::read_dataset(BufReader::new(f)).map_err(py_err)?;
    trainer::load_split(&records, split).map_err(py_err)
}

/// Train on the dataset's train split; returns the model and the per-step total loss.
#[pyfunction]
#[pyo3(signature = (data, kind = "mtg", epochs = 50, max_steps = None, seed = 0, tiny = false))]
fn train(
    py: Python<'_>,
    data: PathBuf,
    kind: &str,
    epochs: usize,
    max_steps: Option<usize>,
    seed: u64,
    tiny: bool,
) -> PyResult<(Model, Vec<f64>)> {
    let kind: ModelKind = kind.parse().map_err(py_err)?;
    let scenes = load(&data, Split::Train)?;
    let first = scenes
        .first()
        .ok_or_else(|| PyValueError::new_err("dataset has no train scenes"))?;
    let base = if tiny { ModelConfig::tiny(kind) } else { ModelConfig { kind, ..ModelConfig::default() } };
    let model = ModelConfig {
        beams: first.observation.scans[0].len(),
        frames: first.observation.scans.len(),
        velocities: first.observation.velocities.len(),
        waypoints: first.ground_truth.trajectories[0].len(),
        ..base
    };
    let cfg = TrainConfig {
        model,
        epochs,
        max_steps,
        seed,
        ..TrainConfig::default()
    };
    let out = py
        .detach(|| trainer::train(&cfg, &scenes, None, &mut std::io::sink()))
        .map_err(py_err)?;
    let totals = out.log.iter().map(|r| r.total).collect();
    Ok((Model { inner: out.model }, totals))
}

/// `{"r_n", "r_c", "r_d", "t_ms", "n_scenes"}` on one split; `model=None` replays the ground truth.
#[pyfunction]
#[pyo3(signature = (data, model = None, split = "test", mode = "sample", seed = 0))]
fn evaluate(
    py: Python<'_>,
    data: PathBuf,
    model: Option<PyRef<'_, Model>>,
    split: &str,
    mode: &str,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let scenes = load(&data, parse_split(split)?)?;
    let mode: Mode = mode.parse().map_err(py_err)?;
    let gen = match &model {
        Some(m) => Generator::Model { model: &m.inner, mode },
        None => Generator::Oracle,
    };
    let report = metrics::evaluate(&gen, &scenes, seed).map_err(py_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("r_n", report.r_n)?;
    d.set_item("r_c", report.r_c)?;
    d.set_item("r_d", report.r_d)?;
    d.set_item("t_ms", report.t_ms)?;
    d.set_item("n_scenes", report.n_scenes)?;
    Ok(d.into_any().unbind())
}

/// Symmetric mean nearest-neighbour distance between two point sets.
#[pyfunction]
fn avg_hausdorff(a: Points, b: Points) -> PyResult<f64> {
    losses::avg_hausdorff(&a, &b).map_err(py_err)
}

#[pymodule]
fn mtglab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(avg_hausdorff, m)?)?;
    Ok(())
}
