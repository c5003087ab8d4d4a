//! Python module `scenefuse`.
//!
//! Poses are a native class. Everything structured (measurements, updates,
//! reports, scenario configs) crosses the boundary as plain dicts and lists
//! in the same shape as the NDJSON wire format.

use nalgebra::Vector3;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyType;
use scenefuse_core::engine::{self, EngineConfig, FusionEngine};
use scenefuse_core::graph::{GraphSnapshot, InterEdge};
use scenefuse_core::info::InfoMatrix;
use scenefuse_core::logs::{EstRecord, GtRecord};
use scenefuse_core::metrics::{self, EvalOptions};
use scenefuse_core::pgo::{self, SolveOptions};
use scenefuse_core::se3::{self, Pose, Twist};
use scenefuse_core::sim::{self, ScenarioConfig};
use scenefuse_core::wire::{Measurement, WireMessage};
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(scenefuse, ScenefuseError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    ScenefuseError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Rigid transform: unit quaternion rotation plus translation.
#[pyclass(name = "Pose", module = "scenefuse", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: Pose,
}

fn wrap(inner: Pose) -> PyPose {
    PyPose { inner }
}

#[pymethods]
impl PyPose {
    /// `Pose(translation=[x, y, z], quaternion=[w, x, y, z])`; the quaternion
    /// is normalized.
    #[new]
    #[pyo3(signature = (translation = [0.0; 3], quaternion = [1.0, 0.0, 0.0, 0.0]))]
    fn new(translation: [f64; 3], quaternion: [f64; 4]) -> PyResult<Self> {
        let [x, y, z] = translation;
        let [w, qx, qy, qz] = quaternion;
        Pose::from_array([x, y, z, w, qx, qy, qz]).map(wrap).map_err(err)
    }

    #[classmethod]
    fn identity(_cls: &Bound<'_, PyType>) -> Self {
        wrap(Pose::identity())
    }

    /// From the 7-number wire form `[x, y, z, qw, qx, qy, qz]`.
    #[classmethod]
    fn from_array(_cls: &Bound<'_, PyType>, a: [f64; 7]) -> PyResult<Self> {
        Pose::from_array(a).map(wrap).map_err(err)
    }

    /// Exponential map of a twist `[rho (3), phi (3)]`.
    #[classmethod]
    fn exp(_cls: &Bound<'_, PyType>, twist: [f64; 6]) -> Self {
        let [a, b, c, d, e, f] = twist;
        wrap(Pose::exp(&Twist::new(Vector3::new(a, b, c), Vector3::new(d, e, f))))
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let v = self.inner.log().map_err(err)?.to_vector();
        Ok([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    fn to_array(&self) -> [f64; 7] {
        self.inner.to_array()
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation();
        [t.x, t.y, t.z]
    }

    /// `[w, x, y, z]`
    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        let a = self.inner.to_array();
        [a[3], a[4], a[5], a[6]]
    }

    fn inverse(&self) -> Self {
        wrap(self.inner.inverse())
    }

    fn compose(&self, other: PyRef<'_, PyPose>) -> Self {
        wrap(self.inner * other.inner)
    }

    fn __mul__(&self, other: PyRef<'_, PyPose>) -> Self {
        self.compose(other)
    }

    /// `(translation distance, rotation angle)` of `self^-1 * other`.
    fn distance(&self, other: PyRef<'_, PyPose>) -> (f64, f64) {
        self.inner.distance(&other.inner)
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.inner.transform_point(&p.into());
        [q.x, q.y, q.z]
    }

    fn __repr__(&self) -> String {
        let a = self.inner.to_array();
        format!(
            "Pose(translation=[{:?}, {:?}, {:?}], quaternion=[{:?}, {:?}, {:?}, {:?}])",
            a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        )
    }
}

/// `p1^-1 * p2`: pose of `p2` expressed in the frame of `p1`.
#[pyfunction]
fn relative(p1: PyRef<'_, PyPose>, p2: PyRef<'_, PyPose>) -> PyPose {
    wrap(se3::relative(&p1.inner, &p2.inner))
}

/// Fusion engine: scene graph plus the state kept between fusion cycles.
#[pyclass(name = "Engine", module = "scenefuse")]
struct PyEngine {
    inner: FusionEngine,
}

#[pymethods]
impl PyEngine {
    /// `config` is a dict in the engine-config shape; omitted keys are
    /// not allowed, so pass nothing for defaults.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config = match config {
            Some(c) => from_py::<EngineConfig>(c)?,
            None => EngineConfig::default(),
        };
        Ok(Self {
            inner: FusionEngine::new(config),
        })
    }

    fn add_sensor(&mut self, name: &str) -> PyResult<()> {
        self.inner.register_sensor(name).map_err(err)
    }

    fn add_target(&mut self, name: &str) -> PyResult<()> {
        self.inner.register_target(name).map_err(err)
    }

    /// Removes a node of either layer with all its edges.
    fn remove(&mut self, name: &str) -> PyResult<()> {
        self.inner.remove(name).map(|_| ()).map_err(err)
    }

    /// Returns False when the measurement was dropped as stale.
    #[pyo3(signature = (sensor, target, t_us, pose, status = true, info_diag = None))]
    fn ingest(
        &mut self,
        sensor: &str,
        target: &str,
        t_us: i64,
        pose: PyRef<'_, PyPose>,
        status: bool,
        info_diag: Option<[f64; 6]>,
    ) -> PyResult<bool> {
        let m = Measurement {
            sensor_id: sensor.to_owned(),
            target: target.to_owned(),
            t_us,
            pose: pose.inner,
            status,
            info_diag,
        };
        let r = self.inner.ingest(&m, &InfoMatrix::identity()).map_err(err)?;
        Ok(r == engine::Ingested::Applied)
    }

    /// Runs one fusion cycle; returns `{sensor: update}`.
    fn cycle<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.cycle(None).updates)
    }

    fn query<'py>(&self, py: Python<'py>, sensor: &str, target: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.query(sensor, target))
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.snapshot().export())
    }

    fn last_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.last_report().map(|r| r.export()))
    }

    fn force_anchor(&mut self, name: &str) -> PyResult<()> {
        self.inner.force_anchor(name).map_err(err)
    }

    #[getter]
    fn clock(&self) -> i64 {
        self.inner.clock()
    }

    #[getter]
    fn dropped_stale(&self) -> u64 {
        self.inner.dropped_stale()
    }
}

/// Pose-graph optimization of a list of measured edges
/// `(sensor, target, pose[, status[, info_diag]])`.
#[pyfunction]
#[pyo3(signature = (edges, anchor = None))]
fn solve<'py>(
    py: Python<'py>,
    edges: Vec<Bound<'py, PyAny>>,
    anchor: Option<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut parsed = Vec::with_capacity(edges.len());
    for e in &edges {
        let len = e.len()?;
        if !(3..=5).contains(&len) {
            return Err(PyValueError::new_err("edge must be (sensor, target, pose[, status[, info_diag]])"));
        }
        let sensor: String = e.get_item(0)?.extract()?;
        let target: String = e.get_item(1)?.extract()?;
        let pose = e.get_item(2)?.cast_into::<PyPose>()?.get().inner;
        let status: bool = if len > 3 { e.get_item(3)?.extract()? } else { true };
        let info = if len > 4 {
            InfoMatrix::from_diagonal(e.get_item(4)?.extract()?).map_err(err)?
        } else {
            InfoMatrix::identity()
        };
        parsed.push(InterEdge::new(&sensor, &target, pose, 0, status, info));
    }
    let snapshot = GraphSnapshot::from_edges(0, parsed);
    let anchor = anchor.map(scenefuse_core::graph::NodeId::active);
    let report = pgo::solve_snapshot(&snapshot, &[anchor.as_ref()], &SolveOptions::default()).map_err(err)?;
    to_py(py, &report.export())
}

fn wire_dicts<'py>(py: Python<'py>, msgs: Vec<WireMessage>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &msgs)
}

/// Simulates a scenario; returns `(ground_truth, measurements)` as lists of
/// dicts. `config` keys override the defaults.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn simulate<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let cfg = match config {
        Some(c) => from_py::<ScenarioConfig>(c)?,
        None => ScenarioConfig::default(),
    };
    let gt = sim::generate(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let meas = sim::observe(&gt, &cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let meas = meas.into_iter().map(WireMessage::Meas).collect();
    Ok((to_py(py, &gt.records)?, wire_dicts(py, meas)?))
}

fn parse_wire(items: &[Bound<'_, PyAny>]) -> PyResult<Vec<EstRecord>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match from_py::<WireMessage>(item)? {
            WireMessage::Meas(m) => out.push(EstRecord::Meas(m)),
            WireMessage::Update(u) => out.push(EstRecord::Update(u)),
            _ => {}
        }
    }
    Ok(out)
}

/// One fusion cycle per distinct timestamp of the measurement log; returns
/// the updates for every sensor, tagged with `sensor_id`.
#[pyfunction]
fn replay_offline<'py>(py: Python<'py>, measurements: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let log: Vec<Measurement> = parse_wire(&measurements)?
        .into_iter()
        .filter_map(|r| match r {
            EstRecord::Meas(m) => Some(m),
            EstRecord::Update(_) => None,
        })
        .collect();
    let updates = engine::replay_offline(&log, &EngineConfig::default());
    wire_dicts(py, updates.into_iter().map(WireMessage::Update).collect())
}

/// ATE/RTE/loss report per (source, target pair) for measurement and
/// update dicts against ground-truth dicts.
#[pyfunction]
#[pyo3(signature = (estimates, ground_truth, delta_s = 1.0))]
fn evaluate<'py>(
    py: Python<'py>,
    estimates: Vec<Bound<'py, PyAny>>,
    ground_truth: &Bound<'py, PyAny>,
    delta_s: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let est = parse_wire(&estimates)?;
    let gt: Vec<GtRecord> = from_py(ground_truth)?;
    let opts = EvalOptions {
        delta_s,
        ..EvalOptions::default()
    };
    let eval = metrics::evaluate(&est, &gt, &opts).map_err(err)?;
    let rows: Vec<serde_json::Value> = eval
        .reports
        .iter()
        .map(|r| {
            let mut row = serde_json::json!({
                "source": r.source,
                "target": r.target,
                "lag_us": r.lag_us,
                "unmatched": r.unmatched,
            });
            match &r.report {
                Ok(rep) => row["report"] = serde_json::to_value(rep).unwrap_or_default(),
                Err(e) => row["error"] = e.to_string().into(),
            }
            row
        })
        .collect();
    to_py(py, &rows)
}

#[pymodule]
pub fn scenefuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ScenefuseError", m.py().get_type::<ScenefuseError>())?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(relative, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay_offline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
