//! Python bindings: anchors, ego transforms, the motion library, HAT
//! alignment, scene generation and the IMM filter.

use std::fs::File;
use std::io::BufReader;

use hat_core::baselines::{imm_predict, imm_step, ImmState};
use hat_core::geometry::{self, build_augmented};
use hat_core::hat::{self, HatConfig, HatParameters, InstanceBank};
use hat_core::motion::{self, integrate_oracle, LatentKinematics, MotionModelKind};
use hat_core::sim::{self, stream_rng, FilterConfig, NoiseConfig, SavedModel, SceneConfig};
use hat_core::tensor::Tensor;
use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<MotionModelKind> {
    name.parse().map_err(err)
}

fn kinds(names: Option<Vec<String>>) -> PyResult<Vec<MotionModelKind>> {
    match names {
        None => Ok(MotionModelKind::ALL.to_vec()),
        Some(n) => n.iter().map(|s| kind(s)).collect(),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| serde_json::from_str(s).map_err(err))
}

/// 10-dim box state `[x, y, z, w, l, h, cos, sin, vx, vy]`.
#[pyclass(name = "Anchor", from_py_object)]
#[derive(Clone, Copy)]
struct PyAnchor(geometry::Anchor);

#[pymethods]
impl PyAnchor {
    #[new]
    #[pyo3(signature = (position, size, heading, velocity=[0.0, 0.0]))]
    fn new(position: [f64; 3], size: [f64; 3], heading: f64, velocity: [f64; 2]) -> Self {
        Self(geometry::Anchor::new(position, size, heading, velocity))
    }

    #[staticmethod]
    fn from_list(values: Vec<f64>) -> PyResult<Self> {
        geometry::Anchor::from_slice(&values).map(Self).map_err(err)
    }

    #[allow(clippy::wrong_self_convention)]
    fn to_list(&self) -> Vec<f64> {
        self.0.to_array().to_vec()
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        self.0.position
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.0.size
    }

    #[getter]
    fn yaw(&self) -> [f64; 2] {
        self.0.yaw
    }

    #[getter]
    fn velocity(&self) -> [f64; 2] {
        self.0.velocity
    }

    #[getter]
    fn heading(&self) -> f64 {
        self.0.heading()
    }

    #[getter]
    fn speed(&self) -> f64 {
        self.0.speed()
    }

    fn __repr__(&self) -> String {
        let p = self.0.position;
        format!("Anchor(x={:.3}, y={:.3}, z={:.3}, heading={:.4}, speed={:.3})", p[0], p[1], p[2], self.0.heading(), self.0.speed())
    }
}

/// Rigid transform between ego frames.
#[pyclass(name = "EgoTransform", from_py_object)]
#[derive(Clone)]
struct PyEgo(geometry::EgoTransform);

#[pymethods]
impl PyEgo {
    #[staticmethod]
    fn identity() -> Self {
        Self(geometry::EgoTransform::identity())
    }

    #[staticmethod]
    #[pyo3(signature = (yaw, translation=[0.0, 0.0, 0.0]))]
    fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Self(geometry::EgoTransform::from_yaw(yaw, translation))
    }

    #[staticmethod]
    fn from_matrix(rotation: [f64; 9], translation: [f64; 3]) -> PyResult<Self> {
        let e = geometry::EgoTransform::from_row_major(&rotation, translation);
        e.validate().map_err(err)?;
        Ok(Self(e))
    }

    /// `self` followed by `next`.
    fn then(&self, next: &PyEgo) -> Self {
        Self(self.0.then(&next.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.apply_point(p)
    }

    #[getter]
    fn rotation(&self) -> [f64; 9] {
        self.0.rotation_row_major()
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.0.translation;
        [t[0], t[1], t[2]]
    }
}

/// Warps an anchor with the augmented transform of `ego`.
#[pyfunction]
fn warp(anchor: PyAnchor, ego: &PyEgo) -> PyResult<PyAnchor> {
    let aug = build_augmented(&ego.0).map_err(err)?;
    Ok(PyAnchor(geometry::warp_anchor(&anchor.0, &aug)))
}

fn latents(l: Option<[f64; 4]>) -> PyResult<LatentKinematics> {
    let [ax, ay, a, omega] = l.unwrap_or_default();
    LatentKinematics::new(ax, ay, a, omega).map_err(err)
}

/// Propagates `anchor` by `dt` seconds under a motion model. `latents` is
/// `(ax, ay, a, omega)`, each within ±0.1.
#[pyfunction]
#[pyo3(signature = (model, anchor, dt, latents=None))]
fn predict(model: &str, anchor: PyAnchor, dt: f64, latents: Option<[f64; 4]>) -> PyResult<PyAnchor> {
    let lat = self::latents(latents)?;
    motion::predict(kind(model)?, &anchor.0, dt, &lat).map(PyAnchor).map_err(err)
}

/// RK4 reference integration of the same dynamics.
#[pyfunction]
#[pyo3(signature = (model, anchor, dt, latents=None, steps=1024))]
fn integrate(model: &str, anchor: PyAnchor, dt: f64, latents: Option<[f64; 4]>, steps: usize) -> PyResult<PyAnchor> {
    let lat = self::latents(latents)?;
    integrate_oracle(kind(model)?, &anchor.0, dt, &lat, steps).map(PyAnchor).map_err(err)
}

#[pyfunction]
fn motion_models() -> Vec<&'static str> {
    MotionModelKind::ALL.iter().map(|k| k.name()).collect()
}

/// Output of one alignment call.
#[pyclass(name = "Alignment", skip_from_py_object)]
struct PyAlignment {
    #[pyo3(get)]
    anchors: Vec<PyAnchor>,
    #[pyo3(get)]
    anchors_pre_refine: Vec<PyAnchor>,
    /// `hypotheses[i][m]`
    #[pyo3(get)]
    hypotheses: Vec<Vec<PyAnchor>>,
    /// `W_a`, one row of model weights per instance
    #[pyo3(get)]
    weights: Vec<Vec<f64>>,
    #[pyo3(get)]
    features: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn alignment(r: hat::AlignmentResult) -> PyAlignment {
    let wrap = |v: Vec<geometry::Anchor>| v.into_iter().map(PyAnchor).collect::<Vec<_>>();
    PyAlignment {
        weights: rows(&r.anchor_weights),
        features: rows(&r.features),
        hypotheses: r.hypotheses.into_iter().map(wrap).collect(),
        anchors_pre_refine: wrap(r.anchors_pre_refine),
        anchors: wrap(r.anchors),
    }
}

/// HAT weights for a given width and motion library.
#[pyclass(name = "HatParameters", skip_from_py_object)]
struct PyHat(HatParameters);

#[pymethods]
impl PyHat {
    #[new]
    #[pyo3(signature = (channels=32, models=None, seed=0))]
    fn new(channels: usize, models: Option<Vec<String>>, seed: u64) -> PyResult<Self> {
        let config = HatConfig::new(channels, kinds(models)?).map_err(err)?;
        HatParameters::init(config, &mut stream_rng(seed, 0)).map(Self).map_err(err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.config.channels
    }

    #[getter]
    fn models(&self) -> Vec<&'static str> {
        self.0.config.models.iter().map(|k| k.name()).collect()
    }

    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// Aligns `anchors` (frame t−1) with their `[K, C]` queries into the
    /// frame reached by `ego`.
    fn align(&self, anchors: Vec<PyAnchor>, queries: Vec<Vec<f64>>, dt: f64, ego: &PyEgo) -> PyResult<PyAlignment> {
        let k = anchors.len();
        let c = queries.first().map_or(self.0.config.channels, Vec::len);
        let q = Tensor::new(&[k, c], queries.concat()).map_err(err)?;
        let bank = InstanceBank::new(anchors.into_iter().map(|a| a.0).collect(), q).map_err(err)?;
        hat::align(&bank, dt, &ego.0, &self.0).map(alignment).map_err(err)
    }
}

/// A generated scene with world-frame ground truth.
#[pyclass(name = "Scene", skip_from_py_object)]
struct PyScene(sim::Scene);

#[pymethods]
impl PyScene {
    #[getter]
    fn frames(&self) -> usize {
        self.0.frames()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt
    }

    #[getter]
    fn tracks(&self) -> usize {
        self.0.tracks.len()
    }

    fn check(&self, track: usize, k: usize) -> PyResult<()> {
        if track >= self.0.tracks.len() || k >= self.0.frames() {
            return Err(PyIndexError::new_err(format!("track {track} frame {k} out of range")));
        }
        Ok(())
    }

    fn ground_truth(&self, track: usize, k: usize) -> PyResult<PyAnchor> {
        self.check(track, k)?;
        Ok(PyAnchor(self.0.tracks[track].gt[k]))
    }

    /// Ground truth expressed in ego frame `k`.
    fn ground_truth_in_frame(&self, track: usize, k: usize) -> PyResult<PyAnchor> {
        self.check(track, k)?;
        Ok(PyAnchor(self.0.gt_in_frame(track, k)))
    }

    fn regimes(&self, track: usize) -> PyResult<Vec<&'static str>> {
        self.check(track, 0)?;
        Ok(self.0.tracks[track].regimes.iter().map(|k| k.name()).collect())
    }

    fn ego_pose(&self, k: usize) -> PyResult<PyEgo> {
        self.check(0, k)?;
        Ok(PyEgo(self.0.poses[k]))
    }

    fn frame_transform(&self, from: usize, to: usize) -> PyResult<PyEgo> {
        self.check(0, from.max(to))?;
        Ok(PyEgo(self.0.frame_transform(from, to)))
    }

    /// Noisy observations, `result[k][i]` in ego frame `k`. `noise` is a
    /// JSON object with `position`, `yaw` and `velocity`.
    #[pyo3(signature = (seed=0, noise=None))]
    fn observe(&self, seed: u64, noise: Option<&str>) -> PyResult<Vec<Vec<PyAnchor>>> {
        let noise: NoiseConfig = from_json(noise)?;
        let obs = sim::observe(&self.0, &noise, seed).map_err(err)?;
        Ok(obs.anchors.into_iter().map(|f| f.into_iter().map(PyAnchor).collect()).collect())
    }
}

/// Generates a scene. `config` is a JSON scene config; omitted keys take
/// their defaults.
#[pyfunction]
#[pyo3(signature = (seed=0, config=None))]
fn generate_scene(seed: u64, config: Option<&str>) -> PyResult<PyScene> {
    let cfg: SceneConfig = from_json(config)?;
    sim::generate_scene(&cfg, seed).map(PyScene).map_err(err)
}

/// Interacting-multiple-model Kalman filter over the given models.
#[pyclass(name = "ImmFilter", skip_from_py_object)]
struct PyImm {
    state: ImmState,
    filter: FilterConfig,
    noise: NoiseConfig,
}

#[pymethods]
impl PyImm {
    #[new]
    #[pyo3(signature = (first, models=None, noise=None))]
    fn new(first: PyAnchor, models: Option<Vec<String>>, noise: Option<&str>) -> PyResult<Self> {
        let models = match models {
            None => vec![MotionModelKind::Cv, MotionModelKind::Ctrv],
            some => kinds(some)?,
        };
        let filter = FilterConfig::default();
        let noise: NoiseConfig = from_json(noise)?;
        let state = ImmState::from_anchor(&models, &first.0, filter.initial_std, filter.self_transition).map_err(err)?;
        Ok(Self { state, filter, noise })
    }

    /// Predict, update with `obs`, and return the fused estimate.
    fn step(&mut self, obs: PyAnchor, dt: f64) -> PyResult<PyAnchor> {
        let mn = FilterConfig::measurement(&self.noise);
        self.state = imm_step(&self.state, dt, &obs.0, &self.filter.process, &mn).map_err(err)?.0;
        Ok(PyAnchor(self.state.estimate().to_anchor(&obs.0)))
    }

    /// Fused prediction `dt` ahead without changing the filter.
    fn predict(&self, template: PyAnchor, dt: f64) -> PyResult<PyAnchor> {
        let s = imm_predict(&self.state, dt, &self.filter.process).map_err(err)?;
        Ok(PyAnchor(s.to_anchor(&template.0)))
    }

    #[getter]
    fn probabilities(&self) -> Vec<f64> {
        self.state.probabilities.clone()
    }
}

/// Reads a `.hatp` file written by `hat train`; returns its kind, width,
/// motion library and provenance.
#[pyfunction]
fn inspect_model<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let f = File::open(path).map_err(err)?;
    let (model, prov) = sim::load_model(BufReader::new(f)).map_err(err)?;
    let d = PyDict::new(py);
    let (kind, models) = match &model {
        SavedModel::Hat(m) => ("hat", m.hat.config.models.iter().map(|k| k.name()).collect()),
        SavedModel::Implicit(_) => ("implicit", Vec::new()),
    };
    d.set_item("kind", kind)?;
    d.set_item("channels", model.channels())?;
    d.set_item("models", models)?;
    d.set_item("tool_version", prov.tool_version)?;
    d.set_item("config_hash", prov.config_hash)?;
    d.set_item("seed", prov.seed)?;
    Ok(d)
}

#[pymodule]
fn hat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAnchor>()?;
    m.add_class::<PyEgo>()?;
    m.add_class::<PyHat>()?;
    m.add_class::<PyAlignment>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyImm>()?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(motion_models, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_model, m)?)?;
    Ok(())
}
