use std::collections::BTreeMap;
use std::path::PathBuf;

use kpdepth::eval::{compute_metrics, EvalMetrics};
use kpdepth::geometry::{CameraPose, DepthField};
use kpdepth::imgcore::ImageBuffer;
use kpdepth::loss::{DetectorConfig, LossBreakdown, LossModes, LossWeights, Observations};
use kpdepth::optim::{self, GradcheckConfig, Init, OptimConfig, OptimState};
use kpdepth::sift::{self, DescriptorGrid};
use kpdepth::synth::{make_scene, SceneSample, SceneSpec};
use kpdepth::{store, Error};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::IllConditioned(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Row-major image with values in `[0, 1]`.
#[pyclass(name = "Image", module = "kpdepth_py", skip_from_py_object)]
#[derive(Clone)]
struct PyImage(ImageBuffer);

#[pymethods]
impl PyImage {
    #[new]
    #[pyo3(signature = (width, height, data, channels = 1))]
    fn new(width: usize, height: usize, data: Vec<f64>, channels: usize) -> PyResult<Self> {
        ImageBuffer::new(width, height, channels, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn constant(width: usize, height: usize, value: f64) -> PyResult<Self> {
        ImageBuffer::constant(width, height, value).map(Self).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.0.width(), self.0.height(), self.0.channels())
    }
}

/// Rigid transform from the target camera to a source camera.
#[pyclass(name = "CameraPose", module = "kpdepth_py", skip_from_py_object)]
#[derive(Clone)]
struct PyPose(CameraPose);

#[pymethods]
impl PyPose {
    #[staticmethod]
    fn identity() -> Self {
        Self(CameraPose::identity())
    }

    /// Exponential map of `[wx, wy, wz, vx, vy, vz]`.
    #[staticmethod]
    fn from_twist(twist: [f64; 6]) -> Self {
        Self(CameraPose::from_twist(&twist))
    }

    fn twist(&self) -> PyResult<[f64; 6]> {
        self.0.twist().map_err(to_py)
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn left_update(&self, delta: [f64; 6]) -> Self {
        Self(self.0.left_update(&delta))
    }

    fn transform(&self, point: [f64; 3]) -> [f64; 3] {
        let p = self.0.transform(&point.into());
        [p.x, p.y, p.z]
    }
}

/// Rendered synthetic scene with ground truth.
#[pyclass(name = "Scene", module = "kpdepth_py", skip_from_py_object)]
#[derive(Clone)]
struct PyScene(SceneSample);

#[pymethods]
impl PyScene {
    /// Render from a JSON scene spec, or from a named preset.
    #[new]
    #[pyo3(signature = (spec_json = None, preset = "default"))]
    fn new(spec_json: Option<&str>, preset: &str) -> PyResult<Self> {
        let spec = match (spec_json, preset) {
            (Some(json), _) => SceneSpec::from_json(json).map_err(to_py)?,
            (None, "default") => SceneSpec::default(),
            (None, "gradcheck") => SceneSpec::gradcheck(),
            (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        make_scene(&spec).map(Self).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.target.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.target.height()
    }

    #[getter]
    fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let k = &self.0.intrinsics;
        (k.fx, k.fy, k.cx, k.cy)
    }

    fn target(&self) -> PyImage {
        PyImage(self.0.target.clone())
    }

    fn sources(&self) -> Vec<PyImage> {
        self.0.sources.iter().cloned().map(PyImage).collect()
    }

    fn gt_depth(&self) -> Vec<f64> {
        self.0.gt_depth.depths()
    }

    fn gt_poses(&self) -> Vec<PyPose> {
        self.0.gt_poses.iter().cloned().map(PyPose).collect()
    }
}

/// Dense per-pixel descriptors, `width * height * 128` floats.
#[pyclass(name = "DescriptorGrid", module = "kpdepth_py")]
struct PyGrid {
    grid: DescriptorGrid,
    patch_size: f64,
}

#[pymethods]
impl PyGrid {
    #[getter]
    fn width(&self) -> usize {
        self.grid.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.grid.height()
    }

    #[getter]
    fn patch_size(&self) -> f64 {
        self.patch_size
    }

    fn at(&self, row: usize, col: usize) -> PyResult<Vec<f64>> {
        if row >= self.grid.height() || col >= self.grid.width() {
            return Err(PyValueError::new_err(format!("pixel ({row}, {col}) outside grid")));
        }
        Ok(self.grid.at(row, col).to_vec())
    }

    fn data(&self) -> Vec<f64> {
        self.grid.data().to_vec()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::write_grid(&self.grid, self.patch_size, path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (grid, patch_size) = store::read_grid(path).map_err(to_py)?;
        Ok(Self { grid, patch_size })
    }
}

#[pyfunction]
#[pyo3(signature = (image, size = 15.0))]
fn dense_descriptors(image: &PyImage, size: f64) -> PyResult<PyGrid> {
    let grid = sift::compute_dense_grid(&image.0, size).map_err(to_py)?;
    Ok(PyGrid { grid, patch_size: size })
}

/// `(x, y, size, orientation, response)`.
type KeypointTuple = (f64, f64, f64, f64, f64);

/// Returns one tuple per detected keypoint.
#[pyfunction]
#[pyo3(signature = (image, max_count = sift::DEFAULT_MAX_KEYPOINTS, contrast_threshold = sift::DEFAULT_CONTRAST_THRESHOLD))]
fn detect_keypoints(image: &PyImage, max_count: usize, contrast_threshold: f64) -> PyResult<Vec<KeypointTuple>> {
    let set = sift::detect_keypoints(&image.0, max_count, contrast_threshold).map_err(to_py)?;
    Ok(set
        .keypoints
        .iter()
        .map(|k| (k.x, k.y, k.size, k.orientation, k.response))
        .collect())
}

fn metrics_dict(m: &EvalMetrics) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("abs_rel", m.abs_rel),
        ("sq_rel", m.sq_rel),
        ("delta1", m.delta1),
        ("delta2", m.delta2),
        ("delta3", m.delta3),
        ("n_pixels", m.n_pixels as f64),
    ])
}

#[pyfunction]
#[pyo3(signature = (pred, gt, width, height, median_scale = true))]
fn depth_metrics(pred: Vec<f64>, gt: Vec<f64>, width: usize, height: usize, median_scale: bool) -> PyResult<BTreeMap<&'static str, f64>> {
    let pred = DepthField::from_depth(width, height, &pred).map_err(to_py)?;
    let gt = DepthField::from_depth(width, height, &gt).map_err(to_py)?;
    let m = compute_metrics(&pred, &gt, None, median_scale).map_err(to_py)?;
    Ok(metrics_dict(&m))
}

fn breakdown_dict(b: &LossBreakdown) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("l_key", b.l_key),
        ("l_photo", b.l_photo),
        ("l_smooth", b.l_smooth),
        ("l_expl", b.l_expl),
        ("total", b.total),
    ])
}

fn parse_init(init: &str, seed: u64, init_depth: f64) -> PyResult<Init> {
    match init {
        "gt" => Ok(Init::Gt),
        "perturbed" => Ok(Init::Perturbed {
            sigma_depth: 0.1,
            sigma_twist: 0.01,
            seed,
        }),
        "constant" => Ok(Init::Constant { depth: init_depth }),
        other => Err(PyValueError::new_err(format!("unknown init {other:?}, expected gt, perturbed or constant"))),
    }
}

/// Direct optimization of depth, poses and mask on one scene.
#[pyclass(name = "Optimizer", module = "kpdepth_py", unsendable)]
struct PyOptimizer {
    scene: SceneSample,
    obs: Observations,
    state: OptimState,
    config: OptimConfig,
}

#[pymethods]
impl PyOptimizer {
    #[new]
    #[pyo3(signature = (
        scene, *, det = true, expl = true, alpha = 2.0, beta = 1.0, gamma = 0.5, delta = 0.2,
        init = "perturbed", seed = 0, init_depth = 2.0, patch_size = 15.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        scene: &PyScene,
        det: bool,
        expl: bool,
        alpha: f64,
        beta: f64,
        gamma: f64,
        delta: f64,
        init: &str,
        seed: u64,
        init_depth: f64,
        patch_size: f64,
    ) -> PyResult<Self> {
        let scene = scene.0.clone();
        let obs = Observations::new(
            scene.target.clone(),
            scene.sources.clone(),
            scene.intrinsics,
            patch_size,
            DetectorConfig::default(),
        )
        .map_err(to_py)?;
        let weights = LossWeights { alpha, beta, gamma, delta };
        weights.validate().map_err(to_py)?;
        let config = OptimConfig {
            weights,
            modes: LossModes {
                detector: det,
                explainability: expl,
                ..LossModes::default()
            },
            ..OptimConfig::default()
        };
        let state = optim::init_state(&scene, parse_init(init, seed, init_depth)?).map_err(to_py)?;
        Ok(Self { scene, obs, state, config })
    }

    #[getter]
    fn keypoints(&self) -> usize {
        self.obs.keypoints.len()
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.state.step_count
    }

    /// One update; returns the losses evaluated before it.
    fn step(&mut self) -> PyResult<BTreeMap<&'static str, f64>> {
        let br = optim::step(&mut self.state, &self.obs, &self.config).map_err(to_py)?;
        Ok(breakdown_dict(&br))
    }

    /// Runs until convergence or `max_iters`; returns the total per iteration.
    #[pyo3(signature = (max_iters = 2000, rel_tol = 1e-5))]
    fn run(&mut self, max_iters: usize, rel_tol: f64) -> PyResult<Vec<f64>> {
        let config = OptimConfig {
            max_iters,
            rel_tol,
            ..self.config
        };
        let hist = optim::run(&mut self.state, &self.obs, &config).map_err(to_py)?;
        Ok(hist.history.iter().map(|b| b.total).collect())
    }

    fn depth(&self) -> Vec<f64> {
        self.state.vars.depth.depths()
    }

    fn poses(&self) -> Vec<PyPose> {
        self.state.vars.poses.iter().cloned().map(PyPose).collect()
    }

    /// Metrics of the current depth against ground truth, median scaled.
    fn metrics(&self) -> PyResult<BTreeMap<&'static str, f64>> {
        let m = compute_metrics(&self.state.vars.depth, &self.scene.gt_depth, None, true).map_err(to_py)?;
        Ok(metrics_dict(&m))
    }

    /// Finite-difference check of the analytic gradient at the current state.
    #[pyo3(signature = (samples = 200, step = 1e-5, seed = 0))]
    fn gradcheck(&self, samples: usize, step: f64, seed: u64) -> PyResult<(f64, usize, usize)> {
        let check = GradcheckConfig {
            samples,
            step,
            seed,
            corrupt: false,
        };
        let r = optim::gradcheck(&self.state, &self.obs, &self.config, &check).map_err(to_py)?;
        Ok((r.max_rel_error, r.checked, r.skipped))
    }
}

#[pymodule]
fn kpdepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyOptimizer>()?;
    m.add_function(wrap_pyfunction!(dense_descriptors, m)?)?;
    m.add_function(wrap_pyfunction!(detect_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add("DESCRIPTOR_LEN", sift::DESCRIPTOR_LEN)?;
    Ok(())
}
