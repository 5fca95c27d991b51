//! Python bindings: boxes, datasets, training, inference and evaluation.

use std::path::PathBuf;

use cascade_rcnn::cascade::{
    train_cascade, train_integral, CascadeModel, Detector, InferenceConfig, Scoring, TrainConfig,
};
use cascade_rcnn::eval::{coco_ap, ground_truth_set, Detection as CoreDetection};
use cascade_rcnn::geometry::{decode_delta, encode_delta, iou as core_iou};
use cascade_rcnn::harness::io::{
    load_dataset, load_model, model_from_json, model_to_json, save_dataset, save_model,
};
use cascade_rcnn::harness::{generate_dataset, split, DatasetConfig, Scene};
use cascade_rcnn::{BBox as CoreBBox, Delta, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

/// Axis-aligned box in center form.
#[pyclass(name = "BBox", module = "cascade_rcnn_py", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyBBox(CoreBBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(cx: f64, cy: f64, w: f64, h: f64) -> PyResult<Self> {
        CoreBBox::new(cx, cy, w, h).map(PyBBox).map_err(to_py)
    }

    #[staticmethod]
    fn from_corner_form(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        CoreBBox::from_corner_form([x, y, w, h])
            .map(PyBBox)
            .map_err(to_py)
    }

    #[pyo3(name = "to_corner_form")]
    fn corner_form(&self) -> (f64, f64, f64, f64) {
        let [x, y, w, h] = self.0.to_corner_form();
        (x, y, w, h)
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        core_iou(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let b = self.0;
        format!("BBox(cx={}, cy={}, w={}, h={})", b.cx, b.cy, b.w, b.h)
    }
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    core_iou(&a.0, &b.0)
}

/// Offset `(dx, dy, dw, dh)` taking `b` onto `g`.
#[pyfunction]
fn encode(b: &PyBBox, g: &PyBBox) -> (f64, f64, f64, f64) {
    let [dx, dy, dw, dh] = encode_delta(&b.0, &g.0).to_array();
    (dx, dy, dw, dh)
}

/// Applies an offset to `b`; log-size components are clamped.
#[pyfunction]
fn decode(b: &PyBBox, delta: (f64, f64, f64, f64)) -> PyBBox {
    let (dx, dy, dw, dh) = delta;
    PyBBox(decode_delta(&b.0, &Delta::new(dx, dy, dw, dh)).bbox)
}

/// A list of synthetic scenes.
#[pyclass(name = "Dataset", module = "cascade_rcnn_py", frozen)]
struct PyDataset {
    scenes: Vec<Scene>,
}

#[pymethods]
impl PyDataset {
    /// Generates scenes. `config` is a JSON object overriding the defaults.
    #[staticmethod]
    #[pyo3(signature = (seed=42, config=None))]
    fn generate(py: Python<'_>, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut cfg: DatasetConfig = from_json(config)?;
        cfg.seed = seed;
        let scenes = py.detach(|| generate_dataset(&cfg)).map_err(to_py)?;
        Ok(Self { scenes })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(&path)
            .map(|scenes| Self { scenes })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&path, &self.scenes).map_err(to_py)
    }

    /// Training and held-out parts, the last `holdout` scenes being held out.
    fn split(&self, holdout: usize) -> (PyDataset, PyDataset) {
        let (a, b) = split(&self.scenes, holdout);
        (
            PyDataset { scenes: a.to_vec() },
            PyDataset { scenes: b.to_vec() },
        )
    }

    /// Ground truths of scene `i` as `(class_id, BBox)` pairs.
    fn ground_truths(&self, i: usize) -> PyResult<Vec<(usize, PyBBox)>> {
        let s = self.scene(i)?;
        Ok(s.gts.iter().map(|g| (g.class_id, PyBBox(g.bbox))).collect())
    }

    fn proposals(&self, i: usize) -> PyResult<Vec<PyBBox>> {
        Ok(self
            .scene(i)?
            .proposals
            .iter()
            .copied()
            .map(PyBBox)
            .collect())
    }

    fn __len__(&self) -> usize {
        self.scenes.len()
    }
}

impl PyDataset {
    fn scene(&self, i: usize) -> PyResult<&Scene> {
        self.scenes
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("scene {i} out of range")))
    }
}

/// One scored box: `image_id`, `class_id`, `bbox` and `score`.
#[pyclass(
    name = "Detection",
    module = "cascade_rcnn_py",
    frozen,
    get_all,
    from_py_object
)]
#[derive(Clone)]
struct PyDetection {
    image_id: u64,
    class_id: usize,
    bbox: PyBBox,
    score: f64,
}

impl From<&CoreDetection> for PyDetection {
    fn from(d: &CoreDetection) -> Self {
        Self {
            image_id: d.image_id,
            class_id: d.class_id,
            bbox: PyBBox(d.bbox),
            score: d.score,
        }
    }
}

#[pymethods]
impl PyDetection {
    #[new]
    fn new(image_id: u64, class_id: usize, bbox: PyBBox, score: f64) -> Self {
        Self {
            image_id,
            class_id,
            bbox,
            score,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection(image_id={}, class_id={}, bbox={}, score={})",
            self.image_id,
            self.class_id,
            self.bbox.__repr__(),
            self.score
        )
    }
}

/// `(threshold, ap)` pairs and their mean.
#[pyfunction]
fn evaluate(detections: Vec<PyDetection>, dataset: &PyDataset) -> (Vec<(f64, f64)>, f64) {
    let dets: Vec<CoreDetection> = detections
        .iter()
        .map(|d| CoreDetection {
            image_id: d.image_id,
            class_id: d.class_id,
            bbox: d.bbox.0,
            score: d.score,
        })
        .collect();
    let report = coco_ap(&dets, &ground_truth_set(&dataset.scenes));
    (report.per_threshold, report.mean_ap)
}

/// A trained cascade, iterative or integral detector.
#[pyclass(name = "Detector", module = "cascade_rcnn_py", frozen)]
struct PyDetector(Detector);

#[pymethods]
impl PyDetector {
    /// Trains on every scene of `dataset`. `mode` is one of `cascade`,
    /// `baseline`, `iterative` or `integral`; `config` is a JSON object
    /// overriding training hyper-parameters.
    #[staticmethod]
    #[pyo3(signature = (dataset, thresholds=None, mode="cascade", iterations=3, seed=42, config=None))]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        thresholds: Option<Vec<f64>>,
        mode: &str,
        iterations: usize,
        seed: u64,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let mut cfg: TrainConfig = from_json(config)?;
        if let Some(t) = thresholds {
            cfg.thresholds = t;
        }
        cfg.seed = seed;
        cfg.features.seed = seed;
        let scenes = &dataset.scenes;
        let detector = py
            .detach(|| match mode {
                "cascade" => Ok(Detector::Cascade(train_cascade(scenes, &cfg)?.0)),
                "baseline" => {
                    let cfg = cfg.with_thresholds(&cfg.thresholds[..1.min(cfg.thresholds.len())]);
                    Ok(Detector::Cascade(train_cascade(scenes, &cfg)?.0))
                }
                "iterative" => {
                    let cfg = cfg.with_thresholds(&cfg.thresholds[..1.min(cfg.thresholds.len())]);
                    Ok(Detector::Iterative {
                        base: train_cascade(scenes, &cfg)?.0,
                        iterations,
                    })
                }
                "integral" => Ok(Detector::Integral(train_integral(scenes, &cfg)?.0)),
                other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
            })
            .map_err(to_py)?;
        detector.validate().map_err(to_py)?;
        Ok(Self(detector))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_model(&path).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        model_from_json(text).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.0).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        model_to_json(&self.0).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0 {
            Detector::Cascade(_) => "cascade",
            Detector::Iterative { .. } => "iterative",
            Detector::Integral(_) => "integral",
        }
    }

    /// Stage thresholds of a cascade, or the head thresholds of an integral
    /// detector.
    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        match &self.0 {
            Detector::Cascade(CascadeModel { thresholds, .. }) => thresholds.clone(),
            Detector::Iterative { base, .. } => base.thresholds.clone(),
            Detector::Integral(m) => m.thresholds.clone(),
        }
    }

    #[pyo3(signature = (dataset, ensemble=false, add_gt=false))]
    fn detect(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        ensemble: bool,
        add_gt: bool,
    ) -> Vec<PyDetection> {
        let cfg = inference_config(ensemble);
        let dets = py.detach(|| self.0.detect(&dataset.scenes, add_gt, &cfg));
        dets.iter().map(PyDetection::from).collect()
    }

    /// COCO-style AP on `dataset`, as in [`evaluate`].
    #[pyo3(signature = (dataset, ensemble=false, add_gt=false))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        ensemble: bool,
        add_gt: bool,
    ) -> (Vec<(f64, f64)>, f64) {
        let cfg = inference_config(ensemble);
        let report = py.detach(|| self.0.evaluate(&dataset.scenes, add_gt, &cfg));
        (report.per_threshold, report.mean_ap)
    }
}

fn inference_config(ensemble: bool) -> InferenceConfig {
    InferenceConfig {
        scoring: if ensemble {
            Scoring::Ensemble
        } else {
            Scoring::LastStage
        },
        ..InferenceConfig::default()
    }
}

/// Runs the command line with `args` (without the program name) and returns
/// its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("cascade-rcnn".to_string())
        .chain(args)
        .collect();
    py.detach(|| cascade_rcnn::harness::cli::run(argv))
}

#[pymodule]
fn cascade_rcnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
