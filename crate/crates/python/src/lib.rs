//! Python bindings: grids, samples, run configuration, the model and the
//! attention kernel. Arrays cross the boundary as flat or nested lists.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use naima::data::{self, SamplePair};
use naima::eval::{self, BicubicBaseline};
use naima::trainer::{self, Checkpoint, TrainState};
use naima::{gta, Error, NaimaModel, RunConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    if e.is_usage() || matches!(e, Error::Shape(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    py_err(Error::from(e))
}

/// Dense `channels × height × width` map of doubles.
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
struct PyGrid(naima::Grid);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        naima::Grid::new(channels, height, width, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self(naima::Grid::filled(channels, height, width, value))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.channels(), self.0.height(), self.0.width())
    }

    fn get(&self, c: usize, y: usize, x: usize) -> PyResult<f64> {
        if c >= self.0.channels() || y >= self.0.height() || x >= self.0.width() {
            return Err(PyValueError::new_err(format!("index ({c}, {y}, {x}) out of range")));
        }
        Ok(self.0.get(c, y, x))
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.shape();
        format!("Grid({c}x{h}x{w})")
    }
}

/// RGB guide, HR ground truth and LR input for one scene.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample(SamplePair);

#[pymethods]
impl PySample {
    /// Builds a sample by degrading `depth_gt` with bicubic downsampling.
    #[staticmethod]
    fn from_hr(id: String, rgb: PyGrid, depth_gt: PyGrid, scale: usize) -> PyResult<Self> {
        SamplePair::from_hr(id, rgb.0, depth_gt.0, scale).map(Self).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.0.scale
    }

    #[getter]
    fn rgb(&self) -> PyGrid {
        PyGrid(self.0.rgb.clone())
    }

    #[getter]
    fn depth_gt(&self) -> PyGrid {
        PyGrid(self.0.depth_gt.clone())
    }

    #[getter]
    fn depth_lr(&self) -> PyGrid {
        PyGrid(self.0.depth_lr.clone())
    }
}

/// Layered `dotted.key = value` settings.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (tiny = false, text = None))]
    fn new(tiny: bool, text: Option<&str>) -> PyResult<Self> {
        let mut run = RunConfig::default();
        if tiny {
            run.model = naima::ModelConfig::tiny();
        }
        if let Some(text) = text {
            run.apply_text(text).map_err(py_err)?;
        }
        Ok(Self(run))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

/// Depth super-resolution model plus its optimizer state.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    run: RunConfig,
    model: NaimaModel,
    state: TrainState,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: PyRunConfig) -> PyResult<Self> {
        let run = config.0;
        run.validate().map_err(py_err)?;
        let model = NaimaModel::from_config(run.model.clone()).map_err(py_err)?;
        let state = TrainState::new(&model).map_err(py_err)?;
        Ok(Self { run, model, state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let (model, state) = ckpt.restore().map_err(py_err)?;
        Ok(Self {
            run: ckpt.run,
            model,
            state,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::capture(&self.model, &self.run, &self.state)
            .and_then(|c| c.save(&path))
            .map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.model.variant().to_string()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    /// Gate of the 1-based `level`.
    fn alpha(&self, level: usize) -> PyResult<f64> {
        self.model.alpha(level).map_err(py_err)
    }

    fn set_alpha(&self, level: usize, value: f64) -> PyResult<()> {
        self.model.set_alpha(level, value).map_err(py_err)
    }

    /// HR depth in meters for a raw (unnormalized) sample.
    fn predict(&self, sample: &PySample) -> PyResult<PyGrid> {
        eval::predict_sample(&self.model, &sample.0).map(PyGrid).map_err(py_err)
    }

    /// Per-sample RMSE in centimeters and their mean.
    fn evaluate(&self, samples: Vec<PySample>) -> PyResult<(Vec<(String, f64)>, f64)> {
        let set: Vec<SamplePair> = samples.into_iter().map(|s| s.0).collect();
        let report = eval::evaluate(&self.model, &set).map_err(py_err)?;
        Ok((report.per_sample, report.aggregate_rmse_cm))
    }

    /// Trains up to `epochs` total epochs and returns the mean loss of
    /// each epoch run by this call.
    #[pyo3(signature = (train, epochs, val = None))]
    fn fit(&mut self, train: Vec<PySample>, epochs: usize, val: Option<Vec<PySample>>) -> PyResult<Vec<f64>> {
        let train: Vec<SamplePair> = train.into_iter().map(|s| s.0).collect();
        let val: Vec<SamplePair> = val.unwrap_or_default().into_iter().map(|s| s.0).collect();
        self.run.train.epochs = epochs;
        let mut losses = Vec::new();
        trainer::train(&self.model, &train, &val, &self.run, &mut self.state, |r| losses.push(r.mean_loss))
            .map_err(py_err)?;
        Ok(losses)
    }
}

#[pyfunction]
fn bicubic_upsample(map: &PyGrid, scale: usize) -> PyResult<PyGrid> {
    data::bicubic_upsample(&map.0, scale).map(PyGrid).map_err(py_err)
}

#[pyfunction]
fn bicubic_downsample(map: &PyGrid, scale: usize) -> PyResult<PyGrid> {
    data::bicubic_downsample(&map.0, scale).map(PyGrid).map_err(py_err)
}

#[pyfunction]
fn rmse_cm(pred: &PyGrid, gt: &PyGrid) -> PyResult<f64> {
    eval::rmse_cm(&pred.0, &gt.0).map_err(py_err)
}

/// RMSE of plain bicubic upsampling on each sample, and their mean.
#[pyfunction]
fn bicubic_baseline(samples: Vec<PySample>) -> PyResult<(Vec<(String, f64)>, f64)> {
    let set: Vec<SamplePair> = samples.into_iter().map(|s| s.0).collect();
    let scale = set.first().map_or(4, |s| s.scale);
    let report = eval::evaluate_with(&BicubicBaseline { scale }, &set).map_err(py_err)?;
    Ok((report.per_sample, report.aggregate_rmse_cm))
}

#[pyfunction]
#[pyo3(signature = (count, height, width, scale, seed = 0))]
fn synthetic_dataset(count: usize, height: usize, width: usize, scale: usize, seed: u64) -> PyResult<Vec<PySample>> {
    data::generate_synthetic_dataset(count, height, width, scale, seed)
        .map(|v| v.into_iter().map(PySample).collect())
        .map_err(py_err)
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty rectangular matrix")));
    }
    Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).map_err(tensor_err)
}

/// `softmax(q kᵀ · scale) v`; `scale` defaults to `1/sqrt(d_k)`.
#[pyfunction]
#[pyo3(signature = (q, k, v, scale = None))]
fn attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, scale: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let (q, k, v) = (matrix(q, "q")?, matrix(k, "k")?, matrix(v, "v")?);
    if q.dim(1).map_err(tensor_err)? != k.dim(1).map_err(tensor_err)? || k.dim(0).map_err(tensor_err)? != v.dim(0).map_err(tensor_err)? {
        return Err(PyValueError::new_err("q/k widths or k/v lengths disagree"));
    }
    let scale = scale.unwrap_or_else(|| 1.0 / (q.dim(1).unwrap_or(1) as f64).sqrt());
    gta::fused_attention(&q, &k, &v, scale)
        .map_err(py_err)?
        .to_vec2()
        .map_err(tensor_err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    naima::cli::run_from(std::iter::once("naima".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "naima")]
fn naima_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bicubic_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_downsample, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_cm, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
