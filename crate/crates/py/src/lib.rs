//! Python bindings: model I/O, frame-by-frame tracking, synthetic data,
//! metrics, retrieval primitives and the command line.

use std::path::PathBuf;

use dmv::anchors::BBox;
use dmv::cli::config::parse_config;
use dmv::data::{generate_synthetic, SynthConfig};
use dmv::metrics::evaluate_sequence;
use dmv::model::Model;
use dmv::numerics::Container;
use dmv::tracker::{Tracker, TrackerConfig, TrackerState};
use dmv::DmvError;
use image::RgbImage;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(dmv_py, Error, PyException, "Raised for any tracker, data or configuration error.");

fn err(e: DmvError) -> PyErr {
    Error::new_err(e.to_string())
}

fn frame(data: &[u8], width: u32, height: u32) -> PyResult<RgbImage> {
    RgbImage::from_raw(width, height, data.to_vec())
        .ok_or_else(|| Error::new_err(format!("expected {} bytes for a {width}x{height} RGB frame, got {}", 3 * width as usize * height as usize, data.len())))
}

fn bbox(tl: [f64; 4]) -> PyResult<BBox> {
    BBox::from_top_left(tl[0], tl[1], tl[2], tl[3]).map_err(err)
}

/// A tracking model: backbone, retrieval and head parameters plus their configuration.
#[pyclass(name = "Model", module = "dmv_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Initialize a model from a run-config TOML (only `[model]` is used).
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = parse_config(config.unwrap_or(""), &[]).map_err(err)?;
        Ok(PyModel { inner: Model::new(cfg.model, seed).map_err(err)? })
    }

    /// Load from a model file or a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Container::read(&path).map_err(err)?;
        Ok(PyModel { inner: Model::from_container(&c).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_container().and_then(|c| c.write(&path)).map_err(err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.config.retrieval.mode.as_str()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Frame-by-frame tracker over raw RGB frames (row-major `bytes`, 3 per pixel).
#[pyclass(name = "Tracker", module = "dmv_py")]
struct PyTracker {
    model: Model,
    config: TrackerConfig,
    state: Option<TrackerState>,
}

#[pymethods]
impl PyTracker {
    /// `config` is a run-config TOML; only `[tracker]` is used.
    #[new]
    #[pyo3(signature = (model, config = None))]
    fn new(model: &PyModel, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config.unwrap_or(""), &[]).map_err(err)?;
        Tracker::new(&model.inner, cfg.tracker.clone()).map_err(err)?;
        Ok(PyTracker { model: model.inner.clone(), config: cfg.tracker, state: None })
    }

    /// Start a sequence from the first frame and its top-left `(x, y, w, h)` box.
    fn init(&mut self, data: &[u8], width: u32, height: u32, bbox_tl: [f64; 4]) -> PyResult<()> {
        let t = Tracker::new(&self.model, self.config.clone()).map_err(err)?;
        self.state = Some(t.init(&frame(data, width, height)?, &bbox(bbox_tl)?).map_err(err)?);
        Ok(())
    }

    /// Track the next frame; returns `(x, y, w, h, score)`.
    fn step(&mut self, data: &[u8], width: u32, height: u32) -> PyResult<(f64, f64, f64, f64, f64)> {
        let state = self.state.as_mut().ok_or_else(|| Error::new_err("call init() before step()"))?;
        let t = Tracker::new(&self.model, self.config.clone()).map_err(err)?;
        let out = t.step(state, &frame(data, width, height)?).map_err(err)?;
        let [x, y, w, h] = out.bbox.to_top_left();
        Ok((x, y, w, h, out.score))
    }

    /// Frame indices currently held in memory, slot 0 first.
    fn memory_frames(&self) -> Vec<usize> {
        self.state.as_ref().map(|s| s.memory.slots().iter().map(|m| m.frame_index).collect()).unwrap_or_default()
    }
}

/// Generate a synthetic sequence; keyword arguments override `SynthConfig` fields.
#[pyfunction]
#[pyo3(signature = (seed, **overrides))]
fn synthetic_sequence<'py>(py: Python<'py>, seed: u64, overrides: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let mut table = toml::Table::new();
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    if let Some(kw) = overrides {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let text = v.str()?.to_string().replace('(', "[").replace(')', "]");
            let value = toml::from_str::<toml::Table>(&format!("v = {text}"))
                .map_err(|e| Error::new_err(format!("{key}: {e}")))?
                .remove("v")
                .expect("key v was just parsed");
            table.insert(key, value);
        }
    }
    let cfg: SynthConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::new_err(e.to_string()))?;
    let seq = generate_synthetic(&cfg).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("name", &seq.name)?;
    out.set_item("width", cfg.width)?;
    out.set_item("height", cfg.height)?;
    let frames: Vec<Bound<'py, PyBytes>> = seq.frames.iter().map(|f| PyBytes::new(py, f.as_raw())).collect();
    out.set_item("frames", frames)?;
    out.set_item("boxes", seq.boxes.iter().map(|b| b.to_top_left()).collect::<Vec<_>>())?;
    Ok(out)
}

/// Success AUC, precision@20, normalized precision, AO and SR for top-left boxes;
/// `None` predictions count as misses.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, predictions: Vec<Option<[f64; 4]>>, groundtruth: Vec<[f64; 4]>) -> PyResult<Bound<'py, PyDict>> {
    let pred = predictions.into_iter().map(|p| p.map(bbox).transpose()).collect::<PyResult<Vec<_>>>()?;
    let gt = groundtruth.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    let m = evaluate_sequence("sequence", &pred, &gt).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("success_auc", m.success_auc)?;
    out.set_item("precision_20", m.precision_20)?;
    out.set_item("p_norm_auc", m.p_norm_auc)?;
    out.set_item("ao", m.ao)?;
    out.set_item("sr_50", m.sr_50)?;
    out.set_item("sr_75", m.sr_75)?;
    Ok(out)
}

/// Softmax over `[0, q·k_1, …, q·k_M]`; entry 0 is the no-match entry.
#[pyfunction]
fn similarity_row(query: Vec<f64>, keys: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    dmv::retrieval::similarity_row(&query, &keys).map_err(err)
}

/// Top-`k` indices of a similarity row (ties to the lower index) and their scores.
#[pyfunction]
fn select_candidates(row: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let c = dmv::retrieval::select_candidates(&row, k).map_err(err)?;
    Ok((c.indices, c.scores))
}

/// Run the `dmv` command line in-process and return its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| dmv::cli::run_from(std::iter::once("dmv".to_string()).chain(args)))
}

#[pymodule]
fn dmv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Error", m.py().get_type::<Error>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTracker>()?;
    m.add_function(wrap_pyfunction!(synthetic_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_row, m)?)?;
    m.add_function(wrap_pyfunction!(select_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
