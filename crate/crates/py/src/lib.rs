//! Python bindings. Grids cross the boundary as nested lists (row-major),
//! structured configs as JSON strings.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use ssnet::losses::{self, MappingParams};
use ssnet::phantom::{self, PhantomSpec};
use ssnet::phase_filters::{self, FilterParams, UltrasoundFrame};
use ssnet::trainer::{self, Checkpoint, Dataset, TrainConfig, TrainOptions};
use ssnet::{Error, Mask};
use tch::{Kind, Tensor};

type Grid = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_array(g: &Grid) -> PyResult<Array2<f64>> {
    let h = g.len();
    let w = g.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || g.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| g[y][x]))
}

fn to_grid(a: &Array2<f64>) -> Grid {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn mask_grid(m: &Mask) -> Vec<Vec<u8>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_mask(g: &Grid) -> PyResult<Mask> {
    Ok(to_array(g)?.mapv(|v| u8::from(v >= 0.5)))
}

fn to_tensor(g: &Grid) -> PyResult<Tensor> {
    let a = to_array(g)?;
    let (h, w) = a.dim();
    Ok(Tensor::from_slice(a.as_slice().expect("standard layout")).view([h as i64, w as i64]))
}

fn from_tensor(t: &Tensor) -> Grid {
    let s = t.size();
    let w = s[s.len() - 1] as usize;
    let flat = Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().view([-1])).expect("f64 tensor");
    flat.chunks(w).map(<[f64]>::to_vec).collect()
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn mapping(t: i64) -> PyResult<MappingParams> {
    MappingParams::new(t).map_err(py_err)
}

/// Binary cross-entropy between a target and a prediction grid.
#[pyfunction]
fn bce(p: Grid, p_hat: Grid) -> PyResult<f64> {
    let v = losses::bce(&to_tensor(&p)?, &to_tensor(&p_hat)?).map_err(py_err)?;
    Ok(v.double_value(&[]))
}

/// Dice overlap of two masks thresholded at 0.5.
#[pyfunction]
fn dice(a: Grid, b: Grid) -> PyResult<f64> {
    losses::dice(&to_mask(&a)?, &to_mask(&b)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (y1_hat, band_thickness = 8))]
fn map_surface_to_shadow(y1_hat: Grid, band_thickness: i64) -> PyResult<Grid> {
    let out = losses::map_surface_to_shadow(&to_tensor(&y1_hat)?, &mapping(band_thickness)?).map_err(py_err)?;
    Ok(from_tensor(&out))
}

#[pyfunction]
#[pyo3(signature = (y2_hat, band_thickness = 8))]
fn map_shadow_to_surface(y2_hat: Grid, band_thickness: i64) -> PyResult<Grid> {
    let out = losses::map_shadow_to_surface(&to_tensor(&y2_hat)?, &mapping(band_thickness)?).map_err(py_err)?;
    Ok(from_tensor(&out))
}

#[pyfunction]
#[pyo3(signature = (y1, y2, y1_hat, y2_hat, band_thickness = 8))]
fn tcc_loss(y1: Grid, y2: Grid, y1_hat: Grid, y2_hat: Grid, band_thickness: i64) -> PyResult<f64> {
    let v = losses::tcc_loss(
        &to_tensor(&y1)?,
        &to_tensor(&y2)?,
        &to_tensor(&y1_hat)?,
        &to_tensor(&y2_hat)?,
        &mapping(band_thickness)?,
    )
    .map_err(py_err)?;
    Ok(v.double_value(&[]))
}

/// Returns `{bce_surface, bce_shadow, tcc, total}`.
#[pyfunction]
#[pyo3(signature = (y1, y2, y1_hat, y2_hat, band_thickness = 8, tcc_enabled = true))]
fn total_loss<'py>(
    py: Python<'py>,
    y1: Grid,
    y2: Grid,
    y1_hat: Grid,
    y2_hat: Grid,
    band_thickness: i64,
    tcc_enabled: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let b = losses::total_loss(
        &to_tensor(&y1)?,
        &to_tensor(&y2)?,
        &to_tensor(&y1_hat)?,
        &to_tensor(&y2_hat)?,
        &mapping(band_thickness)?,
        tcc_enabled,
    )
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("bce_surface", b.bce_surface)?;
    d.set_item("bce_shadow", b.bce_shadow)?;
    d.set_item("tcc", b.tcc)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

/// Pre-normalisation bone shadow enhancement map.
#[pyfunction]
#[pyo3(signature = (cm, us_a, params_json = None))]
fn compute_bse(cm: Grid, us_a: Grid, params_json: Option<&str>) -> PyResult<Grid> {
    let params: FilterParams = parse(params_json)?;
    let out = phase_filters::bse_raw(&to_array(&cm)?, &to_array(&us_a)?, &params).map_err(py_err)?;
    Ok(to_grid(&out))
}

/// Filter stack of a [0,1] frame as `{bmode, lpt, lp, bse}`.
#[pyfunction]
#[pyo3(signature = (frame, params_json = None))]
fn build_stack<'py>(py: Python<'py>, frame: Grid, params_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let params: FilterParams = parse(params_json)?;
    let frame = UltrasoundFrame::new(to_array(&frame)?).map_err(py_err)?;
    let stack = phase_filters::build_stack(&frame, &params).map_err(py_err)?;
    let d = PyDict::new(py);
    for (name, ch) in ["bmode", "lpt", "lp", "bse"].into_iter().zip(stack.channels()) {
        d.set_item(name, to_grid(ch))?;
    }
    Ok(d)
}

/// One phantom as `{frame, y1, y2, meta}`; `meta` is a JSON string.
#[pyfunction]
#[pyo3(signature = (seed, spec_json = None))]
fn generate_sample<'py>(py: Python<'py>, seed: u64, spec_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let spec: PhantomSpec = parse(spec_json)?;
    let s = phantom::generate_sample(&spec, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("frame", to_grid(&s.frame.pixels().to_owned()))?;
    d.set_item("y1", mask_grid(&s.y1))?;
    d.set_item("y2", mask_grid(&s.y2))?;
    d.set_item("meta", serde_json::to_string(&s.meta).expect("meta serialises"))?;
    Ok(d)
}

/// Writes a phantom dataset and returns its content hash.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 0, spec_json = None))]
fn generate_dataset(out_dir: PathBuf, n: usize, seed: u64, spec_json: Option<&str>) -> PyResult<String> {
    let mut spec: PhantomSpec = parse(spec_json)?;
    spec.seed = seed;
    let m = phantom::generate_dataset(&spec, n, &out_dir).map_err(py_err)?;
    Ok(m.content_hash)
}

/// Default training configuration (`desk=True` for the single-core network).
#[pyfunction]
#[pyo3(signature = (desk = true))]
fn default_train_config(desk: bool) -> String {
    let cfg = if desk { TrainConfig::desk() } else { TrainConfig::default() };
    serde_json::to_string_pretty(&cfg).expect("config serialises")
}

#[pyfunction]
#[pyo3(signature = (network_json = None))]
fn count_parameters(network_json: Option<&str>) -> PyResult<i64> {
    let cfg: ssnet::NetworkConfig = parse(network_json)?;
    ssnet::network::count_parameters(&cfg).map_err(py_err)
}

/// Trains on the train split of a dataset directory and writes a checkpoint
/// to `out_dir`. Returns the final loss row as a dict.
#[pyfunction]
#[pyo3(signature = (config_json, data_dir, out_dir, split_ratio = 0.8))]
fn train<'py>(
    py: Python<'py>,
    config_json: &str,
    data_dir: PathBuf,
    out_dir: PathBuf,
    split_ratio: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(py_err)?;
    let data = Dataset::load(&data_dir, &cfg.filters).map_err(py_err)?;
    let split = trainer::split_by_subject(&data.groups, split_ratio, cfg.seed).map_err(py_err)?;
    let train_set = data.subset(&split.train).map_err(py_err)?;
    let opts = TrainOptions {
        out_dir: Some(out_dir),
        ..Default::default()
    };
    let run = trainer::train(&cfg, &train_set, &opts).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("steps", run.checkpoint.manifest.training_step)?;
    d.set_item("wall_seconds", run.wall_seconds)?;
    if let Some(last) = run.history.last() {
        d.set_item("total", last.total)?;
        d.set_item("bce_surface", last.bce_surface)?;
        d.set_item("bce_shadow", last.bce_shadow)?;
        d.set_item("tcc", last.tcc)?;
    }
    Ok(d)
}

/// A trained network loaded from a checkpoint directory.
#[pyclass(unsendable)]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&dir).map_err(py_err)?,
        })
    }

    /// Checkpoint manifest as a JSON string.
    #[getter]
    fn manifest(&self) -> String {
        serde_json::to_string_pretty(&self.inner.manifest).expect("manifest serialises")
    }

    #[getter]
    fn parameter_count(&self) -> i64 {
        self.inner.model.parameter_count()
    }

    /// Segments a [0,1] frame; returns `(surface, shadow)` masks at the
    /// frame's own size.
    fn predict(&self, frame: Grid) -> PyResult<(Vec<Vec<u8>>, Vec<Vec<u8>>)> {
        let frame = UltrasoundFrame::new(to_array(&frame)?).map_err(py_err)?;
        let pair = trainer::infer(&self.inner, &frame, &self.inner.config().filters, None).map_err(py_err)?;
        Ok((mask_grid(&pair.surface), mask_grid(&pair.shadow)))
    }

    /// k-fold dice over a whole dataset directory; returns the report JSON.
    #[pyo3(signature = (data_dir, folds = 1))]
    fn evaluate(&self, data_dir: PathBuf, folds: usize) -> PyResult<String> {
        let data = Dataset::load(&data_dir, &self.inner.config().filters).map_err(py_err)?;
        let report = trainer::evaluate(&self.inner, &data, folds).map_err(py_err)?;
        Ok(serde_json::to_string_pretty(&report).expect("report serialises"))
    }
}

#[pymodule]
fn ssnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(bce, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(map_surface_to_shadow, m)?)?;
    m.add_function(wrap_pyfunction!(map_shadow_to_surface, m)?)?;
    m.add_function(wrap_pyfunction!(tcc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_bse, m)?)?;
    m.add_function(wrap_pyfunction!(build_stack, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
