//! Python module `pyleafgan`.

use std::path::PathBuf;

use candle_core::Device;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use leafgan::datakit::{augment_rot_flip, extract_partial_patches, PatchSpec};
use leafgan::evalharness::{self, EvalReport, RunTag};
use leafgan::image::{BinaryMask, HeatMap, Image as CoreImage, ValueRange};
use leafgan::leafgan::{translate, Direction, GanState};
use leafgan::lflseg::{segment, threshold_mask, Delta, LflsegModel, SegConfig};
use leafgan::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::InvalidInput(_) | Error::Shape(_) | Error::Label(_) | Error::UnsupportedBackbone(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } | Error::Codec { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_range(range: &str) -> PyResult<ValueRange> {
    match range {
        "unit" => Ok(ValueRange::Unit),
        "signed" => Ok(ValueRange::Signed),
        other => Err(PyValueError::new_err(format!("range must be 'unit' or 'signed', got {other:?}"))),
    }
}

/// RGB image stored row-major as `height × width × 3` floats.
#[pyclass(name = "Image", module = "pyleafgan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: CoreImage,
}

#[pymethods]
impl PyImage {
    #[new]
    #[pyo3(signature = (height, width, data, range = "unit"))]
    fn new(height: usize, width: usize, data: Vec<f32>, range: &str) -> PyResult<Self> {
        let inner = CoreImage::new(height, width, parse_range(range)?, data).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, range = "unit"))]
    fn load(path: PathBuf, range: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreImage::load(&path, parse_range(range)?).map_err(to_py)? })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<(f32, f32, f32)> {
        if y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err("pixel out of bounds"));
        }
        let p = self.inner.pixel(y, x);
        Ok((p[0], p[1], p[2]))
    }

    fn rot90_cw(&self) -> Self {
        Self { inner: self.inner.rot90_cw() }
    }

    fn flip_horizontal(&self) -> Self {
        Self { inner: self.inner.flip_horizontal() }
    }

    fn flip_vertical(&self) -> Self {
        Self { inner: self.inner.flip_vertical() }
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Binary leaf mask; `values` holds 0/1 row-major.
#[pyclass(name = "Mask", module = "pyleafgan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, values: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: BinaryMask::new(height, width, values).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: BinaryMask::load(&path).map_err(to_py)? })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Row-major 0/1 values as `bytes`.
    fn values(&self) -> Vec<u8> {
        self.inner.values().to_vec()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn iou(&self, other: &Self) -> f64 {
        self.inner.iou(&other.inner)
    }
}

/// Nine half-size patches at offsets `{0, N/4, N/2}²`, row-major.
#[pyfunction]
fn partial_patches(img: &PyImage) -> PyResult<Vec<PyImage>> {
    let spec = PatchSpec::new(img.inner.height()).map_err(to_py)?;
    let patches = extract_partial_patches(&img.inner, &spec).map_err(to_py)?;
    Ok(patches.into_iter().map(|inner| PyImage { inner }).collect())
}

/// Identity, three clockwise rotations, horizontal and vertical flips.
#[pyfunction]
fn rot_flip(img: &PyImage) -> Vec<PyImage> {
    augment_rot_flip(&img.inner).into_iter().map(|inner| PyImage { inner }).collect()
}

/// Thresholds a heatmap in `[0, 1]` at `delta` (ties count as leaf).
#[pyfunction]
#[pyo3(signature = (height, width, values, delta = 0.35))]
fn threshold(height: usize, width: usize, values: Vec<f32>, delta: f64) -> PyResult<PyMask> {
    let hm = HeatMap::new(height, width, values).map_err(to_py)?;
    let delta = Delta::new(delta).map_err(to_py)?;
    Ok(PyMask { inner: threshold_mask(&hm, delta) })
}

/// Trained leaf classifier used to compute masks.
#[pyclass(name = "Segmenter", module = "pyleafgan", frozen)]
struct PySegmenter {
    model: LflsegModel,
}

#[pymethods]
impl PySegmenter {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { model: LflsegModel::load(&path, &Device::Cpu).map_err(to_py)? })
    }

    /// Returns `(mask, fallback)`; `fallback` is true when the mask was empty and replaced by ones.
    #[pyo3(signature = (img, delta = 0.35))]
    fn segment(&self, img: &PyImage, delta: f64) -> PyResult<(PyMask, bool)> {
        let cfg = SegConfig { delta: Delta::new(delta).map_err(to_py)?, ..SegConfig::default() };
        let s = segment(&self.model, &img.inner, &cfg).map_err(to_py)?;
        Ok((PyMask { inner: s.mask }, s.fallback))
    }
}

/// Generators restored from a checkpoint directory.
#[pyclass(name = "Translator", module = "pyleafgan", frozen)]
struct PyTranslator {
    state: GanState,
}

#[pymethods]
impl PyTranslator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { state: GanState::load_generators(&path, &Device::Cpu).map_err(to_py)? })
    }

    #[pyo3(signature = (img, direction = "AtoB", mask = None))]
    fn translate(&self, img: &PyImage, direction: &str, mask: Option<&PyMask>) -> PyResult<PyImage> {
        let d = Direction::parse(direction).map_err(to_py)?;
        let out = translate(&self.state, &img.inner, d, mask.map(|m| &m.inner)).map_err(to_py)?;
        Ok(PyImage { inner: out })
    }
}

/// Unweighted average of per-class accuracies, rounded to two decimals.
#[pyfunction]
fn report_average(rows: Vec<(String, u64, f64)>) -> PyResult<Option<f64>> {
    let borrowed: Vec<(&str, u64, f64)> = rows.iter().map(|(c, n, a)| (c.as_str(), *n, *a)).collect();
    Ok(EvalReport::from_accuracies(RunTag::Baseline, &borrowed).map_err(to_py)?.average)
}

/// Averages and deltas against the first run; each run is `(tag, rows)`.
#[pyfunction]
fn compare(runs: Vec<(String, Vec<(String, u64, f64)>)>) -> PyResult<(Vec<Option<f64>>, Vec<Option<f64>>, String)> {
    let reports = runs
        .iter()
        .map(|(tag, rows)| {
            let borrowed: Vec<(&str, u64, f64)> = rows.iter().map(|(c, n, a)| (c.as_str(), *n, *a)).collect();
            EvalReport::from_accuracies(RunTag::parse(tag)?, &borrowed)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let cmp = evalharness::compare_runs(&reports).map_err(to_py)?;
    let averages = cmp.reports.iter().map(|r| r.average).collect();
    let text = cmp.to_text();
    Ok((averages, cmp.deltas, text))
}

/// Runs the command-line interface with `argv` (without the program name) and returns the exit status.
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    let mut full = vec!["leafgan".to_string()];
    full.extend(argv);
    leafgan::cli::dispatch(full)
}

#[pymodule]
fn pyleafgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PySegmenter>()?;
    m.add_class::<PyTranslator>()?;
    m.add_function(wrap_pyfunction!(partial_patches, m)?)?;
    m.add_function(wrap_pyfunction!(rot_flip, m)?)?;
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(report_average, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
