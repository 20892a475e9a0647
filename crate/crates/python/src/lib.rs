//! Python bindings: toy data, ground truth, losses, metrics, networks,
//! training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdda::checkpoint::{counter_from_archive, network_archive, refiner_from_archive, Archive};
use crowdda::data::{self, GapConfig, PointAnnotation};
use crowdda::losses::{self, PyramidScales};
use crowdda::metrics;
use crowdda::networks::{self, CounterConfig, Network, RefinerConfig};
use crowdda::training::{self, ModelConfig, TrainConfig};
use crowdda::Tensor;

fn err(e: crowdda::Error) -> PyErr {
    match e {
        crowdda::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Serialise a Python object with the `json` module and decode it as `T`,
/// filling unspecified fields with defaults.
fn from_py_json<T: serde::de::DeserializeOwned + Default>(
    py: Python<'_>,
    obj: Option<&Bound<'_, PyAny>>,
) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

/// A density map on a grid at `scale` times the image resolution.
#[pyclass(name = "DensityMap", module = "crowdda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDensityMap(data::DensityMap);

#[pymethods]
impl PyDensityMap {
    #[new]
    #[pyo3(signature = (height, width, values, scale = 1.0))]
    fn new(height: usize, width: usize, values: Vec<f64>, scale: f64) -> PyResult<Self> {
        data::DensityMap::new(height, width, values, scale).map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    /// Row-major cell values.
    fn values(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    /// Mass-preserving resize of a map predicted at scale `p` to scale `q`.
    fn reshape(&self, p: f64, q: f64) -> PyResult<Self> {
        losses::semantic_reshape(&self.0, p, q).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.dims();
        format!("DensityMap({h}x{w}, scale={}, sum={:.4})", self.0.scale, self.0.sum())
    }
}

/// An annotated image; `image` is a flat `(3, h, w)` array in `[0, 1]`.
#[pyclass(name = "Sample", module = "crowdda_py", skip_from_py_object)]
#[derive(Clone)]
struct PySample(data::Sample);

#[pymethods]
impl PySample {
    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.image.shape().to_vec()
    }

    #[getter]
    fn count(&self) -> usize {
        self.0.count()
    }

    #[getter]
    fn points(&self) -> Vec<(f64, f64)> {
        self.0.points.points.clone()
    }

    fn image(&self) -> Vec<f64> {
        self.0.image.data().to_vec()
    }

    /// Ground-truth density at `out_scale` of the image resolution.
    #[pyo3(signature = (sigma = 4.0, out_scale = 1.0))]
    fn density(&self, sigma: f64, out_scale: f64) -> PyResult<PyDensityMap> {
        data::density_from_points(&self.0.points, self.0.size(), sigma, out_scale).map(PyDensityMap).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Sample({:?}, count={})", self.0.name, self.0.count())
    }
}

/// Density counter with a configurable backbone, dilation and spatial module.
#[pyclass(name = "Counter", module = "crowdda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCounter(networks::Counter);

#[pymethods]
impl PyCounter {
    /// A randomly initialised counter. `config` is a dict of counter
    /// settings; without one the narrow toy counter of width `width` is used.
    #[new]
    #[pyo3(signature = (width = 4, seed = 0, config = None))]
    fn new(py: Python<'_>, width: usize, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg = match config {
            Some(_) => from_py_json::<CounterConfig>(py, config)?,
            None => CounterConfig::small(width),
        };
        networks::Counter::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        counter_from_archive(&Archive::load(&path).map_err(err)?).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        network_archive("counter", &self.0).save(&path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params().num_scalars()
    }

    #[getter]
    fn output_scale(&self) -> f64 {
        self.0.config().output_scale()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, self.0.config())
    }

    /// Coarse density of a flat `(c, h, w)` image.
    fn predict(&self, image: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<PyDensityMap> {
        let t = tensor(vec![shape.0, shape.1, shape.2], image)?;
        training::coarse_map(&self.0, &t).map(PyDensityMap).map_err(err)
    }

    fn count(&self, sample: PyRef<'_, PySample>) -> PyResult<f64> {
        training::coarse_map(&self.0, &sample.0.image).map(|m| m.clamped().sum()).map_err(err)
    }
}

/// Residual refiner for coarse density maps at full resolution.
#[pyclass(name = "Refiner", module = "crowdda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRefiner(networks::Refiner);

#[pymethods]
impl PyRefiner {
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(py: Python<'_>, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: RefinerConfig = from_py_json(py, config)?;
        networks::Refiner::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        refiner_from_archive(&Archive::load(&path).map_err(err)?).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        network_archive("refiner", &self.0).save(&path).map_err(err)
    }

    /// Zero the regression layer, which turns the refiner into the identity.
    fn zero_regression(&mut self) {
        self.0.zero_regression();
    }

    fn refine(&self, coarse: PyRef<'_, PyDensityMap>) -> PyResult<PyDensityMap> {
        self.0.refiner_forward(&coarse.0).map(PyDensityMap).map_err(err)
    }
}

/// Source and target toy domains sharing layout statistics. `gap` is a dict
/// of appearance-shift settings; the standard gap is used by default.
#[pyfunction]
#[pyo3(signature = (seed, n_images, height = 64, width = 64, gap = None))]
fn gen_toy_domains(
    py: Python<'_>,
    seed: u64,
    n_images: usize,
    height: usize,
    width: usize,
    gap: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Vec<PySample>, Vec<PySample>)> {
    let gap: GapConfig = from_py_json(py, gap)?;
    let (s, t) = data::gen_toy_domains(seed, n_images, (height, width), &gap).map_err(err)?;
    Ok((s.into_iter().map(PySample).collect(), t.into_iter().map(PySample).collect()))
}

/// Load an annotated dataset directory (`images/`, `ann/`).
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(data::load_dataset(path).map_err(err)?.into_iter().map(PySample).collect())
}

/// Write samples as an annotated dataset directory.
#[pyfunction]
fn write_dataset(path: PathBuf, samples: Vec<PyRef<'_, PySample>>) -> PyResult<()> {
    let owned: Vec<data::Sample> = samples.iter().map(|s| s.0.clone()).collect();
    data::write_dataset(path, &owned).map_err(err)
}

/// Ground-truth density for `(x, y)` head points on an image of `size`.
#[pyfunction]
#[pyo3(signature = (points, size, sigma = 4.0, out_scale = 1.0))]
fn density_from_points(
    points: Vec<(f64, f64)>,
    size: (usize, usize),
    sigma: f64,
    out_scale: f64,
) -> PyResult<PyDensityMap> {
    data::density_from_points(&PointAnnotation::new(points), size, sigma, out_scale).map(PyDensityMap).map_err(err)
}

#[pyfunction]
fn loss_count(pred: PyRef<'_, PyDensityMap>, gt: PyRef<'_, PyDensityMap>) -> PyResult<f64> {
    losses::loss_count(&pred.0, &gt.0).map_err(err)
}

/// Scale pyramid regularisation of a full-scale map against maps predicted
/// at scales `m` and `n`.
#[pyfunction]
fn loss_spr(
    a1: PyRef<'_, PyDensityMap>,
    am: PyRef<'_, PyDensityMap>,
    an: PyRef<'_, PyDensityMap>,
    m: f64,
    n: f64,
) -> PyResult<f64> {
    losses::loss_spr(&a1.0, &am.0, &an.0, PyramidScales { m, n }).map_err(err)
}

#[pyfunction]
fn mae(gt: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&gt, &pred).map_err(err)
}

/// Root mean squared count error.
#[pyfunction]
fn mse(gt: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    metrics::mse(&gt, &pred).map_err(err)
}

#[pyfunction]
fn psnr(pred: PyRef<'_, PyDensityMap>, gt: PyRef<'_, PyDensityMap>) -> PyResult<f64> {
    metrics::psnr(&pred.0, &gt.0).map_err(err)
}

#[pyfunction]
fn ssim(pred: PyRef<'_, PyDensityMap>, gt: PyRef<'_, PyDensityMap>) -> PyResult<f64> {
    metrics::ssim(&pred.0, &gt.0).map_err(err)
}

fn labeled(samples: &[PyRef<'_, PySample>], sigma: f64, scale: f64) -> PyResult<Vec<data::LabeledSample>> {
    let owned: Vec<data::Sample> = samples.iter().map(|s| s.0.clone()).collect();
    data::prepare_all(&owned, sigma, scale).map_err(err)
}

/// Train a counter. `mode` is "supervised", "spr" (supervised with the
/// pyramid loss) or "adapt" (needs `target`). `models` and `config` are
/// dicts overriding the library defaults. Returns the best counter and the
/// per-step log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (mode, source, target = None, sigma = 4.0, models = None, config = None))]
fn train<'py>(
    py: Python<'py>,
    mode: &str,
    source: Vec<PyRef<'_, PySample>>,
    target: Option<Vec<PyRef<'_, PySample>>>,
    sigma: f64,
    models: Option<&Bound<'_, PyAny>>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyCounter, Bound<'py, PyAny>)> {
    let models: ModelConfig = from_py_json(py, models)?;
    let cfg: TrainConfig = from_py_json(py, config)?;
    let src = labeled(&source, sigma, models.counter.output_scale())?;
    let out = match mode {
        "supervised" => training::supervised_train(&models, &src, &cfg),
        "spr" => training::spr_supervised_train(&models, &src, &cfg),
        "adapt" => {
            let tgt: Vec<Tensor> = target
                .ok_or_else(|| PyValueError::new_err("adapt mode needs target samples"))?
                .iter()
                .map(|s| s.0.image.clone())
                .collect();
            training::adapt_train(&models, &src, &tgt, &cfg)
        }
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
    .map_err(err)?;
    Ok((PyCounter(out.best_counter()), to_py_json(py, &out.log)?))
}

/// Count and map-quality metrics of `counter` on labeled samples, optionally
/// through a refiner. Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (counter, samples, sigma = 4.0, refiner = None))]
fn evaluate<'py>(
    py: Python<'py>,
    counter: PyRef<'_, PyCounter>,
    samples: Vec<PyRef<'_, PySample>>,
    sigma: f64,
    refiner: Option<PyRef<'_, PyRefiner>>,
) -> PyResult<Bound<'py, PyAny>> {
    let data = labeled(&samples, sigma, counter.0.config().output_scale())?;
    let report = metrics::evaluate(&counter.0, &data, refiner.as_ref().map(|r| &r.0)).map_err(err)?;
    py.import("json")?.call_method1("loads", (report.to_json(),))
}

#[pymodule]
fn crowdda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDensityMap>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyCounter>()?;
    m.add_class::<PyRefiner>()?;
    m.add_function(wrap_pyfunction!(gen_toy_domains, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(density_from_points, m)?)?;
    m.add_function(wrap_pyfunction!(loss_count, m)?)?;
    m.add_function(wrap_pyfunction!(loss_spr, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
