//! Python bindings: networks, gated inference, the CBNet pipeline, power
//! models and benchmark runs. Images are flat lists of 784 floats in [0, 1].

use std::path::PathBuf;

use cbnet::bench::{compare, run_experiment, BenchmarkReport, ExperimentConfig};
use cbnet::converter::{cbnet_infer, convert, CbnetPipeline};
use cbnet::data::{DatasetId, ImageSet, Split};
use cbnet::early_exit::{entropy as entropy_nats, infer_with_exit, threshold_grid as grid, ExitPolicy};
use cbnet::energy::{energy as energy_j, PowerModelParams};
use cbnet::models::{
    build_branchy_lenet, build_lenet, build_lightweight, checkpoint_id, load_checkpoint, save_checkpoint, Network,
};
use cbnet::{ErrorClass, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: cbnet::Error) -> PyErr {
    match e.class() {
        ErrorClass::Config => PyValueError::new_err(e.to_string()),
        ErrorClass::Data => PyIOError::new_err(e.to_string()),
        ErrorClass::Numerical => PyArithmeticError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f32>) -> PyResult<Tensor> {
    Tensor::new(vec![1, 28, 28], pixels).map_err(err)
}

fn dataset(name: &str) -> PyResult<DatasetId> {
    name.parse().map_err(err)
}

#[pyclass(name = "Network", module = "cbnet_py")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork { inner: load_checkpoint(path).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn lenet(seed: u64) -> PyResult<Self> {
        Ok(PyNetwork { inner: build_lenet(seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn branchy_lenet(seed: u64) -> PyResult<Self> {
        Ok(PyNetwork { inner: build_branchy_lenet(seed).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    /// Early-exit path of a branchy network as a standalone classifier.
    fn lightweight(&self) -> PyResult<PyNetwork> {
        Ok(PyNetwork { inner: build_lightweight(&self.inner).map_err(err)? })
    }

    #[getter]
    fn exit_count(&self) -> usize {
        self.inner.exit_count()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn id(&self) -> PyResult<String> {
        checkpoint_id(&self.inner).map_err(err)
    }

    /// Multiply-accumulates of one image up to `exit` (default: the last).
    #[pyo3(signature = (exit = None))]
    fn macs(&self, exit: Option<usize>) -> PyResult<u64> {
        self.inner.macs_to_exit(exit.unwrap_or(self.inner.final_exit())).map_err(err)
    }

    /// Softmax output of every exit.
    fn forward_exits(&self, pixels: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let outs = self.inner.forward_exits(&image(pixels)?).map_err(err)?;
        Ok(outs.into_iter().map(|t| t.data().to_vec()).collect())
    }

    /// Gated inference: `(class, exit, entropies)`.
    fn infer(&self, pixels: Vec<f32>, threshold: f64) -> PyResult<(usize, usize, Vec<f64>)> {
        let policy = ExitPolicy::new(threshold).map_err(err)?;
        let o = infer_with_exit(&self.inner, &image(pixels)?, &policy).map_err(err)?;
        Ok((o.class, o.exit, o.entropies))
    }

    fn __repr__(&self) -> String {
        format!("Network(exits={}, params={})", self.inner.exit_count(), self.inner.param_count())
    }
}

#[pyclass(name = "Pipeline", module = "cbnet_py")]
struct PyPipeline {
    inner: CbnetPipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(autoencoder: &PyNetwork, classifier: &PyNetwork) -> PyResult<Self> {
        let inner = CbnetPipeline::new(autoencoder.inner.clone(), classifier.inner.clone()).map_err(err)?;
        Ok(PyPipeline { inner })
    }

    #[staticmethod]
    fn load(autoencoder: PathBuf, classifier: PathBuf) -> PyResult<Self> {
        let inner =
            CbnetPipeline::new(load_checkpoint(autoencoder).map_err(err)?, load_checkpoint(classifier).map_err(err)?)
                .map_err(err)?;
        Ok(PyPipeline { inner })
    }

    fn macs(&self) -> PyResult<u64> {
        self.inner.macs().map_err(err)
    }

    /// Autoencoder output for one image.
    fn convert(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        Ok(convert(&self.inner.autoencoder, &image(pixels)?).map_err(err)?.data().to_vec())
    }

    /// `(class, autoencoder_seconds, classifier_seconds)`.
    fn infer(&self, pixels: Vec<f32>) -> PyResult<(usize, f64, f64)> {
        let o = cbnet_infer(&self.inner, &image(pixels)?).map_err(err)?;
        Ok((o.class, o.t_autoencoder.as_secs_f64(), o.t_classifier.as_secs_f64()))
    }
}

#[pyclass(name = "ImageSet", module = "cbnet_py")]
struct PyImageSet {
    inner: ImageSet,
}

#[pymethods]
impl PyImageSet {
    /// Reads `<root>/<dataset>/{train,t10k}-*-ubyte[.gz]`; `split` is "train" or "test".
    #[staticmethod]
    fn load(root: PathBuf, dataset_name: &str, split: &str) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        Ok(PyImageSet { inner: ImageSet::load(&root, dataset(dataset_name)?, split).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("image {i} of {}", self.inner.len())));
        }
        Ok(self.inner.image(i).to_vec())
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }
}

#[pyclass(name = "PowerModel", module = "cbnet_py")]
struct PyPowerModel {
    inner: PowerModelParams,
}

#[pymethods]
impl PyPowerModel {
    /// `"gci"` or `"pi4"`.
    #[new]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(PyPowerModel { inner: PowerModelParams::preset(preset).map_err(err)? })
    }

    /// Watts at utilization `u` in [0, 1].
    fn power(&self, u: f64) -> PyResult<f64> {
        self.inner.power(u).map_err(err)
    }
}

/// Shannon entropy in nats.
#[pyfunction]
fn entropy(probs: Vec<f64>) -> PyResult<f64> {
    entropy_nats(&probs).map_err(err)
}

#[pyfunction]
fn energy(average_power_w: f64, duration_s: f64) -> PyResult<f64> {
    energy_j(average_power_w, duration_s).map_err(err)
}

#[pyfunction]
fn threshold_grid(points: usize) -> Vec<f64> {
    grid(points)
}

#[pyfunction]
fn default_threshold(dataset_name: &str) -> PyResult<f64> {
    Ok(dataset(dataset_name)?.default_threshold())
}

/// Runs a benchmark from an experiment-config JSON string; returns the report JSON.
#[pyfunction]
fn run_benchmark(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    py.detach(|| run_experiment(&cfg).and_then(|r| r.to_json())).map_err(err)
}

/// Speedups and energy savings of report JSON strings against `reports[baseline]`.
#[pyfunction]
#[pyo3(signature = (reports, baseline = 0))]
fn compare_reports(reports: Vec<String>, baseline: usize) -> PyResult<String> {
    let parsed =
        reports.iter().map(|s| BenchmarkReport::from_json(s)).collect::<cbnet::Result<Vec<_>>>().map_err(err)?;
    let c = compare(&parsed, baseline).map_err(err)?;
    serde_json::to_string_pretty(&c).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn cbnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyImageSet>()?;
    m.add_class::<PyPowerModel>()?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_grid, m)?)?;
    m.add_function(wrap_pyfunction!(default_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(compare_reports, m)?)?;
    Ok(())
}
