//! Python bindings: `import stargan_py`.
//!
//! Images cross the boundary as nested lists `[h][w][3]` of floats in
//! `[-1, 1]`; numpy arrays convert with `.tolist()`.

use std::path::PathBuf;

use ndarray::Array3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stargan::arch::NetworkSpec;
use stargan::config::RunConfig;
use stargan::eval;
use stargan::label::LabelUniverse;
use stargan::nn::Generator;
use stargan::pipeline::{self, TrainOptions};
use stargan::train::Checkpoint;

fn err(e: stargan::Error) -> PyErr {
    match e {
        stargan::Error::Config(_) | stargan::Error::Label(_) | stargan::Error::Spec(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Image = Vec<Vec<Vec<f64>>>;

fn to_array(img: Image) -> PyResult<Array3<f64>> {
    let h = img.len();
    let w = img.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(h * w * 3);
    for row in img {
        if row.len() != w {
            return Err(PyValueError::new_err("image rows differ in length"));
        }
        for px in row {
            if px.len() != 3 {
                return Err(PyValueError::new_err("pixels must have 3 channels"));
            }
            flat.extend(px);
        }
    }
    Array3::from_shape_vec((h, w, 3), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_array(a: &Array3<f64>) -> Image {
    a.outer_iter().map(|r| r.outer_iter().map(|p| p.to_vec()).collect()).collect()
}

/// A validated run configuration.
#[pyclass(name = "RunConfig", unsendable)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Loads a TOML run file, applying `key.path=value` overrides in order.
    #[new]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn new(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path, &overrides).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml_str(text, &overrides).map_err(err)? })
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.net.image_size
    }

    fn universe(&self) -> PyResult<PyUniverse> {
        Ok(PyUniverse { inner: self.inner.universe().map_err(err)? })
    }

    /// `(generator, discriminator, total)` parameter counts.
    fn param_counts(&self) -> PyResult<(u64, u64, u64)> {
        let g = self.inner.generator_spec().map_err(err)?;
        let d = self.inner.discriminator_spec().map_err(err)?;
        let r = eval::param_report(&g, &d, None);
        Ok((r.generator, r.discriminator, r.total))
    }

    /// Both networks as architecture-file text.
    fn arch(&self) -> PyResult<String> {
        let nets: [NetworkSpec; 2] = [
            self.inner.generator_spec().map_err(err)?,
            self.inner.discriminator_spec().map_err(err)?,
        ];
        Ok(nets.iter().map(|n| n.to_arch() + "\n").collect())
    }
}

/// The datasets' label slices and the mask layout.
#[pyclass(name = "LabelUniverse", unsendable)]
struct PyUniverse {
    inner: LabelUniverse,
}

#[pymethods]
impl PyUniverse {
    fn dataset_names(&self) -> Vec<String> {
        self.inner.datasets().iter().map(|d| d.name().to_owned()).collect()
    }

    fn label_names(&self) -> Vec<String> {
        self.inner.all_label_names()
    }

    fn unified_dim(&self) -> usize {
        self.inner.unified_dim()
    }

    /// The conditioning vector for a target expression such as `red` or
    /// `scene.~border`.
    fn resolve(&self, target: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.resolve_target(target, None).map_err(err)?.values().to_vec())
    }
}

/// A trained generator loaded from a checkpoint.
#[pyclass(name = "Translator", unsendable)]
struct PyTranslator {
    generator: Generator,
    universe: LabelUniverse,
    #[pyo3(get)]
    step: u64,
    #[pyo3(get)]
    config_hash: String,
}

#[pymethods]
impl PyTranslator {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint).map_err(err)?;
        Ok(Self {
            generator: ck.generator().map_err(err)?,
            universe: ck.universe,
            step: ck.step,
            config_hash: ck.config_hash,
        })
    }

    /// Translates each image to `target`.
    fn translate(&self, images: Vec<Image>, target: &str) -> PyResult<Vec<Image>> {
        let label = self.universe.resolve_target(target, None).map_err(err)?;
        let imgs = images.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
        let labels = vec![label.values().to_vec(); imgs.len()];
        let out = eval::translate(&self.generator, &imgs, &labels).map_err(err)?;
        Ok(out.iter().map(from_array).collect())
    }
}

/// Writes every synthetic corpus of the configuration; returns
/// `(name, root, images)` per corpus.
#[pyfunction]
fn make_synthetic(config: &PyRunConfig) -> PyResult<Vec<(String, PathBuf, usize)>> {
    pipeline::generate_synthetic(&config.inner).map_err(err)
}

/// Trains and returns `(steps, total_steps, checkpoint path)`.
#[pyfunction]
#[pyo3(signature = (config, max_steps = None, resume = None))]
fn train(config: &PyRunConfig, max_steps: Option<u64>, resume: Option<PathBuf>) -> PyResult<(u64, u64, PathBuf)> {
    let data = pipeline::load_data(&config.inner).map_err(err)?;
    let s = pipeline::train(&config.inner, &data, TrainOptions { resume, max_steps, progress: None }).map_err(err)?;
    Ok((s.steps, s.total_steps, s.checkpoint))
}

/// Evaluates a checkpoint, writes the report files into `out_dir` and
/// returns the report as JSON text.
#[pyfunction]
fn evaluate(config: &PyRunConfig, checkpoint: PathBuf, out_dir: PathBuf) -> PyResult<String> {
    let data = pipeline::load_data(&config.inner).map_err(err)?;
    let ck = Checkpoint::load(&checkpoint).map_err(err)?;
    Ok(pipeline::evaluate(&config.inner, &data, &ck, &out_dir).map_err(err)?.to_json())
}

#[pymodule]
fn stargan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyUniverse>()?;
    m.add_class::<PyTranslator>()?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
