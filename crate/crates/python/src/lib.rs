//! Python bindings. Images cross the boundary as flat row-major `H×W×3`
//! float lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use unirestore::adaptation::{self, AnchorSet};
use unirestore::autograd::ParamGroup;
use unirestore::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use unirestore::config::{Profile, RunConfig};
use unirestore::daam;
use unirestore::data::{self, ImageTensor, Split, Task};
use unirestore::evaluation;
use unirestore::model::Variant;
use unirestore::tensor::Tensor;
use unirestore::{Error, ErrorKind};

fn py_err(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(e.to_string()),
        ErrorKind::Io => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for unirestore::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<ImageTensor> {
    ImageTensor::new(height, width, 3, data).py()
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().py()
}

fn rows_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).py()
}

/// Restoration model with its degradation codebook and adaptation module.
#[pyclass(name = "Model")]
struct PyModel {
    inner: unirestore::model::Model,
    anchors: Option<AnchorSet>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (profile = "ci", seed = 0))]
    fn new(profile: &str, seed: u64) -> PyResult<Self> {
        let p: Profile = profile.parse().py()?;
        let cfg = RunConfig::profile(p);
        Ok(PyModel {
            inner: unirestore::model::Model::new(cfg.model, seed).py()?,
            anchors: None,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).py()?;
        Ok(PyModel {
            inner: ck.model,
            anchors: ck.anchors,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            model: self.inner.clone(),
            anchors: self.anchors.clone(),
            train: None,
        };
        save_checkpoint(&ck, &path).py()
    }

    /// Scalar parameter count, optionally of one group
    /// (`restoration`, `degradation` or `adaptation`).
    #[pyo3(signature = (group = None))]
    fn param_count(&self, group: Option<&str>) -> PyResult<usize> {
        let g = match group {
            Some(s) => Some(
                ParamGroup::parse(s)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown group {s:?}")))?,
            ),
            None => None,
        };
        Ok(self.inner.param_count(g))
    }

    /// SHA-256 digest of the given parameter groups (all when omitted).
    #[pyo3(signature = (groups = None))]
    fn digest(&self, groups: Option<Vec<String>>) -> PyResult<String> {
        let gs = match groups {
            Some(v) => v
                .iter()
                .map(|s| {
                    ParamGroup::parse(s)
                        .ok_or_else(|| PyValueError::new_err(format!("unknown group {s:?}")))
                })
                .collect::<PyResult<Vec<_>>>()?,
            None => ParamGroup::ALL.to_vec(),
        };
        Ok(self.inner.store().digest(&gs))
    }

    #[pyo3(signature = (data, height, width, variant_name = "full"))]
    fn restore(
        &self,
        data: Vec<f64>,
        height: usize,
        width: usize,
        variant_name: &str,
    ) -> PyResult<Vec<f64>> {
        let img = image(data, height, width)?;
        Ok(self
            .inner
            .restore(&img, variant(variant_name)?)
            .py()?
            .data()
            .to_vec())
    }

    /// Pooled per-channel degradation feature of one image.
    #[pyo3(signature = (data, height, width, variant_name = "full"))]
    fn degradation_feature(
        &self,
        data: Vec<f64>,
        height: usize,
        width: usize,
        variant_name: &str,
    ) -> PyResult<Vec<f64>> {
        let img = image(data, height, width)?;
        Ok(self
            .inner
            .degradation_features(&img, variant(variant_name)?)
            .py()?
            .pooled)
    }

    fn has_anchors(&self) -> bool {
        self.anchors.is_some()
    }

    /// Restores with test-time adaptation; returns the image and the CORAL
    /// value before adaptation and after every step.
    #[pyo3(signature = (data, height, width, steps = 5, lr = 1e-2))]
    fn restore_with_tta(
        &self,
        data: Vec<f64>,
        height: usize,
        width: usize,
        steps: usize,
        lr: f64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let anchors = self
            .anchors
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no anchors"))?;
        let img = image(data, height, width)?;
        let cfg = adaptation::TtaConfig {
            steps,
            lr,
            reset_per_sample: true,
        };
        let (out, report) =
            adaptation::restore_with_tta(&self.inner, &img, anchors, &cfg, Variant::Full).py()?;
        Ok((out.data().to_vec(), report.coral_per_step))
    }

    fn dam_calls(&self) -> usize {
        self.inner.dam_calls()
    }
}

/// Synthetic `(degraded, clean)` pairs as flat lists.
#[pyfunction]
#[pyo3(signature = (task, split = "train", count = 4, size = 32, seed = 0))]
fn synthesize(
    task: &str,
    split: &str,
    count: usize,
    size: usize,
    seed: u64,
) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
    let task: Task = task.parse().py()?;
    let split: Split = split.parse().py()?;
    let (pairs, _) = data::synthesize_split(
        task,
        split,
        count,
        size,
        &data::RegimeConfig::default(),
        seed,
    )
    .py()?;
    Ok(pairs
        .into_iter()
        .map(|p| (p.degraded.data().to_vec(), p.clean.data().to_vec()))
        .collect())
}

#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    evaluation::psnr(&image(a, height, width)?, &image(b, height, width)?).py()
}

#[pyfunction]
#[pyo3(signature = (a, b, height, width, window = 8))]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize, window: usize) -> PyResult<f64> {
    let w = evaluation::SsimWindow::Uniform { size: window };
    evaluation::ssim(&image(a, height, width)?, &image(b, height, width)?, w).py()
}

/// Unbiased covariance of `n × d` rows.
#[pyfunction]
fn covariance(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let c = adaptation::covariance(&rows_tensor(&rows)?).py()?;
    let d = c.shape()[0];
    Ok(c.data().chunks(d).map(<[f64]>::to_vec).collect())
}

#[pyfunction]
fn coral_loss(c_target: Vec<Vec<f64>>, c_source: Vec<Vec<f64>>) -> PyResult<f64> {
    let d = c_target.len();
    adaptation::coral_loss(&rows_tensor(&c_target)?, &rows_tensor(&c_source)?, d).py()
}

/// Nearest-code index of every row (ties go to the lowest index).
#[pyfunction]
fn nearest_codes(rows: Vec<Vec<f64>>, codes: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let book = daam::Codebook::from_rows(&codes).py()?;
    rows.iter()
        .map(|r| daam::nearest_code(r, &book).py())
        .collect()
}

#[pyfunction]
fn cluster_margin(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64, f64)> {
    let m = evaluation::cluster_margin(&features, &labels).py()?;
    Ok((m.intra, m.inter, m.margin))
}

#[pyfunction]
#[pyo3(signature = (source, other, bins = 64))]
fn feature_density_kl(source: Vec<f64>, other: Vec<f64>, bins: usize) -> PyResult<f64> {
    Ok(evaluation::feature_density_kl(&source, &other, bins)
        .py()?
        .kl)
}

/// Effective configuration of a named profile as JSON.
#[pyfunction]
#[pyo3(signature = (profile = "ci"))]
fn profile_config(profile: &str) -> PyResult<String> {
    RunConfig::profile(profile.parse().py()?)
        .to_json_pretty()
        .py()
}

#[pymodule]
fn pyunirestore(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(coral_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_codes, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_margin, m)?)?;
    m.add_function(wrap_pyfunction!(feature_density_kl, m)?)?;
    m.add_function(wrap_pyfunction!(profile_config, m)?)?;
    Ok(())
}
