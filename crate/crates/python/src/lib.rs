//! Python bindings. Probability maps cross the boundary as flat
//! height-width-class lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::rectseg::experiment::{run_pipeline as pipeline, Datasets};
use ::rectseg::image::{Image, LabelMap};
use ::rectseg::loss::{
    cross_entropy_value, rectified_loss_value, Distance, RectifiedLossConfig, VarianceGrad,
};
use ::rectseg::pseudo::PseudoLabels;
use ::rectseg::synthdata::load_dataset;
use ::rectseg::uncertainty::{kl_variance, KlDirection};
use ::rectseg::{ExperimentConfig, ProbMap, TwoHeadSegNet};

fn err(e: ::rectseg::Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        ::rectseg::Error::Io { .. } => PyOSError::new_err(msg),
        ::rectseg::Error::Shape { .. }
        | ::rectseg::Error::InvalidArgument(_)
        | ::rectseg::Error::Config(_) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn probs(height: usize, width: usize, classes: usize, v: Vec<f64>) -> PyResult<ProbMap> {
    ProbMap::new(height, width, classes, v).map_err(err)
}

fn pseudo(
    height: usize,
    width: usize,
    labels: Vec<u8>,
    valid: Option<Vec<bool>>,
) -> PyResult<PseudoLabels> {
    let n = labels.len();
    Ok(PseudoLabels {
        labels: LabelMap::new(height, width, labels).map_err(err)?,
        confidence: vec![1.0; n],
        valid: valid.unwrap_or_else(|| vec![true; n]),
    })
}

/// Flat key=value experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ExperimentConfig::from_text(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }
}

/// Two-head segmentation network.
#[pyclass(name = "Net")]
struct PyNet {
    inner: TwoHeadSegNet,
}

#[pymethods]
impl PyNet {
    #[staticmethod]
    fn init(seed: u64, config: &PyConfig) -> PyResult<Self> {
        let inner = TwoHeadSegNet::init(seed, config.inner.net.clone()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TwoHeadSegNet::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Eval-mode `(P, P_aux)` for a flat height-width-RGB image in [0, 1].
    fn predict(
        &self,
        height: usize,
        width: usize,
        rgb: Vec<f64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let img = Image::new(height, width, rgb).map_err(err)?;
        let (p, pa) = self.inner.predict(&img).map_err(err)?;
        Ok((p.probs, pa.probs))
    }

    /// `(mIoU, per-class IoU)` of `alpha * P + beta * P_aux` on a dataset
    /// directory.
    #[pyo3(signature = (data, alpha = 1.0, beta = 0.5))]
    fn evaluate(&self, data: PathBuf, alpha: f64, beta: f64) -> PyResult<(f64, Vec<Option<f64>>)> {
        let set = load_dataset(&data).map_err(err)?;
        let r =
            ::rectseg::eval::evaluate_checkpoint(&self.inner, &set, alpha, beta).map_err(err)?;
        Ok((r.miou, r.per_class))
    }
}

/// Per-pixel forward KL between two probability maps.
#[pyfunction]
fn kl_divergence(
    height: usize,
    width: usize,
    classes: usize,
    p: Vec<f64>,
    p_aux: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let (p, q) = (
        probs(height, width, classes, p)?,
        probs(height, width, classes, p_aux)?,
    );
    Ok(kl_variance(&p, &q, KlDirection::Forward)
        .map_err(err)?
        .values)
}

#[pyfunction]
#[pyo3(signature = (height, width, classes, p, labels, valid = None))]
fn cross_entropy(
    height: usize,
    width: usize,
    classes: usize,
    p: Vec<f64>,
    labels: Vec<u8>,
    valid: Option<Vec<bool>>,
) -> PyResult<f64> {
    let pm = probs(height, width, classes, p)?;
    cross_entropy_value(&pm, &pseudo(height, width, labels, valid)?).map_err(err)
}

/// `distance` is one of `kl`, `kl_reversed`, `mse`.
#[pyfunction]
#[pyo3(signature = (height, width, classes, p, p_aux, labels, valid = None, distance = "kl"))]
#[allow(clippy::too_many_arguments)]
fn rectified_loss(
    height: usize,
    width: usize,
    classes: usize,
    p: Vec<f64>,
    p_aux: Vec<f64>,
    labels: Vec<u8>,
    valid: Option<Vec<bool>>,
    distance: &str,
) -> PyResult<f64> {
    let distance: Distance = distance.parse().map_err(err)?;
    let cfg = RectifiedLossConfig {
        distance,
        variance_grad: VarianceGrad::Detached,
        aux_ce_weight: 0.0,
    };
    let (a, b) = (
        probs(height, width, classes, p)?,
        probs(height, width, classes, p_aux)?,
    );
    rectified_loss_value(&a, &b, &pseudo(height, width, labels, valid)?, &cfg).map_err(err)
}

#[pyfunction]
fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> PyResult<f64> {
    ::rectseg::poly_lr(iter, total, base, power).map_err(err)
}

/// Writes the four dataset splits under `out`.
#[pyfunction]
fn generate_data(config: &PyConfig, out: PathBuf) -> PyResult<()> {
    let data = Datasets::generate(&config.inner).map_err(err)?;
    data.save(&out, &config.inner).map_err(err)
}

/// Full pipeline; returns target-test mIoU before and after adaptation.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<(f64, f64)> {
    let cfg = config.inner.clone();
    let o = py.detach(move || pipeline(&cfg, &out, &[])).map_err(err)?;
    Ok((o.source_on_target.miou, o.adapted_on_target.miou))
}

#[pymodule]
fn rectseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyNet>()?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(rectified_loss, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
