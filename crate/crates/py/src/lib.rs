//! Python bindings for the `tnnpde` crate, importable as `tnnpde`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tnnpde::config::Config;
use tnnpde::experiments::{self, RunRow};
use tnnpde::fbsde::LossKind;
use tnnpde::problems::ProblemId;
use tnnpde::training::{self, ConvergenceParams, TrainConfig};
use tnnpde::{Activation, ArchKind, ArchitectureSpec, InitScheme, Tensor, TnLayer};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A trainable network: dense input layer, dense or TN hidden layer, linear output.
#[pyclass(module = "tnnpde")]
struct Network {
    inner: tnnpde::Network,
    arch: ArchKind,
}

#[pymethods]
impl Network {
    /// `Network("TNN(16,4)", input_dim=11, seed=0)`
    #[new]
    #[pyo3(signature = (arch, input_dim, seed=0, activation="tanh", init="glorot"))]
    fn new(arch: &str, input_dim: usize, seed: u64, activation: &str, init: &str) -> PyResult<Self> {
        let arch: ArchKind = arch.parse().map_err(err)?;
        let activation: Activation = activation.parse().map_err(err)?;
        let init: InitScheme = init.parse().map_err(err)?;
        let spec = ArchitectureSpec::new(arch, input_dim);
        let inner = tnnpde::Network::build(&spec, activation, init, seed).map_err(err)?;
        Ok(Network { inner, arch })
    }

    #[getter]
    fn arch(&self) -> String {
        self.arch.to_string()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `u(t, x)` for a single point.
    fn value_at(&self, t: f64, x: Vec<f64>) -> PyResult<f64> {
        self.inner.value_at(t, &x).map_err(err)
    }

    /// Weights in the line-oriented text format.
    fn to_text(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_text(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }

    /// Replace the weights with ones read from `to_text` output.
    fn load_text(&mut self, text: &str) -> PyResult<()> {
        let net = tnnpde::Network::read_text(text.as_bytes()).map_err(err)?;
        if net.param_count() != self.inner.param_count() || net.input_dim() != self.inner.input_dim() {
            return Err(PyValueError::new_err("weights do not fit this architecture"));
        }
        self.inner = net;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("Network({}, params={})", self.arch, self.inner.param_count())
    }
}

/// A benchmark problem: `bsb`, `hjb` or `hjb<d>`.
#[pyclass(module = "tnnpde")]
struct Problem {
    id: ProblemId,
}

#[pymethods]
impl Problem {
    #[new]
    #[pyo3(signature = (name, steps=None))]
    fn new(name: &str, steps: Option<usize>) -> PyResult<Self> {
        let mut id = ProblemId::parse(name).map_err(err)?;
        if let Some(n) = steps {
            id = id.with_steps(n);
        }
        id.build().map_err(err)?;
        Ok(Problem { id })
    }

    #[getter]
    fn name(&self) -> String {
        self.id.name()
    }

    #[getter]
    fn dim(&self) -> PyResult<usize> {
        Ok(self.id.build().map_err(err)?.dim)
    }

    #[getter]
    fn steps(&self) -> PyResult<usize> {
        Ok(self.id.build().map_err(err)?.steps)
    }

    #[getter]
    fn x0(&self) -> PyResult<Vec<f64>> {
        Ok(self.id.build().map_err(err)?.x0)
    }

    /// `(value, standard_error)` of `u(0, x0)`.
    fn reference_y0(&self, py: Python<'_>) -> PyResult<(f64, f64)> {
        let id = self.id.clone();
        let r = py.detach(move || id.reference_y0()).map_err(err)?;
        Ok((r.value, r.std_error))
    }

    /// Closed-form `u(t, x)` where one exists, else `None`.
    fn exact(&self, t: f64, x: Vec<f64>) -> PyResult<Option<f64>> {
        Ok(self.id.build().map_err(err)?.exact(t, &x))
    }

    fn __repr__(&self) -> String {
        format!("Problem({:?})", self.id.name())
    }
}

/// Two-layer DNN shapes `(x, y)` with exactly `params` parameters.
#[pyfunction]
#[pyo3(signature = (params, input_dim=11))]
fn enumerate_dnn_matches(params: usize, input_dim: usize) -> Vec<(usize, usize)> {
    experiments::enumerate_dnn_matches(params, input_dim)
}

#[pyfunction]
#[pyo3(signature = (arch, input_dim=11))]
fn param_count(arch: &str, input_dim: usize) -> PyResult<usize> {
    let arch: ArchKind = arch.parse().map_err(err)?;
    ArchitectureSpec::new(arch, input_dim).param_count().map_err(err)
}

#[pyfunction]
fn ema_smooth(series: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    training::ema_smooth(&series, alpha).map_err(err)
}

/// First epoch (1-based) at which the smoothed series settles below `threshold`.
#[pyfunction]
#[pyo3(signature = (series, threshold, alpha=0.9, window=200, batch=50, tol=1e-4))]
fn convergence_epoch(
    series: Vec<f64>,
    threshold: f64,
    alpha: f64,
    window: usize,
    batch: usize,
    tol: f64,
) -> PyResult<Option<usize>> {
    let params = ConvergenceParams {
        alpha,
        window,
        batch,
        threshold,
        tol,
    };
    params.validate().map_err(err)?;
    Ok(training::convergence_epoch(&series, &params))
}

/// Contract flat `d x d x chi` cores into the `d^2 x d^2` weight matrix.
#[pyfunction]
fn tn_contract_weight(core_a: Vec<f64>, core_b: Vec<f64>, d: usize, chi: usize) -> PyResult<Vec<Vec<f64>>> {
    let a = Tensor::from_vec(&[d, d, chi], core_a).map_err(err)?;
    let b = Tensor::from_vec(&[d, d, chi], core_b).map_err(err)?;
    let bias = Tensor::zeros(&[d * d]).map_err(err)?;
    let layer = TnLayer::new(a, b, bias, Activation::Identity).map_err(err)?;
    let w = layer.contracted_weight().map_err(err)?;
    Ok(w.data().chunks(d * d).map(<[f64]>::to_vec).collect())
}

#[pyfunction]
fn reference_y0(py: Python<'_>, problem: &str) -> PyResult<(f64, f64)> {
    Problem::new(problem, None)?.reference_y0(py)
}

/// Train `network` in place; returns `{"loss": [...], "y0": [...], "wall_time": [...]}`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (problem, network, epochs, seed=0, batch_size=100, lr=1e-3, loss="hybrid"))]
fn train<'py>(
    py: Python<'py>,
    problem: &Problem,
    network: &mut Network,
    epochs: usize,
    seed: u64,
    batch_size: usize,
    lr: f64,
    loss: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let fbsde = problem.id.build().map_err(err)?;
    let loss: LossKind = loss.parse().map_err(err)?;
    let mut config = TrainConfig {
        batch_size,
        epochs,
        loss,
        seed,
        ..TrainConfig::default()
    };
    config.adam.lr = lr;
    let net = &mut network.inner;
    let log = py.detach(|| training::train(&fbsde, net, &config)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("loss", log.loss)?;
    out.set_item("y0", log.y0)?;
    out.set_item("wall_time", log.wall_time)?;
    Ok(out)
}

/// Run the `network.archs x seeds` plan described by a TOML config and
/// return one dict per run with the CSV columns.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, toml: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = Config::from_toml(toml).map_err(err)?;
    let plan = config.plan().map_err(err)?;
    let runs = py.detach(|| experiments::run_plan(&plan)).map_err(err)?;
    runs.iter()
        .map(|r| {
            let row = RunRow::from(r);
            let d = PyDict::new(py);
            d.set_item("problem", row.problem)?;
            d.set_item("arch_kind", row.arch_kind)?;
            d.set_item("width_x", row.width_x)?;
            d.set_item("width_y_or_chi", row.width_y_or_chi)?;
            d.set_item("param_count", row.param_count)?;
            d.set_item("seed", row.seed)?;
            d.set_item("epochs_run", row.epochs_run)?;
            d.set_item("convergence_epoch", row.convergence_epoch)?;
            d.set_item("final_loss", row.final_loss)?;
            d.set_item("final_y0", row.final_y0)?;
            d.set_item("reference_y0", row.reference_y0)?;
            d.set_item("rel_error", row.rel_error)?;
            d.set_item("reached_1pct", row.reached_1pct)?;
            d.set_item("wall_time_s", row.wall_time_s)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "tnnpde")]
fn tnnpde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(enumerate_dnn_matches, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(ema_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(tn_contract_weight, m)?)?;
    m.add_function(wrap_pyfunction!(reference_y0, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
