//! Python bindings: `import em2mlr_py`.

use std::cell::RefCell;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use em2mlr::finite::{random_direction, run_finite as run_finite_core, StreamId};
use em2mlr::harness::{execute, execute_target, find_target, ExperimentConfig};
use em2mlr::lowsnr::{lowsnr_step_dynamic, lowsnr_step_perturbative, LowSnrState};
use em2mlr::population::{self, nu_from_beta};
use em2mlr::{
    DensityKernel, EmVariant, Error, Expectations, FiniteState, MixtureModel, PopulationState, QuadratureSpec,
    SweepSpec,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.exit_code() == 1 => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for em2mlr::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Quadrature engine for expectations over the product-normal (or normal) law.
#[pyclass(frozen, name = "Engine")]
struct Engine {
    inner: Expectations,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (kernel = "bessel"))]
    fn new(kernel: &str) -> PyResult<Self> {
        let k: DensityKernel = kernel.parse().py()?;
        Ok(Self {
            inner: Expectations::new(k, QuadratureSpec::default()).py()?,
        })
    }

    fn m(&self, alpha: f64, nu: f64) -> PyResult<f64> {
        self.inner.m(alpha, nu).py()
    }

    fn n(&self, alpha: f64, nu: f64) -> PyResult<f64> {
        self.inner.n(alpha, nu).py()
    }

    fn l(&self, alpha: f64, nu: f64) -> PyResult<f64> {
        self.inner.l(alpha, nu).py()
    }

    fn tanh2_x(&self, alpha: f64, nu: f64) -> PyResult<f64> {
        self.inner.tanh2_x(alpha, nu).py()
    }

    fn tanh2_x2(&self, alpha: f64, nu: f64) -> PyResult<f64> {
        self.inner.tanh2_x2(alpha, nu).py()
    }

    fn j(&self, alpha: f64, nu: f64) -> PyResult<f64> {
        self.inner.j(alpha, nu).py()
    }

    /// `E[g(X)]` for a Python callable `g`.
    fn expect(&self, g: Bound<'_, PyAny>) -> PyResult<f64> {
        let failure = RefCell::new(None);
        let r = self
            .inner
            .expect(|x| match g.call1((x,)).and_then(|v| v.extract::<f64>()) {
                Ok(v) => v,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            });
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        Ok(r.py()?.value)
    }

    /// One population EM step: `(alpha, nu) -> (alpha', nu')`.
    fn step(&self, alpha: f64, nu: f64) -> PyResult<(f64, f64)> {
        let s = population::population_step(&PopulationState::new(alpha, nu).py()?, &self.inner).py()?;
        Ok((s.alpha, s.nu))
    }

    /// Population trajectory of `steps` updates as a dict of lists.
    #[pyo3(signature = (alpha0, nu0, steps, epsilon = 0.01))]
    fn run_population<'py>(
        &self,
        py: Python<'py>,
        alpha0: f64,
        nu0: f64,
        steps: usize,
        epsilon: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let traj = population::run_population(&self.inner, alpha0, nu0, steps, epsilon).py()?;
        let d = PyDict::new(py);
        d.set_item("alpha", traj.alphas())?;
        d.set_item("beta", traj.betas())?;
        d.set_item("beta_infinity", traj.beta_infinity)?;
        d.set_item("first_below_0.31", traj.first_passage.below_031)?;
        d.set_item("first_below_0.1", traj.first_passage.below_01)?;
        d.set_item("first_below_epsilon", traj.first_passage.below_epsilon)?;
        Ok(d)
    }

    /// Observed steps to `alpha <= epsilon` and the explicit budget.
    #[pyo3(signature = (alpha0, nu0, epsilon, max_steps = 1_000_000))]
    fn iteration_count(&self, alpha0: f64, nu0: f64, epsilon: f64, max_steps: usize) -> PyResult<(usize, usize)> {
        let c = population::iteration_count(&self.inner, alpha0, nu0, epsilon, max_steps).py()?;
        Ok((c.observed, c.budget))
    }

    /// Perturbative low-SNR update: returns `(alpha', beta', rho')`.
    fn lowsnr_step(&self, alpha: f64, beta: f64, rho: f64, eta: f64, beta_star: f64) -> PyResult<(f64, f64, f64)> {
        let s = LowSnrState::new(alpha, beta, rho, eta, beta_star).py()?;
        let next = lowsnr_step_perturbative(&s, &self.inner).py()?.state;
        Ok((next.alpha, next.beta(), next.rho))
    }
}

/// `(lower, upper)` sublinear envelope at step `t` for a balanced start.
#[pyfunction]
fn sublinear_bounds(alpha0: f64, t: usize) -> PyResult<(f64, f64)> {
    population::sublinear_bounds(alpha0, t).py()
}

/// Closed-form low-SNR dynamic equations: returns `(alpha', beta', rho')`.
#[pyfunction]
fn lowsnr_dynamic(alpha: f64, beta: f64, rho: f64, eta: f64, beta_star: f64) -> PyResult<(f64, f64, f64)> {
    let s = lowsnr_step_dynamic(&LowSnrState::new(alpha, beta, rho, eta, beta_star).py()?).py()?;
    Ok((s.alpha, s.beta(), s.rho))
}

/// Finite-sample EM in the overspecified model; returns per-step alpha and beta.
#[pyfunction]
#[pyo3(signature = (d, n, steps, alpha0, nu0 = 0.0, seed = 0, variant = "standard", resample = true, fixed_weights = true))]
#[allow(clippy::too_many_arguments)]
fn run_finite<'py>(
    py: Python<'py>,
    d: usize,
    n: usize,
    steps: usize,
    alpha0: f64,
    nu0: f64,
    seed: u64,
    variant: &str,
    resample: bool,
    fixed_weights: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let model = MixtureModel::overspecified(d, 1.0).py()?;
    let variant: EmVariant = variant.parse().py()?;
    let u = random_direction(d, StreamId::init(seed, 0));
    let state0 = FiniteState {
        theta: u.iter().map(|v| v * alpha0).collect(),
        nu: nu0,
        fixed_weights,
    };
    let traj = py
        .detach(|| run_finite_core(&model, n, steps, state0, variant, seed, 0, resample))
        .py()?;
    let out = PyDict::new(py);
    out.set_item("alpha", traj.alphas)?;
    out.set_item("beta", traj.betas)?;
    out.set_item("n_n", traj.n_n)?;
    Ok(out)
}

/// Final-alpha sweep. `spec` is a JSON object with any sweep fields
/// (`d`, `pi0`, `n_grid`, `trials`, `seed`, ...); returns medians and the
/// fitted log-log slope.
#[pyfunction]
#[pyo3(signature = (spec = "{}"))]
fn error_sweep<'py>(py: Python<'py>, spec: &str) -> PyResult<Bound<'py, PyDict>> {
    let spec: SweepSpec = serde_json::from_str(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = py.detach(|| em2mlr::error_sweep(&spec)).py()?;
    let d = PyDict::new(py);
    d.set_item("n", r.summary.iter().map(|s| s.n).collect::<Vec<_>>())?;
    d.set_item(
        "median_alpha",
        r.summary.iter().map(|s| s.median_alpha).collect::<Vec<_>>(),
    )?;
    d.set_item("slope", r.fit.slope)?;
    d.set_item("stderr", r.fit.stderr)?;
    d.set_item("aborted", r.aborted)?;
    Ok(d)
}

/// Run an experiment from a JSON config; returns the files written.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<Vec<String>> {
    let cfg = ExperimentConfig::from_json(config).py()?;
    let (out, _) = py.detach(|| execute(&cfg)).py()?;
    Ok(out.files)
}

/// Run a named reproduction target into `out_dir`; returns
/// `[(check, passed, detail), ...]`.
#[pyfunction]
#[pyo3(signature = (name, out_dir, seed = em2mlr::harness::repro::REPRO_SEED))]
fn repro(py: Python<'_>, name: &str, out_dir: PathBuf, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let target = find_target(name).py()?;
    let (outcome, _) = py.detach(|| execute_target(target, seed, &out_dir)).py()?;
    Ok(outcome
        .checks
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect())
}

/// `atanh(beta)` with the clamp used throughout the library.
#[pyfunction]
fn nu_of_beta(beta: f64) -> f64 {
    nu_from_beta(beta)
}

#[pymodule]
fn em2mlr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(sublinear_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(lowsnr_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(run_finite, m)?)?;
    m.add_function(wrap_pyfunction!(error_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(repro, m)?)?;
    m.add_function(wrap_pyfunction!(nu_of_beta, m)?)?;
    Ok(())
}
