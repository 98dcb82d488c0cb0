//! Python module `ppde_nrde`: log-signatures, problems, oracles and NRDE models.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ppde_core::adjoint::{adjoint_grad, OutputCotangent};
use ppde_core::config::ExperimentConfig;
use ppde_core::logsig::{self as ls, LyndonBasis, PiecewisePath};
use ppde_core::net::Checkpoint;
use ppde_core::nrde::{NrdeConfig, NrdeModel};
use ppde_core::problems::{self, ProblemSpec};
use ppde_core::sde::simulate_batch;
use ppde_core::train::{self, EvalConfig, Method, TrainConfig};
use ppde_core::Error;

type Matrix = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::NonFiniteHidden { .. } | Error::NonFiniteState { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn build_path(points: Vec<Vec<f64>>, times: Option<Vec<f64>>) -> PyResult<PiecewisePath> {
    let times = times.unwrap_or_else(|| (0..points.len()).map(|i| i as f64).collect());
    PiecewisePath::new(times, &points).map_err(to_py)
}

/// Log-signature coefficients in the Lyndon basis.
#[pyfunction]
#[pyo3(signature = (points, depth, times=None))]
fn logsig(points: Vec<Vec<f64>>, depth: usize, times: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let path = build_path(points, times)?;
    Ok(ls::logsig(&path, depth).map_err(to_py)?.into_coeffs())
}

/// Truncated signature, levels 0..=depth concatenated.
#[pyfunction]
#[pyo3(signature = (points, depth, times=None))]
fn signature(points: Vec<Vec<f64>>, depth: usize, times: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let path = build_path(points, times)?;
    Ok(ls::path_signature(&path, depth).map_err(to_py)?.flat())
}

/// Number of Lyndon words of length ≤ depth over `dim` letters.
#[pyfunction]
fn beta(dim: usize, depth: usize) -> PyResult<u64> {
    ls::beta(dim, depth).map_err(to_py)
}

/// Bracket labels of the Lyndon basis, e.g. `[1,2]`.
#[pyfunction]
fn lyndon_labels(dim: usize, depth: usize) -> PyResult<Vec<String>> {
    Ok(LyndonBasis::shared(dim, depth).map_err(to_py)?.labels())
}

/// Closed-form heat solution from a fine-grid prefix.
#[pyfunction]
fn heat_analytic(prefix: Vec<Vec<f64>>, dt: f64, horizon: f64) -> PyResult<f64> {
    let dim = prefix.first().map_or(0, |p| p.len());
    let flat: Vec<f64> = prefix.into_iter().flatten().collect();
    problems::heat_analytic(&flat, dim, dt, horizon).map_err(to_py)
}

#[pyclass(name = "Problem", from_py_object)]
#[derive(Clone)]
struct PyProblem {
    inner: ProblemSpec,
}

#[pymethods]
impl PyProblem {
    #[staticmethod]
    fn heat(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: ProblemSpec::heat(dim).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (dim, vol=0.3))]
    fn black_scholes_lookback(dim: usize, vol: f64) -> PyResult<Self> {
        Ok(Self {
            inner: ProblemSpec::black_scholes_lookback(dim, vol).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn heston_autocallable() -> PyResult<Self> {
        Ok(Self {
            inner: ProblemSpec::heston_autocallable().map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Coarse solution times t_0..t_N.
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.grid.coarse_times()
    }

    #[getter]
    fn fine_times(&self) -> Vec<f64> {
        self.inner.grid.fine_times()
    }

    /// `n` fine-grid paths as lists of samples.
    fn simulate(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let p = &self.inner;
        let paths = simulate_batch(&p.dynamics, &p.init, &p.grid, n, seed).map_err(to_py)?;
        Ok(paths
            .iter()
            .map(|path| path.points().map(|x| x.to_vec()).collect())
            .collect())
    }

    fn payoff(&self, points: Vec<Vec<f64>>) -> PyResult<f64> {
        let path = build_path(points, Some(self.inner.grid.fine_times()))?;
        self.inner.payoff(&path).map_err(to_py)
    }

    /// Monte-Carlo (mean, std_err) given a prefix ending on a coarse node.
    #[pyo3(signature = (prefix, n_sims=2000, seed=0))]
    fn mc_oracle(&self, prefix: Vec<Vec<f64>>, n_sims: usize, seed: u64) -> PyResult<(f64, f64)> {
        let flat: Vec<f64> = prefix.into_iter().flatten().collect();
        let est = problems::mc_oracle(&self.inner, &flat, n_sims, seed).map_err(to_py)?;
        Ok((est.mean, est.std_err))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Problem(dim={}, payoff={:?})", self.inner.dim(), self.inner.payoff)
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: NrdeModel,
}

fn parse_method(method: &str) -> PyResult<Method> {
    match method {
        "m1" => Ok(Method::M1),
        "m2" => Ok(Method::M2),
        other => Err(PyValueError::new_err(format!("unknown method `{other}` (m1, m2)"))),
    }
}

#[pymethods]
impl PyModel {
    /// Builds a model from keyword hyperparameters; unset ones keep their defaults.
    #[new]
    #[pyo3(signature = (input_dim, seed=0, **kwargs))]
    fn new(input_dim: usize, seed: u64, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(NrdeConfig {
            input_dim,
            ..NrdeConfig::default()
        })
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let json: String = v.py().import("json")?.call_method1("dumps", (v,))?.extract()?;
                value[key] = serde_json::from_str(&json).map_err(|e| PyValueError::new_err(e.to_string()))?;
            }
        }
        let config: NrdeConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: NrdeModel::new(config, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(std::path::Path::new(path)).map_err(to_py)?;
        Ok(Self {
            inner: NrdeModel::from_checkpoint(ck).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner
            .to_checkpoint()
            .save(std::path::Path::new(path))
            .map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[setter]
    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&params).map_err(to_py)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// û at the coarse nodes and, with a derivative head, the path derivative.
    fn predict(&self, problem: &PyProblem, points: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Option<Matrix>)> {
        let grid = problem.inner.grid;
        let path = build_path(points, Some(grid.fine_times()))?;
        let pred = self.inner.predict_path(&path, &grid).map_err(to_py)?;
        Ok((pred.u, pred.dx))
    }

    /// Gradient of Σ_j cot_u[j]·û(t_j) with respect to all parameters (adjoint method).
    fn gradient(&self, problem: &PyProblem, points: Vec<Vec<f64>>, cot_u: Vec<f64>) -> PyResult<Vec<f64>> {
        let grid = problem.inner.grid;
        let path = build_path(points, Some(grid.fine_times()))?;
        let enc = self.inner.encode(&path, &grid).map_err(to_py)?;
        let mut cot = OutputCotangent::from_u(cot_u);
        if let Some(shape) = self.inner.readout_dx_shape() {
            cot.dx = Some(vec![vec![0.0; shape.n_out()]; cot.u.len()]);
        }
        Ok(adjoint_grad(&self.inner, &enc, &cot).map_err(to_py)?.into_inner())
    }

    /// Trains in place and returns the per-epoch loss.
    #[pyo3(signature = (problem, epochs, batch_size=64, lr=0.1, seed=0, method="m1"))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        problem: &PyProblem,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        method: &str,
    ) -> PyResult<Vec<f64>> {
        let config = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            method: parse_method(method)?,
            ..TrainConfig::default()
        };
        let spec = problem.inner.clone();
        let model = &mut self.inner;
        let out = py
            .detach(|| train::train(model, &spec, &config, |_, _| {}))
            .map_err(to_py)?;
        Ok(out.curve)
    }

    /// Abs.err and Rel.err statistics over test batches.
    #[pyo3(signature = (problem, n_test=50, n_batches=10, n_sims=2000, seed=1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        problem: &PyProblem,
        n_test: usize,
        n_batches: usize,
        n_sims: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = EvalConfig {
            n_test,
            n_batches,
            n_sims,
            seed,
        };
        let model = &self.inner;
        let spec = &problem.inner;
        let r = py.detach(|| train::evaluate(model, spec, &cfg, None)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("abs_err_mean", r.abs_err.mean)?;
        d.set_item("abs_err_std", r.abs_err.std)?;
        d.set_item("rel_err_mean", r.rel_err.mean)?;
        d.set_item("rel_err_std", r.rel_err.std)?;
        d.set_item("rel_profile", r.rel_profile)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model(num_params={})", self.inner.num_params())
    }
}

/// Parses a TOML experiment and returns (problem, freshly initialized model, train settings).
#[pyfunction]
fn load_experiment<'py>(py: Python<'py>, text: &str) -> PyResult<(PyProblem, PyModel, Bound<'py, PyDict>)> {
    let cfg = ExperimentConfig::from_toml_str(text).map_err(to_py)?;
    let problem = PyProblem {
        inner: cfg.problem_spec().map_err(to_py)?,
    };
    let model = PyModel {
        inner: NrdeModel::new(cfg.model.clone(), cfg.seed).map_err(to_py)?,
    };
    let d = PyDict::new(py);
    d.set_item("epochs", cfg.train.epochs)?;
    d.set_item("batch_size", cfg.train.batch_size)?;
    d.set_item("lr", cfg.train.lr)?;
    d.set_item("seed", cfg.seed)?;
    d.set_item(
        "method",
        match cfg.train.method {
            Method::M1 => "m1",
            Method::M2 => "m2",
        },
    )?;
    Ok((problem, model, d))
}

#[pymodule]
fn ppde_nrde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(logsig, m)?)?;
    m.add_function(wrap_pyfunction!(signature, m)?)?;
    m.add_function(wrap_pyfunction!(beta, m)?)?;
    m.add_function(wrap_pyfunction!(lyndon_labels, m)?)?;
    m.add_function(wrap_pyfunction!(heat_analytic, m)?)?;
    m.add_function(wrap_pyfunction!(load_experiment, m)?)?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
