//! Python module `optimist`: MDPs, divergences and conjugate bonuses, and
//! the experiment harness.

use ndarray::Array2;
use optimist_core::divergence::{self as div, ConjugateInput, DivergenceKind};
use optimist_core::harness::{format_summary, run_experiment as run_logs, summarize, ExperimentConfig};
use optimist_core::mdp::{self, PolicyTable};
use optimist_core::{linear, oracles, tabular, verify};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: optimist_core::Error) -> PyErr {
    match e {
        optimist_core::Error::Invariant(_) | optimist_core::Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn kind(name: &str) -> PyResult<DivergenceKind> {
    name.parse().map_err(to_py)
}

fn rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Finite-horizon tabular MDP with rewards in `[0, 1]`.
#[pyclass(name = "TabularMdp", module = "optimist")]
struct PyTabularMdp {
    inner: mdp::TabularMdp,
}

#[pymethods]
impl PyTabularMdp {
    /// RiverSwim-style chain with two actions.
    #[staticmethod]
    fn chain(states: usize, horizon: usize) -> PyResult<Self> {
        Ok(Self { inner: mdp::TabularMdp::chain(states, horizon).map_err(to_py)? })
    }

    #[staticmethod]
    fn random(states: usize, actions: usize, horizon: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: mdp::TabularMdp::random(states, actions, horizon, seed).map_err(to_py)? })
    }

    /// Parses `{"S", "A", "H", "x1", "r", "P"}`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: mdp::TabularMdp::from_json_str(text).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().map_err(to_py)
    }

    #[getter]
    fn states(&self) -> usize {
        self.inner.states()
    }

    #[getter]
    fn actions(&self) -> usize {
        self.inner.actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn initial_state(&self) -> usize {
        self.inner.initial_state()
    }

    /// Optimal values `V[h][x]` (with a zero terminal row) and the greedy policy `pi[h][x]`.
    fn solve(&self) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        let (v, pi) = mdp::solve_bellman_optimality(&self.inner);
        let pi = match pi {
            PolicyTable::Deterministic(a) => rows(&a),
            PolicyTable::Stochastic(_) => unreachable!("backward induction returns a deterministic policy"),
        };
        (rows(&v), pi)
    }

    /// Values of the deterministic policy `pi[h][x]`.
    fn evaluate(&self, pi: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let (big_h, s) = (self.inner.horizon(), self.inner.states());
        if pi.len() != big_h || pi.iter().any(|r| r.len() != s) {
            return Err(PyValueError::new_err(format!("policy must have shape ({big_h}, {s})")));
        }
        let table = Array2::from_shape_fn((big_h, s), |(h, x)| pi[h][x]);
        let v = mdp::evaluate_policy(&self.inner, &PolicyTable::deterministic(table)).map_err(to_py)?;
        Ok(rows(&v))
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularMdp(S={}, A={}, H={}, x1={})",
            self.inner.states(),
            self.inner.actions(),
            self.inner.horizon(),
            self.inner.initial_state()
        )
    }
}

/// `D(p, p_hat)` for kind `tv`, `bernstein`, `kl`, `rkl` or `chi2`.
#[pyfunction]
fn divergence(kind_name: &str, p: Vec<f64>, p_hat: Vec<f64>) -> PyResult<f64> {
    div::divergence(kind(kind_name)?, &p, &p_hat).map_err(to_py)
}

fn input<'a>(z: &'a [f64], eps: f64, p_hat: &'a [f64], horizon: Option<f64>, count: f64) -> ConjugateInput<'a> {
    let base = ConjugateInput::new(z, eps, p_hat);
    let horizon = horizon.unwrap_or(base.horizon_remaining);
    base.with_extras(horizon, count, z.len())
}

/// Closed-form upper bound on `D*(z | eps, p_hat)`.
#[pyfunction]
#[pyo3(signature = (kind_name, z, eps, p_hat, horizon=None, count=1.0))]
fn conjugate_upper(
    kind_name: &str,
    z: Vec<f64>,
    eps: f64,
    p_hat: Vec<f64>,
    horizon: Option<f64>,
    count: f64,
) -> PyResult<f64> {
    div::conjugate_upper(kind(kind_name)?, &input(&z, eps, &p_hat, horizon, count)).map_err(to_py)
}

/// Exact `D*(z | eps, p_hat)`; raises `ValueError` when the set is empty.
#[pyfunction]
fn exact_conjugate(kind_name: &str, z: Vec<f64>, eps: f64, p_hat: Vec<f64>) -> PyResult<f64> {
    oracles::exact_conjugate(kind(kind_name)?, &input(&z, eps, &p_hat, None, 1.0)).map_err(to_py)
}

/// Best simplex-lattice point: `(value, argmax)`, or `None` if no point is feasible.
#[pyfunction]
fn conjugate_bruteforce(
    kind_name: &str,
    z: Vec<f64>,
    eps: f64,
    p_hat: Vec<f64>,
    grid_step: f64,
) -> PyResult<Option<(f64, Vec<f64>)>> {
    let grid = div::conjugate_bruteforce(kind(kind_name)?, &input(&z, eps, &p_hat, None, 1.0), grid_step)
        .map_err(to_py)?;
    Ok(grid.feasible.then_some((grid.value, grid.argmax)))
}

/// Tabular confidence width for `n` samples.
#[pyfunction]
fn confidence_width(
    kind_name: &str,
    n: f64,
    states: usize,
    actions: usize,
    horizon: usize,
    total_rounds: u64,
    delta: f64,
) -> PyResult<f64> {
    tabular::confidence_width(kind(kind_name)?, n, states, actions, horizon, total_rounds, delta).map_err(to_py)
}

/// LSVI-UCB bonus scale `alpha`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn alpha_schedule(
    d: usize,
    actions: usize,
    horizon: usize,
    episodes: u64,
    radius: f64,
    c_p: f64,
    delta: f64,
    lambda: f64,
) -> PyResult<f64> {
    linear::alpha_schedule(d, actions, horizon, episodes, radius, c_p, delta, lambda).map_err(to_py)
}

/// Runs a JSON experiment config and returns one dict per episode and seed.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::from_json_str(config_json).map_err(to_py)?;
    let logs = py.detach(|| run_logs(&cfg)).map_err(to_py)?;
    let mut out = Vec::new();
    for log in &logs {
        for r in &log.records {
            let d = PyDict::new(py);
            d.set_item("episode", r.episode)?;
            d.set_item("seed", log.seed)?;
            d.set_item("alg", log.algorithm.as_str())?;
            d.set_item("vstar", r.vstar)?;
            d.set_item("vpi", r.vpi)?;
            d.set_item("return", r.realized_return)?;
            d.set_item("cum_regret", r.cum_regret)?;
            d.set_item("cum_bonus", r.cum_bonus)?;
            d.set_item("feasible", r.feasible)?;
            out.push(d);
        }
    }
    Ok(out)
}

/// Runs a JSON experiment config and returns the plain-text summary table.
#[pyfunction]
fn summary(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json_str(config_json).map_err(to_py)?;
    let logs = py.detach(|| run_logs(&cfg)).map_err(to_py)?;
    Ok(format_summary(&summarize(&logs)))
}

/// Runs the oracle suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn verify_oracles(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let outcomes = py.detach(|| verify::run_oracle_suite(seed)).map_err(to_py)?;
    Ok(outcomes.into_iter().map(|o| (o.name.to_string(), o.passed, o.detail)).collect())
}

#[pymodule]
fn optimist(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTabularMdp>()?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(conjugate_upper, m)?)?;
    m.add_function(wrap_pyfunction!(exact_conjugate, m)?)?;
    m.add_function(wrap_pyfunction!(conjugate_bruteforce, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_width, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(summary, m)?)?;
    m.add_function(wrap_pyfunction!(verify_oracles, m)?)?;
    Ok(())
}
