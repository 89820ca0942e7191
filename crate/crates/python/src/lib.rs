//! Python bindings for the `fedq` simulator.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedq::experiment::{self, ExperimentConfig};
use fedq::mdp;
use fedq::metrics::{self, geometric_checkpoints};
use fedq::rates::{self, RateParams};
use fedq::runtime::{self, BonusConfig, FedqConfig, Variant};

create_exception!(fedq_py, FedqError, PyException, "Simulator error; `args[0]` is the category.");

fn to_py(err: fedq::FedqError) -> PyErr {
    FedqError::new_err((err.category(), err.to_string()))
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(to_py)
}

#[pyclass(name = "TabularMdp", module = "fedq_py", frozen)]
struct PyMdp {
    inner: mdp::TabularMdp,
}

#[pymethods]
impl PyMdp {
    #[staticmethod]
    #[pyo3(signature = (states, actions, horizon, seed = 0))]
    fn generate(states: usize, actions: usize, horizon: usize, seed: u64) -> PyResult<Self> {
        let inner = mdp::generate_random_mdp(states, actions, horizon, seed).map_err(to_py)?;
        Ok(PyMdp { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyMdp {
            inner: mdp::TabularMdp::from_json(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyMdp {
            inner: mdp::TabularMdp::load(path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn reward(&self, h: usize, s: usize, a: usize) -> PyResult<f64> {
        self.check(h, s, a)?;
        Ok(self.inner.reward(h, s, a))
    }

    fn transition_row(&self, h: usize, s: usize, a: usize) -> PyResult<Vec<f64>> {
        self.check(h, s, a)?;
        Ok(self.inner.transition_row(h, s, a).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularMdp(states={}, actions={}, horizon={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.horizon()
        )
    }
}

impl PyMdp {
    fn check(&self, h: usize, s: usize, a: usize) -> PyResult<()> {
        if h >= self.inner.horizon() || s >= self.inner.num_states() || a >= self.inner.num_actions() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("(h={h}, s={s}, a={a}) out of range")));
        }
        Ok(())
    }
}

#[pyclass(name = "MdpSolution", module = "fedq_py", frozen)]
struct PySolution {
    inner: mdp::MdpSolution,
}

#[pymethods]
impl PySolution {
    /// `V*` flattened over `(h, s)`.
    #[getter]
    fn v_star(&self) -> Vec<f64> {
        self.inner.v_star.clone()
    }

    /// `Q*` flattened over `(h, s, a)`.
    #[getter]
    fn q_star(&self) -> Vec<f64> {
        self.inner.q_star.clone()
    }

    #[getter]
    fn gap(&self) -> Vec<f64> {
        self.inner.gap.clone()
    }

    #[getter]
    fn min_gap(&self) -> f64 {
        self.inner.min_gap
    }

    #[getter]
    fn is_gmdp(&self) -> bool {
        self.inner.is_gmdp
    }

    #[getter]
    fn c_st(&self) -> f64 {
        self.inner.c_st
    }

    #[getter]
    fn visit_prob_star(&self) -> Vec<f64> {
        self.inner.visit_prob_star.clone()
    }

    fn canonical_policy(&self) -> Vec<usize> {
        self.inner.canonical_policy().actions().to_vec()
    }

    fn theoretical_bounds<'py>(
        &self,
        py: Python<'py>,
        agents: usize,
        steps: f64,
        p: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let s = &self.inner;
        let b = metrics::theoretical_bounds(s, agents, s.num_states, s.num_actions, s.horizon, steps, p);
        let d = PyDict::new(py);
        d.set_item("regret_bound", b.regret_bound)?;
        d.set_item("round_bound", b.round_bound)?;
        d.set_item("switching_bound", b.switching_bound)?;
        Ok(d)
    }
}

#[pyclass(name = "RunMetrics", module = "fedq_py", frozen)]
struct PyMetrics {
    inner: metrics::RunMetrics,
}

#[pymethods]
impl PyMetrics {
    #[getter]
    fn regret(&self) -> f64 {
        self.inner.regret
    }

    #[getter]
    fn rounds(&self) -> u64 {
        self.inner.rounds
    }

    #[getter]
    fn comm_scalars(&self) -> u64 {
        self.inner.comm_scalars
    }

    #[getter]
    fn abort_scalars(&self) -> u64 {
        self.inner.abort_scalars
    }

    #[getter]
    fn switching_cost(&self) -> u64 {
        self.inner.switching_cost
    }

    #[getter]
    fn subopt_visits(&self) -> u64 {
        self.inner.subopt_visits
    }

    #[getter]
    fn optimism_fraction(&self) -> f64 {
        self.inner.optimism_fraction
    }

    #[getter]
    fn episodes_per_agent(&self) -> u64 {
        self.inner.episodes_per_agent
    }

    #[getter]
    fn steps_total(&self) -> u64 {
        self.inner.steps_total
    }

    #[getter]
    fn visit_ledger(&self) -> Vec<u64> {
        self.inner.visit_ledger.clone()
    }

    fn regret_curve(&self) -> Vec<(u64, f64)> {
        self.inner.regret_curve()
    }

    fn rounds_curve(&self) -> Vec<(u64, u64)> {
        self.inner.rounds_curve()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| to_py(e.into()))
    }

    fn __repr__(&self) -> String {
        format!(
            "RunMetrics(regret={:.4}, rounds={}, switching_cost={}, episodes_per_agent={})",
            self.inner.regret, self.inner.rounds, self.inner.switching_cost, self.inner.episodes_per_agent
        )
    }
}

#[pyfunction]
fn solve_optimal(mdp: &PyMdp) -> PyResult<PySolution> {
    Ok(PySolution {
        inner: mdp::solve_optimal(&mdp.inner).map_err(to_py)?,
    })
}

/// Values of a deterministic policy given as actions flattened over `(h, s)`.
#[pyfunction]
fn evaluate_policy(mdp: &PyMdp, actions: Vec<usize>) -> PyResult<Vec<f64>> {
    let m = &mdp.inner;
    let policy = mdp::DeterministicPolicy::new(m.num_states(), m.horizon(), actions).map_err(to_py)?;
    mdp::evaluate_policy(m, &policy).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (mdp, agents, episodes, variant = "hoeffding", seed = 0, c = 2.0, c_prime = 2.0, iota = 1.0))]
#[allow(clippy::too_many_arguments)]
fn run_fedq(
    py: Python<'_>,
    mdp: &PyMdp,
    agents: usize,
    episodes: u64,
    variant: &str,
    seed: u64,
    c: f64,
    c_prime: f64,
    iota: f64,
) -> PyResult<PyMetrics> {
    let m = mdp.inner.clone();
    let config = FedqConfig {
        num_agents: agents,
        target_steps: (m.horizon() * agents) as u64 * episodes,
        variant: parse_variant(variant)?,
        bonus: BonusConfig {
            bonus_scale: c,
            bernstein_scale: c_prime,
            log_factor: iota,
        },
        seed,
        checkpoints: geometric_checkpoints(episodes, 1.25),
    };
    let run = py.detach(move || runtime::run_fedq(&m, &config)).map_err(to_py)?;
    Ok(PyMetrics { inner: run.metrics })
}

#[pyfunction]
#[pyo3(signature = (mdp, episodes, seed = 0, c = 2.0, iota = 1.0))]
fn run_ucb_hoeffding(py: Python<'_>, mdp: &PyMdp, episodes: u64, seed: u64, c: f64, iota: f64) -> PyResult<PyMetrics> {
    let m = mdp.inner.clone();
    let rates = RateParams::new(m.horizon(), c, iota).map_err(to_py)?;
    let inner = py
        .detach(move || fedq::baseline::run_ucb_hoeffding(&m, episodes, &rates, seed))
        .map_err(to_py)?;
    Ok(PyMetrics { inner })
}

/// Runs an experiment from TOML text; returns the JSON summary.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let config = ExperimentConfig::from_toml(config_toml).map_err(to_py)?;
    let summary = py.detach(move || experiment::run_experiment(&config)).map_err(to_py)?;
    serde_json::to_string(&summary).map_err(|e| to_py(e.into()))
}

#[pyfunction]
#[pyo3(signature = (points, burn_in = 0))]
fn fit_comm_slope<'py>(py: Python<'py>, points: Vec<(u64, f64)>, burn_in: u64) -> PyResult<Bound<'py, PyDict>> {
    let fit = experiment::fit_comm_slope(&points, burn_in).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("slope", fit.slope)?;
    d.set_item("intercept", fit.intercept)?;
    d.set_item("r_squared", fit.r_squared)?;
    d.set_item("points", fit.points)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (curve, tail_fraction = 0.5))]
fn regret_log_plateau(curve: Vec<(u64, f64)>, tail_fraction: f64) -> PyResult<f64> {
    experiment::regret_log_plateau(&curve, tail_fraction).map_err(to_py)
}

#[pyfunction]
fn eta(t: u64, horizon: usize) -> f64 {
    rates::eta(t, horizon)
}

#[pyfunction]
fn eta_c(t1: u64, t2: u64, horizon: usize) -> PyResult<f64> {
    rates::eta_c(t1, t2, horizon).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (t, horizon, c = 2.0, iota = 1.0))]
fn hoeffding_bonus(t: u64, horizon: usize, c: f64, iota: f64) -> PyResult<f64> {
    let p = RateParams::new(horizon, c, iota).map_err(to_py)?;
    Ok(rates::hoeffding_bonus(t, &p))
}

#[pyfunction]
fn trigger_threshold(visits: u64, agents: usize, horizon: usize) -> u64 {
    runtime::trigger_threshold(visits, agents, horizon)
}

#[pymodule]
fn fedq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FedqError", m.py().get_type::<FedqError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMdp>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(solve_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_policy, m)?)?;
    m.add_function(wrap_pyfunction!(run_fedq, m)?)?;
    m.add_function(wrap_pyfunction!(run_ucb_hoeffding, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(fit_comm_slope, m)?)?;
    m.add_function(wrap_pyfunction!(regret_log_plateau, m)?)?;
    m.add_function(wrap_pyfunction!(eta, m)?)?;
    m.add_function(wrap_pyfunction!(eta_c, m)?)?;
    m.add_function(wrap_pyfunction!(hoeffding_bonus, m)?)?;
    m.add_function(wrap_pyfunction!(trigger_threshold, m)?)?;
    Ok(())
}
