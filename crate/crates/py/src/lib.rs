//! Python module `valuedist`: MDPs, posteriors, the sampling oracle, EQR, the
//! projected distributional operator and the experiment runner.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use valuedist::bellman::{self, ModelEnsemble};
use valuedist::envs::{self, ToyFamily, ToyMdpSpec};
use valuedist::eqr::{self, EqrConfig, StepSchedule};
use valuedist::experiment::{self, ExperimentConfig};
use valuedist::mdp::{self, Policy, TabularMdp};
use valuedist::oracle::{self, ValueSampleSet};
use valuedist::posterior::{BeliefMdp, DirichletPosterior, MdpPosterior, PointMass, RewardPosterior};
use valuedist::quantdist::{self, AtomDistribution, QuantileValueFunction};
use valuedist::Error;

fn to_py(err: Error) -> PyErr {
    match err.exit_code() {
        2 => PyValueError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(q: &QuantileValueFunction) -> Vec<Vec<f64>> {
    (0..q.num_states()).map(|s| q.state(s).to_vec()).collect()
}

fn family(name: &str) -> PyResult<ToyFamily> {
    parse(&format!("{name:?}"))
}

/// A validated finite MDP with a single absorbing terminal state.
#[pyclass(name = "TabularMdp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMdp {
    inner: TabularMdp,
}

#[pymethods]
impl PyMdp {
    /// `transition[s][a][s']`, `reward[s][a]`.
    #[new]
    fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        terminal_state: usize,
        discount: f64,
    ) -> PyResult<Self> {
        let doc = mdp::MdpDocument {
            num_states: transition.len(),
            num_actions: reward.first().map_or(0, Vec::len),
            terminal_state,
            discount,
            transition,
            reward,
        };
        Ok(PyMdp {
            inner: TabularMdp::try_from(doc).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyMdp { inner: parse(text)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
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
    fn terminal_state(&self) -> usize {
        self.inner.terminal_state()
    }

    #[getter]
    fn discount(&self) -> f64 {
        self.inner.discount()
    }

    fn is_acyclic(&self) -> bool {
        self.inner.is_acyclic()
    }

    fn p(&self, state: usize, action: usize, next: usize) -> f64 {
        self.inner.p(state, action, next)
    }

    fn reward(&self, state: usize, action: usize) -> f64 {
        self.inner.reward(state, action)
    }

    /// Time-indexed acyclic copy truncated after `horizon` steps; state
    /// `(s, k)` sits at index `s + k * num_states`.
    fn unroll(&self, horizon: usize) -> PyResult<PyMdp> {
        Ok(PyMdp {
            inner: mdp::unroll(&self.inner, horizon).map_err(to_py)?.mdp,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularMdp(num_states={}, num_actions={}, terminal_state={}, discount={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.terminal_state(),
            self.inner.discount()
        )
    }
}

/// Stochastic policy `π(a | s)`.
#[pyclass(name = "Policy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: Policy,
}

#[pymethods]
impl PyPolicy {
    #[new]
    fn new(probs: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: Policy::try_from(probs).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn uniform(num_states: usize, num_actions: usize) -> Self {
        PyPolicy {
            inner: Policy::uniform(num_states, num_actions),
        }
    }

    #[staticmethod]
    fn deterministic(actions: Vec<usize>, num_actions: usize) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: Policy::deterministic(&actions, num_actions).map_err(to_py)?,
        })
    }

    fn probs(&self) -> Vec<Vec<f64>> {
        self.inner.clone().into()
    }

    fn greedy_actions(&self) -> Vec<usize> {
        self.inner.greedy_actions()
    }
}

/// A distribution over MDPs sharing the shape of a base MDP.
#[pyclass(name = "Posterior", frozen)]
struct PyPosterior {
    inner: Arc<dyn MdpPosterior>,
    label: String,
}

#[pymethods]
impl PyPosterior {
    /// Always returns the base MDP.
    #[staticmethod]
    fn point_mass() -> Self {
        PyPosterior {
            inner: Arc::new(PointMass),
            label: "point_mass".into(),
        }
    }

    /// Independent Dirichlet rows with `alpha0` on the base MDP's nonzero
    /// entries (or every entry when `full`), conditioned on `counts[s][a][s']`.
    #[staticmethod]
    #[pyo3(signature = (base, alpha0, full = false, counts = None))]
    fn dirichlet(base: &PyMdp, alpha0: f64, full: bool, counts: Option<Vec<Vec<Vec<u64>>>>) -> PyResult<Self> {
        let mdp = &base.inner;
        let prior = if full {
            DirichletPosterior::full(mdp.num_states(), mdp.num_actions(), alpha0)
        } else {
            DirichletPosterior::on_support_of(mdp, alpha0)
        }
        .map_err(to_py)?;
        let transitions = match counts {
            None => prior,
            Some(counts) => {
                let mut data = valuedist::posterior::TransitionDataset::empty(mdp.num_states(), mdp.num_actions());
                for (s, per_action) in counts.iter().enumerate() {
                    for (a, per_next) in per_action.iter().enumerate() {
                        for (next, &c) in per_next.iter().enumerate() {
                            for _ in 0..c {
                                data.record(s, a, mdp.reward(s, a), next);
                            }
                        }
                    }
                }
                prior.update(&data).map_err(to_py)?
            }
        };
        Ok(PyPosterior {
            inner: Arc::new(BeliefMdp {
                transitions,
                rewards: RewardPosterior::known(mdp),
            }),
            label: format!("dirichlet(alpha0={alpha0}, full={full})"),
        })
    }

    /// The toy chain's mixture over its uncertain branch probability.
    #[staticmethod]
    #[pyo3(signature = (beta = 0.0, family = "figure", r2 = 0.0))]
    fn toy(beta: f64, family: &str, r2: f64) -> PyResult<Self> {
        let spec = ToyMdpSpec::default_topology(beta, self::family(family)?, r2);
        spec.validate().map_err(to_py)?;
        Ok(PyPosterior {
            inner: Arc::new(spec.posterior().map_err(to_py)?),
            label: format!("toy(beta={beta}, family={family})"),
        })
    }

    fn sample(&self, base: &PyMdp, seed: u64) -> PyResult<PyMdp> {
        Ok(PyMdp {
            inner: self.inner.sample_mdp(&base.inner, seed).map_err(to_py)?,
        })
    }

    fn mean_mdp(&self, base: &PyMdp) -> PyResult<PyMdp> {
        Ok(PyMdp {
            inner: self.inner.mean_mdp(&base.inner).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Posterior.{}", self.label)
    }
}

/// Exact per-state values of `N` posterior draws.
#[pyclass(name = "ValueSamples", frozen)]
struct PyValueSamples {
    inner: ValueSampleSet,
}

#[pymethods]
impl PyValueSamples {
    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }

    fn samples(&self, state: usize) -> PyResult<Vec<f64>> {
        self.check(state)?;
        Ok(self.inner.samples(state).to_vec())
    }

    fn mean(&self, state: usize) -> PyResult<f64> {
        self.check(state)?;
        Ok(self.inner.mean(state))
    }

    fn std_error(&self, state: usize) -> PyResult<f64> {
        self.check(state)?;
        Ok(self.inner.std_error(state))
    }

    /// `m` quantiles per state at levels `(2i − 1) / 2m`.
    fn quantiles(&self, m: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&oracle::oracle_quantiles(&self.inner, m).map_err(to_py)?))
    }
}

impl PyValueSamples {
    fn check(&self, state: usize) -> PyResult<()> {
        if state < self.inner.num_states() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("state {state} out of range")))
        }
    }
}

#[pyfunction]
#[pyo3(signature = (beta = 0.0, family = "figure", r2 = 0.0, x = 0.5))]
fn toy_mdp(beta: f64, family: &str, r2: f64, x: f64) -> PyResult<PyMdp> {
    let spec = ToyMdpSpec::default_topology(beta, self::family(family)?, r2);
    Ok(PyMdp {
        inner: envs::build_toy_mdp(&spec, x).map_err(to_py)?,
    })
}

/// Gridworld from a JSON spec (`"{}"` for the defaults). Returns the MDP and
/// the start state.
#[pyfunction]
#[pyo3(signature = (spec_json = "{}"))]
fn gridworld(spec_json: &str) -> PyResult<(PyMdp, usize)> {
    let world = envs::build_gridworld(&parse(spec_json)?).map_err(to_py)?;
    Ok((PyMdp { inner: world.mdp }, world.start_state))
}

#[pyfunction]
#[pyo3(signature = (num_layers, states_per_layer, num_actions = 1, reward_range = (0.0, 1.0), discount = 0.9, seed = 0))]
fn random_acyclic_mdp(
    num_layers: usize,
    states_per_layer: usize,
    num_actions: usize,
    reward_range: (f64, f64),
    discount: f64,
    seed: u64,
) -> PyResult<PyMdp> {
    Ok(PyMdp {
        inner: envs::random_acyclic_mdp(num_layers, states_per_layer, num_actions, reward_range, discount, seed)
            .map_err(to_py)?,
    })
}

#[pyfunction]
fn policy_value(mdp: &PyMdp, policy: &PyPolicy) -> PyResult<Vec<f64>> {
    mdp::policy_value(&mdp.inner, &policy.inner).map_err(to_py)
}

/// Optimal deterministic policy and its values.
#[pyfunction]
fn policy_iteration(mdp: &PyMdp) -> PyResult<(PyPolicy, Vec<f64>)> {
    let (policy, values) = valuedist::agent::policy_iteration(&mdp.inner).map_err(to_py)?;
    Ok((PyPolicy { inner: policy }, values))
}

#[pyfunction]
fn sample_values(
    py: Python<'_>,
    posterior: &PyPosterior,
    base: &PyMdp,
    policy: &PyPolicy,
    num_samples: usize,
    seed: u64,
) -> PyResult<PyValueSamples> {
    let inner = py
        .detach(|| oracle::sample_value_distribution(posterior.inner.as_ref(), &base.inner, &policy.inner, num_samples, seed))
        .map_err(to_py)?;
    Ok(PyValueSamples { inner })
}

/// Learned quantiles per state after `max_steps` updates.
#[pyfunction]
#[pyo3(signature = (posterior, base, policy, m = 10, step_size = 0.1, schedule = "inverse_sqrt_t", max_steps = 10_000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_eqr(
    py: Python<'_>,
    posterior: &PyPosterior,
    base: &PyMdp,
    policy: &PyPolicy,
    m: usize,
    step_size: f64,
    schedule: &str,
    max_steps: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let config = EqrConfig {
        m,
        step_size,
        schedule: parse::<StepSchedule>(&format!("{schedule:?}"))?,
        max_steps,
        eval_every: max_steps.max(1),
        seed,
        ..EqrConfig::default()
    };
    let (q, _) = py
        .detach(|| eqr::run_eqr(posterior.inner.as_ref(), &base.inner, &policy.inner, &config, None))
        .map_err(to_py)?;
    Ok(rows(&q))
}

/// Iterates the projected distributional operator over a fixed ensemble of
/// `ensemble_size` posterior draws. Returns the quantiles and the number of
/// iterations; raises if it did not converge.
#[pyfunction]
#[pyo3(signature = (posterior, base, policy, ensemble_size = 32, m = 100, seed = 0, tolerance = 1e-9, max_iterations = 1000))]
#[allow(clippy::too_many_arguments)]
fn projected_fixed_point(
    py: Python<'_>,
    posterior: &PyPosterior,
    base: &PyMdp,
    policy: &PyPolicy,
    ensemble_size: usize,
    m: usize,
    seed: u64,
    tolerance: f64,
    max_iterations: usize,
) -> PyResult<(Vec<Vec<f64>>, usize)> {
    let result = py
        .detach(|| {
            let ensemble = ModelEnsemble::sample(posterior.inner.as_ref(), &base.inner, ensemble_size, seed)?;
            let mu0 = QuantileValueFunction::zeros(base.inner.num_states(), m);
            bellman::iterate_projected(&mu0, &ensemble, &policy.inner, tolerance, max_iterations)
        })
        .map_err(to_py)?;
    if !result.converged {
        return Err(PyRuntimeError::new_err(format!("no convergence in {max_iterations} iterations")));
    }
    Ok((rows(&result.value), result.iterations()))
}

/// Largest observed `w_p(Tμ, Tν) / (γ w_p(μ, ν))` over random input pairs.
#[pyfunction]
#[pyo3(signature = (posterior, base, policy, ensemble_size = 3, p_order = 1.0, trials = 100, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn certify_contraction(
    py: Python<'_>,
    posterior: &PyPosterior,
    base: &PyMdp,
    policy: &PyPolicy,
    ensemble_size: usize,
    p_order: f64,
    trials: usize,
    seed: u64,
) -> PyResult<f64> {
    py.detach(|| {
        let ensemble = ModelEnsemble::sample(posterior.inner.as_ref(), &base.inner, ensemble_size, seed)?;
        bellman::certify_contraction(&ensemble, &policy.inner, p_order, trials, seed).map(|r| r.max_ratio())
    })
    .map_err(to_py)
}

fn atoms(values: Vec<f64>, weights: Option<Vec<f64>>) -> PyResult<AtomDistribution> {
    let weights = weights.unwrap_or_else(|| vec![1.0; values.len()]);
    if weights.len() != values.len() || values.is_empty() {
        return Err(PyValueError::new_err("values and weights must be non-empty and the same length"));
    }
    let total: f64 = weights.iter().sum();
    AtomDistribution::new(values.into_iter().zip(weights).map(|(v, w)| (v, w / total)).collect()).map_err(to_py)
}

/// Exact p-Wasserstein distance between two weighted atom sets.
#[pyfunction]
#[pyo3(signature = (p_order, a, b, a_weights = None, b_weights = None))]
fn wasserstein(
    p_order: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    a_weights: Option<Vec<f64>>,
    b_weights: Option<Vec<f64>>,
) -> PyResult<f64> {
    if !(p_order >= 1.0) {
        return Err(PyValueError::new_err("p_order must be at least 1"));
    }
    Ok(quantdist::wasserstein(p_order, &atoms(a, a_weights)?, &atoms(b, b_weights)?))
}

/// Closest `m`-atom uniform distribution in 1-Wasserstein distance.
#[pyfunction]
#[pyo3(signature = (values, m, weights = None))]
fn project_quantiles(values: Vec<f64>, m: usize, weights: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let projected = quantdist::project_quantiles(&atoms(values, weights)?, m).map_err(to_py)?;
    Ok(projected.atoms().to_vec())
}

#[pyfunction]
fn qr_loss(tau: f64, v: f64, samples: Vec<f64>) -> PyResult<f64> {
    if samples.is_empty() {
        return Err(PyValueError::new_err("samples must be non-empty"));
    }
    Ok(quantdist::qr_loss(tau, v, &samples))
}

#[pyfunction]
fn quantile_huber(tau: f64, kappa: f64, u: f64) -> f64 {
    quantdist::quantile_huber(tau, kappa, u)
}

/// Checks an experiment config given as JSON; raises `ValueError` if invalid.
#[pyfunction]
fn validate_config(config_json: &str) -> PyResult<()> {
    ExperimentConfig::from_json(config_json).map(|_| ()).map_err(to_py)
}

/// Runs an experiment config and returns the summary as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let report = py.detach(|| experiment::run_experiment(&config)).map_err(to_py)?;
    Ok(report.summary.to_string())
}

#[pymodule]
#[pyo3(name = "valuedist")]
fn valuedist_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMdp>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PyValueSamples>()?;
    m.add_function(wrap_pyfunction!(toy_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(gridworld, m)?)?;
    m.add_function(wrap_pyfunction!(random_acyclic_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(policy_value, m)?)?;
    m.add_function(wrap_pyfunction!(policy_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(sample_values, m)?)?;
    m.add_function(wrap_pyfunction!(run_eqr, m)?)?;
    m.add_function(wrap_pyfunction!(projected_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(certify_contraction, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(project_quantiles, m)?)?;
    m.add_function(wrap_pyfunction!(qr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_huber, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
