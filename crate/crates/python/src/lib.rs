//! Python bindings: environments, configs, the trainer, the exact oracle
//! and the scalar loss helpers.
//!
//! Structured records (metrics, summaries, check results) cross the
//! boundary as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use vpd_core::trainer::{em_monotonicity_run, Method, MonotonicityConfig, TrainConfig as CoreConfig, Trainer as CoreTrainer};
use vpd_core::{baselines, checks, env, estep, oracle, report, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::EnumerationCap { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(module = "vpd", from_py_object)]
#[derive(Clone)]
struct EnvSpec(env::EnvSpec);

#[pymethods]
impl EnvSpec {
    #[staticmethod]
    fn keyed_copy(vocab_size: u32, length: usize, transform_key: u64) -> PyResult<Self> {
        env::EnvSpec::keyed_copy(vocab_size, length, transform_key).map(Self).map_err(err)
    }

    #[staticmethod]
    fn mod_sum(vocab_size: u32, prompt_len: usize) -> PyResult<Self> {
        env::EnvSpec::mod_sum(vocab_size, prompt_len).map(Self).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.0.vocab_size
    }

    #[getter]
    fn prompt_len(&self) -> usize {
        self.0.prompt_len
    }

    #[getter]
    fn response_len(&self) -> usize {
        self.0.response_len
    }

    fn target(&self, prompt: Vec<u32>) -> Vec<u32> {
        self.0.target(&prompt)
    }

    fn reward(&self, prompt: Vec<u32>, response: Vec<u32>) -> f64 {
        self.0.reward(&prompt, &response)
    }

    fn all_prompts(&self) -> Vec<Vec<u32>> {
        self.0.all_prompts()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(module = "vpd", from_py_object)]
#[derive(Clone)]
struct TrainConfig(CoreConfig);

#[pymethods]
impl TrainConfig {
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        CoreConfig::from_toml_with_overrides(text, &overrides).map(Self).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.0.method.as_str()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn total_batches(&self) -> usize {
        self.0.total_batches
    }

    #[getter]
    fn env(&self) -> EnvSpec {
        EnvSpec(self.0.env.clone())
    }
}

#[pyclass(module = "vpd")]
struct Trainer(CoreTrainer);

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &TrainConfig) -> PyResult<Self> {
        CoreTrainer::new(config.0.clone()).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load_checkpoint(dir: PathBuf) -> PyResult<Self> {
        CoreTrainer::load_checkpoint(&dir).map(Self).map_err(err)
    }

    fn save_checkpoint(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save_checkpoint(&dir).map_err(err)
    }

    /// One rollout batch; returns `{"metrics": ..., "estep": ...}`.
    fn run_batch(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = self.0.run_batch().map_err(err)?;
        to_py(py, &out)
    }

    /// Batch records for every remaining batch.
    fn run_all(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = self.0.run_all().map_err(err)?;
        let metrics: Vec<_> = out.into_iter().map(|b| b.metrics).collect();
        to_py(py, &metrics)
    }

    fn evaluate(&self) -> PyResult<f64> {
        self.0.evaluate_now().map_err(err)
    }

    #[getter]
    fn batches_done(&self) -> usize {
        self.0.batches_done()
    }

    #[getter]
    fn is_finished(&self) -> bool {
        self.0.is_finished()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.estep_state().delta
    }

    fn counters(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.0.counters())
    }
}

#[pyclass(module = "vpd", from_py_object)]
#[derive(Clone)]
struct DistTable(oracle::DistTable);

#[pymethods]
impl DistTable {
    #[new]
    fn new(alphabet: u32, length: usize, probs: Vec<f64>) -> PyResult<Self> {
        oracle::DistTable::new(alphabet, length, probs).map(Self).map_err(err)
    }

    #[staticmethod]
    fn uniform(alphabet: u32, length: usize) -> Self {
        Self(oracle::DistTable::uniform(alphabet, length))
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.0.probs().to_vec()
    }

    fn sequence(&self, index: usize) -> Vec<u32> {
        self.0.sequence(index)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
fn reward_vector(env: &EnvSpec, prompt: Vec<u32>, shape: &DistTable) -> Vec<f64> {
    oracle::reward_vector(&env.0, &prompt, &shape.0)
}

#[pyfunction]
fn log_partition(prior: &DistTable, rewards: Vec<f64>, beta: f64) -> PyResult<f64> {
    oracle::log_partition(&prior.0, &rewards, beta).map_err(err)
}

/// `(pi*, log Z)` for the reward-tilted prior.
#[pyfunction]
fn tilt(prior: &DistTable, rewards: Vec<f64>, beta: f64) -> PyResult<(DistTable, f64)> {
    oracle::tilt(&prior.0, &rewards, beta).map(|(d, z)| (DistTable(d), z)).map_err(err)
}

#[pyfunction]
fn exact_kl(p: &DistTable, q: &DistTable) -> PyResult<f64> {
    oracle::exact_kl(&p.0, &q.0).map_err(err)
}

#[pyfunction]
fn objective(policy: &DistTable, reference: &DistTable, rewards: Vec<f64>, beta: f64) -> PyResult<f64> {
    oracle::objective(&policy.0, &reference.0, &rewards, beta).map_err(err)
}

#[pyfunction]
fn elbo(q: &DistTable, reference: &DistTable, rewards: Vec<f64>, beta: f64) -> PyResult<f64> {
    oracle::elbo_with(&q.0, &reference.0, &rewards, beta).map_err(err)
}

#[pyfunction]
fn grpo_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    baselines::grpo_advantages(&rewards).map_err(err)
}

#[pyfunction]
fn reshape_advantage(a_grpo: f64, a_sdpo: f64, omega_rl: f64, omega_opd: f64) -> f64 {
    baselines::reshape_advantage(a_grpo, a_sdpo, omega_rl, omega_opd)
}

#[pyfunction]
fn reweight_advantage(a_grpo: f64, delta_t: f64, alpha: f64, eps_w: f64) -> f64 {
    baselines::reweight_advantage(a_grpo, delta_t, alpha, eps_w)
}

#[pyfunction]
fn dpo_pair_loss(r_pos: f64, r_neg: f64) -> f64 {
    estep::dpo_pair_loss(r_pos, r_neg)
}

#[pyfunction]
fn decoupled_bound(r_pos: f64, r_neg: f64) -> f64 {
    estep::decoupled_bound(r_pos, r_neg)
}

/// The full oracle-check suite for `config`'s environment and beta.
#[pyfunction]
#[pyo3(signature = (config, trials = 100, gradient_instances = 50))]
fn oracle_check(py: Python<'_>, config: &TrainConfig, trials: usize, gradient_instances: usize) -> PyResult<Py<PyAny>> {
    let mut suite = checks::SuiteConfig::new(config.0.env.clone(), config.0.beta, config.0.seed);
    suite.trials = trials;
    suite.gradient_instances = gradient_instances;
    let records = py.detach(|| checks::run_suite(&suite)).map_err(err)?;
    to_py(py, &records)
}

#[pyfunction]
#[pyo3(signature = (env, beta = 0.1, cycles = 20))]
fn em_monotonicity(py: Python<'_>, env: &EnvSpec, beta: f64, cycles: usize) -> PyResult<Py<PyAny>> {
    let cfg = MonotonicityConfig {
        beta,
        cycles,
        ..MonotonicityConfig::default()
    };
    let rep = py.detach(|| em_monotonicity_run(&env.0, &cfg)).map_err(err)?;
    to_py(py, &rep)
}

/// Train to completion and write a run directory; returns the summary.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &TrainConfig, out: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = config.0.clone();
    let s = py.detach(|| report::run_experiment(cfg, &out)).map_err(err)?;
    to_py(py, &s)
}

#[pyfunction]
fn compare(py: Python<'_>, config: &TrainConfig, methods: Vec<String>, seeds: Vec<u64>, out: PathBuf) -> PyResult<Py<PyAny>> {
    let methods = methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<vpd_core::Result<Vec<_>>>()
        .map_err(err)?;
    let cfg = config.0.clone();
    let c = py.detach(|| report::compare(&cfg, &methods, &seeds, &out)).map_err(err)?;
    to_py(py, &c)
}

#[pymodule]
fn vpd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EnvSpec>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<DistTable>()?;
    m.add_function(wrap_pyfunction!(reward_vector, m)?)?;
    m.add_function(wrap_pyfunction!(log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(tilt, m)?)?;
    m.add_function(wrap_pyfunction!(exact_kl, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(elbo, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(reshape_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(reweight_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(decoupled_bound, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(em_monotonicity, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
