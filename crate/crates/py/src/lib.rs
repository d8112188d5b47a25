//! Python bindings for `clarify-core`, importable as `clarify`.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clarify_core::datagen::{attach_standardized, generate_dataset, DatagenConfig};
use clarify_core::dataset::{self, Dataset as CoreDataset};
use clarify_core::env::EnvSpec;
use clarify_core::evalreport::{evaluate as core_evaluate, EvalConfig};
use clarify_core::objectives::{self, BoundReport, ExactSupport};
use clarify_core::policy::PolicyParams;
use clarify_core::reward::{JudgeWeights, RewardSpec};
use clarify_core::trainers::{
    train_dpo, train_refit, train_step_dpo, train_swift, train_threshold_sft, Algorithm,
    Counterfactual, TrainConfig,
};
use clarify_core::types::{HistoryState, TaskInstance};

create_exception!(clarify, ClarifyError, PyException);

fn err(e: clarify_core::Error) -> PyErr {
    use clarify_core::Error as E;
    match e {
        E::Io { .. } => PyOSError::new_err(e.to_string()),
        E::InvalidArgument(_) | E::Config(_) | E::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => ClarifyError::new_err(e.to_string()),
    }
}

type R<T> = PyResult<T>;

#[pyclass(name = "Env", module = "clarify", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Env(EnvSpec);

#[pymethods]
impl Env {
    #[staticmethod]
    #[pyo3(signature = (contexts, intents, clarifiers, values, horizon, user_noise = 0.0))]
    fn hidden_intent(
        contexts: usize,
        intents: usize,
        clarifiers: usize,
        values: usize,
        horizon: usize,
        user_noise: f64,
    ) -> R<Self> {
        let spec = EnvSpec::hidden_intent(contexts, intents, clarifiers, values, horizon).map_err(err)?;
        Ok(Self(spec.with_noise(user_noise).map_err(err)?))
    }

    #[staticmethod]
    fn scripted_exam(contexts: usize, choices: usize) -> R<Self> {
        Ok(Self(EnvSpec::scripted_exam(contexts, choices).map_err(err)?))
    }

    #[getter]
    fn action_count(&self) -> usize {
        self.0.action_count()
    }

    #[getter]
    fn observation_count(&self) -> usize {
        self.0.observation_count()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }

    /// One task per (context, intent) pair.
    fn all_tasks(&self) -> Vec<Task> {
        self.0.all_tasks().into_iter().map(Task).collect()
    }

    /// `n` tasks drawn uniformly with a seeded generator.
    fn make_tasks(&self, n: usize, seed: u64) -> R<Vec<Task>> {
        let ts = self
            .0
            .make_hidden_intent_tasks(n, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(err)?;
        Ok(ts.into_iter().map(Task).collect())
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "Task", module = "clarify", frozen, from_py_object)]
#[derive(Clone)]
struct Task(TaskInstance);

#[pymethods]
impl Task {
    #[getter]
    fn task_id(&self) -> String {
        self.0.task_id.clone()
    }
    #[getter]
    fn context_id(&self) -> usize {
        self.0.context_id
    }
    #[getter]
    fn hidden_intent(&self) -> usize {
        self.0.hidden_intent
    }
    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }
    fn __repr__(&self) -> String {
        format!(
            "Task({:?}, context={}, intent={})",
            self.0.task_id, self.0.context_id, self.0.hidden_intent
        )
    }
}

fn tasks_of(tasks: &[Task]) -> Vec<TaskInstance> {
    tasks.iter().map(|t| t.0.clone()).collect()
}

#[pyclass(name = "Reward", module = "clarify", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Reward(RewardSpec);

#[pymethods]
impl Reward {
    #[staticmethod]
    fn exact_match() -> Self {
        Self(RewardSpec::exact_match())
    }

    #[staticmethod]
    #[pyo3(signature = (accuracy = 1.0, style = 0.0, brevity = 0.0))]
    fn judge(accuracy: f64, style: f64, brevity: f64) -> R<Self> {
        let w = JudgeWeights {
            accuracy,
            style,
            brevity,
        };
        Ok(Self(RewardSpec::judge(w).map_err(err)?))
    }
}

#[pyclass(name = "Policy", module = "clarify", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Policy(PolicyParams);

#[pymethods]
impl Policy {
    #[staticmethod]
    fn uniform_tabular(env: &Env) -> R<Self> {
        Ok(Self(PolicyParams::uniform_tabular(&env.0).map_err(err)?))
    }

    #[staticmethod]
    fn zeros_linear(env: &Env) -> R<Self> {
        Ok(Self(PolicyParams::zeros_linear(&env.0).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: &str) -> R<Self> {
        Ok(Self(PolicyParams::load(path).map_err(err)?.0))
    }

    fn save(&self, path: &str) -> R<()> {
        self.0.save(path, None).map_err(err)
    }

    /// A copy with i.i.d. normal noise of standard deviation `scale` added.
    fn randomized(&self, scale: f64, seed: u64) -> Self {
        Self(self.0.randomized(scale, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.0.family_name()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn with_values(&self, values: Vec<f64>) -> R<Self> {
        Ok(Self(self.0.with_values(values).map_err(err)?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Action log-probabilities after the `(action, observation)` pairs in
    /// `prefix`.
    #[pyo3(signature = (context_id, prefix = Vec::new()))]
    fn log_probs(&self, context_id: usize, prefix: Vec<(usize, usize)>) -> R<Vec<f64>> {
        let h = HistoryState { context_id, prefix };
        self.0.log_probs(&h).map_err(err)
    }

    #[pyo3(signature = (context_id, action, prefix = Vec::new()))]
    fn grad_action_logprob(&self, context_id: usize, action: usize, prefix: Vec<(usize, usize)>) -> R<Vec<f64>> {
        let h = HistoryState { context_id, prefix };
        self.0.grad_action_logprob(&h, action).map_err(err)
    }
}

#[pyclass(name = "Dataset", module = "clarify", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset(CoreDataset);

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn read(path: &str) -> R<Self> {
        Ok(Self(dataset::read_dataset(path).map_err(err)?))
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> R<Self> {
        Ok(Self(dataset::from_jsonl(text).map_err(err)?))
    }

    fn write(&self, path: &str) -> R<()> {
        dataset::write_dataset(&self.0, path).map_err(err)
    }

    fn to_jsonl(&self) -> R<String> {
        dataset::to_jsonl(&self.0).map_err(err)
    }

    /// A copy with per-group standardized rewards attached.
    fn standardized(&self) -> R<Self> {
        Ok(Self(attach_standardized(&self.0).map_err(err)?))
    }

    #[getter]
    fn is_standardized(&self) -> bool {
        self.0.is_standardized()
    }

    #[getter]
    fn group_count(&self) -> usize {
        self.0.group_count()
    }

    #[getter]
    fn rewards(&self) -> Vec<f64> {
        self.0.examples().iter().map(|e| e.reward_raw).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "ExactSupport", module = "clarify", frozen)]
struct Support(ExactSupport);

#[pymethods]
impl Support {
    /// Every trajectory of `tasks` (default: all tasks) with its reward.
    #[new]
    #[pyo3(signature = (env, reward, tasks = None))]
    fn new(env: &Env, reward: &Reward, tasks: Option<Vec<Task>>) -> R<Self> {
        let tasks = tasks.map(|t| tasks_of(&t)).unwrap_or_else(|| env.0.all_tasks());
        Ok(Self(ExactSupport::new(&env.0, &reward.0, &tasks).map_err(err)?))
    }

    /// The same support with rewards standardized by the exact per-task
    /// statistics under `theta0`.
    fn standardized_under(&self, theta0: &Policy) -> R<Self> {
        Ok(Self(self.0.standardized_under(&theta0.0).map_err(err)?))
    }

    #[getter]
    fn leaf_count(&self) -> usize {
        self.0.leaf_count()
    }

    #[getter]
    fn reward_bound(&self) -> f64 {
        self.0.reward_bound()
    }
}

#[pyfunction]
#[pyo3(signature = (theta0, env, reward, tasks, m, seed, temperatures = None))]
fn generate(
    theta0: &Policy,
    env: &Env,
    reward: &Reward,
    tasks: Vec<Task>,
    m: usize,
    seed: u64,
    temperatures: Option<Vec<f64>>,
) -> R<Dataset> {
    let mut cfg = DatagenConfig {
        m,
        master_seed: seed,
        ..DatagenConfig::default()
    };
    if let Some(t) = temperatures {
        cfg.temperatures = t;
    }
    let d = generate_dataset(&theta0.0, &env.0, &reward.0, &tasks_of(&tasks), &cfg).map_err(err)?;
    Ok(Dataset(d))
}

#[pyfunction]
fn exact_value(theta: &Policy, support: &Support) -> R<f64> {
    objectives::exact_value(&theta.0, &support.0).map_err(err)
}

#[pyfunction]
fn exact_ips_value(theta: &Policy, theta0: &Policy, support: &Support) -> R<f64> {
    objectives::exact_ips_value(&theta.0, &theta0.0, &support.0).map_err(err)
}

/// `(estimate, standard error)` of the value of `theta` from logged data.
#[pyfunction]
#[pyo3(signature = (dataset, theta, clip = None))]
fn ips_value(dataset: &Dataset, theta: &Policy, clip: Option<f64>) -> R<(f64, f64)> {
    objectives::ips_value(&dataset.0, &theta.0, clip).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (theta, dataset, standardized = false))]
fn gradient_variance(theta: &Policy, dataset: &Dataset, standardized: bool) -> R<f64> {
    objectives::gradient_variance(&theta.0, &dataset.0, standardized).map_err(err)
}

fn report_dict<'py>(py: Python<'py>, r: &BoundReport) -> R<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("v_online", r.v_online)?;
    d.set_item("j_offline_full", r.j_offline_full)?;
    d.set_item("c1", r.c1)?;
    d.set_item("c2", r.c2)?;
    d.set_item("b", r.b)?;
    d.set_item("gap", r.gap)?;
    d.set_item("satisfied", r.satisfied)?;
    Ok(d)
}

#[pyfunction]
fn verify_lower_bound<'py>(py: Python<'py>, theta: &Policy, theta0: &Policy, support: &Support) -> R<Bound<'py, PyDict>> {
    let r = objectives::verify_lower_bound(&theta.0, &theta0.0, &support.0).map_err(err)?;
    report_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (theta, theta0, support, b = None))]
fn verify_two_sided_bound<'py>(
    py: Python<'py>,
    theta: &Policy,
    theta0: &Policy,
    support: &Support,
    b: Option<f64>,
) -> R<Bound<'py, PyDict>> {
    let r = objectives::verify_two_sided_bound(&theta.0, &theta0.0, &support.0, b).map_err(err)?;
    report_dict(py, &r)
}

/// Trains `algo` from `theta0` and returns `(policy, objective_trace,
/// value_trace)`; `value_trace` is `None` without a support.
#[pyfunction]
#[pyo3(signature = (algo, theta0, dataset, env, reward, epochs = 4, lr = 0.3, seed = 0, dpo_beta = 1.0, support = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    algo: &str,
    theta0: &Policy,
    dataset: &Dataset,
    env: &Env,
    reward: &Reward,
    epochs: usize,
    lr: f64,
    seed: u64,
    dpo_beta: f64,
    support: Option<&Support>,
) -> R<(Policy, Vec<f64>, Option<Vec<f64>>)> {
    let algo: Algorithm = algo.parse().map_err(err)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        shuffle_seed: seed,
        dpo_beta,
        ..TrainConfig::default()
    }
    .for_algorithm(algo);
    let (t0, d, s) = (&theta0.0, &dataset.0, support.map(|s| &s.0));
    let result = match algo {
        Algorithm::Refit => train_refit(t0, d, &cfg, s),
        Algorithm::Swift => train_swift(t0, d, &cfg, s),
        Algorithm::ThresholdSft => train_threshold_sft(t0, d, &cfg, s),
        Algorithm::Dpo => train_dpo(t0, t0, d, &cfg, s),
        Algorithm::StepDpo => {
            let cf = Counterfactual {
                theta0: t0,
                env: &env.0,
                reward: &reward.0,
                seed,
            };
            train_step_dpo(t0, t0, d, &cf, &cfg, s)
        }
    }
    .map_err(err)?;
    Ok((Policy(result.theta), result.objective_trace, result.value_trace))
}

#[pyfunction]
#[pyo3(signature = (theta, env, reward, tasks, episodes_per_task = 100, seed = 0, greedy = false))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    theta: &Policy,
    env: &Env,
    reward: &Reward,
    tasks: Vec<Task>,
    episodes_per_task: usize,
    seed: u64,
    greedy: bool,
) -> R<Bound<'py, PyDict>> {
    let cfg = EvalConfig {
        episodes_per_task,
        seed,
        greedy,
    };
    let m = core_evaluate(&theta.0, &env.0, &reward.0, &tasks_of(&tasks), &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("accuracy_se", m.accuracy_se)?;
    d.set_item("mean_reward", m.mean_reward)?;
    d.set_item("mean_reward_se", m.mean_reward_se)?;
    d.set_item("mean_len", m.mean_len)?;
    d.set_item("episodes", m.episodes)?;
    Ok(d)
}

/// Runs the command line with `args` (without the program name) and returns
/// its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    clarify_core::cli::run(std::iter::once("clarify".to_string()).chain(args))
}

#[pymodule]
fn clarify(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClarifyError", m.py().get_type::<ClarifyError>())?;
    m.add_class::<Env>()?;
    m.add_class::<Task>()?;
    m.add_class::<Reward>()?;
    m.add_class::<Policy>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Support>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(exact_value, m)?)?;
    m.add_function(wrap_pyfunction!(exact_ips_value, m)?)?;
    m.add_function(wrap_pyfunction!(ips_value, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_variance, m)?)?;
    m.add_function(wrap_pyfunction!(verify_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(verify_two_sided_bound, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
