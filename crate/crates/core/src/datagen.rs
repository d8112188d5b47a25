//! Logged-dataset generation under the behavior policy and per-group reward
//! standardization.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::reward::{standardize_group, RewardSpec, StandardizationStats};
use crate::seed::{derive_seed, rng_from_seed};
use crate::types::{HistoryState, LoggedExample, Step, TaskInstance, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    /// Rollouts per task.
    pub m: usize,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    /// Log the propensity of the tempered distribution actually sampled
    /// rather than that of the untempered behavior policy.
    #[serde(default = "yes")]
    pub record_tempered_propensity: bool,
}

fn default_temperatures() -> Vec<f64> {
    vec![0.7, 1.0, 1.3]
}

fn yes() -> bool {
    true
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            m: 3,
            temperatures: default_temperatures(),
            master_seed: 0,
            record_tempered_propensity: true,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("datagen.m must be >= 1".into()));
        }
        if self.temperatures.is_empty() {
            return Err(Error::Config("datagen.temperatures must be non-empty".into()));
        }
        if let Some(t) = self
            .temperatures
            .iter()
            .find(|t| !(t.is_finite() && **t > 0.0))
        {
            return Err(Error::Config(format!("temperatures must be finite and > 0, got {t}")));
        }
        Ok(())
    }
}

/// Extends `steps` by sampling from `policy` at `temperature` until the
/// episode ends.
pub(crate) fn continue_rollout<R: rand::Rng + ?Sized>(
    policy: &PolicyParams,
    env: &EnvSpec,
    task: &TaskInstance,
    mut steps: Vec<Step>,
    temperature: f64,
    record_tempered: bool,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut history = HistoryState::initial(task.context_id);
    for s in &steps {
        history.push(s.action, s.observation);
    }
    while history.is_empty() || !env.is_terminal(task, &history) {
        let (a, tempered_lp) = policy.sample_action(&history, temperature, rng)?;
        let lp_a = if record_tempered || temperature == 1.0 {
            tempered_lp
        } else {
            policy.action_logprob(&history, a)?
        };
        let (y, lp_y) = env.user_response(task, &history, a, rng)?;
        steps.push(Step {
            action: a,
            behavior_action_logprob: lp_a,
            observation: y,
            observation_logprob: lp_y,
        });
        history.push(a, y);
    }
    Ok(Trajectory {
        terminated_early: steps.len() < task.horizon,
        steps,
    })
}

/// Samples one conversation from `theta0` and scores it. The example is
/// grouped under the task id; its `seed` field is left at 0 for the caller.
pub fn rollout<R: rand::Rng + ?Sized>(
    theta0: &PolicyParams,
    env: &EnvSpec,
    reward: &RewardSpec,
    task: &TaskInstance,
    temperature: f64,
    record_tempered: bool,
    rng: &mut R,
) -> Result<LoggedExample> {
    theta0.check_env(env)?;
    env.check_task(task)?;
    let trajectory = continue_rollout(theta0, env, task, Vec::new(), temperature, record_tempered, rng)?;
    let reward_raw = reward.reward(env, task, &trajectory)?;
    Ok(LoggedExample {
        task: task.clone(),
        trajectory,
        reward_raw,
        reward_std: None,
        group_id: task.task_id.clone(),
        temperature,
        seed: 0,
    })
}

/// Seed of rollout `i` of `task_id`; each rollout owns its stream, so the
/// dataset does not depend on scheduling.
pub fn rollout_seed(master_seed: u64, task_id: &str, i: usize) -> u64 {
    derive_seed(master_seed, &format!("datagen/{task_id}/{i}"))
}

/// `m` rollouts per task, grouped by task id, in task order.
pub fn generate_dataset(
    theta0: &PolicyParams,
    env: &EnvSpec,
    reward: &RewardSpec,
    tasks: &[TaskInstance],
    cfg: &DatagenConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    reward.validate()?;
    theta0.check_env(env)?;
    if tasks.is_empty() {
        return Err(Error::invalid("task list is empty"));
    }
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(Error::invalid(format!("duplicate task id {}", t.task_id)));
        }
    }
    let per_task: Vec<Result<Vec<LoggedExample>>> = tasks
        .par_iter()
        .map(|task| {
            (0..cfg.m)
                .map(|i| {
                    let seed = rollout_seed(cfg.master_seed, &task.task_id, i);
                    let mut rng = rng_from_seed(seed);
                    let temperature = cfg.temperatures[i % cfg.temperatures.len()];
                    let mut ex = rollout(
                        theta0,
                        env,
                        reward,
                        task,
                        temperature,
                        cfg.record_tempered_propensity,
                        &mut rng,
                    )?;
                    ex.seed = seed;
                    Ok(ex)
                })
                .collect()
        })
        .collect();
    let mut examples = Vec::with_capacity(tasks.len() * cfg.m);
    for r in per_task {
        examples.extend(r?);
    }
    Dataset::new(examples)
}

/// Per-group `(μ̂, σ̂, m)` of the raw rewards.
pub fn group_stats(dataset: &Dataset) -> Result<BTreeMap<String, StandardizationStats>> {
    let mut out = BTreeMap::new();
    for (group, idx) in dataset.group_indices() {
        let rewards: Vec<f64> = idx.iter().map(|&i| dataset.examples()[i].reward_raw).collect();
        let (stats, _) = standardize_group(&rewards)
            .map_err(|e| Error::Standardization(format!("group {group}: {e}")))?;
        out.insert(group.clone(), stats);
    }
    Ok(out)
}

/// Fills `reward_std` group by group; `reward_raw` is untouched.
pub fn attach_standardized(dataset: &Dataset) -> Result<Dataset> {
    let stats = group_stats(dataset)?;
    dataset.map_examples(|ex| {
        let mut ex = ex.clone();
        ex.reward_std = Some(stats[&ex.group_id].apply(ex.reward_raw));
        ex
    })
}
