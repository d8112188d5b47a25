//! Simulated users.
//!
//! Two task families share one categorical interface:
//!
//! * **Hidden-intent QA.** There are `G` intents, each described by `K`
//!   attributes taking `V` values. The agent has `K` clarifying actions
//!   (`ask_attribute_j`) and `G` answer actions (`answer_k`), so
//!   `A = K + G`. Asking about attribute `j` returns the hidden intent's value
//!   truthfully with probability `1 - ε` and a uniformly chosen wrong value
//!   otherwise. Answering returns an acknowledgment observation (id `V`).
//! * **Scripted exam QA.** A fixed three-line user script: "solve", "think
//!   deeper", "final answer". Actions are answer choice × response style
//!   (plain or reasoned); the observation at step `t` is script line `t`
//!   regardless of the action.
//!
//! Observation probabilities never depend on the policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::types::{ActionId, HistoryState, ObservationId, Step, TaskInstance, Trajectory};

/// Upper bound on the number of leaves [`EnvSpec::enumerate_trajectories`]
/// will expand.
pub const MAX_ENUMERATED_LEAVES: u128 = 1_000_000;

pub const SCRIPT_LINES: [&str; 3] = ["solve", "think deeper", "final answer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvKind {
    HiddenIntentQa { clarifiers: usize, values: usize },
    ScriptedExamQa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    /// Task family, a nested table in config files.
    pub family: EnvKind,
    pub contexts: usize,
    /// `G`: number of hidden intents (answer choices).
    pub intents: usize,
    pub horizon: usize,
    /// Answer actions end the episode.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default)]
    pub user_noise: f64,
}

/// What an action means to the simulated user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Clarify { attribute: usize },
    Answer { intent: usize },
    Respond { choice: usize, reasoned: bool },
}

impl ActionKind {
    pub fn answer(self) -> Option<usize> {
        match self {
            ActionKind::Clarify { .. } => None,
            ActionKind::Answer { intent } => Some(intent),
            ActionKind::Respond { choice, .. } => Some(choice),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedTrajectory {
    /// Behavior log-probabilities are those of the policy passed to the
    /// enumerator (uniform when none was given).
    pub trajectory: Trajectory,
    pub obs_prob_product: f64,
    /// Full log π(τ | x) under that policy, observations included.
    pub log_prob: f64,
}

impl EnvSpec {
    /// The reference hidden-intent instance family.
    pub fn hidden_intent(
        contexts: usize,
        intents: usize,
        clarifiers: usize,
        values: usize,
        horizon: usize,
    ) -> Result<Self> {
        let spec = Self {
            family: EnvKind::HiddenIntentQa { clarifiers, values },
            contexts,
            intents,
            horizon,
            adaptive: false,
            user_noise: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn scripted_exam(contexts: usize, choices: usize) -> Result<Self> {
        let spec = Self {
            family: EnvKind::ScriptedExamQa,
            contexts,
            intents: choices,
            horizon: SCRIPT_LINES.len(),
            adaptive: false,
            user_noise: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_adaptive(mut self, adaptive: bool) -> Result<Self> {
        self.adaptive = adaptive;
        self.validate()?;
        Ok(self)
    }

    pub fn with_noise(mut self, user_noise: f64) -> Result<Self> {
        self.user_noise = user_noise;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.contexts == 0 || self.intents == 0 {
            return bad("contexts and intents must be >= 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.user_noise) {
            return bad(format!("user_noise must lie in [0, 1), got {}", self.user_noise));
        }
        match self.family {
            EnvKind::HiddenIntentQa { values: 0, .. } => {
                bad("values must be >= 1".into())
            }
            EnvKind::ScriptedExamQa if self.adaptive => {
                bad("the scripted exam protocol has a fixed length and cannot be adaptive".into())
            }
            EnvKind::ScriptedExamQa if self.horizon > SCRIPT_LINES.len() => bad(format!(
                "the scripted exam protocol has {} steps, horizon {} requested",
                SCRIPT_LINES.len(),
                self.horizon
            )),
            _ => Ok(()),
        }
    }

    /// `A`.
    pub fn action_count(&self) -> usize {
        match self.family {
            EnvKind::HiddenIntentQa { clarifiers, .. } => clarifiers + self.intents,
            EnvKind::ScriptedExamQa => 2 * self.intents,
        }
    }

    /// `O`.
    pub fn observation_count(&self) -> usize {
        match self.family {
            EnvKind::HiddenIntentQa { values, .. } => values + 1,
            EnvKind::ScriptedExamQa => SCRIPT_LINES.len(),
        }
    }

    pub fn action_kind(&self, action: ActionId) -> Result<ActionKind> {
        if action >= self.action_count() {
            return Err(Error::invalid(format!(
                "action {action} out of range (A = {})",
                self.action_count()
            )));
        }
        Ok(match self.family {
            EnvKind::HiddenIntentQa { clarifiers, .. } if action < clarifiers => {
                ActionKind::Clarify { attribute: action }
            }
            EnvKind::HiddenIntentQa { clarifiers, .. } => ActionKind::Answer {
                intent: action - clarifiers,
            },
            EnvKind::ScriptedExamQa => ActionKind::Respond {
                choice: action / 2,
                reasoned: action % 2 == 1,
            },
        })
    }

    /// Value of attribute `j` for `intent`: the base-`V` digits of the intent
    /// index, so intents are distinguishable whenever `G <= V^K`.
    pub fn attribute_value(&self, intent: usize, attribute: usize) -> usize {
        match self.family {
            EnvKind::HiddenIntentQa { values, .. } => {
                let mut x = intent;
                for _ in 0..attribute {
                    x /= values;
                }
                x % values
            }
            EnvKind::ScriptedExamQa => 0,
        }
    }

    pub fn check_task(&self, task: &TaskInstance) -> Result<()> {
        if task.context_id >= self.contexts {
            return Err(Error::invalid(format!(
                "task {}: context {} out of range ({} contexts)",
                task.task_id, task.context_id, self.contexts
            )));
        }
        if task.hidden_intent >= self.intents {
            return Err(Error::invalid(format!(
                "task {}: hidden intent {} out of range ({} intents)",
                task.task_id, task.hidden_intent, self.intents
            )));
        }
        if task.horizon == 0 {
            return Err(Error::invalid(format!("task {}: horizon must be >= 1", task.task_id)));
        }
        if matches!(self.family, EnvKind::ScriptedExamQa) && task.horizon > SCRIPT_LINES.len() {
            return Err(Error::invalid(format!(
                "task {}: horizon {} exceeds the script length",
                task.task_id, task.horizon
            )));
        }
        Ok(())
    }

    pub fn check_trajectory(&self, task: &TaskInstance, trajectory: &Trajectory) -> Result<()> {
        self.check_task(task)?;
        if trajectory.len() > task.horizon {
            return Err(Error::invalid(format!(
                "task {}: trajectory of length {} exceeds horizon {}",
                task.task_id,
                trajectory.len(),
                task.horizon
            )));
        }
        let (a_max, o_max) = (self.action_count(), self.observation_count());
        for (t, s) in trajectory.steps.iter().enumerate() {
            if s.action >= a_max || s.observation >= o_max {
                return Err(Error::invalid(format!(
                    "task {}: step {t} has action {} / observation {} outside A = {a_max}, O = {o_max}",
                    task.task_id, s.action, s.observation
                )));
            }
        }
        Ok(())
    }

    /// Support of p(y | x, τ_{t-1}, a) as `(observation, logprob)` pairs with
    /// positive probability, in increasing observation order.
    pub fn observation_distribution(
        &self,
        task: &TaskInstance,
        history: &HistoryState,
        action: ActionId,
    ) -> Result<Vec<(ObservationId, f64)>> {
        let kind = self.action_kind(action)?;
        Ok(match (self.family, kind) {
            (EnvKind::HiddenIntentQa { values, .. }, ActionKind::Clarify { attribute }) => {
                let truth = self.attribute_value(task.hidden_intent, attribute);
                let eps = self.user_noise;
                if eps == 0.0 || values == 1 {
                    vec![(truth, 0.0)]
                } else {
                    let wrong = (eps / (values - 1) as f64).ln();
                    (0..values)
                        .map(|v| (v, if v == truth { (1.0 - eps).ln() } else { wrong }))
                        .collect()
                }
            }
            (EnvKind::HiddenIntentQa { values, .. }, _) => vec![(values, 0.0)],
            (EnvKind::ScriptedExamQa, _) => vec![(history.len().min(SCRIPT_LINES.len() - 1), 0.0)],
        })
    }

    /// Samples the user's response to `action` and returns it with its exact
    /// log-probability.
    pub fn user_response<R: Rng + ?Sized>(
        &self,
        task: &TaskInstance,
        history: &HistoryState,
        action: ActionId,
        rng: &mut R,
    ) -> Result<(ObservationId, f64)> {
        let support = self.observation_distribution(task, history, action)?;
        if support.len() == 1 {
            return Ok(support[0]);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(y, lp) in &support {
            acc += lp.exp();
            if u < acc {
                return Ok((y, lp));
            }
        }
        Ok(*support.last().expect("non-empty support"))
    }

    /// True iff the agent answered in adaptive mode or the horizon is reached.
    pub fn is_terminal(&self, task: &TaskInstance, history: &HistoryState) -> bool {
        if history.len() >= task.horizon {
            return true;
        }
        self.adaptive
            && history
                .last_action()
                .and_then(|a| self.action_kind(a).ok())
                .is_some_and(|k| matches!(k, ActionKind::Answer { .. }))
    }

    /// The answer the trajectory commits to: the kind of its final action.
    pub fn final_answer(&self, trajectory: &Trajectory) -> Option<usize> {
        let last = trajectory.steps.last()?;
        self.action_kind(last.action).ok()?.answer()
    }

    pub fn is_correct(&self, task: &TaskInstance, trajectory: &Trajectory) -> bool {
        self.final_answer(trajectory) == Some(task.hidden_intent)
    }

    /// Tasks with a context and a hidden intent drawn uniformly at random.
    pub fn make_hidden_intent_tasks<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<TaskInstance>> {
        if count == 0 {
            return Err(Error::invalid("task count must be >= 1"));
        }
        Ok((0..count)
            .map(|i| TaskInstance {
                task_id: format!("task-{i:05}"),
                context_id: rng.random_range(0..self.contexts),
                hidden_intent: rng.random_range(0..self.intents),
                horizon: self.horizon,
            })
            .collect())
    }

    /// Every `(context, intent)` pair once.
    pub fn all_tasks(&self) -> Vec<TaskInstance> {
        let mut out = Vec::with_capacity(self.contexts * self.intents);
        for c in 0..self.contexts {
            for g in 0..self.intents {
                out.push(TaskInstance {
                    task_id: format!("ctx{c}-intent{g}"),
                    context_id: c,
                    hidden_intent: g,
                    horizon: self.horizon,
                });
            }
        }
        out
    }

    fn max_support(&self) -> u128 {
        match self.family {
            EnvKind::HiddenIntentQa { values, .. } if self.user_noise > 0.0 => values.max(1) as u128,
            _ => 1,
        }
    }

    /// Worst-case leaf count `(A · O_eff)^n` checked by the enumeration guard.
    pub fn leaf_bound(&self, horizon: usize) -> u128 {
        let branch = self.action_count() as u128 * self.max_support();
        (0..horizon).fold(1u128, |acc, _| acc.saturating_mul(branch))
    }

    /// Expands every reachable trajectory of `task` exactly once. Action
    /// log-probabilities come from `policy`, or the uniform policy if `None`.
    pub fn enumerate_trajectories(
        &self,
        task: &TaskInstance,
        policy: Option<&PolicyParams>,
    ) -> Result<Vec<EnumeratedTrajectory>> {
        self.check_task(task)?;
        let leaves = self.leaf_bound(task.horizon);
        if leaves > MAX_ENUMERATED_LEAVES {
            return Err(Error::Enumeration {
                leaves,
                limit: MAX_ENUMERATED_LEAVES,
            });
        }
        if let Some(p) = policy {
            p.check_env(self)?;
        }
        let mut out = Vec::new();
        let mut steps = Vec::with_capacity(task.horizon);
        let mut history = HistoryState::initial(task.context_id);
        self.expand(task, policy, &mut history, &mut steps, &mut out)?;
        Ok(out)
    }

    fn expand(
        &self,
        task: &TaskInstance,
        policy: Option<&PolicyParams>,
        history: &mut HistoryState,
        steps: &mut Vec<Step>,
        out: &mut Vec<EnumeratedTrajectory>,
    ) -> Result<()> {
        if !steps.is_empty() && self.is_terminal(task, history) {
            let trajectory = Trajectory {
                steps: steps.clone(),
                terminated_early: steps.len() < task.horizon,
            };
            let obs_lp = trajectory.observation_logprob();
            out.push(EnumeratedTrajectory {
                log_prob: obs_lp + trajectory.behavior_logprob(),
                obs_prob_product: obs_lp.exp(),
                trajectory,
            });
            return Ok(());
        }
        let a_count = self.action_count();
        let action_lps = match policy {
            Some(p) => p.log_probs(history)?,
            None => vec![-(a_count as f64).ln(); a_count],
        };
        for (a, &lp_a) in action_lps.iter().enumerate() {
            for (y, lp_y) in self.observation_distribution(task, history, a)? {
                steps.push(Step {
                    action: a,
                    behavior_action_logprob: lp_a,
                    observation: y,
                    observation_logprob: lp_y,
                });
                history.push(a, y);
                self.expand(task, policy, history, steps, out)?;
                history.prefix.pop();
                steps.pop();
            }
        }
        Ok(())
    }
}
