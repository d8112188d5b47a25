//! Tasks, trajectories and logged examples.
//!
//! A conversation is a sequence of `(action, observation)` steps. Actions and
//! observations are categorical ids owned by an environment; every step also
//! carries the log-probability the logging policy assigned to the action and
//! the exact log-probability of the user's response.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ActionId = usize;
pub type ObservationId = usize;

/// One conversation task: a visible context and a hidden intent known only to
/// the simulated user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub context_id: usize,
    pub hidden_intent: usize,
    pub horizon: usize,
}

impl TaskInstance {
    pub fn new(
        task_id: impl Into<String>,
        context_id: usize,
        hidden_intent: usize,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("task horizon must be at least 1"));
        }
        Ok(Self {
            task_id: task_id.into(),
            context_id,
            hidden_intent,
            horizon,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub action: ActionId,
    /// log π0(a_t | x, τ_{t-1}) as recorded at logging time.
    pub behavior_action_logprob: f64,
    pub observation: ObservationId,
    /// log p(y_t | x, τ_{t-1}, a_t).
    pub observation_logprob: f64,
}

impl Step {
    fn check(&self) -> std::result::Result<(), String> {
        for (name, lp) in [
            ("behavior_action_logprob", self.behavior_action_logprob),
            ("observation_logprob", self.observation_logprob),
        ] {
            if !lp.is_finite() || lp > 0.0 {
                return Err(format!("{name} must be finite and <= 0, got {lp}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// The episode stopped before the horizon because the agent answered.
    pub terminated_early: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    pub fn behavior_logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.behavior_action_logprob).sum()
    }

    pub fn observation_logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.observation_logprob).sum()
    }

    /// `(action, observation)` pairs of the first `t` steps.
    pub fn prefix(&self, t: usize) -> Vec<(ActionId, ObservationId)> {
        self.steps[..t]
            .iter()
            .map(|s| (s.action, s.observation))
            .collect()
    }
}

/// Whether a reward must lie in the post-rescale unit interval or is only
/// required to be non-negative (unrescaled diagnostic datasets).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardScale {
    Unit,
    Unscaled,
}

/// One `(x, τ_n, r)` tuple of the logged dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedExample {
    pub task: TaskInstance,
    pub trajectory: Trajectory,
    pub reward_raw: f64,
    pub reward_std: Option<f64>,
    pub group_id: String,
    pub temperature: f64,
    pub seed: u64,
}

impl LoggedExample {
    /// Reward weight used by the trainers: raw, or standardized when asked.
    pub fn weight(&self, standardized: bool) -> Result<f64> {
        if standardized {
            self.reward_std.ok_or_else(|| {
                Error::Standardization(format!(
                    "example of group {} has no standardized reward; run attach_standardized first",
                    self.group_id
                ))
            })
        } else {
            Ok(self.reward_raw)
        }
    }

    pub(crate) fn check(&self, scale: RewardScale) -> std::result::Result<(), String> {
        let t = &self.task;
        if t.horizon == 0 {
            return Err("horizon must be >= 1".into());
        }
        if self.trajectory.is_empty() {
            return Err("trajectory must have at least one step".into());
        }
        if self.trajectory.len() > t.horizon {
            return Err(format!(
                "trajectory length {} exceeds horizon {}",
                self.trajectory.len(),
                t.horizon
            ));
        }
        for (i, s) in self.trajectory.steps.iter().enumerate() {
            s.check().map_err(|m| format!("step {i}: {m}"))?;
        }
        let r = self.reward_raw;
        match scale {
            RewardScale::Unit if !(0.0..=1.0).contains(&r) => {
                return Err(format!("reward_raw must lie in [0, 1], got {r}"));
            }
            RewardScale::Unscaled if !(r.is_finite() && r >= 0.0) => {
                return Err(format!("reward_raw must be finite and >= 0, got {r}"));
            }
            _ => {}
        }
        if let Some(rs) = self.reward_std {
            if !rs.is_finite() {
                return Err(format!("reward_std must be finite, got {rs}"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            ));
        }
        if self.group_id.is_empty() {
            return Err("group_id must be non-empty".into());
        }
        Ok(())
    }
}

/// What a policy may condition on: the context and the `(action,
/// observation)` prefix τ_{t-1}. The hidden intent is deliberately absent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryState {
    pub context_id: usize,
    pub prefix: Vec<(ActionId, ObservationId)>,
}

impl HistoryState {
    pub fn initial(context_id: usize) -> Self {
        Self {
            context_id,
            prefix: Vec::new(),
        }
    }

    /// State before step `t` (0-based) of `trajectory`.
    pub fn at(context_id: usize, trajectory: &Trajectory, t: usize) -> Self {
        Self {
            context_id,
            prefix: trajectory.prefix(t),
        }
    }

    pub fn len(&self) -> usize {
        self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty()
    }

    pub fn last_action(&self) -> Option<ActionId> {
        self.prefix.last().map(|&(a, _)| a)
    }

    pub fn push(&mut self, action: ActionId, observation: ObservationId) {
        self.prefix.push((action, observation));
    }
}
