//! Trajectory rewards, the `[0, 10] → [0, 1]` rescale, the adaptive-horizon
//! discount and per-group standardization.

use serde::{Deserialize, Serialize};

use crate::env::{ActionKind, EnvSpec};
use crate::error::{Error, Result};
use crate::types::{HistoryState, TaskInstance, Trajectory};

pub const JUDGE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    ExactMatch,
    JudgeStub,
}

/// Component weights of the deterministic judge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeWeights {
    pub accuracy: f64,
    pub style: f64,
    pub brevity: f64,
}

impl Default for JudgeWeights {
    fn default() -> Self {
        Self {
            accuracy: 1.0,
            style: 0.0,
            brevity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub mode: RewardMode,
    /// Per-step discount applied in adaptive episodes.
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub weights: JudgeWeights,
}

fn one() -> f64 {
    1.0
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::exact_match()
    }
}

impl RewardSpec {
    pub fn exact_match() -> Self {
        Self {
            mode: RewardMode::ExactMatch,
            gamma: 1.0,
            weights: JudgeWeights::default(),
        }
    }

    pub fn judge(weights: JudgeWeights) -> Result<Self> {
        let spec = Self {
            mode: RewardMode::JudgeStub,
            gamma: 1.0,
            weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.gamma = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        let w = self.weights;
        let parts = [w.accuracy, w.style, w.brevity];
        if parts.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("judge weights must be finite and >= 0".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("judge weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Judge-scale score in `[0, 10]` of a finished conversation.
    pub fn raw_reward(&self, env: &EnvSpec, task: &TaskInstance, trajectory: &Trajectory) -> Result<f64> {
        if trajectory.is_empty() {
            return Err(Error::invalid("cannot score an empty trajectory"));
        }
        let full = HistoryState {
            context_id: task.context_id,
            prefix: trajectory.prefix(trajectory.len()),
        };
        if !env.is_terminal(task, &full) {
            return Err(Error::invalid(format!(
                "task {}: trajectory of length {} is not terminal",
                task.task_id,
                trajectory.len()
            )));
        }
        let accuracy = if env.is_correct(task, trajectory) {
            JUDGE_SCALE
        } else {
            0.0
        };
        match self.mode {
            RewardMode::ExactMatch => Ok(accuracy),
            RewardMode::JudgeStub => {
                let n = trajectory.len() as f64;
                // Reasoned responses in the exam protocol, clarifying
                // questions in hidden-intent QA.
                let styled = trajectory
                    .actions()
                    .filter(|&a| {
                        matches!(
                            env.action_kind(a),
                            Ok(ActionKind::Respond { reasoned: true, .. })
                                | Ok(ActionKind::Clarify { .. })
                        )
                    })
                    .count() as f64;
                let style = JUDGE_SCALE * styled / n;
                let horizon = task.horizon as f64;
                let brevity = JUDGE_SCALE * (horizon - n + 1.0) / horizon;
                let w = self.weights;
                Ok((w.accuracy * accuracy + w.style * style + w.brevity * brevity).clamp(0.0, JUDGE_SCALE))
            }
        }
    }

    /// Training reward in `[0, 1]`: rescaled, then discounted by `γ^n` when
    /// the environment is adaptive.
    pub fn reward(&self, env: &EnvSpec, task: &TaskInstance, trajectory: &Trajectory) -> Result<f64> {
        let r = rescale(self.raw_reward(env, task, trajectory)?)?;
        Ok(if env.adaptive {
            apply_discount(r, trajectory.len(), self.gamma)
        } else {
            r
        })
    }
}

/// Maps a judge score from `[0, 10]` to `[0, 1]`.
pub fn rescale(r10: f64) -> Result<f64> {
    if !(0.0..=JUDGE_SCALE).contains(&r10) {
        return Err(Error::invalid(format!("judge score {r10} outside [0, 10]")));
    }
    Ok(r10 / JUDGE_SCALE)
}

/// `r · γ^steps_used`.
pub fn apply_discount(r: f64, steps_used: usize, gamma: f64) -> f64 {
    if gamma == 1.0 {
        return r;
    }
    r * gamma.powi(steps_used as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mu_hat: f64,
    /// Bessel-corrected sample standard deviation.
    pub sigma_hat: f64,
    pub m: usize,
}

impl StandardizationStats {
    /// True when every reward in the group was identical.
    pub fn is_degenerate(&self) -> bool {
        self.sigma_hat == 0.0
    }

    pub fn apply(&self, r: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (r - self.mu_hat) / self.sigma_hat
        }
    }
}

/// Standardizes one group of `m >= 2` rewards. A group whose rewards are all
/// equal has σ̂ = 0 and maps to all-zero standardized rewards.
pub fn standardize_group(rewards: &[f64]) -> Result<(StandardizationStats, Vec<f64>)> {
    let m = rewards.len();
    if m < 2 {
        return Err(Error::Standardization(format!(
            "need at least 2 rewards per group, got {m}"
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Standardization(format!("non-finite reward {r}")));
    }
    let mu_hat = rewards.iter().sum::<f64>() / m as f64;
    // The mean of identical values need not reproduce them exactly, so test
    // equality directly rather than trusting a tiny σ̂.
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let sigma_hat = if degenerate {
        0.0
    } else {
        (rewards.iter().map(|r| (r - mu_hat).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
    };
    let stats = StandardizationStats { mu_hat, sigma_hat, m };
    let out = rewards.iter().map(|&r| stats.apply(r)).collect();
    Ok((stats, out))
}
