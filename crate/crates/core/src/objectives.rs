//! Value functionals, bounds and gradients.
//!
//! Exact quantities are computed on an [`ExactSupport`]: every reachable
//! trajectory of every task, enumerated once, with its observation
//! log-probability and reward. Policies only change action probabilities, so
//! the support is shared by every `θ` evaluated on it. Tasks are weighted
//! uniformly.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::reward::{RewardSpec, StandardizationStats};
use crate::types::{HistoryState, LoggedExample, TaskInstance, Trajectory};

/// Slack allowed when checking an inequality computed in floating point.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub trajectory: Trajectory,
    /// `Σ_t log p(y_t | ·)`.
    pub obs_logprob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportTask {
    pub task: TaskInstance,
    /// Probability of this task under the uniform task distribution.
    pub weight: f64,
    pub leaves: Vec<Leaf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSupport {
    env: EnvSpec,
    tasks: Vec<SupportTask>,
}

impl ExactSupport {
    /// Enumerates every task. Tasks with the same context, intent and
    /// horizon share one enumeration and add up their weights.
    pub fn new(env: &EnvSpec, reward: &RewardSpec, tasks: &[TaskInstance]) -> Result<Self> {
        env.validate()?;
        reward.validate()?;
        if tasks.is_empty() {
            return Err(Error::invalid("task list is empty"));
        }
        let w = 1.0 / tasks.len() as f64;
        let mut index: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut out: Vec<SupportTask> = Vec::new();
        for t in tasks {
            let key = (t.context_id, t.hidden_intent, t.horizon);
            if let Some(&i) = index.get(&key) {
                out[i].weight += w;
                continue;
            }
            let leaves = env
                .enumerate_trajectories(t, None)?
                .into_iter()
                .map(|e| {
                    Ok(Leaf {
                        obs_logprob: e.trajectory.observation_logprob(),
                        reward: reward.reward(env, t, &e.trajectory)?,
                        trajectory: e.trajectory,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            index.insert(key, out.len());
            out.push(SupportTask {
                task: t.clone(),
                weight: w,
                leaves,
            });
        }
        Ok(Self {
            env: env.clone(),
            tasks: out,
        })
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn tasks(&self) -> &[SupportTask] {
        &self.tasks
    }

    pub fn leaf_count(&self) -> usize {
        self.tasks.iter().map(|t| t.leaves.len()).sum()
    }

    /// Same support with rewards replaced by `f(task, trajectory, reward)`.
    pub fn map_rewards(&self, mut f: impl FnMut(&TaskInstance, &Trajectory, f64) -> f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.tasks {
            for l in &mut t.leaves {
                l.reward = f(&t.task, &l.trajectory, l.reward);
            }
        }
        out
    }

    /// Rewards standardized per task with the `(μ, σ)` returned by `stats`;
    /// `σ = 0` maps every reward of that task to 0.
    pub fn standardized(&self, mut stats: impl FnMut(&TaskInstance) -> (f64, f64)) -> Result<Self> {
        let mut out = self.clone();
        for t in &mut out.tasks {
            let (mu, sigma) = stats(&t.task);
            if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::Standardization(format!(
                    "task {}: invalid (mu, sigma) = ({mu}, {sigma})",
                    t.task.task_id
                )));
            }
            for l in &mut t.leaves {
                l.reward = if sigma == 0.0 { 0.0 } else { (l.reward - mu) / sigma };
            }
        }
        Ok(out)
    }

    /// Exact per-task mean and standard deviation of the reward under `θ0`.
    pub fn population_stats(&self, theta0: &PolicyParams) -> Result<Vec<StandardizationStats>> {
        self.check(theta0)?;
        self.tasks
            .iter()
            .map(|t| {
                let lps = leaf_action_logprobs(theta0, t)?;
                let probs: Vec<f64> = lps
                    .iter()
                    .zip(&t.leaves)
                    .map(|(lp, l)| (lp + l.obs_logprob).exp())
                    .collect();
                let mu: f64 = probs.iter().zip(&t.leaves).map(|(p, l)| p * l.reward).sum();
                let var: f64 = probs
                    .iter()
                    .zip(&t.leaves)
                    .map(|(p, l)| p * (l.reward - mu).powi(2))
                    .sum();
                let sigma = if t.leaves.iter().all(|l| l.reward == t.leaves[0].reward) {
                    0.0
                } else {
                    var.max(0.0).sqrt()
                };
                Ok(StandardizationStats {
                    mu_hat: mu,
                    sigma_hat: sigma,
                    m: t.leaves.len(),
                })
            })
            .collect()
    }

    /// Rewards standardized with the exact population statistics of `θ0`.
    pub fn standardized_under(&self, theta0: &PolicyParams) -> Result<Self> {
        let stats = self.population_stats(theta0)?;
        let mut i = 0;
        self.standardized(|_| {
            let s = stats[i];
            i += 1;
            (s.mu_hat, s.sigma_hat)
        })
    }

    /// Largest `|r|` over the support.
    pub fn reward_bound(&self) -> f64 {
        self.tasks
            .iter()
            .flat_map(|t| t.leaves.iter().map(|l| l.reward.abs()))
            .fold(0.0, f64::max)
    }

    fn check(&self, theta: &PolicyParams) -> Result<()> {
        theta.check_env(&self.env)
    }

    /// `Σ_x q(x) Σ_τ f(x, τ)` where `f` sees the task, the leaf, and the full
    /// log-probabilities of the leaf under each policy in `policies`.
    fn expectation(
        &self,
        policies: &[&PolicyParams],
        mut f: impl FnMut(&SupportTask, &Leaf, &[f64]) -> Result<f64>,
    ) -> Result<f64> {
        for p in policies {
            self.check(p)?;
        }
        let mut total = 0.0;
        let mut lps = vec![0.0; policies.len()];
        for t in &self.tasks {
            let per_policy: Vec<Vec<f64>> = policies
                .iter()
                .map(|p| leaf_action_logprobs(p, t))
                .collect::<Result<_>>()?;
            let mut sum = 0.0;
            for (j, leaf) in t.leaves.iter().enumerate() {
                for (k, lp) in lps.iter_mut().enumerate() {
                    *lp = per_policy[k][j] + leaf.obs_logprob;
                }
                sum += f(t, leaf, &lps)?;
            }
            total += t.weight * sum;
        }
        Ok(total)
    }
}

fn leaf_action_logprobs(theta: &PolicyParams, t: &SupportTask) -> Result<Vec<f64>> {
    t.leaves
        .iter()
        .map(|l| theta.actions_logprob(t.task.context_id, &l.trajectory))
        .collect()
}

/// `V(θ) = Σ_x q(x) Σ_τ π(τ | x; θ) r(x, τ)`.
pub fn exact_value(theta: &PolicyParams, support: &ExactSupport) -> Result<f64> {
    support.expectation(&[theta], |_, l, lp| Ok(lp[0].exp() * l.reward))
}

/// `∇V(θ) = Σ_x q(x) Σ_τ π(τ | x; θ) r Σ_t ∇ log π(a_t | ·; θ)`.
pub fn exact_value_gradient(theta: &PolicyParams, support: &ExactSupport) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    support.expectation(&[theta], |t, l, lp| {
        let w = t.weight * lp[0].exp() * l.reward;
        if w != 0.0 {
            theta.accumulate_trajectory_grad(t.task.context_id, &l.trajectory, w, &mut g)?;
        }
        Ok(0.0)
    })?;
    Ok(g)
}

/// The importance-weighted form of `V(θ)` evaluated exactly over the
/// support of `θ0`; equal to [`exact_value`] up to rounding.
pub fn exact_ips_value(theta: &PolicyParams, theta0: &PolicyParams, support: &ExactSupport) -> Result<f64> {
    support.expectation(&[theta, theta0], |_, l, lp| {
        let p0 = lp[1].exp();
        if p0 == 0.0 {
            return Err(Error::Support("behavior policy assigns zero probability".into()));
        }
        Ok(p0 * l.reward * (lp[0] - lp[1]).exp())
    })
}

/// `E_{π0}[r log π(τ | x; θ)]`, observation terms included.
pub fn exact_offline_full(theta: &PolicyParams, theta0: &PolicyParams, support: &ExactSupport) -> Result<f64> {
    support.expectation(&[theta, theta0], |_, l, lp| Ok(lp[1].exp() * l.reward * lp[0]))
}

/// `E_{π0}[r Σ_t log π(a_t | ·; θ)]`, the θ-dependent part.
pub fn exact_offline_actions(theta: &PolicyParams, theta0: &PolicyParams, support: &ExactSupport) -> Result<f64> {
    support.expectation(&[theta, theta0], |_, l, lp| {
        Ok(lp[1].exp() * l.reward * (lp[0] - l.obs_logprob))
    })
}

/// `E_{π0}[r Σ_t log p(y_t | ·)]`: the difference between the full and the
/// actions-only offline objective. Independent of `θ`.
pub fn observation_constant(theta0: &PolicyParams, support: &ExactSupport) -> Result<f64> {
    support.expectation(&[theta0], |_, l, lp| Ok(lp[0].exp() * l.reward * l.obs_logprob))
}

/// `C1 = E_{π0}[r (1 − log π0(τ | x))]`.
pub fn constant_c1(theta0: &PolicyParams, support: &ExactSupport) -> Result<f64> {
    support.expectation(&[theta0], |_, l, lp| Ok(lp[0].exp() * l.reward * (1.0 - lp[0])))
}

/// `b · max_{x, τ} (u − 1 − log u)` with `u = π(τ | x; θ) / π0(τ | x)`.
pub fn pointwise_c2(theta: &PolicyParams, theta0: &PolicyParams, support: &ExactSupport, b: f64) -> Result<f64> {
    if !(b.is_finite() && b >= 0.0) {
        return Err(Error::invalid(format!("reward bound must be finite and >= 0, got {b}")));
    }
    let mut worst: f64 = 0.0;
    support.expectation(&[theta, theta0], |t, _, lp| {
        if lp[1] == f64::NEG_INFINITY {
            return Err(Error::Support(format!(
                "task {}: behavior policy assigns zero probability to a trajectory",
                t.task.task_id
            )));
        }
        let d = lp[0] - lp[1];
        worst = worst.max(d.exp_m1() - d);
        Ok(0.0)
    })?;
    Ok(b * worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Exact value of `θ` under the (possibly standardized) reward.
    pub v_online: f64,
    /// `E_{π0}[r log π(τ | x; θ)]` with observation terms.
    pub j_offline_full: f64,
    pub c1: f64,
    pub c2: f64,
    pub b: f64,
    /// First form: `v_online − j_offline_full − c1`. Second form: the slack
    /// `|c1| + c2 − |v_online − j_offline_full|`.
    pub gap: f64,
    pub satisfied: bool,
}

/// Checks `V(θ) ≥ E_{π0}[r log π(τ; θ)] + C1` for non-negative rewards.
pub fn verify_lower_bound(theta: &PolicyParams, theta0: &PolicyParams, support: &ExactSupport) -> Result<BoundReport> {
    if let Some(t) = support
        .tasks
        .iter()
        .find(|t| t.leaves.iter().any(|l| l.reward < 0.0))
    {
        return Err(Error::invalid(format!(
            "task {}: the lower bound requires non-negative rewards",
            t.task.task_id
        )));
    }
    let v = exact_value(theta, support)?;
    let j = exact_offline_full(theta, theta0, support)?;
    let c1 = constant_c1(theta0, support)?;
    let b = support.reward_bound();
    let c2 = pointwise_c2(theta, theta0, support, b)?;
    let gap = v - j - c1;
    Ok(BoundReport {
        v_online: v,
        j_offline_full: j,
        c1,
        c2,
        b,
        gap,
        satisfied: gap >= -BOUND_TOLERANCE,
    })
}

/// Checks `|V(θ) − E_{π0}[r log π(τ; θ)]| ≤ |C1| + C2(θ)` for rewards in
/// `[−b, b]`, typically a standardized support. `b = None` uses the
/// largest `|r|` on the support.
pub fn verify_two_sided_bound(
    theta: &PolicyParams,
    theta0: &PolicyParams,
    support: &ExactSupport,
    b: Option<f64>,
) -> Result<BoundReport> {
    let max_r = support.reward_bound();
    let b = b.unwrap_or(max_r);
    if b < max_r {
        return Err(Error::invalid(format!("reward bound {b} is below max |r| = {max_r}")));
    }
    let v = exact_value(theta, support)?;
    let j = exact_offline_full(theta, theta0, support)?;
    let c1 = constant_c1(theta0, support)?;
    let c2 = pointwise_c2(theta, theta0, support, b)?;
    let gap = c1.abs() + c2 - (v - j).abs();
    Ok(BoundReport {
        v_online: v,
        j_offline_full: j,
        c1,
        c2,
        b,
        gap,
        satisfied: gap >= -BOUND_TOLERANCE,
    })
}

// ── sample-based estimators ───────────────────────────────────────────────

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of `V(θ)`: tasks drawn uniformly, conversations
/// sampled from `θ` at temperature 1. Returns `(mean, standard error)`.
pub fn mc_value<R: Rng + ?Sized>(
    theta: &PolicyParams,
    env: &EnvSpec,
    reward: &RewardSpec,
    tasks: &[TaskInstance],
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("task list is empty"));
    }
    theta.check_env(env)?;
    let mut rs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let task = &tasks[rng.random_range(0..tasks.len())];
        let tr = crate::datagen::continue_rollout(theta, env, task, Vec::new(), 1.0, true, rng)?;
        rs.push(reward.reward(env, task, &tr)?);
    }
    Ok(mean_and_se(&rs))
}

/// Importance-weighted estimate of `V(θ)` from logged data. Observation
/// probabilities cancel, so only action log-probabilities enter the ratio.
/// `clip` caps each ratio.
pub fn ips_value(dataset: &Dataset, theta: &PolicyParams, clip: Option<f64>) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if let Some(c) = clip {
        if c.is_nan() || c <= 0.0 {
            return Err(Error::invalid(format!("clip must be > 0, got {c}")));
        }
    }
    let terms = dataset
        .examples()
        .iter()
        .map(|ex| {
            let lp = theta.actions_logprob(ex.task.context_id, &ex.trajectory)?;
            let mut ratio = (lp - ex.trajectory.behavior_logprob()).exp();
            if let Some(c) = clip {
                ratio = ratio.min(c);
            }
            Ok(ex.reward_raw * ratio)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_se(&terms))
}

/// `(1/|D|) Σ w_i Σ_t log π(a_t | ·; θ)` with `w_i` raw or standardized.
pub fn offline_objective(theta: &PolicyParams, dataset: &Dataset, standardized: bool) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut total = 0.0;
    for ex in dataset.examples() {
        let w = ex.weight(standardized)?;
        if w != 0.0 {
            total += w * theta.actions_logprob(ex.task.context_id, &ex.trajectory)?;
        }
    }
    Ok(total / dataset.len() as f64)
}

/// `g = w Σ_t ∇ log π(a_t | x, τ_{t−1}; θ)`.
pub fn grad_example(theta: &PolicyParams, example: &LoggedExample, standardized: bool) -> Result<Vec<f64>> {
    let w = example.weight(standardized)?;
    let mut g = vec![0.0; theta.len()];
    if w != 0.0 {
        theta.accumulate_trajectory_grad(example.task.context_id, &example.trajectory, w, &mut g)?;
    }
    Ok(g)
}

/// Trace of the Bessel-corrected sample covariance of the per-example
/// gradients.
pub fn gradient_variance(theta: &PolicyParams, dataset: &Dataset, standardized: bool) -> Result<f64> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 examples, got {n}")));
    }
    let grads = dataset
        .examples()
        .iter()
        .map(|ex| grad_example(theta, ex, standardized))
        .collect::<Result<Vec<_>>>()?;
    let d = theta.len();
    let mut mean = vec![0.0; d];
    for g in &grads {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let ss: f64 = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum();
    Ok(ss / (n - 1) as f64)
}

// ── greedy tabular maximizer ──────────────────────────────────────────────

/// A deterministic history-dependent policy found by backward induction.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub choices: BTreeMap<HistoryState, usize>,
    /// Objective value of the policy on the support it was computed for.
    pub value: f64,
}

impl GreedyPolicy {
    /// Tabular parameters putting logit `margin` on each chosen action.
    pub fn to_params(&self, env: &EnvSpec, margin: f64) -> Result<PolicyParams> {
        let base = PolicyParams::uniform_tabular(env)?;
        let crate::policy::PolicyFamily::Tabular(table) = base.family() else {
            unreachable!("uniform_tabular builds a tabular family");
        };
        let a_n = base.action_count();
        let mut values = vec![0.0; base.len()];
        for (s, &a) in &self.choices {
            if let Some(row) = table.get(s) {
                values[row * a_n + a] = margin;
            }
        }
        base.with_values(values)
    }
}

/// Maximizes `Σ_x q(x) E[r | x]` over deterministic policies that see the
/// context and the conversation so far but not the intent. Ties go to the
/// lowest action id.
pub fn greedy_maximizer(support: &ExactSupport) -> Result<GreedyPolicy> {
    let env = &support.env;
    // Leaf lookup: (task index, full prefix) → reward.
    let mut reward_of: Vec<HashMap<Vec<(usize, usize)>, f64>> = Vec::new();
    for t in &support.tasks {
        reward_of.push(
            t.leaves
                .iter()
                .map(|l| (l.trajectory.prefix(l.trajectory.len()), l.reward))
                .collect(),
        );
    }
    let mut choices = BTreeMap::new();
    let mut value = 0.0;
    let mut contexts: Vec<usize> = support.tasks.iter().map(|t| t.task.context_id).collect();
    contexts.sort_unstable();
    contexts.dedup();
    for c in contexts {
        let weights: Vec<(usize, f64)> = support
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.task.context_id == c)
            .map(|(i, t)| (i, t.weight))
            .collect();
        let mut h = HistoryState::initial(c);
        value += best(support, env, &reward_of, &weights, &mut h, &mut choices)?;
    }
    Ok(GreedyPolicy { choices, value })
}

/// `Σ_x w_x E[r | x, h, greedy]` where `w_x` already folds in the task
/// weight and the probability of the observations in `h`.
fn best(
    support: &ExactSupport,
    env: &EnvSpec,
    reward_of: &[HashMap<Vec<(usize, usize)>, f64>],
    weights: &[(usize, f64)],
    h: &mut HistoryState,
    choices: &mut BTreeMap<HistoryState, usize>,
) -> Result<f64> {
    let probe = &support.tasks[weights[0].0].task;
    if !h.is_empty() && env.is_terminal(probe, h) {
        return Ok(weights
            .iter()
            .map(|&(i, w)| w * reward_of[i].get(&h.prefix).copied().unwrap_or(0.0))
            .sum());
    }
    let mut best_a = 0;
    let mut best_v = f64::NEG_INFINITY;
    let mut best_sub = BTreeMap::new();
    for a in 0..env.action_count() {
        // Split the task weights by the observation each task would produce.
        let mut by_obs: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &(i, w) in weights {
            for (y, lp) in env.observation_distribution(&support.tasks[i].task, h, a)? {
                by_obs.entry(y).or_default().push((i, w * lp.exp()));
            }
        }
        let mut v = 0.0;
        let mut sub = BTreeMap::new();
        for (y, ws) in by_obs {
            h.push(a, y);
            v += best(support, env, reward_of, &ws, h, &mut sub)?;
            h.prefix.pop();
        }
        if v > best_v {
            best_v = v;
            best_a = a;
            best_sub = sub;
        }
    }
    choices.extend(best_sub);
    choices.insert(h.clone(), best_a);
    Ok(best_v)
}
