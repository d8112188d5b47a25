//! Softmax conversation policies π(a | x, τ_{t-1}; θ).
//!
//! Two parameterizations share one dense vector θ:
//!
//! * **Tabular**: one logit row per `(context, prefix)` key in a fixed state
//!   table, `θ ∈ R^{|states|·A}`. Keys missing from the table get zero logits,
//!   i.e. the uniform distribution.
//! * **Linear**: `logits = W φ(s)` with `W ∈ R^{A×F}` stored row-major and
//!   `φ(s)` the concatenation of a context one-hot and counts of each
//!   `(action, observation)` pair in the prefix, `F = C + A·O`.
//!
//! Temperature only affects sampling: the tempered distribution is
//! `softmax(logits / T)` and θ is never modified.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, MAX_ENUMERATED_LEAVES};
use crate::error::{Error, Result};
use crate::types::{ActionId, HistoryState, TaskInstance, Trajectory};

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

// ── state table / feature map ─────────────────────────────────────────────

/// Index of tabular state keys.
#[derive(Debug, Clone, Default)]
pub struct StateTable {
    states: Vec<HistoryState>,
    index: HashMap<HistoryState, usize>,
}

impl PartialEq for StateTable {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states
    }
}

impl StateTable {
    pub fn new(states: Vec<HistoryState>) -> Result<Self> {
        let mut index = HashMap::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate state key {s:?}")));
            }
        }
        Ok(Self { states, index })
    }

    /// Every non-terminal history reachable in `env` for some hidden intent,
    /// in sorted order.
    pub fn reachable(env: &EnvSpec) -> Result<Self> {
        let leaves = env.leaf_bound(env.horizon);
        if leaves > MAX_ENUMERATED_LEAVES {
            return Err(Error::Enumeration {
                leaves,
                limit: MAX_ENUMERATED_LEAVES,
            });
        }
        let mut keys = BTreeSet::new();
        for task in env.all_tasks() {
            let mut h = HistoryState::initial(task.context_id);
            collect_states(env, &task, &mut h, &mut keys)?;
        }
        Self::new(keys.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, s: &HistoryState) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn states(&self) -> &[HistoryState] {
        &self.states
    }
}

fn collect_states(
    env: &EnvSpec,
    task: &TaskInstance,
    h: &mut HistoryState,
    keys: &mut BTreeSet<HistoryState>,
) -> Result<()> {
    if !h.is_empty() && env.is_terminal(task, h) {
        return Ok(());
    }
    keys.insert(h.clone());
    for a in 0..env.action_count() {
        for (y, _) in env.observation_distribution(task, h, a)? {
            h.push(a, y);
            collect_states(env, task, h, keys)?;
            h.prefix.pop();
        }
    }
    Ok(())
}

/// φ(s): context one-hot followed by `(action, observation)` pair counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub contexts: usize,
    pub actions: usize,
    pub observations: usize,
}

impl FeatureMap {
    pub fn for_env(env: &EnvSpec) -> Self {
        Self {
            contexts: env.contexts,
            actions: env.action_count(),
            observations: env.observation_count(),
        }
    }

    /// `F`.
    pub fn dim(&self) -> usize {
        self.contexts + self.actions * self.observations
    }

    /// Non-zero entries of φ(s) as `(index, value)`, sorted by index.
    pub fn sparse(&self, s: &HistoryState) -> Result<Vec<(usize, f64)>> {
        if s.context_id >= self.contexts {
            return Err(Error::dim(format!(
                "context {} outside feature map with {} contexts",
                s.context_id, self.contexts
            )));
        }
        let mut counts: Vec<(usize, f64)> = Vec::with_capacity(s.len() + 1);
        counts.push((s.context_id, 1.0));
        for &(a, y) in &s.prefix {
            if a >= self.actions || y >= self.observations {
                return Err(Error::dim(format!("pair ({a}, {y}) outside feature map")));
            }
            let idx = self.contexts + a * self.observations + y;
            match counts.iter_mut().find(|(i, _)| *i == idx) {
                Some(e) => e.1 += 1.0,
                None => counts.push((idx, 1.0)),
            }
        }
        counts.sort_by_key(|&(i, _)| i);
        Ok(counts)
    }

    pub fn dense(&self, s: &HistoryState) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        for (i, x) in self.sparse(s)? {
            v[i] = x;
        }
        Ok(v)
    }
}

// ── parameters ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyFamily {
    Tabular(StateTable),
    Linear(FeatureMap),
}

/// θ together with the shape information needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    family: PolicyFamily,
    actions: usize,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn new(family: PolicyFamily, actions: usize, values: Vec<f64>) -> Result<Self> {
        if actions == 0 {
            return Err(Error::dim("policy needs at least one action"));
        }
        let expect = match &family {
            PolicyFamily::Tabular(t) => t.len() * actions,
            PolicyFamily::Linear(f) => {
                if f.actions != actions {
                    return Err(Error::dim(format!(
                        "feature map built for {} actions, policy has {actions}",
                        f.actions
                    )));
                }
                f.dim() * actions
            }
        };
        if values.len() != expect {
            return Err(Error::dim(format!(
                "parameter vector has length {}, expected {expect}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            family,
            actions,
            values,
        })
    }

    /// θ = 0 over the reachable state table of `env`: the uniform policy.
    pub fn uniform_tabular(env: &EnvSpec) -> Result<Self> {
        let table = StateTable::reachable(env)?;
        let n = table.len() * env.action_count();
        Self::new(PolicyFamily::Tabular(table), env.action_count(), vec![0.0; n])
    }

    /// θ = 0 for the linear family of `env`.
    pub fn zeros_linear(env: &EnvSpec) -> Result<Self> {
        let fm = FeatureMap::for_env(env);
        Self::new(PolicyFamily::Linear(fm), fm.actions, vec![0.0; fm.dim() * fm.actions])
    }

    /// Same shape with i.i.d. `N(0, scale²)` entries.
    pub fn randomized<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Self {
        let values = (0..self.values.len())
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }

    /// Same shape with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.family.clone(), self.actions, values)
    }

    /// `k·θ`. For both families this is the policy whose logits are scaled by
    /// `k`, so `scaled(1/T)` is the temperature-`T` version of `self`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    pub fn family(&self) -> &PolicyFamily {
        &self.family
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            PolicyFamily::Tabular(_) => "tabular",
            PolicyFamily::Linear(_) => "linear",
        }
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for trainers; shape is fixed.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.family == other.family && self.actions == other.actions
    }

    pub fn check_env(&self, env: &EnvSpec) -> Result<()> {
        if env.action_count() != self.actions {
            return Err(Error::dim(format!(
                "policy has {} actions, environment has {}",
                self.actions,
                env.action_count()
            )));
        }
        if let PolicyFamily::Linear(f) = &self.family {
            if *f != FeatureMap::for_env(env) {
                return Err(Error::dim("linear feature map does not match environment"));
            }
        }
        Ok(())
    }

    fn check_action(&self, a: ActionId) -> Result<()> {
        if a >= self.actions {
            return Err(Error::invalid(format!(
                "action {a} out of range (A = {})",
                self.actions
            )));
        }
        Ok(())
    }

    pub fn action_logits(&self, s: &HistoryState) -> Result<Vec<f64>> {
        let a_n = self.actions;
        match &self.family {
            PolicyFamily::Tabular(table) => Ok(match table.get(s) {
                Some(row) => self.values[row * a_n..(row + 1) * a_n].to_vec(),
                None => vec![0.0; a_n],
            }),
            PolicyFamily::Linear(fm) => {
                let phi = fm.sparse(s)?;
                let f_n = fm.dim();
                Ok((0..a_n)
                    .map(|a| {
                        let w = &self.values[a * f_n..(a + 1) * f_n];
                        phi.iter().map(|&(i, x)| w[i] * x).sum()
                    })
                    .collect())
            }
        }
    }

    pub fn log_probs(&self, s: &HistoryState) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.action_logits(s)?))
    }

    pub fn log_probs_tempered(&self, s: &HistoryState, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be finite and > 0, got {temperature}"
            )));
        }
        let logits: Vec<f64> = self
            .action_logits(s)?
            .into_iter()
            .map(|l| l / temperature)
            .collect();
        Ok(log_softmax(&logits))
    }

    pub fn action_logprob(&self, s: &HistoryState, a: ActionId) -> Result<f64> {
        self.check_action(a)?;
        Ok(self.log_probs(s)?[a])
    }

    /// Draws from `softmax(logits / temperature)` and returns the action with
    /// its log-probability under that tempered distribution.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        s: &HistoryState,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(ActionId, f64)> {
        let lps = self.log_probs_tempered(s, temperature)?;
        Ok(sample_categorical(&lps, rng))
    }

    /// ∇_θ log π(a | s; θ) as a dense vector shaped like θ.
    pub fn grad_action_logprob(&self, s: &HistoryState, a: ActionId) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.values.len()];
        self.accumulate_grad(s, a, 1.0, &mut g)?;
        Ok(g)
    }

    /// `out += scale · ∇_θ log π(a | s; θ)`, touching only the affected block.
    pub fn accumulate_grad(
        &self,
        s: &HistoryState,
        a: ActionId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_action(a)?;
        if out.len() != self.values.len() {
            return Err(Error::dim(format!(
                "gradient buffer has length {}, expected {}",
                out.len(),
                self.values.len()
            )));
        }
        let a_n = self.actions;
        let probs: Vec<f64> = self.log_probs(s)?.into_iter().map(f64::exp).collect();
        match &self.family {
            PolicyFamily::Tabular(table) => {
                if let Some(row) = table.get(s) {
                    let block = &mut out[row * a_n..(row + 1) * a_n];
                    for (b, g) in block.iter_mut().enumerate() {
                        let ind = if b == a { 1.0 } else { 0.0 };
                        *g += scale * (ind - probs[b]);
                    }
                }
            }
            PolicyFamily::Linear(fm) => {
                let f_n = fm.dim();
                let phi = fm.sparse(s)?;
                for (b, p) in probs.iter().enumerate() {
                    let coef = scale * (if b == a { 1.0 } else { 0.0 } - p);
                    let row = &mut out[b * f_n..(b + 1) * f_n];
                    for &(i, x) in &phi {
                        row[i] += coef * x;
                    }
                }
            }
        }
        Ok(())
    }

    /// `Σ_t log π(a_t | x, τ_{t-1}; θ)`, plus `Σ_t log p(y_t | ·)` when
    /// `include_observations` is set.
    pub fn trajectory_logprob(
        &self,
        env: &EnvSpec,
        task: &TaskInstance,
        trajectory: &Trajectory,
        include_observations: bool,
    ) -> Result<f64> {
        self.check_env(env)?;
        env.check_trajectory(task, trajectory)?;
        let actions = self.actions_logprob(task.context_id, trajectory)?;
        Ok(if include_observations {
            actions + trajectory.observation_logprob()
        } else {
            actions
        })
    }

    /// Actions-only log-likelihood without environment checks.
    pub(crate) fn actions_logprob(&self, context_id: usize, trajectory: &Trajectory) -> Result<f64> {
        let mut h = HistoryState::initial(context_id);
        let mut total = 0.0;
        for s in &trajectory.steps {
            total += self.action_logprob(&h, s.action)?;
            h.push(s.action, s.observation);
        }
        Ok(total)
    }

    /// `out += scale · Σ_t ∇ log π(a_t | x, τ_{t-1}; θ)`.
    pub(crate) fn accumulate_trajectory_grad(
        &self,
        context_id: usize,
        trajectory: &Trajectory,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let mut h = HistoryState::initial(context_id);
        for s in &trajectory.steps {
            self.accumulate_grad(&h, s.action, scale, out)?;
            h.push(s.action, s.observation);
        }
        Ok(())
    }

    // ── checkpoints ───────────────────────────────────────────────────────

    pub fn to_checkpoint_json(&self, config_hash: Option<&str>) -> Result<String> {
        let (features, states) = match &self.family {
            PolicyFamily::Tabular(t) => (None, Some(t.states.clone())),
            PolicyFamily::Linear(f) => (Some(*f), None),
        };
        let rec = Checkpoint {
            family: self.family_name().to_string(),
            actions: self.actions,
            features,
            states,
            values: self.values.clone(),
            config_hash: config_hash.map(str::to_string),
        };
        serde_json::to_string_pretty(&rec).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Parses a checkpoint, returning the policy and its stamped config hash.
    pub fn from_checkpoint_json(text: &str) -> Result<(Self, Option<String>)> {
        let rec: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Schema {
            line: e.line(),
            message: e.to_string(),
        })?;
        let family = match (rec.family.as_str(), rec.features, rec.states) {
            ("tabular", None, Some(states)) => PolicyFamily::Tabular(StateTable::new(states)?),
            ("linear", Some(f), None) => PolicyFamily::Linear(f),
            (f, ..) => {
                return Err(Error::Schema {
                    line: 0,
                    message: format!("inconsistent checkpoint header for family {f:?}"),
                })
            }
        };
        Ok((Self::new(family, rec.actions, rec.values)?, rec.config_hash))
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_checkpoint_json(config_hash)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<String>)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

/// Samples an index from a categorical distribution given by log-probs.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(lps: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in lps.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return (i, lp);
        }
    }
    // Rounding left `acc` just below 1: take the last action with mass.
    let i = lps
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(lps.len() - 1);
    (i, lps[i])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    family: String,
    actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<FeatureMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    states: Option<Vec<HistoryState>>,
    values: Vec<f64>,
    config_hash: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use crate::types::Step;

    fn env() -> EnvSpec {
        EnvSpec::hidden_intent(2, 3, 2, 2, 3).unwrap()
    }

    fn state(ctx: usize, prefix: &[(usize, usize)]) -> HistoryState {
        HistoryState {
            context_id: ctx,
            prefix: prefix.to_vec(),
        }
    }

    #[test]
    fn reachable_table_size() {
        // Per context: 1 root and 7 depth-1 states. At depth 2 a
        // deterministic user only answers consistently with some intent:
        // 6 + 5 + 6 + 5 after the four clarify outcomes, 7 after each of the
        // 3 answers.
        let t = StateTable::reachable(&env()).unwrap();
        assert_eq!(t.len(), 2 * (1 + 7 + (6 + 5 + 6 + 5 + 3 * 7)));
    }

    #[test]
    fn zero_linear_logits() {
        let p = PolicyParams::zeros_linear(&env()).unwrap();
        let l = p.action_logits(&state(1, &[(0, 1), (3, 2)])).unwrap();
        assert_eq!(l, vec![0.0; 5]);
    }

    #[test]
    fn unseen_tabular_state_is_uniform() {
        let p = PolicyParams::uniform_tabular(&env()).unwrap().randomized(1.0, &mut rng_from_seed(1));
        let unseen = state(0, &[(0, 2)]); // clarifier never yields the ack id
        assert_eq!(p.action_logits(&unseen).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn hand_set_linear_weights_pick_a_column() {
        // A = 2, one context, one observation: F = 1 + 2.
        let fm = FeatureMap {
            contexts: 1,
            actions: 2,
            observations: 1,
        };
        // W = [[1, 2, 3], [4, 5, 6]] row-major.
        let p = PolicyParams::new(
            PolicyFamily::Linear(fm),
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        // Root state: φ = e_0 → first column (1, 4).
        assert_eq!(p.action_logits(&state(0, &[])).unwrap(), vec![1.0, 4.0]);
        // After pair (1, 0): φ = e_0 + e_2 → (1 + 3, 4 + 6).
        assert_eq!(p.action_logits(&state(0, &[(1, 0)])).unwrap(), vec![4.0, 10.0]);
    }

    #[test]
    fn uniform_logprob() {
        let e = EnvSpec::hidden_intent(1, 2, 2, 2, 1).unwrap();
        let p = PolicyParams::uniform_tabular(&e).unwrap();
        let lp = p.action_logprob(&state(0, &[]), 3).unwrap();
        assert!((lp - (-1.386294361119890_6)).abs() < 1e-12);
        assert!(p.action_logprob(&state(0, &[]), 4).is_err());
    }

    #[test]
    fn softmax_closed_form() {
        let lp = log_softmax(&[0.0, 3f64.ln()]);
        assert!((lp[0].exp() - 0.25).abs() < 1e-15);
        assert!((lp[1].exp() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_is_stable() {
        let lp = log_softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampling_determinism_and_identity_temperature() {
        let p = PolicyParams::uniform_tabular(&env()).unwrap().randomized(1.0, &mut rng_from_seed(2));
        let s = state(1, &[(0, 1)]);
        let mut r1 = rng_from_seed(9);
        let mut r2 = r1.clone();
        for _ in 0..50 {
            let (a1, lp1) = p.sample_action(&s, 1.0, &mut r1).unwrap();
            let (a2, lp2) = p.sample_action(&s, 1.0, &mut r2).unwrap();
            assert_eq!((a1, lp1.to_bits()), (a2, lp2.to_bits()));
            assert_eq!(lp1, p.action_logprob(&s, a1).unwrap());
        }
        assert!(p.sample_action(&s, 0.0, &mut r1).is_err());
        assert!(p.sample_action(&s, -1.0, &mut r1).is_err());
    }

    #[test]
    fn uniform_gradient_block() {
        let fm = FeatureMap {
            contexts: 1,
            actions: 2,
            observations: 1,
        };
        let p = PolicyParams::new(PolicyFamily::Linear(fm), 2, vec![0.0; 6]).unwrap();
        let s = state(0, &[(1, 0)]);
        let phi = fm.dense(&s).unwrap();
        let g = p.grad_action_logprob(&s, 0).unwrap();
        let expect: Vec<f64> = phi
            .iter()
            .map(|x| 0.5 * x)
            .chain(phi.iter().map(|x| -0.5 * x))
            .collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn trajectory_logprob_decomposes() {
        let e = EnvSpec::hidden_intent(1, 1, 2, 2, 2).unwrap().with_noise(0.25).unwrap();
        let p = PolicyParams::uniform_tabular(&e).unwrap();
        let task = TaskInstance::new("t", 0, 0, 2).unwrap();
        let tr = Trajectory {
            steps: vec![
                Step {
                    action: 0,
                    behavior_action_logprob: 0.0,
                    observation: 1,
                    observation_logprob: (0.25f64).ln(),
                },
                Step {
                    action: 2,
                    behavior_action_logprob: 0.0,
                    observation: 2,
                    observation_logprob: 0.0,
                },
            ],
            terminated_early: false,
        };
        let off = p.trajectory_logprob(&e, &task, &tr, false).unwrap();
        let on = p.trajectory_logprob(&e, &task, &tr, true).unwrap();
        assert!((off - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((on - off - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        for p in [
            PolicyParams::uniform_tabular(&env()).unwrap(),
            PolicyParams::zeros_linear(&env()).unwrap(),
        ] {
            let p = p.randomized(0.7, &mut rng_from_seed(5));
            let text = p.to_checkpoint_json(Some("abc")).unwrap();
            let (back, hash) = PolicyParams::from_checkpoint_json(&text).unwrap();
            assert_eq!(back, p);
            assert_eq!(hash.as_deref(), Some("abc"));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let fm = FeatureMap::for_env(&env());
        assert!(PolicyParams::new(PolicyFamily::Linear(fm), 5, vec![0.0; 3]).is_err());
        let other = EnvSpec::hidden_intent(2, 4, 2, 2, 3).unwrap();
        assert!(PolicyParams::zeros_linear(&env()).unwrap().check_env(&other).is_err());
    }
}
