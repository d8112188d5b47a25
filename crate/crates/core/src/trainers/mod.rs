//! Offline trainers. Every trainer makes sequential stochastic-gradient
//! ascent passes over a shuffled list of items; they differ in the items and
//! in the per-item gradient.

mod dpo;
mod refit;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{exact_value, ExactSupport};
use crate::policy::PolicyParams;
use crate::seed::stream;

pub use dpo::{
    dpo_pair_gradient, dpo_pairs, examples_with_pairs, step_dpo_pairs, train_dpo, train_step_dpo,
    Counterfactual, PreferencePair, StepPreference, MAX_REDRAWS,
};
pub use refit::{select_best_per_group, train_refit, train_swift, train_threshold_sft};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `α / √i` for update `i = 1, 2, …`.
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Raw,
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "one_epoch")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default = "raw")]
    pub reward_mode: WeightMode,
    /// Rescales any update whose gradient norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta")]
    pub dpo_beta: f64,
    #[serde(default = "sgd")]
    pub optimizer: Optimizer,
}

fn one_epoch() -> usize {
    1
}
fn default_lr() -> f64 {
    0.3
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}
fn raw() -> WeightMode {
    WeightMode::Raw
}
fn default_beta() -> f64 {
    1.0
}
fn sgd() -> Optimizer {
    Optimizer::Sgd
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: one_epoch(),
            lr: default_lr(),
            schedule: default_schedule(),
            shuffle_seed: 0,
            reward_mode: raw(),
            grad_clip: None,
            dpo_beta: default_beta(),
            optimizer: sgd(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if !(self.dpo_beta.is_finite() && self.dpo_beta > 0.0) {
            return bad(format!("dpo_beta must be finite and > 0, got {}", self.dpo_beta));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be finite and > 0, got {c}"));
            }
        }
        Ok(())
    }

    /// Step size of update `i` (1-based).
    pub fn step_size(&self, i: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InverseSqrt => self.lr / (i as f64).sqrt(),
        }
    }

    /// The same config with the reward mode the algorithm expects.
    pub fn for_algorithm(&self, algo: Algorithm) -> Self {
        let mut c = self.clone();
        c.reward_mode = if algo == Algorithm::Swift {
            WeightMode::Standardized
        } else {
            WeightMode::Raw
        };
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Refit,
    Swift,
    ThresholdSft,
    Dpo,
    StepDpo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Refit,
        Algorithm::Swift,
        Algorithm::ThresholdSft,
        Algorithm::Dpo,
        Algorithm::StepDpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Refit => "refit",
            Algorithm::Swift => "swift",
            Algorithm::ThresholdSft => "threshold-sft",
            Algorithm::Dpo => "dpo",
            Algorithm::StepDpo => "step-dpo",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::invalid(format!("unknown algorithm {s:?}; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub theta: PolicyParams,
    /// Training objective after each epoch.
    pub objective_trace: Vec<f64>,
    /// Exact value after each epoch, when a support was supplied.
    pub value_trace: Option<Vec<f64>>,
    pub updates: usize,
}

impl TrainResult {
    /// `epoch,objective[,exact_value]` lines with a header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(if self.value_trace.is_some() {
            "epoch,objective,exact_value\n"
        } else {
            "epoch,objective\n"
        });
        for (e, obj) in self.objective_trace.iter().enumerate() {
            match &self.value_trace {
                Some(v) => out.push_str(&format!("{},{},{}\n", e + 1, obj, v[e])),
                None => out.push_str(&format!("{},{}\n", e + 1, obj)),
            }
        }
        out
    }
}

/// The visiting order of `n` items in `epoch` (0-based).
pub fn epoch_order(shuffle_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(shuffle_seed, &format!("shuffle/epoch{epoch}")));
    order
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, g: &[f64], alpha: f64, theta: &mut [f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for j in 0..g.len() {
            self.m[j] = Self::B1 * self.m[j] + (1.0 - Self::B1) * g[j];
            self.v[j] = Self::B2 * self.v[j] + (1.0 - Self::B2) * g[j] * g[j];
            theta[j] += alpha * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Sequential ascent over `items`. `grad` writes the item's ascent
/// direction into a zeroed buffer and returns false when the item carries
/// no update.
pub(crate) fn ascend<I>(
    theta_init: &PolicyParams,
    items: &[I],
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
    objective: impl Fn(&PolicyParams) -> Result<f64>,
    grad: impl Fn(&PolicyParams, &I, &mut [f64]) -> Result<bool>,
    describe: impl Fn(&I) -> String,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut theta = theta_init.clone();
    let mut g = vec![0.0; theta.len()];
    let mut adam = Adam {
        m: vec![0.0; theta.len()],
        v: vec![0.0; theta.len()],
        t: 0,
    };
    let mut objective_trace = Vec::with_capacity(cfg.epochs);
    let mut value_trace = support.map(|_| Vec::with_capacity(cfg.epochs));
    let mut i = 0;
    for epoch in 0..cfg.epochs {
        for k in epoch_order(cfg.shuffle_seed, epoch, items.len()) {
            i += 1;
            g.iter_mut().for_each(|x| *x = 0.0);
            if !grad(&theta, &items[k], &mut g)? {
                continue;
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient component {j} = {} at update {i} (epoch {}, {})",
                    g[j],
                    epoch + 1,
                    describe(&items[k])
                )));
            }
            if let Some(c) = cfg.grad_clip {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
            let alpha = cfg.step_size(i);
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (t, d) in theta.values_mut().iter_mut().zip(&g) {
                        *t += alpha * d;
                    }
                }
                Optimizer::Adam => adam.step(&g, alpha, theta.values_mut()),
            }
        }
        objective_trace.push(objective(&theta)?);
        if let (Some(s), Some(v)) = (support, value_trace.as_mut()) {
            v.push(exact_value(&theta, s)?);
        }
    }
    Ok(TrainResult {
        theta,
        objective_trace,
        value_trace,
        updates: i,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let mut c = TrainConfig {
            lr: 0.5,
            schedule: LrSchedule::InverseSqrt,
            ..TrainConfig::default()
        };
        assert_eq!(c.step_size(4), 0.25);
        c.schedule = LrSchedule::Constant;
        assert_eq!(c.step_size(4), 0.5);
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                dpo_beta: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        let err = "ppo".parse::<Algorithm>().unwrap_err().to_string();
        assert!(err.contains("refit, swift, threshold-sft, dpo, step-dpo"), "{err}");
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ() {
        let a = epoch_order(3, 0, 50);
        let b = epoch_order(3, 1, 50);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(3, 0, 50));
    }
}
