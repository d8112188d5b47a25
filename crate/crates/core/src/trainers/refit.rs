//! Reward-weighted fine-tuning with raw (ReFit) or standardized (SWiFt)
//! rewards, and best-per-group filtered fine-tuning.

use super::{ascend, TrainConfig, TrainResult, WeightMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::objectives::{offline_objective, ExactSupport};
use crate::policy::PolicyParams;
use crate::types::LoggedExample;

fn check_start(theta: &PolicyParams, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    // Surface dimension errors before any update.
    for ex in dataset.examples() {
        theta.actions_logprob(ex.task.context_id, &ex.trajectory)?;
    }
    Ok(())
}

/// `g += w Σ_t ∇ log π(a_t | ·; θ)`; the unweighted sum is formed first so
/// `w = 1` reproduces a plain fine-tuning step exactly.
fn weighted_grad(theta: &PolicyParams, ex: &LoggedExample, w: f64, g: &mut [f64]) -> Result<bool> {
    if w == 0.0 {
        return Ok(false);
    }
    theta.accumulate_trajectory_grad(ex.task.context_id, &ex.trajectory, 1.0, g)?;
    if w != 1.0 {
        g.iter_mut().for_each(|x| *x *= w);
    }
    Ok(true)
}

fn describe(ex: &&LoggedExample) -> String {
    format!("group {}, seed {}", ex.group_id, ex.seed)
}

fn run_weighted(
    theta_init: &PolicyParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
    standardized: bool,
) -> Result<TrainResult> {
    check_start(theta_init, dataset)?;
    let items: Vec<&LoggedExample> = dataset.examples().iter().collect();
    ascend(
        theta_init,
        &items,
        cfg,
        support,
        |th| offline_objective(th, dataset, standardized),
        |th, ex, g| weighted_grad(th, ex, ex.weight(standardized)?, g),
        describe,
    )
}

/// Reward-weighted fine-tuning with raw rewards.
pub fn train_refit(
    theta_init: &PolicyParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
) -> Result<TrainResult> {
    if cfg.reward_mode != WeightMode::Raw {
        return Err(Error::Config("refit trains on raw rewards; set reward_mode = \"raw\"".into()));
    }
    run_weighted(theta_init, dataset, cfg, support, false)
}

/// Reward-weighted fine-tuning with per-group standardized rewards.
pub fn train_swift(
    theta_init: &PolicyParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
) -> Result<TrainResult> {
    if cfg.reward_mode != WeightMode::Standardized {
        return Err(Error::Config(
            "swift trains on standardized rewards; set reward_mode = \"standardized\"".into(),
        ));
    }
    if !dataset.is_standardized() {
        return Err(Error::Standardization(
            "dataset has no standardized rewards; run attach_standardized first".into(),
        ));
    }
    run_weighted(theta_init, dataset, cfg, support, true)
}

/// Dataset index of the highest-reward example of each group, ties to the
/// earliest rollout, in dataset order.
pub fn select_best_per_group(dataset: &Dataset) -> Vec<usize> {
    let mut out: Vec<usize> = dataset
        .group_indices()
        .values()
        .map(|idx| {
            let mut best = idx[0];
            for &i in &idx[1..] {
                if dataset.examples()[i].reward_raw > dataset.examples()[best].reward_raw {
                    best = i;
                }
            }
            best
        })
        .collect();
    out.sort_unstable();
    out
}

/// Unit-weight fine-tuning on the best trajectory of each group.
pub fn train_threshold_sft(
    theta_init: &PolicyParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
) -> Result<TrainResult> {
    check_start(theta_init, dataset)?;
    let items: Vec<&LoggedExample> = select_best_per_group(dataset)
        .into_iter()
        .map(|i| &dataset.examples()[i])
        .collect();
    let objective = |th: &PolicyParams| -> Result<f64> {
        let mut total = 0.0;
        for ex in &items {
            total += th.actions_logprob(ex.task.context_id, &ex.trajectory)?;
        }
        Ok(total / items.len() as f64)
    };
    ascend(
        theta_init,
        &items,
        cfg,
        support,
        objective,
        |th, ex, g| weighted_grad(th, ex, 1.0, g),
        describe,
    )
}
