//! Preference-based baselines: trajectory-level DPO on best/worst pairs and
//! step-level DPO on counterfactual single-action alternatives.

use std::collections::BTreeSet;

use rayon::prelude::*;

use super::{ascend, TrainConfig, TrainResult};
use crate::datagen::continue_rollout;
use crate::dataset::Dataset;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::objectives::ExactSupport;
use crate::policy::PolicyParams;
use crate::reward::RewardSpec;
use crate::seed::stream;
use crate::types::{ActionId, HistoryState, LoggedExample, Step};

/// Draws of an alternative action before a step is skipped.
pub const MAX_REDRAWS: usize = 5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub group_id: String,
    /// Dataset index of the chosen trajectory.
    pub winner: usize,
    /// Dataset index of the rejected trajectory.
    pub loser: usize,
}

/// Best against worst logged trajectory of each group; groups whose
/// rewards are all equal are skipped.
pub fn dpo_pairs(dataset: &Dataset) -> Result<Vec<PreferencePair>> {
    let ex = dataset.examples();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (group, idx) in dataset.group_indices() {
        let (mut best, mut worst) = (idx[0], idx[0]);
        for &i in &idx[1..] {
            if ex[i].reward_raw > ex[best].reward_raw {
                best = i;
            }
            if ex[i].reward_raw < ex[worst].reward_raw {
                worst = i;
            }
        }
        if ex[best].reward_raw > ex[worst].reward_raw {
            pairs.push(PreferencePair {
                group_id: group.clone(),
                winner: best,
                loser: worst,
            });
        } else {
            skipped.push(group.as_str());
        }
    }
    if pairs.is_empty() {
        const SHOWN: usize = 10;
        let mut list = skipped.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
        if skipped.len() > SHOWN {
            list.push_str(&format!(" and {} more", skipped.len() - SHOWN));
        }
        return Err(Error::Training(format!(
            "no group has two trajectories with different rewards: {list}"
        )));
    }
    Ok(pairs)
}

/// `z = β (log π(τ; θ) − log π(τ; θ_ref))` over actions.
fn implicit_reward(theta: &PolicyParams, theta_ref: &PolicyParams, ex: &LoggedExample, beta: f64) -> Result<f64> {
    let ctx = ex.task.context_id;
    Ok(beta * (theta.actions_logprob(ctx, &ex.trajectory)? - theta_ref.actions_logprob(ctx, &ex.trajectory)?))
}

/// Ascent direction of `log σ(z_w − z_l)`:
/// `β σ(z_l − z_w) (Σ ∇ log π(winner) − Σ ∇ log π(loser))`.
pub fn dpo_pair_gradient(
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    winner: &LoggedExample,
    loser: &LoggedExample,
    beta: f64,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    add_pair_gradient(theta, theta_ref, winner, loser, beta, &mut g)?;
    Ok(g)
}

fn add_pair_gradient(
    theta: &PolicyParams,
    theta_ref: &PolicyParams,
    winner: &LoggedExample,
    loser: &LoggedExample,
    beta: f64,
    g: &mut [f64],
) -> Result<()> {
    let zw = implicit_reward(theta, theta_ref, winner, beta)?;
    let zl = implicit_reward(theta, theta_ref, loser, beta)?;
    let coef = beta * sigmoid(zl - zw);
    theta.accumulate_trajectory_grad(winner.task.context_id, &winner.trajectory, coef, g)?;
    theta.accumulate_trajectory_grad(loser.task.context_id, &loser.trajectory, -coef, g)
}

/// Trajectory-level DPO against the frozen reference `theta_ref`.
pub fn train_dpo(
    theta_init: &PolicyParams,
    theta_ref: &PolicyParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if !theta_init.same_shape(theta_ref) {
        return Err(Error::dim("reference policy has a different shape"));
    }
    let pairs = dpo_pairs(dataset)?;
    let ex = dataset.examples();
    let beta = cfg.dpo_beta;
    let objective = |th: &PolicyParams| -> Result<f64> {
        let mut total = 0.0;
        for p in &pairs {
            let zw = implicit_reward(th, theta_ref, &ex[p.winner], beta)?;
            let zl = implicit_reward(th, theta_ref, &ex[p.loser], beta)?;
            total += log_sigmoid(zw - zl);
        }
        Ok(total / pairs.len() as f64)
    };
    ascend(
        theta_init,
        &pairs,
        cfg,
        support,
        objective,
        |th, p, g| {
            add_pair_gradient(th, theta_ref, &ex[p.winner], &ex[p.loser], beta, g)?;
            Ok(true)
        },
        |p| format!("group {}", p.group_id),
    )
}

/// One counterfactual comparison at a single step of a logged trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPreference {
    /// Dataset index of the logged example.
    pub example: usize,
    pub step: usize,
    pub state: HistoryState,
    pub winner_action: ActionId,
    pub loser_action: ActionId,
    pub logged_reward: f64,
    pub alternative_reward: f64,
}

/// What step-level DPO needs to generate counterfactual continuations.
#[derive(Debug, Clone, Copy)]
pub struct Counterfactual<'a> {
    pub theta0: &'a PolicyParams,
    pub env: &'a EnvSpec,
    pub reward: &'a RewardSpec,
    pub seed: u64,
}

/// For every step of every logged trajectory: draw an alternative action
/// from `θ0` at the logged temperature, roll the rest out under `θ0`, and
/// prefer whichever of the two actions led to the higher reward. Ties, and
/// steps where every draw repeated the logged action, yield no pair.
pub fn step_dpo_pairs(dataset: &Dataset, cf: &Counterfactual<'_>) -> Result<Vec<StepPreference>> {
    cf.theta0.check_env(cf.env)?;
    let per_example: Vec<Result<Vec<StepPreference>>> = dataset
        .examples()
        .par_iter()
        .enumerate()
        .map(|(k, ex)| {
            let mut rng = stream(cf.seed, &format!("step-dpo/{k}"));
            let mut out = Vec::new();
            let steps = &ex.trajectory.steps;
            for t in 0..steps.len() {
                let h = HistoryState::at(ex.task.context_id, &ex.trajectory, t);
                let logged = steps[t].action;
                let mut alt = None;
                for _ in 0..MAX_REDRAWS {
                    let (a, lp) = cf.theta0.sample_action(&h, ex.temperature, &mut rng)?;
                    if a != logged {
                        alt = Some((a, lp));
                        break;
                    }
                }
                let Some((a, lp)) = alt else { continue };
                let (y, lp_y) = cf.env.user_response(&ex.task, &h, a, &mut rng)?;
                let mut prefix = steps[..t].to_vec();
                prefix.push(Step {
                    action: a,
                    behavior_action_logprob: lp,
                    observation: y,
                    observation_logprob: lp_y,
                });
                let tr = continue_rollout(cf.theta0, cf.env, &ex.task, prefix, ex.temperature, true, &mut rng)?;
                let r_alt = cf.reward.reward(cf.env, &ex.task, &tr)?;
                let (winner, loser) = if r_alt > ex.reward_raw {
                    (a, logged)
                } else if r_alt < ex.reward_raw {
                    (logged, a)
                } else {
                    continue;
                };
                out.push(StepPreference {
                    example: k,
                    step: t,
                    state: h,
                    winner_action: winner,
                    loser_action: loser,
                    logged_reward: ex.reward_raw,
                    alternative_reward: r_alt,
                });
            }
            Ok(out)
        })
        .collect();
    let mut pairs = Vec::new();
    for r in per_example {
        pairs.extend(r?);
    }
    Ok(pairs)
}

fn step_margin(th: &PolicyParams, theta_ref: &PolicyParams, p: &StepPreference, beta: f64) -> Result<(f64, f64)> {
    let zw = beta * (th.action_logprob(&p.state, p.winner_action)? - theta_ref.action_logprob(&p.state, p.winner_action)?);
    let zl = beta * (th.action_logprob(&p.state, p.loser_action)? - theta_ref.action_logprob(&p.state, p.loser_action)?);
    Ok((zw, zl))
}

/// DPO restricted to single-step action pairs from [`step_dpo_pairs`].
pub fn train_step_dpo(
    theta_init: &PolicyParams,
    theta_ref: &PolicyParams,
    dataset: &Dataset,
    cf: &Counterfactual<'_>,
    cfg: &TrainConfig,
    support: Option<&ExactSupport>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if !theta_init.same_shape(theta_ref) {
        return Err(Error::dim("reference policy has a different shape"));
    }
    let pairs = step_dpo_pairs(dataset, cf)?;
    let beta = cfg.dpo_beta;
    let objective = |th: &PolicyParams| -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for p in &pairs {
            let (zw, zl) = step_margin(th, theta_ref, p, beta)?;
            total += log_sigmoid(zw - zl);
        }
        Ok(total / pairs.len() as f64)
    };
    ascend(
        theta_init,
        &pairs,
        cfg,
        support,
        objective,
        |th, p, g| {
            let (zw, zl) = step_margin(th, theta_ref, p, beta)?;
            let coef = beta * sigmoid(zl - zw);
            th.accumulate_grad(&p.state, p.winner_action, coef, g)?;
            th.accumulate_grad(&p.state, p.loser_action, -coef, g)?;
            Ok(true)
        },
        |p| format!("example {}, step {}", p.example, p.step),
    )
}

/// Distinct dataset examples that produced at least one step pair.
pub fn examples_with_pairs(pairs: &[StepPreference]) -> BTreeSet<usize> {
    pairs.iter().map(|p| p.example).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::example;
    use crate::datagen::{generate_dataset, DatagenConfig};
    use crate::reward::JudgeWeights;
    use crate::seed::rng_from_seed;

    fn env() -> EnvSpec {
        EnvSpec::hidden_intent(2, 3, 2, 2, 3).unwrap()
    }

    fn logged(tasks: usize, seed: u64, e: &EnvSpec, spec: &RewardSpec) -> Dataset {
        let theta0 = PolicyParams::uniform_tabular(e).unwrap();
        let ts = e.make_hidden_intent_tasks(tasks, &mut rng_from_seed(seed)).unwrap();
        let cfg = DatagenConfig {
            master_seed: seed,
            ..DatagenConfig::default()
        };
        generate_dataset(&theta0, e, spec, &ts, &cfg).unwrap()
    }

    #[test]
    fn gradient_at_reference_is_half_beta() {
        let e = env();
        let d = Dataset::new(vec![example("a", 1.0, &[0, 1, 2]), example("a", 0.0, &[1, 1, 3])]).unwrap();
        let theta = PolicyParams::zeros_linear(&e).unwrap().randomized(0.5, &mut rng_from_seed(1));
        let beta = 0.7;
        let (w, l) = (&d.examples()[0], &d.examples()[1]);
        let g = dpo_pair_gradient(&theta, &theta, w, l, beta).unwrap();
        let mut gw = vec![0.0; theta.len()];
        theta.accumulate_trajectory_grad(0, &w.trajectory, 1.0, &mut gw).unwrap();
        let mut gl = vec![0.0; theta.len()];
        theta.accumulate_trajectory_grad(0, &l.trajectory, 1.0, &mut gl).unwrap();
        for j in 0..g.len() {
            assert!((g[j] - 0.5 * beta * (gw[j] - gl[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let e = env();
        let d = Dataset::new(vec![example("a", 1.0, &[0, 1, 2]), example("a", 0.0, &[1, 0, 3])]).unwrap();
        let (w, l) = (&d.examples()[0], &d.examples()[1]);
        let theta_ref = PolicyParams::zeros_linear(&e).unwrap().randomized(0.5, &mut rng_from_seed(2));
        let theta = theta_ref.randomized(0.8, &mut rng_from_seed(3));
        let beta = 1.3;
        let loss = |p: &PolicyParams| {
            let zw = implicit_reward(p, &theta_ref, w, beta).unwrap();
            let zl = implicit_reward(p, &theta_ref, l, beta).unwrap();
            log_sigmoid(zw - zl)
        };
        let g = dpo_pair_gradient(&theta, &theta_ref, w, l, beta).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.values().to_vec();
            plus[i] += h;
            let mut minus = theta.values().to_vec();
            minus[i] -= h;
            let fd = (loss(&theta.with_values(plus).unwrap()) - loss(&theta.with_values(minus).unwrap())) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn pairs_skip_flat_groups_and_error_when_none() {
        let d = Dataset::new(vec![
            example("a", 0.5, &[0, 0, 0]),
            example("a", 0.5, &[0, 0, 1]),
            example("b", 0.0, &[1, 1, 1]),
            example("b", 1.0, &[1, 1, 2]),
            example("b", 0.0, &[1, 1, 3]),
        ])
        .unwrap();
        let pairs = dpo_pairs(&d).unwrap();
        assert_eq!(
            pairs,
            vec![PreferencePair {
                group_id: "b".into(),
                winner: 3,
                loser: 2
            }]
        );
        let flat = Dataset::new(d.examples()[..2].to_vec()).unwrap();
        let err = dpo_pairs(&flat).unwrap_err().to_string();
        assert!(err.contains('a'), "{err}");
    }

    #[test]
    fn dpo_training_runs_and_is_deterministic() {
        let e = env();
        let spec = RewardSpec::exact_match();
        let d = logged(60, 4, &e, &spec);
        let theta0 = PolicyParams::uniform_tabular(&e).unwrap();
        let cfg = TrainConfig::default();
        let a = train_dpo(&theta0, &theta0, &d, &cfg, None).unwrap();
        let b = train_dpo(&theta0, &theta0, &d, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.updates, dpo_pairs(&d).unwrap().len());
        assert!(a.objective_trace[0] > (0.5f64).ln());
    }

    #[test]
    fn constant_reward_skips_every_step() {
        let e = env();
        let spec = RewardSpec::judge(JudgeWeights {
            accuracy: 0.0,
            style: 0.0,
            brevity: 1.0,
        })
        .unwrap();
        let d = logged(20, 5, &e, &spec);
        let theta0 = PolicyParams::uniform_tabular(&e).unwrap();
        let cf = Counterfactual {
            theta0: &theta0,
            env: &e,
            reward: &spec,
            seed: 1,
        };
        assert!(step_dpo_pairs(&d, &cf).unwrap().is_empty());
        let r = train_step_dpo(&theta0, &theta0, &d, &cf, &TrainConfig::default(), None).unwrap();
        assert_eq!(r.theta, theta0);
    }

    /// Replays the counterfactual draws with the same streams, step by step.
    fn replay(d: &Dataset, theta0: &PolicyParams, e: &EnvSpec, spec: &RewardSpec, seed: u64) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for (k, ex) in d.examples().iter().enumerate() {
            let mut rng = stream(seed, &format!("step-dpo/{k}"));
            for t in 0..ex.trajectory.len() {
                let mut h = HistoryState::at(ex.task.context_id, &ex.trajectory, t);
                let logged = ex.trajectory.steps[t].action;
                let mut alt = None;
                for _ in 0..MAX_REDRAWS {
                    let (a, _) = theta0.sample_action(&h, ex.temperature, &mut rng).unwrap();
                    if a != logged {
                        alt = Some(a);
                        break;
                    }
                }
                let Some(a) = alt else { continue };
                let (y, _) = e.user_response(&ex.task, &h, a, &mut rng).unwrap();
                h.push(a, y);
                let mut steps: Vec<Step> = h
                    .prefix
                    .iter()
                    .map(|&(a, y)| Step {
                        action: a,
                        behavior_action_logprob: -1.0,
                        observation: y,
                        observation_logprob: 0.0,
                    })
                    .collect();
                while !e.is_terminal(&ex.task, &h) {
                    let (a2, _) = theta0.sample_action(&h, ex.temperature, &mut rng).unwrap();
                    let (y2, _) = e.user_response(&ex.task, &h, a2, &mut rng).unwrap();
                    h.push(a2, y2);
                    steps.push(Step {
                        action: a2,
                        behavior_action_logprob: -1.0,
                        observation: y2,
                        observation_logprob: 0.0,
                    });
                }
                let tr = crate::types::Trajectory {
                    terminated_early: steps.len() < ex.task.horizon,
                    steps,
                };
                let r = spec.reward(e, &ex.task, &tr).unwrap();
                if r > ex.reward_raw {
                    out.push((k, t, a, logged));
                } else if r < ex.reward_raw {
                    out.push((k, t, logged, a));
                }
            }
        }
        out
    }

    #[test]
    fn step_pairs_match_seeded_replay() {
        let e = env();
        let spec = RewardSpec::exact_match();
        let d = logged(40, 6, &e, &spec);
        let theta0 = PolicyParams::uniform_tabular(&e).unwrap();
        let cf = Counterfactual {
            theta0: &theta0,
            env: &e,
            reward: &spec,
            seed: 11,
        };
        let pairs = step_dpo_pairs(&d, &cf).unwrap();
        let got: Vec<_> = pairs
            .iter()
            .map(|p| (p.example, p.step, p.winner_action, p.loser_action))
            .collect();
        assert_eq!(got, replay(&d, &theta0, &e, &spec, 11));
        assert!(!pairs.is_empty());
        for k in examples_with_pairs(&pairs) {
            assert!(pairs.iter().filter(|p| p.example == k).count() <= 3);
        }
        for p in &pairs {
            assert_ne!(p.winner_action, p.loser_action);
            assert_ne!(p.logged_reward, p.alternative_reward);
        }
    }
}
