//! Acceptance suite: one PASS/FAIL line per criterion, tolerances and time
//! budgets fixed below. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clarify_core::datagen::{attach_standardized, generate_dataset, DatagenConfig};
use clarify_core::dataset::Dataset;
use clarify_core::env::EnvSpec;
use clarify_core::objectives::{
    exact_ips_value, exact_value, grad_example, gradient_variance, greedy_maximizer, ips_value,
    verify_lower_bound, verify_two_sided_bound, ExactSupport,
};
use clarify_core::policy::{PolicyParams, StateTable};
use clarify_core::reward::RewardSpec;
use clarify_core::trainers::{
    epoch_order, train_refit, train_swift, train_threshold_sft, Algorithm, LrSchedule, TrainConfig,
};
use clarify_core::types::{HistoryState, LoggedExample, TaskInstance};

const EXACT_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-5;
const SCORE_TOL: f64 = 1e-12;
const MC_SE: f64 = 3.0;
const MIN_VARIANCE_RATIO: f64 = 10.0;
const MIN_IMPROVEMENT: f64 = 0.10;
const SWIFT_SLACK: f64 = 0.02;

/// Training schedule used for the improvement and ranking criteria.
const TRAIN_EPOCHS: usize = 4;
const TRAIN_LR: f64 = 0.3;

type Criterion = (&'static str, u64, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn reference_env() -> EnvSpec {
    EnvSpec::hidden_intent(2, 3, 2, 2, 3).unwrap()
}

fn reference_support() -> ExactSupport {
    let env = reference_env();
    ExactSupport::new(&env, &RewardSpec::exact_match(), &env.all_tasks()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dataset(env: &EnvSpec, theta0: &PolicyParams, tasks: &[TaskInstance], m: usize, seed: u64) -> Dataset {
    let cfg = DatagenConfig {
        m,
        master_seed: seed,
        ..DatagenConfig::default()
    };
    generate_dataset(theta0, env, &RewardSpec::exact_match(), tasks, &cfg).unwrap()
}

fn lower_bound() -> Outcome {
    let s = reference_support();
    let env = s.env().clone();
    let base = PolicyParams::uniform_tabular(&env).unwrap();
    let mut r = rng(101);
    let mut min_slack = f64::INFINITY;
    let mut max_tight = 0.0f64;
    for _ in 0..5 {
        let theta0 = base.randomized(1.0, &mut r);
        max_tight = max_tight.max(verify_lower_bound(&theta0, &theta0, &s).unwrap().gap.abs());
        for _ in 0..100 {
            let theta = base.randomized(1.0, &mut r);
            min_slack = min_slack.min(verify_lower_bound(&theta, &theta0, &s).unwrap().gap);
        }
    }
    Outcome {
        pass: min_slack >= -EXACT_TOL && max_tight <= EXACT_TOL,
        detail: format!("min slack {min_slack:.3e} over 500 pairs, |gap| at theta0 {max_tight:.1e}"),
    }
}

fn two_sided_bound() -> Outcome {
    let s = reference_support();
    let env = s.env().clone();
    let base = PolicyParams::uniform_tabular(&env).unwrap();
    let mut r = rng(202);
    let theta0 = base.randomized(0.5, &mut r);
    let std = s.standardized_under(&theta0).unwrap();
    let b = std.reward_bound();
    let at0 = verify_two_sided_bound(&theta0, &theta0, &std, Some(b)).unwrap();
    let mut min_slack = f64::INFINITY;
    for _ in 0..100 {
        let theta = base.randomized(1.0, &mut r);
        min_slack = min_slack.min(verify_two_sided_bound(&theta, &theta0, &std, Some(b)).unwrap().gap);
    }
    Outcome {
        pass: min_slack >= -EXACT_TOL && at0.c2 == 0.0 && at0.satisfied,
        detail: format!("b = {b:.4}, min slack {min_slack:.3e} over 100 policies, C2 at theta0 = {}", at0.c2),
    }
}

fn importance_weighting() -> Outcome {
    let s = reference_support();
    let env = s.env().clone();
    let base = PolicyParams::uniform_tabular(&env).unwrap();
    let mut r = rng(303);
    let theta0 = base.randomized(0.5, &mut r);
    let tasks = env.all_tasks();
    let m = 100_000usize.div_ceil(tasks.len());
    let data = dataset(&env, &theta0, &tasks, m, 303);
    let mut worst_identity = 0.0f64;
    let mut worst_z = 0.0f64;
    for _ in 0..10 {
        let theta = base.randomized(0.5, &mut r);
        let v = exact_value(&theta, &s).unwrap();
        worst_identity = worst_identity.max((exact_ips_value(&theta, &theta0, &s).unwrap() - v).abs());
        let (est, se) = ips_value(&data, &theta, None).unwrap();
        worst_z = worst_z.max((est - v).abs() / se);
    }
    Outcome {
        pass: worst_identity <= EXACT_TOL && worst_z <= MC_SE,
        detail: format!(
            "identity error {worst_identity:.1e}, worst |MC - V| = {worst_z:.2} SE over {} rollouts",
            data.len()
        ),
    }
}

fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    let diff = g.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(theta: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..theta.len())
        .map(|j| {
            let mut v = theta.values().to_vec();
            v[j] += h;
            let up = f(&theta.with_values(v.clone()).unwrap());
            v[j] -= 2.0 * h;
            let down = f(&theta.with_values(v).unwrap());
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn gradients() -> Outcome {
    let env = reference_env();
    let states = StateTable::reachable(&env).unwrap().states().to_vec();
    let families = [
        PolicyParams::uniform_tabular(&env).unwrap(),
        PolicyParams::zeros_linear(&env).unwrap(),
    ];
    let data = dataset(&env, &families[0], &env.all_tasks(), 10, 404);
    let data = attach_standardized(&data).unwrap();
    let mut r = rng(404);
    let (mut worst_rel, mut worst_score) = (0.0f64, 0.0f64);
    for probe in 0..100 {
        let theta = families[probe % 2].randomized(1.0, &mut r);
        if probe < 50 {
            let s: &HistoryState = &states[r.random_range(0..states.len())];
            let a = r.random_range(0..env.action_count());
            let g = theta.grad_action_logprob(s, a).unwrap();
            let fd = central_difference(&theta, |t| t.action_logprob(s, a).unwrap());
            worst_rel = worst_rel.max(rel_err(&g, &fd));
            let lps = theta.log_probs(s).unwrap();
            let mut score = vec![0.0; theta.len()];
            for (b, lp) in lps.iter().enumerate() {
                for (acc, x) in score.iter_mut().zip(theta.grad_action_logprob(s, b).unwrap()) {
                    *acc += lp.exp() * x;
                }
            }
            worst_score = worst_score.max(score.iter().fold(0.0, |m, x| m.max(x.abs())));
        } else {
            let ex: &LoggedExample = &data.examples()[r.random_range(0..data.len())];
            let standardized = probe % 4 >= 2;
            let w = ex.weight(standardized).unwrap();
            let g = grad_example(&theta, ex, standardized).unwrap();
            let fd = central_difference(&theta, |t| {
                w * t.trajectory_logprob(&env, &ex.task, &ex.trajectory, false).unwrap()
            });
            worst_rel = worst_rel.max(rel_err(&g, &fd));
        }
    }
    Outcome {
        pass: worst_rel <= GRAD_REL_TOL && worst_score <= SCORE_TOL,
        detail: format!("worst relative error {worst_rel:.2e} over 100 probes, max |E[score]| {worst_score:.1e}"),
    }
}

fn unit_reward_sft() -> Outcome {
    let env = reference_env();
    let theta0 = PolicyParams::uniform_tabular(&env).unwrap();
    let tasks = env.make_hidden_intent_tasks(50, &mut rng(505)).unwrap();
    let data = dataset(&env, &theta0, &tasks, 3, 505)
        .map_examples(|x| LoggedExample {
            reward_raw: 1.0,
            reward_std: None,
            ..x.clone()
        })
        .unwrap();
    let cfg = TrainConfig {
        lr: 0.3,
        shuffle_seed: 505,
        ..TrainConfig::default()
    };
    let trained = train_refit(&theta0, &data, &cfg, None).unwrap().theta;

    let mut theta = theta0.clone();
    for (i, k) in epoch_order(cfg.shuffle_seed, 0, data.len()).into_iter().enumerate() {
        let ex = &data.examples()[k];
        let mut g = vec![0.0; theta.len()];
        let mut h = HistoryState::initial(ex.task.context_id);
        for step in &ex.trajectory.steps {
            for (acc, x) in g.iter_mut().zip(theta.grad_action_logprob(&h, step.action).unwrap()) {
                *acc += x;
            }
            h.push(step.action, step.observation);
        }
        let alpha = match cfg.schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::InverseSqrt => cfg.lr / ((i + 1) as f64).sqrt(),
        };
        for (t, d) in theta.values_mut().iter_mut().zip(&g) {
            *t += alpha * d;
        }
    }
    let mismatched = trained
        .values()
        .iter()
        .zip(theta.values())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Outcome {
        pass: mismatched == 0,
        detail: format!("{mismatched} of {} parameters differ bitwise", theta.len()),
    }
}

fn with_rewards(data: &Dataset, rewards: &[f64]) -> Dataset {
    let mut i = 0;
    let examples = data
        .examples()
        .iter()
        .map(|x| {
            i += 1;
            LoggedExample {
                reward_raw: rewards[i - 1],
                reward_std: None,
                ..x.clone()
            }
        })
        .collect();
    attach_standardized(&Dataset::unscaled(examples).unwrap()).unwrap()
}

fn variance_and_shift() -> Outcome {
    let env = reference_env();
    let theta0 = PolicyParams::uniform_tabular(&env).unwrap();
    let tasks = env.make_hidden_intent_tasks(200, &mut rng(606)).unwrap();
    let base = dataset(&env, &theta0, &tasks, 4, 606);
    let mut r = rng(606);
    let rewards: Vec<f64> = (0..base.len()).map(|_| r.random_range(9.0..=10.0)).collect();
    let high = with_rewards(&base, &rewards);
    let ratio = gradient_variance(&theta0, &high, false).unwrap() / gradient_variance(&theta0, &high, true).unwrap();

    let low = with_rewards(&base, &rewards.iter().map(|x| x - 9.0).collect::<Vec<_>>());
    let cfg = TrainConfig {
        lr: 0.1,
        shuffle_seed: 606,
        ..TrainConfig::default()
    };
    let max_diff = |a: &PolicyParams, b: &PolicyParams| {
        a.values().iter().zip(b.values()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    let swift_diff = max_diff(
        &train_swift(&theta0, &low, &cfg.for_algorithm(Algorithm::Swift), None).unwrap().theta,
        &train_swift(&theta0, &high, &cfg.for_algorithm(Algorithm::Swift), None).unwrap().theta,
    );
    let refit_diff = max_diff(
        &train_refit(&theta0, &low, &cfg, None).unwrap().theta,
        &train_refit(&theta0, &high, &cfg, None).unwrap().theta,
    );
    Outcome {
        pass: ratio > MIN_VARIANCE_RATIO && swift_diff <= EXACT_TOL && refit_diff > 1e-3,
        detail: format!(
            "variance ratio {ratio:.1}, shift changes SWiFt by {swift_diff:.1e} and ReFit by {refit_diff:.3}"
        ),
    }
}

struct Trained {
    start: f64,
    refit: f64,
    swift: f64,
    threshold: f64,
    epochs_to_gain: (Option<usize>, Option<usize>),
}

fn train_all(seed: u64) -> Trained {
    let s = reference_support();
    let env = s.env().clone();
    let theta0 = PolicyParams::uniform_tabular(&env).unwrap();
    let tasks = env.make_hidden_intent_tasks(400, &mut rng(seed)).unwrap();
    let data = attach_standardized(&dataset(&env, &theta0, &tasks, 3, seed)).unwrap();
    let cfg = TrainConfig {
        epochs: TRAIN_EPOCHS,
        lr: TRAIN_LR,
        schedule: LrSchedule::Constant,
        shuffle_seed: seed,
        ..TrainConfig::default()
    };
    let start = exact_value(&theta0, &s).unwrap();
    let refit = train_refit(&theta0, &data, &cfg, Some(&s)).unwrap();
    let swift = train_swift(&theta0, &data, &cfg.for_algorithm(Algorithm::Swift), Some(&s)).unwrap();
    let threshold = train_threshold_sft(&theta0, &data, &cfg, Some(&s)).unwrap();
    let first_gain = |trace: &[f64]| trace.iter().position(|v| v - start >= MIN_IMPROVEMENT).map(|e| e + 1);
    let last = |t: &Option<Vec<f64>>| *t.as_ref().unwrap().last().unwrap();
    Trained {
        start,
        refit: last(&refit.value_trace),
        swift: last(&swift.value_trace),
        threshold: last(&threshold.value_trace),
        epochs_to_gain: (
            first_gain(refit.value_trace.as_ref().unwrap()),
            first_gain(swift.value_trace.as_ref().unwrap()),
        ),
    }
}

fn improvement() -> Outcome {
    let t = train_all(707);
    let ok = |e: Option<usize>| e.is_some_and(|e| e <= TRAIN_EPOCHS);
    Outcome {
        pass: ok(t.epochs_to_gain.0) && ok(t.epochs_to_gain.1) && t.swift >= t.refit - SWIFT_SLACK,
        detail: format!(
            "V: uniform {:.4}, ReFit {:.4} (gain reached at epoch {:?}), SWiFt {:.4} (epoch {:?})",
            t.start, t.refit, t.epochs_to_gain.0, t.swift, t.epochs_to_gain.1
        ),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn ranking() -> Outcome {
    let runs: Vec<Trained> = (0..5).map(|i| train_all(800 + i)).collect();
    let start = runs[0].start;
    let thr = median(runs.iter().map(|t| t.threshold).collect());
    let refit = median(runs.iter().map(|t| t.refit).collect());
    let swift = median(runs.iter().map(|t| t.swift).collect());
    Outcome {
        pass: thr > start && refit >= thr && swift >= thr,
        detail: format!("median V over 5 seeds: uniform {start:.4}, threshold-SFT {thr:.4}, ReFit {refit:.4}, SWiFt {swift:.4}"),
    }
}

/// Value of a deterministic policy given as a state → action table, by
/// direct summation over the leaves it can produce.
fn deterministic_value(choices: &BTreeMap<HistoryState, usize>, support: &ExactSupport) -> f64 {
    let mut total = 0.0;
    for t in support.tasks() {
        for leaf in &t.leaves {
            let mut h = HistoryState::initial(t.task.context_id);
            let follows = leaf.trajectory.steps.iter().all(|s| {
                let ok = choices.get(&h) == Some(&s.action);
                h.push(s.action, s.observation);
                ok
            });
            if follows {
                total += t.weight * leaf.obs_logprob.exp() * leaf.reward;
            }
        }
    }
    total
}

fn maximizer_invariance() -> Outcome {
    let base = reference_support();
    let contexts = 2;
    let mut r = rng(909);
    let (mut worst_value, mut worst_shift) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let raw = base.map_rewards(|_, _, _| r.random::<f64>());
        let mu: Vec<f64> = (0..contexts).map(|_| r.random_range(0.0..2.0)).collect();
        let sigma: Vec<f64> = (0..contexts).map(|_| r.random_range(0.1..3.0)).collect();
        let std = raw
            .standardized(|task| (mu[task.context_id], sigma[task.context_id]))
            .unwrap();
        let greedy_raw = greedy_maximizer(&raw).unwrap();
        let greedy_std = greedy_maximizer(&std).unwrap();
        let std_of_raw_greedy = deterministic_value(&greedy_raw.choices, &std);
        worst_value = worst_value.max((std_of_raw_greedy - greedy_std.value).abs());

        let scaled = raw.map_rewards(|task, _, x| x / sigma[task.context_id]);
        let offset: f64 = raw
            .tasks()
            .iter()
            .map(|t| t.weight * mu[t.task.context_id] / sigma[t.task.context_id])
            .sum();
        let predicted = deterministic_value(&greedy_raw.choices, &scaled) - offset;
        worst_shift = worst_shift.max((std_of_raw_greedy - predicted).abs());
    }
    Outcome {
        pass: worst_value <= EXACT_TOL && worst_shift <= EXACT_TOL,
        detail: format!(
            "raw maximizer vs standardized optimum {worst_value:.1e}, offset identity error {worst_shift:.1e}"
        ),
    }
}

const E2E_CONFIG: &str = r#"
master_seed = 2024
out_dir = "unused"

[env]
contexts = 2
intents = 3
horizon = 3
[env.family]
kind = "hidden_intent_qa"
clarifiers = 2
values = 2

[tasks]
train = 400

[datagen]
m = 3

[train]
epochs = 4

[eval]
episodes_per_task = 200

[verify]
random_thetas = 20
"#;

fn pipeline(config: &Path, out: &Path) -> bool {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    let mut steps: Vec<Vec<&str>> = vec![vec!["datagen"]];
    for algo in ["refit", "swift", "threshold-sft", "dpo", "step-dpo"] {
        steps.push(vec!["train", "--algo", algo]);
    }
    steps.push(vec!["report"]);
    steps.push(vec!["verify-bounds"]);
    steps.into_iter().all(|mut args| {
        args.extend(["--config", c, "--out", o]);
        args.insert(0, "clarify");
        clarify_core::cli::run(args) == 0
    })
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, E2E_CONFIG).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !(pipeline(&config, &a) && pipeline(&config, &b)) {
        return Outcome {
            pass: false,
            detail: "a pipeline command exited non-zero".into(),
        };
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    Outcome {
        pass: ta.len() >= 15 && ta.keys().eq(tb.keys()) && differing.is_empty(),
        detail: format!("{} artifacts per run, differing: {differing:?}", ta.len()),
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("offline lower bound", 30, lower_bound),
        ("standardized two-sided bound", 60, two_sided_bound),
        ("importance-weighted value", 120, importance_weighting),
        ("analytic gradients", 60, gradients),
        ("unit-reward ReFit equals SFT", 60, unit_reward_sft),
        ("variance reduction and shift invariance", 60, variance_and_shift),
        ("improvement from uniform", 300, improvement),
        ("ranking against threshold-SFT", 600, ranking),
        ("maximizer invariance under standardization", 60, maximizer_invariance),
        ("end-to-end reproducibility", 900, reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = check();
        let elapsed = t0.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2} {name}: {} ({:.1}s of {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
