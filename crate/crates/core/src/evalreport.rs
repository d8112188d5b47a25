//! Monte Carlo evaluation, comparison tables and report files.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::reward::RewardSpec;
use crate::seed::{derive_seed, stream};
use crate::types::{HistoryState, Step, TaskInstance, Trajectory};

pub const CSV_HEADER: [&str; 7] = [
    "method",
    "accuracy",
    "accuracy_se",
    "mean_reward",
    "mean_reward_se",
    "mean_len",
    "episodes",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub accuracy_se: f64,
    pub mean_reward: f64,
    pub mean_reward_se: f64,
    pub mean_len: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_episodes")]
    pub episodes_per_task: usize,
    #[serde(default)]
    pub seed: u64,
    /// Act by argmax instead of sampling at temperature 1.
    #[serde(default)]
    pub greedy: bool,
}

fn default_episodes() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: default_episodes(),
            seed: 0,
            greedy: false,
        }
    }
}

fn greedy_rollout(theta: &PolicyParams, env: &EnvSpec, task: &TaskInstance, rng: &mut impl rand::Rng) -> Result<Trajectory> {
    let mut h = HistoryState::initial(task.context_id);
    let mut steps = Vec::new();
    while h.is_empty() || !env.is_terminal(task, &h) {
        let lps = theta.log_probs(&h)?;
        let mut a = 0;
        for (i, lp) in lps.iter().enumerate() {
            if *lp > lps[a] {
                a = i;
            }
        }
        let (y, lp_y) = env.user_response(task, &h, a, rng)?;
        steps.push(Step {
            action: a,
            behavior_action_logprob: lps[a],
            observation: y,
            observation_logprob: lp_y,
        });
        h.push(a, y);
    }
    Ok(Trajectory {
        terminated_early: steps.len() < task.horizon,
        steps,
    })
}

fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Rolls out `episodes_per_task` conversations per task. Each task draws
/// from its own stream, so results do not depend on scheduling.
pub fn evaluate(
    theta: &PolicyParams,
    env: &EnvSpec,
    reward: &RewardSpec,
    tasks: &[TaskInstance],
    cfg: &EvalConfig,
) -> Result<EvalMetrics> {
    if cfg.episodes_per_task == 0 {
        return Err(Error::invalid("episodes_per_task must be >= 1"));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("task list is empty"));
    }
    theta.check_env(env)?;
    // (correct, reward, reward², length) per task.
    let per_task: Vec<Result<(f64, f64, f64, f64)>> = tasks
        .par_iter()
        .map(|task| {
            env.check_task(task)?;
            let mut rng = stream(cfg.seed, &format!("eval/{}", task.task_id));
            let mut acc = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..cfg.episodes_per_task {
                let tr = if cfg.greedy {
                    greedy_rollout(theta, env, task, &mut rng)?
                } else {
                    crate::datagen::continue_rollout(theta, env, task, Vec::new(), 1.0, true, &mut rng)?
                };
                let r = reward.reward(env, task, &tr)?;
                acc.0 += if env.is_correct(task, &tr) { 1.0 } else { 0.0 };
                acc.1 += r;
                acc.2 += r * r;
                acc.3 += tr.len() as f64;
            }
            Ok(acc)
        })
        .collect();
    let (mut correct, mut rsum, mut rsq, mut len) = (0.0, 0.0, 0.0, 0.0);
    for r in per_task {
        let (c, s, q, l) = r?;
        correct += c;
        rsum += s;
        rsq += q;
        len += l;
    }
    let n = tasks.len() * cfg.episodes_per_task;
    // Indicators satisfy x² = x.
    let (accuracy, accuracy_se) = mean_se(correct, correct, n);
    let (mean_reward, mean_reward_se) = mean_se(rsum, rsq, n);
    Ok(EvalMetrics {
        accuracy,
        accuracy_se,
        mean_reward,
        mean_reward_se,
        mean_len: len / n as f64,
        episodes: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub best: usize,
    pub second: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<(String, EvalMetrics)>,
    /// Higher is better; ties go to the method name that sorts first.
    pub accuracy_markers: Markers,
    pub reward_markers: Markers,
}

fn markers(rows: &[(String, EvalMetrics)], key: impl Fn(&EvalMetrics) -> f64) -> Markers {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        key(&rows[b].1)
            .total_cmp(&key(&rows[a].1))
            .then_with(|| rows[a].0.cmp(&rows[b].0))
    });
    Markers {
        best: idx[0],
        second: idx.get(1).copied(),
    }
}

impl ComparisonTable {
    pub fn new(rows: Vec<(String, EvalMetrics)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("comparison table has no rows"));
        }
        let mut names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate method name {}", w[0])));
        }
        Ok(Self {
            accuracy_markers: markers(&rows, |m| m.accuracy),
            reward_markers: markers(&rows, |m| m.mean_reward),
            rows,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for (name, m) in &self.rows {
            w.write_record([
                name.clone(),
                m.accuracy.to_string(),
                m.accuracy_se.to_string(),
                m.mean_reward.to_string(),
                m.mean_reward_se.to_string(),
                m.mean_len.to_string(),
                m.episodes.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mark = |s: String, i: usize, m: &Markers| {
            if m.best == i {
                format!("**{s}**")
            } else if m.second == Some(i) {
                format!("_{s}_")
            } else {
                s
            }
        };
        let mut out = String::from(
            "Paired evaluation: every method is scored on the same task set. \
             Best in **bold**, second best in _italics_.\n\n\
             | method | accuracy | mean reward | mean length | episodes |\n\
             |---|---|---|---|---|\n",
        );
        for (i, (name, m)) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "| {} | {} | {} | {:.2} | {} |\n",
                name,
                mark(format_cell(m.accuracy, m.accuracy_se), i, &self.accuracy_markers),
                mark(format_cell(m.mean_reward, m.mean_reward_se), i, &self.reward_markers),
                m.mean_len,
                m.episodes
            ));
        }
        out
    }
}

/// `mean ± se` with four decimals each.
pub fn format_cell(mean: f64, se: f64) -> String {
    format!("{mean:.4} ± {se:.4}")
}

/// Evaluates each named policy on the shared task set. Method `name` draws
/// from the stream seeded by `derive_seed(cfg.seed, name)`.
pub fn compare(
    methods: &[(String, PolicyParams)],
    env: &EnvSpec,
    reward: &RewardSpec,
    tasks: &[TaskInstance],
    cfg: &EvalConfig,
) -> Result<ComparisonTable> {
    if methods.is_empty() {
        return Err(Error::invalid("no methods to compare"));
    }
    let mut names: Vec<&str> = methods.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate method name {}", w[0])));
    }
    let rows = methods
        .iter()
        .map(|(name, theta)| {
            let c = EvalConfig {
                seed: derive_seed(cfg.seed, name),
                ..cfg.clone()
            };
            Ok((name.clone(), evaluate(theta, env, reward, tasks, &c)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ComparisonTable::new(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn emit_report(table: &ComparisonTable, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::invalid("comparison table has no rows"));
    }
    let text = match format {
        ReportFormat::Csv => table.to_csv()?,
        ReportFormat::Markdown => table.to_markdown(),
    };
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a report CSV back into rows.
pub fn read_report_csv(text: &str) -> Result<Vec<(String, EvalMetrics)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Schema {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", CSV_HEADER[j]),
            })
        };
        out.push((
            rec[0].to_string(),
            EvalMetrics {
                accuracy: num(1)?,
                accuracy_se: num(2)?,
                mean_reward: num(3)?,
                mean_reward_se: num(4)?,
                mean_len: num(5)?,
                episodes: rec[6].parse().map_err(|e| Error::Parse {
                    line,
                    message: format!("episodes: {e}"),
                })?,
            },
        ));
    }
    Ok(out)
}
