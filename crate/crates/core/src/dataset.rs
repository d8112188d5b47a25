//! Logged datasets and their JSONL form.
//!
//! One record per line:
//!
//! ```text
//! {"task_id": str, "context_id": int, "hidden_intent": int, "horizon": int,
//!  "group_id": str, "temperature": float, "seed": int,
//!  "steps": [{"a": int, "lp_a": float, "y": int, "lp_y": float}],
//!  "reward_raw": float, "reward_std": float|null}
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every `f64` bit-for-bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LoggedExample, RewardScale, Step, TaskInstance, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LoggedExample>,
    groups: BTreeMap<String, Vec<usize>>,
    scale: RewardScale,
}

impl Dataset {
    /// Builds a dataset whose rewards are post-rescale, in `[0, 1]`.
    pub fn new(examples: Vec<LoggedExample>) -> Result<Self> {
        Self::with_scale(examples, RewardScale::Unit)
    }

    /// Builds a dataset whose rewards are only required to be non-negative.
    /// Such datasets exist for variance diagnostics and cannot be written.
    pub fn unscaled(examples: Vec<LoggedExample>) -> Result<Self> {
        Self::with_scale(examples, RewardScale::Unscaled)
    }

    fn with_scale(examples: Vec<LoggedExample>, scale: RewardScale) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (index, ex) in examples.iter().enumerate() {
            ex.check(scale)
                .map_err(|message| Error::Validation { index, message })?;
            let members = groups.entry(ex.group_id.clone()).or_default();
            if let Some(&first) = members.first() {
                let expected = &examples[first].task.task_id;
                if &ex.task.task_id != expected {
                    return Err(Error::Validation {
                        index,
                        message: format!(
                            "group {} mixes tasks {} and {}",
                            ex.group_id, expected, ex.task.task_id
                        ),
                    });
                }
            }
            members.push(index);
        }
        Ok(Self {
            examples,
            groups,
            scale,
        })
    }

    pub fn examples(&self) -> &[LoggedExample] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<LoggedExample> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn scale(&self) -> RewardScale {
        self.scale
    }

    /// Indices of each group's members in stored order, keyed by group id.
    pub fn group_indices(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn is_standardized(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.reward_std.is_some())
    }

    /// Rebuilds the dataset with the same scale after editing examples.
    pub fn map_examples(
        &self,
        f: impl FnMut(&LoggedExample) -> LoggedExample,
    ) -> Result<Self> {
        Self::with_scale(self.examples.iter().map(f).collect(), self.scale)
    }
}

/// Groups examples by `group_id`. Order within a group follows the dataset.
pub fn group_by_task(dataset: &Dataset) -> BTreeMap<String, Vec<&LoggedExample>> {
    dataset
        .groups
        .iter()
        .map(|(k, idx)| (k.clone(), idx.iter().map(|&i| &dataset.examples[i]).collect()))
        .collect()
}

// ── JSONL records ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    a: usize,
    lp_a: f64,
    y: usize,
    lp_y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    task_id: String,
    context_id: usize,
    hidden_intent: usize,
    horizon: usize,
    group_id: String,
    temperature: f64,
    seed: u64,
    steps: Vec<StepRecord>,
    reward_raw: f64,
    reward_std: Option<f64>,
}

impl From<&LoggedExample> for ExampleRecord {
    fn from(ex: &LoggedExample) -> Self {
        Self {
            task_id: ex.task.task_id.clone(),
            context_id: ex.task.context_id,
            hidden_intent: ex.task.hidden_intent,
            horizon: ex.task.horizon,
            group_id: ex.group_id.clone(),
            temperature: ex.temperature,
            seed: ex.seed,
            steps: ex
                .trajectory
                .steps
                .iter()
                .map(|s| StepRecord {
                    a: s.action,
                    lp_a: s.behavior_action_logprob,
                    y: s.observation,
                    lp_y: s.observation_logprob,
                })
                .collect(),
            reward_raw: ex.reward_raw,
            reward_std: ex.reward_std,
        }
    }
}

impl From<ExampleRecord> for LoggedExample {
    fn from(r: ExampleRecord) -> Self {
        // An episode shorter than its horizon can only have stopped early.
        let terminated_early = r.steps.len() < r.horizon;
        Self {
            task: TaskInstance {
                task_id: r.task_id,
                context_id: r.context_id,
                hidden_intent: r.hidden_intent,
                horizon: r.horizon,
            },
            trajectory: Trajectory {
                steps: r
                    .steps
                    .into_iter()
                    .map(|s| Step {
                        action: s.a,
                        behavior_action_logprob: s.lp_a,
                        observation: s.y,
                        observation_logprob: s.lp_y,
                    })
                    .collect(),
                terminated_early,
            },
            reward_raw: r.reward_raw,
            reward_std: r.reward_std,
            group_id: r.group_id,
            temperature: r.temperature,
            seed: r.seed,
        }
    }
}

/// Serializes the dataset to a string in the JSONL format.
pub fn to_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for (index, ex) in dataset.examples.iter().enumerate() {
        ex.check(RewardScale::Unit)
            .map_err(|message| Error::Validation { index, message })?;
        let line = serde_json::to_string(&ExampleRecord::from(ex)).map_err(|e| Error::Validation {
            index,
            message: e.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL text. Blank lines are ignored; line numbers are 1-based.
pub fn from_jsonl(text: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_line(line, i + 1)?);
    }
    Dataset::new(examples)
}

fn parse_line(line: &str, line_no: usize) -> Result<LoggedExample> {
    use serde_json::error::Category;
    serde_json::from_str::<ExampleRecord>(line)
        .map(LoggedExample::from)
        .map_err(|e| match e.classify() {
            Category::Data => Error::Schema {
                line: line_no,
                message: e.to_string(),
            },
            _ => Error::Parse {
                line: line_no,
                message: e.to_string(),
            },
        })
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Validate everything before touching the file.
    let body = to_jsonl(dataset)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_line(&line, i + 1)?);
    }
    Dataset::new(examples)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub(crate) fn example(task: &str, r: f64, actions: &[usize]) -> LoggedExample {
        LoggedExample {
            task: TaskInstance::new(task, 0, 1, 3).unwrap(),
            trajectory: Trajectory {
                steps: actions
                    .iter()
                    .map(|&a| Step {
                        action: a,
                        behavior_action_logprob: -(3f64).ln(),
                        observation: 0,
                        observation_logprob: 0.0,
                    })
                    .collect(),
                terminated_early: actions.len() < 3,
            },
            reward_raw: r,
            reward_std: None,
            group_id: task.to_string(),
            temperature: 1.0,
            seed: 7,
        }
    }
}
