//! Experiment configuration files.
//!
//! ```toml
//! master_seed = 7
//! out_dir = "runs/reference"
//! policy = "tabular"            # or "linear"
//! behavior_scale = 0.0          # 0 = uniform behavior policy
//!
//! [env]
//! contexts = 2
//! intents = 3
//! horizon = 3
//! [env.family]
//! kind = "hidden_intent_qa"
//! clarifiers = 2
//! values = 2
//!
//! [tasks]
//! train = 400
//!
//! [reward]
//! mode = "exact_match"
//!
//! [datagen]
//! m = 3
//!
//! [train]
//! epochs = 4
//!
//! [train_per_method.dpo]
//! epochs = 2
//! dpo_beta = 0.5
//!
//! [eval]
//! episodes_per_task = 200
//!
//! [verify]
//! random_thetas = 100
//! ```
//!
//! Seeds inside `datagen`, `train` and `eval` are derived from
//! `master_seed`; values written there are overwritten.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DatagenConfig;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::evalreport::EvalConfig;
use crate::policy::PolicyParams;
use crate::reward::RewardSpec;
use crate::seed::{derive_seed, stream};
use crate::trainers::{Algorithm, TrainConfig};
use crate::types::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Number of training tasks drawn at random.
    pub train: usize,
    /// Number of evaluation tasks; every (context, intent) pair when absent.
    #[serde(default)]
    pub eval: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_random_thetas")]
    pub random_thetas: usize,
    /// Standard deviation of the random parameter draws.
    #[serde(default = "one")]
    pub theta_scale: f64,
}

fn default_random_thetas() -> usize {
    100
}

fn one() -> f64 {
    1.0
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            random_thetas: default_random_thetas(),
            theta_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "tabular")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub behavior_scale: f64,
    pub env: EnvSpec,
    pub tasks: TaskConfig,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub datagen: DatagenConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub train_per_method: BTreeMap<Algorithm, TrainConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn tabular() -> PolicyKind {
    PolicyKind::Tabular
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.effective();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills every derived seed from `master_seed`.
    pub fn effective(mut self) -> Self {
        let m = self.master_seed;
        self.datagen.master_seed = derive_seed(m, "datagen");
        self.eval.seed = derive_seed(m, "eval");
        self.train.shuffle_seed = derive_seed(m, "train");
        for (algo, t) in self.train_per_method.iter_mut() {
            t.shuffle_seed = derive_seed(m, &format!("train/{algo}"));
        }
        self
    }

    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.effective()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.reward.validate()?;
        self.datagen.validate()?;
        self.train.validate()?;
        for (algo, t) in &self.train_per_method {
            t.validate()
                .map_err(|e| Error::Config(format!("train_per_method.{algo}: {e}")))?;
        }
        if self.tasks.train == 0 {
            return Err(Error::Config("tasks.train must be >= 1".into()));
        }
        if self.tasks.eval == Some(0) {
            return Err(Error::Config("tasks.eval must be >= 1".into()));
        }
        if self.eval.episodes_per_task == 0 {
            return Err(Error::Config("eval.episodes_per_task must be >= 1".into()));
        }
        if !(self.behavior_scale.is_finite() && self.behavior_scale >= 0.0) {
            return Err(Error::Config("behavior_scale must be finite and >= 0".into()));
        }
        if !(self.verify.theta_scale.is_finite() && self.verify.theta_scale > 0.0) {
            return Err(Error::Config("verify.theta_scale must be finite and > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Training config of `algo` with its reward mode and shuffle seed set.
    pub fn train_config(&self, algo: Algorithm) -> TrainConfig {
        let base = self.train_per_method.get(&algo).unwrap_or(&self.train);
        let mut c = base.for_algorithm(algo);
        if !self.train_per_method.contains_key(&algo) {
            c.shuffle_seed = derive_seed(self.master_seed, &format!("train/{algo}"));
        }
        c
    }

    /// Untrained parameters of the configured family.
    pub fn initial_policy(&self) -> Result<PolicyParams> {
        match self.policy {
            PolicyKind::Tabular => PolicyParams::uniform_tabular(&self.env),
            PolicyKind::Linear => PolicyParams::zeros_linear(&self.env),
        }
    }

    /// The behavior policy: uniform, or a seeded random draw when
    /// `behavior_scale > 0`.
    pub fn behavior_policy(&self) -> Result<PolicyParams> {
        let p = self.initial_policy()?;
        Ok(if self.behavior_scale > 0.0 {
            p.randomized(self.behavior_scale, &mut stream(self.master_seed, "behavior"))
        } else {
            p
        })
    }

    pub fn train_tasks(&self) -> Result<Vec<TaskInstance>> {
        self.env
            .make_hidden_intent_tasks(self.tasks.train, &mut stream(self.master_seed, "tasks/train"))
    }

    pub fn eval_tasks(&self) -> Result<Vec<TaskInstance>> {
        match self.tasks.eval {
            None => Ok(self.env.all_tasks()),
            Some(n) => {
                let mut ts = self
                    .env
                    .make_hidden_intent_tasks(n, &mut stream(self.master_seed, "tasks/eval"))?;
                for t in &mut ts {
                    t.task_id = format!("eval-{}", t.task_id);
                }
                Ok(ts)
            }
        }
    }
}
