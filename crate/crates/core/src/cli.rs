//! The `clarify` command line.
//!
//! Every command reads an experiment config, validates it together with its
//! inputs, and only then writes into the output directory:
//!
//! ```text
//! <out>/dataset.jsonl            datagen
//! <out>/behavior.json            datagen (behavior policy checkpoint)
//! <out>/checkpoints/<algo>.json  train
//! <out>/traces/<algo>.csv        train
//! <out>/eval.json                eval
//! <out>/report.{csv,md}          report
//! <out>/bounds.json              verify-bounds
//! <out>/manifests/*.json         provenance for each command
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::datagen::{attach_standardized, generate_dataset};
use crate::dataset::{read_dataset, to_jsonl, Dataset};
use crate::env::MAX_ENUMERATED_LEAVES;
use crate::error::{Error, Result};
use crate::evalreport::{compare, emit_report, ComparisonTable, ReportFormat};
use crate::objectives::{verify_lower_bound, verify_two_sided_bound, BoundReport, ExactSupport};
use crate::policy::PolicyParams;
use crate::seed::stream;
use crate::trainers::{
    train_dpo, train_refit, train_step_dpo, train_swift, train_threshold_sft, Algorithm,
    Counterfactual, TrainResult,
};

#[derive(Debug, Parser)]
#[command(name = "clarify", version, about = "Offline reward-weighted training of clarification policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Caps worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Print the config after defaults and seed derivation, then exit.
    #[arg(long)]
    pub print_effective_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the behavior policy and write the logged dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one algorithm on the logged dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// One of refit, swift, threshold-sft, dpo, step-dpo.
        #[arg(long)]
        algo: String,
        /// Dataset path; defaults to `<out>/dataset.jsonl`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate trained policies on the evaluation tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to evaluate; defaults to every file in `<out>/checkpoints`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Check the offline lower bounds exactly on random and trained policies.
    VerifyBounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Write CSV and markdown comparison tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Datagen { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::VerifyBounds { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_master_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if common.print_effective_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Datagen { .. } => cmd_datagen(&cfg),
        Command::Train { algo, dataset, .. } => {
            let algo: Algorithm = algo.parse()?;
            cmd_train(&cfg, algo, dataset.as_deref())
        }
        Command::Eval { checkpoint, .. } => cmd_eval(&cfg, checkpoint).map(|_| ()),
        Command::VerifyBounds { checkpoint, .. } => cmd_verify_bounds(&cfg, checkpoint),
        Command::Report { checkpoint, .. } => cmd_report(&cfg, checkpoint),
    })
}

// ── helpers ───────────────────────────────────────────────────────────────

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(cfg: &ExperimentConfig, name: &str, outputs: &[&Path], extra: serde_json::Value) -> Result<()> {
    let mut files = serde_json::Map::new();
    for p in outputs {
        let rel = p.strip_prefix(&cfg.out_dir).unwrap_or(p);
        files.insert(rel.display().to_string(), json!(sha256_file(p)?));
    }
    let manifest = json!({
        "command": name,
        "config_hash": cfg.hash(),
        "master_seed": cfg.master_seed,
        "outputs": files,
        "details": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&cfg.out_dir.join("manifests").join(format!("{name}.json")), text.as_bytes())
}

fn exact_support(cfg: &ExperimentConfig) -> Result<Option<ExactSupport>> {
    if cfg.env.leaf_bound(cfg.env.horizon) > MAX_ENUMERATED_LEAVES {
        return Ok(None);
    }
    ExactSupport::new(&cfg.env, &cfg.reward, &cfg.env.all_tasks()).map(Some)
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<(String, PolicyParams)> {
    let (theta, _) = PolicyParams::load(path)?;
    theta.check_env(&cfg.env)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no file name", path.display())))?;
    Ok((name, theta))
}

fn checkpoints(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Result<Vec<(String, PolicyParams)>> {
    if !explicit.is_empty() {
        return explicit.iter().map(|p| load_checkpoint(cfg, p)).collect();
    }
    let dir = cfg.out_dir.join("checkpoints");
    let mut paths = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.extension().is_some_and(|x| x == "json") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| load_checkpoint(cfg, p)).collect()
}

// ── commands ──────────────────────────────────────────────────────────────

pub fn cmd_datagen(cfg: &ExperimentConfig) -> Result<()> {
    let theta0 = cfg.behavior_policy()?;
    let tasks = cfg.train_tasks()?;
    let mut dataset = generate_dataset(&theta0, &cfg.env, &cfg.reward, &tasks, &cfg.datagen)?;
    let standardized = cfg.datagen.m >= 2;
    if standardized {
        dataset = attach_standardized(&dataset)?;
    }
    let data_path = cfg.out_dir.join("dataset.jsonl");
    let behavior_path = cfg.out_dir.join("behavior.json");
    let hash = cfg.hash();
    let behavior = theta0.to_checkpoint_json(Some(&hash))?;
    write_file(&data_path, to_jsonl(&dataset)?.as_bytes())?;
    write_file(&behavior_path, behavior.as_bytes())?;
    write_manifest(
        cfg,
        "datagen",
        &[&data_path, &behavior_path],
        json!({
            "tasks": tasks.len(),
            "examples": dataset.len(),
            "groups": dataset.group_count(),
            "standardized": standardized,
        }),
    )?;
    println!(
        "wrote {} examples in {} groups to {}",
        dataset.len(),
        dataset.group_count(),
        data_path.display()
    );
    Ok(())
}

/// Runs `algo` on `dataset` with the config's settings.
pub fn train_algorithm(
    cfg: &ExperimentConfig,
    algo: Algorithm,
    dataset: &Dataset,
    support: Option<&ExactSupport>,
) -> Result<TrainResult> {
    let theta0 = cfg.behavior_policy()?;
    let init = theta0.clone();
    let tc = cfg.train_config(algo);
    match algo {
        Algorithm::Refit => train_refit(&init, dataset, &tc, support),
        Algorithm::Swift => train_swift(&init, dataset, &tc, support),
        Algorithm::ThresholdSft => train_threshold_sft(&init, dataset, &tc, support),
        Algorithm::Dpo => train_dpo(&init, &theta0, dataset, &tc, support),
        Algorithm::StepDpo => {
            let cf = Counterfactual {
                theta0: &theta0,
                env: &cfg.env,
                reward: &cfg.reward,
                seed: tc.shuffle_seed,
            };
            train_step_dpo(&init, &theta0, dataset, &cf, &tc, support)
        }
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, algo: Algorithm, dataset: Option<&Path>) -> Result<()> {
    let data_path = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("dataset.jsonl"));
    let data = read_dataset(&data_path)?;
    for (i, ex) in data.examples().iter().enumerate() {
        cfg.env
            .check_trajectory(&ex.task, &ex.trajectory)
            .map_err(|e| Error::Validation {
                index: i,
                message: e.to_string(),
            })?;
    }
    let support = exact_support(cfg)?;
    let result = train_algorithm(cfg, algo, &data, support.as_ref())?;
    let ckpt = cfg.out_dir.join("checkpoints").join(format!("{algo}.json"));
    let trace = cfg.out_dir.join("traces").join(format!("{algo}.csv"));
    write_file(&ckpt, result.theta.to_checkpoint_json(Some(&cfg.hash()))?.as_bytes())?;
    write_file(&trace, result.trace_csv().as_bytes())?;
    write_manifest(
        cfg,
        &format!("train-{algo}"),
        &[&ckpt, &trace],
        json!({
            "algorithm": algo.name(),
            "dataset_sha256": sha256_file(&data_path)?,
            "updates": result.updates,
        }),
    )?;
    match result.value_trace.as_ref().and_then(|v| v.last()) {
        Some(v) => println!("{algo}: {} updates, exact value {v:.6}", result.updates),
        None => println!("{algo}: {} updates", result.updates),
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    config_hash: String,
    table: ComparisonTable,
}

pub fn cmd_eval(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Result<ComparisonTable> {
    let mut methods = vec![("behavior".to_string(), cfg.behavior_policy()?)];
    methods.extend(checkpoints(cfg, explicit)?);
    let tasks = cfg.eval_tasks()?;
    let table = compare(&methods, &cfg.env, &cfg.reward, &tasks, &cfg.eval)?;
    let path = cfg.out_dir.join("eval.json");
    let file = EvalFile {
        config_hash: cfg.hash(),
        table: table.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("table serializes") + "\n";
    write_file(&path, text.as_bytes())?;
    write_manifest(cfg, "eval", &[&path], json!({ "methods": methods.len(), "tasks": tasks.len() }))?;
    print!("{}", table.to_markdown());
    Ok(table)
}

pub fn cmd_report(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Result<()> {
    let table = cmd_eval(cfg, explicit)?;
    let csv = cfg.out_dir.join("report.csv");
    let md = cfg.out_dir.join("report.md");
    emit_report(&table, &csv, ReportFormat::Csv)?;
    emit_report(&table, &md, ReportFormat::Markdown)?;
    write_manifest(cfg, "report", &[&csv, &md], json!({}))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BoundEntry {
    pub label: String,
    pub lower_bound: BoundReport,
    pub standardized: BoundReport,
}

pub fn cmd_verify_bounds(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Result<()> {
    let theta0 = cfg.behavior_policy()?;
    let support = ExactSupport::new(&cfg.env, &cfg.reward, &cfg.env.all_tasks())?;
    let std_support = support.standardized_under(&theta0)?;
    let mut targets = vec![("theta0".to_string(), theta0.clone())];
    let mut rng = stream(cfg.master_seed, "verify");
    for i in 0..cfg.verify.random_thetas {
        targets.push((format!("random-{i:03}"), theta0.randomized(cfg.verify.theta_scale, &mut rng)));
    }
    targets.extend(checkpoints(cfg, explicit)?);
    let entries = targets
        .iter()
        .map(|(label, theta)| {
            Ok(BoundEntry {
                label: label.clone(),
                lower_bound: verify_lower_bound(theta, &theta0, &support)?,
                standardized: verify_two_sided_bound(theta, &theta0, &std_support, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !(e.lower_bound.satisfied && e.standardized.satisfied))
        .map(|e| e.label.as_str())
        .collect();
    let path = cfg.out_dir.join("bounds.json");
    let doc = json!({
        "config_hash": cfg.hash(),
        "all_satisfied": failed.is_empty(),
        "reports": entries,
    });
    write_file(&path, (serde_json::to_string_pretty(&doc).expect("reports serialize") + "\n").as_bytes())?;
    write_manifest(cfg, "verify-bounds", &[&path], json!({ "policies": entries.len() }))?;
    if failed.is_empty() {
        println!("all {} bound checks satisfied", entries.len());
        Ok(())
    } else {
        Err(Error::BoundViolated(format!("written to {}; failing: {}", path.display(), failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_dataset;

    const CONFIG: &str = r#"
master_seed = 3
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
train = 30

[eval]
episodes_per_task = 20

[verify]
random_thetas = 5
"#;

    fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.toml");
        fs::write(&cfg, text).unwrap();
        (dir, cfg)
    }

    fn clarify(args: &[&str]) -> i32 {
        let mut v = vec!["clarify"];
        v.extend_from_slice(args);
        run(v)
    }

    #[test]
    fn full_pipeline_and_exit_codes() {
        let (dir, cfg) = setup(CONFIG);
        let out = dir.path().join("out");
        let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
        assert_eq!(clarify(&["datagen", "--config", c, "--out", o]), 0);
        for algo in ["refit", "swift", "threshold-sft", "dpo", "step-dpo"] {
            assert_eq!(clarify(&["train", "--config", c, "--out", o, "--algo", algo]), 0, "{algo}");
        }
        assert_eq!(clarify(&["train", "--config", c, "--out", o, "--algo", "ppo"]), 1);
        assert_eq!(clarify(&["report", "--config", c, "--out", o, "--jobs", "2"]), 0);
        assert_eq!(clarify(&["verify-bounds", "--config", c, "--out", o]), 0);
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(out.join("manifests/train-step-dpo.json").exists());
        assert_eq!(clarify(&["datagen", "--config", "/nonexistent.toml"]), 2);
        assert_eq!(clarify(&["datagen"]), 1);
        assert_eq!(clarify(&["--help"]), 0);
    }

    #[test]
    fn validation_failure_writes_nothing() {
        let (dir, cfg) = setup(&CONFIG.replace("[tasks]", "[datagen]\nm = 0\n\n[tasks]"));
        let out = dir.path().join("out");
        assert_eq!(clarify(&["datagen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
        assert!(!out.exists());
    }

    #[test]
    fn swift_without_standardized_rewards_names_the_fix() {
        let (dir, cfg) = setup(&CONFIG.replace("[tasks]", "[datagen]\nm = 1\n\n[tasks]"));
        let out = dir.path().join("out");
        let mut c = ExperimentConfig::load(&cfg).unwrap();
        c.out_dir = out.clone();
        cmd_datagen(&c).unwrap();
        let err = cmd_train(&c, Algorithm::Swift, None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("attach_standardized"), "{err}");
    }

    #[test]
    fn non_enumerable_env_is_a_capability_error() {
        let (dir, cfg) = setup(&CONFIG.replace("horizon = 3", "horizon = 12").replace("out_dir", "policy = \"linear\"\nout_dir"));
        let out = dir.path().join("out");
        assert_eq!(
            clarify(&["verify-bounds", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
            3
        );
    }

    #[test]
    fn refit_on_zero_rewards_keeps_the_initial_policy() {
        let (dir, cfg) = setup(CONFIG);
        let mut c = ExperimentConfig::load(&cfg).unwrap();
        c.out_dir = dir.path().join("out");
        cmd_datagen(&c).unwrap();
        let path = c.out_dir.join("dataset.jsonl");
        let zero = read_dataset(&path)
            .unwrap()
            .map_examples(|x| crate::types::LoggedExample {
                reward_raw: 0.0,
                reward_std: Some(0.0),
                ..x.clone()
            })
            .unwrap();
        write_dataset(&zero, &path).unwrap();
        cmd_train(&c, Algorithm::Refit, None).unwrap();
        let (theta, hash) = PolicyParams::load(c.out_dir.join("checkpoints/refit.json")).unwrap();
        assert_eq!(theta, c.behavior_policy().unwrap());
        assert_eq!(hash.unwrap(), c.hash());
    }
}
