//! The subcommands. Each returns a [`CliError`] whose kind fixes the exit
//! code: 1 for runtime failures, 2 for usage errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use motionforge::grammar::{parse_task_spec, validate_task_spec};
use motionforge::matcher::{
    class_histogram, collect_dataset, load_dataset, train_matcher, write_dataset, MatcherError, MatcherMetrics, MatcherModel,
};
use motionforge::rl::{train_run, MetricsRow, ObsMode, RewardBackend, RlError, RunEnv};
use motionforge::sim::{TaskId, TaskInstance};

use crate::config::RunConfig;
use crate::report;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Record of one command invocation, written before any work starts.
/// Only `status`, `end_unix` and `outputs` change, once, when it finishes.
pub struct Manifest {
    path: PathBuf,
    value: serde_json::Value,
}

impl Manifest {
    pub fn begin(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let value = serde_json::json!({
            "command": command,
            "version": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
            "config": cfg.to_text(),
            "start_unix": now_unix(),
            "end_unix": null,
            "status": "incomplete",
            "outputs": [],
        });
        let m = Manifest {
            path: dir.join("manifest.json"),
            value,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.value).expect("json value");
        fs::write(&self.path, text + "\n").map_err(io_at(&self.path))
    }

    pub fn finish(mut self, outputs: &[PathBuf]) -> Result<(), CliError> {
        self.value["end_unix"] = now_unix().into();
        self.value["status"] = "complete".into();
        self.value["outputs"] = outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().into();
        self.write()
    }
}

pub fn cmd_collect(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if cfg.collect.count == 0 {
        return Err(CliError::Usage("count must be positive".into()));
    }
    if cfg.collect.resolution == 0 || cfg.collect.resolution % 8 != 0 {
        return Err(CliError::Usage("resolution must be a positive multiple of 8".into()));
    }
    let mix = cfg.mix();
    if [mix.expert, mix.partial, mix.uniform].iter().any(|v| *v < 0.0) || mix.expert + mix.partial + mix.uniform <= 0.0 {
        return Err(CliError::Usage("policy mix shares must be non-negative with a positive sum".into()));
    }
    cfg.thresholds.validate().map_err(CliError::Usage)?;
    let dir = cfg.dataset_dir();
    let manifest = Manifest::begin(&dir, "collect", cfg)?;
    let task = TaskInstance::new(cfg.task);
    let samples = collect_dataset(&task, &cfg.collect).map_err(runtime)?;
    write_dataset(&dir, &samples, cfg.collect.resolution).map_err(runtime)?;
    let hist = class_histogram(&samples, task.spec.stage_count() + 1);
    println!("collected {} samples for {} into {}", samples.len(), cfg.task, dir.display());
    for (class, count) in hist.iter().enumerate() {
        println!("  class {class}: {count}");
    }
    manifest.finish(&[dir.join("samples.jsonl")])?;
    Ok(dir)
}

pub fn cmd_train_matcher(cfg: &RunConfig) -> Result<MatcherMetrics, CliError> {
    let data = cfg.dataset_dir();
    if !data.join("samples.jsonl").is_file() {
        return Err(CliError::Usage(format!(
            "no dataset at {} (run `collect` first or set --dataset)",
            data.display()
        )));
    }
    let m = &cfg.matcher;
    if m.batch == 0 || !(m.lr > 0.0) || !(m.train_fraction > 0.0 && m.train_fraction < 1.0) {
        return Err(CliError::Usage("matcher_batch, matcher_lr and train_fraction must be positive, train_fraction below 1".into()));
    }
    let dir = cfg.matcher_dir();
    let manifest = Manifest::begin(&dir, "train-matcher", cfg)?;
    let task = TaskInstance::new(cfg.task);
    let (samples, resolution) = load_dataset(&data, cfg.task).map_err(runtime)?;
    println!("training on {} samples at {resolution}px", samples.len());
    let (model, metrics) = train_matcher(&samples, &task.spec, resolution, m, |e| {
        println!(
            "epoch {:>3}  train loss {:.4}  held-out loss {:.4}  accuracy {:.4}",
            e.epoch, e.train_loss, e.heldout_loss, e.heldout_accuracy
        );
    })
    .map_err(|e| match e {
        MatcherError::NonFiniteLoss { .. } => CliError::Runtime(e.to_string()),
        other => runtime(other),
    })?;
    let ckpt = cfg.matcher_path();
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    model
        .save(
            &ckpt,
            serde_json::json!({
                "task": cfg.task.name(),
                "heldout_accuracy": metrics.final_accuracy(),
                "epochs": m.epochs,
            }),
        )
        .map_err(runtime)?;
    let csv = dir.join("metrics.csv");
    let mut text = String::from("epoch,train_loss,heldout_loss,heldout_accuracy\n");
    for e in &metrics.epochs {
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.heldout_loss, e.heldout_accuracy));
    }
    fs::write(&csv, text).map_err(io_at(&csv))?;
    println!(
        "initial loss {:.4} (ln K = {:.4}); held-out accuracy {:.4}",
        metrics.initial_loss,
        (metrics.classes as f64).ln(),
        metrics.final_accuracy()
    );
    println!("checkpoint written to {}", ckpt.display());
    manifest.finish(&[ckpt, csv])?;
    Ok(metrics)
}

fn load_matcher(cfg: &RunConfig, task: &TaskInstance) -> Result<MatcherModel, CliError> {
    let path = cfg.matcher_path();
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "no matcher checkpoint at {} (run `train-matcher` first or set --matcher_checkpoint)",
            path.display()
        )));
    }
    Ok(MatcherModel::load(&path, &task.spec).map_err(runtime)?.0)
}

/// Trains one agent per seed; returns the metrics CSV paths.
pub fn cmd_train_rl(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.rl.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.thresholds.validate().map_err(CliError::Usage)?;
    let task = TaskInstance::new(cfg.task);
    let mut env = RunEnv::new(task.clone(), &cfg.rl);
    env.thresholds = cfg.thresholds;
    if cfg.rl.backend == RewardBackend::ClipMotionImage || cfg.rl.obs_mode == ObsMode::Image {
        let model = load_matcher(cfg, &task)?;
        if cfg.rl.obs_mode == ObsMode::Image {
            env = env.with_trunk(model.encoder.clone());
        }
        if cfg.rl.backend == RewardBackend::ClipMotionImage {
            env = env.with_matcher(model);
        }
    }
    let dir = cfg.rl_dir();
    let manifest = Manifest::begin(&dir, "train-rl", cfg)?;
    let mut outputs = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir).map_err(io_at(&seed_dir))?;
        let csv_path = seed_dir.join("metrics.csv");
        let mut csv = fs::File::create(&csv_path).map_err(io_at(&csv_path))?;
        writeln!(csv, "{}", MetricsRow::CSV_HEADER).map_err(io_at(&csv_path))?;
        let ckpt = seed_dir.join("agent.mfck");
        let outcome = train_run(&env, &cfg.rl, seed, Some(&ckpt), |row| {
            writeln!(csv, "{}", row.to_csv())?;
            csv.flush()?;
            println!(
                "seed {seed} step {:>7}  success {:.2}  return {:.3}",
                row.step, row.success_rate, row.avg_return
            );
            Ok(())
        })
        .map_err(|e| match e {
            RlError::Config(m) => CliError::Usage(m),
            other => runtime(other),
        })?;
        println!("seed {seed}: final success {:.2}", outcome.final_success());
        outputs.push(csv_path);
    }
    manifest.finish(&outputs)?;
    Ok(outputs)
}

/// Aggregates the runs under `inputs` (or the output root when empty) into
/// `<out>/report`.
pub fn cmd_report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let inputs = if inputs.is_empty() {
        vec![cfg.out.clone()]
    } else {
        inputs.to_vec()
    };
    for p in &inputs {
        if !p.exists() {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    let rows = report::load_rows(&inputs).map_err(CliError::Runtime)?;
    if rows.is_empty() {
        return Err(CliError::Runtime("no completed evaluation rows found".into()));
    }
    let series = report::aggregate(&rows);
    let written = report::write_report(&series, &cfg.out.join("report")).map_err(runtime)?;
    print!("{}", report::summary_csv(&series));
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

/// Parses a DSL file and checks it against a built-in scene: the task named
/// in the file when it is one, otherwise the configured task.
pub fn cmd_validate_spec(cfg: &RunConfig, file: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
    let spec = parse_task_spec(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", file.display())))?;
    let id = spec.name.parse::<TaskId>().unwrap_or(cfg.task);
    let task = TaskInstance::new(id);
    let issues = validate_task_spec(&spec, &task.schema);
    if !issues.is_empty() {
        let list: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
        return Err(CliError::Runtime(format!(
            "{} is not valid for the {id} scene:\n{}",
            file.display(),
            list.join("\n")
        )));
    }
    println!("{}: valid for {id} ({} stages)", file.display(), spec.stage_count());
    Ok(())
}
