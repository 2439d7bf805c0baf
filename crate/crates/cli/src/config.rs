//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! [run]
//! task = pickplace
//! seeds = 0,1,2
//! [rl]
//! backend = clip_motion_state
//! ```
//!
//! Keys are unique across sections so each maps to exactly one `--key`
//! command-line flag. A key placed under the wrong section, an unknown key,
//! a duplicate or an unparseable value is an error.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use motionforge::matcher::{CollectConfig, MatcherTrainConfig, OptimizerKind, PolicyMix};
use motionforge::reward::MatchThresholds;
use motionforge::rl::TrainConfig;
use motionforge::sim::TaskId;

/// Every key with its section and a one-line description, in emission order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run", "task", "built-in task id"),
    ("run", "seeds", "comma-separated RL seeds"),
    ("run", "out", "output root (MOTIONFORGE_OUT overrides the file value)"),
    ("run", "dataset", "dataset directory; empty means <out>/<task>/dataset"),
    ("run", "matcher_checkpoint", "matcher checkpoint; empty means <out>/<task>/matcher/matcher.mfck"),
    ("reward", "cos_min", "minimum direction cosine for directional motions"),
    ("reward", "min_disp", "minimum displacement norm (m)"),
    ("reward", "near", "gripper-object distance for grasp and hook (m)"),
    ("reward", "aperture_delta", "minimum aperture decrease for a grasp"),
    ("collect", "count", "number of transitions to collect"),
    ("collect", "collect_seed", "seed of the collection rollouts"),
    ("collect", "resolution", "rendered frame side (pixels, multiple of 8)"),
    ("collect", "noise_std", "action noise of the partial policy"),
    ("collect", "linger_steps", "steps expert episodes continue after success"),
    ("collect", "mix_expert", "share of expert transitions"),
    ("collect", "mix_partial", "share of noisy-expert transitions"),
    ("collect", "mix_uniform", "share of uniform-random transitions"),
    ("matcher", "epochs", "matcher training epochs"),
    ("matcher", "matcher_batch", "matcher minibatch size"),
    ("matcher", "matcher_lr", "matcher step size"),
    ("matcher", "momentum", "momentum for the sgd optimizer"),
    ("matcher", "optimizer", "sgd or adam"),
    ("matcher", "matcher_seed", "matcher init, split and shuffle seed"),
    ("matcher", "train_fraction", "share of samples used for training"),
    ("matcher", "augment", "random square symmetries of training pairs"),
    ("matcher", "cosine_decay", "half-cosine step size schedule"),
    ("rl", "backend", "clip_motion_state | clip_motion_image | distance | sparse"),
    ("rl", "obs_mode", "state or image"),
    ("rl", "gamma", "discount"),
    ("rl", "ema_rate", "target averaging rate"),
    ("rl", "lambda_reg", "action regularization weight"),
    ("rl", "lr", "actor and critic step size"),
    ("rl", "batch", "replay minibatch size"),
    ("rl", "buffer_capacity", "replay capacity"),
    ("rl", "horizon", "episode length (fixed at 100)"),
    ("rl", "updates_per_episode", "gradient steps after each episode"),
    ("rl", "noise_start", "initial exploration std"),
    ("rl", "noise_end", "final exploration std"),
    ("rl", "total_steps", "env steps per seed"),
    ("rl", "eval_interval", "env steps between evaluations"),
    ("rl", "eval_episodes", "episodes per evaluation"),
    ("rl", "warmup_steps", "initial env steps with uniform random actions"),
    ("rl", "workers", "rollout threads"),
    ("rl", "episodes_per_round", "episodes collected per parameter snapshot"),
    ("rl", "hidden", "hidden width of actor and critics"),
    ("rl", "encoder_dim", "learned part of the observation encoding"),
    ("rl", "paper_literal_target", "use the TD target exactly as printed"),
    ("rl", "stage_gated", "only the next unreached motion may match"),
    ("rl", "early_stop", "end training episodes at the first success"),
    ("rl", "record_wall_time", "fill the wall_s metrics column"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax { line: usize, message: String },
    UnknownKey(String),
    WrongSection { key: String, expected: &'static str, found: String },
    Duplicate(String),
    Value { key: String, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, message } => write!(f, "line {line}: {message}"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            ConfigError::WrongSection { key, expected, found } => {
                write!(f, "key `{key}` belongs in [{expected}], found in [{found}]")
            }
            ConfigError::Duplicate(k) => write!(f, "key `{k}` given twice"),
            ConfigError::Value { key, message } => write!(f, "bad value for `{key}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskId,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub matcher_checkpoint: Option<PathBuf>,
    pub thresholds: MatchThresholds,
    /// Its `thresholds` field is kept in sync with [`RunConfig::thresholds`].
    pub collect: CollectConfig,
    pub matcher: MatcherTrainConfig,
    pub rl: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskId::PickPlace,
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs"),
            dataset: None,
            matcher_checkpoint: None,
            thresholds: MatchThresholds::default(),
            collect: CollectConfig::default(),
            matcher: MatcherTrainConfig::default(),
            rl: TrainConfig::default(),
        }
    }
}

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|k| k.1 == key).map(|k| k.0)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        message: format!("`{v}`: {e}"),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            message: format!("`{v}` is not true or false"),
        }),
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one key. Values are trimmed by the caller.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let th = &mut self.thresholds;
        let c = &mut self.collect;
        let m = &mut self.matcher;
        let r = &mut self.rl;
        match key {
            "task" => self.task = parse(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse::<u64>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
                if self.seeds.is_empty() {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        message: "at least one seed".into(),
                    });
                }
            }
            "out" => self.out = PathBuf::from(v),
            "dataset" => self.dataset = optional_path(v),
            "matcher_checkpoint" => self.matcher_checkpoint = optional_path(v),
            "cos_min" => th.cos_min = parse(key, v)?,
            "min_disp" => th.min_disp = parse(key, v)?,
            "near" => th.near = parse(key, v)?,
            "aperture_delta" => th.aperture_delta = parse(key, v)?,
            "count" => c.count = parse(key, v)?,
            "collect_seed" => c.seed = parse(key, v)?,
            "resolution" => c.resolution = parse(key, v)?,
            "noise_std" => c.noise_std = parse(key, v)?,
            "linger_steps" => c.linger_steps = parse(key, v)?,
            "mix_expert" => c.mix.expert = parse(key, v)?,
            "mix_partial" => c.mix.partial = parse(key, v)?,
            "mix_uniform" => c.mix.uniform = parse(key, v)?,
            "epochs" => m.epochs = parse(key, v)?,
            "matcher_batch" => m.batch = parse(key, v)?,
            "matcher_lr" => m.lr = parse(key, v)?,
            "momentum" => m.momentum = parse(key, v)?,
            "optimizer" => {
                m.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            message: format!("`{v}` (valid: sgd, adam)"),
                        })
                    }
                }
            }
            "matcher_seed" => m.seed = parse(key, v)?,
            "train_fraction" => m.train_fraction = parse(key, v)?,
            "augment" => m.augment = parse_bool(key, v)?,
            "cosine_decay" => m.cosine_decay = parse_bool(key, v)?,
            "backend" => {
                r.backend = v.parse().map_err(|e: String| ConfigError::Value {
                    key: key.into(),
                    message: format!("{e} (valid: clip_motion_state, clip_motion_image, distance, sparse)"),
                })?
            }
            "obs_mode" => r.obs_mode = parse(key, v)?,
            "gamma" => r.gamma = parse(key, v)?,
            "ema_rate" => r.ema_rate = parse(key, v)?,
            "lambda_reg" => r.lambda_reg = parse(key, v)?,
            "lr" => r.lr = parse(key, v)?,
            "batch" => r.batch = parse(key, v)?,
            "buffer_capacity" => r.buffer_capacity = parse(key, v)?,
            "horizon" => r.horizon = parse(key, v)?,
            "updates_per_episode" => r.updates_per_episode = parse(key, v)?,
            "noise_start" => r.noise_start = parse(key, v)?,
            "noise_end" => r.noise_end = parse(key, v)?,
            "total_steps" => r.total_steps = parse(key, v)?,
            "eval_interval" => r.eval_interval = parse(key, v)?,
            "eval_episodes" => r.eval_episodes = parse(key, v)?,
            "warmup_steps" => r.warmup_steps = parse(key, v)?,
            "workers" => r.workers = parse(key, v)?,
            "episodes_per_round" => r.episodes_per_round = parse(key, v)?,
            "hidden" => r.hidden = parse(key, v)?,
            "encoder_dim" => r.encoder_dim = parse(key, v)?,
            "paper_literal_target" => r.paper_literal_target = parse_bool(key, v)?,
            "stage_gated" => r.stage_gated = parse_bool(key, v)?,
            "early_stop" => r.early_stop = parse_bool(key, v)?,
            "record_wall_time" => r.record_wall_time = parse_bool(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.collect.thresholds = self.thresholds;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let th = &self.thresholds;
        let c = &self.collect;
        let m = &self.matcher;
        let r = &self.rl;
        Some(match key {
            "task" => self.task.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "out" => self.out.display().to_string(),
            "dataset" => show_path(&self.dataset),
            "matcher_checkpoint" => show_path(&self.matcher_checkpoint),
            "cos_min" => th.cos_min.to_string(),
            "min_disp" => th.min_disp.to_string(),
            "near" => th.near.to_string(),
            "aperture_delta" => th.aperture_delta.to_string(),
            "count" => c.count.to_string(),
            "collect_seed" => c.seed.to_string(),
            "resolution" => c.resolution.to_string(),
            "noise_std" => c.noise_std.to_string(),
            "linger_steps" => c.linger_steps.to_string(),
            "mix_expert" => c.mix.expert.to_string(),
            "mix_partial" => c.mix.partial.to_string(),
            "mix_uniform" => c.mix.uniform.to_string(),
            "epochs" => m.epochs.to_string(),
            "matcher_batch" => m.batch.to_string(),
            "matcher_lr" => m.lr.to_string(),
            "momentum" => m.momentum.to_string(),
            "optimizer" => match m.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
            "matcher_seed" => m.seed.to_string(),
            "train_fraction" => m.train_fraction.to_string(),
            "augment" => m.augment.to_string(),
            "cosine_decay" => m.cosine_decay.to_string(),
            "backend" => r.backend.to_string(),
            "obs_mode" => r.obs_mode.to_string(),
            "gamma" => r.gamma.to_string(),
            "ema_rate" => r.ema_rate.to_string(),
            "lambda_reg" => r.lambda_reg.to_string(),
            "lr" => r.lr.to_string(),
            "batch" => r.batch.to_string(),
            "buffer_capacity" => r.buffer_capacity.to_string(),
            "horizon" => r.horizon.to_string(),
            "updates_per_episode" => r.updates_per_episode.to_string(),
            "noise_start" => r.noise_start.to_string(),
            "noise_end" => r.noise_end.to_string(),
            "total_steps" => r.total_steps.to_string(),
            "eval_interval" => r.eval_interval.to_string(),
            "eval_episodes" => r.eval_episodes.to_string(),
            "warmup_steps" => r.warmup_steps.to_string(),
            "workers" => r.workers.to_string(),
            "episodes_per_round" => r.episodes_per_round.to_string(),
            "hidden" => r.hidden.to_string(),
            "encoder_dim" => r.encoder_dim.to_string(),
            "paper_literal_target" => r.paper_literal_target.to_string(),
            "stage_gated" => r.stage_gated.to_string(),
            "early_stop" => r.early_stop.to_string(),
            "record_wall_time" => r.record_wall_time.to_string(),
            _ => return None,
        })
    }

    /// Overlays a config file onto `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: &str| ConfigError::Syntax {
                line: i + 1,
                message: message.to_string(),
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?.trim();
                if !KEYS.iter().any(|k| k.0 == name) {
                    return Err(syntax(&format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let expected = section_of(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            let found = section.clone().ok_or_else(|| syntax("key outside any section"))?;
            if found != expected {
                return Err(ConfigError::WrongSection {
                    key: key.to_string(),
                    expected,
                    found,
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key under its section header.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, _) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn mix(&self) -> PolicyMix {
        self.collect.mix
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out.join(self.task.name()).join("dataset"))
    }

    pub fn matcher_dir(&self) -> PathBuf {
        self.out.join(self.task.name()).join("matcher")
    }

    pub fn matcher_path(&self) -> PathBuf {
        self.matcher_checkpoint
            .clone()
            .unwrap_or_else(|| self.matcher_dir().join("matcher.mfck"))
    }

    pub fn rl_dir(&self) -> PathBuf {
        self.out.join(self.task.name()).join(self.rl.backend.name())
    }
}
