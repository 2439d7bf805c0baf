//! DDPG with clipped double Q-learning on the built-in tasks.
//!
//! Observations pass through a shared encoder `Z = [x, SiLU(LN(xW + b))]`
//! that is trained only through the critic loss. Two critics and a tanh actor
//! sit on top; target copies of encoder, critics and actor track the online
//! weights by exponential moving average.
//!
//! Episodes are collected by a pool of scoped threads against an immutable
//! parameter snapshot. Every episode draws its randomness from its own index,
//! so results do not depend on the number of workers. Updates happen only
//! after a round of episodes has been handed back, one block per episode.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::matcher::{learned_reward, pairs_input, Encoder, MatcherError, MatcherModel};
use crate::nn::{ema_update, join_tensors, Adam, Hidden, HiddenCache, Mlp, OutputActivation, ParamSet};
use crate::reward::{clip_motion_reward, distance_reward, RewardError, StageTracker, MatchThresholds, assign_reward};
use crate::sim::render::{render, Image};
use crate::sim::{observe, Action, SceneState, TaskInstance, HORIZON};

pub const ACTION_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("observation has {got} entries, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{which} loss became non-finite after {step} env steps")]
    NonFiniteLoss { which: &'static str, step: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RewardBackend {
    /// Geometric motion matching on simulator state.
    ClipMotionState,
    /// Learned matcher on rendered frames.
    ClipMotionImage,
    /// Negative task distances plus a holding bonus.
    Distance,
    /// 1 on success, else 0.
    Sparse,
}

impl RewardBackend {
    pub const ALL: [RewardBackend; 4] = [
        RewardBackend::ClipMotionState,
        RewardBackend::ClipMotionImage,
        RewardBackend::Distance,
        RewardBackend::Sparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardBackend::ClipMotionState => "clip_motion_state",
            RewardBackend::ClipMotionImage => "clip_motion_image",
            RewardBackend::Distance => "distance",
            RewardBackend::Sparse => "sparse",
        }
    }
}

impl fmt::Display for RewardBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardBackend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown reward backend `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsMode {
    /// Proprioception plus entity poses.
    State,
    /// Frozen matcher-trunk features of the last two frames.
    Image,
}

impl fmt::Display for ObsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObsMode::State => "state",
            ObsMode::Image => "image",
        })
    }
}

impl FromStr for ObsMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "state" => Ok(ObsMode::State),
            "image" => Ok(ObsMode::Image),
            _ => Err(format!("unknown observation mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub backend: RewardBackend,
    pub obs_mode: ObsMode,
    pub gamma: f64,
    pub ema_rate: f64,
    pub lambda_reg: f64,
    pub lr: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub horizon: usize,
    pub updates_per_episode: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Env steps driven by uniform random actions before the actor takes over.
    pub warmup_steps: usize,
    pub workers: usize,
    /// Episodes collected per round against one parameter snapshot.
    pub episodes_per_round: usize,
    pub hidden: usize,
    pub encoder_dim: usize,
    /// Use the target exactly as printed: `γr + γ·min Q̄(Z̄_t, a_t)`.
    pub paper_literal_target: bool,
    /// Only allow the motion after the furthest one reached to match.
    pub stage_gated: bool,
    /// End training episodes at the first success. Evaluation episodes
    /// always stop there.
    pub early_stop: bool,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backend: RewardBackend::ClipMotionState,
            obs_mode: ObsMode::State,
            gamma: 0.99,
            ema_rate: 0.995,
            lambda_reg: 1e-3,
            lr: 3e-4,
            batch: 256,
            buffer_capacity: 200_000,
            horizon: HORIZON,
            updates_per_episode: 50,
            noise_start: 0.2,
            noise_end: 0.05,
            total_steps: 200_000,
            eval_interval: 10_000,
            eval_episodes: 20,
            warmup_steps: 2_000,
            workers: 4,
            episodes_per_round: 4,
            hidden: 256,
            encoder_dim: 64,
            paper_literal_target: false,
            stage_gated: false,
            early_stop: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let fail = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return fail("ema_rate must lie in [0, 1]");
        }
        if !(self.lambda_reg >= 0.0) {
            return fail("lambda_reg must be non-negative");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.horizon != HORIZON {
            return Err(RlError::Config(format!("horizon is fixed at {HORIZON}")));
        }
        if self.noise_start < 0.0 || self.noise_end < 0.0 {
            return fail("noise std must be non-negative");
        }
        for (name, v) in [
            ("batch", self.batch),
            ("buffer_capacity", self.buffer_capacity),
            ("total_steps", self.total_steps),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("workers", self.workers),
            ("episodes_per_round", self.episodes_per_round),
            ("hidden", self.hidden),
            ("encoder_dim", self.encoder_dim),
        ] {
            if v == 0 {
                return Err(RlError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Exploration std after `step` env steps, linear over the whole run.
    pub fn noise_at(&self, step: usize) -> f64 {
        let f = (step as f64 / self.total_steps as f64).min(1.0);
        self.noise_start + (self.noise_end - self.noise_start) * f
    }
}

/// `Σ_t γ^t r_t`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Identity-plus-MLP observation encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsEncoder {
    pub layer: Hidden,
}

pub struct ObsEncoderCache {
    hidden: HiddenCache,
}

impl ObsEncoder {
    pub fn new(obs_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ObsEncoder {
            layer: Hidden::new(obs_dim, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ObsEncoder {
            layer: self.layer.zeros_like(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.layer.lin.inputs()
    }

    pub fn out_dim(&self) -> usize {
        self.obs_dim() + self.layer.lin.outputs()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ObsEncoderCache) {
        let (h, hidden) = self.layer.forward(x);
        let z = concatenate![Axis(1), *x, h];
        (z, ObsEncoderCache { hidden })
    }

    /// The observation itself gets no gradient.
    pub fn backward(&self, cache: &ObsEncoderCache, dz: &Array2<f64>, g: &mut ObsEncoder) {
        let dh = dz.slice(s![.., self.obs_dim()..]).to_owned();
        self.layer.backward(&cache.hidden, &dh, &mut g.layer);
    }
}

impl ParamSet for ObsEncoder {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.layer.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer.tensors_mut()
    }
}

/// Encoder and both critics: everything the critic loss trains.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGroup {
    pub encoder: ObsEncoder,
    pub q1: Mlp,
    pub q2: Mlp,
}

impl CriticGroup {
    pub fn zeros_like(&self) -> Self {
        CriticGroup {
            encoder: self.encoder.zeros_like(),
            q1: self.q1.zeros_like(),
            q2: self.q2.zeros_like(),
        }
    }
}

impl ParamSet for CriticGroup {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        join_tensors(vec![
            ("encoder", self.encoder.tensors()),
            ("q1", self.q1.tensors()),
            ("q2", self.q2.tensors()),
        ])
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.q1.tensors_mut());
        v.extend(self.q2.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub critic: CriticGroup,
    pub actor: Mlp,
    pub target_critic: CriticGroup,
    pub target_actor: Mlp,
}

impl AgentParams {
    pub fn new(obs_dim: usize, encoder_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ObsEncoder::new(obs_dim, encoder_dim, &mut rng);
        let z = encoder.out_dim();
        let q = |rng: &mut ChaCha8Rng| Mlp::new(&[z + ACTION_DIM, hidden, hidden, 1], OutputActivation::Identity, rng);
        let q1 = q(&mut rng);
        let q2 = q(&mut rng);
        let actor = Mlp::new(&[z, hidden, hidden, ACTION_DIM], OutputActivation::Tanh, &mut rng);
        let critic = CriticGroup { encoder, q1, q2 };
        AgentParams {
            target_critic: critic.clone(),
            target_actor: actor.clone(),
            critic,
            actor,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.critic.encoder.obs_dim()
    }

    /// Deterministic actions for a batch of observations.
    pub fn policy(&self, obs: &Array2<f64>) -> Array2<f64> {
        let (z, _) = self.critic.encoder.forward(obs);
        self.actor.forward(&z)
    }

    pub fn save(&self, path: &Path, mut meta: serde_json::Value) -> Result<(), RlError> {
        meta["obs_dim"] = self.obs_dim().into();
        meta["encoder_dim"] = self.critic.encoder.layer.lin.outputs().into();
        meta["hidden"] = self.actor.head.inputs().into();
        let mut ck = Checkpoint::new(meta);
        ck.push_params("critic", &self.critic);
        ck.push_params("actor", &self.actor);
        ck.push_params("target_critic", &self.target_critic);
        ck.push_params("target_actor", &self.target_actor);
        ck.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), RlError> {
        let ck = Checkpoint::load(path)?;
        let dim = |k: &str| {
            ck.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| RlError::Config(format!("checkpoint meta lacks `{k}`")))
        };
        let mut agent = AgentParams::new(dim("obs_dim")?, dim("encoder_dim")?, dim("hidden")?, 0);
        ck.load_params("critic", &mut agent.critic)?;
        ck.load_params("actor", &mut agent.actor)?;
        ck.load_params("target_critic", &mut agent.target_critic)?;
        ck.load_params("target_actor", &mut agent.target_actor)?;
        Ok((agent, ck.meta))
    }
}

/// Gaussian-perturbed actor output clamped to the action box.
pub fn act(agent: &AgentParams, obs: &[f64], noise_std: f64, rng: &mut impl Rng) -> Result<Action, RlError> {
    if obs.len() != agent.obs_dim() {
        return Err(RlError::ShapeMismatch {
            expected: agent.obs_dim(),
            got: obs.len(),
        });
    }
    let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
    let mut a: Vec<f64> = agent.policy(&x).row(0).to_vec();
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("finite std");
        for v in &mut a {
            *v += noise.sample(rng);
        }
    }
    Ok(Action::from_slice(&a).clamped())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRecord {
    pub obs: Vec<f32>,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_obs: Vec<f32>,
    pub done: bool,
}

/// A sampled minibatch, one transition per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn from_records(records: &[&ReplayRecord]) -> Self {
        let n = records.len();
        let d = records.first().map_or(0, |r| r.obs.len());
        Batch {
            obs: Array2::from_shape_fn((n, d), |(i, j)| records[i].obs[j] as f64),
            actions: Array2::from_shape_fn((n, ACTION_DIM), |(i, j)| records[i].action[j]),
            rewards: records.iter().map(|r| r.reward).collect(),
            next_obs: Array2::from_shape_fn((n, d), |(i, j)| records[i].next_obs[j] as f64),
            done: records.iter().map(|r| if r.done { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Bounded FIFO store of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<ReplayRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, r: ReplayRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayRecord> {
        self.records.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Batch {
        let picks: Vec<&ReplayRecord> = (0..n)
            .map(|_| &self.records[rng.random_range(0..self.records.len())])
            .collect();
        Batch::from_records(&picks)
    }
}

fn critic_input(z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), *z, *a]
}

/// Both target critics' values at the bootstrap point of every sample.
pub fn target_q_values(agent: &AgentParams, batch: &Batch, paper_literal: bool) -> (Array1<f64>, Array1<f64>) {
    let t = &agent.target_critic;
    let inp = if paper_literal {
        let (z, _) = t.encoder.forward(&batch.obs);
        critic_input(&z, &batch.actions)
    } else {
        let (z, _) = t.encoder.forward(&batch.next_obs);
        let a = agent.target_actor.forward(&z);
        critic_input(&z, &a)
    };
    (t.q1.forward(&inp).column(0).to_owned(), t.q2.forward(&inp).column(0).to_owned())
}

/// Bellman target with the smaller of the two target critics.
pub fn td_target(agent: &AgentParams, batch: &Batch, gamma: f64, paper_literal: bool) -> Array1<f64> {
    let (q1, q2) = target_q_values(agent, batch, paper_literal);
    let q = ndarray::Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b));
    if paper_literal {
        (&batch.rewards + &q) * gamma
    } else {
        &batch.rewards + &((1.0 - &batch.done) * &q * gamma)
    }
}

/// Sum of both critics' mean squared residuals, with gradients for the
/// encoder and both critics.
pub fn critic_loss(agent: &AgentParams, batch: &Batch, y: &Array1<f64>) -> (f64, CriticGroup) {
    let c = &agent.critic;
    let mut g = c.zeros_like();
    let n = batch.len() as f64;
    let (z, enc_cache) = c.encoder.forward(&batch.obs);
    let inp = critic_input(&z, &batch.actions);
    let zdim = z.ncols();
    let mut loss = 0.0;
    let mut dz = Array2::<f64>::zeros(z.raw_dim());
    for (q, gq) in [(&c.q1, &mut g.q1), (&c.q2, &mut g.q2)] {
        let (out, cache) = q.forward_cached(&inp);
        let resid = &out.column(0) - y;
        loss += resid.mapv(|r| r * r).sum() / n;
        let dout = (resid * (2.0 / n)).insert_axis(Axis(1));
        let dinp = q.backward(&cache, &dout, gq);
        dz += &dinp.slice(s![.., ..zdim]);
    }
    c.encoder.backward(&enc_cache, &dz, &mut g.encoder);
    (loss, g)
}

/// `−mean(min_k Q_k(Z, π(Z))) + λ·mean(‖π(Z)‖²)` with the encoder held fixed;
/// gradients for the actor only.
pub fn actor_loss(agent: &AgentParams, batch: &Batch, lambda: f64) -> (f64, Mlp) {
    let c = &agent.critic;
    let n = batch.len() as f64;
    let (z, _) = c.encoder.forward(&batch.obs);
    let zdim = z.ncols();
    let (a, actor_cache) = agent.actor.forward_cached(&z);
    let inp = critic_input(&z, &a);
    let (o1, c1) = c.q1.forward_cached(&inp);
    let (o2, c2) = c.q2.forward_cached(&inp);
    let mut d1 = Array2::<f64>::zeros(o1.raw_dim());
    let mut d2 = Array2::<f64>::zeros(o2.raw_dim());
    let mut loss = 0.0;
    for i in 0..batch.len() {
        if o1[[i, 0]] <= o2[[i, 0]] {
            loss -= o1[[i, 0]] / n;
            d1[[i, 0]] = -1.0 / n;
        } else {
            loss -= o2[[i, 0]] / n;
            d2[[i, 0]] = -1.0 / n;
        }
    }
    loss += lambda * a.mapv(|v| v * v).sum() / n;
    let mut scratch = c.q1.zeros_like();
    let mut da = c.q1.backward(&c1, &d1, &mut scratch).slice(s![.., zdim..]).to_owned();
    let mut scratch = c.q2.zeros_like();
    da += &c.q2.backward(&c2, &d2, &mut scratch).slice(s![.., zdim..]);
    da += &(&a * (2.0 * lambda / n));
    let mut g = agent.actor.zeros_like();
    agent.actor.backward(&actor_cache, &da, &mut g);
    (loss, g)
}

/// Online networks' optimizers.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub critic: Adam,
    pub actor: Adam,
}

impl Optimizers {
    pub fn new(lr: f64) -> Self {
        Optimizers {
            critic: Adam::new(lr),
            actor: Adam::new(lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateLosses {
    pub critic: f64,
    pub actor: f64,
}

/// One critic step, one actor step, then the target averages.
pub fn update_step(
    agent: &mut AgentParams,
    opt: &mut Optimizers,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<UpdateLosses, &'static str> {
    let y = td_target(agent, batch, cfg.gamma, cfg.paper_literal_target);
    let (closs, cg) = critic_loss(agent, batch, &y);
    if !closs.is_finite() {
        return Err("critic");
    }
    opt.critic.step(&mut agent.critic, &cg);
    let (aloss, ag) = actor_loss(agent, batch, cfg.lambda_reg);
    if !aloss.is_finite() {
        return Err("actor");
    }
    opt.actor.step(&mut agent.actor, &ag);
    ema_update(&agent.critic, &mut agent.target_critic, cfg.ema_rate);
    ema_update(&agent.actor, &mut agent.target_actor, cfg.ema_rate);
    Ok(UpdateLosses {
        critic: closs,
        actor: aloss,
    })
}

/// Everything an episode needs besides the policy: task, reward backend and
/// the observation pipeline. Shared read-only by all workers.
pub struct RunEnv {
    pub task: TaskInstance,
    pub backend: RewardBackend,
    pub obs_mode: ObsMode,
    pub thresholds: MatchThresholds,
    pub stage_gated: bool,
    /// Required by the image reward backend.
    pub matcher: Option<MatcherModel>,
    /// Frozen trunk for image observations.
    pub trunk: Option<Encoder>,
}

impl RunEnv {
    pub fn new(task: TaskInstance, cfg: &TrainConfig) -> Self {
        RunEnv {
            task,
            backend: cfg.backend,
            obs_mode: cfg.obs_mode,
            thresholds: MatchThresholds::default(),
            stage_gated: cfg.stage_gated,
            matcher: None,
            trunk: None,
        }
    }

    pub fn with_matcher(mut self, model: MatcherModel) -> Self {
        self.matcher = Some(model);
        self
    }

    pub fn with_trunk(mut self, trunk: Encoder) -> Self {
        self.trunk = Some(trunk);
        self
    }

    fn check(&self) -> Result<(), RlError> {
        if self.backend == RewardBackend::ClipMotionImage && self.matcher.is_none() {
            return Err(RlError::Config("clip_motion_image needs a matcher checkpoint".into()));
        }
        if self.obs_mode == ObsMode::Image && self.trunk.is_none() {
            return Err(RlError::Config("image observations need an encoder trunk".into()));
        }
        Ok(())
    }

    fn frame_resolution(&self) -> Option<usize> {
        let r = self.trunk.as_ref().map(|t| t.resolution);
        r.or_else(|| self.matcher.as_ref().map(|m| m.encoder.resolution))
    }

    fn needs_frames(&self) -> bool {
        self.obs_mode == ObsMode::Image || self.backend == RewardBackend::ClipMotionImage
    }

    pub fn obs_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::State => crate::sim::observation_len(&self.task),
            ObsMode::Image => self.trunk.as_ref().map_or(0, |t| t.fc1.outputs()),
        }
    }

    fn render(&self, s: &SceneState) -> Option<Image> {
        if self.needs_frames() {
            let res = self.frame_resolution().expect("checked by RunEnv::check");
            Some(render(s, res, &self.task.params))
        } else {
            None
        }
    }

    fn observation(&self, s: &SceneState, prev: Option<&Image>, cur: Option<&Image>) -> Result<Vec<f64>, RlError> {
        match self.obs_mode {
            ObsMode::State => Ok(observe(&self.task, s)),
            ObsMode::Image => {
                let trunk = self.trunk.as_ref().expect("checked by RunEnv::check");
                let cur = cur.expect("frames rendered in image mode");
                let prev = prev.unwrap_or(cur);
                let (a, b) = (prev.to_rgb8(), cur.to_rgb8());
                let (x, batch) = pairs_input([(a.as_slice(), b.as_slice())], trunk.resolution)?;
                Ok(trunk.features(&x, batch).row(0).to_vec())
            }
        }
    }
}

/// Per-episode outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub total_reward: f64,
    pub discounted_return: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub records: Vec<ReplayRecord>,
    pub stats: EpisodeStats,
}

/// A controller for one episode: observation and true state in, action out.
pub type Controller<'a> = dyn Fn(&[f64], &SceneState, &mut ChaCha8Rng) -> Result<Action, RlError> + Sync + 'a;

/// Rolls out up to the horizon from `start`, optionally stopping at the first
/// success. Rewards come from the configured backend. `success` in the stats
/// means the goal held at some step.
pub fn collect_episode(
    env: &RunEnv,
    start: SceneState,
    controller: &Controller<'_>,
    gamma: f64,
    early_stop: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, RlError> {
    env.check()?;
    let spec = &env.task.spec;
    let n = spec.stage_count();
    let mut tracker = StageTracker::new();
    let mut s = start;
    let mut frame = env.render(&s);
    let mut obs = env.observation(&s, None, frame.as_ref())?;
    let mut records = Vec::with_capacity(HORIZON);
    let mut rewards = Vec::with_capacity(HORIZON);
    let mut success = false;
    for _ in 0..HORIZON {
        let a = controller(&obs, &s, rng)?;
        let s2 = env.task.step(&s, &a);
        let frame2 = env.render(&s2);
        let reward = match env.backend {
            RewardBackend::ClipMotionState => {
                if env.stage_gated {
                    assign_reward(tracker.observe(spec, &s, &s2, &env.thresholds)?, n)
                } else {
                    clip_motion_reward(spec, &s, &s2, &env.thresholds)?
                }
            }
            RewardBackend::ClipMotionImage => {
                let m = env.matcher.as_ref().expect("checked by RunEnv::check");
                learned_reward(m, spec, frame.as_ref().unwrap(), frame2.as_ref().unwrap())?
            }
            RewardBackend::Distance => distance_reward(&env.task, &s2),
            RewardBackend::Sparse => {
                if env.task.success(&s2) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let obs2 = env.observation(&s2, frame.as_ref(), frame2.as_ref())?;
        let reached = env.task.success(&s2);
        success |= reached;
        let done = reached && early_stop;
        records.push(ReplayRecord {
            obs: obs.iter().map(|v| *v as f32).collect(),
            action: a.to_array(),
            reward,
            next_obs: obs2.iter().map(|v| *v as f32).collect(),
            done,
        });
        rewards.push(reward);
        s = s2;
        frame = frame2;
        obs = obs2;
        if done {
            break;
        }
    }
    Ok(Episode {
        stats: EpisodeStats {
            steps: records.len(),
            total_reward: rewards.iter().sum(),
            discounted_return: episode_return(&rewards, gamma),
            success,
        },
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exploration {
    Uniform,
    Gaussian(f64),
}

/// Controller that drives the agent's actor.
pub fn agent_controller(agent: &AgentParams, mode: Exploration) -> impl Fn(&[f64], &SceneState, &mut ChaCha8Rng) -> Result<Action, RlError> + Sync + '_ {
    move |obs, _, rng| match mode {
        Exploration::Uniform => {
            let a: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect();
            Ok(Action::from_slice(&a))
        }
        Exploration::Gaussian(std) => act(agent, obs, std, rng),
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for item `index` of the given purpose.
fn stream_seed(master: u64, purpose: u64, index: u64) -> u64 {
    splitmix(splitmix(master ^ splitmix(purpose)) ^ index)
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const REPLAY_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

/// Runs episodes `first..first+count` in parallel; each episode's reset seed
/// and noise come from its own index.
fn collect_round(
    env: &RunEnv,
    controller: &Controller<'_>,
    master: u64,
    purpose: u64,
    first: u64,
    count: usize,
    workers: usize,
    gamma: f64,
    early_stop: bool,
) -> Result<Vec<Episode>, RlError> {
    let run_one = |i: usize| {
        let idx = first + i as u64;
        let seed = stream_seed(master, purpose, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = env.task.reset(seed);
        collect_episode(env, start, controller, gamma, early_stop, &mut rng)
    };
    let workers = workers.min(count).max(1);
    if workers == 1 {
        return (0..count).map(run_one).collect();
    }
    let mut slots: Vec<Option<Result<Episode, RlError>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run_one = &run_one;
                scope.spawn(move || {
                    (w..count)
                        .step_by(workers)
                        .map(|i| (i, run_one(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, ep) in h.join().expect("rollout worker panicked") {
                slots[i] = Some(ep);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every episode collected")).collect()
}

/// One evaluation row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    pub task: String,
    pub backend: RewardBackend,
    pub seed: u64,
    pub success_rate: f64,
    pub avg_return: f64,
    pub avg_discounted_return: f64,
    /// Mean over the updates since the previous row; NaN when there were none.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub wall_s: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,episodes,task,backend,seed,success_rate,avg_return,avg_discounted_return,critic_loss,actor_loss,wall_s";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.task,
            self.backend,
            self.seed,
            self.success_rate,
            self.avg_return,
            self.avg_discounted_return,
            self.critic_loss,
            self.actor_loss,
            self.wall_s
        )
    }

    pub fn from_csv(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(format!("expected 11 fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("field {i}: {e}"));
        Ok(MetricsRow {
            step: int(0)? as usize,
            episodes: int(1)? as usize,
            task: f[2].to_string(),
            backend: f[3].parse()?,
            seed: int(4)?,
            success_rate: num(5)?,
            avg_return: num(6)?,
            avg_discounted_return: num(7)?,
            critic_loss: num(8)?,
            actor_loss: num(9)?,
            wall_s: num(10)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub agent: AgentParams,
    pub rows: Vec<MetricsRow>,
    pub env_steps: usize,
    pub episodes: usize,
}

impl RunOutcome {
    pub fn final_success(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.success_rate)
    }
}

/// Noiseless episodes on a fixed set of start states.
pub fn evaluate(env: &RunEnv, agent: &AgentParams, cfg: &TrainConfig, master: u64) -> Result<Vec<EpisodeStats>, RlError> {
    let controller = agent_controller(agent, Exploration::Gaussian(0.0));
    let eps = collect_round(env, &controller, master, EVAL_STREAM, 0, cfg.eval_episodes, cfg.workers, cfg.gamma, true)?;
    Ok(eps.into_iter().map(|e| e.stats).collect())
}

/// Full training loop. Every eval interval of env steps a row is handed to
/// `on_row`. On a non-finite loss the agent is written to `checkpoint`
/// (when given) before the error is returned; on success it is written at
/// the end.
pub fn train_run(
    env: &RunEnv,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
    mut on_row: impl FnMut(&MetricsRow) -> Result<(), RlError>,
) -> Result<RunOutcome, RlError> {
    cfg.validate()?;
    env.check()?;
    let started = Instant::now();
    let mut agent = AgentParams::new(env.obs_dim(), cfg.encoder_dim, cfg.hidden, stream_seed(seed, INIT_STREAM, 0));
    let mut opt = Optimizers::new(cfg.lr);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut replay_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, REPLAY_STREAM, 0));
    let meta = || {
        serde_json::json!({
            "task": env.task.id.to_string(),
            "backend": cfg.backend.name(),
            "seed": seed,
        })
    };
    let (mut steps, mut episodes) = (0usize, 0usize);
    let mut next_eval = cfg.eval_interval;
    let (mut closs_sum, mut aloss_sum, mut updates) = (0.0, 0.0, 0usize);
    let mut rows = Vec::new();
    while steps < cfg.total_steps {
        let mode = if steps < cfg.warmup_steps {
            Exploration::Uniform
        } else {
            Exploration::Gaussian(cfg.noise_at(steps))
        };
        let round = {
            let controller = agent_controller(&agent, mode);
            collect_round(
                env,
                &controller,
                seed,
                TRAIN_STREAM,
                episodes as u64,
                cfg.episodes_per_round,
                cfg.workers,
                cfg.gamma,
                cfg.early_stop,
            )?
        };
        for ep in round {
            if steps >= cfg.total_steps {
                break;
            }
            steps += ep.stats.steps;
            episodes += 1;
            for r in ep.records {
                buffer.push(r);
            }
            if buffer.len() >= cfg.batch && steps >= cfg.warmup_steps {
                for _ in 0..cfg.updates_per_episode {
                    let batch = buffer.sample(cfg.batch, &mut replay_rng);
                    match update_step(&mut agent, &mut opt, &batch, cfg) {
                        Ok(l) => {
                            closs_sum += l.critic;
                            aloss_sum += l.actor;
                            updates += 1;
                        }
                        Err(which) => {
                            if let Some(p) = checkpoint {
                                agent.save(p, meta())?;
                            }
                            return Err(RlError::NonFiniteLoss { which, step: steps });
                        }
                    }
                }
            }
            while steps >= next_eval && next_eval <= cfg.total_steps {
                let stats = evaluate(env, &agent, cfg, seed)?;
                let k = stats.len() as f64;
                let mean_loss = |sum: f64| if updates == 0 { f64::NAN } else { sum / updates as f64 };
                let row = MetricsRow {
                    step: next_eval,
                    episodes,
                    task: env.task.id.to_string(),
                    backend: cfg.backend,
                    seed,
                    success_rate: stats.iter().filter(|s| s.success).count() as f64 / k,
                    avg_return: stats.iter().map(|s| s.total_reward).sum::<f64>() / k,
                    avg_discounted_return: stats.iter().map(|s| s.discounted_return).sum::<f64>() / k,
                    critic_loss: mean_loss(closs_sum),
                    actor_loss: mean_loss(aloss_sum),
                    wall_s: if cfg.record_wall_time {
                        started.elapsed().as_secs_f64()
                    } else {
                        0.0
                    },
                };
                on_row(&row)?;
                rows.push(row);
                (closs_sum, aloss_sum, updates) = (0.0, 0.0, 0);
                next_eval += cfg.eval_interval;
            }
        }
    }
    if let Some(p) = checkpoint {
        agent.save(p, meta())?;
    }
    Ok(RunOutcome {
        agent,
        rows,
        env_steps: steps,
        episodes,
    })
}
