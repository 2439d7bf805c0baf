//! Learned image-pair motion classifier.
//!
//! A small convolutional trunk embeds a stacked observation pair `(o, o')`
//! (six channels) into a unit vector; a free table holds one unit vector per
//! motion class. Classification is a softmax over cosine similarities scaled
//! by a learned temperature, and training minimizes its cross-entropy.
//!
//! Classes for a spec with `n` stages: ids `0..n-1` are the motions (the last
//! one being the goal), id `n` is the unwanted class.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::grammar::TaskSpec;
use crate::nn::{channel_expand, join_tensors, silu, silu_grad, Adam, Conv2d, ConvCache, Linear, MapShape, ParamSet, Sgd};
use crate::reward::{assign_reward, match_transition, MatchResult, MatchThresholds, RewardError};
use crate::sim::expert::{policy_action, RolloutPolicy};
use crate::sim::render::{load_rgb8_png, render, save_rgb8_png, Image};
use crate::sim::{SceneState, TaskId, TaskInstance};

pub const EMBED_DIM: usize = 64;
/// Replication factor of the first layer: the pair doubles the RGB channels.
pub const EXPANSION: usize = 2;
const CONV_CHANNELS: [usize; 3] = [8, 16, 16];
const FC_HIDDEN: usize = 128;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("image shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Convolutional trunk plus two-layer head.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub resolution: usize,
}

pub struct EncoderCache {
    batch: usize,
    convs: Vec<(ConvCache, Array2<f64>)>,
    flat: Array2<f64>,
    fc1_pre: Array2<f64>,
    fc1_act: Array2<f64>,
}

impl Encoder {
    /// Builds the first layer for three channels and expands it to six.
    pub fn new(resolution: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(resolution % 8 == 0 && resolution > 0, "resolution must be a multiple of 8");
        let first = Conv2d::new(3, CONV_CHANNELS[0], 3, 2, 1, rng);
        let mut convs = vec![channel_expand(&first, EXPANSION)];
        for w in CONV_CHANNELS.windows(2) {
            convs.push(Conv2d::new(w[0], w[1], 3, 2, 1, rng));
        }
        let side = resolution / 8;
        let flat = side * side * CONV_CHANNELS[2];
        Encoder {
            convs,
            fc1: Linear::new(flat, FC_HIDDEN, rng),
            fc2: Linear::new(FC_HIDDEN, embed_dim, rng),
            resolution,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            resolution: self.resolution,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.fc2.outputs()
    }

    fn input_shape(&self, batch: usize) -> MapShape {
        MapShape {
            batch,
            height: self.resolution,
            width: self.resolution,
            channels: EXPANSION * 3,
        }
    }

    /// `x` holds `batch` channels-last pair images as `(B·H·W, 6)`.
    /// Returns unnormalized embeddings `(B, d)` and the hidden features
    /// `(B, 128)` ahead of the last layer.
    pub fn forward(&self, x: &Array2<f64>, batch: usize) -> (Array2<f64>, EncoderCache) {
        let mut s = self.input_shape(batch);
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cache) = conv.forward(&h, s);
            h = pre.mapv(silu);
            s = conv.output_shape(s);
            convs.push((cache, pre));
        }
        let per = s.height * s.width * s.channels;
        let flat = h.into_shape_with_order((batch, per)).expect("contiguous feature map");
        let fc1_pre = self.fc1.forward(&flat);
        let fc1_act = fc1_pre.mapv(silu);
        let e = self.fc2.forward(&fc1_act);
        (
            e,
            EncoderCache {
                batch,
                convs,
                flat,
                fc1_pre,
                fc1_act,
            },
        )
    }

    pub fn backward(&self, cache: &EncoderCache, de: &Array2<f64>, g: &mut Encoder) {
        let da1 = self.fc2.backward(&cache.fc1_act, de, &mut g.fc2);
        let dp1 = da1 * &cache.fc1_pre.mapv(silu_grad);
        let dflat = self.fc1.backward(&cache.flat, &dp1, &mut g.fc1);
        let last = self.convs.len() - 1;
        let channels = self.convs[last].out_channels();
        let rows = dflat.len() / channels;
        let mut d = dflat
            .into_shape_with_order((rows, channels))
            .expect("contiguous gradient");
        for (i, ((conv, (cc, pre)), gc)) in self
            .convs
            .iter()
            .zip(&cache.convs)
            .zip(g.convs.iter_mut())
            .enumerate()
            .rev()
        {
            let dpre = d * &pre.mapv(silu_grad);
            match conv.backward(cc, &dpre, gc, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        let _ = cache.batch;
    }

    /// Hidden features ahead of the embedding layer, used as a frozen image
    /// representation for control.
    pub fn features(&self, x: &Array2<f64>, batch: usize) -> Array2<f64> {
        self.forward(x, batch).1.fc1_act
    }
}

impl ParamSet for Encoder {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut parts: Vec<(String, Vec<(String, Vec<usize>, &[f64])>)> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("conv{i}"), c.tensors()))
            .collect();
        parts.push(("fc1".into(), self.fc1.tensors()));
        parts.push(("fc2".into(), self.fc2.tensors()));
        join_tensors(parts.iter().map(|(p, t)| (p.as_str(), t.clone())).collect())
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        v.extend(self.fc1.tensors_mut());
        v.extend(self.fc2.tensors_mut());
        v
    }
}

/// Class embeddings and their canonical descriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTable {
    /// `(K, d)`; rows are normalized before use.
    pub w: Array2<f64>,
    pub descriptions: Vec<String>,
}

pub fn class_descriptions(spec: &TaskSpec) -> Vec<String> {
    let mut d: Vec<String> = spec.motions.iter().map(|m| m.description()).collect();
    d.push(format!("GOAL {}", spec.goal));
    d.push("UNWANTED".to_string());
    d
}

impl MotionTable {
    pub fn for_spec(spec: &TaskSpec, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let descriptions = class_descriptions(spec);
        let w = Array2::from_shape_fn((descriptions.len(), dim), |_| rng.random_range(-1.0..1.0));
        MotionTable { w, descriptions }
    }

    pub fn classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn unwanted_class(&self) -> usize {
        self.classes() - 1
    }

    pub fn normalized(&self) -> Array2<f64> {
        let mut w = self.w.clone();
        for mut row in w.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|v| v / n);
        }
        w
    }
}

/// Class id for a geometric match result.
pub fn class_of(m: MatchResult, n: usize) -> usize {
    match m.stage() {
        Some(stage) => stage - 1,
        None => n,
    }
}

/// Inverse of [`class_of`].
pub fn match_of_class(class: usize, n: usize) -> MatchResult {
    if class + 1 == n {
        MatchResult::GoalReached { index: n }
    } else if class + 1 < n {
        // The kind is irrelevant for reward; callers that need it consult the spec.
        MatchResult::Matched {
            index: class + 1,
            kind: crate::grammar::MotionKind::Reach,
        }
    } else {
        MatchResult::Unwanted
    }
}

/// Temperature as `tau = exp(log_tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Temperature {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// Encoder, class table and temperature trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    pub encoder: Encoder,
    pub table: MotionTable,
    pub log_tau: Array1<f64>,
}

impl MatcherModel {
    pub fn new(spec: &TaskSpec, resolution: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(resolution, EMBED_DIM, &mut rng);
        let table = MotionTable::for_spec(spec, EMBED_DIM, &mut rng);
        MatcherModel {
            encoder,
            table,
            log_tau: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MatcherModel {
            encoder: self.encoder.zeros_like(),
            table: MotionTable {
                w: Array2::zeros(self.table.w.raw_dim()),
                descriptions: self.table.descriptions.clone(),
            },
            log_tau: Array1::zeros(1),
        }
    }

    pub fn temperature(&self) -> Temperature {
        Temperature {
            log_tau: self.log_tau[0],
        }
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<(), MatcherError> {
        let mut meta = meta;
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("resolution".into(), self.encoder.resolution.into());
            m.insert("embed_dim".into(), self.encoder.embed_dim().into());
            m.insert("classes".into(), self.table.descriptions.clone().into());
        }
        let mut ck = Checkpoint::new(meta);
        ck.push_params("matcher", self);
        ck.save(path)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`MatcherModel::save`] for `spec`.
    pub fn load(path: &Path, spec: &TaskSpec) -> Result<(Self, serde_json::Value), MatcherError> {
        let ck = Checkpoint::load(path)?;
        let resolution = ck.meta["resolution"]
            .as_u64()
            .ok_or_else(|| MatcherError::Dataset("checkpoint lacks resolution".into()))?
            as usize;
        let classes: Vec<String> = serde_json::from_value(ck.meta["classes"].clone())
            .map_err(|e| MatcherError::Dataset(e.to_string()))?;
        if classes != class_descriptions(spec) {
            return Err(MatcherError::Dataset(format!(
                "checkpoint classes {classes:?} do not match task '{}'",
                spec.name
            )));
        }
        let mut model = MatcherModel::new(spec, resolution, 0);
        ck.load_params("matcher", &mut model)?;
        Ok((model, ck.meta))
    }
}

impl ParamSet for MatcherModel {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut t = join_tensors(vec![("encoder", self.encoder.tensors())]);
        t.push(("table".into(), self.table.w.shape().to_vec(), self.table.w.as_slice().unwrap()));
        t.push(("log_tau".into(), vec![1], self.log_tau.as_slice().unwrap()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.push(self.table.w.as_slice_mut().unwrap());
        v.push(self.log_tau.as_slice_mut().unwrap());
        v
    }
}

/// Source pixel for output pixel `(y, x)` under one of the eight symmetries
/// of the square: `t % 4` quarter turns after an optional mirror (`t >= 4`).
fn dihedral_source(t: u8, y: usize, x: usize, n: usize) -> (usize, usize) {
    let (mut y, mut x) = (y, x);
    for _ in 0..t % 4 {
        (y, x) = (x, n - 1 - y);
    }
    if t >= 4 {
        x = n - 1 - x;
    }
    (y, x)
}

/// Stacks 8-bit RGB pairs into the encoder's input layout.
pub fn pairs_input<'a>(pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>, resolution: usize) -> Result<(Array2<f64>, usize), MatcherError> {
    pairs_input_transformed(pairs.into_iter().map(|(a, b)| (a, b, 0)), resolution)
}

/// Like [`pairs_input`], applying the given square symmetry to both frames
/// of each pair. Scene labels are invariant under these maps because the
/// view is centered and every matcher test uses relative geometry only.
pub fn pairs_input_transformed<'a>(
    pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8], u8)>,
    resolution: usize,
) -> Result<(Array2<f64>, usize), MatcherError> {
    let pixels = resolution * resolution;
    let mut data = Vec::new();
    let mut batch = 0;
    for (o, o2, t) in pairs {
        if o.len() != pixels * 3 || o2.len() != pixels * 3 {
            return Err(MatcherError::ShapeMismatch(format!(
                "expected {} bytes per image at resolution {resolution}, got {} and {}",
                pixels * 3,
                o.len(),
                o2.len()
            )));
        }
        data.reserve(pixels * 6);
        for y in 0..resolution {
            for x in 0..resolution {
                let (sy, sx) = dihedral_source(t, y, x, resolution);
                let p = sy * resolution + sx;
                for c in 0..3 {
                    data.push(f64::from(o[p * 3 + c]) / 255.0);
                }
                for c in 0..3 {
                    data.push(f64::from(o2[p * 3 + c]) / 255.0);
                }
            }
        }
        batch += 1;
    }
    Ok((Array2::from_shape_vec((batch * pixels, 6), data).expect("sized"), batch))
}

fn normalize_rows(e: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = e.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE));
    let f = e / &norms.view().insert_axis(Axis(1));
    (f, norms)
}

/// Gradient through `f = e/|e|` row-wise.
fn normalize_rows_backward(f: &Array2<f64>, norms: &Array1<f64>, df: &Array2<f64>) -> Array2<f64> {
    let mut de = df.clone();
    for (((mut out, fr), dfr), n) in de
        .rows_mut()
        .into_iter()
        .zip(f.rows())
        .zip(df.rows())
        .zip(norms.iter())
    {
        let dot = fr.dot(&dfr);
        for ((o, fv), dv) in out.iter_mut().zip(fr.iter()).zip(dfr.iter()) {
            *o = (dv - fv * dot) / n;
        }
    }
    de
}

/// Unit-norm embedding of one observation pair.
pub fn encode_pair(encoder: &Encoder, o: &Image, o2: &Image) -> Result<Array1<f64>, MatcherError> {
    for img in [o, o2] {
        if img.width != encoder.resolution || img.height != encoder.resolution {
            return Err(MatcherError::ShapeMismatch(format!(
                "image is {}x{}, encoder expects {}x{}",
                img.width, img.height, encoder.resolution, encoder.resolution
            )));
        }
    }
    let (a, b) = (o.to_rgb8(), o2.to_rgb8());
    let (x, batch) = pairs_input([(a.as_slice(), b.as_slice())], encoder.resolution)?;
    let (e, _) = encoder.forward(&x, batch);
    let (f, _) = normalize_rows(&e);
    Ok(f.row(0).to_owned())
}

fn softmax_row(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Softmax over cosine similarities divided by the temperature.
pub fn predict_probabilities(f: &Array1<f64>, table: &MotionTable, tau: Temperature) -> Vec<f64> {
    let w = table.normalized();
    let t = tau.tau();
    let sims = w.dot(f);
    softmax_row(sims.iter().map(move |s| s / t))
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict_motion(model: &MatcherModel, o: &Image, o2: &Image) -> Result<usize, MatcherError> {
    let f = encode_pair(&model.encoder, o, o2)?;
    Ok(argmax(&predict_probabilities(&f, &model.table, model.temperature())))
}

/// Incremental reward of the predicted class.
pub fn learned_reward(model: &MatcherModel, spec: &TaskSpec, o: &Image, o2: &Image) -> Result<f64, MatcherError> {
    let class = predict_motion(model, o, o2)?;
    let n = spec.stage_count();
    Ok(assign_reward(match_of_class(class, n), n))
}

/// Mean cross-entropy over a batch and its gradients.
pub struct LossOutput {
    pub loss: f64,
    pub grads: MatcherModel,
    pub predictions: Vec<usize>,
}

fn logits_for(model: &MatcherModel, x: &Array2<f64>, batch: usize) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>, EncoderCache) {
    let (e, cache) = model.encoder.forward(x, batch);
    let (f, norms) = normalize_rows(&e);
    let w = model.table.normalized();
    let sims = f.dot(&w.t());
    let logits = &sims / model.temperature().tau();
    (logits, f, norms, w, cache)
}

/// Cross-entropy of the temperature-scaled cosine softmax.
pub fn contrastive_loss(model: &MatcherModel, x: &Array2<f64>, labels: &[usize]) -> LossOutput {
    let batch = labels.len();
    assert!(batch > 0, "empty batch");
    let (logits, f, norms, w, cache) = logits_for(model, x, batch);
    let k = logits.ncols();
    let mut dlogits = Array2::zeros((batch, k));
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(batch);
    for (b, &y) in labels.iter().enumerate() {
        let p = softmax_row(logits.row(b).iter().copied());
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        predictions.push(argmax(&p));
        for c in 0..k {
            dlogits[[b, c]] = (p[c] - if c == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    loss /= batch as f64;

    let tau = model.temperature().tau();
    let mut grads = model.zeros_like();
    grads.log_tau[0] = -(&dlogits * &logits).sum();
    let dsims = &dlogits / tau;
    let df = dsims.dot(&w);
    let dw = dsims.t().dot(&f);
    let wnorms = model.table.w.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE));
    grads.table.w = normalize_rows_backward(&w, &wnorms, &dw);
    let de = normalize_rows_backward(&f, &norms, &df);
    model.encoder.backward(&cache, &de, &mut grads.encoder);
    LossOutput {
        loss,
        grads,
        predictions,
    }
}

/// Loss and predictions without gradients.
pub fn evaluate_batch(model: &MatcherModel, x: &Array2<f64>, labels: &[usize]) -> (f64, Vec<usize>) {
    let (logits, ..) = logits_for(model, x, labels.len());
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(labels.len());
    for (b, &y) in labels.iter().enumerate() {
        let p = softmax_row(logits.row(b).iter().copied());
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        preds.push(argmax(&p));
    }
    (loss / labels.len() as f64, preds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Expert,
    Partial,
    Uniform,
}

impl SampleSource {
    pub fn tag(&self) -> &'static str {
        match self {
            SampleSource::Expert => "expert",
            SampleSource::Partial => "partial",
            SampleSource::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    /// 8-bit RGB, row-major.
    pub o: Vec<u8>,
    pub o2: Vec<u8>,
    pub label: usize,
    pub task: TaskId,
    pub source: SampleSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyMix {
    pub expert: f64,
    pub partial: f64,
    pub uniform: f64,
}

impl Default for PolicyMix {
    fn default() -> Self {
        PolicyMix {
            expert: 0.4,
            partial: 0.3,
            uniform: 0.3,
        }
    }
}

impl PolicyMix {
    /// Per-source counts summing to `total`; rounding slack goes to uniform.
    pub fn split(&self, total: usize) -> [(SampleSource, usize); 3] {
        let sum = self.expert + self.partial + self.uniform;
        let e = (total as f64 * self.expert / sum).round() as usize;
        let p = ((total as f64 * self.partial / sum).round() as usize).min(total - e.min(total));
        let e = e.min(total);
        [
            (SampleSource::Expert, e),
            (SampleSource::Partial, p),
            (SampleSource::Uniform, total - e - p),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    pub count: usize,
    pub mix: PolicyMix,
    pub seed: u64,
    pub resolution: usize,
    /// Action noise of the partially competent policy.
    pub noise_std: f64,
    pub thresholds: MatchThresholds,
    /// Steps an expert episode keeps running after first success.
    pub linger_steps: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            count: 10_000,
            mix: PolicyMix::default(),
            seed: 0,
            resolution: 64,
            noise_std: 0.3,
            thresholds: MatchThresholds::default(),
            linger_steps: 5,
        }
    }
}

/// Rolls out the policy mix and labels every transition with the geometric
/// matcher.
pub fn collect_dataset(task: &TaskInstance, cfg: &CollectConfig) -> Result<Vec<TransitionSample>, MatcherError> {
    let n = task.spec.stage_count();
    let horizon = crate::sim::HORIZON;
    let mut out = Vec::with_capacity(cfg.count);
    for (si, (source, quota)) in cfg.mix.split(cfg.count).into_iter().enumerate() {
        let policy = match source {
            SampleSource::Expert => RolloutPolicy::Expert,
            SampleSource::Partial => RolloutPolicy::NoisyExpert(cfg.noise_std),
            SampleSource::Uniform => RolloutPolicy::Uniform,
        };
        let mut taken = 0;
        let mut episode = 0u64;
        while taken < quota {
            let ep_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((si as u64) << 40).wrapping_add(episode);
            let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
            let mut s = task.reset(ep_seed);
            let mut frame = render(&s, cfg.resolution, &task.params).to_rgb8();
            let mut since_success = None;
            for _ in 0..horizon {
                if taken == quota {
                    break;
                }
                let a = policy_action(policy, task, &s, &mut rng);
                let s2 = task.step(&s, &a);
                let frame2 = render(&s2, cfg.resolution, &task.params).to_rgb8();
                let m = match_transition(&task.spec, &s, &s2, &cfg.thresholds)?;
                out.push(TransitionSample {
                    o: frame,
                    o2: frame2.clone(),
                    label: class_of(m, n),
                    task: task.id,
                    source,
                });
                taken += 1;
                if source != SampleSource::Uniform {
                    if task.success(&s2) && since_success.is_none() {
                        since_success = Some(0);
                    }
                    if let Some(k) = since_success.as_mut() {
                        if *k >= cfg.linger_steps {
                            break;
                        }
                        *k += 1;
                    }
                }
                s = s2;
                frame = frame2;
            }
            episode += 1;
        }
    }
    Ok(out)
}

/// Count of samples per class id.
pub fn class_histogram(samples: &[TransitionSample], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for s in samples {
        h[s.label] += 1;
    }
    h
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    idx: usize,
    label: usize,
    source: SampleSource,
    o_file: String,
    o2_file: String,
}

/// Writes `samples.jsonl` plus two PNGs per sample into `dir`.
pub fn write_dataset(dir: &Path, samples: &[TransitionSample], resolution: usize) -> Result<(), MatcherError> {
    fs::create_dir_all(dir)?;
    let mut index = std::io::BufWriter::new(fs::File::create(dir.join("samples.jsonl"))?);
    for (idx, s) in samples.iter().enumerate() {
        let rec = SampleRecord {
            idx,
            label: s.label,
            source: s.source,
            o_file: format!("{idx:06}_o.png"),
            o2_file: format!("{idx:06}_o2.png"),
        };
        save_rgb8_png(&dir.join(&rec.o_file), resolution, resolution, &s.o)?;
        save_rgb8_png(&dir.join(&rec.o2_file), resolution, resolution, &s.o2)?;
        serde_json::to_writer(&mut index, &rec).map_err(|e| MatcherError::Dataset(e.to_string()))?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; returns samples and the
/// image resolution.
pub fn load_dataset(dir: &Path, task: TaskId) -> Result<(Vec<TransitionSample>, usize), MatcherError> {
    let file = fs::File::open(dir.join("samples.jsonl"))
        .map_err(|e| MatcherError::Dataset(format!("{}: {e}", dir.join("samples.jsonl").display())))?;
    let mut samples = Vec::new();
    let mut resolution = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| MatcherError::Dataset(format!("line {}: {e}", i + 1)))?;
        let (w, h, o) = load_rgb8_png(&dir.join(&rec.o_file))?;
        let (w2, h2, o2) = load_rgb8_png(&dir.join(&rec.o2_file))?;
        if w != h || (w, h) != (w2, h2) || (resolution != 0 && w != resolution) {
            return Err(MatcherError::ShapeMismatch(format!("sample {} has inconsistent image sizes", rec.idx)));
        }
        resolution = w;
        samples.push(TransitionSample {
            o,
            o2,
            label: rec.label,
            task,
            source: rec.source,
        });
    }
    if samples.is_empty() {
        return Err(MatcherError::Dataset(format!("{} holds no samples", dir.display())));
    }
    Ok((samples, resolution))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub train_fraction: f64,
    /// Random square symmetries applied to training pairs.
    pub augment: bool,
    /// Anneal the step size to zero along a half cosine over all epochs.
    pub cosine_decay: bool,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        MatcherTrainConfig {
            epochs: 50,
            batch: 64,
            lr: 3e-3,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            train_fraction: 0.8,
            augment: true,
            cosine_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatcherMetrics {
    pub classes: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
    /// Mean training loss at initialization.
    pub initial_loss: f64,
    pub initial_heldout_accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl MatcherMetrics {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_heldout_accuracy, |e| e.heldout_accuracy)
    }
}

fn batched_eval(model: &MatcherModel, samples: &[&TransitionSample], batch: usize) -> Result<(f64, f64, Vec<usize>), MatcherError> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let (x, b) = pairs_input(chunk.iter().map(|s| (s.o.as_slice(), s.o2.as_slice())), model.encoder.resolution)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let (l, p) = evaluate_batch(model, &x, &labels);
        loss += l * b as f64;
        correct += p.iter().zip(&labels).filter(|(a, b)| a == b).count();
        preds.extend(p);
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n, preds))
}

/// Deterministic 80/20-style split of sample indices.
pub fn split_indices(count: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let cut = (count as f64 * train_fraction).round() as usize;
    let held = idx.split_off(cut.min(count));
    (idx, held)
}

/// Trains a fresh model on `samples` and reports per-epoch metrics.
/// `on_epoch` observes progress.
pub fn train_matcher(
    samples: &[TransitionSample],
    spec: &TaskSpec,
    resolution: usize,
    cfg: &MatcherTrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(MatcherModel, MatcherMetrics), MatcherError> {
    let mut model = MatcherModel::new(spec, resolution, cfg.seed);
    let classes = model.table.classes();
    if let Some(bad) = samples.iter().find(|s| s.label >= classes) {
        return Err(MatcherError::Dataset(format!("label {} outside {classes} classes", bad.label)));
    }
    let (train_idx, held_idx) = split_indices(samples.len(), cfg.train_fraction, cfg.seed);
    let train: Vec<&TransitionSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let held: Vec<&TransitionSample> = held_idx.iter().map(|&i| &samples[i]).collect();

    let (initial_loss, ..) = batched_eval(&model, &train, 256)?;
    let (_, initial_acc, _) = batched_eval(&model, &held, 256)?;
    let mut metrics = MatcherMetrics {
        classes,
        train_samples: train.len(),
        heldout_samples: held.len(),
        initial_loss,
        initial_heldout_accuracy: initial_acc,
        epochs: Vec::new(),
    };

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = if cfg.cosine_decay {
            let progress = (epoch - 1) as f64 / cfg.epochs as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            cfg.lr
        };
        sgd.lr = lr;
        adam.lr = lr;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            let transforms: Vec<u8> = chunk
                .iter()
                .map(|_| if cfg.augment { rng.random_range(0..8) } else { 0 })
                .collect();
            let (x, _) = pairs_input_transformed(
                chunk
                    .iter()
                    .zip(&transforms)
                    .map(|(&i, &t)| (train[i].o.as_slice(), train[i].o2.as_slice(), t)),
                resolution,
            )?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let out = contrastive_loss(&model, &x, &labels);
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(MatcherError::NonFiniteLoss { epoch, batch: bi });
            }
            total += out.loss * labels.len() as f64;
            match cfg.optimizer {
                OptimizerKind::Sgd => sgd.step(&mut model, &out.grads),
                OptimizerKind::Adam => adam.step(&mut model, &out.grads),
            }
        }
        let (heldout_loss, heldout_accuracy, _) = batched_eval(&model, &held, 256)?;
        let m = EpochMetrics {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            heldout_loss,
            heldout_accuracy,
        };
        on_epoch(&m);
        metrics.epochs.push(m);
    }
    Ok((model, metrics))
}

/// Per-class held-out accuracy, keyed by class id.
pub fn per_class_accuracy(model: &MatcherModel, samples: &[&TransitionSample]) -> Result<BTreeMap<usize, (usize, usize)>, MatcherError> {
    let (_, _, preds) = batched_eval(model, samples, 256)?;
    let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(preds) {
        let e = out.entry(s.label).or_default();
        e.1 += 1;
        if p == s.label {
            e.0 += 1;
        }
    }
    Ok(out)
}

/// Renders a state pair and classifies it.
pub fn classify_states(model: &MatcherModel, task: &TaskInstance, s: &SceneState, s2: &SceneState) -> Result<usize, MatcherError> {
    let r = model.encoder.resolution;
    predict_motion(model, &render(s, r, &task.params), &render(s2, r, &task.params))
}
