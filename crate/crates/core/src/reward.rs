//! Geometric motion matching and incremental reward assignment.
//!
//! A transition `(s, s2)` is matched against a task's motions from the
//! highest index down; the first motion whose preconditions hold on `s` and
//! whose kinematic test passes wins. A transition that lands on the goal is
//! always the final stage. The reward for stage `I` of `n` is `I / n`;
//! anything unmatched earns 0.

use thiserror::Error;

use crate::geometry::Vec3;
use crate::grammar::{AbstractMotion, MotionKind, Precondition, TaskSpec};
use crate::sim::{goal_holds, SceneState, TaskInstance, GRIPPER};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("unknown entity '{0}'")]
    UnknownEntity(String),
    #[error("direction of a zero vector is undefined")]
    ZeroVector,
    #[error("task references '{0}', which is not in the scene")]
    SpecSceneMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchResult {
    Matched { index: usize, kind: MotionKind },
    GoalReached { index: usize },
    Unwanted,
}

impl MatchResult {
    /// Stage index, or `None` for unwanted transitions.
    pub fn stage(&self) -> Option<usize> {
        match self {
            MatchResult::Matched { index, .. } | MatchResult::GoalReached { index } => Some(*index),
            MatchResult::Unwanted => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchThresholds {
    pub cos_min: f64,
    /// Minimum displacement norm (m) for a motion to count.
    pub min_disp: f64,
    /// Gripper-object distance (m) for grasp and hook tests.
    pub near: f64,
    /// Minimum aperture decrease for a closing motion.
    pub aperture_delta: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            cos_min: 0.8,
            min_disp: 1e-4,
            near: 0.03,
            aperture_delta: 0.01,
        }
    }
}

impl MatchThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cos_min > 0.0 && self.cos_min <= 1.0) {
            return Err(format!("cos_min must lie in (0, 1], got {}", self.cos_min));
        }
        for (name, v) in [
            ("min_disp", self.min_disp),
            ("near", self.near),
            ("aperture_delta", self.aperture_delta),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

fn position(s: &SceneState, entity: &str) -> Result<Vec3, RewardError> {
    s.position(entity)
        .ok_or_else(|| RewardError::UnknownEntity(entity.to_string()))
}

pub fn displacement(s: &SceneState, s2: &SceneState, entity: &str) -> Result<Vec3, RewardError> {
    Ok(position(s2, entity)? - position(s, entity)?)
}

/// Cosine of the angle between `u` and `v`.
pub fn direction_similarity(u: Vec3, v: Vec3) -> Result<f64, RewardError> {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(RewardError::ZeroVector);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn eval_precondition(p: &Precondition, s: &SceneState) -> Result<bool, RewardError> {
    Ok(match p {
        Precondition::Near { a, b, threshold } => {
            position(s, a)?.distance(position(s, b)?) <= *threshold
        }
        Precondition::Grasped(o) => {
            position(s, o)?;
            s.attached.as_deref() == Some(o.as_str())
        }
        Precondition::Hooked(o) => {
            position(s, o)?;
            s.hooked.as_deref() == Some(o.as_str())
        }
        Precondition::ApertureBelow(f) => s.gripper_aperture < *f,
    })
}

/// `mover` travels at least `min_disp` in a direction within the cosine
/// threshold of `mover → target` as seen on `s`.
fn heads_toward(
    s: &SceneState,
    s2: &SceneState,
    mover: &str,
    target: &str,
    th: &MatchThresholds,
) -> Result<bool, RewardError> {
    let disp = displacement(s, s2, mover)?;
    if disp.norm() < th.min_disp {
        return Ok(false);
    }
    let wanted = position(s, target)? - position(s, mover)?;
    match direction_similarity(disp, wanted) {
        Ok(cos) => Ok(cos >= th.cos_min),
        Err(RewardError::ZeroVector) => Ok(false),
        Err(e) => Err(e),
    }
}

fn kinematic_test(
    m: &AbstractMotion,
    s: &SceneState,
    s2: &SceneState,
    th: &MatchThresholds,
) -> Result<bool, RewardError> {
    let x = m.subject();
    match m.kind {
        MotionKind::Reach => heads_toward(s, s2, GRIPPER, x, th),
        MotionKind::Grasp | MotionKind::Hook => {
            let near = position(s, GRIPPER)?.distance(position(s, x)?) <= th.near;
            if !near {
                return Ok(false);
            }
            if m.kind == MotionKind::Grasp {
                let closed = s.gripper_aperture - s2.gripper_aperture >= th.aperture_delta;
                Ok(closed || s2.attached.as_deref() == Some(x))
            } else {
                Ok(s2.hooked.as_deref() == Some(x))
            }
        }
        MotionKind::MoveTo | MotionKind::PushTo | MotionKind::PullTo | MotionKind::SlideTo => {
            let y = m.target().expect("two-argument motion");
            heads_toward(s, s2, x, y, th)
        }
    }
}

fn check_scene(spec: &TaskSpec, s: &SceneState, s2: &SceneState) -> Result<(), RewardError> {
    for e in spec.referenced_entities() {
        if !s.has_entity(e) || !s2.has_entity(e) {
            return Err(RewardError::SpecSceneMismatch(e.to_string()));
        }
    }
    if let Some(e) = spec.goal.articulated_entity() {
        if s.articulation_value(e).is_none() || s2.articulation_value(e).is_none() {
            return Err(RewardError::SpecSceneMismatch(e.to_string()));
        }
    }
    Ok(())
}

/// Classifies a transition. Motions above `max_index` are not considered,
/// which lets callers gate matching on episode progress.
pub fn match_transition_up_to(
    spec: &TaskSpec,
    s: &SceneState,
    s2: &SceneState,
    th: &MatchThresholds,
    max_index: usize,
) -> Result<MatchResult, RewardError> {
    check_scene(spec, s, s2)?;
    if goal_holds(&spec.goal, s2).unwrap_or(false) {
        return Ok(MatchResult::GoalReached {
            index: spec.stage_count(),
        });
    }
    for m in spec.motions.iter().rev().filter(|m| m.index <= max_index) {
        let mut ready = true;
        for p in &m.preconditions {
            if !eval_precondition(p, s)? {
                ready = false;
                break;
            }
        }
        if ready && kinematic_test(m, s, s2, th)? {
            return Ok(MatchResult::Matched {
                index: m.index,
                kind: m.kind,
            });
        }
    }
    Ok(MatchResult::Unwanted)
}

pub fn match_transition(
    spec: &TaskSpec,
    s: &SceneState,
    s2: &SceneState,
    th: &MatchThresholds,
) -> Result<MatchResult, RewardError> {
    match_transition_up_to(spec, s, s2, th, usize::MAX)
}

/// `I / n` for a matched stage, 0 for unwanted transitions.
pub fn assign_reward(m: MatchResult, n: usize) -> f64 {
    match m.stage() {
        Some(i) => i as f64 / n as f64,
        None => 0.0,
    }
}

/// Geometric motion reward for one transition.
pub fn clip_motion_reward(
    spec: &TaskSpec,
    s: &SceneState,
    s2: &SceneState,
    th: &MatchThresholds,
) -> Result<f64, RewardError> {
    Ok(assign_reward(
        match_transition(spec, s, s2, th)?,
        spec.stage_count(),
    ))
}

/// Per-episode progress pointer for stage-gated matching: only motions up to
/// one past the furthest stage reached so far may match.
#[derive(Debug, Clone, Default)]
pub struct StageTracker {
    reached: usize,
}

impl StageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reached(&self) -> usize {
        self.reached
    }

    pub fn observe(
        &mut self,
        spec: &TaskSpec,
        s: &SceneState,
        s2: &SceneState,
        th: &MatchThresholds,
    ) -> Result<MatchResult, RewardError> {
        let m = match_transition_up_to(spec, s, s2, th, self.reached + 1)?;
        if let MatchResult::Matched { index, .. } = m {
            self.reached = self.reached.max(index);
        }
        Ok(m)
    }
}

/// Bonus added by the dense baseline while the manipulated object is held.
pub const HOLD_BONUS: f64 = 0.5;

/// Dense baseline: negative summed task distances plus a holding bonus.
pub fn distance_reward(task: &TaskInstance, s2: &SceneState) -> f64 {
    let (terms, bonus) = task.distance_terms();
    let mut r = 0.0;
    for (a, b) in &terms {
        if let (Some(pa), Some(pb)) = (s2.position(a), s2.position(b)) {
            r -= pa.distance(pb);
        }
    }
    if let Some(obj) = bonus {
        let held = s2.attached.as_deref() == Some(obj.as_str())
            || s2.hooked.as_deref() == Some(obj.as_str());
        if held {
            r += HOLD_BONUS;
        }
    }
    r
}
