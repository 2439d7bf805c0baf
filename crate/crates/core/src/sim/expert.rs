//! Scripted phase-machine experts.
//!
//! The expert is derived from the task decomposition itself: approach the
//! first REACH target, close on the GRASP/HOOK subject if there is one, then
//! drive the transported body toward its destination. Each decision carries
//! the stage index it realizes, which serves as ground truth for the matcher.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::state::{Action, SceneState, GRIPPER};
use super::task::TaskInstance;
use crate::geometry::Vec3;
use crate::grammar::{AbstractMotion, MotionKind};

/// Aperture the expert closes to before transporting.
const CLOSED_APERTURE: f64 = 0.5;
/// Gap kept between gripper and a body it is about to push.
const PUSH_STANDOFF: f64 = 0.02;
/// Distance at which the expert considers itself on top of an object.
const ARRIVAL_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Approach,
    Close,
    Transport,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertStep {
    pub action: Action,
    pub phase: Phase,
    /// 1-based stage the action realizes; the task's stage count when the
    /// action reaches (or keeps) the goal.
    pub stage: usize,
}

struct Plan<'a> {
    reach: &'a AbstractMotion,
    close: Option<&'a AbstractMotion>,
    transport: Option<&'a AbstractMotion>,
}

fn plan(task: &TaskInstance) -> Plan<'_> {
    let motions = &task.spec.motions;
    let reach = motions
        .iter()
        .find(|m| m.kind == MotionKind::Reach)
        .unwrap_or(&motions[0]);
    let close = motions
        .iter()
        .find(|m| matches!(m.kind, MotionKind::Grasp | MotionKind::Hook));
    let transport = motions.iter().find(|m| m.kind.is_transport());
    Plan {
        reach,
        close,
        transport,
    }
}

fn move_toward(from: Vec3, to: Vec3, standoff: f64, max_step: f64) -> Vec3 {
    let offset = to - from;
    let dist = offset.norm();
    let travel = (dist - standoff).clamp(0.0, max_step);
    match offset.normalized() {
        Some(dir) if travel > 0.0 => dir * (travel / max_step),
        _ => Vec3::ZERO,
    }
}

fn pos(state: &SceneState, entity: &str) -> Vec3 {
    state.position(entity).unwrap_or(state.gripper_pos)
}

/// Expert action for `state`, with its phase and stage label.
pub fn scripted_expert(task: &TaskInstance, state: &SceneState) -> ExpertStep {
    let n = task.spec.stage_count();
    if task.success(state) {
        return ExpertStep {
            action: Action::zero(),
            phase: Phase::Done,
            stage: n,
        };
    }
    let p = plan(task);
    let max_step = task.params.max_step;
    let gripper = state.gripper_pos;
    let reopen = if state.gripper_aperture < 1.0 { 1.0 } else { 0.0 };

    let (phase, motion, action) = if let Some(close) = p.close {
        let subject = close.subject();
        let holding = state.attached.as_deref() == Some(subject)
            || state.hooked.as_deref() == Some(subject);
        let at_subject = gripper.distance(pos(state, subject)) <= ARRIVAL_TOLERANCE;
        if holding && state.gripper_aperture <= CLOSED_APERTURE + 1e-9 {
            (Phase::Transport, p.transport.unwrap_or(close), transport(&p, state, max_step))
        } else if holding || at_subject {
            (Phase::Close, close, Action::new(Vec3::ZERO, -1.0))
        } else {
            let delta = move_toward(gripper, pos(state, p.reach.subject()), 0.0, max_step);
            (Phase::Approach, p.reach, Action::new(delta, reopen))
        }
    } else if let Some(tr) = p.transport {
        let subject = pos(state, tr.subject());
        if gripper.distance(subject) <= task.params.push_radius {
            (Phase::Transport, tr, transport(&p, state, max_step))
        } else {
            let delta = move_toward(gripper, subject, PUSH_STANDOFF, max_step);
            (Phase::Approach, p.reach, Action::new(delta, reopen))
        }
    } else {
        let delta = move_toward(gripper, pos(state, p.reach.subject()), 0.0, max_step);
        (Phase::Approach, p.reach, Action::new(delta, reopen))
    };

    let next = task.step(state, &action);
    let stage = if task.success(&next) { n } else { motion.index };
    ExpertStep {
        action,
        phase,
        stage,
    }
}

fn transport(p: &Plan<'_>, state: &SceneState, max_step: f64) -> Action {
    let Some(tr) = p.transport else {
        return Action::zero();
    };
    let subject = pos(state, tr.subject());
    let dest = pos(state, tr.target().unwrap_or(GRIPPER));
    Action::new(move_toward(subject, dest, 0.0, max_step), 0.0)
}

/// Source of behaviour for rollouts and dataset collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutPolicy {
    Expert,
    /// Expert with Gaussian action noise of the given standard deviation.
    NoisyExpert(f64),
    Uniform,
}

pub fn policy_action(
    policy: RolloutPolicy,
    task: &TaskInstance,
    state: &SceneState,
    rng: &mut impl Rng,
) -> Action {
    match policy {
        RolloutPolicy::Expert => scripted_expert(task, state).action,
        RolloutPolicy::NoisyExpert(std) => {
            let a = scripted_expert(task, state).action.to_array();
            let noise = Normal::new(0.0, std).expect("valid std");
            let noisy: Vec<f64> = a.iter().map(|v| v + noise.sample(rng)).collect();
            Action::from_slice(&noisy).clamped()
        }
        RolloutPolicy::Uniform => {
            let mut u = || rng.random_range(-1.0..=1.0);
            Action::new(Vec3::new(u(), u(), u()), u())
        }
    }
}
