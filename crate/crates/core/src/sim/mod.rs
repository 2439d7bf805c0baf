//! Quasi-static kinematic simulator for desk-scale manipulation tasks.
//!
//! There are no dynamics: the gripper integrates clamped displacement
//! commands, grasped objects are parented to it, hooked articulations follow
//! its projection on their axis, and pushable bodies are carried while the
//! gripper presses into them. Every function here is pure; `step` returns a
//! new state.

pub mod expert;
pub mod render;
mod state;
mod task;

pub use state::{Action, Articulation, Body, BodyKind, Contact, SceneState, GRIPPER};
pub use task::{
    observation_len, observe, BodyTemplate, Region, SimParams, TaskId, TaskInstance,
};

use crate::geometry::Vec3;
use crate::grammar::GoalPredicate;

/// Episode length in control steps, for training and evaluation alike.
pub const HORIZON: usize = 100;

/// Advances the scene by one control step.
pub fn step(state: &SceneState, action: &Action, params: &SimParams) -> SceneState {
    let action = action.clamped();
    let mut next = state.clone();
    next.time += 1;

    let old_gripper = state.gripper_pos;
    next.gripper_pos = (old_gripper + action.delta * params.max_step)
        .clamp_cube(params.workspace_half);
    let disp = next.gripper_pos - old_gripper;

    let old_aperture = state.gripper_aperture;
    next.gripper_aperture =
        (old_aperture + action.gripper_cmd * params.aperture_rate).clamp(0.0, 1.0);
    let closing = next.gripper_aperture < old_aperture;
    if next.gripper_aperture > old_aperture {
        next.attached = None;
        next.hooked = None;
    }

    if let Some(name) = &next.attached {
        if let Some(body) = next.objects.get_mut(name) {
            body.pos = (body.pos + disp).clamp_cube(params.workspace_half);
        }
    }

    if let Some(handle) = next.hooked.clone() {
        if let Some(art_name) = next.articulation_of_handle(&handle).map(str::to_owned) {
            if let Some(art) = next.articulations.get_mut(&art_name) {
                art.value = (art.value + disp.dot(art.axis)).clamp(art.min, art.max);
            }
        }
    }

    // Pushing uses the pre-step contact configuration.
    let attached = next.attached.clone();
    for (name, body) in next.objects.iter_mut() {
        if let state::BodyKind::Rigid { pushable: true, .. } = body.kind {
            if attached.as_deref() == Some(name.as_str()) {
                continue;
            }
            let offset = body.pos - old_gripper;
            if offset.norm() <= params.push_radius && disp.dot(offset) > 0.0 {
                body.pos = (body.pos + disp).clamp_cube(params.workspace_half);
            }
        }
    }
    for art in next.articulations.values_mut() {
        if art.contact != Contact::Push {
            continue;
        }
        let offset = art.body_position() - old_gripper;
        if offset.norm() <= params.push_radius && disp.dot(offset) > 0.0 {
            let advance = disp.dot(art.axis).max(0.0);
            art.value = (art.value + advance).clamp(art.min, art.max);
        }
    }
    next.sync_articulations();

    if closing {
        engage(&mut next, params);
    }

    // A hook slips once the gripper leaves the handle.
    if let Some(handle) = &next.hooked {
        let slipped = next
            .position(handle)
            .map_or(true, |p| p.distance(next.gripper_pos) > params.grasp_radius);
        if slipped {
            next.hooked = None;
        }
    }
    next
}

/// Attaches the nearest graspable object, or hooks the nearest handle, within
/// the grasp radius.
fn engage(state: &mut SceneState, params: &SimParams) {
    let mut best: Option<(f64, &str, bool)> = None;
    for (name, body) in &state.objects {
        let is_handle = match &body.kind {
            state::BodyKind::Rigid { graspable: true, .. } => false,
            state::BodyKind::Handle { .. } => true,
            _ => continue,
        };
        if (is_handle && state.hooked.is_some()) || (!is_handle && state.attached.is_some()) {
            continue;
        }
        let d = body.pos.distance(state.gripper_pos);
        if d <= params.grasp_radius && best.is_none_or(|(bd, _, _)| d < bd) {
            best = Some((d, name, is_handle));
        }
    }
    if let Some((_, name, is_handle)) = best {
        let name = name.to_string();
        if is_handle {
            state.hooked = Some(name);
        } else {
            state.attached = Some(name);
        }
    }
}

/// Evaluates a goal predicate; `None` when an entity is missing.
pub fn goal_holds(goal: &GoalPredicate, state: &SceneState) -> Option<bool> {
    match goal {
        GoalPredicate::Near { a, b, threshold } => {
            Some(state.position(a)?.distance(state.position(b)?) <= *threshold)
        }
        GoalPredicate::Opened {
            entity,
            min_extension,
        } => Some(state.articulation_value(entity)? >= *min_extension),
        GoalPredicate::Closed {
            entity,
            max_extension,
        } => Some(state.articulation_value(entity)? <= *max_extension),
        GoalPredicate::Pressed {
            entity,
            min_depression,
        } => Some(state.articulation_value(entity)? >= *min_depression),
    }
}

/// Whether the task's goal predicate holds on `state`.
pub fn success(task: &TaskInstance, state: &SceneState) -> bool {
    goal_holds(&task.spec.goal, state).unwrap_or(false)
}

impl TaskInstance {
    pub fn step(&self, state: &SceneState, action: &Action) -> SceneState {
        step(state, action, &self.params)
    }

    pub fn success(&self, state: &SceneState) -> bool {
        success(self, state)
    }
}

/// Checks the state invariants; returns a description of the first violation.
pub fn check_invariants(state: &SceneState, params: &SimParams) -> Result<(), String> {
    let half = params.workspace_half + 1e-12;
    let inside = |p: Vec3| p.x.abs() <= half && p.y.abs() <= half && p.z.abs() <= half;
    if !inside(state.gripper_pos) {
        return Err(format!("gripper outside workspace: {:?}", state.gripper_pos));
    }
    if !(0.0..=1.0).contains(&state.gripper_aperture) {
        return Err(format!("aperture {} out of range", state.gripper_aperture));
    }
    for (name, body) in &state.objects {
        if !inside(body.pos) {
            return Err(format!("{name} outside workspace: {:?}", body.pos));
        }
    }
    for (name, art) in &state.articulations {
        if art.value < art.min || art.value > art.max {
            return Err(format!("{name} value {} outside limits", art.value));
        }
    }
    if let Some(name) = &state.attached {
        let d = state
            .position(name)
            .ok_or_else(|| format!("attached to unknown {name}"))?
            .distance(state.gripper_pos);
        if d > params.grasp_radius + 1e-12 {
            return Err(format!("attached {name} at distance {d}"));
        }
    }
    Ok(())
}
