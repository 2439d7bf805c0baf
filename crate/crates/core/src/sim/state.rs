use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Name under which the gripper is referenced from task specs.
pub const GRIPPER: &str = "gripper";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BodyKind {
    Rigid { graspable: bool, pushable: bool },
    Target,
    /// Handle fixed to the named articulation.
    Handle { articulation: String },
    Articulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub pos: Vec3,
    pub kind: BodyKind,
}

/// How the gripper drives an articulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Contact {
    /// Follows the gripper's projection on the axis while its handle is hooked.
    Hook,
    /// Advances along the axis when pushed by the gripper.
    Push,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Articulation {
    pub value: f64,
    pub min: f64,
    pub max: f64,
    pub base: Vec3,
    /// Unit direction of increasing `value`.
    pub axis: Vec3,
    pub contact: Contact,
    /// Handle entity and its offset from the articulated body.
    pub handle: Option<(String, Vec3)>,
}

impl Articulation {
    pub fn body_position(&self) -> Vec3 {
        self.base + self.axis * self.value
    }
}

/// Full kinematic state of one scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneState {
    pub time: u64,
    pub gripper_pos: Vec3,
    /// 0 is closed, 1 fully open.
    pub gripper_aperture: f64,
    pub objects: BTreeMap<String, Body>,
    pub articulations: BTreeMap<String, Articulation>,
    pub attached: Option<String>,
    /// Handle currently hooked, if any.
    pub hooked: Option<String>,
}

impl SceneState {
    /// Position of an entity; `"gripper"` resolves to the gripper.
    pub fn position(&self, entity: &str) -> Option<Vec3> {
        if entity == GRIPPER {
            return Some(self.gripper_pos);
        }
        self.objects.get(entity).map(|b| b.pos)
    }

    pub fn has_entity(&self, entity: &str) -> bool {
        entity == GRIPPER || self.objects.contains_key(entity)
    }

    pub fn articulation_value(&self, entity: &str) -> Option<f64> {
        self.articulations.get(entity).map(|a| a.value)
    }

    /// Recomputes positions of articulated bodies and their handles. Call it
    /// after editing an articulation value by hand.
    pub fn sync_articulations(&mut self) {
        for (name, art) in &self.articulations {
            let body = art.body_position();
            if let Some(b) = self.objects.get_mut(name) {
                b.pos = body;
            }
            if let Some((handle, offset)) = &art.handle {
                if let Some(h) = self.objects.get_mut(handle) {
                    h.pos = body + *offset;
                }
            }
        }
    }

    /// Articulation driven by a handle.
    pub fn articulation_of_handle(&self, handle: &str) -> Option<&str> {
        match &self.objects.get(handle)?.kind {
            BodyKind::Handle { articulation } => Some(articulation),
            _ => None,
        }
    }
}

/// Commanded motion for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    /// Each component in [-1, 1], scaled by the maximum step length.
    pub delta: Vec3,
    /// Negative closes, positive opens.
    pub gripper_cmd: f64,
}

impl Action {
    pub const DIM: usize = 4;

    pub fn new(delta: Vec3, gripper_cmd: f64) -> Self {
        Action { delta, gripper_cmd }
    }

    pub fn zero() -> Self {
        Action::default()
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Action::new(Vec3::new(a[0], a[1], a[2]), a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.delta.x, self.delta.y, self.delta.z, self.gripper_cmd]
    }

    /// Componentwise clamp to [-1, 1]; NaN components become 0.
    pub fn clamped(self) -> Action {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Action::new(
            Vec3::new(c(self.delta.x), c(self.delta.y), c(self.delta.z)),
            c(self.gripper_cmd),
        )
    }
}
