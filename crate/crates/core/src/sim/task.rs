use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::{Articulation, Body, BodyKind, Contact, SceneState};
use crate::geometry::Vec3;
use crate::grammar::{
    parse_task_spec, validate_task_spec, EntityRole, SceneSchema, TaskSpec, ValidationIssue,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Reach,
    PickPlace,
    PushBack,
    DrawerOpen,
    ButtonPress,
    WindowClose,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::Reach,
        TaskId::PickPlace,
        TaskId::PushBack,
        TaskId::DrawerOpen,
        TaskId::ButtonPress,
        TaskId::WindowClose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::PickPlace => "pickplace",
            TaskId::PushBack => "pushback",
            TaskId::DrawerOpen => "draweropen",
            TaskId::ButtonPress => "buttonpress",
            TaskId::WindowClose => "windowclose",
        }
    }

    /// Shipped DSL source for the task's decomposition.
    pub fn spec_source(self) -> &'static str {
        match self {
            TaskId::Reach => include_str!("../../tasks/reach.task"),
            TaskId::PickPlace => include_str!("../../tasks/pickplace.task"),
            TaskId::PushBack => include_str!("../../tasks/pushback.task"),
            TaskId::DrawerOpen => include_str!("../../tasks/draweropen.task"),
            TaskId::ButtonPress => include_str!("../../tasks/buttonpress.task"),
            TaskId::WindowClose => include_str!("../../tasks/windowclose.task"),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = TaskId::ALL.iter().map(|t| t.name()).collect();
                format!("unknown task '{s}' (valid: {})", names.join(", "))
            })
    }
}

/// Physical constants of the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// Half edge length of the workspace cube (m).
    pub workspace_half: f64,
    /// Translation for a unit action component (m).
    pub max_step: f64,
    /// Aperture change for a unit gripper command.
    pub aperture_rate: f64,
    pub grasp_radius: f64,
    pub push_radius: f64,
    /// Half extent of the rendered top-down view (m).
    pub view_half_extent: f64,
    pub resolution: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            workspace_half: 0.5,
            max_step: 0.01,
            aperture_rate: 0.1,
            grasp_radius: 0.03,
            push_radius: 0.025,
            view_half_extent: 0.32,
            resolution: 64,
        }
    }
}

/// Axis-aligned box of initial placements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Region {
    pub const fn new(lo: Vec3, hi: Vec3) -> Self {
        Region { lo, hi }
    }

    pub const fn flat(x: (f64, f64), y: (f64, f64)) -> Self {
        Region {
            lo: Vec3::new(x.0, y.0, 0.0),
            hi: Vec3::new(x.1, y.1, 0.0),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let u = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        Vec3::new(
            u(rng, self.lo.x, self.hi.x),
            u(rng, self.lo.y, self.hi.y),
            u(rng, self.lo.z, self.hi.z),
        )
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (self.lo.x..=self.hi.x).contains(&p.x)
            && (self.lo.y..=self.hi.y).contains(&p.y)
            && (self.lo.z..=self.hi.z).contains(&p.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BodyTemplate {
    Rigid {
        name: String,
        region: Region,
        graspable: bool,
        pushable: bool,
    },
    Target {
        name: String,
        region: Region,
    },
    Articulated {
        name: String,
        base: Region,
        axis: Vec3,
        limits: (f64, f64),
        initial: f64,
        contact: Contact,
        handle: Option<(String, Vec3)>,
        /// Target marker placed where the articulation reaches this value.
        marker: Option<(String, f64)>,
    },
}

/// One of the built-in manipulation tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: TaskId,
    pub schema: SceneSchema,
    pub spec: TaskSpec,
    pub params: SimParams,
    pub gripper_home: Vec3,
    pub bodies: Vec<BodyTemplate>,
    /// Pairs that must start at least this far apart.
    pub min_separation: Vec<(String, String, f64)>,
}

fn rigid(name: &str, region: Region, graspable: bool, pushable: bool) -> BodyTemplate {
    BodyTemplate::Rigid {
        name: name.into(),
        region,
        graspable,
        pushable,
    }
}

fn target(name: &str, region: Region) -> BodyTemplate {
    BodyTemplate::Target {
        name: name.into(),
        region,
    }
}

impl TaskInstance {
    pub fn new(id: TaskId) -> Self {
        Self::with_params(id, SimParams::default())
    }

    pub fn with_params(id: TaskId, params: SimParams) -> Self {
        let spec = parse_task_spec(id.spec_source()).expect("shipped task specs parse");
        let handle_offset = Vec3::new(0.0, -0.04, 0.0);
        let (gripper_home, bodies, min_separation) = match id {
            TaskId::Reach => (
                Vec3::new(0.0, -0.2, 0.0),
                vec![target("goal", Region::flat((-0.2, 0.2), (-0.05, 0.25)))],
                vec![],
            ),
            TaskId::PickPlace => (
                Vec3::new(0.0, -0.2, 0.0),
                vec![
                    rigid("puck", Region::flat((-0.15, 0.15), (-0.05, 0.1)), true, false),
                    target("goal", Region::flat((-0.15, 0.15), (0.0, 0.2))),
                ],
                vec![("puck".into(), "goal".into(), 0.05)],
            ),
            TaskId::PushBack => (
                Vec3::new(0.0, 0.25, 0.0),
                vec![
                    rigid("puck", Region::flat((-0.08, 0.08), (0.0, 0.1)), false, true),
                    target("goal", Region::flat((-0.08, 0.08), (-0.2, -0.1))),
                ],
                vec![],
            ),
            TaskId::DrawerOpen => (
                Vec3::new(0.0, -0.2, 0.0),
                vec![BodyTemplate::Articulated {
                    name: "drawer".into(),
                    base: Region::flat((-0.1, 0.1), (0.1, 0.2)),
                    axis: Vec3::new(0.0, -1.0, 0.0),
                    limits: (0.0, 0.15),
                    initial: 0.0,
                    contact: Contact::Hook,
                    handle: Some(("handle".into(), handle_offset)),
                    marker: Some(("goal".into(), 0.15)),
                }],
                vec![],
            ),
            TaskId::ButtonPress => (
                Vec3::new(0.0, -0.2, 0.0),
                vec![BodyTemplate::Articulated {
                    name: "button".into(),
                    base: Region::flat((-0.1, 0.1), (0.15, 0.25)),
                    axis: Vec3::new(0.0, 1.0, 0.0),
                    limits: (0.0, 0.05),
                    initial: 0.0,
                    contact: Contact::Push,
                    handle: None,
                    marker: Some(("goal".into(), 0.05)),
                }],
                vec![],
            ),
            TaskId::WindowClose => (
                Vec3::new(0.0, -0.2, 0.0),
                vec![BodyTemplate::Articulated {
                    name: "window".into(),
                    base: Region::flat((-0.15, -0.05), (0.1, 0.2)),
                    axis: Vec3::new(1.0, 0.0, 0.0),
                    limits: (0.0, 0.15),
                    initial: 0.15,
                    contact: Contact::Hook,
                    handle: Some(("handle".into(), handle_offset)),
                    marker: Some(("goal".into(), 0.0)),
                }],
                vec![],
            ),
        };
        let schema = schema_for(&bodies);
        TaskInstance {
            id,
            schema,
            spec,
            params,
            gripper_home,
            bodies,
            min_separation,
        }
    }

    /// Replaces the task's decomposition, checking it against the scene.
    pub fn with_spec(mut self, spec: TaskSpec) -> Result<Self, Vec<ValidationIssue>> {
        let issues = validate_task_spec(&spec, &self.schema);
        if issues.is_empty() {
            self.spec = spec;
            Ok(self)
        } else {
            Err(issues)
        }
    }

    /// Deterministic initial scene for `seed`.
    pub fn reset(&self, seed: u64) -> SceneState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let state = self.sample_scene(&mut rng);
            let separated = self.min_separation.iter().all(|(a, b, d)| {
                match (state.position(a), state.position(b)) {
                    (Some(pa), Some(pb)) => pa.distance(pb) >= *d,
                    _ => true,
                }
            });
            if separated {
                return state;
            }
        }
    }

    fn sample_scene(&self, rng: &mut ChaCha8Rng) -> SceneState {
        let mut state = SceneState {
            time: 0,
            gripper_pos: self.gripper_home,
            gripper_aperture: 1.0,
            ..SceneState::default()
        };
        for template in &self.bodies {
            match template {
                BodyTemplate::Rigid {
                    name,
                    region,
                    graspable,
                    pushable,
                } => {
                    state.objects.insert(
                        name.clone(),
                        Body {
                            pos: region.sample(rng),
                            kind: BodyKind::Rigid {
                                graspable: *graspable,
                                pushable: *pushable,
                            },
                        },
                    );
                }
                BodyTemplate::Target { name, region } => {
                    state.objects.insert(
                        name.clone(),
                        Body {
                            pos: region.sample(rng),
                            kind: BodyKind::Target,
                        },
                    );
                }
                BodyTemplate::Articulated {
                    name,
                    base,
                    axis,
                    limits,
                    initial,
                    contact,
                    handle,
                    marker,
                } => {
                    let art = Articulation {
                        value: *initial,
                        min: limits.0,
                        max: limits.1,
                        base: base.sample(rng),
                        axis: *axis,
                        contact: *contact,
                        handle: handle.clone(),
                    };
                    let body = art.body_position();
                    state.objects.insert(
                        name.clone(),
                        Body {
                            pos: body,
                            kind: BodyKind::Articulated,
                        },
                    );
                    if let Some((h, offset)) = handle {
                        state.objects.insert(
                            h.clone(),
                            Body {
                                pos: body + *offset,
                                kind: BodyKind::Handle {
                                    articulation: name.clone(),
                                },
                            },
                        );
                    }
                    if let Some((m, at)) = marker {
                        state.objects.insert(
                            m.clone(),
                            Body {
                                pos: art.base + art.axis * *at,
                                kind: BodyKind::Target,
                            },
                        );
                    }
                    state.articulations.insert(name.clone(), art);
                }
            }
        }
        state
    }

    /// Entities whose distances make up the dense baseline reward, and the
    /// entity whose grasp or hook earns its bonus.
    pub fn distance_terms(&self) -> (Vec<(String, String)>, Option<String>) {
        let mut terms = Vec::new();
        let mut bonus = None;
        for m in &self.spec.motions {
            match m.target() {
                None if m.kind == crate::grammar::MotionKind::Reach => {
                    terms.push((super::state::GRIPPER.to_string(), m.subject().to_string()));
                }
                None => bonus = Some(m.subject().to_string()),
                Some(t) => terms.push((m.subject().to_string(), t.to_string())),
            }
        }
        (terms, bonus)
    }
}

fn schema_for(bodies: &[BodyTemplate]) -> SceneSchema {
    let mut entities = vec![(super::state::GRIPPER.to_string(), EntityRole::Gripper)];
    for b in bodies {
        match b {
            BodyTemplate::Rigid { name, .. } => entities.push((name.clone(), EntityRole::Rigid)),
            BodyTemplate::Target { name, .. } => {
                entities.push((name.clone(), EntityRole::Target))
            }
            BodyTemplate::Articulated {
                name,
                handle,
                marker,
                ..
            } => {
                entities.push((name.clone(), EntityRole::Articulated));
                if let Some((h, _)) = handle {
                    entities.push((h.clone(), EntityRole::Handle));
                }
                if let Some((m, _)) = marker {
                    entities.push((m.clone(), EntityRole::Target));
                }
            }
        }
    }
    SceneSchema { entities }
}

/// Flat observation vector for internal-state mode.
///
/// Layout: gripper xyz, aperture, attached flag, hooked flag, then xyz of every
/// non-gripper schema entity in schema order, then each of those positions
/// relative to the gripper in the same order, then the value of every
/// articulation in schema order.
pub fn observe(task: &TaskInstance, state: &SceneState) -> Vec<f64> {
    let mut obs = Vec::with_capacity(observation_len(task));
    obs.extend(state.gripper_pos.to_array());
    obs.push(state.gripper_aperture);
    obs.push(if state.attached.is_some() { 1.0 } else { 0.0 });
    obs.push(if state.hooked.is_some() { 1.0 } else { 0.0 });
    let others = task
        .schema
        .entities
        .iter()
        .filter(|(_, r)| *r != EntityRole::Gripper);
    for (name, _) in others.clone() {
        obs.extend(state.position(name).unwrap_or_default().to_array());
    }
    for (name, _) in others.clone() {
        let p = state.position(name).unwrap_or_default();
        obs.extend((p - state.gripper_pos).to_array());
    }
    for (name, role) in others {
        if *role == EntityRole::Articulated {
            obs.push(state.articulation_value(name).unwrap_or(0.0));
        }
    }
    obs
}

pub fn observation_len(task: &TaskInstance) -> usize {
    let mut n = 6;
    for (_, role) in &task.schema.entities {
        match role {
            EntityRole::Gripper => {}
            EntityRole::Articulated => n += 7,
            _ => n += 6,
        }
    }
    n
}
