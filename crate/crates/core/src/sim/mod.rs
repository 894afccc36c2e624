//! Deterministic mass-spring fabric simulator with two kinematic gripper
//! anchors, a table plane and at most one fixed rigid object.

mod dynamics;
mod mesh;
mod scene;
pub mod trace;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dynamics::{kinetic_energy, mechanical_energy};
pub use mesh::{FabricMesh, Spring, SpringKind};
pub use scene::{ObjectKind, RigidScene, SuccessConfig};

use crate::constraints::BimanualAction;
use crate::geometry::{rot_z, Aabb, ObjectPose, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("object pose {0:?} lies outside the workspace")]
    ObjectOutsideWorkspace([f64; 3]),
    #[error("fabric footprint does not fit inside the workspace")]
    FabricOutsideWorkspace,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("action has non-finite components")]
    NonFiniteAction,
    #[error("the fabric is not grasped")]
    NotGrasped,
    #[error("anchor would be driven below the table")]
    AnchorBelowTable,
    #[error("no symbolic goal is defined for a contact-free scene")]
    NoGoal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    ContactFree,
    Box,
    Hanger,
}

impl ScenarioKind {
    pub fn object_kind(self) -> ObjectKind {
        match self {
            ScenarioKind::ContactFree => ObjectKind::None,
            ScenarioKind::Box => ObjectKind::Box,
            ScenarioKind::Hanger => ObjectKind::Hanger,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::ContactFree => "contact-free",
            ScenarioKind::Box => "box",
            ScenarioKind::Hanger => "hanger",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contact-free" => Ok(Self::ContactFree),
            "box" => Ok(Self::Box),
            "hanger" => Ok(Self::Hanger),
            other => Err(format!("unknown scenario kind `{other}`")),
        }
    }
}

/// Random perturbation of the initial fabric placement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementJitter {
    pub translation: f64,
    pub yaw: f64,
}

/// Everything needed to build the initial state of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub rows: usize,
    pub cols: usize,
    /// Length of the grasped edge (m).
    pub fabric_width: f64,
    /// Extent from the grasped edge to the far edge (m).
    pub fabric_length: f64,
    /// World position of the grasped-edge midpoint; the fabric extends
    /// towards -y (rotated by `fabric_yaw`).
    pub fabric_origin: [f64; 3],
    pub fabric_yaw: f64,
    pub object_pose: ObjectPose,
    pub object_dims: [f64; 3],
    pub table_height: f64,
    pub workspace: Aabb,
    pub grasp_offset: f64,
    pub jitter: PlacementJitter,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::ContactFree,
            rows: 16,
            cols: 16,
            fabric_width: 0.3,
            fabric_length: 0.3,
            fabric_origin: [0.0, -0.14, 0.0],
            fabric_yaw: 0.0,
            object_pose: ObjectPose::identity(),
            object_dims: [0.14, 0.09, 0.06],
            table_height: 0.0,
            workspace: Aabb::new([-0.45, -0.55, -0.03], [0.45, 0.45, 0.45]),
            grasp_offset: 0.0,
            jitter: PlacementJitter::default(),
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    /// Default box-covering scene: 14 x 9 x 6 cm box at the world origin.
    pub fn box_cover() -> Self {
        Self { kind: ScenarioKind::Box, object_dims: [0.14, 0.09, 0.06], ..Self::default() }
    }

    /// Default towel-hanging scene: a 2 cm bar whose top is 18 cm above the
    /// table. The fabric starts further back than for the box, leaving room
    /// to rise gradually.
    pub fn hanger() -> Self {
        Self {
            kind: ScenarioKind::Hanger,
            object_dims: [0.36, 0.02, 0.18],
            fabric_origin: [0.0, -0.22, 0.0],
            ..Self::default()
        }
    }

    pub fn with_object_pose(mut self, pose: ObjectPose) -> Self {
        self.object_pose = pose;
        self
    }
}

/// Physical and numerical parameters of the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub substeps_per_action: usize,
    /// Substep length (s).
    pub dt: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
    /// Total fabric mass (kg), spread evenly over the vertices.
    pub fabric_mass: f64,
    pub structural_stiffness: f64,
    pub shear_stiffness: f64,
    pub bend_stiffness: f64,
    /// Linear velocity damping (1/s).
    pub damping: f64,
    /// Damping along spring axes (N s/m).
    pub spring_damping: f64,
    pub friction: f64,
    /// Allowed penetration depth into table or object (m).
    pub penetration_tolerance: f64,
    /// Max substeps spent settling after release.
    pub settle_steps: usize,
    /// Kinetic energy (J) below which the fabric counts as at rest.
    pub rest_energy: f64,
    /// Structural springs are never stretched beyond this relative strain.
    pub max_strain: f64,
    pub strain_iterations: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            substeps_per_action: 100,
            dt: 0.001,
            gravity: 9.81,
            fabric_mass: 0.1,
            structural_stiffness: 150.0,
            shear_stiffness: 40.0,
            bend_stiffness: 2.0,
            damping: 12.0,
            spring_damping: 0.02,
            friction: 0.6,
            penetration_tolerance: 1e-3,
            settle_steps: 1500,
            rest_energy: 1e-6,
            max_strain: 0.1,
            strain_iterations: 15,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.dt,
            self.gravity,
            self.fabric_mass,
            self.structural_stiffness,
            self.shear_stiffness,
            self.bend_stiffness,
            self.damping,
            self.friction,
            self.penetration_tolerance,
        ];
        if self.substeps_per_action == 0 || positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SimError::InvalidScenario("physical constants must be strictly positive".into()));
        }
        Ok(())
    }

    /// Wall-clock duration of one macro-action (s).
    pub fn action_duration(&self) -> f64 {
        self.dt * self.substeps_per_action as f64
    }
}

/// Complete simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub mesh: FabricMesh,
    pub scene: RigidScene,
    pub anchors: [Vec3; 2],
    pub grasped: bool,
    pub time_step_index: usize,
}

impl SimState {
    pub fn grasped_vertices(&self) -> (usize, usize) {
        self.mesh.grasped_corners()
    }

    /// Minimum signed distance of any free vertex to the table and object.
    pub fn min_clearance(&self) -> f64 {
        let (l, r) = self.grasped_vertices();
        self.mesh
            .positions
            .iter()
            .enumerate()
            .filter(|(i, _)| !(self.grasped && (*i == l || *i == r)))
            .map(|(_, p)| self.scene.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Build the initial state: flat fabric on the table with the two grasped
/// corners held by the anchors.
pub fn init_scenario(spec: &ScenarioSpec) -> Result<SimState, SimError> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(SimError::InvalidScenario("mesh needs at least 2 x 2 vertices".into()));
    }
    if !(spec.fabric_width > 0.0 && spec.fabric_length > 0.0) {
        return Err(SimError::InvalidScenario("fabric size must be positive".into()));
    }
    let spacing = spec.fabric_width / (spec.cols - 1) as f64;
    let length_spacing = spec.fabric_length / (spec.rows - 1) as f64;
    if (spacing - length_spacing).abs() > 1e-9 {
        return Err(SimError::InvalidScenario("mesh must have square cells".into()));
    }
    let scene = RigidScene {
        object_kind: spec.kind.object_kind(),
        object_pose: match spec.kind {
            ScenarioKind::ContactFree => ObjectPose::identity(),
            _ => spec.object_pose,
        },
        object_dims: spec.object_dims,
        table_height: spec.table_height,
        workspace: spec.workspace,
    };
    if spec.kind != ScenarioKind::ContactFree {
        let p = Vec3::from(spec.object_pose.position);
        let inside = spec.workspace.contains(&Vec3::new(p.x, p.y, spec.workspace.min[2].max(p.z)));
        if !spec.object_pose.is_finite() || !inside {
            return Err(SimError::ObjectOutsideWorkspace(spec.object_pose.position));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (jx, jy, jyaw) = if spec.jitter.translation > 0.0 || spec.jitter.yaw > 0.0 {
        let t = spec.jitter.translation;
        let y = spec.jitter.yaw;
        (
            if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 },
            if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 },
            if y > 0.0 { rng.gen_range(-y..=y) } else { 0.0 },
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let origin = Vec3::new(spec.fabric_origin[0] + jx, spec.fabric_origin[1] + jy, spec.table_height);
    let rot = rot_z(spec.fabric_yaw + jyaw);

    let mut mesh = FabricMesh::flat(spec.rows, spec.cols, spacing);
    for p in mesh.positions.iter_mut() {
        *p = rot * *p + origin;
    }
    if !mesh.positions.iter().all(|p| spec.workspace.contains(p)) {
        return Err(SimError::FabricOutsideWorkspace);
    }
    let (l, r) = mesh.grasped_corners();
    for i in [l, r] {
        mesh.positions[i].z += spec.grasp_offset;
    }
    let anchors = [mesh.positions[l], mesh.positions[r]];
    Ok(SimState { mesh, scene, anchors, grasped: true, time_step_index: 0 })
}

/// Advance one macro-action: anchors move linearly by the commanded
/// displacements over the configured substeps.
pub fn step(state: &SimState, action: &BimanualAction, cfg: &SimConfig) -> Result<SimState, SimError> {
    if !state.grasped {
        return Err(SimError::NotGrasped);
    }
    if !action.is_finite() {
        return Err(SimError::NonFiniteAction);
    }
    let start = state.anchors;
    let target = [start[0] + action.left, start[1] + action.right];
    let floor = state.scene.table_height - cfg.penetration_tolerance;
    if target[0].z < floor || target[1].z < floor {
        return Err(SimError::AnchorBelowTable);
    }
    let mut next = state.clone();
    let n = cfg.substeps_per_action;
    let velocity = [action.left / cfg.action_duration(), action.right / cfg.action_duration()];
    for k in 1..=n {
        let frac = k as f64 / n as f64;
        let anchors = if k == n {
            target
        } else {
            [start[0] + action.left * frac, start[1] + action.right * frac]
        };
        dynamics::substep(&mut next, cfg, Some((anchors, velocity)));
    }
    next.anchors = target;
    let (l, r) = next.grasped_vertices();
    next.mesh.positions[l] = target[0];
    next.mesh.positions[r] = target[1];
    next.time_step_index += 1;
    Ok(next)
}

/// Open the grippers and let the fabric come to rest.
pub fn release_and_settle(state: &SimState, cfg: &SimConfig) -> SimState {
    let mut next = state.clone();
    next.grasped = false;
    let check_every = cfg.substeps_per_action.max(1);
    for k in 0..cfg.settle_steps {
        dynamics::substep(&mut next, cfg, None);
        if (k + 1) % check_every == 0 && kinetic_energy(&next, cfg) < cfg.rest_energy {
            break;
        }
    }
    next
}

/// Whether the symbolic fabric/object relation holds.
pub fn check_success(state: &SimState, cfg: &SuccessConfig) -> Result<bool, SimError> {
    state.scene.is_goal_established(&state.mesh, cfg).ok_or(SimError::NoGoal)
}
