//! The valid bimanual action subset and the binary safety cost.
//!
//! Four rules make an action unsafe: the grippers end up too close or too
//! far apart, an arm moves against its fabric edge (which would fold the
//! cloth over itself), a keypoint leaves the workspace, or a gripper path
//! comes within the clearance distance of the rigid object.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::geometry::{angle_between, Aabb, Vec3};
use crate::sim::RigidScene;
use crate::state::{KeypointLayout, KeypointState};

/// End-effector displacements of the left and right grippers (m).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BimanualAction {
    pub left: Vec3,
    pub right: Vec3,
}

impl BimanualAction {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(left: Vec3, right: Vec3) -> Self {
        Self { left, right }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { left: Vec3::new(v[0], v[1], v[2]), right: Vec3::new(v[3], v[4], v[5]) }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.left.x, self.left.y, self.left.z, self.right.x, self.right.y, self.right.z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Clamp every component into `[-a_max, a_max]`.
    pub fn clamped(&self, a_max: f64) -> Self {
        Self::from_slice(&self.to_array().map(|v| v.clamp(-a_max, a_max)))
    }

    pub fn within_box(&self, a_max: f64) -> bool {
        self.to_array().iter().all(|v| v.abs() <= a_max)
    }

    /// Raise the vertical components so neither gripper (the first two
    /// keypoints of `s`) ends below `floor`.
    pub fn above_floor(&self, s: &KeypointState, floor: f64) -> Self {
        let mut a = *self;
        a.left.z = a.left.z.max(floor - s.points[0].z);
        a.right.z = a.right.z.max(floor - s.points[1].z);
        a
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    /// Grippers must stay farther apart than `close_ratio * edge_length`.
    pub close_ratio: f64,
    /// ... and closer than `far_ratio * edge_length`.
    pub far_ratio: f64,
    /// Max angle between an arm's motion and its fabric edge (rad).
    pub direction_limit: f64,
    /// Rest length of the grasped edge (m).
    pub edge_length: f64,
    /// World-frame workspace.
    pub workspace: Aabb,
    /// Per-component action bound (m).
    pub max_step: f64,
    /// Min distance between gripper paths and the rigid object (m).
    pub clearance: f64,
    /// Arm displacements shorter than this do not take part in the direction rule (m).
    pub min_arm_motion: f64,
    pub max_sampling_attempts: usize,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            close_ratio: 0.5,
            far_ratio: 1.1,
            direction_limit: PI / 3.0,
            edge_length: 0.3,
            workspace: Aabb::new([-0.45, -0.55, -0.03], [0.45, 0.45, 0.45]),
            max_step: 0.05,
            clearance: 0.01,
            min_arm_motion: 1e-6,
            max_sampling_attempts: 1000,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.close_ratio && self.close_ratio < 1.0 && 1.0 <= self.far_ratio) {
            return Err("need 0 < close_ratio < 1 <= far_ratio".into());
        }
        if !(0.0 < self.direction_limit && self.direction_limit < PI) {
            return Err("direction_limit must lie in (0, pi)".into());
        }
        if !(self.edge_length > 0.0 && self.max_step > 0.0 && self.clearance >= 0.0) {
            return Err("edge_length and max_step must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Distance,
    Direction,
    Workspace,
    Collision,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Distance, Rule::Direction, Rule::Workspace, Rule::Collision];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of violated rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RuleSet(u8);

impl RuleSet {
    pub fn insert(&mut self, rule: Rule) {
        self.0 |= rule.bit();
    }

    pub fn contains(&self, rule: Rule) -> bool {
        self.0 & rule.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Rule> + '_ {
        Rule::ALL.into_iter().filter(|r| self.contains(*r))
    }

    pub fn union(self, other: RuleSet) -> RuleSet {
        RuleSet(self.0 | other.0)
    }
}

impl FromIterator<Rule> for RuleSet {
    fn from_iter<I: IntoIterator<Item = Rule>>(iter: I) -> Self {
        let mut s = RuleSet::default();
        for r in iter {
            s.insert(r);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostVerdict {
    pub cost: u8,
    pub violated: RuleSet,
}

impl CostVerdict {
    pub fn from_rules(violated: RuleSet) -> Self {
        Self { cost: u8::from(!violated.is_empty()), violated }
    }

    pub fn is_safe(&self) -> bool {
        self.cost == 0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("action space exhausted after {0} attempts")]
    Exhausted(usize),
}

/// Gripper gap after the action lies strictly inside `(close, far) * L`.
pub fn check_distance(s: &KeypointState, a: &BimanualAction, cfg: &ConstraintConfig) -> bool {
    let gap = ((s.points[0] + a.left) - (s.points[1] + a.right)).norm();
    cfg.close_ratio * cfg.edge_length < gap && gap < cfg.far_ratio * cfg.edge_length
}

/// Each arm moves within `direction_limit` of its edge vector (far corner ->
/// grasped corner). Negligible arm motions count as angle 0; a degenerate
/// edge fails the rule.
pub fn check_direction(s: &KeypointState, a: &BimanualAction, cfg: &ConstraintConfig) -> bool {
    let edges = [s.points[0] - s.points[2], s.points[1] - s.points[3]];
    let arms = [a.left, a.right];
    let mut worst: f64 = 0.0;
    for (edge, arm) in edges.iter().zip(&arms) {
        if edge.norm() < cfg.min_arm_motion {
            return false;
        }
        if arm.norm() < cfg.min_arm_motion {
            continue;
        }
        worst = worst.max(angle_between(arm, edge));
    }
    worst < cfg.direction_limit
}

/// Every predicted keypoint lies inside the (closed) workspace box.
pub fn check_workspace(s_next: &KeypointState, cfg: &ConstraintConfig, scene: &RigidScene) -> bool {
    let frame = scene.frame();
    s_next.points.iter().all(|p| cfg.workspace.contains(&frame.to_world(p)))
}

/// Both straight gripper paths keep at least `clearance` from the object.
pub fn check_collision(s: &KeypointState, a: &BimanualAction, scene: &RigidScene, cfg: &ConstraintConfig) -> bool {
    let Some(solid) = scene.solid_local() else { return true };
    // tolerance for the closed threshold under rounding
    let eps = 1e-12;
    [(s.points[0], a.left), (s.points[1], a.right)]
        .iter()
        .all(|(p, d)| solid.segment_distance(p, &(p + d)) + eps >= cfg.clearance)
}

/// Binary safety cost of taking `a` in `s` and landing in `s_next`.
pub fn cost(
    s: &KeypointState,
    a: &BimanualAction,
    s_next: &KeypointState,
    scene: &RigidScene,
    cfg: &ConstraintConfig,
) -> CostVerdict {
    let mut violated = RuleSet::default();
    if !check_distance(s, a, cfg) {
        violated.insert(Rule::Distance);
    }
    if !check_direction(s, a, cfg) {
        violated.insert(Rule::Direction);
    }
    if !s_next.is_finite() || !check_workspace(s_next, cfg, scene) {
        violated.insert(Rule::Workspace);
    }
    if !check_collision(s, a, scene, cfg) {
        violated.insert(Rule::Collision);
    }
    CostVerdict::from_rules(violated)
}

/// Sampling-time next-state approximation: left-side keypoints follow the
/// left arm, right-side ones the right arm, edge midpoints in between.
pub fn rigid_prediction(s: &KeypointState, a: &BimanualAction) -> KeypointState {
    let layout = KeypointLayout { include_midpoints: s.len() >= 8 };
    let shares = layout.left_share();
    let points = s
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w = shares.get(i).copied().unwrap_or(0.5);
            p + a.left * w + a.right * (1.0 - w)
        })
        .collect();
    KeypointState::new(points)
}

/// Uniform rejection sampling of a safe action under the rigid approximation.
pub fn sample_valid_action<R: Rng + ?Sized>(
    s: &KeypointState,
    scene: &RigidScene,
    cfg: &ConstraintConfig,
    rng: &mut R,
) -> Result<BimanualAction, ConstraintError> {
    let a_max = cfg.max_step;
    for _ in 0..cfg.max_sampling_attempts {
        let mut v = [0.0; 6];
        for x in v.iter_mut() {
            *x = rng.gen_range(-a_max..=a_max);
        }
        let a = BimanualAction::from_slice(&v);
        if cost(s, &a, &rigid_prediction(s, &a), scene, cfg).is_safe() {
            return Ok(a);
        }
    }
    Err(ConstraintError::Exhausted(cfg.max_sampling_attempts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObjectPose;
    use crate::sim::ObjectKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Flat fabric, grasped edge along x at y = 0, far edge at y = -L.
    fn flat(gap: f64) -> KeypointState {
        KeypointState::new(vec![
            Vec3::new(-gap / 2.0, 0.0, 0.0),
            Vec3::new(gap / 2.0, 0.0, 0.0),
            Vec3::new(-gap / 2.0, -0.3, 0.0),
            Vec3::new(gap / 2.0, -0.3, 0.0),
        ])
    }

    fn box_scene() -> RigidScene {
        RigidScene {
            object_kind: ObjectKind::Box,
            object_pose: ObjectPose::new(Vec3::new(0.0, 0.2, 0.0), 0.0),
            object_dims: [0.14, 0.09, 0.06],
            table_height: 0.0,
            workspace: ConstraintConfig::default().workspace,
        }
    }

    fn free_scene() -> RigidScene {
        RigidScene::contact_free(0.0, ConstraintConfig::default().workspace)
    }

    #[test]
    fn distance_rule() {
        let cfg = ConstraintConfig::default();
        assert!(check_distance(&flat(0.30), &BimanualAction::zero(), &cfg));
        assert!(!check_distance(&flat(0.10), &BimanualAction::zero(), &cfg));
        assert!(!check_distance(&flat(0.34), &BimanualAction::zero(), &cfg));
    }

    #[test]
    fn direction_rule() {
        let cfg = ConstraintConfig::default();
        let s = flat(0.3);
        let along = BimanualAction::new(Vec3::new(0.0, 0.02, 0.0), Vec3::new(0.0, 0.03, 0.0));
        assert!(check_direction(&s, &along, &cfg));
        let perpendicular = BimanualAction::new(Vec3::new(0.02, 0.0, 0.0), Vec3::new(0.0, 0.03, 0.0));
        assert!(!check_direction(&s, &perpendicular, &cfg));
        assert!(check_direction(&s, &BimanualAction::zero(), &cfg));
        let mut degenerate = s.clone();
        degenerate.points[2] = degenerate.points[0];
        assert!(!check_direction(&degenerate, &BimanualAction::zero(), &cfg));
    }

    #[test]
    fn workspace_rule() {
        let cfg = ConstraintConfig::default();
        let scene = free_scene();
        let c = cfg.workspace.center();
        assert!(check_workspace(&KeypointState::new(vec![c; 4]), &cfg, &scene));
        let mut out = vec![c; 4];
        out[2].x = cfg.workspace.max[0] + 0.001;
        assert!(!check_workspace(&KeypointState::new(out), &cfg, &scene));
        let mut face = vec![c; 4];
        face[1].z = cfg.workspace.max[2];
        assert!(check_workspace(&KeypointState::new(face), &cfg, &scene));
    }

    #[test]
    fn collision_rule() {
        let cfg = ConstraintConfig::default();
        let s = flat(0.3);
        let through = BimanualAction::new(Vec3::new(0.0, 0.05, 0.0), Vec3::zeros());
        assert!(check_collision(&s, &through, &free_scene(), &cfg));

        let scene = box_scene();
        // in the object frame the box occupies |x| < 0.07, |y| < 0.045, 0 < z < 0.06
        let s = KeypointState::new(vec![
            Vec3::new(0.0, -0.04, 0.03),
            Vec3::new(0.15, -0.04, 0.03),
            Vec3::new(0.0, -0.3, 0.0),
            Vec3::new(0.15, -0.3, 0.0),
        ]);
        let into_center = BimanualAction::new(Vec3::new(0.0, 0.04, 0.0), Vec3::zeros());
        assert!(!check_collision(&s, &into_center, &scene, &cfg));
        // skim the top face at exactly the clearance height
        let s = KeypointState::new(vec![
            Vec3::new(0.0, -0.04, 0.07),
            Vec3::new(0.2, -0.04, 0.07),
            Vec3::new(0.0, -0.3, 0.0),
            Vec3::new(0.2, -0.3, 0.0),
        ]);
        let skim = BimanualAction::new(Vec3::new(0.0, 0.05, 0.0), Vec3::zeros());
        assert!(check_collision(&s, &skim, &scene, &cfg));
    }

    #[test]
    fn cost_composition() {
        let cfg = ConstraintConfig::default();
        let scene = free_scene();
        let s = flat(0.3);
        let zero = BimanualAction::zero();
        let v = cost(&s, &zero, &s, &scene, &cfg);
        assert_eq!(v.cost, 0);
        assert!(v.violated.is_empty());

        let mut outside = s.clone();
        outside.points[3].y = -10.0;
        let v = cost(&s, &zero, &outside, &scene, &cfg);
        assert_eq!(v.cost, 1);
        assert_eq!(v.violated.iter().collect::<Vec<_>>(), vec![Rule::Workspace]);

        let scene = box_scene();
        let s = KeypointState::new(vec![
            Vec3::new(0.0, -0.04, 0.03),
            Vec3::new(0.05, -0.04, 0.03),
            Vec3::new(0.0, -0.3, 0.0),
            Vec3::new(0.05, -0.3, 0.0),
        ]);
        let a = BimanualAction::new(Vec3::new(0.0, 0.04, 0.0), Vec3::zeros());
        let v = cost(&s, &a, &rigid_prediction(&s, &a), &scene, &cfg);
        assert_eq!(v.cost, 1);
        assert!(v.violated.contains(Rule::Distance) && v.violated.contains(Rule::Collision));
    }

    #[test]
    fn sampling_returns_safe_and_reproducible_actions() {
        let cfg = ConstraintConfig::default();
        let scene = free_scene();
        let s = flat(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = sample_valid_action(&s, &scene, &cfg, &mut rng).unwrap();
        assert!(cost(&s, &a, &rigid_prediction(&s, &a), &scene, &cfg).is_safe());
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(a, sample_valid_action(&s, &scene, &cfg, &mut rng2).unwrap());
    }

    #[test]
    fn sampling_reports_exhaustion() {
        let cfg = ConstraintConfig { max_sampling_attempts: 50, ..Default::default() };
        // collapsed edge vectors make the direction rule unsatisfiable
        let s = KeypointState::new(vec![Vec3::zeros(), Vec3::new(0.3, 0.0, 0.0), Vec3::zeros(), Vec3::new(0.3, 0.0, 0.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_valid_action(&s, &free_scene(), &cfg, &mut rng), Err(ConstraintError::Exhausted(50)));
    }

    #[test]
    fn over_stretched_state_only_admits_gap_reducing_actions() {
        let cfg = ConstraintConfig::default();
        let scene = free_scene();
        let gap = cfg.far_ratio * cfg.edge_length + 1e-3;
        let s = flat(gap);
        // Monte-Carlo map of the feasible region
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut feasible = 0;
        for _ in 0..100_000 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-cfg.max_step..=cfg.max_step)).collect();
            let a = BimanualAction::from_slice(&v);
            if cost(&s, &a, &rigid_prediction(&s, &a), &scene, &cfg).is_safe() {
                feasible += 1;
                let new_gap = ((s.points[0] + a.left) - (s.points[1] + a.right)).norm();
                assert!(new_gap < gap);
            }
        }
        assert!(feasible > 0);
        let a = sample_valid_action(&s, &scene, &cfg, &mut rng).unwrap();
        let new_gap = ((s.points[0] + a.left) - (s.points[1] + a.right)).norm();
        assert!(new_gap < gap);
    }

    #[test]
    fn zero_action_valid_inside_band() {
        let cfg = ConstraintConfig::default();
        for gap in [0.16, 0.2, 0.3, 0.32] {
            let s = flat(gap);
            let z = BimanualAction::zero();
            assert!(cost(&s, &z, &s, &free_scene(), &cfg).is_safe());
        }
    }
}
