//! State-alignment reward extracted from a single demonstration.
//!
//! Demonstration indices are 0-based here. The progress term of the reward
//! is `J + 1`, so that every demonstration stage reached adds one.

use serde::{Deserialize, Serialize};

use crate::demo::Demonstration;
use crate::priors::{kabsch_align, PriorModels, RigidEstimate};
use crate::state::{centroid_distance, polygon_iou, KeypointState};

/// Source of the rigid transform between a state and its subgoal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationMode {
    #[default]
    Learned,
    Kabsch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Metres per radian when adding rotation to translation.
    pub w_r: f64,
    pub w_p: f64,
    pub w_n: f64,
    /// IoU with the final demonstration state above which the task counts as done.
    pub tau_i: f64,
    pub registration: RegistrationMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_r: 0.1, w_p: 2.0, w_n: 5.0, tau_i: 0.7, registration: RegistrationMode::Learned }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if [self.w_r, self.w_p, self.w_n].iter().any(|w| !(*w >= 0.0)) {
            return Err("reward weights must be non-negative".into());
        }
        if !(self.tau_i > 0.0 && self.tau_i < 1.0) {
            return Err("tau_i must lie in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Iou,
    CentroidFallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgressEstimate {
    pub j: usize,
    pub similarity: Similarity,
}

/// Best-matching demonstration index by footprint IoU; if no demonstration
/// state overlaps at all, the one with the nearest centroid. Ties go to the
/// later index.
pub fn estimate_progress(s: &KeypointState, demo: &Demonstration) -> ProgressEstimate {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, e) in demo.states.iter().enumerate() {
        let iou = polygon_iou(s, e).value;
        if iou >= best.1 {
            best = (j, iou);
        }
    }
    if best.1 > 0.0 {
        return ProgressEstimate { j: best.0, similarity: Similarity::Iou };
    }
    let mut nearest = (0usize, f64::INFINITY);
    for (j, e) in demo.states.iter().enumerate() {
        let d = centroid_distance(s, e);
        if d <= nearest.1 {
            nearest = (j, d);
        }
    }
    ProgressEstimate { j: nearest.0, similarity: Similarity::CentroidFallback }
}

pub fn subgoal_index(j: usize, demo: &Demonstration) -> usize {
    (j + 1).min(demo.len() - 1)
}

/// Next demonstration state after the estimated progress (the last state
/// once the end is reached).
pub fn subgoal<'a>(s: &KeypointState, demo: &'a Demonstration) -> &'a KeypointState {
    &demo.states[subgoal_index(estimate_progress(s, demo).j, demo)]
}

/// Anything that estimates the rigid transform taking a source state onto a
/// target state.
pub trait Registrar {
    fn register(&self, sources: &[&KeypointState], targets: &[&KeypointState]) -> Vec<RigidEstimate>;
}

/// Closed-form least-squares registration.
#[derive(Clone, Copy, Debug, Default)]
pub struct KabschRegistrar;

impl Registrar for KabschRegistrar {
    fn register(&self, sources: &[&KeypointState], targets: &[&KeypointState]) -> Vec<RigidEstimate> {
        sources.iter().zip(targets).map(|(s, t)| kabsch_align(s, t).estimate()).collect()
    }
}

impl Registrar for PriorModels {
    fn register(&self, sources: &[&KeypointState], targets: &[&KeypointState]) -> Vec<RigidEstimate> {
        self.register_batch(sources, targets)
    }
}

/// Pick the registrar named by the config.
pub fn registrar<'a>(mode: RegistrationMode, models: &'a PriorModels) -> &'a dyn Registrar {
    match mode {
        RegistrationMode::Learned => models,
        RegistrationMode::Kabsch => &KabschRegistrar,
    }
}

/// `|t|_1 + w_r |euler|_1`.
pub fn transform_magnitude(est: &RigidEstimate, w_r: f64) -> f64 {
    est.translation.iter().map(|v| v.abs()).sum::<f64>() + w_r * est.euler.iter().map(|v| v.abs()).sum::<f64>()
}

/// Registration distance from `s` to the subgoal following index `j`.
pub fn positive_distance(s: &KeypointState, demo: &Demonstration, j: usize, reg: &dyn Registrar, w_r: f64) -> f64 {
    let target = &demo.states[subgoal_index(j, demo)];
    transform_magnitude(&reg.register(&[s], &[target])[0], w_r)
}

/// Overshoot penalty: the distance to the final demonstration state, active
/// only when progress sits at the final state and `s` is nearer the final
/// state than the one before it.
pub fn negative_distance(s: &KeypointState, demo: &Demonstration, j: usize) -> f64 {
    let t = demo.len();
    if j + 2 <= t {
        // j <= T - 2
        return 0.0;
    }
    let to_last = s.mean_distance(&demo.states[t - 1]);
    let to_previous = s.mean_distance(&demo.states[t - 2]);
    if to_last < to_previous {
        to_last
    } else {
        0.0
    }
}

/// Reward terms of one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub progress: ProgressEstimate,
    pub d_p: f64,
    pub d_n: f64,
    pub value: f64,
    /// The termination classifier fires on this state.
    pub terminated: bool,
}

pub fn reward_from_parts(j: usize, d_p: f64, d_n: f64, cfg: &RewardConfig) -> f64 {
    (j + 1) as f64 - cfg.w_p * d_p - cfg.w_n * d_n
}

pub fn reward(s: &KeypointState, demo: &Demonstration, reg: &dyn Registrar, cfg: &RewardConfig) -> f64 {
    reward_batch(std::slice::from_ref(s), demo, reg, cfg)[0].value
}

/// Rewards of many states with a single batched registration call.
pub fn reward_batch(states: &[KeypointState], demo: &Demonstration, reg: &dyn Registrar, cfg: &RewardConfig) -> Vec<RewardBreakdown> {
    let progress: Vec<ProgressEstimate> = states.iter().map(|s| estimate_progress(s, demo)).collect();
    let sources: Vec<&KeypointState> = states.iter().collect();
    let targets: Vec<&KeypointState> = progress.iter().map(|p| &demo.states[subgoal_index(p.j, demo)]).collect();
    let estimates = reg.register(&sources, &targets);
    states
        .iter()
        .zip(progress)
        .zip(estimates)
        .map(|((s, p), est)| {
            let d_p = transform_magnitude(&est, cfg.w_r);
            let d_n = negative_distance(s, demo, p.j);
            let terminated = p.j == demo.len() - 1 && polygon_iou(s, demo.last()).value > cfg.tau_i;
            RewardBreakdown { progress: p, d_p, d_n, value: reward_from_parts(p.j, d_p, d_n, cfg), terminated }
        })
        .collect()
}

/// Footprint overlap with the final demonstration state exceeds `tau_i`
/// and progress has reached that state.
pub fn is_terminated(s: &KeypointState, demo: &Demonstration, cfg: &RewardConfig) -> bool {
    polygon_iou(s, demo.last()).value > cfg.tau_i && estimate_progress(s, demo).j == demo.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_z, ObjectPose, Vec3};
    use crate::sim::ScenarioKind;
    use crate::state::PointCloud;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn square(dx: f64, dy: f64, lift: f64) -> KeypointState {
        KeypointState::new(vec![
            Vec3::new(-0.15 + dx, dy, lift),
            Vec3::new(0.15 + dx, dy, lift),
            Vec3::new(-0.15 + dx, dy - 0.3 + lift, 0.0),
            Vec3::new(0.15 + dx, dy - 0.3 + lift, 0.0),
        ])
    }

    /// Fabric pulled forward and lifted a little more at every stage.
    fn demo(t: usize) -> Demonstration {
        Demonstration {
            states: (0..t).map(|k| square(0.0, 0.03 * k as f64, 0.02 * k as f64)).collect(),
            scenario: ScenarioKind::Box,
            object_pose: ObjectPose::identity(),
            final_cloud: PointCloud { points: vec![Vec3::zeros()] },
            config_hash: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn progress_finds_exact_state() {
        let d = demo(6);
        for k in 0..6 {
            let p = estimate_progress(&d.states[k], &d);
            assert_eq!(p, ProgressEstimate { j: k, similarity: Similarity::Iou });
        }
    }

    #[test]
    fn progress_falls_back_to_centroids() {
        let d = demo(6);
        let far = d.states[4].translated(&Vec3::new(2.0, 0.0, 0.0));
        let p = estimate_progress(&far, &d);
        assert_eq!(p.similarity, Similarity::CentroidFallback);
        assert_eq!(p.j, 4);
    }

    #[test]
    fn replay_progress_is_non_decreasing() {
        let d = demo(8);
        let js: Vec<usize> = d.states.iter().map(|s| estimate_progress(s, &d).j).collect();
        assert!(js.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn subgoal_is_next_state_and_clamps() {
        let d = demo(5);
        assert_eq!(subgoal(&d.states[0], &d), &d.states[1]);
        assert_eq!(subgoal(&d.states[4], &d), &d.states[4]);
        for s in &d.states {
            assert!(d.states.contains(subgoal(s, &d)));
        }
    }

    #[test]
    fn kabsch_positive_distance_examples() {
        let d = demo(5);
        assert!(positive_distance(&d.states[2], &d, 1, &KabschRegistrar, 0.1) < 1e-12);
        let shifted = d.states[3].translated(&Vec3::new(-0.05, 0.0, 0.0));
        let dp = positive_distance(&shifted, &d, 2, &KabschRegistrar, 0.1);
        assert!((dp - 0.05).abs() < 1e-9, "{dp}");
    }

    #[test]
    fn negative_distance_gate() {
        let d = demo(5);
        let t = d.len();
        assert_eq!(negative_distance(&d.states[0], &d, 0), 0.0);
        // extrapolate one more stage past the end
        let last = &d.states[t - 1];
        let prev = &d.states[t - 2];
        let beyond = KeypointState::new(last.points.iter().zip(&prev.points).map(|(a, b)| a + (a - b)).collect());
        assert_eq!(estimate_progress(&beyond, &d).j, t - 1);
        assert!(negative_distance(&beyond, &d, t - 1) > 0.0);
        assert_eq!(negative_distance(last, &d, t - 1), 0.0);
        for j in 0..=t - 2 {
            assert_eq!(negative_distance(&beyond, &d, j), 0.0);
        }
    }

    #[test]
    fn reward_matches_its_definition() {
        let d = demo(6);
        let cfg = RewardConfig::default();
        for j in 0..6 {
            let expected = (j + 1) as f64 - cfg.w_p * positive_distance(&d.states[j], &d, j, &KabschRegistrar, cfg.w_r);
            assert!((reward(&d.states[j], &d, &KabschRegistrar, &cfg) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nearer_subgoal_means_higher_reward() {
        let d = demo(6);
        let cfg = RewardConfig::default();
        let near = d.last().translated(&Vec3::new(0.005, 0.0, 0.0));
        let far = d.last().translated(&Vec3::new(0.02, 0.0, 0.0));
        assert_eq!(estimate_progress(&near, &d).j, estimate_progress(&far, &d).j);
        assert!(reward(&near, &d, &KabschRegistrar, &cfg) > reward(&far, &d, &KabschRegistrar, &cfg));
    }

    #[test]
    fn termination_rules() {
        let d = demo(5);
        let cfg = RewardConfig::default();
        assert!(is_terminated(d.last(), &d, &cfg));
        assert!(!is_terminated(&d.states[0], &d, &cfg));
        // a threshold equal to the achieved IoU does not fire
        let shifted = d.last().translated(&Vec3::new(0.03, 0.0, 0.0));
        let iou = polygon_iou(&shifted, d.last()).value;
        assert!(is_terminated(&shifted, &d, &RewardConfig { tau_i: iou - 1e-9, ..cfg.clone() }));
        assert!(!is_terminated(&shifted, &d, &RewardConfig { tau_i: iou, ..cfg }));
    }

    proptest! {
        #[test]
        fn reward_decreases_in_both_distances(j in 0usize..10, dp in 0.0f64..1.0, dn in 0.0f64..1.0, eps in 1e-6f64..0.1) {
            let cfg = RewardConfig::default();
            prop_assert!(reward_from_parts(j, dp + eps, dn, &cfg) < reward_from_parts(j, dp, dn, &cfg));
            prop_assert!(reward_from_parts(j, dp, dn + eps, &cfg) < reward_from_parts(j, dp, dn, &cfg));
        }

        #[test]
        fn progress_is_invariant_under_common_motion(yaw in -3.1f64..3.1, tx in -0.5f64..0.5, ty in -0.5f64..0.5, k in 0usize..6,
                                                      jx in -0.02f64..0.02, jy in -0.02f64..0.02) {
            let d = demo(6);
            let s = d.states[k].translated(&Vec3::new(jx, jy, 0.0));
            let r = rot_z(yaw);
            let t = Vec3::new(tx, ty, 0.0);
            let mv = |s: &KeypointState| KeypointState::new(s.points.iter().map(|p| r * p + t).collect());
            let moved = Demonstration { states: d.states.iter().map(mv).collect(), ..d.clone() };
            prop_assert_eq!(estimate_progress(&s, &d).j, estimate_progress(&mv(&s), &moved).j);
        }
    }
}
