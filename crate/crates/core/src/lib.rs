//! One-shot imitation of contact-rich fabric manipulation.
//!
//! Generic priors (keypoint dynamics, registration, a constrained action
//! space) are learned by random exploration in a contact-free cloth scene; a
//! single observation-only demonstration of a new scene is turned into a
//! state-alignment reward; a safety-constrained cross-entropy MPC then
//! executes the new scene without exploring it.

pub mod constraints;
pub mod demo;
pub mod geometry;
pub mod harness;
pub mod mpc;
pub mod net;
pub mod priors;
pub mod reward;
pub mod sim;
pub mod state;

pub use constraints::{BimanualAction, ConstraintConfig, CostVerdict, Rule};
pub use geometry::{Aabb, ObjectPose, Vec3};
pub use sim::{ScenarioKind, ScenarioSpec, SimConfig, SimState};
pub use state::{KeypointLayout, KeypointState, PointCloud};

/// Short stable digest of any serializable configuration, embedded in every
/// artifact so outputs can be traced back to the settings that made them.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("configuration serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
