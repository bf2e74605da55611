//! Planar dual-arm simulator: scenarios, scripted expert, rollouts and
//! evaluation metrics.

mod eval;
mod expert;
mod rollout;
mod scenario;

use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::gmm::GmmError;
use crate::kinematics::KinematicsError;
use crate::manipulability::ManipulabilityError;
use crate::spd::SpdError;

pub use eval::{evaluate_suite, metrics_csv, MetricsRow, SuiteEntry, METRICS_HEADER};
pub use expert::{
    demos_to_dataset, demos_to_manifold_points, observe, read_demo, scripted_expert, write_demo,
    Demonstration, StepRecord, DEMO_SCHEMA,
};
pub use rollout::{rollout, success_predicate, Policy, PostureCost, RolloutReport};
pub use scenario::{
    EpisodeStart, ExpertConfig, Keyframe, KeyframeProfile, PostureProfile, Randomization, Scenario,
    SuccessCriteria, TaskKind, TaskSpec, TRACKED_DIM,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("waypoint at step {step} unreachable (residual {error:.3e})")]
    Unreachable { step: usize, error: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid demonstration: {0}")]
    Demo(String),
    #[error("demonstration schema {found} is not supported (expected {expected}); regenerate with gen-demos")]
    SchemaVersion { found: String, expected: u32 },
    #[error("policy horizons incompatible with scenario: {0}")]
    Horizon(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Manipulability(#[from] ManipulabilityError),
    #[error(transparent)]
    Spd(#[from] SpdError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Splits one user seed into independent streams (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
