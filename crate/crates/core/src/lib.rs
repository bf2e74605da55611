//! Manipulability-aware trajectory diffusion for planar dual-arm systems.
//!
//! The crate is layered bottom-up: [`spd`] geometry, [`kinematics`],
//! [`manipulability`] ellipsoids, the [`gmm`] mixture model over ellipsoid
//! profiles, the [`diffusion`] policy, and the [`sim`] environment.

// NaN-rejecting checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod gmm;
pub mod kinematics;
pub mod manipulability;
pub mod sim;
pub mod spd;

pub use diffusion::{DiffusionError, PolicyCheckpoint};
pub use gmm::{GmmError, ManifoldPoint, Metric, SpdGmmModel};
pub use kinematics::{
    ChainSpec, CoordinationMode, DualArmSystem, GraspSpec, JointConfig, KinematicsError,
};
pub use manipulability::{BmeMode, BmeSample, ManipulabilityError, WeightingMatrix};
pub use sim::{Scenario, SimError};
pub use spd::{SpdError, SpdMatrix, TangentMatrix};
