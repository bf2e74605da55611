//! Manipulability ellipsoids for single arms and dual-arm systems.
//!
//! `bam` builds the absolute ellipsoid of the grasped object from the extended
//! Jacobian and the grasp pseudoinverse; `brm` builds the relative ellipsoid
//! from the relative Jacobian. Both return the velocity ellipsoid matrix and
//! its inverse (the force ellipsoid).

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    extended_jacobian, grasp_matrix, grasp_pseudoinverse, jacobian, relative_jacobian, ChainSpec,
    DualArmSystem, GraspSpec, JointConfig, KinematicsError, TASK_DIM,
};
use crate::spd::{nearest_spd, SpdMatrix};

/// Relative eigenvalue floor applied before an ellipsoid is returned.
pub const RELATIVE_EIGEN_FLOOR: f64 = 1e-6;
/// Absolute lower bound on the eigenvalue floor.
pub const ABSOLUTE_EIGEN_FLOOR: f64 = 1e-9;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManipulabilityError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("weighting matrix must have full row rank and {expected} columns")]
    InvalidWeighting { expected: usize },
    #[error("task direction must be a unit vector (norm {norm})")]
    InvalidDirection { norm: f64 },
    #[error("direction has dimension {found}, ellipsoid has dimension {expected}")]
    DirectionDimension { expected: usize, found: usize },
}

/// Row selector applied to task-space twists before forming an ellipsoid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingMatrix {
    selector: DMatrix<f64>,
}

impl WeightingMatrix {
    pub fn new(selector: DMatrix<f64>) -> Result<Self, ManipulabilityError> {
        let expected = TASK_DIM;
        let rank = selector.clone().svd(false, false).rank(1e-12);
        if selector.ncols() != expected || rank != selector.nrows() {
            return Err(ManipulabilityError::InvalidWeighting { expected });
        }
        Ok(Self { selector })
    }

    /// Selects the two translational rows of a planar twist.
    pub fn translational() -> Self {
        let mut s = DMatrix::zeros(2, TASK_DIM);
        s[(0, 0)] = 1.0;
        s[(1, 1)] = 1.0;
        Self { selector: s }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.selector
    }

    pub fn output_dim(&self) -> usize {
        self.selector.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BmeMode {
    #[serde(rename = "BAM")]
    Bam,
    #[serde(rename = "BRM")]
    Brm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmeSample {
    #[serde(rename = "t")]
    pub time: f64,
    pub mode: BmeMode,
    pub velocity_bme: SpdMatrix,
    pub force_bme: SpdMatrix,
}

impl BmeSample {
    fn from_raw(raw: &DMatrix<f64>, mode: BmeMode) -> Self {
        let velocity_bme = clamp_ellipsoid(raw);
        let force_bme = velocity_bme.inverse();
        Self {
            time: 0.0,
            mode,
            velocity_bme,
            force_bme,
        }
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }
}

/// Eigenvalue floor used for ellipsoids: `1e-6 · λ_max`, at least `1e-9`.
pub fn ellipsoid_floor(m: &DMatrix<f64>) -> f64 {
    let lambda_max = SymmetricEigen::new(crate::spd::symmetrize(m))
        .eigenvalues
        .max();
    (RELATIVE_EIGEN_FLOOR * lambda_max).max(ABSOLUTE_EIGEN_FLOOR)
}

pub fn clamp_ellipsoid(m: &DMatrix<f64>) -> SpdMatrix {
    nearest_spd(m, ellipsoid_floor(m))
}

fn weighted_gram(w: &WeightingMatrix, a: &DMatrix<f64>) -> DMatrix<f64> {
    let wa = w.matrix() * a;
    &wa * wa.transpose()
}

/// Unclamped absolute velocity ellipsoid `W (G†)ᵀ J_e J_eᵀ G† Wᵀ`.
pub fn bam_matrix(
    sys: &DualArmSystem,
    q: &JointConfig,
    grasp: &GraspSpec,
    w: &WeightingMatrix,
) -> Result<DMatrix<f64>, ManipulabilityError> {
    let g_pinv = grasp_pseudoinverse(&grasp_matrix(grasp))?;
    let je = extended_jacobian(sys, q)?;
    Ok(weighted_gram(w, &(g_pinv.transpose() * je)))
}

/// Unclamped relative velocity ellipsoid `W J_rel J_relᵀ Wᵀ`.
pub fn brm_matrix(
    sys: &DualArmSystem,
    q: &JointConfig,
    w: &WeightingMatrix,
) -> Result<DMatrix<f64>, ManipulabilityError> {
    Ok(weighted_gram(w, &relative_jacobian(sys, q)?))
}

pub fn bam(
    sys: &DualArmSystem,
    q: &JointConfig,
    grasp: &GraspSpec,
    w: &WeightingMatrix,
) -> Result<BmeSample, ManipulabilityError> {
    Ok(BmeSample::from_raw(
        &bam_matrix(sys, q, grasp, w)?,
        BmeMode::Bam,
    ))
}

pub fn brm(
    sys: &DualArmSystem,
    q: &JointConfig,
    w: &WeightingMatrix,
) -> Result<BmeSample, ManipulabilityError> {
    Ok(BmeSample::from_raw(&brm_matrix(sys, q, w)?, BmeMode::Brm))
}

/// Yoshikawa ellipsoid `W J Jᵀ Wᵀ` of a single arm.
pub fn single_arm_manipulability(
    chain: &ChainSpec,
    q: &[f64],
    w: &WeightingMatrix,
) -> Result<SpdMatrix, ManipulabilityError> {
    Ok(clamp_ellipsoid(&weighted_gram(w, &jacobian(chain, q)?)))
}

/// Velocity transmission ratio along `u` normalized by the major semi-axis:
/// `(uᵀ M⁻¹ u)^{-1/2} / √λ_max(M)`.
pub fn tci(bme: &SpdMatrix, task_direction: &[f64]) -> Result<f64, ManipulabilityError> {
    if task_direction.len() != bme.dim() {
        return Err(ManipulabilityError::DirectionDimension {
            expected: bme.dim(),
            found: task_direction.len(),
        });
    }
    let u = DVector::from_column_slice(task_direction);
    let norm = u.norm();
    if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(ManipulabilityError::InvalidDirection { norm });
    }
    let inv = bme.inverse();
    let quad = (u.transpose() * inv.as_matrix() * &u)[(0, 0)];
    let alpha = quad.powf(-0.5);
    let lambda_max = bme.eigenvalues().last().copied().unwrap_or(1.0);
    Ok((alpha / lambda_max.sqrt()).clamp(0.0, 1.0))
}

/// Unit vector at `angle` radians, for building task directions.
pub fn unit_direction(angle: f64) -> [f64; 2] {
    let v = Vector2::new(angle.cos(), angle.sin());
    [v.x, v.y]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::CoordinationMode;

    fn two_link(base: [f64; 2]) -> ChainSpec {
        ChainSpec::new(vec![1.0, 1.0], base, 0.0).unwrap()
    }

    #[test]
    fn single_arm_example() {
        // JJᵀ = [[2, 1], [1, 1]] occurs at q = (0, -π/2); at (0, π/2) the
        // off-diagonal flips sign.
        let w = WeightingMatrix::translational();
        let m = single_arm_manipulability(
            &two_link([0.0, 0.0]),
            &[0.0, -std::f64::consts::FRAC_PI_2],
            &w,
        )
        .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        assert!((m.as_matrix() - expected).amax() < 1e-14);
        let m = single_arm_manipulability(
            &two_link([0.0, 0.0]),
            &[0.0, std::f64::consts::FRAC_PI_2],
            &w,
        )
        .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        assert!((m.as_matrix() - expected).amax() < 1e-14);
    }

    #[test]
    fn straight_arm_is_clamped() {
        let w = WeightingMatrix::translational();
        let m = single_arm_manipulability(&two_link([0.0, 0.0]), &[0.0, 0.0], &w).unwrap();
        let ev = m.eigenvalues();
        assert!((ev[0] - RELATIVE_EIGEN_FLOOR * ev[1]).abs() < 1e-15);
    }

    #[test]
    fn isotropic_configuration() {
        // l1 = √2 l2 with the elbow at 3π/4 gives J Jᵀ ∝ I.
        let chain = ChainSpec::new(vec![2f64.sqrt(), 1.0], [0.0, 0.0], 0.0).unwrap();
        let m = single_arm_manipulability(
            &chain,
            &[0.3, 3.0 * std::f64::consts::FRAC_PI_4],
            &WeightingMatrix::translational(),
        )
        .unwrap();
        let ev = m.eigenvalues();
        assert!((ev[1] / ev[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bam_worked_example() {
        let sys = DualArmSystem::new(
            two_link([-1.0, 0.0]),
            two_link([1.0, 0.0]),
            CoordinationMode::Symmetric,
        )
        .unwrap();
        let q = JointConfig::new(
            vec![0.0, -std::f64::consts::FRAC_PI_2],
            vec![0.0, -std::f64::consts::FRAC_PI_2],
        );
        let grasp = GraspSpec::new([0.0, 0.0], [0.0, 0.0], [0.0, 0.0]).unwrap();
        let sample = bam(&sys, &q, &grasp, &WeightingMatrix::translational()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5]);
        assert!((sample.velocity_bme.as_matrix() - expected).amax() < 1e-12);
        let prod = sample.force_bme.as_matrix() * sample.velocity_bme.as_matrix();
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-8);
        assert_eq!(sample.mode, BmeMode::Bam);
    }

    #[test]
    fn bam_clamps_singular_pose() {
        // Zero-offset grasp with both arms straight: every column points along y.
        let sys = DualArmSystem::new(
            two_link([-1.0, 0.0]),
            two_link([1.0, 0.0]),
            CoordinationMode::Symmetric,
        )
        .unwrap();
        let q = JointConfig::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let grasp = GraspSpec::new([0.0, 0.0], [0.0, 0.0], [0.0, 0.0]).unwrap();
        let sample = bam(&sys, &q, &grasp, &WeightingMatrix::translational()).unwrap();
        let ev = sample.velocity_bme.eigenvalues();
        assert!((ev[0] - RELATIVE_EIGEN_FLOOR * ev[1]).abs() < 1e-15);
    }

    #[test]
    fn brm_stretched_pose_is_clamped() {
        // Both arms straight along x with parallel end-effector frames: all
        // relative velocity is along y.
        let left = ChainSpec::new(vec![1.0, 1.0], [-3.0, 0.0], 0.0).unwrap();
        let right = ChainSpec::new(vec![1.0, 1.0], [3.0, 0.0], 0.0).unwrap();
        let sys = DualArmSystem::new(left, right, CoordinationMode::Asymmetric).unwrap();
        let q = JointConfig::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let raw = brm_matrix(&sys, &q, &WeightingMatrix::translational()).unwrap();
        assert!(raw[(0, 0)].abs() < 1e-14);
        let ev = brm(&sys, &q, &WeightingMatrix::translational())
            .unwrap()
            .velocity_bme
            .eigenvalues();
        assert!((ev[0] - RELATIVE_EIGEN_FLOOR * ev[1]).abs() < 1e-12);
    }

    #[test]
    fn tci_examples() {
        let i = SpdMatrix::identity(2);
        assert!((tci(&i, &unit_direction(0.7)).unwrap() - 1.0).abs() < 1e-12);
        let d = SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        assert!((tci(&d, &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((tci(&d, &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tci_rejects_bad_direction() {
        let i = SpdMatrix::identity(2);
        assert!(matches!(
            tci(&i, &[0.0, 0.0]),
            Err(ManipulabilityError::InvalidDirection { .. })
        ));
        assert!(matches!(
            tci(&i, &[2.0, 0.0]),
            Err(ManipulabilityError::InvalidDirection { .. })
        ));
        assert!(matches!(
            tci(&i, &[1.0]),
            Err(ManipulabilityError::DirectionDimension { .. })
        ));
    }

    #[test]
    fn weighting_validation() {
        assert!(WeightingMatrix::new(DMatrix::from_row_slice(
            2,
            3,
            &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]
        ))
        .is_err());
        assert!(WeightingMatrix::new(DMatrix::identity(3, 3)).is_ok());
    }

    #[test]
    fn bme_sample_json_shape() {
        let s = BmeSample::from_raw(&DMatrix::identity(2, 2), BmeMode::Brm).with_time(0.25);
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["t"], 0.25);
        assert_eq!(v["mode"], "BRM");
        assert_eq!(v["velocity_bme"]["dim"], 2);
    }
}
