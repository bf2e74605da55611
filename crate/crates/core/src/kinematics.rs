//! Planar revolute chains and the dual-arm composite Jacobians.
//!
//! Twists are ordered `(vx, vy, ω)`. Single-arm Jacobians are expressed in the
//! world frame; the relative Jacobian is expressed in the left end-effector
//! frame.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Task-space dimension of a planar twist.
pub const TASK_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("joint vector has length {found}, chain has {expected} joints")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid dual-arm system: {0}")]
    InvalidSystem(String),
    #[error("invalid grasp: {0}")]
    InvalidGrasp(String),
    #[error("matrix has rank {rank}, needs rank {required}")]
    RankDeficient { rank: usize, required: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainRepr")]
pub struct ChainSpec {
    pub link_lengths: Vec<f64>,
    pub base_position: [f64; 2],
    pub base_orientation: f64,
}

#[derive(Deserialize)]
struct ChainRepr {
    link_lengths: Vec<f64>,
    base_position: [f64; 2],
    base_orientation: f64,
}

impl TryFrom<ChainRepr> for ChainSpec {
    type Error = KinematicsError;
    fn try_from(r: ChainRepr) -> Result<Self, Self::Error> {
        ChainSpec::new(r.link_lengths, r.base_position, r.base_orientation)
    }
}

impl ChainSpec {
    pub fn new(
        link_lengths: Vec<f64>,
        base_position: [f64; 2],
        base_orientation: f64,
    ) -> Result<Self, KinematicsError> {
        if link_lengths.len() < 2 {
            return Err(KinematicsError::InvalidChain(format!(
                "needs at least 2 links, got {}",
                link_lengths.len()
            )));
        }
        if link_lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(KinematicsError::InvalidChain(
                "link lengths must be positive".into(),
            ));
        }
        if !(base_position.iter().all(|x| x.is_finite()) && base_orientation.is_finite()) {
            return Err(KinematicsError::InvalidChain(
                "base pose must be finite".into(),
            ));
        }
        Ok(Self {
            link_lengths,
            base_position,
            base_orientation,
        })
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    fn check(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::LengthMismatch {
                expected: self.dof(),
                found: q.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinationMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemRepr")]
pub struct DualArmSystem {
    pub left: ChainSpec,
    pub right: ChainSpec,
    pub coordination_mode: CoordinationMode,
}

#[derive(Deserialize)]
struct SystemRepr {
    left: ChainSpec,
    right: ChainSpec,
    coordination_mode: CoordinationMode,
}

impl TryFrom<SystemRepr> for DualArmSystem {
    type Error = KinematicsError;
    fn try_from(r: SystemRepr) -> Result<Self, Self::Error> {
        DualArmSystem::new(r.left, r.right, r.coordination_mode)
    }
}

impl DualArmSystem {
    pub fn new(
        left: ChainSpec,
        right: ChainSpec,
        coordination_mode: CoordinationMode,
    ) -> Result<Self, KinematicsError> {
        if left.base_position == right.base_position {
            return Err(KinematicsError::InvalidSystem(
                "left and right bases coincide".into(),
            ));
        }
        Ok(Self {
            left,
            right,
            coordination_mode,
        })
    }

    pub fn dof(&self) -> usize {
        self.left.dof() + self.right.dof()
    }

    fn check(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        self.left.check(&q.q_left)?;
        self.right.check(&q.q_right)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub q_left: Vec<f64>,
    pub q_right: Vec<f64>,
}

impl JointConfig {
    pub fn new(q_left: Vec<f64>, q_right: Vec<f64>) -> Self {
        Self { q_left, q_right }
    }

    /// Splits a stacked `[q_left; q_right]` vector according to the system.
    pub fn from_stacked(sys: &DualArmSystem, q: &[f64]) -> Result<Self, KinematicsError> {
        if q.len() != sys.dof() {
            return Err(KinematicsError::LengthMismatch {
                expected: sys.dof(),
                found: q.len(),
            });
        }
        let (l, r) = q.split_at(sys.left.dof());
        Ok(Self::new(l.to_vec(), r.to_vec()))
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.q_left.iter().chain(&self.q_right).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraspRepr")]
pub struct GraspSpec {
    pub object_position: [f64; 2],
    pub left_contact_offset: [f64; 2],
    pub right_contact_offset: [f64; 2],
}

#[derive(Deserialize)]
struct GraspRepr {
    object_position: [f64; 2],
    left_contact_offset: [f64; 2],
    right_contact_offset: [f64; 2],
}

impl TryFrom<GraspRepr> for GraspSpec {
    type Error = KinematicsError;
    fn try_from(r: GraspRepr) -> Result<Self, Self::Error> {
        GraspSpec::new(
            r.object_position,
            r.left_contact_offset,
            r.right_contact_offset,
        )
    }
}

impl GraspSpec {
    pub fn new(
        object_position: [f64; 2],
        left_contact_offset: [f64; 2],
        right_contact_offset: [f64; 2],
    ) -> Result<Self, KinematicsError> {
        let all = object_position
            .iter()
            .chain(&left_contact_offset)
            .chain(&right_contact_offset);
        if !all.into_iter().all(|x| x.is_finite()) {
            return Err(KinematicsError::InvalidGrasp("non-finite offset".into()));
        }
        Ok(Self {
            object_position,
            left_contact_offset,
            right_contact_offset,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub position: Vector2<f64>,
    pub orientation: f64,
}

pub fn rotation2(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Positions of every joint followed by the end-effector.
pub fn joint_positions(chain: &ChainSpec, q: &[f64]) -> Result<Vec<Vector2<f64>>, KinematicsError> {
    chain.check(q)?;
    let mut p = Vector2::from(chain.base_position);
    let mut theta = chain.base_orientation;
    let mut out = Vec::with_capacity(q.len() + 1);
    out.push(p);
    for (l, qi) in chain.link_lengths.iter().zip(q) {
        theta += qi;
        p += Vector2::new(theta.cos(), theta.sin()) * *l;
        out.push(p);
    }
    Ok(out)
}

pub fn forward_kinematics(chain: &ChainSpec, q: &[f64]) -> Result<Pose2, KinematicsError> {
    let positions = joint_positions(chain, q)?;
    Ok(Pose2 {
        position: positions[positions.len() - 1],
        orientation: chain.base_orientation + q.iter().sum::<f64>(),
    })
}

/// World-frame geometric Jacobian (3 × n).
pub fn jacobian(chain: &ChainSpec, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
    let positions = joint_positions(chain, q)?;
    let ee = positions[positions.len() - 1];
    let n = q.len();
    let mut j = DMatrix::zeros(TASK_DIM, n);
    for i in 0..n {
        let r = ee - positions[i];
        j[(0, i)] = -r.y;
        j[(1, i)] = r.x;
        j[(2, i)] = 1.0;
    }
    Ok(j)
}

/// Cross-product matrix: `skew(p) v == p × v`.
pub fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// Planar reduction of `Ψ = [[I, -S(p)], [0, I]]`: the translational rows pick
/// up the `z`-rotation column of `-S(p)`, i.e. the moment arm `(-p_y, p_x)`.
pub fn wrench_transform(p: &Vector2<f64>) -> Matrix3<f64> {
    let s = skew(&Vector3::new(p.x, p.y, 0.0));
    let mut psi = Matrix3::identity();
    psi[(0, 2)] = -s[(0, 2)];
    psi[(1, 2)] = -s[(1, 2)];
    psi
}

/// Planar reduction of `Ω = diag(R, R)`: the rotation acts on the linear part
/// and is the identity on the scalar angular rate.
pub fn rotation_transform(angle: f64) -> Matrix3<f64> {
    let r = rotation2(angle);
    let mut omega = Matrix3::identity();
    omega.fixed_view_mut::<2, 2>(0, 0).copy_from(&r);
    omega
}

fn to_dmatrix(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

/// `J_e = diag(J_l, J_r)`, shape `(2·3) × (n_l + n_r)`.
pub fn extended_jacobian(
    sys: &DualArmSystem,
    q: &JointConfig,
) -> Result<DMatrix<f64>, KinematicsError> {
    sys.check(q)?;
    let jl = jacobian(&sys.left, &q.q_left)?;
    let jr = jacobian(&sys.right, &q.q_right)?;
    let (nl, nr) = (jl.ncols(), jr.ncols());
    let mut je = DMatrix::zeros(2 * TASK_DIM, nl + nr);
    je.view_mut((0, 0), (TASK_DIM, nl)).copy_from(&jl);
    je.view_mut((TASK_DIM, nl), (TASK_DIM, nr)).copy_from(&jr);
    Ok(je)
}

/// `G = [G_l, G_r]`, with `G_i = [[1, 0, -r_y], [0, 1, r_x], [0, 0, 1]]`.
pub fn grasp_matrix(grasp: &GraspSpec) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(TASK_DIM, 2 * TASK_DIM);
    for (block, r) in [grasp.left_contact_offset, grasp.right_contact_offset]
        .iter()
        .enumerate()
    {
        let c = block * TASK_DIM;
        g[(0, c)] = 1.0;
        g[(1, c + 1)] = 1.0;
        g[(2, c + 2)] = 1.0;
        g[(0, c + 2)] = -r[1];
        g[(1, c + 2)] = r[0];
    }
    g
}

/// Moore–Penrose pseudoinverse. Fails unless the matrix has full rank
/// `min(rows, cols)`.
pub fn grasp_pseudoinverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>, KinematicsError> {
    let required = g.nrows().min(g.ncols());
    let svd = g.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < required {
        return Err(KinematicsError::RankDeficient { rank, required });
    }
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut sigma_inv = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        sigma_inv[(i, i)] = 1.0 / s;
    }
    Ok(v_t.transpose() * sigma_inv * u.transpose())
}

/// Pose of the right end-effector expressed in the left end-effector frame.
pub fn relative_pose(sys: &DualArmSystem, q: &JointConfig) -> Result<Pose2, KinematicsError> {
    sys.check(q)?;
    let l = forward_kinematics(&sys.left, &q.q_left)?;
    let r = forward_kinematics(&sys.right, &q.q_right)?;
    Ok(Pose2 {
        position: rotation2(l.orientation).transpose() * (r.position - l.position),
        orientation: r.orientation - l.orientation,
    })
}

/// Relative Jacobian `J_rel = [-Ψ Ω_{El,Bl} J_l | Ω_{El,Br} J_r]`, with the
/// arm Jacobians taken in their own base frames.
pub fn relative_jacobian(
    sys: &DualArmSystem,
    q: &JointConfig,
) -> Result<DMatrix<f64>, KinematicsError> {
    relative_jacobian_from(sys, q, None)
}

/// Same as [`relative_jacobian`], optionally overriding the left-arm
/// Jacobian (used to freeze the left arm).
pub fn relative_jacobian_from(
    sys: &DualArmSystem,
    q: &JointConfig,
    left_override: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, KinematicsError> {
    sys.check(q)?;
    let left_ee = forward_kinematics(&sys.left, &q.q_left)?;
    let right_ee = forward_kinematics(&sys.right, &q.q_right)?;
    let jl_world = match left_override {
        Some(j) => j.clone(),
        None => jacobian(&sys.left, &q.q_left)?,
    };
    let jr_world = jacobian(&sys.right, &q.q_right)?;
    let base_l = sys.left.base_orientation;
    let base_r = sys.right.base_orientation;
    let jl_base = to_dmatrix(&rotation_transform(-base_l)) * jl_world;
    let jr_base = to_dmatrix(&rotation_transform(-base_r)) * jr_world;

    let omega_l = to_dmatrix(&rotation_transform(base_l - left_ee.orientation));
    let omega_r = to_dmatrix(&rotation_transform(base_r - left_ee.orientation));
    let p = rotation2(left_ee.orientation).transpose() * (right_ee.position - left_ee.position);
    let psi = to_dmatrix(&wrench_transform(&p));

    let left_block = -(psi * omega_l * jl_base);
    let right_block = omega_r * jr_base;
    let (nl, nr) = (left_block.ncols(), right_block.ncols());
    let mut jrel = DMatrix::zeros(TASK_DIM, nl + nr);
    jrel.view_mut((0, 0), (TASK_DIM, nl)).copy_from(&left_block);
    jrel.view_mut((0, nl), (TASK_DIM, nr))
        .copy_from(&right_block);
    Ok(jrel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn chain(lengths: &[f64]) -> ChainSpec {
        ChainSpec::new(lengths.to_vec(), [0.0, 0.0], 0.0).unwrap()
    }

    #[test]
    fn fk_straight_and_bent() {
        let p = forward_kinematics(&chain(&[1.0, 1.0]), &[0.0, 0.0]).unwrap();
        assert!((p.position - Vector2::new(2.0, 0.0)).norm() < 1e-15);
        assert_eq!(p.orientation, 0.0);
        let p = forward_kinematics(&chain(&[1.0, 1.0, 1.0]), &[FRAC_PI_2, 0.0, 0.0]).unwrap();
        assert!((p.position - Vector2::new(0.0, 3.0)).norm() < 1e-15);
        assert!((p.orientation - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn fk_length_mismatch() {
        let err = forward_kinematics(&chain(&[1.0, 1.0]), &[0.0]).unwrap_err();
        assert_eq!(
            err,
            KinematicsError::LengthMismatch {
                expected: 2,
                found: 1
            }
        );
    }

    #[test]
    fn chain_validation() {
        assert!(ChainSpec::new(vec![1.0], [0.0, 0.0], 0.0).is_err());
        assert!(ChainSpec::new(vec![1.0, -1.0], [0.0, 0.0], 0.0).is_err());
        let c = chain(&[1.0, 1.0]);
        assert!(DualArmSystem::new(c.clone(), c, CoordinationMode::Symmetric).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian(&chain(&[1.0, 1.0]), &[0.0, FRAC_PI_2]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 0.0]);
        assert!((j.rows(0, 2) - expected).amax() < 1e-15);
        let j = jacobian(&chain(&[1.0, 1.0]), &[0.0, 0.0]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 1.0]);
        assert!((j.rows(0, 2) - expected).amax() < 1e-15);
    }

    #[test]
    fn skew_examples() {
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(s, expected);
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(s.transpose(), -s);
    }

    #[test]
    fn grasp_zero_offsets() {
        let g = grasp_matrix(&GraspSpec::new([0.0, 0.0], [0.0, 0.0], [0.0, 0.0]).unwrap());
        let mut expected = DMatrix::zeros(3, 6);
        expected.view_mut((0, 0), (3, 3)).fill_with_identity();
        expected.view_mut((0, 3), (3, 3)).fill_with_identity();
        assert_eq!(g, expected);
        let pinv = grasp_pseudoinverse(&g).unwrap();
        let mut half = DMatrix::zeros(6, 3);
        half.view_mut((0, 0), (3, 3)).fill_with_identity();
        half.view_mut((3, 0), (3, 3)).fill_with_identity();
        assert!((pinv - half * 0.5).amax() < 1e-14);
    }

    #[test]
    fn grasp_offset_coupling() {
        let g = grasp_matrix(&GraspSpec::new([0.0, 0.0], [1.0, 0.0], [0.0, 0.0]).unwrap());
        assert_eq!(g[(0, 2)], 0.0);
        assert_eq!(g[(1, 2)], 1.0);
    }

    #[test]
    fn pseudoinverse_rejects_rank_deficient() {
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(
            grasp_pseudoinverse(&g),
            Err(KinematicsError::RankDeficient {
                rank: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn extended_jacobian_blocks() {
        let arm = chain(&[1.0, 0.5, 0.25]);
        let mut right = arm.clone();
        right.base_position = [1.0, 0.0];
        let sys = DualArmSystem::new(arm, right, CoordinationMode::Symmetric).unwrap();
        let q = JointConfig::new(vec![0.1, 0.2, 0.3], vec![0.1, 0.2, 0.3]);
        let je = extended_jacobian(&sys, &q).unwrap();
        assert_eq!(je.shape(), (6, 6));
        assert!((je.view((0, 0), (3, 3)) - je.view((3, 3), (3, 3))).amax() < 1e-14);
        assert!(je.view((0, 3), (3, 3)).iter().all(|x| *x == 0.0));
        assert!(je.view((3, 0), (3, 3)).iter().all(|x| *x == 0.0));
        let jl = jacobian(&sys.left, &q.q_left).unwrap();
        assert_eq!(je.view((0, 0), (3, 3)).clone_owned(), jl);
    }

    #[test]
    fn wrench_transform_is_identity_at_zero_offset() {
        assert_eq!(wrench_transform(&Vector2::zeros()), Matrix3::identity());
        let psi = wrench_transform(&Vector2::new(2.0, 3.0));
        assert_eq!(psi[(0, 2)], -3.0);
        assert_eq!(psi[(1, 2)], 2.0);
    }

    #[test]
    fn relative_jacobian_frozen_left_arm() {
        let left = ChainSpec::new(vec![0.4, 0.3, 0.2], [-0.3, 0.0], 0.3).unwrap();
        let right = ChainSpec::new(vec![0.4, 0.3, 0.2], [0.3, 0.0], 2.0).unwrap();
        let sys = DualArmSystem::new(left, right, CoordinationMode::Asymmetric).unwrap();
        let q = JointConfig::new(vec![0.5, 0.4, -0.2], vec![0.3, 0.6, 0.1]);
        let zero = DMatrix::zeros(3, 3);
        let jrel = relative_jacobian_from(&sys, &q, Some(&zero)).unwrap();
        assert!(jrel.columns(0, 3).iter().all(|x| *x == 0.0));
        let theta_l = forward_kinematics(&sys.left, &q.q_left)
            .unwrap()
            .orientation;
        let jr_base =
            to_dmatrix(&rotation_transform(-2.0)) * jacobian(&sys.right, &q.q_right).unwrap();
        let expected = to_dmatrix(&rotation_transform(2.0 - theta_l)) * jr_base;
        assert!((jrel.columns(3, 3) - expected).amax() < 1e-14);
    }
}
