use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, SimError};
use crate::diffusion::GuidanceConfig;
use crate::gmm::{gmr_condition, SpdGmmModel};
use crate::kinematics::{
    forward_kinematics, jacobian, relative_jacobian, relative_pose, CoordinationMode,
    DualArmSystem, GraspSpec, JointConfig,
};
use crate::manipulability::{bam, brm, tci, BmeMode, BmeSample, WeightingMatrix};
use crate::spd::{geodesic, SpdMatrix};

/// Position tasks tracked by both arms: 2 coordinates per end-effector.
pub const TRACKED_DIM: usize = 4;

const RESET_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BarLift,
    PlateWipe,
}

/// Task path. For `bar_lift` the grippers hold the bar at the grasp offsets
/// while its centre moves from `start` to `end`. For `plate_wipe` the left
/// gripper carries the plate from `start` to `end` while the right gripper
/// strokes back and forth in the plate frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    BarLift {
        grasp: GraspSpec,
        start: [f64; 2],
        end: [f64; 2],
    },
    PlateWipe {
        start: [f64; 2],
        end: [f64; 2],
        stroke_center: [f64; 2],
        stroke_amplitude: f64,
        strokes: f64,
    },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::BarLift { .. } => TaskKind::BarLift,
            TaskSpec::PlateWipe { .. } => TaskKind::PlateWipe,
        }
    }
}

/// A posture target at a normalized phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub phase: f64,
    pub bme: SpdMatrix,
}

/// Target ellipsoid as a function of normalized phase.
pub trait PostureProfile {
    fn target(&self, phase: f64) -> Result<SpdMatrix, SimError>;
}

/// Piecewise-geodesic interpolation between keyframes, constant outside.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeProfile<'a>(pub &'a [Keyframe]);

impl PostureProfile for KeyframeProfile<'_> {
    fn target(&self, phase: f64) -> Result<SpdMatrix, SimError> {
        let frames = self.0;
        let first = frames
            .first()
            .ok_or_else(|| SimError::Scenario("no posture keyframes".into()))?;
        if phase <= first.phase {
            return Ok(first.bme.clone());
        }
        for pair in frames.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if phase <= b.phase {
                let s = (phase - a.phase) / (b.phase - a.phase);
                return Ok(geodesic(&a.bme, &b.bme, s)?);
            }
        }
        Ok(frames[frames.len() - 1].bme.clone())
    }
}

impl PostureProfile for SpdGmmModel {
    fn target(&self, phase: f64) -> Result<SpdMatrix, SimError> {
        Ok(gmr_condition(self, phase)?.mean)
    }
}

/// Initial-state randomization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Randomization {
    /// Half-width of the uniform shift applied to the whole task path.
    pub path_shift: f64,
    /// Half-width of the uniform joint perturbation around the nominal posture.
    pub posture_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Null-space descent gain on the posture objective.
    pub gain: f64,
    /// Largest joint-space norm of one descent step.
    pub max_descent_step: f64,
    /// Standard deviation of the per-step null-space joint jitter.
    pub jitter: f64,
    pub ik_damping: f64,
    pub ik_iterations: usize,
    /// Probability that a demonstration descends the posture objective at
    /// all; the others only track the task path.
    #[serde(default = "full_attention")]
    pub posture_attention: f64,
    /// Standard deviation of the joint noise added to each commanded posture,
    /// so demonstrations include small deviations and their corrections.
    #[serde(default)]
    pub action_noise: f64,
}

fn full_attention() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriteria {
    /// Largest end-effector position error counted as on-path.
    pub tracking_tolerance: f64,
    /// Fraction of steps that must be on-path.
    pub tracking_fraction: f64,
    /// Threshold on the mean task compatibility over the hold segment.
    pub min_tci: f64,
    /// Length of the final segment where compatibility is scored.
    pub hold_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub system: DualArmSystem,
    pub task: TaskSpec,
    pub task_direction: [f64; 2],
    pub episode_length: usize,
    pub nominal_posture: Vec<f64>,
    pub posture_targets: Vec<Keyframe>,
    pub randomization: Randomization,
    pub expert: ExpertConfig,
    /// Largest per-step joint motion executed by the simulator.
    pub max_joint_step: f64,
    pub success: SuccessCriteria,
    /// Guidance settings frozen after calibration.
    pub guidance: GuidanceConfig,
}

/// Randomized start of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStart {
    pub path_shift: [f64; 2],
    pub q: Vec<f64>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        let [dx, dy] = self.task_direction;
        if ((dx * dx + dy * dy).sqrt() - 1.0).abs() > 1e-9 {
            return bad("task_direction must have unit norm".into());
        }
        let expected_mode = match self.task.kind() {
            TaskKind::BarLift => CoordinationMode::Symmetric,
            TaskKind::PlateWipe => CoordinationMode::Asymmetric,
        };
        if self.system.coordination_mode != expected_mode {
            return bad(format!(
                "{:?} needs {:?} coordination",
                self.task.kind(),
                expected_mode
            ));
        }
        if self.system.left.dof() < 3 || self.system.right.dof() < 3 {
            return bad("both arms need at least 3 joints".into());
        }
        if self.nominal_posture.len() != self.system.dof() {
            return bad(format!(
                "nominal_posture has {} joints, system has {}",
                self.nominal_posture.len(),
                self.system.dof()
            ));
        }
        if self.episode_length < 2 {
            return bad("episode_length must be at least 2".into());
        }
        if self.posture_targets.is_empty()
            || self
                .posture_targets
                .windows(2)
                .any(|w| w[1].phase <= w[0].phase)
            || self
                .posture_targets
                .iter()
                .any(|k| !(0.0..=1.0).contains(&k.phase) || k.bme.dim() != 2)
        {
            return bad(
                "posture_targets must be 2x2 keyframes with increasing phases in [0, 1]".into(),
            );
        }
        let s = &self.success;
        if !(s.tracking_tolerance > 0.0) || !(0.0..=1.0).contains(&s.tracking_fraction) {
            return bad("invalid tracking criteria".into());
        }
        if s.hold_steps == 0 || s.hold_steps > self.episode_length {
            return bad("hold_steps must lie in 1..=episode_length".into());
        }
        if !(self.expert.action_noise >= 0.0) || !(self.expert.jitter >= 0.0) {
            return bad("expert noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.expert.posture_attention) {
            return bad("posture_attention must lie in [0, 1]".into());
        }
        if !(self.max_joint_step > 0.0) {
            return bad("max_joint_step must be positive".into());
        }
        self.guidance
            .validate()
            .map_err(|e| SimError::Scenario(e.to_string()))
    }

    pub fn kind(&self) -> TaskKind {
        self.task.kind()
    }

    pub fn mode(&self) -> BmeMode {
        match self.kind() {
            TaskKind::BarLift => BmeMode::Bam,
            TaskKind::PlateWipe => BmeMode::Brm,
        }
    }

    pub fn dof(&self) -> usize {
        self.system.dof()
    }

    /// Joints plus one gripper command per arm.
    pub fn action_dim(&self) -> usize {
        self.dof() + 2
    }

    pub fn posture_profile(&self) -> KeyframeProfile<'_> {
        KeyframeProfile(&self.posture_targets)
    }

    /// Normalized phase of episode step `step`, clipped to `[0, 1]`.
    pub fn phase(&self, step: usize) -> f64 {
        (step as f64 / self.episode_length as f64).min(1.0)
    }

    /// Gripper command at a step: open for the first step, closed after.
    pub fn gripper(&self, step: usize) -> f64 {
        if step == 0 {
            0.0
        } else {
            1.0
        }
    }

    fn anchor(&self, phase: f64, shift: [f64; 2]) -> Vector2<f64> {
        let (start, end) = match &self.task {
            TaskSpec::BarLift { start, end, .. } | TaskSpec::PlateWipe { start, end, .. } => {
                (start, end)
            }
        };
        let s = phase * phase * (3.0 - 2.0 * phase);
        let a = Vector2::from(*start);
        a + (Vector2::from(*end) - a) * s + Vector2::from(shift)
    }

    /// Tracked task coordinates at a phase: both gripper positions for
    /// `bar_lift`; plate position and the stroke point in the plate frame for
    /// `plate_wipe`.
    pub fn task_target(&self, phase: f64, shift: [f64; 2]) -> [f64; TRACKED_DIM] {
        let anchor = self.anchor(phase, shift);
        match &self.task {
            TaskSpec::BarLift { grasp, .. } => {
                let l = anchor + Vector2::from(grasp.left_contact_offset);
                let r = anchor + Vector2::from(grasp.right_contact_offset);
                [l.x, l.y, r.x, r.y]
            }
            TaskSpec::PlateWipe {
                stroke_center,
                stroke_amplitude,
                strokes,
                ..
            } => {
                let swing = stroke_amplitude * (2.0 * std::f64::consts::PI * strokes * phase).sin();
                let rel =
                    Vector2::from(*stroke_center) + Vector2::from(self.task_direction) * swing;
                [anchor.x, anchor.y, rel.x, rel.y]
            }
        }
    }

    pub fn task_value(&self, q: &[f64]) -> Result<[f64; TRACKED_DIM], SimError> {
        let cfg = JointConfig::from_stacked(&self.system, q)?;
        let l = forward_kinematics(&self.system.left, &cfg.q_left)?.position;
        let second = match self.kind() {
            TaskKind::BarLift => forward_kinematics(&self.system.right, &cfg.q_right)?.position,
            TaskKind::PlateWipe => relative_pose(&self.system, &cfg)?.position,
        };
        Ok([l.x, l.y, second.x, second.y])
    }

    /// Jacobian of [`Scenario::task_value`] (4 × dof).
    pub fn task_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, SimError> {
        let cfg = JointConfig::from_stacked(&self.system, q)?;
        let nl = self.system.left.dof();
        let mut j = DMatrix::zeros(TRACKED_DIM, self.dof());
        let jl = jacobian(&self.system.left, &cfg.q_left)?;
        j.view_mut((0, 0), (2, nl)).copy_from(&jl.rows(0, 2));
        match self.kind() {
            TaskKind::BarLift => {
                let jr = jacobian(&self.system.right, &cfg.q_right)?;
                j.view_mut((2, nl), (2, jr.ncols()))
                    .copy_from(&jr.rows(0, 2));
            }
            TaskKind::PlateWipe => {
                let jrel = relative_jacobian(&self.system, &cfg)?;
                j.view_mut((2, 0), (2, self.dof()))
                    .copy_from(&jrel.rows(0, 2));
            }
        }
        Ok(j)
    }

    /// Largest position error of the two tracked points.
    pub fn tracking_error(&self, q: &[f64], phase: f64, shift: [f64; 2]) -> Result<f64, SimError> {
        let value = self.task_value(q)?;
        let target = self.task_target(phase, shift);
        let e = |i: usize| {
            ((value[i] - target[i]).powi(2) + (value[i + 1] - target[i + 1]).powi(2)).sqrt()
        };
        Ok(e(0).max(e(2)))
    }

    /// Velocity ellipsoid of the task's coordination mode.
    pub fn bme(&self, q: &[f64]) -> Result<BmeSample, SimError> {
        let cfg = JointConfig::from_stacked(&self.system, q)?;
        let w = WeightingMatrix::translational();
        Ok(match &self.task {
            TaskSpec::BarLift { grasp, .. } => bam(&self.system, &cfg, grasp, &w)?,
            TaskSpec::PlateWipe { .. } => brm(&self.system, &cfg, &w)?,
        })
    }

    pub fn tci(&self, bme: &SpdMatrix) -> Result<f64, SimError> {
        Ok(tci(bme, &self.task_direction)?)
    }

    /// Damped least-squares iterations from `q` towards a tracked target.
    /// Returns the final joints and residual position error.
    pub fn solve_ik(
        &self,
        q: &[f64],
        target: &[f64; TRACKED_DIM],
    ) -> Result<(Vec<f64>, f64), SimError> {
        let mut q = DVector::from_column_slice(q);
        let damping2 = self.expert.ik_damping.powi(2);
        let goal = DVector::from_column_slice(target);
        for _ in 0..self.expert.ik_iterations {
            let err = &goal - DVector::from_column_slice(&self.task_value(q.as_slice())?);
            if err.amax() < 1e-10 {
                break;
            }
            let j = self.task_jacobian(q.as_slice())?;
            let jjt = &j * j.transpose() + DMatrix::identity(TRACKED_DIM, TRACKED_DIM) * damping2;
            let step = j.transpose()
                * jjt
                    .lu()
                    .solve(&err)
                    .ok_or_else(|| SimError::Numerical("singular damped system".into()))?;
            q += step;
        }
        let value = self.task_value(q.as_slice())?;
        let e = |i: usize| {
            ((value[i] - target[i]).powi(2) + (value[i + 1] - target[i + 1]).powi(2)).sqrt()
        };
        Ok((q.as_slice().to_vec(), e(0).max(e(2))))
    }

    /// Projector onto the null space of the task Jacobian.
    pub fn null_projector(&self, q: &[f64]) -> Result<DMatrix<f64>, SimError> {
        let j = self.task_jacobian(q)?;
        let pinv = j
            .clone()
            .pseudo_inverse(1e-10)
            .map_err(|e| SimError::Numerical(e.to_string()))?;
        Ok(DMatrix::identity(self.dof(), self.dof()) - pinv * j)
    }

    /// Randomized episode start: shifted path and a perturbed nominal posture
    /// projected onto the first waypoint.
    pub fn reset(&self, seed: u64) -> Result<EpisodeStart, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, RESET_STREAM, 0));
        let r = &self.randomization;
        let mut draw = |h: f64| {
            if h > 0.0 {
                rng.random_range(-h..=h)
            } else {
                0.0
            }
        };
        let path_shift = [draw(r.path_shift), draw(r.path_shift)];
        let guess: Vec<f64> = self
            .nominal_posture
            .iter()
            .map(|q| q + draw(r.posture_spread))
            .collect();
        let target = self.task_target(0.0, path_shift);
        let (q, err) = self.solve_ik(&guess, &target)?;
        if err > 1e-6 {
            return Err(SimError::Unreachable {
                step: 0,
                error: err,
            });
        }
        Ok(EpisodeStart { path_shift, q })
    }
}
