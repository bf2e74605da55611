use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scenario::{PostureProfile, Scenario};
use super::{derive_seed, SimError};
use crate::diffusion::{Dataset, Horizons, Window};
use crate::gmm::ManifoldPoint;
use crate::kinematics::{forward_kinematics, JointConfig};
use crate::manipulability::BmeSample;
use crate::spd::{spd_objective, SpdMatrix};

pub const DEMO_SCHEMA: u32 = 1;

const JITTER_STREAM: u64 = 2;
const ATTENTION_STREAM: u64 = 5;
const ACTION_NOISE_STREAM: u64 = 6;
const FD_STEP: f64 = 1e-6;
const TRACKING_LIMIT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Features of the state the action was issued from.
    pub obs: Vec<f64>,
    /// Joint targets followed by gripper commands.
    pub action: Vec<f64>,
    /// Ellipsoid of the commanded joints.
    pub bme: BmeSample,
    pub g_b: f64,
    pub tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub scenario: String,
    pub seed: u64,
    /// Whether the expert descended the posture objective in this episode.
    pub attentive: bool,
    pub path_shift: [f64; 2],
    pub initial_q: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct DemoHeader {
    schema: serde_json::Value,
    scenario: String,
    seed: u64,
    attentive: bool,
    path_shift: [f64; 2],
    initial_q: Vec<f64>,
    steps: usize,
}

/// Observation features of a state: joints, both end-effector poses, the
/// episode's path shift, the phase and the gripper command.
pub fn observe(
    scenario: &Scenario,
    q: &[f64],
    step: usize,
    path_shift: [f64; 2],
    gripper: f64,
) -> Result<Vec<f64>, SimError> {
    let cfg = JointConfig::from_stacked(&scenario.system, q)?;
    let l = forward_kinematics(&scenario.system.left, &cfg.q_left)?;
    let r = forward_kinematics(&scenario.system.right, &cfg.q_right)?;
    let mut f = q.to_vec();
    f.extend([l.position.x, l.position.y, l.orientation]);
    f.extend([r.position.x, r.position.y, r.orientation]);
    f.extend(path_shift);
    f.push(scenario.phase(step));
    f.push(gripper);
    Ok(f)
}

fn posture_gradient(
    scenario: &Scenario,
    q: &[f64],
    target: &SpdMatrix,
) -> Result<DVector<f64>, SimError> {
    let mut grad = DVector::zeros(q.len());
    let mut probe = q.to_vec();
    for i in 0..q.len() {
        probe[i] = q[i] + FD_STEP;
        let up = spd_objective(&scenario.bme(&probe)?.velocity_bme, target)?;
        probe[i] = q[i] - FD_STEP;
        let down = spd_objective(&scenario.bme(&probe)?.velocity_bme, target)?;
        probe[i] = q[i];
        grad[i] = (up - down) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

/// Tracks the task path with damped least squares while descending the
/// posture objective in the null space, plus seeded null-space jitter. With
/// probability `1 - posture_attention` the episode skips the descent.
pub fn scripted_expert(
    scenario: &Scenario,
    profile: &dyn PostureProfile,
    seed: u64,
) -> Result<Demonstration, SimError> {
    scenario.validate()?;
    let start = scenario.reset(seed)?;
    let cfg = &scenario.expert;
    let attentive = cfg.posture_attention >= 1.0
        || ChaCha8Rng::seed_from_u64(derive_seed(seed, ATTENTION_STREAM, 0)).random::<f64>()
            < cfg.posture_attention;
    let gain = if attentive { cfg.gain } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, JITTER_STREAM, 0));
    let jitter = Normal::new(0.0, cfg.jitter).map_err(|e| SimError::Scenario(e.to_string()))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ACTION_NOISE_STREAM, 0));
    let noise =
        Normal::new(0.0, cfg.action_noise).map_err(|e| SimError::Scenario(e.to_string()))?;
    let dof = scenario.dof();
    let mut q = DVector::from_column_slice(&start.q);
    let mut gripper = 0.0;
    let mut steps = Vec::with_capacity(scenario.episode_length);
    for step in 0..scenario.episode_length {
        let phase = scenario.phase(step);
        let target = profile.target(phase)?;
        let obs = observe(scenario, q.as_slice(), step, start.path_shift, gripper)?;
        let null = scenario.null_projector(q.as_slice())?;
        let mut delta = -(&null * posture_gradient(scenario, q.as_slice(), &target)?) * gain;
        let norm = delta.norm();
        if norm > cfg.max_descent_step {
            delta *= cfg.max_descent_step / norm;
        }
        if cfg.jitter > 0.0 {
            let z = DVector::from_fn(dof, |_, _| jitter.sample(&mut rng));
            delta += &null * z;
        }
        let guess = &q + delta;
        let (mut next, err) = scenario.solve_ik(
            guess.as_slice(),
            &scenario.task_target(phase, start.path_shift),
        )?;
        if err > TRACKING_LIMIT {
            return Err(SimError::Unreachable { step, error: err });
        }
        if cfg.action_noise > 0.0 {
            for v in &mut next {
                *v += noise.sample(&mut noise_rng);
            }
        }
        let motion = next
            .iter()
            .zip(q.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if motion > scenario.max_joint_step {
            return Err(SimError::Unreachable {
                step,
                error: motion,
            });
        }
        gripper = scenario.gripper(step);
        let bme = scenario.bme(&next)?.with_time(phase);
        let g_b = spd_objective(&bme.velocity_bme, &target)?;
        let mut action = next.clone();
        action.extend([gripper, gripper]);
        steps.push(StepRecord {
            step,
            obs,
            action,
            bme,
            g_b,
            tracking_error: scenario.tracking_error(&next, phase, start.path_shift)?,
        });
        q = DVector::from_vec(next);
    }
    Ok(Demonstration {
        scenario: scenario.id.clone(),
        seed,
        attentive,
        path_shift: start.path_shift,
        initial_q: start.q,
        steps,
    })
}

/// JSON lines: a header record followed by one record per step.
pub fn write_demo(demo: &Demonstration) -> String {
    let header = DemoHeader {
        schema: DEMO_SCHEMA.into(),
        scenario: demo.scenario.clone(),
        seed: demo.seed,
        attentive: demo.attentive,
        path_shift: demo.path_shift,
        initial_q: demo.initial_q.clone(),
        steps: demo.steps.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in &demo.steps {
        out.push_str(&serde_json::to_string(s).expect("step serializes"));
        out.push('\n');
    }
    out
}

pub fn read_demo(text: &str) -> Result<Demonstration, SimError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| SimError::Demo("empty file".into()))?;
    let header: DemoHeader =
        serde_json::from_str(first).map_err(|e| SimError::Demo(format!("header: {e}")))?;
    if header.schema != DEMO_SCHEMA {
        return Err(SimError::SchemaVersion {
            found: header.schema.to_string(),
            expected: DEMO_SCHEMA,
        });
    }
    let steps = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SimError::Demo(format!("step {i}: {e}"))))
        .collect::<Result<Vec<StepRecord>, _>>()?;
    if steps.len() != header.steps {
        return Err(SimError::Demo(format!(
            "header announces {} steps, found {}",
            header.steps,
            steps.len()
        )));
    }
    Ok(Demonstration {
        scenario: header.scenario,
        seed: header.seed,
        attentive: header.attentive,
        path_shift: header.path_shift,
        initial_q: header.initial_q,
        steps,
    })
}

/// Sliding windows: `m` past observations (front-padded) and `n` future
/// actions (back-padded with the last action).
pub fn demos_to_dataset(demos: &[Demonstration], horizons: Horizons) -> Result<Dataset, SimError> {
    let first = demos
        .iter()
        .find_map(|d| d.steps.first())
        .ok_or_else(|| SimError::Demo("no demonstration steps".into()))?;
    let (obs_dim, action_dim) = (first.obs.len(), first.action.len());
    let mut windows = Vec::new();
    for demo in demos {
        let len = demo.steps.len();
        for t in 0..len {
            let mut obs = Vec::with_capacity(obs_dim * horizons.m);
            for back in (0..horizons.m).rev() {
                obs.extend_from_slice(&demo.steps[t.saturating_sub(back)].obs);
            }
            let mut actions = Vec::with_capacity(action_dim * horizons.n);
            for k in 0..horizons.n {
                actions.extend_from_slice(&demo.steps[(t + k).min(len - 1)].action);
            }
            if obs.len() != obs_dim * horizons.m || actions.len() != action_dim * horizons.n {
                return Err(SimError::Demo(format!(
                    "demonstration {} has inconsistent widths",
                    demo.seed
                )));
            }
            windows.push(Window { obs, actions });
        }
    }
    let dataset = Dataset {
        obs_dim,
        action_dim,
        horizons,
        windows,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Phase-stamped velocity ellipsoids of all demonstrations.
pub fn demos_to_manifold_points(demos: &[Demonstration]) -> Result<Vec<ManifoldPoint>, SimError> {
    let mut out = Vec::new();
    for d in demos {
        for s in &d.steps {
            out.push(ManifoldPoint::new(s.bme.time, s.bme.velocity_bme.clone())?);
        }
    }
    Ok(out)
}
