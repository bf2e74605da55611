use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expert::{observe, Demonstration};
use super::scenario::{PostureProfile, Scenario, SuccessCriteria};
use super::{derive_seed, SimError};
use crate::diffusion::{
    DiffusionError, GuidanceConfig, PolicyCheckpoint, SampleOptions, WindowCost,
};
use crate::gmm::mra;
use crate::spd::{spd_objective, SpdMatrix};

const SAMPLE_STREAM: u64 = 3;
const RANDOM_STREAM: u64 = 4;

/// Source of action windows.
pub enum Policy<'a> {
    Diffusion {
        checkpoint: &'a PolicyCheckpoint,
        options: SampleOptions,
    },
    /// Replays the recorded actions of a demonstration.
    Replay(&'a Demonstration),
    /// Uniform joint noise of the given half-width around the current joints.
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub success: bool,
    /// Executed joint configuration after each step.
    pub joint_trace: Vec<Vec<f64>>,
    pub bme_trace: Vec<SpdMatrix>,
    pub tci_trace: Vec<f64>,
    pub g_b_trace: Vec<f64>,
    pub tracking_trace: Vec<f64>,
    pub final_bme: SpdMatrix,
    /// Reproduction accuracy of the final ellipsoid against its target.
    pub final_mra: f64,
    /// Why the episode stopped executing, if it did.
    pub failure: Option<String>,
}

impl RolloutReport {
    pub fn mean_tci(&self) -> f64 {
        mean(&self.tci_trace)
    }

    pub fn mean_g_b(&self) -> f64 {
        mean(&self.g_b_trace)
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// True iff enough steps are on-path and the mean compatibility over the
/// final hold segment reaches the threshold.
pub fn success_predicate(criteria: &SuccessCriteria, tracking: &[f64], tci: &[f64]) -> bool {
    if tracking.is_empty() || tci.is_empty() {
        return false;
    }
    let on_path = tracking
        .iter()
        .filter(|e| **e < criteria.tracking_tolerance)
        .count();
    let tracked = on_path as f64 >= criteria.tracking_fraction * tracking.len() as f64;
    let hold = &tci[tci.len().saturating_sub(criteria.hold_steps)..];
    tracked && mean(hold) >= criteria.min_tci
}

/// Posture objective of a window against phase-aligned targets; only joint
/// coordinates are guided, and by default the shift is confined to the task
/// null space of each action.
pub struct PostureCost<'a> {
    scenario: &'a Scenario,
    targets: Vec<SpdMatrix>,
    dims: Vec<usize>,
    null_space: bool,
}

impl<'a> PostureCost<'a> {
    /// Targets for window step `k` come from phase `(start + k) / episode_length`.
    pub fn new(
        scenario: &'a Scenario,
        profile: &dyn PostureProfile,
        start: usize,
        len: usize,
    ) -> Result<Self, SimError> {
        let targets = (0..len)
            .map(|k| profile.target(scenario.phase(start + k)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            scenario,
            targets,
            dims: (0..scenario.dof()).collect(),
            null_space: true,
        })
    }

    /// Guides along the full joint gradient instead.
    pub fn unprojected(mut self) -> Self {
        self.null_space = false;
        self
    }
}

impl WindowCost for PostureCost<'_> {
    fn step_cost(&self, step: usize, action: &[f64]) -> Result<f64, DiffusionError> {
        let target = self
            .targets
            .get(step)
            .ok_or_else(|| DiffusionError::Cost(format!("window step {step} has no target")))?;
        let bme = self
            .scenario
            .bme(&action[..self.scenario.dof()])
            .map_err(|e| DiffusionError::Cost(e.to_string()))?;
        spd_objective(&bme.velocity_bme, target).map_err(|e| DiffusionError::Cost(e.to_string()))
    }

    fn guided_dims(&self) -> &[usize] {
        &self.dims
    }

    fn projector(
        &self,
        _step: usize,
        action: &[f64],
    ) -> Result<Option<DMatrix<f64>>, DiffusionError> {
        if !self.null_space {
            return Ok(None);
        }
        self.scenario
            .null_projector(&action[..self.scenario.dof()])
            .map(Some)
            .map_err(|e| DiffusionError::Cost(e.to_string()))
    }
}

fn check_horizons(policy: &Policy<'_>, scenario: &Scenario) -> Result<(), SimError> {
    match policy {
        Policy::Diffusion { checkpoint, .. } => {
            let h = checkpoint.horizons();
            let obs_dim = scenario.dof() + 10;
            if checkpoint.action_dim() != scenario.action_dim() || checkpoint.obs_dim() != obs_dim {
                return Err(SimError::Horizon(format!(
                    "checkpoint expects {} actions and {} features, scenario has {} and {}",
                    checkpoint.action_dim(),
                    checkpoint.obs_dim(),
                    scenario.action_dim(),
                    obs_dim
                )));
            }
            if h.n == 0 || h.n > scenario.episode_length {
                return Err(SimError::Horizon(format!(
                    "action horizon {} exceeds episode length {}",
                    h.n, scenario.episode_length
                )));
            }
        }
        Policy::Replay(demo) => {
            if demo.scenario != scenario.id || demo.steps.len() != scenario.episode_length {
                return Err(SimError::Horizon(format!(
                    "demonstration {} does not match scenario {}",
                    demo.scenario, scenario.id
                )));
            }
        }
        Policy::Random { .. } => {}
    }
    Ok(())
}

/// Runs one episode: action windows are executed open-loop in chunks, the
/// state is re-observed between chunks, and joint motion per step is clipped
/// to the scenario limit. `score` supplies the targets of the reported
/// posture objective; `guidance` pairs the guidance settings with the profile
/// the sampler is steered towards.
pub fn rollout(
    policy: &Policy<'_>,
    scenario: &Scenario,
    guidance: Option<(&GuidanceConfig, &dyn PostureProfile)>,
    score: &dyn PostureProfile,
    seed: u64,
) -> Result<RolloutReport, SimError> {
    check_horizons(policy, scenario)?;
    let start = scenario.reset(seed)?;
    let len = scenario.episode_length;
    let dof = scenario.dof();
    let chunk = match policy {
        Policy::Diffusion { checkpoint, .. } => checkpoint.horizons().n,
        _ => 8.min(len),
    };
    let history = match policy {
        Policy::Diffusion { checkpoint, .. } => checkpoint.horizons().m,
        _ => 1,
    };
    let mut random = ChaCha8Rng::seed_from_u64(derive_seed(seed, RANDOM_STREAM, 0));
    let mut q = start.q.clone();
    let mut gripper = 0.0;
    let mut observations = vec![observe(scenario, &q, 0, start.path_shift, gripper)?];
    let mut report = RolloutReport {
        success: false,
        joint_trace: Vec::with_capacity(len),
        bme_trace: Vec::with_capacity(len),
        tci_trace: Vec::with_capacity(len),
        g_b_trace: Vec::with_capacity(len),
        tracking_trace: Vec::with_capacity(len),
        final_bme: SpdMatrix::identity(2),
        final_mra: 0.0,
        failure: None,
    };
    let mut t = 0;
    let mut chunk_index = 0u64;
    while t < len {
        let steps = chunk.min(len - t);
        let window: Result<Vec<Vec<f64>>, SimError> = match policy {
            Policy::Diffusion {
                checkpoint,
                options,
            } => {
                let mut obs = Vec::new();
                for back in (0..history).rev() {
                    obs.extend_from_slice(&observations[t.saturating_sub(back)]);
                }
                let sample_seed = derive_seed(seed, SAMPLE_STREAM, chunk_index);
                let cost = match guidance {
                    Some((_, profile)) => Some(PostureCost::new(
                        scenario,
                        profile,
                        t,
                        checkpoint.horizons().n,
                    )?),
                    None => None,
                };
                let g = guidance
                    .zip(cost.as_ref())
                    .map(|((cfg, _), c)| (cfg, c as &dyn WindowCost));
                match checkpoint.sample(&obs, sample_seed, options, g) {
                    Ok(raw) => Ok(raw
                        .chunks(scenario.action_dim())
                        .map(|a| a.to_vec())
                        .collect()),
                    Err(DiffusionError::NonFiniteSample) => {
                        Err(SimError::Numerical("non-finite action".into()))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Policy::Replay(demo) => Ok((t..t + steps)
                .map(|k| demo.steps[k].action.clone())
                .collect()),
            Policy::Random { scale } => Ok((0..steps)
                .map(|_| {
                    let mut a: Vec<f64> = q
                        .iter()
                        .map(|qi| qi + random.random_range(-scale..=*scale))
                        .collect();
                    a.extend([1.0, 1.0]);
                    a
                })
                .collect()),
        };
        let window = match window {
            Ok(w) if w.iter().flatten().all(|v| v.is_finite()) => w,
            Ok(_) | Err(SimError::Numerical(_)) => {
                report.failure = Some(format!("non-finite action at step {t}"));
                vec![q.iter().copied().chain([gripper, gripper]).collect(); steps]
            }
            Err(e) => return Err(e),
        };
        for action in window.iter().take(steps) {
            for (qi, ai) in q.iter_mut().zip(&action[..dof]) {
                *qi += (ai - *qi).clamp(-scenario.max_joint_step, scenario.max_joint_step);
            }
            gripper = action[dof..].iter().sum::<f64>() / (action.len() - dof) as f64;
            let phase = scenario.phase(t);
            let bme = scenario.bme(&q)?.velocity_bme;
            let target = score.target(phase)?;
            report
                .tracking_trace
                .push(scenario.tracking_error(&q, phase, start.path_shift)?);
            report.g_b_trace.push(spd_objective(&bme, &target)?);
            report.tci_trace.push(scenario.tci(&bme)?);
            report.joint_trace.push(q.clone());
            if t + 1 == len {
                report.final_mra = mra(&bme, &target)?;
                report.final_bme = bme.clone();
            }
            report.bme_trace.push(bme);
            t += 1;
            observations.push(observe(scenario, &q, t, start.path_shift, gripper)?);
        }
        chunk_index += 1;
    }
    report.success = report.failure.is_none()
        && success_predicate(&scenario.success, &report.tracking_trace, &report.tci_trace);
    Ok(report)
}
