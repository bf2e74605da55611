use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Offset `s` of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper bound on per-step noise variance.
pub const MAX_BETA: f64 = 0.999;

/// Discrete noise schedule with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    kind: String,
    steps: usize,
    offset: f64,
    max_beta: f64,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = DiffusionError;
    fn try_from(r: ScheduleRepr) -> Result<Self, Self::Error> {
        if r.kind != "squared_cosine" || r.offset != COSINE_OFFSET || r.max_beta != MAX_BETA {
            return Err(DiffusionError::InvalidSchedule(format!(
                "unsupported schedule {} (offset {}, max beta {})",
                r.kind, r.offset, r.max_beta
            )));
        }
        squared_cosine_schedule(r.steps)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        Self {
            kind: "squared_cosine".into(),
            steps: s.steps,
            offset: COSINE_OFFSET,
            max_beta: MAX_BETA,
        }
    }
}

/// Squared-cosine schedule: `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, with
/// `β_t = min(1 - f(t)/f(t-1), MAX_BETA)` and `ᾱ_t = Π (1 - β_i)`.
pub fn squared_cosine_schedule(steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 1 {
        return Err(DiffusionError::InvalidSchedule(
            "at least one step required".into(),
        ));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * FRAC_PI_2).cos().powi(2)
    };
    let mut betas = Vec::with_capacity(steps);
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
        betas.push(beta);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
    }
    Ok(NoiseSchedule {
        steps,
        betas,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Variance of the reverse step from `t` to `prev < t`:
    /// `(1 - ᾱ_prev)/(1 - ᾱ_t) · (1 - ᾱ_t/ᾱ_prev)`. For `prev = t - 1` this is
    /// the usual fixed-small posterior variance.
    pub fn posterior_variance(&self, t: usize, prev: usize) -> f64 {
        let (at, ap) = (self.alpha_bar[t], self.alpha_bar[prev]);
        (1.0 - ap) / (1.0 - at) * (1.0 - at / ap)
    }
}

/// `A_t = √ᾱ_t A_0 + √(1 - ᾱ_t) ε`.
pub fn forward_diffuse(
    a0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    if a0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch {
            expected: a0.len(),
            found: eps.len(),
        });
    }
    if t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange {
            step: t,
            steps: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| c0 * a + c1 * e).collect())
}
