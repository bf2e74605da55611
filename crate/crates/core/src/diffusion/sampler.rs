//! Reverse-process samplers and gradient guidance.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::net::DenoiserNet;
use super::schedule::NoiseSchedule;
use super::train::Normalizer;
use super::DiffusionError;

/// Anything that predicts the added noise from a noisy normalized window.
pub trait NoisePredictor {
    fn action_len(&self) -> usize;
    fn predict(&self, noisy: &[f64], step: usize, cond: &[f64]) -> Vec<f64>;
}

pub struct NetPredictor<'a> {
    pub net: &'a DenoiserNet,
    pub params: &'a [f64],
}

impl NoisePredictor for NetPredictor<'_> {
    fn action_len(&self) -> usize {
        self.net.shape().action_len
    }

    fn predict(&self, noisy: &[f64], step: usize, cond: &[f64]) -> Vec<f64> {
        let x = nalgebra::DMatrix::from_column_slice(noisy.len(), 1, noisy);
        let c = nalgebra::DMatrix::from_column_slice(cond.len(), 1, cond);
        let input = self.net.assemble_input(&x, &[step], &c);
        self.net.forward(self.params, &input).as_slice().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    /// One stochastic step per schedule step.
    Ancestral,
    /// Deterministic steps on an evenly spaced subsequence of the schedule.
    Accelerated { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub sampler: SamplerKind,
    /// Clamp applied to the clean-sample estimate in normalized units.
    pub clip: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ancestral,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub fd_step: f64,
    /// Diffusion steps where the shift is applied; `None` means all.
    pub guided_steps: Option<Vec<usize>>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            fd_step: 1e-4,
            guided_steps: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DiffusionError::InvalidConfig(format!(
                "guidance scale {} must be non-negative",
                self.lambda
            )));
        }
        if !(self.fd_step > 0.0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "fd_step {} must be positive",
                self.fd_step
            )));
        }
        Ok(())
    }

    fn active(&self, step: usize) -> bool {
        self.lambda != 0.0 && self.guided_steps.as_ref().is_none_or(|s| s.contains(&step))
    }
}

/// Per-step cost of an action window in raw action units.
pub trait WindowCost {
    fn step_cost(&self, step: usize, action: &[f64]) -> Result<f64, DiffusionError>;
    /// Action coordinates that receive a guidance gradient.
    fn guided_dims(&self) -> &[usize];
    /// Optional orthogonal projector (raw units, over the guided coordinates)
    /// that confines the shift of window step `step` to admissible directions.
    fn projector(
        &self,
        _step: usize,
        _action: &[f64],
    ) -> Result<Option<DMatrix<f64>>, DiffusionError> {
        Ok(None)
    }
}

/// Guidance inputs for one sampling call.
pub struct Guidance<'a> {
    pub config: &'a GuidanceConfig,
    pub cost: &'a dyn WindowCost,
    pub norm: &'a Normalizer,
}

/// Total window cost of a normalized window.
pub fn window_cost(
    window: &[f64],
    cost: &dyn WindowCost,
    norm: &Normalizer,
) -> Result<f64, DiffusionError> {
    let raw = norm.denormalize(window);
    let dim = norm.dim();
    let mut total = 0.0;
    for (k, action) in raw.chunks(dim).enumerate() {
        total += cost.step_cost(k, action)?;
    }
    Ok(total)
}

/// `g = -∇ Σ_k cost_k` over a normalized window by central differences of
/// size `fd_step` on each guided coordinate. The cost separates over window
/// steps, so each coordinate only perturbs its own step. Unguided coordinates
/// get zero.
///
/// When the cost supplies a projector `P` for a step, that step's gradient
/// becomes `S⁻¹ P S² P S⁻¹ g` with `S` the normalization scales: the implied
/// raw shift lies in the range of `P` and is still a descent direction.
pub fn guidance_gradient(
    window: &[f64],
    cost: &dyn WindowCost,
    norm: &Normalizer,
    fd_step: f64,
) -> Result<Vec<f64>, DiffusionError> {
    let dim = norm.dim();
    if !window.len().is_multiple_of(dim) {
        return Err(DiffusionError::ShapeMismatch {
            expected: dim * (window.len() / dim + 1),
            found: window.len(),
        });
    }
    let raw = norm.denormalize(window);
    let mut grad = vec![0.0; window.len()];
    for (k, action) in raw.chunks(dim).enumerate() {
        let mut probe = action.to_vec();
        for &d in cost.guided_dims() {
            let h = fd_step * norm.scale()[d];
            probe[d] = action[d] + h;
            let up = cost.step_cost(k, &probe)?;
            probe[d] = action[d] - h;
            let down = cost.step_cost(k, &probe)?;
            probe[d] = action[d];
            let g = -(up - down) / (2.0 * fd_step);
            if !g.is_finite() {
                return Err(DiffusionError::Cost(format!(
                    "non-finite guidance gradient at window step {k}"
                )));
            }
            grad[k * dim + d] = g;
        }
        if let Some(p) = cost.projector(k, action)? {
            let dims = cost.guided_dims();
            if p.nrows() != dims.len() || p.ncols() != dims.len() {
                return Err(DiffusionError::ShapeMismatch {
                    expected: dims.len(),
                    found: p.nrows(),
                });
            }
            let scale = DVector::from_iterator(dims.len(), dims.iter().map(|&d| norm.scale()[d]));
            let g = DVector::from_iterator(dims.len(), dims.iter().map(|&d| grad[k * dim + d]));
            let raw = &p * g.component_div(&scale);
            let projected =
                (&p * raw.component_mul(&scale).component_mul(&scale)).component_div(&scale);
            for (i, &d) in dims.iter().enumerate() {
                grad[k * dim + d] = projected[i];
            }
        }
    }
    Ok(grad)
}

fn clip(x: &mut [f64], bound: Option<f64>) {
    if let Some(b) = bound {
        for v in x {
            *v = v.clamp(-b, b);
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Retained steps of the accelerated sampler, from `T` down, each paired with
/// the step it jumps to.
pub fn accelerated_steps(
    total: usize,
    steps: usize,
) -> Result<Vec<(usize, usize)>, DiffusionError> {
    if steps == 0 || steps > total || !total.is_multiple_of(steps) {
        return Err(DiffusionError::InvalidConfig(format!(
            "{steps} accelerated steps must evenly divide {total}"
        )));
    }
    let stride = total / steps;
    Ok((0..steps)
        .map(|i| (total - i * stride, total - (i + 1) * stride))
        .collect())
}

/// Draws one normalized action window.
pub fn sample_window(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    cond: &[f64],
    seed: u64,
    opts: &SampleOptions,
    guidance: Option<&Guidance<'_>>,
) -> Result<Vec<f64>, DiffusionError> {
    if let Some(g) = guidance {
        g.config.validate()?;
    }
    let len = predictor.action_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(&mut rng, len);
    let shift = |t: usize, var: f64, at: &mut Vec<f64>| -> Result<(), DiffusionError> {
        if let Some(g) = guidance.filter(|g| g.config.active(t)) {
            let grad = guidance_gradient(at, g.cost, g.norm, g.config.fd_step)?;
            for (v, gi) in at.iter_mut().zip(grad) {
                *v += g.config.lambda * var * gi;
            }
        }
        Ok(())
    };

    match opts.sampler {
        SamplerKind::Ancestral => {
            for t in (1..=schedule.steps()).rev() {
                let eps = predictor.predict(&x, t, cond);
                let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let mut x0: Vec<f64> = x
                    .iter()
                    .zip(&eps)
                    .map(|(xi, e)| (xi - sn * e) / sa)
                    .collect();
                clip(&mut x0, opts.clip);
                let beta = schedule.beta(t);
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let mut mean: Vec<f64> = x0.iter().zip(&x).map(|(a, b)| c0 * a + ct * b).collect();
                let var = schedule.posterior_variance(t, t - 1);
                shift(t, var, &mut mean)?;
                let z = gaussian(&mut rng, len);
                let sd = var.sqrt();
                x = mean.iter().zip(&z).map(|(m, zi)| m + sd * zi).collect();
            }
        }
        SamplerKind::Accelerated { steps } => {
            for (t, prev) in accelerated_steps(schedule.steps(), steps)? {
                let eps = predictor.predict(&x, t, cond);
                let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let mut x0: Vec<f64> = x
                    .iter()
                    .zip(&eps)
                    .map(|(xi, e)| (xi - sn * e) / sa)
                    .collect();
                clip(&mut x0, opts.clip);
                shift(t, schedule.posterior_variance(t, prev), &mut x0)?;
                let eps: Vec<f64> = x
                    .iter()
                    .zip(&x0)
                    .map(|(xi, a)| (xi - sa * a) / sn)
                    .collect();
                let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                x = x0.iter().zip(&eps).map(|(a, e)| pa * a + pn * e).collect();
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DiffusionError::NonFiniteSample);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::squared_cosine_schedule;

    /// Predicts the exact noise that maps `x0` to the current sample.
    struct Exact(Vec<f64>, NoiseSchedule);

    impl NoisePredictor for Exact {
        fn action_len(&self) -> usize {
            self.0.len()
        }
        fn predict(&self, noisy: &[f64], step: usize, _: &[f64]) -> Vec<f64> {
            let ab = self.1.alpha_bar(step);
            noisy
                .iter()
                .zip(&self.0)
                .map(|(x, a)| (x - ab.sqrt() * a) / (1.0 - ab).sqrt())
                .collect()
        }
    }

    struct Quadratic {
        target: f64,
        dims: Vec<usize>,
    }

    impl WindowCost for Quadratic {
        fn step_cost(&self, _: usize, a: &[f64]) -> Result<f64, DiffusionError> {
            Ok(self
                .dims
                .iter()
                .map(|&d| (a[d] - self.target).powi(2))
                .sum())
        }
        fn guided_dims(&self) -> &[usize] {
            &self.dims
        }
    }

    #[test]
    fn exact_predictor_recovers_the_window() {
        let s = squared_cosine_schedule(100).unwrap();
        let x0 = vec![0.3, -0.7, 0.9, 0.0];
        let p = Exact(x0.clone(), s.clone());
        for sampler in [
            SamplerKind::Ancestral,
            SamplerKind::Accelerated { steps: 10 },
        ] {
            let opts = SampleOptions {
                sampler,
                clip: Some(1.0),
            };
            let out = sample_window(&p, &s, &[], 3, &opts, None).unwrap();
            for (o, a) in out.iter().zip(&x0) {
                assert!((o - a).abs() < 1e-9, "{sampler:?}: {o} vs {a}");
            }
        }
    }

    #[test]
    fn subsequence() {
        assert_eq!(accelerated_steps(100, 10).unwrap()[0], (100, 90));
        assert_eq!(accelerated_steps(100, 10).unwrap()[9], (10, 0));
        assert!(accelerated_steps(100, 7).is_err());
    }

    #[test]
    fn gradient_of_separable_quadratic() {
        let norm = Normalizer::new(vec![1.0, 0.0], vec![2.0, 1.0]).unwrap();
        let cost = Quadratic {
            target: 0.5,
            dims: vec![0],
        };
        let window = [0.25, 0.4, -0.5, 0.1];
        let g = guidance_gradient(&window, &cost, &norm, 1e-4).unwrap();
        // raw a0 = 1 + 2x; d/dx (a0 - 0.5)² = 4 (a0 - 0.5)
        assert!((g[0] + 4.0 * (1.5 - 0.5)).abs() < 1e-6);
        assert!((g[2] + 4.0 * (0.0 - 0.5)).abs() < 1e-6);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn zero_scale_matches_unguided_bits() {
        let s = squared_cosine_schedule(20).unwrap();
        let p = Exact(vec![0.1, 0.2], s.clone());
        let norm = Normalizer::new(vec![0.0], vec![1.0]).unwrap();
        let cost = Quadratic {
            target: 3.0,
            dims: vec![0],
        };
        let config = GuidanceConfig::default();
        let g = Guidance {
            config: &config,
            cost: &cost,
            norm: &norm,
        };
        let opts = SampleOptions::default();
        let a = sample_window(&p, &s, &[], 9, &opts, None).unwrap();
        let b = sample_window(&p, &s, &[], 9, &opts, Some(&g)).unwrap();
        assert_eq!(a, b);
    }
}
