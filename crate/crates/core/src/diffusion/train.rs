use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Horizons, PolicyCheckpoint};
use super::net::{DenoiserNet, NetShape, DEFAULT_HIDDEN, DEFAULT_TIME_EMBEDDING};
use super::schedule::squared_cosine_schedule;
use super::DiffusionError;

/// Ranges narrower than this keep unit scale.
const MIN_RANGE: f64 = 1e-6;

/// Per-feature affine map onto roughly `[-1, 1]`: mid-range center, half-range scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    pub fn new(center: Vec<f64>, scale: Vec<f64>) -> Result<Self, DiffusionError> {
        if center.len() != scale.len() || center.is_empty() {
            return Err(DiffusionError::InvalidConfig(
                "normalizer center/scale lengths differ".into(),
            ));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || center.iter().any(|c| !c.is_finite())
        {
            return Err(DiffusionError::InvalidConfig(
                "normalizer scales must be positive and finite".into(),
            ));
        }
        Ok(Self { center, scale })
    }

    /// Fits to feature rows of length `dim` found in `chunks`.
    pub fn fit<'a>(
        dim: usize,
        rows: impl Iterator<Item = &'a [f64]>,
    ) -> Result<Self, DiffusionError> {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut any = false;
        for row in rows {
            any = true;
            for (d, v) in row.iter().enumerate() {
                lo[d] = lo[d].min(*v);
                hi[d] = hi[d].max(*v);
            }
        }
        if !any {
            return Err(DiffusionError::EmptyDataset);
        }
        let center = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                if h - l < MIN_RANGE {
                    1.0
                } else {
                    0.5 * (h - l)
                }
            })
            .collect();
        Self::new(center, scale)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Normalizes a concatenation of feature rows.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.center[i % d]) / self.scale[i % d])
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        x.iter()
            .enumerate()
            .map(|(i, v)| self.center[i % d] + v * self.scale[i % d])
            .collect()
    }
}

/// One training pair: `m` observation rows and `n` action rows, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizons: Horizons,
    pub windows: Vec<Window>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.windows.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        let (o, a) = (
            self.obs_dim * self.horizons.m,
            self.action_dim * self.horizons.n,
        );
        for w in &self.windows {
            if w.obs.len() != o {
                return Err(DiffusionError::ShapeMismatch {
                    expected: o,
                    found: w.obs.len(),
                });
            }
            if w.actions.len() != a {
                return Err(DiffusionError::ShapeMismatch {
                    expected: a,
                    found: w.actions.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub diffusion_steps: usize,
    pub hidden: Vec<usize>,
    pub time_embedding: usize,
    pub lr_decay: LrDecay,
    pub log_every: usize,
}

/// Learning-rate profile over the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrDecay {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / total as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 128,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ema_decay: 0.995,
            diffusion_steps: 100,
            hidden: DEFAULT_HIDDEN.to_vec(),
            time_embedding: DEFAULT_TIME_EMBEDDING,
            lr_decay: LrDecay::Cosine,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |msg: &str| Err(DiffusionError::InvalidConfig(msg.into()));
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("steps, batch_size and log_every must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("EMA decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// `shadow ← decay·shadow + (1 - decay)·params`.
pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// RMS difference between parameters and their EMA shadow.
    pub ema_gap: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,grad_norm,ema_gap\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.step, r.loss, r.grad_norm, r.ema_gap
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PolicyCheckpoint,
    pub log: Vec<LogRow>,
    /// Per-step training loss.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }

    /// Mean loss over the first tenth of training.
    pub fn early_loss(&self) -> f64 {
        let k = (self.losses.len() / 10).max(1);
        Self::mean(&self.losses[..k])
    }

    /// Mean loss over the last tenth of training.
    pub fn late_loss(&self) -> f64 {
        let k = (self.losses.len() / 10).max(1);
        Self::mean(&self.losses[self.losses.len() - k..])
    }
}

/// Noise-prediction training on normalized windows.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, DiffusionError> {
    dataset.validate()?;
    config.validate()?;
    let (m, n) = (dataset.horizons.m, dataset.horizons.n);
    let action_norm = Normalizer::fit(
        dataset.action_dim,
        dataset
            .windows
            .iter()
            .flat_map(|w| w.actions.chunks(dataset.action_dim)),
    )?;
    let obs_norm = Normalizer::fit(
        dataset.obs_dim,
        dataset
            .windows
            .iter()
            .flat_map(|w| w.obs.chunks(dataset.obs_dim)),
    )?;
    let schedule = squared_cosine_schedule(config.diffusion_steps)?;
    let net = DenoiserNet::new(NetShape {
        action_len: dataset.action_dim * n,
        cond_len: dataset.obs_dim * m,
        time_embedding: config.time_embedding,
        hidden: config.hidden.clone(),
    })?;

    let actions: Vec<Vec<f64>> = dataset
        .windows
        .iter()
        .map(|w| action_norm.normalize(&w.actions))
        .collect();
    let obs: Vec<Vec<f64>> = dataset
        .windows
        .iter()
        .map(|w| obs_norm.normalize(&w.obs))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    let mut shadow = params.clone();
    let mut adam = Adam::new(params.len(), config.learning_rate, config.weight_decay);
    let (a_len, c_len, b) = (
        net.shape().action_len,
        net.shape().cond_len,
        config.batch_size,
    );

    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut noisy = DMatrix::zeros(a_len, b);
        let mut cond = DMatrix::zeros(c_len, b);
        let mut target = DMatrix::zeros(a_len, b);
        let mut steps = Vec::with_capacity(b);
        for j in 0..b {
            let idx = rng.random_range(0..actions.len());
            let t = rng.random_range(1..=schedule.steps());
            let ab = schedule.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for i in 0..a_len {
                let e: f64 = StandardNormal.sample(&mut rng);
                target[(i, j)] = e;
                noisy[(i, j)] = sa * actions[idx][i] + sn * e;
            }
            cond.column_mut(j).copy_from_slice(&obs[idx]);
            steps.push(t);
        }
        let input = net.assemble_input(&noisy, &steps, &cond);
        let (loss, grad) = net.loss_and_grad(&params, &input, &target);
        if !loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { step });
        }
        adam.set_learning_rate(config.learning_rate * config.lr_decay.factor(step, config.steps));
        adam.step(&mut params, &grad);
        ema_update(&mut shadow, &params, config.ema_decay);
        losses.push(loss);
        if step % config.log_every == 0 || step == config.steps {
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let gap = params
                .iter()
                .zip(&shadow)
                .map(|(p, s)| (p - s).powi(2))
                .sum::<f64>()
                / params.len() as f64;
            log.push(LogRow {
                step,
                loss,
                grad_norm,
                ema_gap: gap.sqrt(),
            });
        }
    }

    let checkpoint = PolicyCheckpoint::new(
        net,
        params,
        shadow,
        config.ema_decay,
        schedule,
        action_norm,
        obs_norm,
        dataset.horizons,
        seed,
    )?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_maps_range_to_unit_interval() {
        let rows = [[0.0, 5.0, 1.0], [2.0, 5.0, -3.0]];
        let n = Normalizer::fit(3, rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(n.center(), &[1.0, 5.0, -1.0]);
        assert_eq!(n.scale(), &[1.0, 1.0, 2.0]);
        let x = n.normalize(&[0.0, 5.0, 1.0, 2.0, 5.0, -3.0]);
        assert_eq!(x, vec![-1.0, 0.0, 1.0, 1.0, 0.0, -1.0]);
        assert_eq!(n.denormalize(&x), vec![0.0, 5.0, 1.0, 2.0, 5.0, -3.0]);
    }

    #[test]
    fn ema_with_zero_decay_copies() {
        let mut s = vec![1.0, 2.0];
        ema_update(&mut s, &[0.1, -0.3], 0.0);
        assert_eq!(s, vec![0.1, -0.3]);
    }

    #[test]
    fn ema_converges_when_parameters_freeze() {
        let mut s = vec![1.0, -1.0];
        for _ in 0..20000 {
            ema_update(&mut s, &[0.25, 0.5], 0.999);
        }
        assert!((s[0] - 0.25).abs() < 1e-8 && (s[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn rejects_bad_config() {
        let c = TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
