use serde::{Deserialize, Serialize};

use super::net::{DenoiserNet, LayerKind, NetShape};
use super::sampler::{
    sample_window, Guidance, GuidanceConfig, NetPredictor, SampleOptions, WindowCost,
};
use super::schedule::NoiseSchedule;
use super::train::Normalizer;
use super::DiffusionError;

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Observation history length `m` and action window length `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizons {
    pub m: usize,
    pub n: usize,
}

impl Default for Horizons {
    fn default() -> Self {
        Self { m: 2, n: 8 }
    }
}

/// Trained denoiser with its EMA shadow, schedule and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    net: DenoiserNet,
    params: Vec<f64>,
    ema: Vec<f64>,
    ema_decay: f64,
    schedule: NoiseSchedule,
    action_norm: Normalizer,
    obs_norm: Normalizer,
    horizons: Horizons,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    #[serde(rename = "in")]
    cols: usize,
    #[serde(rename = "out")]
    rows: usize,
    kind: String,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NormRepr {
    action: Normalizer,
    observation: Normalizer,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    schema: u32,
    schedule: NoiseSchedule,
    network: NetShape,
    layers: Vec<LayerRepr>,
    ema: Vec<LayerRepr>,
    ema_decay: f64,
    norm: NormRepr,
    horizons: Horizons,
    seed: u64,
}

fn kind_name(k: LayerKind) -> &'static str {
    match k {
        LayerKind::Dense => "dense",
        LayerKind::Residual => "residual",
        LayerKind::Linear => "linear",
    }
}

impl PolicyCheckpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: DenoiserNet,
        params: Vec<f64>,
        ema: Vec<f64>,
        ema_decay: f64,
        schedule: NoiseSchedule,
        action_norm: Normalizer,
        obs_norm: Normalizer,
        horizons: Horizons,
        seed: u64,
    ) -> Result<Self, DiffusionError> {
        let invalid = |m: String| Err(DiffusionError::Checkpoint(m));
        if params.len() != net.param_count() || ema.len() != net.param_count() {
            return invalid(format!("expected {} parameters", net.param_count()));
        }
        if params.iter().chain(&ema).any(|p| !p.is_finite()) {
            return invalid("non-finite parameter".into());
        }
        if !(ema_decay > 0.0 && ema_decay < 1.0) && ema_decay != 0.0 {
            return invalid(format!("EMA decay {ema_decay} outside [0, 1)"));
        }
        let shape = net.shape();
        if shape.action_len != action_norm.dim() * horizons.n
            || shape.cond_len != obs_norm.dim() * horizons.m
        {
            return invalid("network widths disagree with horizons and normalization".into());
        }
        Ok(Self {
            net,
            params,
            ema,
            ema_decay,
            schedule,
            action_norm,
            obs_norm,
            horizons,
            seed,
        })
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn action_norm(&self) -> &Normalizer {
        &self.action_norm
    }

    pub fn obs_norm(&self) -> &Normalizer {
        &self.obs_norm
    }

    pub fn horizons(&self) -> Horizons {
        self.horizons
    }

    pub fn action_dim(&self) -> usize {
        self.action_norm.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_norm.dim()
    }

    fn layers_repr(&self, params: &[f64]) -> Vec<LayerRepr> {
        self.net
            .layers()
            .iter()
            .map(|l| LayerRepr {
                cols: l.cols,
                rows: l.rows,
                kind: kind_name(l.kind).into(),
                weights: l.weights(params).transpose().as_slice().to_vec(),
                bias: l.bias(params).to_vec(),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let env = Envelope {
            schema: CHECKPOINT_SCHEMA,
            schedule: self.schedule.clone(),
            network: self.net.shape().clone(),
            layers: self.layers_repr(&self.params),
            ema: self.layers_repr(&self.ema),
            ema_decay: self.ema_decay,
            norm: NormRepr {
                action: self.action_norm.clone(),
                observation: self.obs_norm.clone(),
            },
            horizons: self.horizons,
            seed: self.seed,
        };
        serde_json::to_string(&env).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DiffusionError> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        let schema = probe.get("schema").and_then(|s| s.as_u64());
        if schema != Some(CHECKPOINT_SCHEMA as u64) {
            return Err(DiffusionError::SchemaVersion {
                found: schema
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "missing".into()),
                expected: CHECKPOINT_SCHEMA,
            });
        }
        let env: Envelope =
            serde_json::from_value(probe).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        let net = DenoiserNet::new(env.network)?;
        let unpack = |layers: &[LayerRepr]| -> Result<Vec<f64>, DiffusionError> {
            if layers.len() != net.layers().len() {
                return Err(DiffusionError::Checkpoint("layer count mismatch".into()));
            }
            let mut p = vec![0.0; net.param_count()];
            for (spec, repr) in net.layers().iter().zip(layers) {
                if repr.rows != spec.rows
                    || repr.cols != spec.cols
                    || repr.kind != kind_name(spec.kind)
                    || repr.weights.len() != spec.rows * spec.cols
                    || repr.bias.len() != spec.rows
                {
                    return Err(DiffusionError::Checkpoint("layer shape mismatch".into()));
                }
                let w = nalgebra::DMatrix::from_row_slice(spec.rows, spec.cols, &repr.weights);
                p[spec.weight_range()].copy_from_slice(w.as_slice());
                p[spec.bias_range()].copy_from_slice(&repr.bias);
            }
            Ok(p)
        };
        let params = unpack(&env.layers)?;
        let ema = unpack(&env.ema)?;
        Self::new(
            net,
            params,
            ema,
            env.ema_decay,
            env.schedule,
            env.norm.action,
            env.norm.observation,
            env.horizons,
            env.seed,
        )
    }

    /// Samples one raw action window from the EMA weights given `m` raw
    /// observation rows.
    pub fn sample(
        &self,
        obs: &[f64],
        seed: u64,
        opts: &SampleOptions,
        guidance: Option<(&GuidanceConfig, &dyn WindowCost)>,
    ) -> Result<Vec<f64>, DiffusionError> {
        let expected = self.obs_dim() * self.horizons.m;
        if obs.len() != expected {
            return Err(DiffusionError::ShapeMismatch {
                expected,
                found: obs.len(),
            });
        }
        let cond = self.obs_norm.normalize(obs);
        let predictor = NetPredictor {
            net: &self.net,
            params: &self.ema,
        };
        let g = guidance.map(|(config, cost)| Guidance {
            config,
            cost,
            norm: &self.action_norm,
        });
        let x = sample_window(&predictor, &self.schedule, &cond, seed, opts, g.as_ref())?;
        Ok(self.action_norm.denormalize(&x))
    }
}
