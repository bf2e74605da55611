//! Residual MLP noise predictor with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector so the optimizer and the EMA shadow
//! can treat them uniformly. Weight blocks are stored column-major and viewed
//! as matrices; samples are matrix columns.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];
pub const DEFAULT_TIME_EMBEDDING: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Flattened action window length.
    pub action_len: usize,
    /// Flattened observation history length.
    pub cond_len: usize,
    pub time_embedding: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `σ(W x + b)`.
    Dense,
    /// `x + σ(W x + b)`.
    Residual,
    /// `W x + b`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub kind: LayerKind,
    weight_offset: usize,
    bias_offset: usize,
}

impl Layer {
    pub fn weights<'a>(&self, params: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(
            &params[self.weight_offset..self.weight_offset + self.rows * self.cols],
            self.rows,
            self.cols,
        )
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias_offset..self.bias_offset + self.rows]
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.rows * self.cols
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    shape: NetShape,
    layers: Vec<Layer>,
    param_count: usize,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s + z * s * (1.0 - s)
}

/// Sinusoidal embedding of an integer diffusion step: `[sin(t·ω_i), cos(t·ω_i)]`
/// with `ω_i = 10000^{-i/half}`.
pub fn time_embedding(step: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

struct Cache {
    /// Layer inputs; `inputs[0]` is the assembled network input.
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl DenoiserNet {
    pub fn new(shape: NetShape) -> Result<Self, DiffusionError> {
        if shape.action_len == 0 || shape.hidden.is_empty() || shape.hidden.contains(&0) {
            return Err(DiffusionError::InvalidConfig(
                "network widths must be positive".into(),
            ));
        }
        if !shape.time_embedding.is_multiple_of(2) {
            return Err(DiffusionError::InvalidConfig(
                "time embedding width must be even".into(),
            ));
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |rows: usize, cols: usize, kind: LayerKind| {
            layers.push(Layer {
                rows,
                cols,
                kind,
                weight_offset: offset,
                bias_offset: offset + rows * cols,
            });
            offset += rows * cols + rows;
        };
        let input = shape.action_len + shape.cond_len + shape.time_embedding;
        push(shape.hidden[0], input, LayerKind::Dense);
        for w in shape.hidden.windows(2) {
            let kind = if w[0] == w[1] {
                LayerKind::Residual
            } else {
                LayerKind::Dense
            };
            push(w[1], w[0], kind);
        }
        push(
            shape.action_len,
            *shape.hidden.last().expect("non-empty"),
            LayerKind::Linear,
        );
        Ok(Self {
            shape,
            layers,
            param_count: offset,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        self.shape.action_len + self.shape.cond_len + self.shape.time_embedding
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count];
        for layer in &self.layers {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for x in &mut p[layer.weight_range()] {
                *x = rng.random_range(-bound..bound);
            }
            for x in &mut p[layer.bias_range()] {
                *x = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Stacks noisy actions, observations and step embeddings column-wise.
    pub fn assemble_input(
        &self,
        actions: &DMatrix<f64>,
        steps: &[usize],
        cond: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let batch = actions.ncols();
        let (a, c, e) = (
            self.shape.action_len,
            self.shape.cond_len,
            self.shape.time_embedding,
        );
        let mut input = DMatrix::zeros(a + c + e, batch);
        input.view_mut((0, 0), (a, batch)).copy_from(actions);
        if c > 0 {
            input.view_mut((a, 0), (c, batch)).copy_from(cond);
        }
        for (j, step) in steps.iter().enumerate() {
            let emb = time_embedding(*step, e);
            for (i, v) in emb.into_iter().enumerate() {
                input[(a + c + i, j)] = v;
            }
        }
        input
    }

    fn affine(layer: &Layer, params: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = layer.weights(params) * x;
        let b = layer.bias(params);
        for mut col in z.column_iter_mut() {
            for (v, bi) in col.iter_mut().zip(b) {
                *v += bi;
            }
        }
        z
    }

    fn run(
        &self,
        params: &[f64],
        input: &DMatrix<f64>,
        keep: bool,
    ) -> (DMatrix<f64>, Option<Cache>) {
        let mut cache = keep.then(|| Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        });
        let mut h = input.clone();
        for layer in &self.layers {
            let z = Self::affine(layer, params, &h);
            let out = match layer.kind {
                LayerKind::Linear => z.clone(),
                LayerKind::Dense => z.map(silu),
                LayerKind::Residual => &h + z.map(silu),
            };
            if let Some(c) = cache.as_mut() {
                c.inputs.push(h);
                c.pre.push(z);
            }
            h = out;
        }
        (h, cache)
    }

    pub fn forward(&self, params: &[f64], input: &DMatrix<f64>) -> DMatrix<f64> {
        self.run(params, input, false).0
    }

    /// Mean squared error against `target` and its gradient with respect to
    /// every parameter.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        input: &DMatrix<f64>,
        target: &DMatrix<f64>,
    ) -> (f64, Vec<f64>) {
        let (out, cache) = self.run(params, input, true);
        let cache = cache.expect("cache requested");
        let count = (out.nrows() * out.ncols()) as f64;
        let diff = &out - target;
        let loss = diff.norm_squared() / count;
        let mut grad = vec![0.0; self.param_count];
        let mut upstream = diff * (2.0 / count);
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[idx];
            let h = &cache.inputs[idx];
            let dz = match layer.kind {
                LayerKind::Linear => upstream.clone(),
                LayerKind::Dense | LayerKind::Residual => {
                    upstream.zip_map(z, |u, zi| u * silu_grad(zi))
                }
            };
            let dw = &dz * h.transpose();
            grad[layer.weight_range()].copy_from_slice(dw.as_slice());
            for (g, row) in grad[layer.bias_range()].iter_mut().zip(dz.row_iter()) {
                *g = row.sum();
            }
            if idx > 0 {
                let back = layer.weights(params).transpose() * &dz;
                upstream = match layer.kind {
                    LayerKind::Residual => upstream + back,
                    _ => back,
                };
            }
        }
        (loss, grad)
    }
}
