//! The toy diffusion-transformer teacher and everything it is sampled with.
//!
//! Latents are 4×8×8, patchified into 16 tokens of width 16. The denoiser has
//! four pre-norm transformer blocks of width 64 and exactly twenty linear
//! layers, the only parts of the network that are ever quantized. Layer norms,
//! attention softmax and residual adds stay in full precision.

mod checkpoint;
mod data;
mod hooks;
mod sampler;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{calibration_set, even_timesteps, CalibSample, LatentPool};
pub use hooks::{CaptureKind, HookSet, LayerCapture};
pub use sampler::{ddim_sample, initial_noise};
pub use schedule::{add_noise, cosine_schedule, ddim_step, NoiseSchedule, ALPHA_FLOOR};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::{Error, Result};

pub const CHANNELS: usize = 4;
pub const HEIGHT: usize = 8;
pub const WIDTH: usize = 8;
pub const LATENT_LEN: usize = CHANNELS * HEIGHT * WIDTH;
pub const PATCH: usize = 2;
pub const TOKENS: usize = (HEIGHT / PATCH) * (WIDTH / PATCH);
pub const PATCH_DIM: usize = CHANNELS * PATCH * PATCH;
pub const HIDDEN: usize = 64;
pub const HEADS: usize = 4;
pub const BLOCKS: usize = 4;
pub const MLP_HIDDEN: usize = 4 * HIDDEN;
pub const NUM_CLASSES: usize = 10;
pub const NUM_LAYERS: usize = 4 * BLOCKS + 4;
pub const INIT_STD: f64 = 0.02;

const LN_EPS: f64 = 1e-6;

/// A 4×8×8 latent stored channel-major, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent(Vec<f64>);

impl Latent {
    pub fn zeros() -> Self {
        Latent(vec![0.0; LATENT_LEN])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != LATENT_LEN {
            return Err(Error::invalid(format!(
                "latent must have {LATENT_LEN} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent contains non-finite entries"));
        }
        Ok(Latent(data))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    #[inline]
    pub fn index(c: usize, y: usize, x: usize) -> usize {
        (c * HEIGHT + y) * WIDTH + x
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &Latent) -> f64 {
        crate::tensor::sq_dist(&self.0, &other.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// One quantizable linear layer, `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, input: &Matrix) -> Matrix {
        let mut out = input.matmul_t(&self.weight);
        out.add_row_vector(&self.bias);
        out
    }
}

/// Static description of a quantizable layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub in_features: usize,
    pub out_features: usize,
    /// Rows the layer sees per forward pass (tokens, or 1 for the time MLP).
    pub rows_per_forward: usize,
}

impl LayerInfo {
    pub fn params(&self) -> usize {
        self.in_features * self.out_features
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features * self.rows_per_forward) as u64
    }
}

/// Layer table in execution order.
pub fn layer_table() -> Vec<LayerInfo> {
    let mk = |id: String, i: usize, o: usize, rows: usize| LayerInfo {
        id,
        in_features: i,
        out_features: o,
        rows_per_forward: rows,
    };
    let mut out = vec![
        mk("patch_embed".into(), PATCH_DIM, HIDDEN, TOKENS),
        mk("time_mlp.fc1".into(), HIDDEN, HIDDEN, 1),
        mk("time_mlp.fc2".into(), HIDDEN, HIDDEN, 1),
    ];
    for b in 0..BLOCKS {
        out.push(mk(format!("blocks.{b}.qkv"), HIDDEN, 3 * HIDDEN, TOKENS));
        out.push(mk(format!("blocks.{b}.attn_proj"), HIDDEN, HIDDEN, TOKENS));
        out.push(mk(format!("blocks.{b}.mlp_fc1"), HIDDEN, MLP_HIDDEN, TOKENS));
        out.push(mk(format!("blocks.{b}.mlp_fc2"), MLP_HIDDEN, HIDDEN, TOKENS));
    }
    out.push(mk("final_proj".into(), HIDDEN, PATCH_DIM, TOKENS));
    out
}

const PATCH_EMBED: usize = 0;
const TIME_FC1: usize = 1;
const TIME_FC2: usize = 2;
const FINAL_PROJ: usize = NUM_LAYERS - 1;

#[inline]
fn block_layer(block: usize, slot: usize) -> usize {
    3 + 4 * block + slot
}

/// Timestep context threaded through a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub t: usize,
    pub num_steps: usize,
}

/// Passive observer of every linear call in a forward pass.
pub trait ForwardObserver {
    fn on_linear(&mut self, _index: usize, _step: StepContext, _input: &Matrix, _output: &Matrix) {
    }

    /// Mean dynamic activation clip threshold used for a layer's input.
    fn on_activation_scale(&mut self, _index: usize, _mean_tau: f64) {}
}

/// Observer that records nothing.
pub struct NoObserver;

impl ForwardObserver for NoObserver {}

/// Strategy that evaluates linear layers; the teacher uses [`FloatExec`],
/// students substitute quantized kernels.
pub trait LinearExec: Sync {
    fn linear(
        &self,
        index: usize,
        layer: &Linear,
        input: &Matrix,
        step: StepContext,
        observer: &mut dyn ForwardObserver,
    ) -> Result<Matrix>;
}

/// Full-precision execution.
#[derive(Debug, Clone, Copy, Default)]
pub struct FloatExec;

impl LinearExec for FloatExec {
    fn linear(
        &self,
        _index: usize,
        layer: &Linear,
        input: &Matrix,
        _step: StepContext,
        _observer: &mut dyn ForwardObserver,
    ) -> Result<Matrix> {
        Ok(layer.forward(input))
    }
}

/// The teacher denoiser. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDiT {
    pub seed: u64,
    pub num_steps: usize,
    layers: Vec<Linear>,
    class_embed: Matrix,
}

impl TinyDiT {
    /// Seeded `N(0, 0.02)` weights, zero biases.
    pub fn new(seed: u64, num_steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let layers = layer_table()
            .iter()
            .map(|info| {
                let weight = Matrix::from_fn(info.out_features, info.in_features, |_, _| {
                    normal.sample(&mut rng)
                });
                Linear {
                    weight,
                    bias: vec![0.0; info.out_features],
                }
            })
            .collect();
        let class_embed = Matrix::from_fn(NUM_CLASSES, HIDDEN, |_, _| normal.sample(&mut rng));
        Self {
            seed,
            num_steps,
            layers,
            class_embed,
        }
    }

    pub(crate) fn from_parts(
        seed: u64,
        num_steps: usize,
        layers: Vec<Linear>,
        class_embed: Matrix,
    ) -> Result<Self> {
        let table = layer_table();
        if layers.len() != table.len() {
            return Err(Error::Format(format!(
                "expected {} linear layers, found {}",
                table.len(),
                layers.len()
            )));
        }
        for (info, l) in table.iter().zip(&layers) {
            if l.weight.shape() != (info.out_features, info.in_features)
                || l.bias.len() != info.out_features
            {
                return Err(Error::Format(format!("shape mismatch for `{}`", info.id)));
            }
        }
        if class_embed.shape() != (NUM_CLASSES, HIDDEN) {
            return Err(Error::Format("class embedding shape mismatch".into()));
        }
        Ok(Self {
            seed,
            num_steps,
            layers,
            class_embed,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &Linear {
        &self.layers[index]
    }

    pub fn class_embed(&self) -> &Matrix {
        &self.class_embed
    }

    pub fn layer_ids(&self) -> Vec<String> {
        layer_table().into_iter().map(|l| l.id).collect()
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        layer_table().iter().position(|l| l.id == id)
    }

    /// Every parameter, quantizable or not.
    pub fn total_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum::<usize>()
            + NUM_CLASSES * HIDDEN
    }

    /// Parameters that always stay in full precision (biases, class table).
    pub fn full_precision_params(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum::<usize>() + NUM_CLASSES * HIDDEN
    }

    /// Teacher noise prediction.
    pub fn forward(&self, x_t: &Latent, t: usize, label: usize) -> Result<Latent> {
        self.forward_with(&FloatExec, x_t, t, label, &mut NoObserver)
    }

    /// Noise prediction with a custom linear executor and observer.
    pub fn forward_with(
        &self,
        exec: &dyn LinearExec,
        x_t: &Latent,
        t: usize,
        label: usize,
        observer: &mut dyn ForwardObserver,
    ) -> Result<Latent> {
        if label >= NUM_CLASSES {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        if t >= self.num_steps {
            return Err(Error::invalid(format!(
                "timestep {t} out of range for T={}",
                self.num_steps
            )));
        }
        let step = StepContext {
            t,
            num_steps: self.num_steps,
        };
        let run = |index: usize, input: &Matrix, obs: &mut dyn ForwardObserver| {
            let out = exec.linear(index, &self.layers[index], input, step, obs)?;
            if !out.is_finite() {
                return Err(Error::numeric(
                    layer_table()[index].id.clone(),
                    "non-finite layer output",
                ));
            }
            obs.on_linear(index, step, input, &out);
            Ok::<_, Error>(out)
        };

        let tokens = patchify(x_t);
        let mut h = run(PATCH_EMBED, &tokens, observer)?;

        let temb = timestep_embedding(t);
        let mut e = run(TIME_FC1, &temb, observer)?;
        e.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
        let mut cond = run(TIME_FC2, &e, observer)?;
        for (c, y) in cond.row_mut(0).iter_mut().zip(self.class_embed.row(label)) {
            *c += y;
        }
        h.add_row_vector(cond.row(0));

        for b in 0..BLOCKS {
            let normed = layer_norm(&h);
            let qkv = run(block_layer(b, 0), &normed, observer)?;
            let attn = attention(&qkv);
            let proj = run(block_layer(b, 1), &attn, observer)?;
            add_assign(&mut h, &proj);

            let normed = layer_norm(&h);
            let mut mid = run(block_layer(b, 2), &normed, observer)?;
            mid.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
            let out = run(block_layer(b, 3), &mid, observer)?;
            add_assign(&mut h, &out);
        }

        let normed = layer_norm(&h);
        let out = run(FINAL_PROJ, &normed, observer)?;
        let eps = unpatchify(&out);
        if !eps.is_finite() {
            return Err(Error::numeric("final_proj", "non-finite output"));
        }
        Ok(eps)
    }
}

/// Latent (4,8,8) → tokens (16, 16); token features ordered (c, dy, dx).
pub fn patchify(x: &Latent) -> Matrix {
    let grid = WIDTH / PATCH;
    let mut out = Matrix::zeros(TOKENS, PATCH_DIM);
    for ty in 0..HEIGHT / PATCH {
        for tx in 0..grid {
            let row = out.row_mut(ty * grid + tx);
            let mut k = 0;
            for c in 0..CHANNELS {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        row[k] = x.0[Latent::index(c, ty * PATCH + dy, tx * PATCH + dx)];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Matrix) -> Latent {
    let grid = WIDTH / PATCH;
    let mut out = vec![0.0; LATENT_LEN];
    for ty in 0..HEIGHT / PATCH {
        for tx in 0..grid {
            let row = tokens.row(ty * grid + tx);
            let mut k = 0;
            for c in 0..CHANNELS {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        out[Latent::index(c, ty * PATCH + dy, tx * PATCH + dx)] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Latent(out)
}

/// Sinusoidal embedding of the raw step index, `[cos | sin]`.
pub fn timestep_embedding(t: usize) -> Matrix {
    let half = HIDDEN / 2;
    let mut out = Matrix::zeros(1, HIDDEN);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.set(0, i, arg.cos());
        out.set(0, half + i, arg.sin());
    }
    out
}

/// Parameter-free layer norm over each row.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Multi-head self-attention on a packed `[q | k | v]` matrix.
fn attention(qkv: &Matrix) -> Matrix {
    let n = qkv.rows();
    let head_dim = HIDDEN / HEADS;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Matrix::zeros(n, HIDDEN);
    let mut weights = vec![0.0; n];
    for h in 0..HEADS {
        let q_off = h * head_dim;
        let k_off = HIDDEN + h * head_dim;
        let v_off = 2 * HIDDEN + h * head_dim;
        for i in 0..n {
            let q = &qkv.row(i)[q_off..q_off + head_dim];
            let mut max = f64::NEG_INFINITY;
            for (j, w) in weights.iter_mut().enumerate() {
                let k = &qkv.row(j)[k_off..k_off + head_dim];
                *w = crate::tensor::dot(q, k) * scale;
                max = max.max(*w);
            }
            let mut denom = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                denom += *w;
            }
            let dst = &mut out.row_mut(i)[q_off..q_off + head_dim];
            for (j, w) in weights.iter().enumerate() {
                let p = w / denom;
                let v = &qkv.row(j)[v_off..v_off + head_dim];
                for (d, x) in dst.iter_mut().zip(v) {
                    *d += p * x;
                }
            }
        }
    }
    out
}

fn add_assign(h: &mut Matrix, delta: &Matrix) {
    for (a, b) in h.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a += b;
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
