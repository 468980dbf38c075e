//! Conditional flow matching on 2-D point latents.
//!
//! Data points `x0` live on the unit canvas and are drawn uniformly from the
//! boxes of an instruction. The path is `x_t = (1 - t) x0 + t x1` with
//! `x1 ~ N(0, I)`, so the regression target `u = x1 - x0` points from data to
//! noise and sampling integrates from `t = 1` down to `t = 0`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::InterleavedInstruction;
use crate::geometry::{BBox, CANVAS};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A point latent; components are finite.
pub type ToyLatent = Vec<f64>;

pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<ToyLatent, FlowError> {
    if x0.len() != x1.len() {
        return Err(FlowError::DimensionMismatch(x0.len(), x1.len()));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Result<ToyLatent, FlowError> {
    if x0.len() != x1.len() {
        return Err(FlowError::DimensionMismatch(x0.len(), x1.len()));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| b - a).collect())
}

// ---------------------------------------------------------------------------
// Conditioning

pub const DEFAULT_EMBED_DIM: usize = 64;

/// Deterministic instruction embedding: a hashed random vector per word plus
/// a fixed random projection of each normalized box.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedder {
    seed: u64,
    dim: usize,
    projection: Array2<f64>,
}

impl ConditionEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_0000_0001);
        let projection = Array2::from_shape_fn((dim, 4), |_| rng.sample::<f64, _>(StandardNormal));
        Self { seed, dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn word_vector(&self, word: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.to_lowercase().as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        Array1::from_shape_fn(self.dim, |_| 0.1 * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn embed(&self, inst: &InterleavedInstruction) -> Vec<f64> {
        let mut e = Array1::zeros(self.dim);
        for w in inst.words() {
            e += &self.word_vector(w);
        }
        for b in inst.boxes() {
            let f = Array1::from_iter(b.coords().map(|c| c as f64 / CANVAS as f64));
            e += &self.projection.dot(&f);
        }
        e.to_vec()
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d: usize,
    pub m: usize,
    pub width: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d: 2,
            m: DEFAULT_EMBED_DIM,
            width: 128,
        }
    }
}

impl ModelShape {
    fn input(&self) -> usize {
        self.d + 1 + self.m
    }

    pub fn param_count(&self) -> usize {
        let (i, w, d) = (self.input(), self.width, self.d);
        w * i + w + w * w + w + d * w + d
    }
}

/// Anything that can act as a velocity field `v(x, t, e)` on a batch of points.
pub trait VelocityField {
    /// `x` is `(batch, d)`; every row shares time `t` and condition `e`.
    fn velocity(&self, x: ArrayView2<f64>, t: f64, e: &[f64]) -> Array2<f64>;
}

/// Two tanh hidden layers over the concatenation `[x_t, t, e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    shape: ModelShape,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

const TANH_GAIN: f64 = 5.0 / 3.0;

/// Fixed input scaling so unit-canvas points and times start in tanh's
/// responsive range instead of its near-linear centre.
const X_INPUT_SCALE: f64 = 3.0;
const T_INPUT_SCALE: f64 = 5.0;

struct Activations {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl VelocityModel {
    /// Normal init scaled by `gain/sqrt(fan_in)`, with the tanh gain 5/3 on
    /// hidden layers and 1 on the output layer; zero biases.
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize, gain: f64| {
            let s = gain / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| s * rng.sample::<f64, _>(StandardNormal))
        };
        let (i, w, d) = (shape.input(), shape.width, shape.d);
        Self {
            shape,
            w1: layer(w, i, TANH_GAIN),
            b1: Array1::zeros(w),
            w2: layer(w, w, TANH_GAIN),
            b2: Array1::zeros(w),
            w3: layer(d, w, 1.0),
            b3: Array1::zeros(d),
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    /// Zero the output layer, making the model the zero field.
    pub fn zero_output(&mut self) {
        self.w3.fill(0.0);
        self.b3.fill(0.0);
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape.param_count());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.extend(self.b3.iter());
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), FlowError> {
        if flat.len() != self.shape.param_count() {
            return Err(FlowError::DimensionMismatch(flat.len(), self.shape.param_count()));
        }
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        Ok(())
    }

    fn forward(&self, input: Array2<f64>) -> Activations {
        let h1 = (input.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        let out = h2.dot(&self.w3.t()) + &self.b3;
        Activations { input, h1, h2, out }
    }

    fn input_matrix(&self, x: ArrayView2<f64>, t: &[f64], e: ArrayView2<f64>) -> Array2<f64> {
        let ModelShape { d, m, .. } = self.shape;
        let mut input = Array2::zeros((x.nrows(), d + 1 + m));
        input.slice_mut(s![.., ..d]).assign(&(&x * X_INPUT_SCALE));
        input.column_mut(d).assign(&Array1::from_iter(t.iter().map(|t| t * T_INPUT_SCALE)));
        input.slice_mut(s![.., d + 1..]).assign(&e);
        input
    }

    pub fn predict(&self, x: ArrayView2<f64>, t: &[f64], e: ArrayView2<f64>) -> Array2<f64> {
        self.forward(self.input_matrix(x, t, e)).out
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, x: ArrayView2<f64>, t: f64, e: &[f64]) -> Array2<f64> {
        let n = x.nrows();
        let ev = Array1::from(e.to_vec());
        let em = ev.broadcast((n, e.len())).expect("broadcast rows").to_owned();
        self.predict(x, &vec![t; n], em.view())
    }
}

// ---------------------------------------------------------------------------
// Loss

/// A batch of data points and their condition embeddings, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Array2<f64>,
    pub e: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The batch concatenated with itself.
    pub fn doubled(&self) -> Batch {
        Batch {
            x0: ndarray::concatenate(Axis(0), &[self.x0.view(), self.x0.view()]).unwrap(),
            e: ndarray::concatenate(Axis(0), &[self.e.view(), self.e.view()]).unwrap(),
        }
    }
}

/// Where the noise endpoint comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSource {
    #[default]
    StandardNormal,
    /// `x1 = x0`, so the target velocity is zero. Test hook.
    CopyData,
}

/// Noise endpoints and times for a batch, drawn from `noise_seed`.
pub fn draw_noise(batch: &Batch, noise_seed: u64, source: NoiseSource) -> (Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (n, d) = batch.x0.dim();
    let mut x1 = Array2::zeros((n, d));
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..d {
            x1[[i, j]] = rng.sample(StandardNormal);
        }
        t.push(rng.random::<f64>());
    }
    if source == NoiseSource::CopyData {
        x1.assign(&batch.x0);
    }
    (x1, t)
}

/// Loss `mean_b |v(x_t, t, e) - (x1 - x0)|^2` and its exact gradient for
/// fixed endpoints and times.
pub fn loss_and_grad_at(model: &VelocityModel, batch: &Batch, x1: &Array2<f64>, t: &[f64]) -> (f64, Vec<f64>) {
    let n = batch.len();
    let tt = Array1::from(t.to_vec()).insert_axis(Axis(1));
    let xt = &batch.x0 * &(1.0 - &tt) + x1 * &tt;
    let u = x1 - &batch.x0;
    let act = model.forward(model.input_matrix(xt.view(), t, batch.e.view()));
    let diff = &act.out - &u;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;

    let d_out = diff * (2.0 / n as f64);
    let g_w3 = d_out.t().dot(&act.h2);
    let g_b3 = d_out.sum_axis(Axis(0));
    let d_z2 = d_out.dot(&model.w3) * act.h2.mapv(|h| 1.0 - h * h);
    let g_w2 = d_z2.t().dot(&act.h1);
    let g_b2 = d_z2.sum_axis(Axis(0));
    let d_z1 = d_z2.dot(&model.w2) * act.h1.mapv(|h| 1.0 - h * h);
    let g_w1 = d_z1.t().dot(&act.input);
    let g_b1 = d_z1.sum_axis(Axis(0));

    let mut grad = Vec::with_capacity(model.shape.param_count());
    grad.extend(g_w1.iter());
    grad.extend(g_b1.iter());
    grad.extend(g_w2.iter());
    grad.extend(g_b2.iter());
    grad.extend(g_w3.iter());
    grad.extend(g_b3.iter());
    (loss, grad)
}

/// Flow-matching loss and gradient with `x1` and `t` drawn from `noise_seed`.
pub fn fm_loss_and_grad(model: &VelocityModel, batch: &Batch, noise_seed: u64, source: NoiseSource) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "empty batch");
    let (x1, t) = draw_noise(batch, noise_seed, source);
    loss_and_grad_at(model, batch, &x1, &t)
}

/// Largest relative error between the analytic gradient and central finite
/// differences with step `h`, over `n_params` parameters picked by `pick_seed`.
/// Rel. error is `|a - f| / max(|a|, |f|, 1e-7)`.
pub fn gradient_check(model: &VelocityModel, batch: &Batch, noise_seed: u64, n_params: usize, h: f64, pick_seed: u64) -> f64 {
    let (x1, t) = draw_noise(batch, noise_seed, NoiseSource::StandardNormal);
    let (_, grad) = loss_and_grad_at(model, batch, &x1, &t);
    let base = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(pick_seed);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_params {
        let k = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p).unwrap();
        let up = loss_and_grad_at(&probe, batch, &x1, &t).0;
        p[k] = base[k] - h;
        probe.set_params(&p).unwrap();
        let down = loss_and_grad_at(&probe, batch, &x1, &t).0;
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}

// ---------------------------------------------------------------------------
// Data

/// Normalized boxes of an instruction on the unit canvas.
pub fn unit_boxes(boxes: &[BBox]) -> Vec<[f64; 4]> {
    boxes.iter().map(|b| b.coords().map(|c| c as f64 / CANVAS as f64)).collect()
}

/// Draws `(x0, e)` pairs: a condition chosen uniformly, then a point uniform
/// on the union of its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSampler {
    conditions: Vec<(Vec<f64>, Vec<[f64; 4]>)>,
}

impl BoxSampler {
    /// Every condition needs at least one box.
    pub fn new(conditions: Vec<(Vec<f64>, Vec<BBox>)>) -> Self {
        assert!(conditions.iter().all(|(_, b)| !b.is_empty()), "condition without boxes");
        Self {
            conditions: conditions.into_iter().map(|(e, b)| (e, unit_boxes(&b))).collect(),
        }
    }

    pub fn from_instructions(embedder: &ConditionEmbedder, insts: &[InterleavedInstruction]) -> Self {
        Self::new(insts.iter().map(|i| (embedder.embed(i), i.boxes())).collect())
    }

    fn point(boxes: &[[f64; 4]], rng: &mut impl Rng) -> [f64; 2] {
        let areas: Vec<f64> = boxes.iter().map(|b| (b[2] - b[0]) * (b[3] - b[1])).collect();
        let total: f64 = areas.iter().sum();
        loop {
            let mut r = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < areas.len() && r >= areas[k] {
                r -= areas[k];
                k += 1;
            }
            let b = boxes[k];
            let p = [rng.random_range(b[0]..b[2]), rng.random_range(b[1]..b[3])];
            // rejection keeps the density uniform where boxes overlap
            let cover = boxes
                .iter()
                .filter(|q| q[0] <= p[0] && p[0] < q[2] && q[1] <= p[1] && p[1] < q[3])
                .count();
            if rng.random::<f64>() * cover as f64 <= 1.0 {
                return p;
            }
        }
    }

    /// [`BoxSampler::batch`] from a fresh generator seeded with `seed`.
    pub fn seeded_batch(&self, n: usize, seed: u64) -> Batch {
        self.batch(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn batch(&self, n: usize, rng: &mut impl Rng) -> Batch {
        let m = self.conditions[0].0.len();
        let mut x0 = Array2::zeros((n, 2));
        let mut e = Array2::zeros((n, m));
        for i in 0..n {
            let (emb, boxes) = &self.conditions[rng.random_range(0..self.conditions.len())];
            let p = Self::point(boxes, rng);
            x0[[i, 0]] = p[0];
            x0[[i, 1]] = p[1];
            e.row_mut(i).assign(&Array1::from(emb.clone()));
        }
        Batch { x0, e }
    }
}

// ---------------------------------------------------------------------------
// Training and sampling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub noise_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            learning_rate: 1e-2,
            init_seed: 0,
            data_seed: 1,
            noise_seed: 2,
        }
    }
}

/// Plain SGD. Returns the model and the per-step loss.
pub fn train(shape: ModelShape, config: &TrainConfig, sampler: &BoxSampler) -> (VelocityModel, Vec<f64>) {
    assert!(config.steps >= 1, "steps must be at least 1");
    let mut model = VelocityModel::new(shape, config.init_seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let mut params = model.params();
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = sampler.batch(config.batch_size, &mut data_rng);
        let (loss, grad) = fm_loss_and_grad(&model, &batch, noise_rng.random(), NoiseSource::StandardNormal);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        model.set_params(&params).expect("same shape");
        curve.push(loss);
    }
    (model, curve)
}

pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// Euler integration from `t = 1` (standard normal draws) to `t = 0`.
pub fn sample(field: &dyn VelocityField, e: &[f64], d: usize, n_samples: usize, n_steps: usize, seed: u64) -> Vec<ToyLatent> {
    assert!(n_steps >= 1, "n_steps must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::from_shape_fn((n_samples, d), |_| rng.sample::<f64, _>(StandardNormal));
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.velocity(x.view(), t, e);
        x.scaled_add(-dt, &v);
    }
    x.outer_iter().map(|r| r.to_vec()).collect()
}

/// Fraction of samples inside the union of `boxes` (unit canvas) dilated by
/// `tolerance` on every side. Zero when there are no boxes.
pub fn in_box_fraction(samples: &[ToyLatent], boxes: &[BBox], tolerance: f64) -> f64 {
    if samples.is_empty() || boxes.is_empty() {
        return 0.0;
    }
    let unit = unit_boxes(boxes);
    let inside = samples
        .iter()
        .filter(|p| {
            unit.iter().any(|b| {
                b[0] - tolerance <= p[0] && p[0] <= b[2] + tolerance && b[1] - tolerance <= p[1] && p[1] <= b[3] + tolerance
            })
        })
        .count();
    inside as f64 / samples.len() as f64
}

pub const DEFAULT_IN_BOX_TOLERANCE: f64 = 0.02;

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub shape: ModelShape,
    pub params: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub embed_seed: Option<u64>,
}

const CHECKPOINT_FORMAT: &str = "velocity-mlp-f64le";

/// One JSON header line, then the flat parameters as little-endian f64.
pub fn checkpoint_bytes(model: &VelocityModel, train: Option<&TrainConfig>, embed_seed: Option<u64>) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        shape: model.shape,
        params: model.shape.param_count(),
        train: train.copied(),
        embed_seed,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<(VelocityModel, CheckpointHeader), FlowError> {
    let bad = |s: &str| FlowError::Checkpoint(s.to_string());
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| FlowError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.params != header.shape.param_count() {
        return Err(bad("unsupported format or parameter count"));
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.params * 8 {
        return Err(bad("parameter block has the wrong length"));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = VelocityModel::new(header.shape, 0);
    model.set_params(&flat)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), FlowError> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(VelocityModel, CheckpointHeader), FlowError> {
    model_from_checkpoint(&fs::read(path)?)
}

/// Two columns, `step loss`, one line per step starting at 1.
pub fn write_loss_curve<W: Write>(mut w: W, curve: &[f64]) -> io::Result<()> {
    for (i, l) in curve.iter().enumerate() {
        writeln!(w, "{} {l:e}", i + 1)?;
    }
    w.flush()
}
