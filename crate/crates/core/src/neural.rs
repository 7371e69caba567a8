//! Fully-connected denoisers with hand-written backpropagation.
//!
//! A denoiser wraps an MLP `F` in EDM preconditioning:
//! `D(x, σ) = clamp(c_skip·x + c_out·F(c_in·x ⊕ embed(c_noise)), −U, U)`.
//! Training minimizes the batch mean of `‖D − x₀‖² / c_out²`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::error::{ensure_dim, Error, Result};
use crate::rng::{fill_normal, normal_vec, streams, Substream};
use crate::synthdata::{Dataset, DatasetKind};

pub const EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
    pub seed: u64,
}

/// Gradient of a scalar loss with respect to every [`MlpParams`] entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: p.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl MlpParams {
    /// He-normal hidden layers and a `1/√fan_in` output layer.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let stream = Substream::new(seed, streams::INIT);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l == sizes.len() - 2;
            let std = if last { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let mut vals = vec![0.0; fan_in * fan_out];
            fill_normal(&mut stream.rng(l as u64), &mut vals);
            vals.iter_mut().for_each(|v| *v *= std);
            weights.push(Array2::from_shape_vec((fan_out, fan_in), vals).expect("shape"));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
            seed,
        })
    }

    /// All-zero parameters of the given topology.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        let mut p = Self::init(sizes, activation, 0)?;
        p.weights.iter_mut().for_each(|w| w.fill(0.0));
        Ok(p)
    }

    pub fn d_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn d_out(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Layer-major flattening: `W_0, b_0, W_1, b_1, …` with row-major weights.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dim(self.num_params(), flat.len(), "flat parameter vector")?;
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[at];
                at += 1;
            }
            for v in b.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        ensure_dim(self.d_in(), input.ncols(), "network input")?;
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut a = input.to_owned();
        for l in 0..n_layers {
            let mut z = a.dot(&self.weights[l].t());
            z += &self.biases[l];
            inputs.push(a);
            if l + 1 < n_layers {
                let act = self.activation;
                a = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                return Ok(ForwardCache {
                    inputs,
                    pre,
                    output: z,
                });
            }
        }
        unreachable!("loop returns on the last layer")
    }

    /// Backpropagates `d_output = ∂loss/∂output` through the cached pass.
    pub fn backward_batch(&self, cache: &ForwardCache, d_output: &Array2<f64>) -> Gradients {
        let n_layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_output.clone();
        for l in (0..n_layers).rev() {
            grads.weights[l] = delta.t().dot(&cache.inputs[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                let act = self.activation;
                back.zip_mut_with(&cache.pre[l - 1], |d, z| *d *= act.derivative(*z));
                delta = back;
            }
        }
        grads
    }

    pub fn apply_step(&mut self, step: &Gradients) {
        for (w, d) in self.weights.iter_mut().zip(&step.weights) {
            *w -= d;
        }
        for (b, d) in self.biases.iter_mut().zip(&step.biases) {
            *b -= d;
        }
    }
}

/// Plain batch-mean squared error of the raw network output.
pub fn mlp_mse_loss_and_grad(
    params: &MlpParams,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(Gradients, f64)> {
    let cache = params.forward_batch(inputs)?;
    ensure_dim(cache.output.len(), targets.len(), "targets")?;
    let n = inputs.nrows() as f64;
    let diff = &cache.output - &targets;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let d_out = diff * (2.0 / n);
    Ok((params.backward_batch(&cache, &d_out), loss))
}

/// EDM preconditioning constants. With `skip = false` the skip connection is
/// removed (`c_skip = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub sigma_data: f64,
    pub skip: bool,
}

impl Preconditioner {
    pub fn edm(sigma_data: f64) -> Self {
        Self {
            sigma_data,
            skip: true,
        }
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        if self.skip {
            let sd2 = self.sigma_data * self.sigma_data;
            sd2 / (sigma * sigma + sd2)
        } else {
            0.0
        }
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }

    /// EDM loss weight `1/c_out²`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        1.0 / self.c_out(sigma).powi(2)
    }
}

/// Sinusoidal features of the scalar noise conditioning.
pub fn embed_noise(c_noise: f64) -> [f64; EMBED_DIM] {
    let half = EMBED_DIM / 2;
    let mut out = [0.0; EMBED_DIM];
    for j in 0..half {
        let freq = (0.5f64.ln() + j as f64 * (64.0f64.ln()) / (half - 1) as f64).exp();
        out[j] = (freq * c_noise).sin();
        out[half + j] = (freq * c_noise).cos();
    }
    out
}

/// Builds `[c_in·x ⊕ embed(c_noise)]` rows for a batch.
pub fn conditioned_input(xs: &[f64], sigmas: &[f64], dim: usize, pre: &Preconditioner) -> Array2<f64> {
    let n = sigmas.len();
    let mut input = Array2::zeros((n, dim + EMBED_DIM));
    for (i, (x, &s)) in xs.chunks_exact(dim).zip(sigmas).enumerate() {
        let c_in = pre.c_in(s);
        let mut row = input.row_mut(i);
        for j in 0..dim {
            row[j] = c_in * x[j];
        }
        for (j, e) in embed_noise(pre.c_noise(s)).iter().enumerate() {
            row[dim + j] = *e;
        }
    }
    input
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub params: MlpParams,
    pub precond: Preconditioner,
    pub bound: f64,
}

impl DenoiserNet {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        precond: Preconditioner,
        bound: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![dim + EMBED_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self::from_params(MlpParams::init(&sizes, activation, seed)?, precond, bound)
    }

    pub fn from_params(params: MlpParams, precond: Preconditioner, bound: f64) -> Result<Self> {
        if params.d_in() != params.d_out() + EMBED_DIM {
            return Err(Error::Shape(format!(
                "denoiser input width {} must equal output width {} plus {EMBED_DIM}",
                params.d_in(),
                params.d_out()
            )));
        }
        if !(bound > 0.0) {
            return Err(Error::Config("output bound must be positive".into()));
        }
        Ok(Self {
            params,
            precond,
            bound,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.params.d_out()
    }

    fn check(&self, xs: &[f64], sigmas: &[f64]) -> Result<()> {
        ensure_dim(self.data_dim() * sigmas.len(), xs.len(), "denoiser batch")?;
        if !self.params.is_finite() {
            return Err(Error::Numerical("denoiser has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Unclamped output `c_skip·x + c_out·F` together with the cache.
    fn forward_raw(&self, xs: &[f64], sigmas: &[f64]) -> Result<(ForwardCache, Array2<f64>)> {
        self.check(xs, sigmas)?;
        let d = self.data_dim();
        let input = conditioned_input(xs, sigmas, d, &self.precond);
        let cache = self.params.forward_batch(input.view())?;
        let mut out = cache.output.clone();
        for (i, (mut row, &s)) in out.rows_mut().into_iter().zip(sigmas).enumerate() {
            let (cs, co) = (self.precond.c_skip(s), self.precond.c_out(s));
            for j in 0..d {
                row[j] = cs * xs[i * d + j] + co * row[j];
            }
        }
        Ok((cache, out))
    }

    /// Batch-mean EDM-weighted loss and its exact gradient.
    pub fn loss_and_grad(&self, xs: &[f64], sigmas: &[f64], targets: &[f64]) -> Result<(Gradients, f64)> {
        let (g, sum) = self.loss_and_grad_sum(xs, sigmas, targets)?;
        let n = sigmas.len() as f64;
        let mut g = g;
        g.scale(1.0 / n);
        Ok((g, sum / n))
    }

    /// Summed (not averaged) loss and gradient; shards of a batch add up.
    pub fn loss_and_grad_sum(&self, xs: &[f64], sigmas: &[f64], targets: &[f64]) -> Result<(Gradients, f64)> {
        let (g, rows) = self.loss_and_grad_rows(xs, sigmas, targets)?;
        Ok((g, rows.iter().sum()))
    }

    /// Summed gradient with the loss of each row.
    pub fn loss_and_grad_rows(&self, xs: &[f64], sigmas: &[f64], targets: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        ensure_dim(xs.len(), targets.len(), "denoiser targets")?;
        let d = self.data_dim();
        let (cache, raw) = self.forward_raw(xs, sigmas)?;
        let mut d_out = Array2::zeros(raw.raw_dim());
        let mut rows = Vec::with_capacity(sigmas.len());
        for (i, &s) in sigmas.iter().enumerate() {
            let w = self.precond.loss_weight(s);
            let co = self.precond.c_out(s);
            let mut loss = 0.0;
            for j in 0..d {
                let r = raw[[i, j]];
                let out = r.clamp(-self.bound, self.bound);
                let e = out - targets[i * d + j];
                loss += w * e * e;
                if r.abs() <= self.bound {
                    d_out[[i, j]] = 2.0 * w * co * e;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical("non-finite denoiser loss".into()));
            }
            rows.push(loss);
        }
        Ok((self.params.backward_batch(&cache, &d_out), rows))
    }
}

impl Denoiser for DenoiserNet {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_batch(x_t, &[sigma])
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let (_, raw) = self.forward_raw(xs, sigmas)?;
        let u = self.bound;
        Ok(raw.iter().map(|v| v.clamp(-u, u)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct OptimizerState {
    cfg: OptimizerConfig,
    m: Option<Gradients>,
    v: Option<Gradients>,
    t: i32,
}

impl OptimizerState {
    fn new(cfg: OptimizerConfig, params: &MlpParams) -> Self {
        let (m, v) = match cfg {
            OptimizerConfig::Adam { .. } => (Some(Gradients::zeros_like(params)), Some(Gradients::zeros_like(params))),
            OptimizerConfig::Sgd { .. } => (None, None),
        };
        Self { cfg, m, v, t: 0 }
    }

    fn step(&mut self, params: &mut MlpParams, grads: &Gradients) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Sgd { lr } => {
                let mut g = grads.clone();
                g.scale(lr);
                params.apply_step(&g);
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let m = self.m.as_mut().expect("adam state");
                let v = self.v.as_mut().expect("adam state");
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                };
                for l in 0..params.weights.len() {
                    ndarray::Zip::from(&mut params.weights[l])
                        .and(&mut m.weights[l])
                        .and(&mut v.weights[l])
                        .and(&grads.weights[l])
                        .for_each(|p, m, v, g| update(p, m, v, *g));
                    ndarray::Zip::from(&mut params.biases[l])
                        .and(&mut m.biases[l])
                        .and(&mut v.biases[l])
                        .and(&grads.biases[l])
                        .for_each(|p, m, v, g| update(p, m, v, *g));
                }
            }
        }
    }
}

/// How training draws noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSampling {
    /// Uniform diffusion time, i.e. log-uniform σ over the schedule.
    LogUniform,
    /// `ln σ ~ N(p_mean, p_std²)`, clipped to the schedule range.
    LogNormal { p_mean: f64, p_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of passes `K` over the dataset.
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_noise")]
    pub noise: NoiseSampling,
    pub seed: u64,
    /// Data-parallel gradient shards per batch, reduced in a fixed order.
    #[serde(default = "default_shards")]
    pub grad_shards: usize,
}

fn default_noise() -> NoiseSampling {
    NoiseSampling::LogUniform
}

fn default_shards() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer: OptimizerConfig::default(),
            noise: NoiseSampling::LogUniform,
            seed,
            grad_shards: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs K must be at least 1".into()));
        }
        if self.batch_size == 0 || self.grad_shards == 0 {
            return Err(Error::Config("batch size and shard count must be positive".into()));
        }
        Ok(())
    }
}

/// Noise drawn for one minibatch: rows of the dataset, their noise levels
/// and the standard-normal perturbations (row-major).
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub rows: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub eps: Vec<f64>,
}

impl NoisyBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Contiguous sub-batch `range`.
    pub fn slice(&self, range: std::ops::Range<usize>, dim: usize) -> NoisyBatch {
        NoisyBatch {
            rows: self.rows[range.clone()].to_vec(),
            sigmas: self.sigmas[range.clone()].to_vec(),
            eps: self.eps[range.start * dim..range.end * dim].to_vec(),
        }
    }

    /// `x₀ + σ ε` for every row of `data`.
    pub fn noisy_inputs(&self, data: &Dataset) -> (Vec<f64>, Vec<f64>) {
        let d = data.dim;
        let mut xs = Vec::with_capacity(self.rows.len() * d);
        let mut x0s = Vec::with_capacity(self.rows.len() * d);
        for (k, (&r, &s)) in self.rows.iter().zip(&self.sigmas).enumerate() {
            let x0 = data.sample(r);
            let e = &self.eps[k * d..(k + 1) * d];
            xs.extend(x0.iter().zip(e).map(|(a, b)| a + s * b));
            x0s.extend_from_slice(x0);
        }
        (xs, x0s)
    }
}

/// A training loss over a fixed set of rows.
pub trait Objective: Sync {
    fn rows(&self) -> usize;

    /// Dimension of the per-row noise vector.
    fn noise_dim(&self) -> usize;

    /// Summed gradient over `batch` and the loss of each row.
    fn loss_grad_rows(&self, params: &MlpParams, batch: &NoisyBatch) -> Result<(Gradients, Vec<f64>)>;
}

/// Plain denoising objective on a dataset.
pub struct DenoisingObjective<'a> {
    pub data: &'a Dataset,
    pub precond: Preconditioner,
    pub bound: f64,
}

impl Objective for DenoisingObjective<'_> {
    fn rows(&self) -> usize {
        self.data.len()
    }

    fn noise_dim(&self) -> usize {
        self.data.dim
    }

    fn loss_grad_rows(&self, params: &MlpParams, batch: &NoisyBatch) -> Result<(Gradients, Vec<f64>)> {
        let (xs, x0s) = batch.noisy_inputs(self.data);
        let net = DenoiserNet {
            params: params.clone(),
            precond: self.precond,
            bound: self.bound,
        };
        net.loss_and_grad_rows(&xs, &batch.sigmas, &x0s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Mean loss in each quarter of the diffusion-time range.
    pub bucket_losses: [f64; 4],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,bucket0,bucket1,bucket2,bucket3\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.step, p.loss, p.bucket_losses[0], p.bucket_losses[1], p.bucket_losses[2], p.bucket_losses[3]
            ));
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }
}

/// Epoch-at-a-time minibatch optimizer.
pub struct Trainer {
    pub params: MlpParams,
    cfg: TrainConfig,
    schedule: DiffusionSchedule,
    opt: OptimizerState,
    step: usize,
    epoch: usize,
    initial_loss: Option<f64>,
    pub curve: TrainingCurve,
}

impl Trainer {
    pub fn new(params: MlpParams, cfg: TrainConfig, schedule: DiffusionSchedule) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(cfg.optimizer, &params);
        Ok(Self {
            params,
            cfg,
            schedule,
            opt,
            step: 0,
            epoch: 0,
            initial_loss: None,
            curve: TrainingCurve::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn draw_sigma<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.cfg.noise {
            NoiseSampling::LogUniform => self.schedule.sigma_from_uniform(rng.random()),
            NoiseSampling::LogNormal { p_mean, p_std } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (p_mean + p_std * z)
                    .exp()
                    .clamp(self.schedule.sigma_min, self.schedule.sigma_max)
            }
        }
    }

    fn batch_loss_grad<O: Objective>(&self, obj: &O, batch: &NoisyBatch) -> Result<(Gradients, Vec<f64>)> {
        let n = batch.len();
        let shards = self.cfg.grad_shards.min(n).max(1);
        let dim = obj.noise_dim();
        let bounds: Vec<(usize, usize)> = (0..shards).map(|k| (k * n / shards, (k + 1) * n / shards)).collect();
        let parts: Vec<Result<(Gradients, Vec<f64>)>> = bounds
            .par_iter()
            .map(|&(a, b)| obj.loss_grad_rows(&self.params, &batch.slice(a..b, dim)))
            .collect();
        let mut parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        // pairwise reduction in a fixed order
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some((mut g, mut l)) = it.next() {
                if let Some((g2, l2)) = it.next() {
                    g.add_assign(&g2);
                    l.extend(l2);
                    next.push((g, l));
                } else {
                    next.push((g, l));
                }
            }
            parts = next;
        }
        let (mut g, rows) = parts.pop().expect("at least one shard");
        g.scale(1.0 / n as f64);
        Ok((g, rows))
    }

    pub fn run_epoch<O: Objective>(&mut self, obj: &O) -> Result<()> {
        let n = obj.rows();
        if n == 0 {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        let dim = obj.noise_dim();
        let mut rng = Substream::new(self.cfg.seed, streams::TRAIN).rng(self.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut buckets = [(0.0, 0usize); 4];
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let sigmas: Vec<f64> = chunk.iter().map(|_| self.draw_sigma(&mut rng)).collect();
            let mut eps = vec![0.0; chunk.len() * dim];
            fill_normal(&mut rng, &mut eps);
            let batch = NoisyBatch {
                rows: chunk.to_vec(),
                sigmas,
                eps,
            };
            let (grads, rows) = self.batch_loss_grad(obj, &batch).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} (epoch {}, batch {bi})", self.epoch)),
                other => other,
            })?;
            let loss = rows.iter().sum::<f64>() / rows.len() as f64;
            let initial = *self.initial_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > 1e3 * initial.max(1e-12) {
                return Err(Error::Divergence {
                    step: self.step,
                    detail: format!(
                        "loss {loss:e} exceeds 1000x the initial loss {initial:e} (epoch {}, batch {bi})",
                        self.epoch
                    ),
                });
            }
            self.opt.step(&mut self.params, &grads);
            self.step += 1;
            epoch_loss += loss * chunk.len() as f64;
            for (&s, &l) in batch.sigmas.iter().zip(&rows) {
                let t = self.schedule.t_of_sigma(s).clamp(0.0, 0.999_999);
                let b = (t * 4.0) as usize;
                buckets[b].0 += l;
                buckets[b].1 += 1;
            }
        }
        self.curve.points.push(CurvePoint {
            step: self.step,
            epoch: self.epoch,
            loss: epoch_loss / n as f64,
            bucket_losses: buckets.map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 }),
        });
        self.epoch += 1;
        Ok(())
    }

    pub fn finish(self) -> (MlpParams, TrainingCurve) {
        (self.params, self.curve)
    }
}

/// Runs `cfg.epochs` epochs of `obj` from `params`.
pub fn train<O: Objective>(
    obj: &O,
    params: MlpParams,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
) -> Result<(MlpParams, TrainingCurve)> {
    let mut trainer = Trainer::new(params, cfg.clone(), *schedule)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(obj)?;
    }
    Ok(trainer.finish())
}

/// Network shape and output bound for a denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Silu
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            activation: Activation::Silu,
        }
    }
}

/// Root-mean-square entry of a dataset, used as `σ_data`.
pub fn dataset_rms(ds: &Dataset) -> f64 {
    let flat = ds.flat();
    (flat.iter().map(|v| v * v).sum::<f64>() / flat.len().max(1) as f64).sqrt()
}

/// Trains a denoiser on any dataset (the full-resolution baseline uses this
/// directly).
pub fn train_denoiser(
    ds: &Dataset,
    schedule: &DiffusionSchedule,
    net: &NetConfig,
    cfg: &TrainConfig,
    bound: f64,
) -> Result<(DenoiserNet, TrainingCurve)> {
    let precond = Preconditioner::edm(dataset_rms(ds).max(1e-3));
    let init = DenoiserNet::new(ds.dim, &net.hidden, net.activation, precond, bound, cfg.seed)?;
    let obj = DenoisingObjective {
        data: ds,
        precond,
        bound,
    };
    let (params, curve) = train(&obj, init.params, cfg, schedule)?;
    Ok((DenoiserNet::from_params(params, precond, bound)?, curve))
}

/// Stage one: a denoiser for one data view.
pub fn train_view_denoiser(
    ds: &Dataset,
    schedule: &DiffusionSchedule,
    net: &NetConfig,
    cfg: &TrainConfig,
    bound: f64,
) -> Result<(DenoiserNet, TrainingCurve)> {
    if !matches!(ds.kind, DatasetKind::View { .. }) {
        return Err(Error::Config("view denoisers train on view datasets".into()));
    }
    train_denoiser(ds, schedule, net, cfg, bound)
}

/// Worst relative error between backprop and central finite differences
/// of the weighted denoising loss, over all parameters with non-negligible
/// gradient. `sizes` are the layer widths including the embedded input.
pub fn gradient_check(sizes: &[usize], act: Activation, seed: u64) -> Result<f64> {
    if sizes.len() < 2 || sizes[0] <= EMBED_DIM {
        return Err(Error::Config("gradient check needs an input wider than the time embedding".into()));
    }
    let dim = *sizes.last().expect("non-empty");
    let mut hidden = sizes[1..sizes.len() - 1].to_vec();
    if hidden.is_empty() {
        hidden.push(3);
    }
    let mut net = DenoiserNet::new(dim, &hidden, act, Preconditioner::edm(0.7), 1e6, seed)?;
    let mut rng = Substream::new(seed, streams::INIT).child(1).rng(0);
    for b in net.params.biases.iter_mut() {
        b.iter_mut().for_each(|v| *v = 0.1 * rng.random::<f64>() - 0.05);
    }
    let n = 5;
    let xs = normal_vec(&mut rng, n * dim);
    let targets = normal_vec(&mut rng, n * dim);
    let sigmas: Vec<f64> = (0..n).map(|i| 0.05 * 3f64.powi(i as i32)).collect();
    let (g, _) = net.loss_and_grad(&xs, &sigmas, &targets)?;
    let analytic = g.to_flat();
    let base = net.params.to_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] += h;
        net.params.set_flat(&p)?;
        let (_, lp) = net.loss_and_grad(&xs, &sigmas, &targets)?;
        p[k] -= 2.0 * h;
        net.params.set_flat(&p)?;
        let (_, lm) = net.loss_and_grad(&xs, &sigmas, &targets)?;
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[k];
        if a.abs().max(fd.abs()) > 1e-7 {
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// Gathers row `i` of every matrix in `parts` side by side.
pub fn hstack(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("same row count")
}

/// First `n` rows.
pub fn head_rows(a: &Array2<f64>, n: usize) -> Array2<f64> {
    a.slice(s![..n, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GridRule;
    use crate::linops::GridShape;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::new(0.002, 80.0, 32, GridRule::Karras).unwrap()
    }

    #[test]
    fn preconditioner_limits() {
        let p = Preconditioner::edm(0.5);
        assert!((p.c_skip(1e-8) - 1.0).abs() < 1e-12);
        assert!(p.c_out(1e-8) < 1e-7);
        let q = Preconditioner { sigma_data: 0.5, skip: false };
        assert_eq!(q.c_skip(0.3), 0.0);
    }

    #[test]
    fn zero_network_limits() {
        let mut net = DenoiserNet::new(3, &[8], Activation::Silu, Preconditioner::edm(0.5), 10.0, 1).unwrap();
        net.params = MlpParams::zeros(&net.params.sizes, Activation::Silu).unwrap();
        let x = [0.3, -0.7, 1.1];
        let out = net.denoise(&x, 1e-6).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
        net.precond.skip = false;
        assert!(net.denoise(&x, 0.8).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn outputs_are_clamped() {
        let mut net = DenoiserNet::new(2, &[4], Activation::Relu, Preconditioner::edm(0.5), 1.0, 3).unwrap();
        net.params.biases[1].fill(1e6);
        let out = net.denoise(&[0.0, 0.0], 2.0).unwrap();
        assert_eq!(out, vec![1.0, 1.0]);
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let mut net = DenoiserNet::new(2, &[4], Activation::Relu, Preconditioner::edm(0.5), 1.0, 3).unwrap();
        net.params.weights[0][[0, 0]] = f64::NAN;
        assert!(matches!(net.denoise(&[0.0, 0.0], 1.0), Err(Error::Numerical(_))));
        assert!(matches!(net.denoise(&[0.0], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn golden_tiny_network() {
        let p = MlpParams::init(&[2, 4, 2], Activation::Silu, 7).unwrap();
        let input = Array2::from_shape_vec((1, 2), vec![0.5, -1.25]).unwrap();
        let out = p.forward_batch(input.view()).unwrap().output;
        for (a, b) in out.iter().zip(GOLDEN_MLP) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a:e} vs {b:e}");
        }
    }

    const GOLDEN_MLP: [f64; 2] = [-2.0331726554574037e-1, 2.6179903161617113e-1];

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let p = MlpParams::init(&[3, 5, 2], Activation::Silu, 2).unwrap();
        let input = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let target = p.forward_batch(input.view()).unwrap().output;
        let (g, loss) = mlp_mse_loss_and_grad(&p, input.view(), target.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient() {
        let mut p = MlpParams::zeros(&[1, 1], Activation::Relu).unwrap();
        p.weights[0][[0, 0]] = 1.5;
        let (x, y) = (2.0, 1.0);
        let input = Array2::from_elem((1, 1), x);
        let target = Array2::from_elem((1, 1), y);
        let (g, _) = mlp_mse_loss_and_grad(&p, input.view(), target.view()).unwrap();
        assert!((g.weights[0][[0, 0]] - 2.0 * (1.5 * x - y) * x).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (sizes, act, seed) in [
            (vec![2 + EMBED_DIM, 5, 2], Activation::Silu, 1u64),
            (vec![3 + EMBED_DIM, 4, 6, 3], Activation::Silu, 2),
            (vec![1 + EMBED_DIM, 7, 1], Activation::Silu, 3),
            (vec![4 + EMBED_DIM, 3, 3, 4], Activation::Silu, 4),
            (vec![2 + EMBED_DIM, 6, 2], Activation::Silu, 5),
        ] {
            let e = gradient_check(&sizes, act, seed).unwrap();
            assert!(e < 1e-4, "sizes {sizes:?}: {e:e}");
        }
    }

    fn point_view_dataset(value: f64, n: usize) -> Dataset {
        Dataset::from_flat(
            "pm",
            DatasetKind::View { view_id: "v".into() },
            2,
            vec![value; 2 * n],
            Substream::new(0, 0),
        )
        .unwrap()
    }

    #[test]
    fn view_training_requires_view_data() {
        let full = Dataset::from_flat("f", DatasetKind::Full, 2, vec![0.0; 8], Substream::new(0, 0)).unwrap();
        let err = train_view_denoiser(&full, &sched(), &NetConfig::default(), &TrainConfig::new(1, 4, 0), 4.0)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(TrainConfig::new(0, 4, 0).validate().is_err());
    }

    #[test]
    fn point_mass_view_is_learned() {
        let ds = point_view_dataset(0.3, 1024);
        let net_cfg = NetConfig { hidden: vec![32, 32], activation: Activation::Silu };
        let mut cfg = TrainConfig::new(300, 64, 4);
        cfg.optimizer = OptimizerConfig::Adam { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let (net, curve) = train_view_denoiser(&ds, &sched(), &net_cfg, &cfg, 4.0).unwrap();
        assert!(curve.final_loss().unwrap() < curve.points[0].loss);
        let mut rng = Substream::new(1, 2).rng(0);
        for sigma in [0.002, 0.01, 0.1, 0.5, 1.0, 5.0] {
            let (mut err, mut naive) = (0.0, 0.0);
            for _ in 0..20 {
                let x: Vec<f64> = normal_vec(&mut rng, 2).iter().map(|e| 0.3 + sigma * e).collect();
                let out = net.denoise(&x, sigma).unwrap();
                err += out.iter().map(|v| (v - 0.3).abs()).sum::<f64>();
                naive += x.iter().map(|v| (v - 0.3).abs()).sum::<f64>();
            }
            let (err, naive) = (err / 40.0, naive / 40.0);
            assert!(err < 0.03, "sigma {sigma}: mean error {err}");
            if sigma >= 0.1 {
                assert!(err < 0.1 * naive, "sigma {sigma}: {err} vs identity {naive}");
            }
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let spec = crate::synthdata::desk_spec(&crate::synthdata::DeskSpecParams::new(GridShape::square(4), 2, 0.05, 1))
            .unwrap();
        let full = crate::synthdata::sample_dataset(&spec, 64, Substream::new(1, 1)).unwrap();
        let net_cfg = NetConfig { hidden: vec![16], activation: Activation::Silu };
        let cfg = TrainConfig::new(3, 16, 9);
        let (a, _) = train_denoiser(&full, &sched(), &net_cfg, &cfg, spec.bound).unwrap();
        let (b, _) = train_denoiser(&full, &sched(), &net_cfg, &cfg, spec.bound).unwrap();
        let bits = |n: &DenoiserNet| n.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let mut sharded = cfg.clone();
        sharded.grad_shards = 4;
        let (_, ca) = train_denoiser(&full, &sched(), &net_cfg, &cfg, spec.bound).unwrap();
        let (_, cb) = train_denoiser(&full, &sched(), &net_cfg, &sharded, spec.bound).unwrap();
        let (la, lb) = (ca.final_loss().unwrap(), cb.final_loss().unwrap());
        assert!((la - lb).abs() <= 1e-6 * la.abs().max(1.0), "{la} vs {lb}");
    }

    #[test]
    fn divergence_is_reported() {
        let ds = point_view_dataset(0.3, 64);
        let mut cfg = TrainConfig::new(20, 16, 1);
        cfg.optimizer = OptimizerConfig::Sgd { lr: 1e6 };
        let err = train_view_denoiser(&ds, &sched(), &NetConfig { hidden: vec![8], activation: Activation::Silu }, &cfg, 4.0)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::Numerical(_)), "{err}");
    }
}
