//! Second stage of bootstrapped training: combiner calibration, the range
//! adapter, the variance-regularized residual denoiser and the end-to-end
//! pipeline.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionSchedule, PosteriorOracle};
use crate::error::{ensure_dim, Error, Result};
use crate::io;
use crate::linops::{make_downsample_operator, patch_tiling, solve_normal_equations, DenseMatrix, ViewOperator};
use crate::neural::{
    conditioned_input, dataset_rms, train, train_denoiser, DenoiserNet, Gradients, MlpParams, NetConfig, NoisyBatch,
    Objective, Preconditioner, TrainConfig, Trainer, TrainingCurve, EMBED_DIM,
};
use crate::rng::{fill_normal, streams, Substream};
use crate::synthdata::{desk_spec, project_dataset_group, sample_dataset, DataSpec, Dataset, DeskSpecParams};

/// Number of diffusion-time bins used by the combiner and the adapter.
pub const ADAPTER_BINS: usize = 100;

/// Rows per chunk when evaluating large batches.
const EVAL_CHUNK: usize = 256;

/// Bin of `sigma` among `bins` equal intervals of diffusion time.
pub fn bin_of(schedule: &DiffusionSchedule, bins: usize, sigma: f64) -> usize {
    let t = schedule.t_of_sigma(sigma).clamp(0.0, 1.0);
    ((t * bins as f64) as usize).min(bins - 1)
}

/// What predicts the view-space posterior mean for one view group.
#[derive(Debug, Clone)]
pub enum ViewPredictor {
    /// One network shared by every operator of the group.
    Network(Arc<DenoiserNet>),
    /// One exact oracle per operator.
    Oracle(Vec<Arc<PosteriorOracle>>),
}

/// Operators that share a predictor (e.g. all patch locations).
#[derive(Debug, Clone)]
pub struct ViewGroup {
    pub id: String,
    pub operators: Vec<ViewOperator>,
    pub predictor: ViewPredictor,
}

impl ViewGroup {
    pub fn new(id: impl Into<String>, operators: Vec<ViewOperator>, predictor: ViewPredictor) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| Error::Config("a view group needs at least one operator".into()))?;
        let (m, m_i) = (first.m(), first.m_i());
        for op in &operators {
            ensure_dim(m, op.m(), "grouped operator input")?;
            ensure_dim(m_i, op.m_i(), "grouped operator view dimension")?;
        }
        match &predictor {
            ViewPredictor::Network(net) => ensure_dim(m_i, net.data_dim(), "view network")?,
            ViewPredictor::Oracle(o) => {
                ensure_dim(operators.len(), o.len(), "oracles per operator")?;
                for oracle in o {
                    ensure_dim(m_i, oracle.dim(), "view oracle")?;
                }
            }
        }
        Ok(Self {
            id: id.into(),
            operators,
            predictor,
        })
    }

    /// Builds a group whose predictors are the exact pushforward oracles.
    pub fn oracle(id: impl Into<String>, spec: &DataSpec, operators: Vec<ViewOperator>) -> Result<Self> {
        let oracles = operators
            .iter()
            .map(|op| Ok(Arc::new(PosteriorOracle::new(crate::synthdata::view_spec(spec, op)?))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, operators, ViewPredictor::Oracle(oracles))
    }

    pub fn full_dim(&self) -> usize {
        self.operators[0].m()
    }

    pub fn view_dim(&self) -> usize {
        self.operators[0].m_i()
    }

    /// View-space predictions `f(A_i x_n)` for every operator `i` (outer)
    /// and sample `n` (inner, row-major).
    pub fn view_predictions(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<Vec<f64>>> {
        let m = self.full_dim();
        let m_i = self.view_dim();
        ensure_dim(m * sigmas.len(), xs.len(), "view group batch")?;
        let n = sigmas.len();
        match &self.predictor {
            ViewPredictor::Network(net) => {
                let mut views = Vec::with_capacity(n * self.operators.len() * m_i);
                let mut sig = Vec::with_capacity(n * self.operators.len());
                for op in &self.operators {
                    for (x, s) in xs.chunks_exact(m).zip(sigmas) {
                        views.extend(op.apply_a(x)?);
                        sig.push(*s);
                    }
                }
                let out = net.denoise_batch(&views, &sig)?;
                Ok(out.chunks_exact(n * m_i).map(|c| c.to_vec()).collect())
            }
            ViewPredictor::Oracle(oracles) => self
                .operators
                .iter()
                .zip(oracles)
                .map(|(op, oracle)| {
                    let mut out = Vec::with_capacity(n * m_i);
                    for (x, s) in xs.chunks_exact(m).zip(sigmas) {
                        out.extend(oracle.denoise(&op.apply_a(x)?, *s)?);
                    }
                    Ok(out)
                })
                .collect(),
        }
    }
}

/// Scalar combiner weights, one per operator per diffusion-time bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerWeights {
    pub bins: usize,
    /// `values[b][i]` for bin `b` and operator `i` (groups flattened in order).
    pub values: Vec<Vec<f64>>,
    /// Bins whose least-squares fit was degenerate and fell back to 1.
    pub fallback_bins: Vec<usize>,
}

impl CombinerWeights {
    pub fn ones(bins: usize, operators: usize) -> Self {
        Self {
            bins,
            values: vec![vec![1.0; operators]; bins],
            fallback_bins: Vec::new(),
        }
    }

    pub fn operators(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }
}

/// Scalar envelope `s(σ)` over diffusion time, piecewise linear between
/// bin centres and constant beyond the outer centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeAdapter {
    pub schedule: DiffusionSchedule,
    pub values: Vec<f64>,
}

impl RangeAdapter {
    pub fn new(schedule: DiffusionSchedule, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical("adapter values must be finite and nonnegative".into()));
        }
        Ok(Self { schedule, values })
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn eval_t(&self, t: f64) -> f64 {
        let b = self.values.len();
        let pos = t.clamp(0.0, 1.0) * b as f64 - 0.5;
        if pos <= 0.0 {
            return self.values[0];
        }
        if pos >= (b - 1) as f64 {
            return self.values[b - 1];
        }
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    pub fn eval(&self, sigma: f64) -> f64 {
        self.eval_t(self.schedule.t_of_sigma(sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Output `c_out(σ)·F`, regularized by the `λ` penalty.
    Penalty,
    /// Output `s(σ)/√m · F` with the range adapter `s`.
    Adapter,
    /// Adapter scaling plus the `λ` penalty.
    Both,
}

impl ResidualMode {
    pub fn uses_adapter(self) -> bool {
        !matches!(self, ResidualMode::Penalty)
    }

    pub fn uses_penalty(self) -> bool {
        !matches!(self, ResidualMode::Adapter)
    }
}

/// The residual network `f₀(x, σ) = gain · scale(σ) · clamp(F(c_in·x ⊕ emb), −U, U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    pub params: MlpParams,
    pub precond: Preconditioner,
    pub bound: f64,
    pub mode: ResidualMode,
    pub adapter: Option<RangeAdapter>,
    pub gain: f64,
}

/// Serializable description of a residual network without its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualHeader {
    pub precond: Preconditioner,
    pub bound: f64,
    pub mode: ResidualMode,
    pub adapter: Option<RangeAdapter>,
    pub gain: f64,
}

impl ResidualNet {
    pub fn new(params: MlpParams, precond: Preconditioner, bound: f64, mode: ResidualMode, adapter: Option<RangeAdapter>) -> Result<Self> {
        if params.d_in() != params.d_out() + EMBED_DIM {
            return Err(Error::Shape("residual network must map m + embedding to m".into()));
        }
        if mode.uses_adapter() && adapter.is_none() {
            return Err(Error::Config(format!("residual mode {mode:?} needs a range adapter")));
        }
        Ok(Self {
            params,
            precond,
            bound,
            mode,
            adapter,
            gain: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.d_out()
    }

    pub fn scale(&self, sigma: f64) -> f64 {
        let base = match (&self.adapter, self.mode.uses_adapter()) {
            (Some(a), true) => a.eval(sigma) / (self.dim() as f64).sqrt(),
            _ => self.precond.c_out(sigma),
        };
        self.gain * base
    }

    pub fn header(&self) -> ResidualHeader {
        ResidualHeader {
            precond: self.precond,
            bound: self.bound,
            mode: self.mode,
            adapter: self.adapter.clone(),
            gain: self.gain,
        }
    }

    pub fn from_header(params: MlpParams, h: ResidualHeader) -> Result<Self> {
        let mut r = Self::new(params, h.precond, h.bound, h.mode, h.adapter)?;
        r.gain = h.gain;
        Ok(r)
    }

    fn raw(&self, params: &MlpParams, xs: &[f64], sigmas: &[f64]) -> Result<(crate::neural::ForwardCache, Vec<f64>)> {
        let m = self.dim();
        ensure_dim(m * sigmas.len(), xs.len(), "residual batch")?;
        let input = conditioned_input(xs, sigmas, m, &self.precond);
        let cache = params.forward_batch(input.view())?;
        let scales = sigmas.iter().map(|s| self.scale(*s)).collect();
        Ok((cache, scales))
    }

    /// `f₀` for a batch.
    pub fn output_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        if !self.params.is_finite() {
            return Err(Error::Numerical("residual network has non-finite parameters".into()));
        }
        let (cache, scales) = self.raw(&self.params, xs, sigmas)?;
        let u = self.bound;
        let mut out = Vec::with_capacity(xs.len());
        for (row, sc) in cache.output.rows().into_iter().zip(&scales) {
            out.extend(row.iter().map(|f| sc * f.clamp(-u, u)));
        }
        Ok(out)
    }
}

/// Stage-one views, their weights, and an optional residual.
#[derive(Debug, Clone)]
pub struct CombinedDenoiser {
    pub m: usize,
    pub bound: f64,
    pub schedule: DiffusionSchedule,
    pub groups: Vec<ViewGroup>,
    pub weights: CombinerWeights,
    pub residual: Option<ResidualNet>,
}

impl CombinedDenoiser {
    pub fn new(m: usize, bound: f64, schedule: DiffusionSchedule, groups: Vec<ViewGroup>) -> Result<Self> {
        for g in &groups {
            ensure_dim(m, g.full_dim(), "view group")?;
        }
        let ops = groups.iter().map(|g| g.operators.len()).sum();
        Ok(Self {
            m,
            bound,
            schedule,
            groups,
            weights: CombinerWeights::ones(ADAPTER_BINS, ops),
            residual: None,
        })
    }

    pub fn num_operators(&self) -> usize {
        self.groups.iter().map(|g| g.operators.len()).sum()
    }

    pub fn operators(&self) -> impl Iterator<Item = &ViewOperator> {
        self.groups.iter().flat_map(|g| g.operators.iter())
    }

    /// Unweighted full-space contributions `B_i f_i(A_i x_n)`, one flat
    /// `n x m` block per operator.
    pub fn contributions(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<Vec<f64>>> {
        let m = self.m;
        let n = sigmas.len();
        let mut out = Vec::with_capacity(self.num_operators());
        for g in &self.groups {
            let preds = g.view_predictions(xs, sigmas)?;
            let m_i = g.view_dim();
            for (op, p) in g.operators.iter().zip(preds) {
                let mut full = vec![0.0; n * m];
                for k in 0..n {
                    op.accumulate_b(1.0, &p[k * m_i..(k + 1) * m_i], &mut full[k * m..(k + 1) * m]);
                }
                out.push(full);
            }
        }
        Ok(out)
    }

    /// Unclamped `Σ_i w_i(σ) B_i f_i(A_i x)`.
    pub fn stage1_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let m = self.m;
        ensure_dim(m * sigmas.len(), xs.len(), "combined batch")?;
        let mut out = vec![0.0; xs.len()];
        if self.groups.is_empty() {
            return Ok(out);
        }
        let contribs = self.contributions(xs, sigmas)?;
        for (k, s) in sigmas.iter().enumerate() {
            let w = &self.weights.values[bin_of(&self.schedule, self.weights.bins, *s)];
            let row = &mut out[k * m..(k + 1) * m];
            for (c, wi) in contribs.iter().zip(w) {
                for (o, v) in row.iter_mut().zip(&c[k * m..(k + 1) * m]) {
                    *o += wi * v;
                }
            }
        }
        Ok(out)
    }

    pub fn stage1(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.stage1_batch(x_t, &[sigma])
    }

    /// The residual network's output alone (zeros without a residual).
    pub fn residual_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        match &self.residual {
            Some(r) => r.output_batch(xs, sigmas),
            None => Ok(vec![0.0; xs.len()]),
        }
    }

    /// Stage-one view parameters, hashed per group (oracles hash to "oracle").
    pub fn view_hashes(&self) -> Vec<(String, String)> {
        self.groups
            .iter()
            .map(|g| {
                let h = match &g.predictor {
                    ViewPredictor::Network(n) => io::params_hash(&n.params),
                    ViewPredictor::Oracle(_) => "oracle".to_string(),
                };
                (g.id.clone(), h)
            })
            .collect()
    }
}

impl Denoiser for CombinedDenoiser {
    fn dim(&self) -> usize {
        self.m
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_batch(x_t, &[sigma])
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let m = self.m;
        ensure_dim(m * sigmas.len(), xs.len(), "combined batch")?;
        let mut out = Vec::with_capacity(xs.len());
        for (xc, sc) in xs.chunks(EVAL_CHUNK * m).zip(sigmas.chunks(EVAL_CHUNK)) {
            let mut s1 = self.stage1_batch(xc, sc)?;
            if self.residual.is_some() {
                for (a, b) in s1.iter_mut().zip(self.residual_batch(xc, sc)?) {
                    *a += b;
                }
            }
            let u = self.bound;
            out.extend(s1.into_iter().map(|v| v.clamp(-u, u)));
        }
        Ok(out)
    }
}

/// Regression target used when calibrating the combiner and the adapter.
#[derive(Debug, Clone)]
pub enum CalibrationTarget {
    /// The clean samples themselves.
    Samples,
    /// The exact posterior mean `E[X₀ | x_t]`.
    Oracle(Arc<PosteriorOracle>),
}

/// Noisy draws stratified over the diffusion-time bins.
#[derive(Debug, Clone)]
pub struct CalibrationDraws {
    pub bins: usize,
    pub per_bin: usize,
    /// `bins·per_bin` rows, bin-major.
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl CalibrationDraws {
    /// `per_bin` draws per bin with diffusion time uniform within the bin,
    /// cycling through the calibration samples.
    pub fn new(calib: &Dataset, schedule: &DiffusionSchedule, bins: usize, per_bin: usize, stream: Substream) -> Result<Self> {
        if calib.is_empty() || !calib.is_full() {
            return Err(Error::Config("calibration needs a nonempty full-resolution dataset".into()));
        }
        if bins == 0 || per_bin == 0 {
            return Err(Error::Config("calibration needs at least one bin and one draw per bin".into()));
        }
        let m = calib.dim;
        let total = bins * per_bin;
        let mut x0 = Vec::with_capacity(total * m);
        let mut xt = Vec::with_capacity(total * m);
        let mut sigmas = Vec::with_capacity(total);
        let mut eps = vec![0.0; m];
        for k in 0..total {
            let b = k / per_bin;
            let mut rng = stream.rng(k as u64);
            let u: f64 = 1.0 - rng.random::<f64>();
            let sigma = schedule.sigma((b as f64 + u) / bins as f64);
            fill_normal(&mut rng, &mut eps);
            let x = calib.sample(k % calib.len());
            x0.extend_from_slice(x);
            xt.extend(x.iter().zip(&eps).map(|(a, e)| a + sigma * e));
            sigmas.push(sigma);
        }
        Ok(Self {
            bins,
            per_bin,
            x0,
            xt,
            sigmas,
        })
    }

    fn targets(&self, target: &CalibrationTarget) -> Result<Vec<f64>> {
        match target {
            CalibrationTarget::Samples => Ok(self.x0.clone()),
            CalibrationTarget::Oracle(o) => {
                let m = o.dim();
                let rows: Vec<Vec<f64>> = self
                    .xt
                    .par_chunks(m)
                    .zip(self.sigmas.par_iter())
                    .map(|(x, s)| o.posterior_mean(x, *s))
                    .collect::<Result<_>>()?;
                Ok(rows.concat())
            }
        }
    }
}

/// Fits per-bin scalar weights by least squares on the stacked coordinates.
/// Which operators share one combiner weight per bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    /// One weight per operator.
    PerOperator,
    /// One weight per view group, shared by its operators.
    #[default]
    PerGroup,
}

pub fn calibrate_combiner(
    combined: &CombinedDenoiser,
    draws: &CalibrationDraws,
    target: &CalibrationTarget,
    ridge: f64,
    sharing: WeightSharing,
) -> Result<CombinerWeights> {
    let n_ops = combined.num_operators();
    let owner: Vec<usize> = match sharing {
        WeightSharing::PerOperator => (0..n_ops).collect(),
        WeightSharing::PerGroup => combined
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| std::iter::repeat_n(g, grp.operators.len()))
            .collect(),
    };
    let ops = owner.iter().max().map_or(0, |v| v + 1);
    let m = combined.m;
    let y = draws.targets(target)?;
    let mut values = Vec::with_capacity(draws.bins);
    let mut fallback_bins = Vec::new();
    for b in 0..draws.bins {
        let rows = b * draws.per_bin..(b + 1) * draws.per_bin;
        let xs = &draws.xt[rows.start * m..rows.end * m];
        let per_op = combined.contributions(xs, &draws.sigmas[rows.clone()])?;
        let mut contribs = vec![vec![0.0; per_op[0].len()]; ops];
        for (c, &o) in per_op.iter().zip(&owner) {
            contribs[o].iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        let yb = &y[rows.start * m..rows.end * m];
        let mut gram = DenseMatrix::zeros(ops, ops);
        let mut rhs = vec![0.0; ops];
        for i in 0..ops {
            rhs[i] = crate::linops::dot(&contribs[i], yb);
            for j in 0..=i {
                let v = crate::linops::dot(&contribs[i], &contribs[j]);
                gram.set(i, j, v);
                gram.set(j, i, v);
            }
        }
        let scale = (0..ops).map(|i| gram.get(i, i)).fold(0.0, f64::max);
        let solved = if scale > 1e-300 {
            solve_normal_equations(&gram, &rhs, ridge).ok().filter(|w| w.iter().all(|v| v.is_finite()))
        } else {
            None
        };
        match solved {
            Some(w) => values.push(owner.iter().map(|&o| w[o]).collect()),
            None => {
                log::warn!("combiner bin {b}: degenerate design, using unit weights");
                fallback_bins.push(b);
                values.push(vec![1.0; n_ops]);
            }
        }
    }
    Ok(CombinerWeights {
        bins: draws.bins,
        values,
        fallback_bins,
    })
}

/// `s_b` = RMS norm of `target − stage1` within each bin, floored at 1e-8.
pub fn fit_range_adapter(
    combined: &CombinedDenoiser,
    draws: &CalibrationDraws,
    target: &CalibrationTarget,
) -> Result<RangeAdapter> {
    let m = combined.m;
    let y = draws.targets(target)?;
    let s1 = combined.stage1_batch(&draws.xt, &draws.sigmas)?;
    let mut values = vec![f64::NAN; draws.bins];
    for (b, v) in values.iter_mut().enumerate() {
        let rows = b * draws.per_bin..(b + 1) * draws.per_bin;
        let sq: f64 = y[rows.start * m..rows.end * m]
            .iter()
            .zip(&s1[rows.start * m..rows.end * m])
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        if !rows.is_empty() {
            *v = (sq / rows.len() as f64).sqrt().max(1e-8);
        }
    }
    fill_empty_bins(&mut values);
    RangeAdapter::new(combined.schedule, values)
}

/// Linear interpolation over NaN entries; constant extension at the ends.
pub fn fill_empty_bins(values: &mut [f64]) {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    if known.is_empty() {
        values.iter_mut().for_each(|v| *v = 1e-8);
        return;
    }
    for i in 0..values.len() {
        if values[i].is_finite() {
            continue;
        }
        let lo = known.iter().rev().find(|&&k| k < i);
        let hi = known.iter().find(|&&k| k > i);
        values[i] = match (lo, hi) {
            (Some(&a), Some(&b)) => {
                let f = (i - a) as f64 / (b - a) as f64;
                values[a] * (1.0 - f) + values[b] * f
            }
            (Some(&a), None) => values[a],
            (None, Some(&b)) => values[b],
            (None, None) => unreachable!("known is nonempty"),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualTrainConfig {
    /// Multiplier `λ` of the output-energy penalty.
    #[serde(default)]
    pub lambda: f64,
    /// Cap `M` on the mean training-set output energy.
    #[serde(default)]
    pub hard_cap: Option<f64>,
    pub mode: ResidualMode,
    pub train: TrainConfig,
    pub net: NetConfig,
    /// Fixed noise draws per training sample used to measure the energy.
    #[serde(default = "default_cap_draws")]
    pub cap_draws: usize,
}

fn default_cap_draws() -> usize {
    4
}

impl ResidualTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if let Some(m) = self.hard_cap {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Config(format!("hard cap must be nonnegative, got {m}")));
            }
        }
        if self.cap_draws == 0 {
            return Err(Error::Config("cap_draws must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn is_regularized(&self) -> bool {
        (self.lambda > 0.0 && self.mode.uses_penalty()) || self.hard_cap.is_some() || self.mode.uses_adapter()
    }
}

/// `w(σ)·(‖f₀ − r‖² + λ‖f₀‖²)` with `r = x₀ − stage1(x_t)` and
/// `w = 1/scale(σ)²`.
pub struct ResidualObjective<'a> {
    pub combined: &'a CombinedDenoiser,
    pub data: &'a Dataset,
    pub template: &'a ResidualNet,
    pub lambda: f64,
}

impl Objective for ResidualObjective<'_> {
    fn rows(&self) -> usize {
        self.data.len()
    }

    fn noise_dim(&self) -> usize {
        self.data.dim
    }

    fn loss_grad_rows(&self, params: &MlpParams, batch: &NoisyBatch) -> Result<(Gradients, Vec<f64>)> {
        let (xs, x0s) = batch.noisy_inputs(self.data);
        let s1 = self.combined.stage1_batch(&xs, &batch.sigmas)?;
        let (cache, scales) = self.template.raw(params, &xs, &batch.sigmas)?;
        let m = self.data.dim;
        let u = self.template.bound;
        let lambda = self.lambda;
        let mut d_out = Array2::zeros(cache.output.raw_dim());
        let mut rows = Vec::with_capacity(scales.len());
        for (k, &sc) in scales.iter().enumerate() {
            let w = 1.0 / (sc * sc);
            let mut loss = 0.0;
            for j in 0..m {
                let f = cache.output[[k, j]];
                let f0 = sc * f.clamp(-u, u);
                let r = x0s[k * m + j] - s1[k * m + j];
                let e = f0 - r;
                loss += w * e * e + w * lambda * f0 * f0;
                if f.abs() <= u {
                    d_out[[k, j]] = 2.0 * w * sc * (e + lambda * f0);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical("non-finite residual loss".into()));
            }
            rows.push(loss);
        }
        Ok((params.backward_batch(&cache, &d_out), rows))
    }
}

/// Fixed noisy copies of a dataset used to measure output energy.
pub fn fixed_draws(data: &Dataset, schedule: &DiffusionSchedule, per_sample: usize, stream: Substream) -> (Vec<f64>, Vec<f64>) {
    let m = data.dim;
    let mut xs = Vec::with_capacity(data.len() * per_sample * m);
    let mut sigmas = Vec::with_capacity(data.len() * per_sample);
    let mut eps = vec![0.0; m];
    for (n, x) in data.samples().enumerate() {
        for d in 0..per_sample {
            let mut rng = stream.rng((n * per_sample + d) as u64);
            let sigma = schedule.sigma_from_uniform(1.0 - rng.random::<f64>());
            fill_normal(&mut rng, &mut eps);
            xs.extend(x.iter().zip(&eps).map(|(a, e)| a + sigma * e));
            sigmas.push(sigma);
        }
    }
    (xs, sigmas)
}

/// Mean `‖f₀‖²` over the given noisy inputs.
pub fn mean_energy(residual: &ResidualNet, xs: &[f64], sigmas: &[f64]) -> Result<f64> {
    let m = residual.dim();
    let mut total = 0.0;
    for (xc, sc) in xs.chunks(EVAL_CHUNK * m).zip(sigmas.chunks(EVAL_CHUNK)) {
        total += residual.output_batch(xc, sc)?.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / sigmas.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub curve: TrainingCurve,
    /// Mean training-set energy after each epoch (after projection).
    pub energies: Vec<f64>,
    /// Epochs at which the hard cap rescaled the output.
    pub projections: Vec<usize>,
    pub final_energy: f64,
    pub gain: f64,
}

/// Trains `f₀` on `s0` with the views frozen. Returns the augmented
/// combined denoiser.
pub fn train_residual(
    combined: &CombinedDenoiser,
    s0: &Dataset,
    adapter: Option<RangeAdapter>,
    cfg: &ResidualTrainConfig,
) -> Result<(CombinedDenoiser, ResidualReport)> {
    cfg.validate()?;
    if !s0.is_full() {
        return Err(Error::Config("the residual trains on full-resolution data".into()));
    }
    ensure_dim(combined.m, s0.dim, "residual training data")?;
    let m = combined.m;
    let precond = Preconditioner {
        sigma_data: dataset_rms(s0).max(1e-3),
        skip: false,
    };
    let mut sizes = vec![m + EMBED_DIM];
    sizes.extend_from_slice(&cfg.net.hidden);
    sizes.push(m);
    let params = MlpParams::init(&sizes, cfg.net.activation, cfg.train.seed)?;
    let adapter = if cfg.mode.uses_adapter() { adapter } else { None };
    let mut template = ResidualNet::new(params.clone(), precond, combined.bound, cfg.mode, adapter)?;
    let lambda = if cfg.mode.uses_penalty() { cfg.lambda } else { 0.0 };
    let (cap_x, cap_s) = fixed_draws(s0, &combined.schedule, cfg.cap_draws, Substream::new(cfg.train.seed, streams::EVAL));
    let mut trainer = Trainer::new(params, cfg.train.clone(), combined.schedule)?;
    let mut energies = Vec::with_capacity(cfg.train.epochs);
    let mut projections = Vec::new();
    for epoch in 0..cfg.train.epochs {
        {
            let obj = ResidualObjective {
                combined,
                data: s0,
                template: &template,
                lambda,
            };
            trainer.run_epoch(&obj)?;
        }
        template.params = trainer.params.clone();
        let mut energy = mean_energy(&template, &cap_x, &cap_s)?;
        if let Some(cap) = cfg.hard_cap {
            if energy > cap {
                template.gain *= (cap / energy).sqrt();
                energy = mean_energy(&template, &cap_x, &cap_s)?;
                projections.push(epoch);
            }
        }
        energies.push(energy);
    }
    let (params, curve) = trainer.finish();
    template.params = params;
    let final_energy = *energies.last().expect("at least one epoch");
    let gain = template.gain;
    let mut out = combined.clone();
    out.residual = Some(template);
    Ok((
        out,
        ResidualReport {
            curve,
            energies,
            projections,
            final_energy,
            gain,
        },
    ))
}

/// A full-resolution denoiser trained on `s0` alone with the residual's
/// network shape and optimizer budget.
pub fn train_baseline(s0: &Dataset, schedule: &DiffusionSchedule, cfg: &ResidualTrainConfig, bound: f64) -> Result<(DenoiserNet, TrainingCurve)> {
    train_denoiser(s0, schedule, &cfg.net, &cfg.train, bound)
}

/// How a view group's operators are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ViewGroupKind {
    /// Non-overlapping square patches tiling the grid.
    PatchTiling { patch: usize },
    Downsample { factor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewGroupConfig {
    pub id: String,
    pub kind: ViewGroupKind,
    /// Full-resolution images projected into this view's dataset.
    pub images: usize,
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Held-out full-resolution samples.
    pub samples: usize,
    pub per_bin: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Calibrate on `S₀` instead of held-out samples.
    #[serde(default)]
    pub on_s0: bool,
    #[serde(default)]
    pub sharing: WeightSharing,
}

fn default_ridge() -> f64 {
    1e-6
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            per_bin: 8,
            ridge: default_ridge(),
            on_s0: false,
            sharing: WeightSharing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub spec: DeskSpecParams,
    /// `None` selects the scaled EDM schedule for the spec.
    #[serde(default)]
    pub schedule: Option<DiffusionSchedule>,
    /// Size `N₀` of the full-resolution set.
    pub n0: usize,
    #[serde(default)]
    pub views: Vec<ViewGroupConfig>,
    /// Fraction of each view's source images taken from a shared pool.
    #[serde(default)]
    pub duplicate_fraction: f64,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    pub residual: Option<ResidualTrainConfig>,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err(Error::Config("duplicate_fraction must lie in [0, 1]".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for v in &self.views {
            if !ids.insert(&v.id) {
                return Err(Error::Config(format!("duplicate view id {:?}", v.id)));
            }
            if v.images == 0 {
                return Err(Error::Config(format!("view {:?} needs at least one image", v.id)));
            }
            v.train.validate()?;
        }
        if let Some(r) = &self.residual {
            r.validate()?;
        }
        Ok(())
    }

    pub fn schedule_for(&self, spec: &DataSpec) -> Result<DiffusionSchedule> {
        match self.schedule {
            Some(s) => {
                s.validate()?;
                Ok(s)
            }
            None => DiffusionSchedule::edm_scaled(spec.bound, spec.data_std(), 64),
        }
    }
}

pub fn build_operators(spec: &DataSpec, kind: &ViewGroupKind) -> Result<Vec<ViewOperator>> {
    match kind {
        ViewGroupKind::PatchTiling { patch } => patch_tiling(spec.grid, *patch),
        ViewGroupKind::Downsample { factor } => Ok(vec![make_downsample_operator(spec.grid, *factor)?]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to audit or rerun a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: PipelineConfig,
    pub spec_id: String,
    pub schedule: DiffusionSchedule,
    pub artifacts: Vec<ArtifactEntry>,
    pub weights: CombinerWeights,
    pub adapter: Option<RangeAdapter>,
    pub view_hashes: Vec<(String, String)>,
    pub residual_hash: Option<String>,
    pub residual_gain: Option<f64>,
    pub residual_energy: Option<f64>,
    pub warnings: Vec<String>,
}

impl ExperimentRecord {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Hashes keyed by artifact name.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.artifacts.iter().map(|a| (a.name.clone(), a.sha256.clone())).collect()
    }
}

pub struct PipelineOutput {
    pub spec: DataSpec,
    pub schedule: DiffusionSchedule,
    pub s0: Dataset,
    pub combined: CombinedDenoiser,
    pub record: ExperimentRecord,
    pub view_curves: Vec<(String, TrainingCurve)>,
    pub residual_report: Option<ResidualReport>,
}

/// Images feeding view group `g`: a duplicate-pool prefix followed by
/// group-specific draws.
fn view_source(spec: &DataSpec, cfg: &PipelineConfig, g: usize) -> Result<Dataset> {
    let images = cfg.views[g].images;
    let shared = (cfg.duplicate_fraction * images as f64).round() as usize;
    let own = images - shared;
    let mut parts = Vec::new();
    if shared > 0 {
        parts.push(sample_dataset(spec, shared, Substream::new(cfg.seed, streams::DUPLICATE_POOL))?);
    }
    if own > 0 {
        parts.push(sample_dataset(spec, own, Substream::new(cfg.seed, streams::VIEW_DATA).child(g as u64))?);
    }
    Dataset::concat(&parts)
}

/// Operators and the shuffled projected dataset of view group `g`, as the
/// pipeline builds them.
pub fn view_dataset(spec: &DataSpec, cfg: &PipelineConfig, g: usize) -> Result<(Vec<ViewOperator>, Dataset)> {
    let vc = cfg
        .views
        .get(g)
        .ok_or_else(|| Error::Config(format!("no view group {g}")))?;
    let ops = build_operators(spec, &vc.kind)?;
    let source = view_source(spec, cfg, g)?;
    let shuffle = Substream::new(cfg.seed, streams::SHUFFLE).child(g as u64);
    let ds = project_dataset_group(&source, &ops, &vc.id, shuffle)?;
    Ok((ops, ds))
}

/// The full-resolution set `S₀` of a pipeline.
pub fn full_dataset(spec: &DataSpec, cfg: &PipelineConfig) -> Result<Dataset> {
    sample_dataset(spec, cfg.n0, Substream::new(cfg.seed, streams::FULL_DATA))
}

struct Artifacts<'a> {
    dir: Option<&'a Path>,
    entries: Vec<ArtifactEntry>,
}

impl Artifacts<'_> {
    fn put(&mut self, name: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let sha256 = io::sha256_hex(bytes);
        if let Some(dir) = self.dir {
            let path: PathBuf = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, bytes)?;
        }
        self.entries.push(ArtifactEntry {
            name: name.to_string(),
            path: rel.to_string(),
            sha256,
        });
        Ok(())
    }

    fn put_dataset(&mut self, name: &str, rel: &str, ds: &Dataset) -> Result<()> {
        if let Some(dir) = self.dir {
            io::write_dataset(&dir.join(rel), ds)?;
        }
        self.entries.push(ArtifactEntry {
            name: name.to_string(),
            path: rel.to_string(),
            sha256: io::sha256_hex(&io::encode_dataset(ds)?),
        });
        Ok(())
    }
}

/// Generates data, trains every view, calibrates the combiner, fits the
/// adapter and trains the residual. Artifacts and `manifest.json` go to
/// `out_dir` when given.
pub fn run_algorithm1(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let spec = desk_spec(&cfg.spec).map_err(|e| e.in_stage("spec"))?;
    let schedule = cfg.schedule_for(&spec)?;
    let mut art = Artifacts {
        dir: out_dir,
        entries: Vec::new(),
    };
    let mut warnings = Vec::new();

    let s0 = full_dataset(&spec, cfg).map_err(|e| e.in_stage("data"))?;
    art.put_dataset("s0", "data/s0.bin", &s0)?;

    let trained: Vec<(ViewGroup, TrainingCurve, Dataset)> = (0..cfg.views.len())
        .into_par_iter()
        .map(|g| {
            let vc = &cfg.views[g];
            let stage = format!("view:{}", vc.id);
            let run = || -> Result<(ViewGroup, TrainingCurve, Dataset)> {
                let (ops, ds) = view_dataset(&spec, cfg, g)?;
                let (net, curve) = crate::neural::train_view_denoiser(&ds, &schedule, &vc.net, &vc.train, spec.bound)?;
                let group = ViewGroup::new(vc.id.clone(), ops, ViewPredictor::Network(Arc::new(net)))?;
                Ok((group, curve, ds))
            };
            run().map_err(|e| e.in_stage(stage))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups = Vec::with_capacity(trained.len());
    let mut view_curves = Vec::with_capacity(trained.len());
    for (g, curve, ds) in trained {
        art.put_dataset(&format!("data:{}", g.id), &format!("data/view-{}.bin", g.id), &ds)?;
        if let ViewPredictor::Network(net) = &g.predictor {
            let extra = serde_json::json!({"role": "view", "view": g.id, "precond": net.precond, "bound": net.bound});
            art.put(&format!("net:{}", g.id), &format!("nets/view-{}.bdlp", g.id), &io::encode_params(&net.params, extra)?)?;
        }
        for op in &g.operators {
            art.put(&format!("op:{}", op.id), &format!("operators/{}.json", op.id), op.to_json()?.as_bytes())?;
        }
        art.put(&format!("curve:{}", g.id), &format!("curves/view-{}.csv", g.id), curve.to_csv().as_bytes())?;
        view_curves.push((g.id.clone(), curve));
        groups.push(g);
    }

    let mut combined = CombinedDenoiser::new(spec.m, spec.bound, schedule, groups)?;
    let calib = if cfg.calibration.on_s0 {
        s0.clone()
    } else {
        sample_dataset(&spec, cfg.calibration.samples.max(1), Substream::new(cfg.seed, streams::CALIBRATION))?
    };
    let draws = CalibrationDraws::new(
        &calib,
        &schedule,
        ADAPTER_BINS,
        cfg.calibration.per_bin,
        Substream::new(cfg.seed, streams::CALIBRATION).child(1),
    )
    .map_err(|e| e.in_stage("calibrate"))?;
    if !combined.groups.is_empty() {
        combined.weights = calibrate_combiner(&combined, &draws, &CalibrationTarget::Samples, cfg.calibration.ridge, cfg.calibration.sharing)
            .map_err(|e| e.in_stage("calibrate"))?;
        for b in &combined.weights.fallback_bins {
            warnings.push(format!("combiner bin {b} fell back to unit weights"));
        }
    }
    art.put("weights", "weights.json", serde_json::to_string_pretty(&combined.weights)?.as_bytes())?;

    let mut adapter = None;
    let mut residual_report = None;
    if let Some(rc) = &cfg.residual {
        if rc.mode.uses_adapter() {
            let a = fit_range_adapter(&combined, &draws, &CalibrationTarget::Samples).map_err(|e| e.in_stage("adapter"))?;
            art.put("adapter", "adapter.json", serde_json::to_string_pretty(&a)?.as_bytes())?;
            adapter = Some(a);
        }
        let (with_res, report) =
            train_residual(&combined, &s0, adapter.clone(), rc).map_err(|e| e.in_stage("residual"))?;
        let res = with_res.residual.as_ref().expect("residual trained");
        art.put(
            "net:residual",
            "nets/residual.bdlp",
            &io::encode_params(&res.params, serde_json::to_value(res.header())?)?,
        )?;
        art.put("curve:residual", "curves/residual.csv", report.curve.to_csv().as_bytes())?;
        combined = with_res;
        residual_report = Some(report);
    }

    let record = ExperimentRecord {
        config: cfg.clone(),
        spec_id: spec.id.clone(),
        schedule,
        artifacts: art.entries,
        weights: combined.weights.clone(),
        adapter,
        view_hashes: combined.view_hashes(),
        residual_hash: combined.residual.as_ref().map(|r| io::params_hash(&r.params)),
        residual_gain: combined.residual.as_ref().map(|r| r.gain),
        residual_energy: residual_report.as_ref().map(|r| r.final_energy),
        warnings,
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok(PipelineOutput {
        spec,
        schedule,
        s0,
        combined,
        record,
        view_curves,
        residual_report,
    })
}

/// Reads a manifest and reruns its configuration.
pub fn rerun_from_manifest(manifest: &Path, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    let record: ExperimentRecord = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
    run_algorithm1(&record.config, out_dir)
}

/// Rebuilds the combined denoiser stored under `dir`.
pub fn load_combined(dir: &Path) -> Result<(CombinedDenoiser, ExperimentRecord)> {
    let record: ExperimentRecord = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let spec = desk_spec(&record.config.spec)?;
    let mut groups = Vec::new();
    for vc in &record.config.views {
        let ops = build_operators(&spec, &vc.kind)?;
        let entry = record
            .artifact(&format!("net:{}", vc.id))
            .ok_or_else(|| Error::Format(format!("manifest lacks the network of view {}", vc.id)))?;
        let (params, header) = io::read_params(&dir.join(&entry.path))?;
        let precond: Preconditioner = serde_json::from_value(header.extra["precond"].clone())?;
        let bound = header.extra["bound"].as_f64().unwrap_or(spec.bound);
        let net = DenoiserNet::from_params(params, precond, bound)?;
        groups.push(ViewGroup::new(vc.id.clone(), ops, ViewPredictor::Network(Arc::new(net)))?);
    }
    let mut combined = CombinedDenoiser::new(spec.m, spec.bound, record.schedule, groups)?;
    combined.weights = record.weights.clone();
    if let Some(entry) = record.artifact("net:residual") {
        let (params, header) = io::read_params(&dir.join(&entry.path))?;
        combined.residual = Some(ResidualNet::from_header(params, serde_json::from_value(header.extra)?)?);
    }
    Ok((combined, record))
}

/// Plain training with the residual objective and no views; used to check
/// the degenerate reduction.
pub fn train_plain(s0: &Dataset, schedule: &DiffusionSchedule, cfg: &ResidualTrainConfig, bound: f64) -> Result<(MlpParams, TrainingCurve)> {
    let precond = Preconditioner {
        sigma_data: dataset_rms(s0).max(1e-3),
        skip: false,
    };
    let init = DenoiserNet::new(s0.dim, &cfg.net.hidden, cfg.net.activation, precond, bound, cfg.train.seed)?;
    let obj = crate::neural::DenoisingObjective {
        data: s0,
        precond,
        bound,
    };
    train(&obj, init.params, &cfg.train, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GridRule;
    use crate::linops::{make_general_operator, GridShape};
    use crate::synthdata::MixtureComponent;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::new(0.01, 10.0, 32, GridRule::Karras).unwrap()
    }

    fn gaussian_spec(m: usize, var: f64) -> DataSpec {
        let c = MixtureComponent::diag_low_rank(1.0, vec![0.0; m], vec![var; m], None, 0.0);
        DataSpec::new("g", GridShape::new(m, 1, 1).unwrap(), 4.0, vec![c], 0, 0.0, 1).unwrap()
    }

    fn identity_op(m: usize) -> ViewOperator {
        make_general_operator("id", DenseMatrix::identity(m), DenseMatrix::identity(m)).unwrap()
    }

    #[test]
    fn adapter_interpolates_between_centres() {
        let a = RangeAdapter::new(sched(), vec![1.0, 3.0]).unwrap();
        assert_eq!(a.eval_t(0.0), 1.0);
        assert_eq!(a.eval_t(0.25), 1.0);
        assert!((a.eval_t(0.5) - 2.0).abs() < 1e-15);
        assert_eq!(a.eval_t(1.0), 3.0);
        assert!(RangeAdapter::new(sched(), vec![-1.0]).is_err());
    }

    #[test]
    fn empty_bins_are_interpolated() {
        let mut v = vec![f64::NAN, 1.0, f64::NAN, f64::NAN, 4.0, f64::NAN];
        fill_empty_bins(&mut v);
        assert_eq!(v, vec![1.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn single_oracle_view_gets_unit_weight() {
        let spec = gaussian_spec(3, 0.5);
        let oracle = Arc::new(PosteriorOracle::new(spec.clone()));
        let group = ViewGroup::oracle("id", &spec, vec![identity_op(3)]).unwrap();
        let combined = CombinedDenoiser::new(3, 4.0, sched(), vec![group]).unwrap();
        let calib = sample_dataset(&spec, 32, Substream::new(1, 3)).unwrap();
        let draws = CalibrationDraws::new(&calib, &sched(), 10, 4, Substream::new(1, 4)).unwrap();
        let w = calibrate_combiner(&combined, &draws, &CalibrationTarget::Oracle(oracle), 0.0, WeightSharing::PerOperator).unwrap();
        for row in &w.values {
            assert!((row[0] - 1.0).abs() < 1e-6, "{row:?}");
        }
    }

    #[test]
    fn duplicate_views_split_the_weight() {
        let spec = gaussian_spec(2, 0.5);
        let oracle = Arc::new(PosteriorOracle::new(spec.clone()));
        let group = ViewGroup::oracle("dup", &spec, vec![identity_op(2), identity_op(2)]).unwrap();
        let combined = CombinedDenoiser::new(2, 4.0, sched(), vec![group]).unwrap();
        let calib = sample_dataset(&spec, 16, Substream::new(2, 3)).unwrap();
        let draws = CalibrationDraws::new(&calib, &sched(), 5, 4, Substream::new(2, 4)).unwrap();
        let w = calibrate_combiner(&combined, &draws, &CalibrationTarget::Oracle(oracle), 1e-9, WeightSharing::PerOperator).unwrap();
        for row in &w.values {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6, "{row:?}");
            assert!((row[0] - row[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_design_falls_back_to_unit_weights() {
        let zero = make_general_operator("zero", DenseMatrix::zeros(1, 2), DenseMatrix::zeros(2, 1)).unwrap();
        let spec = gaussian_spec(2, 0.5);
        let group = ViewGroup::oracle("z", &spec, vec![zero]).unwrap();
        let combined = CombinedDenoiser::new(2, 4.0, sched(), vec![group]).unwrap();
        let calib = sample_dataset(&spec, 4, Substream::new(2, 3)).unwrap();
        let draws = CalibrationDraws::new(&calib, &sched(), 3, 2, Substream::new(2, 4)).unwrap();
        let w = calibrate_combiner(&combined, &draws, &CalibrationTarget::Samples, 0.0, WeightSharing::PerOperator).unwrap();
        assert_eq!(w.fallback_bins, vec![0, 1, 2]);
        assert!(w.values.iter().all(|r| r == &vec![1.0]));
    }

    #[test]
    fn exact_views_give_a_vanishing_adapter() {
        let spec = gaussian_spec(3, 0.5);
        let oracle = Arc::new(PosteriorOracle::new(spec.clone()));
        let group = ViewGroup::oracle("id", &spec, vec![identity_op(3)]).unwrap();
        let combined = CombinedDenoiser::new(3, 4.0, sched(), vec![group]).unwrap();
        let calib = sample_dataset(&spec, 8, Substream::new(1, 3)).unwrap();
        let draws = CalibrationDraws::new(&calib, &sched(), ADAPTER_BINS, 2, Substream::new(1, 4)).unwrap();
        let a = fit_range_adapter(&combined, &draws, &CalibrationTarget::Oracle(oracle)).unwrap();
        assert_eq!(a.bins(), 100);
        assert!(a.values.iter().all(|v| *v <= 1e-6), "{:?}", a.values);
    }

    #[test]
    fn adapter_at_large_noise_matches_prior_spread() {
        // Without views the stage-one prediction is the zero prior mean, so
        // the residual norm is ‖x₀‖ with E‖x₀‖² = m·var.
        let (m, var) = (16, 0.25);
        let spec = gaussian_spec(m, var);
        let combined = CombinedDenoiser::new(m, 4.0, sched(), vec![]).unwrap();
        let calib = sample_dataset(&spec, 4000, Substream::new(1, 3)).unwrap();
        let draws = CalibrationDraws::new(&calib, &sched(), 4, 1000, Substream::new(1, 4)).unwrap();
        let a = fit_range_adapter(&combined, &draws, &CalibrationTarget::Samples).unwrap();
        let expect = (m as f64 * var).sqrt();
        assert!((a.values[3] - expect).abs() < 0.05 * expect, "{} vs {expect}", a.values[3]);
    }

    #[test]
    fn identity_view_without_residual_is_that_view() {
        let spec = gaussian_spec(3, 0.5);
        let oracle = PosteriorOracle::new(spec.clone());
        let group = ViewGroup::oracle("id", &spec, vec![identity_op(3)]).unwrap();
        let combined = CombinedDenoiser::new(3, 4.0, sched(), vec![group]).unwrap();
        let x = [0.3, -1.0, 2.0];
        assert_eq!(combined.denoise(&x, 0.7).unwrap(), oracle.denoise(&x, 0.7).unwrap());
    }

    #[test]
    fn zero_networks_combine_to_zero() {
        let net = DenoiserNet::from_params(
            MlpParams::zeros(&[2 + EMBED_DIM, 4, 2], crate::neural::Activation::Relu).unwrap(),
            Preconditioner {
                sigma_data: 0.5,
                skip: false,
            },
            1.0,
        )
        .unwrap();
        let group = ViewGroup::new("z", vec![identity_op(2)], ViewPredictor::Network(Arc::new(net))).unwrap();
        let combined = CombinedDenoiser::new(2, 1.0, sched(), vec![group]).unwrap();
        assert_eq!(combined.denoise(&[5.0, -7.0], 0.3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn patch_oracles_recover_the_block_independent_posterior() {
        let grid = GridShape::square(4);
        let mut p = DeskSpecParams::new(grid, 2, 0.0, 5);
        p.components = 1;
        let spec = desk_spec(&p).unwrap();
        let ops = patch_tiling(grid, 2).unwrap();
        let group = ViewGroup::oracle("patch", &spec, ops).unwrap();
        let combined = CombinedDenoiser::new(16, spec.bound, sched(), vec![group]).unwrap();
        let oracle = PosteriorOracle::new(spec.clone());
        let mut rng = Substream::new(9, 9).rng(0);
        for k in 0..20 {
            let sigma = 0.05 * (k + 1) as f64;
            let x: Vec<f64> = crate::rng::normal_vec(&mut rng, 16);
            let a = combined.stage1(&x, sigma).unwrap();
            let b = oracle.posterior_mean(&x, sigma).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    fn small_residual_cfg(lambda: f64, mode: ResidualMode, epochs: usize) -> ResidualTrainConfig {
        ResidualTrainConfig {
            lambda,
            hard_cap: None,
            mode,
            train: TrainConfig::new(epochs, 16, 3),
            net: NetConfig {
                hidden: vec![16],
                activation: crate::neural::Activation::Silu,
            },
            cap_draws: 2,
        }
    }

    #[test]
    fn negative_lambda_is_a_config_error() {
        let spec = gaussian_spec(2, 0.5);
        let s0 = sample_dataset(&spec, 8, Substream::new(1, 1)).unwrap();
        let combined = CombinedDenoiser::new(2, 4.0, sched(), vec![]).unwrap();
        let cfg = small_residual_cfg(-1.0, ResidualMode::Penalty, 1);
        assert!(train_residual(&combined, &s0, None, &cfg).unwrap_err().is_config());
    }

    #[test]
    fn no_views_and_no_penalty_is_plain_training() {
        let spec = gaussian_spec(3, 0.3);
        let s0 = sample_dataset(&spec, 32, Substream::new(1, 1)).unwrap();
        let combined = CombinedDenoiser::new(3, 4.0, sched(), vec![]).unwrap();
        let cfg = small_residual_cfg(0.0, ResidualMode::Penalty, 5);
        let (out, report) = train_residual(&combined, &s0, None, &cfg).unwrap();
        let (plain, curve) = train_plain(&s0, &sched(), &cfg, 4.0).unwrap();
        assert_eq!(out.residual.unwrap().params, plain);
        assert_eq!(report.curve, curve);
    }

    #[test]
    fn huge_lambda_silences_the_residual() {
        let spec = gaussian_spec(3, 0.3);
        let s0 = sample_dataset(&spec, 32, Substream::new(1, 1)).unwrap();
        let group = ViewGroup::oracle("id", &spec, vec![identity_op(3)]).unwrap();
        let combined = CombinedDenoiser::new(3, 4.0, sched(), vec![group]).unwrap();
        let mut cfg = small_residual_cfg(1e6, ResidualMode::Penalty, 150);
        cfg.train.optimizer = crate::neural::OptimizerConfig::Adam {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let (out, report) = train_residual(&combined, &s0, None, &cfg).unwrap();
        assert!(report.final_energy < 1e-4, "{}", report.final_energy);
        let x = [0.5, -0.2, 0.1];
        let a = out.denoise(&x, 0.4).unwrap();
        let b = combined.denoise(&x, 0.4).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-2);
        }
    }

    #[test]
    fn hard_cap_holds_and_views_stay_frozen() {
        let spec = gaussian_spec(4, 0.3);
        let s0 = sample_dataset(&spec, 16, Substream::new(1, 1)).unwrap();
        let net = DenoiserNet::new(4, &[8], crate::neural::Activation::Silu, Preconditioner::edm(0.5), 4.0, 1).unwrap();
        let group = ViewGroup::new("n", vec![identity_op(4)], ViewPredictor::Network(Arc::new(net))).unwrap();
        let combined = CombinedDenoiser::new(4, 4.0, sched(), vec![group]).unwrap();
        let before = combined.view_hashes();
        let mut cfg = small_residual_cfg(0.0, ResidualMode::Penalty, 6);
        cfg.hard_cap = Some(1e-3);
        let (out, report) = train_residual(&combined, &s0, None, &cfg).unwrap();
        assert!(report.final_energy <= 1e-3 * (1.0 + 1e-3), "{}", report.final_energy);
        assert!(!report.projections.is_empty());
        assert_eq!(out.view_hashes(), before);
    }

    #[test]
    fn adapter_envelope_bounds_the_residual() {
        let m = 4;
        let spec = gaussian_spec(m, 0.3);
        let s0 = sample_dataset(&spec, 16, Substream::new(1, 1)).unwrap();
        let combined = CombinedDenoiser::new(m, 4.0, sched(), vec![]).unwrap();
        let adapter = RangeAdapter::new(sched(), (0..10).map(|b| 0.1 + b as f64 * 0.05).collect()).unwrap();
        let cfg = small_residual_cfg(0.0, ResidualMode::Adapter, 3);
        let (out, _) = train_residual(&combined, &s0, Some(adapter.clone()), &cfg).unwrap();
        let res = out.residual.unwrap();
        let mut rng = Substream::new(4, 4).rng(0);
        for k in 0..50 {
            let sigma = 0.01 * 1.1f64.powi(k);
            let x: Vec<f64> = crate::rng::normal_vec(&mut rng, m).iter().map(|v| 50.0 * v).collect();
            let f = res.output_batch(&x, &[sigma]).unwrap();
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= adapter.eval(sigma) * (m as f64).sqrt() * 4.0 + 1e-12);
        }
    }

    #[test]
    fn residual_header_round_trips() {
        let params = MlpParams::init(&[2 + EMBED_DIM, 3, 2], crate::neural::Activation::Silu, 1).unwrap();
        let adapter = RangeAdapter::new(sched(), vec![0.5, 1.0]).unwrap();
        let mut r = ResidualNet::new(params.clone(), Preconditioner::edm(0.5), 2.0, ResidualMode::Both, Some(adapter)).unwrap();
        r.gain = 0.5;
        let json = serde_json::to_value(r.header()).unwrap();
        let back = ResidualNet::from_header(params, serde_json::from_value(json).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn adapter_mode_needs_an_adapter() {
        let params = MlpParams::init(&[2 + EMBED_DIM, 3, 2], crate::neural::Activation::Silu, 1).unwrap();
        assert!(ResidualNet::new(params, Preconditioner::edm(0.5), 2.0, ResidualMode::Adapter, None).is_err());
    }
}
