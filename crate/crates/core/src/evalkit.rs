//! Monte-Carlo measurement: losses against data and oracle, prediction
//! variance, KL via score differences, and the residual-variance identity.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::CombinedDenoiser;
use crate::bounds::Estimate;
use crate::diffusion::{Denoiser, DiffusionSchedule, PosteriorOracle};
use crate::error::{ensure_dim, Error, Result};
use crate::linops::{dot, symmetric_eigen, Cholesky, DenseMatrix, GridShape, ViewOperator};
use crate::rng::{fill_normal, normal_vec, Substream};
use crate::synthdata::{Covariance, DataSpec, MixtureComponent};

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&self, other: &Welford) -> Welford {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        Welford { n, mean, m2 }
    }

    pub fn variance(&self) -> f64 {
        if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean,
            stderr: (self.variance() / self.n.max(1) as f64).sqrt(),
        }
    }
}

pub fn welford_of(vals: &[f64]) -> Welford {
    // fixed-order pairwise reduction
    if vals.len() <= 64 {
        let mut w = Welford::default();
        vals.iter().for_each(|v| w.push(*v));
        return w;
    }
    let (a, b) = vals.split_at(vals.len() / 2);
    welford_of(a).merge(&welford_of(b))
}

/// Noisy evaluation draws stratified over equal diffusion-time bins.
#[derive(Debug, Clone)]
pub struct EvalDraws {
    pub m: usize,
    pub bins: usize,
    pub per_bin: usize,
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl EvalDraws {
    /// `per_bin` draws in each of `bins` strata; clean samples are clamped
    /// to `[-U, U]` like stored datasets.
    pub fn new(spec: &DataSpec, schedule: &DiffusionSchedule, bins: usize, per_bin: usize, stream: Substream) -> Result<Self> {
        Self::build(spec, schedule, bins, per_bin, stream, true)
    }

    /// As [`EvalDraws::new`] without clamping (exact mixture draws).
    pub fn unclamped(spec: &DataSpec, schedule: &DiffusionSchedule, bins: usize, per_bin: usize, stream: Substream) -> Result<Self> {
        Self::build(spec, schedule, bins, per_bin, stream, false)
    }

    fn build(spec: &DataSpec, schedule: &DiffusionSchedule, bins: usize, per_bin: usize, stream: Substream, clamp: bool) -> Result<Self> {
        if bins == 0 || per_bin == 0 {
            return Err(Error::Config("evaluation needs at least one bin and one draw per bin".into()));
        }
        let m = spec.m;
        let u = spec.bound;
        let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..bins * per_bin)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream.rng(k as u64);
                let mut x0 = spec.draw(&mut rng);
                if clamp {
                    x0.iter_mut().for_each(|v| *v = v.clamp(-u, u));
                }
                let b = k / per_bin;
                let sigma = schedule.sigma((b as f64 + 1.0 - rng.random::<f64>()) / bins as f64);
                let eps = normal_vec(&mut rng, m);
                let xt = x0.iter().zip(&eps).map(|(a, e)| a + sigma * e).collect();
                (x0, xt, sigma)
            })
            .collect();
        let mut out = Self {
            m,
            bins,
            per_bin,
            x0: Vec::with_capacity(rows.len() * m),
            xt: Vec::with_capacity(rows.len() * m),
            sigmas: Vec::with_capacity(rows.len()),
        };
        for (x0, xt, s) in rows {
            out.x0.extend(x0);
            out.xt.extend(xt);
            out.sigmas.push(s);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Posterior means at every draw.
    pub fn oracle_means(&self, oracle: &PosteriorOracle) -> Result<Vec<f64>> {
        ensure_dim(self.m, oracle.dim(), "oracle")?;
        let rows: Vec<Vec<f64>> = self
            .xt
            .par_chunks(self.m)
            .zip(self.sigmas.par_iter())
            .map(|(x, s)| oracle.posterior_mean(x, *s))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinStat {
    pub t_lo: f64,
    pub t_hi: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
}

/// A stratified estimate: equal-weight average of per-bin means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub total: Estimate,
    pub per_bin: Vec<BinStat>,
}

pub fn stratified(values: &[f64], bins: usize, per_bin: usize, schedule: &DiffusionSchedule) -> Metric {
    let per_bin_stats: Vec<BinStat> = (0..bins)
        .map(|b| {
            let w = welford_of(&values[b * per_bin..(b + 1) * per_bin]);
            let e = w.estimate();
            let (t_lo, t_hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
            BinStat {
                t_lo,
                t_hi,
                sigma_lo: schedule.sigma(t_lo),
                sigma_hi: schedule.sigma(t_hi),
                mean: e.mean,
                stderr: e.stderr,
                n: w.n,
            }
        })
        .collect();
    let nb = bins as f64;
    Metric {
        total: Estimate {
            mean: per_bin_stats.iter().map(|b| b.mean).sum::<f64>() / nb,
            stderr: per_bin_stats.iter().map(|b| b.stderr * b.stderr).sum::<f64>().sqrt() / nb,
        },
        per_bin: per_bin_stats,
    }
}

fn row_sq_dists(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    a.chunks_exact(m)
        .zip(b.chunks_exact(m))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect()
}

fn denoise_all(den: &dyn Denoiser, draws: &EvalDraws) -> Result<Vec<f64>> {
    ensure_dim(draws.m, den.dim(), "denoiser")?;
    den.denoise_batch(&draws.xt, &draws.sigmas)
}

/// `L̂`, `R̂`, `V̂` on shared draws plus the per-draw gap `ℓ − r − v`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossTerms {
    pub l: Metric,
    pub r: Metric,
    pub v: Metric,
    /// Stratified mean of `ℓ − r − v`, i.e. `L̂ − (R̂ + V̂)`, with its stderr.
    pub gap: Estimate,
}

impl LossTerms {
    pub fn decomposition_holds(&self, k: f64) -> bool {
        self.gap.mean.abs() <= k * self.gap.stderr
    }
}

pub fn eval_losses(den: &dyn Denoiser, oracle: &PosteriorOracle, draws: &EvalDraws, schedule: &DiffusionSchedule) -> Result<LossTerms> {
    let f = denoise_all(den, draws)?;
    let e = draws.oracle_means(oracle)?;
    let m = draws.m;
    let l = row_sq_dists(&f, &draws.x0, m);
    let r = row_sq_dists(&f, &e, m);
    let v = row_sq_dists(&e, &draws.x0, m);
    let gap: Vec<f64> = l.iter().zip(&r).zip(&v).map(|((a, b), c)| a - b - c).collect();
    let (bins, per_bin) = (draws.bins, draws.per_bin);
    Ok(LossTerms {
        l: stratified(&l, bins, per_bin, schedule),
        r: stratified(&r, bins, per_bin, schedule),
        v: stratified(&v, bins, per_bin, schedule),
        gap: stratified(&gap, bins, per_bin, schedule).total,
    })
}

/// `R̂`: mean `‖f(x_t) − E[X₀|x_t]‖²`.
pub fn eval_r(den: &dyn Denoiser, oracle: &PosteriorOracle, draws: &EvalDraws, schedule: &DiffusionSchedule) -> Result<Metric> {
    let f = denoise_all(den, draws)?;
    let e = draws.oracle_means(oracle)?;
    Ok(stratified(&row_sq_dists(&f, &e, draws.m), draws.bins, draws.per_bin, schedule))
}

/// `V`: mean `‖E[X₀|x_t] − x₀‖²`.
pub fn eval_v(oracle: &PosteriorOracle, draws: &EvalDraws, schedule: &DiffusionSchedule) -> Result<Metric> {
    let e = draws.oracle_means(oracle)?;
    Ok(stratified(&row_sq_dists(&e, &draws.x0, draws.m), draws.bins, draws.per_bin, schedule))
}

/// Mean `‖f(x_t)‖²`.
pub fn output_second_moment(den: &dyn Denoiser, draws: &EvalDraws, schedule: &DiffusionSchedule) -> Result<Metric> {
    let f = denoise_all(den, draws)?;
    let vals: Vec<f64> = f.chunks_exact(draws.m).map(|r| dot(r, r)).collect();
    Ok(stratified(&vals, draws.bins, draws.per_bin, schedule))
}

/// The oracle residual `E[X₀|x_t] − stage1(x_t)` at every draw.
pub fn oracle_residuals(combined: &CombinedDenoiser, oracle: &PosteriorOracle, draws: &EvalDraws) -> Result<Vec<f64>> {
    let e = draws.oracle_means(oracle)?;
    let mut s1 = Vec::with_capacity(e.len());
    for (xc, sc) in draws.xt.chunks(256 * draws.m).zip(draws.sigmas.chunks(256)) {
        s1.extend(combined.stage1_batch(xc, sc)?);
    }
    Ok(e.iter().zip(&s1).map(|(a, b)| a - b).collect())
}

/// Energy of the oracle residual, mean `‖E[X₀|x_t] − stage1(x_t)‖²`.
pub fn oracle_residual_energy(combined: &CombinedDenoiser, oracle: &PosteriorOracle, draws: &EvalDraws, schedule: &DiffusionSchedule) -> Result<Metric> {
    let r = oracle_residuals(combined, oracle, draws)?;
    let vals: Vec<f64> = r.chunks_exact(draws.m).map(|v| dot(v, v)).collect();
    Ok(stratified(&vals, draws.bins, draws.per_bin, schedule))
}

/// Residual-network error against the oracle residual,
/// mean `‖f₀(x_t) − (E[X₀|x_t] − stage1(x_t))‖²`, and the mean `‖f₀‖²`.
pub fn eval_residual(
    combined: &CombinedDenoiser,
    oracle: &PosteriorOracle,
    draws: &EvalDraws,
    schedule: &DiffusionSchedule,
) -> Result<(Metric, Metric)> {
    let r = oracle_residuals(combined, oracle, draws)?;
    let mut f0 = Vec::with_capacity(r.len());
    for (xc, sc) in draws.xt.chunks(256 * draws.m).zip(draws.sigmas.chunks(256)) {
        f0.extend(combined.residual_batch(xc, sc)?);
    }
    let err = row_sq_dists(&f0, &r, draws.m);
    let energy: Vec<f64> = f0.chunks_exact(draws.m).map(|v| dot(v, v)).collect();
    Ok((
        stratified(&err, draws.bins, draws.per_bin, schedule),
        stratified(&energy, draws.bins, draws.per_bin, schedule),
    ))
}

/// Score function `(x, σ) ↦ ∇ log p_σ(x)`.
pub type ScoreFn<'a> = dyn Fn(&[f64], f64) -> Result<Vec<f64>> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlReport {
    pub estimate: f64,
    pub stderr: f64,
    /// Same integral on every other node.
    pub coarse_estimate: f64,
    pub refinement_change: f64,
    /// Set when halving the grid moves the estimate by more than 5%.
    pub coarse_grid_warning: bool,
    /// KL between moment-matched Gaussians of `p_T` under `spec_a` and the
    /// sampler's `N(0, σ_max² I)` start; the dropped terminal term.
    pub terminal_kl_proxy: f64,
    pub nodes: usize,
}

/// `∫ g(t)²/2 · E_{x_t ~ p_t^A} ‖s_A(x_t) − s_B(x_t)‖² dt` by the trapezoid
/// rule on `q + 1` uniform nodes in `t` (q even).
pub fn eval_kl(
    score_a: &ScoreFn,
    score_b: &ScoreFn,
    spec_a: &DataSpec,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    q: usize,
    stream: Substream,
) -> Result<KlReport> {
    if q < 2 || q % 2 != 0 || n_mc == 0 {
        return Err(Error::Config("KL quadrature needs an even node count ≥ 2 and n_mc ≥ 1".into()));
    }
    let m = spec_a.m;
    let per_node: Vec<Welford> = (0..=q)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 / q as f64;
            let sigma = schedule.sigma(t);
            let node = stream.child(i as u64);
            let mut vals = Vec::with_capacity(n_mc);
            for j in 0..n_mc {
                let mut rng = node.rng(j as u64);
                let x0 = spec_a.draw(&mut rng);
                let mut eps = vec![0.0; m];
                fill_normal(&mut rng, &mut eps);
                let xt: Vec<f64> = x0.iter().zip(&eps).map(|(a, e)| a + sigma * e).collect();
                let (sa, sb) = (score_a(&xt, sigma)?, score_b(&xt, sigma)?);
                vals.push(sa.iter().zip(&sb).map(|(a, b)| (a - b) * (a - b)).sum());
            }
            Ok(welford_of(&vals))
        })
        .collect::<Result<_>>()?;
    let integrate = |stride: usize| -> (f64, f64) {
        let h = stride as f64 / q as f64;
        let idx: Vec<usize> = (0..=q).step_by(stride).collect();
        let (mut est, mut var) = (0.0, 0.0);
        for (k, &i) in idx.iter().enumerate() {
            let w = if k == 0 || k == idx.len() - 1 { 0.5 * h } else { h };
            let c = w * 0.5 * schedule.g2(i as f64 / q as f64);
            let e = per_node[i].estimate();
            est += c * e.mean;
            var += (c * e.stderr).powi(2);
        }
        (est, var.sqrt())
    };
    let (estimate, stderr) = integrate(1);
    let (coarse, _) = integrate(2);
    let change = if estimate.abs() > 0.0 {
        (coarse - estimate).abs() / estimate.abs()
    } else {
        (coarse - estimate).abs()
    };
    Ok(KlReport {
        estimate,
        stderr,
        coarse_estimate: coarse,
        refinement_change: change,
        coarse_grid_warning: change > 0.05,
        terminal_kl_proxy: terminal_kl_proxy(spec_a, schedule.sigma_max),
        nodes: q + 1,
    })
}

/// Per-coordinate Gaussian KL of `N(mean, var + σ²)` against `N(0, σ²)`.
pub fn terminal_kl_proxy(spec: &DataSpec, sigma_max: f64) -> f64 {
    let s2 = sigma_max * sigma_max;
    let mean = spec.mean();
    let mut kl = 0.0;
    for (j, mu) in mean.iter().enumerate() {
        let second: f64 = spec.components.iter().map(|c| c.weight * (c.cov.variance(j) + c.mean[j] * c.mean[j])).sum();
        let var = second - mu * mu;
        let ratio = (var + s2) / s2;
        kl += 0.5 * (ratio - 1.0 - ratio.ln() + mu * mu / s2);
    }
    kl
}

/// `Σ_i w_i B_i A_i` as a dense matrix.
pub fn statistic_matrix(ops: &[&ViewOperator], weights: &[f64]) -> Result<DenseMatrix> {
    ensure_dim(ops.len(), weights.len(), "statistic weights")?;
    let m = ops.first().map(|o| o.m()).ok_or_else(|| Error::Config("no operators".into()))?;
    let mut s = DenseMatrix::zeros(m, m);
    for (op, w) in ops.iter().zip(weights) {
        s = s.add(&op.dense_b().matmul(&op.dense_a())?.scale(*w))?;
    }
    Ok(s)
}

/// Exact `E[X₀ | S x_t]` for a Gaussian mixture at a fixed noise level.
/// Conditioning uses an orthonormal basis `U` of `range(S)`, i.e. the
/// statistic `z = Uᵀ S x_t`.
pub struct StatisticConditioner {
    t: DenseMatrix,
    rank: usize,
    comps: Vec<CondComponent>,
    prior_mean: Vec<f64>,
    pub jittered: bool,
}

struct CondComponent {
    log_weight: f64,
    t_mean: Vec<f64>,
    mean: Vec<f64>,
    chol: Cholesky,
    /// `Σ_k Tᵀ`, `m x r`.
    cov_tt: DenseMatrix,
}

impl StatisticConditioner {
    pub fn new(spec: &DataSpec, stat: &DenseMatrix, sigma: f64) -> Result<Self> {
        let m = spec.m;
        if stat.rows != m || stat.cols != m {
            return Err(Error::Shape(format!("statistic must be {m}x{m}")));
        }
        let (vals, vecs) = symmetric_eigen(&stat.matmul(&stat.transpose())?)?;
        let top = vals.first().copied().unwrap_or(0.0).max(0.0);
        let keep: Vec<usize> = (0..m).filter(|&i| top > 0.0 && vals[i] > 1e-12 * top).collect();
        let r = keep.len();
        let prior_mean = spec.mean();
        if r == 0 {
            return Ok(Self {
                t: DenseMatrix::zeros(1, m),
                rank: 0,
                comps: Vec::new(),
                prior_mean,
                jittered: false,
            });
        }
        let mut basis = DenseMatrix::zeros(m, r);
        for (c, &i) in keep.iter().enumerate() {
            for j in 0..m {
                basis.set(j, c, vecs.get(j, i));
            }
        }
        let t = basis.transpose().matmul(stat)?;
        let mut jittered = false;
        let comps = spec
            .components
            .iter()
            .map(|c| {
                let cov = c.cov.to_dense();
                let mut noisy = cov.clone();
                noisy.add_diag(sigma * sigma);
                let g = t.matmul(&noisy)?.matmul(&t.transpose())?;
                let chol = match Cholesky::factor(&g) {
                    Ok(ch) => ch,
                    Err(_) => {
                        jittered = true;
                        let mut gj = g.clone();
                        gj.add_diag(1e-10 * (g.trace() / r.max(1) as f64).max(1.0));
                        Cholesky::factor(&gj)?
                    }
                };
                Ok(CondComponent {
                    log_weight: if c.weight > 0.0 { c.weight.ln() } else { f64::NEG_INFINITY },
                    t_mean: t.matvec(&c.mean)?,
                    mean: c.mean.clone(),
                    chol,
                    cov_tt: cov.matmul(&t.transpose())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            t,
            rank: r,
            comps,
            prior_mean,
            jittered,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mean(&self, x_t: &[f64]) -> Result<Vec<f64>> {
        if self.rank() == 0 {
            return Ok(self.prior_mean.clone());
        }
        let z = self.t.matvec(x_t)?;
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut means = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let d: Vec<f64> = z.iter().zip(&c.t_mean).map(|(a, b)| a - b).collect();
            let sol = c.chol.solve(&d)?;
            logs.push(c.log_weight - 0.5 * (dot(&d, &sol) + c.chol.log_det()));
            let shift = c.cov_tt.matvec(&sol)?;
            means.push(c.mean.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut out = vec![0.0; x_t.len()];
        for (wk, mk) in w.iter().zip(&means) {
            for (o, v) in out.iter_mut().zip(mk) {
                *o += wk / total * v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    /// `E‖X₀ − E[X₀|S X_t]‖²`.
    pub lhs: Estimate,
    /// `E‖X₀ − E[X₀|X_t]‖²`.
    pub rhs1: Estimate,
    /// `E‖E[X₀|X_t] − E[X₀|S X_t]‖²`.
    pub rhs2: Estimate,
    /// `lhs − rhs1 − rhs2` with its paired standard error.
    pub gap: Estimate,
    /// `√(se_lhs² + se_rhs1² + se_rhs2²)`.
    pub combined_stderr: f64,
    pub passed: bool,
    pub jittered: bool,
}

/// Monte-Carlo check of the MMSE decomposition for the statistic `S x_t`.
pub fn check_residual_identity(spec: &DataSpec, stat: &DenseMatrix, sigma: f64, n_mc: usize, stream: Substream) -> Result<IdentityReport> {
    if n_mc < 2 {
        return Err(Error::Config("identity check needs at least two draws".into()));
    }
    let cond = StatisticConditioner::new(spec, stat, sigma)?;
    let oracle = PosteriorOracle::new(spec.clone());
    let m = spec.m;
    let rows: Vec<(f64, f64, f64)> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.rng(i as u64);
            let x0 = spec.draw(&mut rng);
            let eps = normal_vec(&mut rng, m);
            let xt: Vec<f64> = x0.iter().zip(&eps).map(|(a, e)| a + sigma * e).collect();
            let full = oracle.posterior_mean(&xt, sigma)?;
            let part = cond.mean(&xt)?;
            let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            Ok((sq(&x0, &part), sq(&x0, &full), sq(&full, &part)))
        })
        .collect::<Result<_>>()?;
    let lhs = welford_of(&rows.iter().map(|r| r.0).collect::<Vec<_>>()).estimate();
    let rhs1 = welford_of(&rows.iter().map(|r| r.1).collect::<Vec<_>>()).estimate();
    let rhs2 = welford_of(&rows.iter().map(|r| r.2).collect::<Vec<_>>()).estimate();
    let gap = welford_of(&rows.iter().map(|r| r.0 - r.1 - r.2).collect::<Vec<_>>()).estimate();
    let combined_stderr = (lhs.stderr.powi(2) + rhs1.stderr.powi(2) + rhs2.stderr.powi(2)).sqrt();
    Ok(IdentityReport {
        lhs,
        rhs1,
        rhs2,
        gap,
        combined_stderr,
        passed: (lhs.mean - rhs1.mean - rhs2.mean).abs() <= 3.0 * combined_stderr,
        jittered: cond.jittered,
    })
}

/// Closed-form `(lhs, rhs1, rhs2)` for a single Gaussian `N(μ, Σ)`.
pub fn gaussian_identity_terms(cov: &DenseMatrix, stat: &DenseMatrix, sigma: f64) -> Result<(f64, f64, f64)> {
    let m = cov.rows;
    let spec = DataSpec::new(
        "gaussian",
        GridShape::new(m, 1, 1)?,
        f64::MAX.sqrt(),
        vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0; m],
            cov: Covariance::Dense(cov.clone()),
        }],
        0,
        0.0,
        0,
    )?;
    let cond = StatisticConditioner::new(&spec, stat, sigma)?;
    let mut noisy = cov.clone();
    noisy.add_diag(sigma * sigma);
    let chol = Cholesky::factor(&noisy)?;
    // trace(Σ C⁻¹ Σ) and trace(Σ Tᵀ G⁻¹ T Σ)
    let mut explained_full = 0.0;
    for j in 0..m {
        let col: Vec<f64> = (0..m).map(|i| cov.get(i, j)).collect();
        explained_full += dot(&col, &chol.solve(&col)?);
    }
    let mut explained_stat = 0.0;
    for c in &cond.comps {
        for j in 0..m {
            let row = c.cov_tt.row(j).to_vec();
            explained_stat += dot(&row, &c.chol.solve(&row)?);
        }
    }
    let total = cov.trace();
    let lhs = total - explained_stat;
    let rhs1 = total - explained_full;
    Ok((lhs, rhs1, lhs - rhs1))
}

/// A random mixture (dimension ≤ `max_m`, ≤ `max_k` components, dense
/// covariances) with a random linear statistic of random rank.
pub fn random_small_spec(seed: u64, max_m: usize, max_k: usize) -> Result<(DataSpec, DenseMatrix)> {
    let mut rng = Substream::new(seed, crate::rng::streams::SPEC).rng(0);
    let m = rng.random_range(2..=max_m.max(2));
    let k = rng.random_range(1..=max_k.max(1));
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let components = raw
        .iter()
        .map(|w| {
            let mean = normal_vec(&mut rng, m);
            let a = DenseMatrix::new(m, m, normal_vec(&mut rng, m * m).iter().map(|v| 0.5 * v).collect())?;
            let mut cov = a.matmul(&a.transpose())?.scale(1.0 / m as f64);
            for j in 0..m {
                let d = rng.random_range(0.05..0.5);
                cov.set(j, j, cov.get(j, j) + d);
            }
            Ok(MixtureComponent {
                weight: w / total,
                mean,
                cov: Covariance::Dense(cov),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = DataSpec::new(format!("small-{seed}"), GridShape::new(m, 1, 1)?, 50.0, components, 0, 0.0, seed)?;
    let rank = rng.random_range(0..=m);
    let stat = if rank == 0 {
        DenseMatrix::zeros(m, m)
    } else {
        let p = DenseMatrix::new(m, rank, normal_vec(&mut rng, m * rank))?;
        let q = DenseMatrix::new(rank, m, normal_vec(&mut rng, rank * m))?;
        p.matmul(&q)?
    };
    Ok((spec, stat))
}

/// Summary of one denoiser's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub denoiser_id: String,
    pub r: Metric,
    pub l: Metric,
    pub v: Metric,
    pub gap: Estimate,
    pub n: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_terms(id: impl Into<String>, terms: LossTerms, n: usize, config_hash: impl Into<String>) -> Self {
        Self {
            denoiser_id: id.into(),
            r: terms.r,
            l: terms.l,
            v: terms.v,
            gap: terms.gap,
            n,
            config_hash: config_hash.into(),
        }
    }

    /// Aligned text table, one row per noise bin plus a total row.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "denoiser {}  (n = {}, config {})\n{:>10} {:>10} {:>14} {:>14} {:>14}\n",
            self.denoiser_id, self.n, self.config_hash, "sigma_lo", "sigma_hi", "R", "L", "V"
        );
        for ((r, l), v) in self.r.per_bin.iter().zip(&self.l.per_bin).zip(&self.v.per_bin) {
            s.push_str(&format!(
                "{:>10.4} {:>10.4} {:>14.6e} {:>14.6e} {:>14.6e}\n",
                r.sigma_lo, r.sigma_hi, r.mean, l.mean, v.mean
            ));
        }
        s.push_str(&format!(
            "{:>10} {:>10} {:>14.6e} {:>14.6e} {:>14.6e}\n",
            "total", "", self.r.total.mean, self.l.total.mean, self.v.total.mean
        ));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_lo,t_hi,sigma_lo,sigma_hi,r,r_se,l,l_se,v,v_se\n");
        for ((r, l), v) in self.r.per_bin.iter().zip(&self.l.per_bin).zip(&self.v.per_bin) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.t_lo, r.t_hi, r.sigma_lo, r.sigma_hi, r.mean, r.stderr, l.mean, l.stderr, v.mean, v.stderr
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    pub per_bin: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 20,
            per_bin: 50,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{score_from_denoiser, FnDenoiser, GridRule};

    fn gaussian(m: usize, var: f64) -> DataSpec {
        let c = MixtureComponent::diag_low_rank(1.0, vec![0.0; m], vec![var; m], None, 0.0);
        DataSpec::new("g", GridShape::new(m, 1, 1).unwrap(), 8.0, vec![c], 0, 0.0, 1).unwrap()
    }

    fn fixed(sigma: f64) -> DiffusionSchedule {
        DiffusionSchedule::new(sigma, sigma * (1.0 + 1e-12), 2, GridRule::Geometric).unwrap()
    }

    #[test]
    fn welford_merge_matches_direct() {
        let vals: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let w = welford_of(&vals);
        let mean = vals.iter().sum::<f64>() / 1000.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((w.mean - mean).abs() < 1e-12);
        assert!((w.variance() - var).abs() < 1e-10);
    }

    #[test]
    fn oracle_has_zero_r() {
        let spec = gaussian(3, 1.0);
        let oracle = PosteriorOracle::new(spec.clone());
        let sched = DiffusionSchedule::new(0.01, 10.0, 8, GridRule::Karras).unwrap();
        let draws = EvalDraws::new(&spec, &sched, 4, 50, Substream::new(1, 8)).unwrap();
        let r = eval_r(&oracle, &oracle, &draws, &sched).unwrap();
        assert_eq!(r.total.mean, 0.0);
    }

    #[test]
    fn zero_denoiser_r_matches_conjugate_form() {
        // E‖E[X₀|x_t]‖² = m/(1+σ²) for N(0, I).
        let (m, sigma) = (4, 0.8);
        let spec = gaussian(m, 1.0);
        let oracle = PosteriorOracle::new(spec.clone());
        let sched = fixed(sigma);
        let draws = EvalDraws::unclamped(&spec, &sched, 1, 20_000, Substream::new(2, 8)).unwrap();
        let zero = FnDenoiser::new(m, |_: &[f64], _| vec![0.0; 4]);
        let r = eval_r(&zero, &oracle, &draws, &sched).unwrap();
        let expect = m as f64 / (1.0 + sigma * sigma);
        assert!((r.total.mean - expect).abs() < 3.0 * r.total.stderr, "{:?} vs {expect}", r.total);
    }

    #[test]
    fn v_matches_conjugate_posterior_variance() {
        let (m, sigma) = (3, 1.5);
        let spec = gaussian(m, 1.0);
        let oracle = PosteriorOracle::new(spec.clone());
        let sched = fixed(sigma);
        let draws = EvalDraws::unclamped(&spec, &sched, 1, 20_000, Substream::new(3, 8)).unwrap();
        let v = eval_v(&oracle, &draws, &sched).unwrap();
        let expect = m as f64 * sigma * sigma / (1.0 + sigma * sigma);
        assert!((v.total.mean - expect).abs() < 3.0 * v.total.stderr.max(1e-12), "{:?} vs {expect}", v.total);
    }

    #[test]
    fn point_mass_has_zero_v_and_v_shrinks_with_sigma() {
        let point = gaussian(2, 0.0);
        let oracle = PosteriorOracle::new(point.clone());
        let sched = DiffusionSchedule::new(0.01, 10.0, 8, GridRule::Karras).unwrap();
        let draws = EvalDraws::new(&point, &sched, 2, 10, Substream::new(4, 8)).unwrap();
        assert!(eval_v(&oracle, &draws, &sched).unwrap().total.mean < 1e-20);
        let spec = gaussian(2, 1.0);
        let oracle = PosteriorOracle::new(spec.clone());
        let draws = EvalDraws::unclamped(&spec, &sched, 5, 400, Substream::new(4, 8)).unwrap();
        let v = eval_v(&oracle, &draws, &sched).unwrap();
        for w in v.per_bin.windows(2) {
            assert!(w[0].mean < w[1].mean);
        }
    }

    #[test]
    fn identical_scores_give_zero_kl() {
        let spec = gaussian(1, 1.0);
        let oracle = PosteriorOracle::new(spec.clone());
        let sched = DiffusionSchedule::new(0.002, 80.0, 8, GridRule::Karras).unwrap();
        let s = |x: &[f64], sg: f64| oracle.score(x, sg);
        let rep = eval_kl(&s, &s, &spec, &sched, 20, 16, Substream::new(1, 8)).unwrap();
        assert_eq!(rep.estimate, 0.0);
        assert!(rep.estimate.abs() <= 3.0 * rep.stderr);
    }

    #[test]
    fn shifted_gaussian_kl() {
        let a = gaussian(1, 1.0);
        let mut b = a.clone();
        b.components[0].mean = vec![0.1];
        let (oa, ob) = (PosteriorOracle::new(a.clone()), PosteriorOracle::new(b));
        let sched = DiffusionSchedule::new(0.002, 80.0, 8, GridRule::Karras).unwrap();
        let sa = |x: &[f64], s: f64| oa.score(x, s);
        let sb = |x: &[f64], s: f64| ob.score(x, s);
        let rep = eval_kl(&sa, &sb, &a, &sched, 4, 512, Substream::new(1, 8)).unwrap();
        assert!((rep.estimate - 0.005).abs() < 0.05 * 0.005, "{rep:?}");
        assert!(!rep.coarse_grid_warning);
        let rough = eval_kl(&sa, &sb, &a, &sched, 4, 4, Substream::new(1, 8)).unwrap();
        assert!(rough.coarse_grid_warning, "{rough:?}");
    }

    #[test]
    fn kl_via_denoiser_scores() {
        let a = gaussian(2, 1.0);
        let oa = PosteriorOracle::new(a.clone());
        let sched = DiffusionSchedule::new(0.002, 80.0, 8, GridRule::Karras).unwrap();
        let sa = |x: &[f64], s: f64| oa.score(x, s);
        let shrink = |x: &[f64], s: f64| {
            let d: Vec<f64> = oa.posterior_mean(x, s)?.iter().map(|v| 0.9 * v).collect();
            score_from_denoiser(&d, x, s)
        };
        let rep = eval_kl(&sa, &shrink, &a, &sched, 200, 128, Substream::new(5, 8)).unwrap();
        assert!(rep.estimate > 0.0 && rep.estimate >= -3.0 * rep.stderr);
    }

    #[test]
    fn full_statistic_leaves_no_gap() {
        let (spec, _) = random_small_spec(3, 4, 2).unwrap();
        let id = DenseMatrix::identity(spec.m);
        let rep = check_residual_identity(&spec, &id, 0.7, 2000, Substream::new(3, 8)).unwrap();
        assert!(rep.rhs2.mean < 1e-18, "{rep:?}");
        assert!((rep.lhs.mean - rep.rhs1.mean).abs() < 1e-12);
    }

    #[test]
    fn zero_statistic_is_total_variance() {
        let (spec, _) = random_small_spec(4, 4, 3).unwrap();
        let zero = DenseMatrix::zeros(spec.m, spec.m);
        let cond = StatisticConditioner::new(&spec, &zero, 0.5).unwrap();
        assert_eq!(cond.rank(), 0);
        assert_eq!(cond.mean(&vec![3.0; spec.m]).unwrap(), spec.mean());
        let rep = check_residual_identity(&spec, &zero, 0.5, 20_000, Substream::new(4, 8)).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn rank_one_gaussian_closed_form() {
        // Σ = I₂, statistic e₁e₁ᵀ: lhs = 2 − 1/(1+σ²), rhs1 = 2σ²/(1+σ²).
        let sigma: f64 = 0.6;
        let mut stat = DenseMatrix::zeros(2, 2);
        stat.set(0, 0, 1.0);
        let (lhs, rhs1, rhs2) = gaussian_identity_terms(&DenseMatrix::identity(2), &stat, sigma).unwrap();
        let s2 = sigma * sigma;
        assert!((lhs - (2.0 - 1.0 / (1.0 + s2))).abs() < 1e-12);
        assert!((rhs1 - 2.0 * s2 / (1.0 + s2)).abs() < 1e-12);
        assert!((rhs2 - 1.0 / (1.0 + s2)).abs() < 1e-12);
    }

    #[test]
    fn identity_holds_on_random_specs() {
        for seed in 0..5 {
            let (spec, stat) = random_small_spec(100 + seed, 6, 3).unwrap();
            let rep = check_residual_identity(&spec, &stat, 0.8, 20_000, Substream::new(seed, 8)).unwrap();
            assert!(rep.passed, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn statistic_of_patch_tiling_is_identity() {
        let ops = crate::linops::patch_tiling(GridShape::square(4), 2).unwrap();
        let refs: Vec<&ViewOperator> = ops.iter().collect();
        let s = statistic_matrix(&refs, &[1.0; 4]).unwrap();
        assert_eq!(s, DenseMatrix::identity(16));
    }

    #[test]
    fn report_table_has_a_total_row() {
        let spec = gaussian(2, 1.0);
        let oracle = PosteriorOracle::new(spec.clone());
        let sched = DiffusionSchedule::new(0.01, 10.0, 8, GridRule::Karras).unwrap();
        let draws = EvalDraws::new(&spec, &sched, 3, 20, Substream::new(1, 8)).unwrap();
        let terms = eval_losses(&oracle, &oracle, &draws, &sched).unwrap();
        let rep = EvalReport::from_terms("oracle", terms, draws.len(), "abc");
        let table = rep.to_table();
        assert_eq!(table.lines().count(), 2 + 3 + 1);
        assert!(table.lines().last().unwrap().trim_start().starts_with("total"));
        assert_eq!(rep.to_csv().lines().count(), 4);
    }
}
