//! Variance-exploding diffusion: schedule, forward noising, Tweedie
//! conversion, exact Gaussian-mixture posterior oracles and the reverse-time
//! sampler.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::linops::{dot, Cholesky, DenseMatrix};
use crate::rng::{fill_normal, Substream};
use crate::synthdata::{Covariance, DataSpec};

/// Anything that maps a noisy sample and noise level to an estimate of the
/// clean sample.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// Row-major batch of `sigmas.len()` inputs.
    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        ensure_dim(d * sigmas.len(), xs.len(), "batched denoiser input")?;
        let mut out = Vec::with_capacity(xs.len());
        for (x, s) in xs.chunks_exact(d).zip(sigmas) {
            out.extend(self.denoise(x, *s)?);
        }
        Ok(out)
    }
}

/// Adapts a closure into a [`Denoiser`].
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        ensure_dim(self.dim, x_t.len(), "denoiser input")?;
        Ok((self.f)(x_t, sigma))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).denoise(x_t, sigma)
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        (**self).denoise_batch(xs, sigmas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRule {
    /// Log-spaced sampling levels.
    Geometric,
    /// Karras et al. spacing with exponent 7.
    Karras,
}

/// `σ(t) = σ_min (σ_max/σ_min)^t` on `t ∈ [0, 1]`, so uniform `t` is
/// log-uniform `σ`. `Q` is the number of quadrature nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    pub rule: GridRule,
}

pub const HORIZON: f64 = 1.0;
const KARRAS_RHO: f64 = 7.0;

impl DiffusionSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, q: usize, rule: GridRule) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            q,
            rule,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) || !self.sigma_max.is_finite() {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.q < 2 {
            return Err(Error::Config("schedule needs at least 2 quadrature nodes".into()));
        }
        Ok(())
    }

    /// EDM-style range: `σ_min = 0.002·U`, `σ_max = 80` rescaled from the
    /// reference data std of 0.5.
    pub fn edm_scaled(bound: f64, data_std: f64, q: usize) -> Result<Self> {
        Self::new(0.002 * bound, 80.0 * data_std / 0.5, q, GridRule::Karras)
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (t * self.log_ratio()).exp()
    }

    pub fn t_of_sigma(&self, sigma: f64) -> f64 {
        (sigma / self.sigma_min).ln() / self.log_ratio()
    }

    /// `g(t)² = d σ(t)² / dt`.
    pub fn g2(&self, t: f64) -> f64 {
        2.0 * self.log_ratio() * self.sigma(t).powi(2)
    }

    /// `dσ/dt`.
    pub fn sigma_dot(&self, t: f64) -> f64 {
        self.log_ratio() * self.sigma(t)
    }

    /// Uniform quadrature nodes on `[0, T]`.
    pub fn t_grid(&self) -> Vec<f64> {
        let n = self.q - 1;
        (0..=n).map(|j| HORIZON * j as f64 / n as f64).collect()
    }

    /// Decreasing noise levels `σ_max = s_0 > … > s_steps = σ_min`.
    pub fn sampling_sigmas(&self, steps: usize) -> Vec<f64> {
        let n = steps as f64;
        let mut out: Vec<f64> = (0..=steps)
            .map(|i| {
                let f = i as f64 / n;
                match self.rule {
                    GridRule::Karras => {
                        let a = self.sigma_max.powf(1.0 / KARRAS_RHO);
                        let b = self.sigma_min.powf(1.0 / KARRAS_RHO);
                        (a + f * (b - a)).powf(KARRAS_RHO)
                    }
                    GridRule::Geometric => self.sigma(1.0 - f),
                }
            })
            .collect();
        out[0] = self.sigma_max;
        out[steps] = self.sigma_min;
        out
    }

    /// Maximum relative error between `σ(t_{j+1})² − σ(t_j)²` and a Simpson
    /// integral of `g²` over each quadrature interval.
    pub fn consistency_error(&self) -> f64 {
        let grid = self.t_grid();
        grid.windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let exact = self.sigma(b).powi(2) - self.sigma(a).powi(2);
                let n = 16;
                let h = (b - a) / n as f64;
                let mut s = self.g2(a) + self.g2(b);
                for i in 1..n {
                    let c = if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += c * self.g2(a + i as f64 * h);
                }
                ((s * h / 3.0) - exact).abs() / exact
            })
            .fold(0.0, f64::max)
    }

    /// Maps a uniform variate to a log-uniform noise level.
    pub fn sigma_from_uniform(&self, u: f64) -> f64 {
        self.sigma(u.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub sigma: f64,
    pub x0_ref: Option<usize>,
}

/// `x_t = x₀ + σ(t)·ε` with `ε` drawn from `stream` at `index`.
pub fn add_noise(
    x0: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
    stream: Substream,
    index: u64,
) -> Result<NoisySample> {
    if !(t > 0.0 && t <= HORIZON) {
        return Err(Error::Range(format!("diffusion time {t} outside (0, {HORIZON}]")));
    }
    let sigma = schedule.sigma(t);
    let mut eps = vec![0.0; x0.len()];
    fill_normal(&mut stream.rng(index), &mut eps);
    Ok(NoisySample {
        x_t: x0.iter().zip(&eps).map(|(x, e)| x + sigma * e).collect(),
        t,
        sigma,
        x0_ref: None,
    })
}

/// Tweedie: `∇ log p_σ(x) = (E[x₀|x] − x)/σ²`.
pub fn score_from_denoiser(denoised: &[f64], x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    ensure_dim(x_t.len(), denoised.len(), "denoised vector")?;
    let s2 = sigma * sigma;
    Ok(denoised.iter().zip(x_t).map(|(d, x)| (d - x) / s2).collect())
}

/// Factorization of `Σ_k + σ² I` for one mixture component.
#[derive(Debug, Clone)]
enum NoisyFactor {
    LowRank {
        inv_diag: Vec<f64>,
        factors: Option<(DenseMatrix, Cholesky)>,
        log_det: f64,
    },
    Dense {
        chol: Cholesky,
    },
}

impl NoisyFactor {
    fn build(cov: &Covariance, s2: f64) -> Result<Self> {
        match cov {
            Covariance::DiagLowRank { diag, factors } => {
                let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / (d + s2)).collect();
                let mut log_det: f64 = diag.iter().map(|d| (d + s2).ln()).sum();
                let factors = match factors {
                    Some(f) => {
                        let r = f.cols;
                        let mut cap = DenseMatrix::identity(r);
                        for j in 0..f.rows {
                            let row = f.row(j);
                            for a in 0..r {
                                for b in 0..r {
                                    cap.values[a * r + b] += row[a] * inv_diag[j] * row[b];
                                }
                            }
                        }
                        let chol = Cholesky::factor(&cap)?;
                        log_det += chol.log_det();
                        Some((f.clone(), chol))
                    }
                    None => None,
                };
                Ok(NoisyFactor::LowRank {
                    inv_diag,
                    factors,
                    log_det,
                })
            }
            Covariance::Dense(d) => {
                let mut c = d.clone();
                c.add_diag(s2);
                Ok(NoisyFactor::Dense {
                    chol: Cholesky::factor(&c)?,
                })
            }
        }
    }

    fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            NoisyFactor::LowRank {
                inv_diag, factors, ..
            } => {
                let mut y: Vec<f64> = v.iter().zip(inv_diag).map(|(a, b)| a * b).collect();
                if let Some((f, cap)) = factors {
                    let t = f.matvec_t(&y).expect("dims agree");
                    let s = cap.solve(&t).expect("dims agree");
                    for (j, yj) in y.iter_mut().enumerate() {
                        *yj -= inv_diag[j] * dot(f.row(j), &s);
                    }
                }
                y
            }
            NoisyFactor::Dense { chol } => chol.solve(v).expect("dims agree"),
        }
    }

    fn log_det(&self) -> f64 {
        match self {
            NoisyFactor::LowRank { log_det, .. } => *log_det,
            NoisyFactor::Dense { chol } => chol.log_det(),
        }
    }
}

const ORACLE_CACHE_CAPACITY: usize = 1024;

/// Exact posterior quantities of a Gaussian mixture observed under
/// isotropic Gaussian noise.
#[derive(Debug)]
pub struct PosteriorOracle {
    spec: DataSpec,
    cache: RwLock<HashMap<u64, Arc<Vec<NoisyFactor>>>>,
}

/// Per-query posterior summary.
#[derive(Debug, Clone)]
pub struct PosteriorQuery {
    pub responsibilities: Vec<f64>,
    pub mean: Vec<f64>,
    pub score: Vec<f64>,
    pub log_density: f64,
}

impl PosteriorOracle {
    pub fn new(spec: DataSpec) -> Self {
        Self {
            spec,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn spec(&self) -> &DataSpec {
        &self.spec
    }

    fn factors(&self, sigma: f64) -> Result<Arc<Vec<NoisyFactor>>> {
        let key = sigma.to_bits();
        if let Some(f) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(f.clone());
        }
        let s2 = sigma * sigma;
        let built = Arc::new(
            self.spec
                .components
                .iter()
                .map(|c| NoisyFactor::build(&c.cov, s2))
                .collect::<Result<Vec<_>>>()?,
        );
        let mut cache = self.cache.write().expect("cache lock");
        if cache.len() < ORACLE_CACHE_CAPACITY {
            cache.entry(key).or_insert_with(|| built.clone());
        }
        Ok(built)
    }

    /// Responsibilities, posterior mean, score and log-density at `x_t`.
    pub fn query(&self, x_t: &[f64], sigma: f64) -> Result<PosteriorQuery> {
        ensure_dim(self.spec.m, x_t.len(), "oracle query")?;
        ensure_finite(x_t, "oracle query")?;
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Numerical(format!("oracle needs a positive finite sigma, got {sigma}")));
        }
        let factors = self.factors(sigma)?;
        let m = self.spec.m as f64;
        let log2pi = (2.0 * std::f64::consts::PI).ln();
        let mut logs = Vec::with_capacity(factors.len());
        let mut sols = Vec::with_capacity(factors.len());
        for (c, f) in self.spec.components.iter().zip(factors.iter()) {
            let diff: Vec<f64> = x_t.iter().zip(&c.mean).map(|(x, mu)| x - mu).collect();
            let sol = f.solve(&diff);
            let quad = dot(&diff, &sol);
            let lw = if c.weight > 0.0 { c.weight.ln() } else { f64::NEG_INFINITY };
            logs.push(lw - 0.5 * (quad + f.log_det() + m * log2pi));
            sols.push(sol);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let responsibilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut score = vec![0.0; x_t.len()];
        for (w, sol) in responsibilities.iter().zip(&sols) {
            for (s, v) in score.iter_mut().zip(sol) {
                *s -= w * v;
            }
        }
        let s2 = sigma * sigma;
        let mean = x_t.iter().zip(&score).map(|(x, s)| x + s2 * s).collect();
        Ok(PosteriorQuery {
            responsibilities,
            mean,
            score,
            log_density: max + total.ln(),
        })
    }

    /// `E[X₀ | x_t]` for noise level `sigma`.
    pub fn posterior_mean(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.query(x_t, sigma)?.mean)
    }

    pub fn score(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.query(x_t, sigma)?.score)
    }

    pub fn log_density(&self, x_t: &[f64], sigma: f64) -> Result<f64> {
        Ok(self.query(x_t, sigma)?.log_density)
    }
}

impl Denoiser for PosteriorOracle {
    fn dim(&self) -> usize {
        self.spec.m
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.posterior_mean(x_t, sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Euler,
    Heun,
    /// Euler–Maruyama on the reverse-time SDE.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub kind: SamplerKind,
    pub record_trajectory: bool,
}

impl SamplerOptions {
    pub fn heun(steps: usize) -> Self {
        Self {
            steps,
            kind: SamplerKind::Heun,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub sigma: f64,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub x: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Integrates from `σ_max` down to `σ_min`. The probability-flow ODE in
/// noise-level form is `dx/dσ = (x − D(x, σ))/σ`.
pub fn sample_reverse(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    opts: &SamplerOptions,
    stream: Substream,
    index: u64,
) -> Result<SampleOutcome> {
    if opts.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let d = denoiser.dim();
    let sigmas = schedule.sampling_sigmas(opts.steps);
    let mut rng = stream.rng(index);
    let mut x = vec![0.0; d];
    fill_normal(&mut rng, &mut x);
    x.iter_mut().for_each(|v| *v *= sigmas[0]);
    let mut trajectory = Vec::new();
    let record = |step: usize, sigma: f64, x: &[f64], out: &mut Vec<TrajectoryRow>| {
        if opts.record_trajectory {
            out.push(TrajectoryRow {
                step,
                t: schedule.t_of_sigma(sigma),
                sigma,
                norm: dot(x, x).sqrt(),
            });
        }
    };
    record(0, sigmas[0], &x, &mut trajectory);
    let slope = |x: &[f64], sigma: f64| -> Result<Vec<f64>> {
        let den = denoiser.denoise(x, sigma)?;
        Ok(x.iter().zip(&den).map(|(a, b)| (a - b) / sigma).collect())
    };
    for (i, w) in sigmas.windows(2).enumerate() {
        let (s_cur, s_next) = (w[0], w[1]);
        let h = s_next - s_cur;
        match opts.kind {
            SamplerKind::Euler => {
                let k1 = slope(&x, s_cur)?;
                for (xi, k) in x.iter_mut().zip(&k1) {
                    *xi += h * k;
                }
            }
            SamplerKind::Heun => {
                let k1 = slope(&x, s_cur)?;
                let trial: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + h * k).collect();
                let k2 = slope(&trial, s_next)?;
                for ((xi, a), b) in x.iter_mut().zip(&k1).zip(&k2) {
                    *xi += 0.5 * h * (a + b);
                }
            }
            SamplerKind::Stochastic => {
                let den = denoiser.denoise(&x, s_cur)?;
                let var = s_cur * s_cur - s_next * s_next;
                let score = score_from_denoiser(&den, &x, s_cur)?;
                let mut z = vec![0.0; d];
                fill_normal(&mut rng, &mut z);
                for ((xi, s), zi) in x.iter_mut().zip(&score).zip(&z) {
                    *xi += var * s + var.sqrt() * zi;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: i + 1,
                detail: format!("non-finite state at sigma = {s_next:e}"),
            });
        }
        record(i + 1, s_next, &x, &mut trajectory);
    }
    Ok(SampleOutcome { x, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::GridShape;
    use crate::synthdata::MixtureComponent;
    use approx::assert_abs_diff_eq;

    fn gaussian_spec(m: usize, var: f64, mean: f64) -> DataSpec {
        DataSpec {
            id: "gauss".into(),
            m,
            grid: GridShape::new(m, 1, 1).unwrap(),
            bound: 100.0,
            components: vec![MixtureComponent::diag_low_rank(1.0, vec![mean; m], vec![var; m], None, 0.0)],
            global_rank: 0,
            global_strength: 0.0,
            seed: 0,
        }
    }

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::new(0.002, 80.0, 64, GridRule::Karras).unwrap()
    }

    #[test]
    fn schedule_is_consistent_and_increasing() {
        let s = sched();
        assert!(s.consistency_error() < 1e-6);
        let g = s.t_grid();
        assert!(g.windows(2).all(|w| s.sigma(w[1]) > s.sigma(w[0])));
        assert_abs_diff_eq!(s.sigma(0.0), 0.002, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma(1.0), 80.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.t_of_sigma(s.sigma(0.37)), 0.37, epsilon = 1e-12);
        let k = s.sampling_sigmas(10);
        assert_abs_diff_eq!(k[0], 80.0, epsilon = 1e-9);
        assert_abs_diff_eq!(k[10], 0.002, epsilon = 1e-12);
        assert!(k.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_json_shape() {
        let j = serde_json::to_value(sched()).unwrap();
        assert_eq!(j["Q"], 64);
        assert_eq!(j["rule"], "karras");
        let back: DiffusionSchedule = serde_json::from_value(j).unwrap();
        assert_eq!(back, sched());
    }

    #[test]
    fn bad_schedule_rejected() {
        assert!(DiffusionSchedule::new(0.0, 1.0, 8, GridRule::Karras).is_err());
        assert!(DiffusionSchedule::new(2.0, 1.0, 8, GridRule::Karras).is_err());
    }

    #[test]
    fn vanishing_noise_keeps_sample() {
        let s = DiffusionSchedule::new(1e-4, 80.0, 8, GridRule::Karras).unwrap();
        let n = add_noise(&[1.0, 2.0], 1e-9, &s, Substream::new(0, 5), 0).unwrap();
        assert!(n.x_t.iter().zip([1.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn noise_is_deterministic_and_range_checked() {
        let s = sched();
        let a = add_noise(&[0.5; 3], 0.4, &s, Substream::new(1, 5), 9).unwrap();
        let b = add_noise(&[0.5; 3], 0.4, &s, Substream::new(1, 5), 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(add_noise(&[0.0], 0.0, &s, Substream::new(1, 5), 0), Err(Error::Range(_))));
        assert!(matches!(add_noise(&[0.0], 1.5, &s, Substream::new(1, 5), 0), Err(Error::Range(_))));
    }

    #[test]
    fn empirical_noise_variance() {
        let s = DiffusionSchedule::new(0.01, 100.0, 8, GridRule::Karras).unwrap();
        let t = s.t_of_sigma(2.0);
        let n = 100_000;
        let stream = Substream::new(3, 5);
        let (mut acc, mut acc2) = (0.0, 0.0);
        for i in 0..n {
            let e = add_noise(&[0.0], t, &s, stream, i).unwrap().x_t[0];
            acc += e * e;
            acc2 += e.powi(4);
        }
        let v = acc / n as f64;
        let se = ((acc2 / n as f64 - v * v) / n as f64).sqrt();
        assert!((v - 4.0).abs() < 3.0 * se, "{v} ± {se}");
    }

    #[test]
    fn conjugate_shrinkage() {
        let o = PosteriorOracle::new(gaussian_spec(1, 1.0, 0.0));
        assert_abs_diff_eq!(o.posterior_mean(&[2.0], 1.0).unwrap()[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_mixture_at_origin() {
        let comps = [-1.0, 1.0]
            .iter()
            .map(|s| MixtureComponent::diag_low_rank(0.5, vec![*s; 3], vec![0.2; 3], None, 0.0))
            .collect();
        let spec = DataSpec::new("sym", GridShape::new(3, 1, 1).unwrap(), 4.0, comps, 0, 0.0, 0).unwrap();
        let o = PosteriorOracle::new(spec);
        let q = o.query(&[0.0; 3], 0.7).unwrap();
        assert!(q.mean.iter().all(|v| v.abs() < 1e-14));
        assert_abs_diff_eq!(q.responsibilities.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_rejects_non_finite() {
        let o = PosteriorOracle::new(gaussian_spec(2, 1.0, 0.0));
        assert!(matches!(o.posterior_mean(&[f64::NAN, 0.0], 1.0), Err(Error::Numerical(_))));
        assert!(matches!(o.posterior_mean(&[0.0, 0.0], 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn tweedie_formula() {
        assert_eq!(score_from_denoiser(&[2.0], &[2.0], 0.3).unwrap(), vec![0.0]);
        assert_eq!(score_from_denoiser(&[1.0], &[2.0], 1.0).unwrap(), vec![-1.0]);
        assert!(matches!(score_from_denoiser(&[1.0], &[2.0], 0.0), Err(Error::Domain(_))));
        let o = PosteriorOracle::new(gaussian_spec(1, 1.0, 0.0));
        for sigma in sched().sampling_sigmas(20) {
            let x = [1.3];
            let s = score_from_denoiser(&o.posterior_mean(&x, sigma).unwrap(), &x, sigma).unwrap();
            let exact = -x[0] / (1.0 + sigma * sigma);
            assert!((s[0] - exact).abs() <= 1e-10 * exact.abs(), "sigma {sigma}");
        }
    }

    #[test]
    fn tweedie_matches_closed_form_score_on_diagonal_specs() {
        let diag = vec![0.3, 0.05, 1.2, 0.7];
        let mean = vec![0.2, -0.4, 0.1, 0.0];
        let spec = DataSpec {
            id: "diag".into(),
            m: 4,
            grid: GridShape::new(4, 1, 1).unwrap(),
            bound: 50.0,
            components: vec![MixtureComponent::diag_low_rank(1.0, mean.clone(), diag.clone(), None, 0.0)],
            global_rank: 0,
            global_strength: 0.0,
            seed: 0,
        };
        let o = PosteriorOracle::new(spec);
        let x = [0.9, -1.1, 0.3, 2.0];
        for sigma in [0.01, 0.3, 1.0, 7.0] {
            let s = score_from_denoiser(&o.posterior_mean(&x, sigma).unwrap(), &x, sigma).unwrap();
            for j in 0..4 {
                let exact = -(x[j] - mean[j]) / (diag[j] + sigma * sigma);
                assert!((s[j] - exact).abs() <= 1e-8 * exact.abs());
            }
        }
    }

    #[test]
    fn low_rank_and_dense_routes_agree() {
        let spec = crate::synthdata::desk_spec(&crate::synthdata::DeskSpecParams::new(
            GridShape::square(4),
            2,
            0.1,
            4,
        ))
        .unwrap();
        let mut dense = spec.clone();
        for c in dense.components.iter_mut() {
            c.cov = Covariance::Dense(c.cov.to_dense());
        }
        let a = PosteriorOracle::new(spec);
        let b = PosteriorOracle::new(dense);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        for sigma in [0.05, 0.5, 3.0] {
            let qa = a.query(&x, sigma).unwrap();
            let qb = b.query(&x, sigma).unwrap();
            for (u, v) in qa.mean.iter().zip(&qb.mean) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-10);
            }
            assert_abs_diff_eq!(qa.log_density, qb.log_density, epsilon = 1e-9);
        }
    }

    #[test]
    fn sampler_contracts_to_point_mass() {
        let c = vec![0.7, -0.2];
        let cc = c.clone();
        let den = FnDenoiser::new(2, move |_x: &[f64], _s| cc.clone());
        let s = DiffusionSchedule::new(1e-4, 80.0, 64, GridRule::Karras).unwrap();
        let out = sample_reverse(&den, &s, &SamplerOptions::heun(64), Substream::new(0, 9), 0).unwrap();
        for (a, b) in out.x.iter().zip(&c) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn one_euler_step_with_identity_denoiser_returns_initial_noise() {
        let den = FnDenoiser::new(3, |x: &[f64], _s| x.to_vec());
        let s = sched();
        let opts = SamplerOptions {
            steps: 1,
            kind: SamplerKind::Euler,
            record_trajectory: true,
        };
        let out = sample_reverse(&den, &s, &opts, Substream::new(2, 9), 4).unwrap();
        let mut z = vec![0.0; 3];
        fill_normal(&mut Substream::new(2, 9).rng(4), &mut z);
        let expected: Vec<f64> = z.iter().map(|v| v * s.sigma_max).collect();
        assert_eq!(out.x, expected);
        assert_eq!(out.trajectory.len(), 2);
        assert_eq!(out.trajectory[1].sigma, s.sigma_min);
    }

    #[test]
    fn sampler_reports_divergence_step() {
        let den = FnDenoiser::new(1, |_x: &[f64], s| if s < 10.0 { vec![f64::NAN] } else { vec![0.0] });
        let err = sample_reverse(&den, &sched(), &SamplerOptions::heun(8), Substream::new(0, 9), 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step > 0));
    }

    #[test]
    fn sampler_covariance_matches_gaussian_target() {
        let o = PosteriorOracle::new(gaussian_spec(2, 1.0, 0.0));
        let s = sched();
        let n = 10_000;
        let mut c = [0.0; 4];
        for i in 0..n {
            let x = sample_reverse(&o, &s, &SamplerOptions::heun(24), Substream::new(5, 9), i).unwrap().x;
            c[0] += x[0] * x[0];
            c[1] += x[0] * x[1];
            c[3] += x[1] * x[1];
        }
        let c: Vec<f64> = c.iter().map(|v| v / n as f64).collect();
        assert!((c[0] - 1.0).abs() < 0.05 && (c[3] - 1.0).abs() < 0.05 && c[1].abs() < 0.05, "{c:?}");
    }

    #[test]
    fn heun_is_second_order() {
        let o = PosteriorOracle::new(gaussian_spec(1, 1.0, 0.0));
        let s = sched();
        let run = |steps| sample_reverse(&o, &s, &SamplerOptions::heun(steps), Substream::new(1, 9), 3).unwrap().x[0];
        let reference = run(1024);
        let e1 = (run(16) - reference).abs();
        let e2 = (run(32) - reference).abs();
        assert!(e1 >= 3.0 * e2, "errors {e1:e} vs {e2:e}");
    }

    #[test]
    fn stochastic_sampler_runs() {
        let o = PosteriorOracle::new(gaussian_spec(2, 1.0, 0.0));
        let opts = SamplerOptions {
            steps: 32,
            kind: SamplerKind::Stochastic,
            record_trajectory: false,
        };
        let out = sample_reverse(&o, &sched(), &opts, Substream::new(1, 9), 0).unwrap();
        assert!(out.x.iter().all(|v| v.is_finite() && v.abs() < 10.0));
    }
}
