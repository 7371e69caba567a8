//! Closed-form generalization-bound arithmetic and empirical Rademacher
//! complexity over finite hypothesis sets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionSchedule, PosteriorOracle};
use crate::error::{Error, Result};
use crate::neural::{DenoiserNet, MlpParams};
use crate::rng::{fill_normal, Substream};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoveringParams {
    pub l_bar: f64,
    /// Largest per-layer parameter count.
    pub w: f64,
    pub c: f64,
    pub epsilon: f64,
    pub n: f64,
}

/// `L̄·W·ln(1 + L̄·C·N/ε)`.
pub fn log_covering_bound(p: &CoveringParams) -> Result<f64> {
    for (name, v) in [("l_bar", p.l_bar), ("w", p.w), ("c", p.c), ("epsilon", p.epsilon), ("n", p.n)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("covering parameter {name} must be positive and finite, got {v}")));
        }
    }
    Ok(p.l_bar * p.w * (p.l_bar * p.c * p.n / p.epsilon).ln_1p())
}

/// Scalars entering the bound. The slack terms may be zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub n: f64,
    pub k: f64,
    pub m: f64,
    pub u: f64,
    pub delta_b: f64,
    pub delta_v: f64,
    pub rho: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// `E[V(S₀)]`.
    pub ev: f64,
    pub rademacher: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("n", self.n),
            ("k", self.k),
            ("m", self.m),
            ("u", self.u),
            ("delta_b", self.delta_b),
            ("delta_v", self.delta_v),
            ("rho", self.rho),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
            ("ev", self.ev),
            ("rademacher", self.rademacher),
        ];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite")));
            }
        }
        if self.n < 1.0 || self.k < 1.0 {
            return Err(Error::Domain("N and K must be at least 1".into()));
        }
        if !(self.m > 0.0 && self.u > 0.0) {
            return Err(Error::Domain("m and U must be positive".into()));
        }
        for (name, v) in &all[4..] {
            if *v < 0.0 {
                return Err(Error::Domain(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// `(64 + 16K)·m²·U⁴`.
    fn azuma_scale(&self) -> f64 {
        (64.0 + 16.0 * self.k) * self.m * self.m * self.u.powi(4)
    }
}

fn clamp_prob(log_p: f64) -> f64 {
    if log_p >= 0.0 {
        1.0
    } else {
        log_p.exp()
    }
}

/// `min(1, exp(−2Δv²NK / ((64+16K)m²U⁴)))`.
pub fn prob_event_e1(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(clamp_prob(-2.0 * b.delta_v * b.delta_v * b.n * b.k / b.azuma_scale()))
}

/// `min(1, N_cover · exp(−2ρ²NK / ((64+16K)m²U⁴)))` with `ln N_cover` given.
pub fn prob_event_e2_log_cover(b: &BoundInputs, log_cover: f64) -> Result<f64> {
    b.validate()?;
    if !(log_cover >= 0.0) {
        return Err(Error::Domain(format!("log covering number must be nonnegative, got {log_cover}")));
    }
    Ok(clamp_prob(log_cover - 2.0 * b.rho * b.rho * b.n * b.k / b.azuma_scale()))
}

pub fn prob_event_e2(b: &BoundInputs, cover: &CoveringParams) -> Result<f64> {
    prob_event_e2_log_cover(b, log_covering_bound(cover)?)
}

/// `min(1, exp(−γ²N / (32m²U⁴(1 + 1/K))))`.
pub fn prob_event_e3(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let denom = 32.0 * b.m * b.m * b.u.powi(4) * (1.0 + 1.0 / b.k);
    Ok(clamp_prob(-b.gamma * b.gamma * b.n / denom))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundOutput {
    pub r_bound: f64,
    pub failure_prob: f64,
    pub p_e1: f64,
    pub p_e2: f64,
    pub p_e3: f64,
}

/// `(√((√(EV+Δb²+Δv²)+ε)² + ρ + 2𝕽 + γ) + ε)² + 2𝕽 + γ − EV`.
pub fn r_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let inner = (b.ev + b.delta_b * b.delta_b + b.delta_v * b.delta_v).sqrt() + b.epsilon;
    let radicand = inner * inner + b.rho + 2.0 * b.rademacher + b.gamma;
    assert!(radicand >= 0.0, "radicand is a sum of nonnegative terms");
    let outer = radicand.sqrt() + b.epsilon;
    Ok(outer * outer + 2.0 * b.rademacher + b.gamma - b.ev)
}

/// The bound and the total probability of the excluded events.
pub fn generalization_bound(b: &BoundInputs, log_cover: f64) -> Result<BoundOutput> {
    let r = r_bound(b)?;
    let (p1, p2, p3) = (prob_event_e1(b)?, prob_event_e2_log_cover(b, log_cover)?, prob_event_e3(b)?);
    Ok(BoundOutput {
        r_bound: r,
        failure_prob: (p1 + p2 + p3).min(1.0),
        p_e1: p1,
        p_e2: p2,
        p_e3: p3,
    })
}

/// A named input of [`BoundInputs`] for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundParam {
    N,
    K,
    M,
    U,
    DeltaB,
    DeltaV,
    Rho,
    Gamma,
    Epsilon,
    Ev,
    Rademacher,
}

impl BoundParam {
    pub fn set(self, b: &mut BoundInputs, v: f64) {
        match self {
            BoundParam::N => b.n = v,
            BoundParam::K => b.k = v,
            BoundParam::M => b.m = v,
            BoundParam::U => b.u = v,
            BoundParam::DeltaB => b.delta_b = v,
            BoundParam::DeltaV => b.delta_v = v,
            BoundParam::Rho => b.rho = v,
            BoundParam::Gamma => b.gamma = v,
            BoundParam::Epsilon => b.epsilon = v,
            BoundParam::Ev => b.ev = v,
            BoundParam::Rademacher => b.rademacher = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub inputs: BoundInputs,
    pub log_cover: f64,
    pub output: BoundOutput,
}

pub fn sweep(base: &BoundInputs, log_cover: f64, param: BoundParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&v| {
            let mut b = *base;
            param.set(&mut b, v);
            Ok(SweepRow {
                inputs: b,
                log_cover,
                output: generalization_bound(&b, log_cover)?,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "n,k,m,u,delta_b,delta_v,rho,gamma,epsilon,ev,rademacher,log_cover,r_bound,p_e1,p_e2,p_e3,p_fail";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let b = &r.inputs;
        let o = &r.output;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            b.n, b.k, b.m, b.u, b.delta_b, b.delta_v, b.rho, b.gamma, b.epsilon, b.ev, b.rademacher, r.log_cover,
            o.r_bound, o.p_e1, o.p_e2, o.p_e3, o.failure_prob
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// `losses[h][j]`: loss of hypothesis `h` on point `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl LossMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Config("hypothesis set is empty".into()))?;
        let n = first.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("every hypothesis needs a loss for every point".into()));
        }
        Ok(Self { rows })
    }

    pub fn points(&self) -> usize {
        self.rows[0].len()
    }

    /// `max_h (1/NK) Σ_j s_j ℓ_hj`.
    pub fn sup_correlation(&self, signs: &[f64]) -> f64 {
        let n = self.points() as f64;
        self.rows
            .iter()
            .map(|r| r.iter().zip(signs).map(|(l, s)| l * s).sum::<f64>() / n)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Monte-Carlo average over random sign vectors.
    pub fn rademacher(&self, trials: usize, stream: Substream) -> Result<Estimate> {
        if trials == 0 {
            return Err(Error::Config("need at least one Rademacher trial".into()));
        }
        let n = self.points();
        let vals: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream.rng(t as u64);
                let signs: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                self.sup_correlation(&signs)
            })
            .collect();
        Ok(mean_stderr(&vals))
    }

    /// Exact expectation over all `2^NK` sign vectors.
    pub fn rademacher_exact(&self) -> Result<f64> {
        let n = self.points();
        if n > 24 {
            return Err(Error::Config(format!("exhaustive enumeration over {n} points is too large")));
        }
        let total: f64 = (0u64..1 << n)
            .map(|mask| {
                let signs: Vec<f64> = (0..n).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect();
                self.sup_correlation(&signs)
            })
            .sum();
        Ok(total / (1u64 << n) as f64)
    }
}

pub fn mean_stderr(vals: &[f64]) -> Estimate {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean,
        stderr: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error against the clean sample.
    L,
    /// Squared error against the posterior mean.
    R,
}

/// A finite stand-in for the parameter space: training snapshots plus
/// random perturbations of a base network.
#[derive(Debug, Clone)]
pub struct FiniteHypothesisGrid {
    pub members: Vec<DenoiserNet>,
    pub provenance: String,
}

impl FiniteHypothesisGrid {
    pub fn new(members: Vec<DenoiserNet>, provenance: impl Into<String>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("hypothesis grid is empty".into()))?;
        if members.iter().any(|m| m.params.sizes != first.params.sizes) {
            return Err(Error::Shape("all grid members must share one topology".into()));
        }
        Ok(Self {
            members,
            provenance: provenance.into(),
        })
    }

    /// `base` plus `count` Gaussian perturbations of relative size `scale`.
    pub fn with_perturbations(base: &DenoiserNet, count: usize, scale: f64, stream: Substream) -> Result<Self> {
        let flat = base.params.to_flat();
        let rms = (flat.iter().map(|v| v * v).sum::<f64>() / flat.len() as f64).sqrt();
        let mut members = vec![base.clone()];
        for c in 0..count {
            let mut noise = vec![0.0; flat.len()];
            fill_normal(&mut stream.rng(c as u64), &mut noise);
            let perturbed: Vec<f64> = flat.iter().zip(&noise).map(|(a, z)| a + scale * rms * z).collect();
            let mut p: MlpParams = base.params.clone();
            p.set_flat(&perturbed)?;
            members.push(DenoiserNet::from_params(p, base.precond, base.bound)?);
        }
        Self::new(members, format!("base + {count} perturbations at relative scale {scale}"))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Losses on `K` noisy copies of every sample of `s0`.
    pub fn loss_matrix(
        &self,
        s0: &Dataset,
        schedule: &DiffusionSchedule,
        k: usize,
        kind: LossKind,
        oracle: Option<&PosteriorOracle>,
        stream: Substream,
    ) -> Result<LossMatrix> {
        if kind == LossKind::R && oracle.is_none() {
            return Err(Error::Config("R-type losses need a posterior oracle".into()));
        }
        let m = s0.dim;
        let mut xs = Vec::with_capacity(s0.len() * k * m);
        let mut sigmas = Vec::with_capacity(s0.len() * k);
        let mut targets = Vec::with_capacity(s0.len() * k * m);
        let mut eps = vec![0.0; m];
        for (n, x0) in s0.samples().enumerate() {
            for d in 0..k {
                let mut rng = stream.rng((n * k + d) as u64);
                let sigma = schedule.sigma_from_uniform(1.0 - rng.random::<f64>());
                fill_normal(&mut rng, &mut eps);
                let xt: Vec<f64> = x0.iter().zip(&eps).map(|(a, e)| a + sigma * e).collect();
                match (kind, oracle) {
                    (LossKind::R, Some(o)) => targets.extend(o.posterior_mean(&xt, sigma)?),
                    _ => targets.extend_from_slice(x0),
                }
                xs.extend(xt);
                sigmas.push(sigma);
            }
        }
        let rows = self
            .members
            .iter()
            .map(|net| {
                let out = net.denoise_batch(&xs, &sigmas)?;
                Ok(out
                    .chunks_exact(m)
                    .zip(targets.chunks_exact(m))
                    .map(|(f, t)| f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        LossMatrix::new(rows)
    }
}

/// Empirical Rademacher complexity of `grid` on `s0`.
pub fn empirical_rademacher(
    grid: &FiniteHypothesisGrid,
    s0: &Dataset,
    schedule: &DiffusionSchedule,
    k: usize,
    kind: LossKind,
    oracle: Option<&PosteriorOracle>,
    trials: usize,
    stream: Substream,
) -> Result<Estimate> {
    grid.loss_matrix(s0, schedule, k, kind, oracle, stream.child(0))?
        .rademacher(trials, stream.child(1))
}
