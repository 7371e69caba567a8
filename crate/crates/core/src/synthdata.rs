//! Synthetic Gaussian-mixture data with a local/global covariance split.
//!
//! Each component has covariance `diag(d) + F Fᵀ` where `F = √ρ_g · G` and the
//! rows of `G` are constant over each spatial block. Patch views therefore see
//! the local diagonal part plus only the within-block slice of the global
//! factors; the cross-block correlation is visible only at full resolution.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{ensure_dim, Error, Result};
use crate::linops::{Cholesky, DenseMatrix, GridShape, LinearMap, ViewKind, ViewMeta, ViewOperator};
use crate::rng::{fill_normal, Substream};

/// Largest tolerated probability of a coordinate leaving `[-U, U]`.
pub const MAX_TAIL_MASS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Covariance {
    /// `diag(diag) + factors · factorsᵀ`; `factors` is `m x r`.
    DiagLowRank {
        diag: Vec<f64>,
        factors: Option<DenseMatrix>,
    },
    Dense(DenseMatrix),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::DiagLowRank { diag, .. } => diag.len(),
            Covariance::Dense(d) => d.rows,
        }
    }

    /// Marginal variance of coordinate `j`.
    pub fn variance(&self, j: usize) -> f64 {
        match self {
            Covariance::DiagLowRank { diag, factors } => {
                diag[j] + factors.as_ref().map_or(0.0, |f| f.row(j).iter().map(|v| v * v).sum())
            }
            Covariance::Dense(d) => d.get(j, j),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Covariance::DiagLowRank { diag, factors } => {
                let mut d = DenseMatrix::diag(diag);
                if let Some(f) = factors {
                    let fft = f.matmul(&f.transpose()).expect("factor shapes agree");
                    d = d.add(&fft).expect("same shape");
                }
                d
            }
            Covariance::Dense(d) => d.clone(),
        }
    }

    fn pushforward(&self, a: &LinearMap) -> Covariance {
        if let (Covariance::DiagLowRank { diag, factors }, LinearMap::Sparse(s)) = (self, a) {
            if s.has_disjoint_rows() {
                let new_diag = (0..s.out_dim)
                    .map(|r| s.row(r).map(|(i, w)| w * w * diag[i]).sum())
                    .collect();
                let new_factors = factors.as_ref().map(|f| {
                    let mut out = DenseMatrix::zeros(s.out_dim, f.cols);
                    for r in 0..s.out_dim {
                        for (i, w) in s.row(r) {
                            for c in 0..f.cols {
                                out.values[r * f.cols + c] += w * f.get(i, c);
                            }
                        }
                    }
                    out
                });
                return Covariance::DiagLowRank {
                    diag: new_diag,
                    factors: new_factors,
                };
            }
        }
        let a = a.to_dense();
        let cov = a
            .matmul(&self.to_dense())
            .and_then(|m| m.matmul(&a.transpose()))
            .expect("pushforward shapes agree");
        Covariance::Dense(cov)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl MixtureComponent {
    /// Component with covariance `diag(diag) + ρ_g · G Gᵀ`.
    pub fn diag_low_rank(
        weight: f64,
        mean: Vec<f64>,
        diag: Vec<f64>,
        global_factors: Option<DenseMatrix>,
        global_strength: f64,
    ) -> Self {
        let factors = global_factors
            .filter(|_| global_strength > 0.0)
            .map(|g| g.scale(global_strength.sqrt()));
        Self {
            weight,
            mean,
            cov: Covariance::DiagLowRank { diag, factors },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub id: String,
    pub m: usize,
    pub grid: GridShape,
    /// Entrywise bound `U` on clean samples.
    pub bound: f64,
    pub components: Vec<MixtureComponent>,
    pub global_rank: usize,
    pub global_strength: f64,
    pub seed: u64,
}

fn normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

impl DataSpec {
    /// Builds a spec and checks every invariant, including the tail-mass
    /// condition that makes clamping to `[-U, U]` negligible.
    pub fn new(
        id: impl Into<String>,
        grid: GridShape,
        bound: f64,
        components: Vec<MixtureComponent>,
        global_rank: usize,
        global_strength: f64,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            id: id.into(),
            m: grid.dim(),
            grid,
            bound,
            components,
            global_rank,
            global_strength,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::Config(format!("bound U must be positive, got {}", self.bound)));
        }
        if !(self.global_strength >= 0.0) {
            return Err(Error::Config("global strength must be nonnegative".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 || self.components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::Config(format!("mixture weights must sum to 1, got {total}")));
        }
        for (k, c) in self.components.iter().enumerate() {
            ensure_dim(self.m, c.mean.len(), "component mean")?;
            ensure_dim(self.m, c.cov.dim(), "component covariance")?;
            if let Some(j) = c.mean.iter().position(|v| v.abs() > 0.8 * self.bound) {
                return Err(Error::Config(format!(
                    "component {k} mean[{j}] = {} exceeds 0.8·U = {}",
                    c.mean[j],
                    0.8 * self.bound
                )));
            }
            match &c.cov {
                Covariance::DiagLowRank { diag, factors } => {
                    if diag.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
                        return Err(Error::Config(format!(
                            "component {k} diagonal must be nonnegative and finite"
                        )));
                    }
                    if let Some(f) = factors {
                        ensure_dim(self.m, f.rows, "global factor rows")?;
                        if f.cols > self.global_rank {
                            return Err(Error::Config(format!(
                                "component {k} has {} global factors, rank limit is {}",
                                f.cols, self.global_rank
                            )));
                        }
                    }
                }
                Covariance::Dense(d) => {
                    let mut jittered = d.clone();
                    jittered.add_diag(1e-10 * (1.0 + d.trace().abs()));
                    Cholesky::factor(&jittered).map_err(|_| {
                        Error::Config(format!("component {k} covariance is not positive semidefinite"))
                    })?;
                }
            }
        }
        for j in 0..self.m {
            let mass: f64 = self
                .components
                .iter()
                .map(|c| {
                    let s = c.cov.variance(j).sqrt();
                    if s == 0.0 {
                        return 0.0;
                    }
                    let mu = c.mean[j];
                    c.weight * (normal_tail((self.bound - mu) / s) + normal_tail((self.bound + mu) / s))
                })
                .sum();
            if mass > MAX_TAIL_MASS {
                return Err(Error::Config(format!(
                    "coordinate {j} has probability {mass:e} outside [-U, U]; shrink variances or raise U"
                )));
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for c in &self.components {
            for (o, v) in out.iter_mut().zip(&c.mean) {
                *o += c.weight * v;
            }
        }
        out
    }

    /// Mixture covariance `Σ_k π_k (Σ_k + μ_k μ_kᵀ) − μ μᵀ`.
    pub fn covariance(&self) -> DenseMatrix {
        let mu = self.mean();
        let mut out = DenseMatrix::zeros(self.m, self.m);
        for c in &self.components {
            let mut second = c.cov.to_dense();
            for i in 0..self.m {
                for j in 0..self.m {
                    second.values[i * self.m + j] += c.mean[i] * c.mean[j];
                }
            }
            out = out.add(&second.scale(c.weight)).expect("same shape");
        }
        for i in 0..self.m {
            for j in 0..self.m {
                out.values[i * self.m + j] -= mu[i] * mu[j];
            }
        }
        out
    }

    /// Average per-coordinate standard deviation of the data around zero.
    pub fn data_std(&self) -> f64 {
        let mut second = 0.0;
        for c in &self.components {
            for j in 0..self.m {
                second += c.weight * (c.cov.variance(j) + c.mean[j] * c.mean[j]);
            }
        }
        (second / self.m as f64).sqrt()
    }

    /// Draws one unclamped sample from the mixture.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let mut x = c.mean.clone();
        match &c.cov {
            Covariance::DiagLowRank { diag, factors } => {
                let mut z = vec![0.0; self.m];
                fill_normal(rng, &mut z);
                for j in 0..self.m {
                    x[j] += diag[j].sqrt() * z[j];
                }
                if let Some(f) = factors {
                    let mut w = vec![0.0; f.cols];
                    fill_normal(rng, &mut w);
                    for (j, xj) in x.iter_mut().enumerate() {
                        *xj += crate::linops::dot(f.row(j), &w);
                    }
                }
            }
            Covariance::Dense(d) => {
                let mut jittered = d.clone();
                jittered.add_diag(1e-12 * (1.0 + d.trace().abs()));
                let chol = Cholesky::factor(&jittered).expect("validated covariance");
                let mut z = vec![0.0; self.m];
                fill_normal(rng, &mut z);
                for (xj, v) in x.iter_mut().zip(chol.lower_mul(&z)) {
                    *xj += v;
                }
            }
        }
        x
    }
}

/// Parameters of the default synthetic family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskSpecParams {
    pub grid: GridShape,
    /// Side of the square blocks over which global factors are constant.
    pub block: usize,
    pub components: usize,
    pub global_rank: usize,
    pub global_strength: f64,
    pub bound: f64,
    pub mean_amplitude: f64,
    pub local_var_min: f64,
    pub local_var_max: f64,
    pub seed: u64,
}

impl DeskSpecParams {
    pub fn new(grid: GridShape, block: usize, global_strength: f64, seed: u64) -> Self {
        Self {
            grid,
            block,
            components: 2,
            global_rank: 4,
            global_strength,
            bound: 4.0,
            mean_amplitude: 0.5,
            local_var_min: 0.04,
            local_var_max: 0.09,
            seed,
        }
    }
}

/// Builds the default mixture: smooth random means, per-pixel local
/// variances, and unit-norm block-constant global factors.
pub fn desk_spec(p: &DeskSpecParams) -> Result<DataSpec> {
    let grid = p.grid;
    if p.block == 0 || grid.height % p.block != 0 || grid.width % p.block != 0 {
        return Err(Error::Config(format!(
            "block size {} must divide the {}x{} grid",
            p.block, grid.height, grid.width
        )));
    }
    if p.components == 0 {
        return Err(Error::Config("need at least one component".into()));
    }
    let m = grid.dim();
    let blocks_w = grid.width / p.block;
    let n_blocks = (grid.height / p.block) * blocks_w;
    let stream = Substream::new(p.seed, crate::rng::streams::SPEC);
    let components = (0..p.components)
        .map(|k| {
            let mut rng = stream.rng(k as u64);
            let freqs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.5..2.0),
                        rng.random_range(0.5..2.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let mut mean = vec![0.0; m];
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let y = r as f64 / grid.height as f64;
                    let x = c as f64 / grid.width as f64;
                    let v: f64 = freqs
                        .iter()
                        .map(|(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                        .sum();
                    for ch in 0..grid.channels {
                        mean[grid.index(r, c, ch)] = v;
                    }
                }
            }
            let peak = mean.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
            mean.iter_mut().for_each(|v| *v *= p.mean_amplitude / peak);
            let diag: Vec<f64> = (0..m)
                .map(|_| rng.random_range(p.local_var_min..=p.local_var_max))
                .collect();
            let factors = (p.global_rank > 0).then(|| {
                let mut per_block = Vec::with_capacity(n_blocks);
                for _ in 0..n_blocks {
                    let mut h = vec![0.0; p.global_rank];
                    fill_normal(&mut rng, &mut h);
                    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    h.iter_mut().for_each(|v| *v /= n);
                    per_block.push(h);
                }
                let mut g = DenseMatrix::zeros(m, p.global_rank);
                for r in 0..grid.height {
                    for c in 0..grid.width {
                        let b = (r / p.block) * blocks_w + c / p.block;
                        for ch in 0..grid.channels {
                            let j = grid.index(r, c, ch);
                            g.values[j * p.global_rank..(j + 1) * p.global_rank]
                                .copy_from_slice(&per_block[b]);
                        }
                    }
                }
                g
            });
            MixtureComponent::diag_low_rank(
                1.0 / p.components as f64,
                mean,
                diag,
                factors,
                p.global_strength,
            )
        })
        .collect();
    DataSpec::new(
        format!("desk-{}x{}-rho{}-s{}", grid.height, grid.width, p.global_strength, p.seed),
        grid,
        p.bound,
        components,
        p.global_rank,
        p.global_strength,
        p.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    Full,
    View { view_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec_id: String,
    pub kind: DatasetKind,
    pub dim: usize,
    pub provenance: Substream,
    data: Vec<f64>,
}

impl Dataset {
    pub fn from_flat(
        spec_id: impl Into<String>,
        kind: DatasetKind,
        dim: usize,
        data: Vec<f64>,
        provenance: Substream,
    ) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values cannot form samples of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self {
            spec_id: spec_id.into(),
            kind,
            dim,
            provenance,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn is_full(&self) -> bool {
        self.kind == DatasetKind::Full
    }

    /// Concatenates datasets of the same kind and dimension.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        for p in parts {
            ensure_dim(first.dim, p.dim, "concatenated dataset")?;
            data.extend_from_slice(&p.data);
        }
        Dataset::from_flat(first.spec_id.clone(), first.kind.clone(), first.dim, data, first.provenance)
    }
}

/// `n` iid clamped draws; sample `i` uses draw `i` of `stream`.
pub fn sample_dataset(spec: &DataSpec, n: usize, stream: Substream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let u = spec.bound;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = spec.draw(&mut stream.rng(i as u64));
            x.iter_mut().for_each(|v| *v = v.clamp(-u, u));
            x
        })
        .collect();
    Dataset::from_flat(spec.id.clone(), DatasetKind::Full, spec.m, rows.concat(), stream)
}

/// Projects every sample through `op` and shuffles the result so that no
/// ordering ties views back to their source images.
pub fn project_dataset(ds: &Dataset, op: &ViewOperator, shuffle: Substream) -> Result<Dataset> {
    project_dataset_group(ds, std::slice::from_ref(op), &op.id, shuffle)
}

/// Pools the projections of every sample through all `ops` into one view
/// dataset (e.g. all patch locations feeding a single patch denoiser).
pub fn project_dataset_group(
    ds: &Dataset,
    ops: &[ViewOperator],
    view_id: &str,
    shuffle: Substream,
) -> Result<Dataset> {
    if !ds.is_full() {
        return Err(Error::Config("only full-resolution datasets can be projected".into()));
    }
    let first = ops.first().ok_or_else(|| Error::Config("no operators to project through".into()))?;
    let m_i = first.m_i();
    for op in ops {
        ensure_dim(ds.dim, op.m(), "operator input")?;
        ensure_dim(m_i, op.m_i(), "grouped operator view dimension")?;
    }
    let mut views: Vec<Vec<f64>> = Vec::with_capacity(ds.len() * ops.len());
    for x in ds.samples() {
        for op in ops {
            views.push(op.apply_a(x)?);
        }
    }
    views.shuffle(&mut shuffle.rng(0));
    Dataset::from_flat(
        ds.spec_id.clone(),
        DatasetKind::View {
            view_id: view_id.to_string(),
        },
        m_i,
        views.concat(),
        ds.provenance,
    )
}

/// Exact pushforward of the mixture through `A`.
pub fn view_spec(spec: &DataSpec, op: &ViewOperator) -> Result<DataSpec> {
    ensure_dim(spec.m, op.m(), "operator input")?;
    let grid = match (&op.meta, op.kind) {
        (ViewMeta::Patch { grid, patch_h, patch_w, .. }, ViewKind::Patch) => GridShape {
            height: *patch_h,
            width: *patch_w,
            channels: grid.channels,
        },
        (ViewMeta::Downsample { grid, factor }, ViewKind::Downsample) => GridShape {
            height: grid.height / factor,
            width: grid.width / factor,
            channels: grid.channels,
        },
        _ => GridShape::new(op.m_i(), 1, 1)?,
    };
    let components = spec
        .components
        .iter()
        .map(|c| MixtureComponent {
            weight: c.weight,
            mean: op.apply_a(&c.mean).expect("dimension checked"),
            cov: c.cov.pushforward(op.a_map()),
        })
        .collect();
    Ok(DataSpec {
        id: format!("{}|{}", spec.id, op.id),
        m: op.m_i(),
        grid,
        bound: spec.bound,
        components,
        global_rank: spec.global_rank,
        global_strength: spec.global_strength,
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_downsample_operator, make_patch_operator, patch_tiling};
    use approx::assert_abs_diff_eq;

    fn point_mass(m: usize, value: f64) -> DataSpec {
        DataSpec::new(
            "point",
            GridShape::new(m, 1, 1).unwrap(),
            1.0,
            vec![MixtureComponent::diag_low_rank(1.0, vec![value; m], vec![0.0; m], None, 0.0)],
            0,
            0.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_point_mass_samples() {
        let ds = sample_dataset(&point_mass(4, 0.0), 3, Substream::new(1, 1)).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_mixture_sample_mean_is_near_zero() {
        let m = 4;
        let comps = [-1.0, 1.0]
            .iter()
            .map(|s| MixtureComponent::diag_low_rank(0.5, vec![*s; m], vec![0.01; m], None, 0.0))
            .collect();
        let spec = DataSpec::new("pm", GridShape::new(2, 2, 1).unwrap(), 2.0, comps, 0, 0.0, 0).unwrap();
        let n = 100_000;
        let ds = sample_dataset(&spec, n, Substream::new(7, 1)).unwrap();
        let mut mean = vec![0.0; m];
        for x in ds.samples() {
            for (a, b) in mean.iter_mut().zip(x) {
                *a += b / n as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 3.0 * (m as f64 / n as f64).sqrt(), "mean norm {norm}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(8), 4, 0.05, 3)).unwrap();
        let a = sample_dataset(&spec, 20, Substream::new(3, 1)).unwrap();
        let b = sample_dataset(&spec, 20, Substream::new(3, 1)).unwrap();
        let bits = |d: &Dataset| d.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = sample_dataset(&spec, 20, Substream::new(3, 2)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn samples_are_bounded() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(16), 8, 0.1, 11)).unwrap();
        let ds = sample_dataset(&spec, 200, Substream::new(1, 1)).unwrap();
        assert!(ds.flat().iter().all(|v| v.abs() <= spec.bound));
    }

    #[test]
    fn desk_default_shape() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(32), 8, 0.1, 0)).unwrap();
        assert_eq!(spec.m, 1024);
        assert_eq!(spec.components.len(), 2);
        for c in &spec.components {
            assert!(c.mean.iter().all(|v| v.abs() <= 0.8 * spec.bound));
        }
    }

    #[test]
    fn heavy_tails_are_rejected() {
        let comp = MixtureComponent::diag_low_rank(1.0, vec![0.0; 2], vec![1.0; 2], None, 0.0);
        let err = DataSpec::new("wide", GridShape::new(2, 1, 1).unwrap(), 1.0, vec![comp], 0, 0.0, 0)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let comp = MixtureComponent::diag_low_rank(0.7, vec![0.0; 2], vec![0.01; 2], None, 0.0);
        assert!(DataSpec::new("w", GridShape::new(2, 1, 1).unwrap(), 1.0, vec![comp], 0, 0.0, 0).is_err());
    }

    #[test]
    fn zero_global_strength_has_no_cross_block_covariance() {
        let p = DeskSpecParams::new(GridShape::square(8), 4, 0.0, 5);
        let spec = desk_spec(&p).unwrap();
        for c in &spec.components {
            let d = c.cov.to_dense();
            for i in 0..spec.m {
                for j in 0..spec.m {
                    if i != j {
                        assert_eq!(d.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_projection_keeps_samples() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(4), 2, 0.05, 1)).unwrap();
        let ds = sample_dataset(&spec, 30, Substream::new(1, 1)).unwrap();
        let id = make_patch_operator(spec.grid, 0, 0, 4, 4).unwrap();
        let view = project_dataset(&ds, &id, Substream::new(1, 4)).unwrap();
        let key = |d: &Dataset| {
            let mut v: Vec<Vec<u64>> = d.samples().map(|s| s.iter().map(|x| x.to_bits()).collect()).collect();
            v.sort();
            v
        };
        assert_eq!(key(&view), key(&ds));
        assert_eq!(
            view.kind,
            DatasetKind::View {
                view_id: id.id.clone()
            }
        );
        let vspec = view_spec(&spec, &id).unwrap();
        assert_eq!(vspec.components, spec.components);
    }

    #[test]
    fn tiling_multiplies_sample_count() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(32), 8, 0.05, 1)).unwrap();
        let ds = sample_dataset(&spec, 5, Substream::new(1, 1)).unwrap();
        let ops = patch_tiling(spec.grid, 8).unwrap();
        let view = project_dataset_group(&ds, &ops, "patch8", Substream::new(1, 4)).unwrap();
        assert_eq!(view.len(), 16 * 5);
        assert_eq!(view.dim, 64);
    }

    #[test]
    fn zero_operator_gives_zero_views() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(4), 2, 0.05, 1)).unwrap();
        let ds = sample_dataset(&spec, 10, Substream::new(1, 1)).unwrap();
        let op = crate::linops::make_general_operator(
            "zero",
            DenseMatrix::zeros(2, 16),
            DenseMatrix::zeros(16, 2),
        )
        .unwrap();
        let view = project_dataset(&ds, &op, Substream::new(1, 4)).unwrap();
        assert!(view.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn patch_pushforward_selects_subvectors() {
        let comp = MixtureComponent::diag_low_rank(
            1.0,
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.01, 0.02, 0.03, 0.04],
            None,
            0.0,
        );
        let spec = DataSpec::new("d", GridShape::square(2), 2.0, vec![comp], 0, 0.0, 0).unwrap();
        let op = make_patch_operator(spec.grid, 1, 0, 1, 2).unwrap();
        let v = view_spec(&spec, &op).unwrap();
        assert_eq!(v.components[0].mean, vec![0.3, 0.4]);
        assert_eq!(
            v.components[0].cov,
            Covariance::DiagLowRank {
                diag: vec![0.03, 0.04],
                factors: None
            }
        );
    }

    #[test]
    fn downsample_pushforward_of_identity_covariance() {
        let comp = MixtureComponent {
            weight: 1.0,
            mean: vec![0.0; 4],
            cov: Covariance::DiagLowRank {
                diag: vec![1.0; 4],
                factors: None,
            },
        };
        let spec = DataSpec {
            id: "iso".into(),
            m: 4,
            grid: GridShape::square(2),
            bound: 10.0,
            components: vec![comp],
            global_rank: 0,
            global_strength: 0.0,
            seed: 0,
        };
        let op = make_downsample_operator(spec.grid, 2).unwrap();
        let v = view_spec(&spec, &op).unwrap();
        assert_abs_diff_eq!(v.components[0].cov.variance(0), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn pushforward_matches_dense_route() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(8), 4, 0.1, 9)).unwrap();
        let op = make_downsample_operator(spec.grid, 2).unwrap();
        let v = view_spec(&spec, &op).unwrap();
        let a = op.dense_a();
        for (c, vc) in spec.components.iter().zip(&v.components) {
            let dense = a.matmul(&c.cov.to_dense()).unwrap().matmul(&a.transpose()).unwrap();
            for (x, y) in dense.values.iter().zip(&vc.cov.to_dense().values) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn empirical_view_moments_match_pushforward() {
        let spec = desk_spec(&DeskSpecParams::new(GridShape::square(4), 2, 0.1, 2)).unwrap();
        let op = make_downsample_operator(spec.grid, 2).unwrap();
        let n = 100_000;
        let ds = sample_dataset(&spec, n, Substream::new(2, 1)).unwrap();
        let view = project_dataset(&ds, &op, Substream::new(2, 4)).unwrap();
        let vs = view_spec(&spec, &op).unwrap();
        let mean = vs.mean();
        let cov = vs.covariance();
        let d = vs.m;
        let mut emp_mean = vec![0.0; d];
        for x in view.samples() {
            for (a, b) in emp_mean.iter_mut().zip(x) {
                *a += b / n as f64;
            }
        }
        for j in 0..d {
            let se = (cov.get(j, j) / n as f64).sqrt();
            assert!((emp_mean[j] - mean[j]).abs() < 4.0 * se, "mean {j}");
        }
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                let mut acc2 = 0.0;
                for x in view.samples() {
                    let p = (x[i] - mean[i]) * (x[j] - mean[j]);
                    acc += p;
                    acc2 += p * p;
                }
                let e = acc / n as f64;
                let se = ((acc2 / n as f64 - e * e) / n as f64).sqrt();
                assert!((e - cov.get(i, j)).abs() < 4.0 * se, "cov ({i},{j}): {e} vs {}", cov.get(i, j));
            }
        }
    }
}
