//! Partial-view operators and the small dense linear-algebra kernel.
//!
//! A view operator pairs a projection `A: R^m -> R^{m_i}` with a combiner
//! `B: R^{m_i} -> R^m`. Patch and downsample operators are stored in a
//! compressed sparse-row form; general operators carry dense matrices.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn square(side: usize) -> Self {
        Self {
            height: side,
            width: side,
            channels: 1,
        }
    }

    /// Flat sample dimension `m`.
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Row-major, channel-interleaved flat index.
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        ensure_dim(rows * cols, values.len(), "matrix values")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "matrix entry ({}, {}) is not finite",
                i / cols,
                i % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in d.iter().enumerate() {
            m.values[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.cols, x.len(), "matvec input")?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `Mᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.rows, y.len(), "transposed matvec input")?;
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            axpy(*yr, self.row(r), &mut out);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        ensure_dim(self.cols, other.rows, "matmul inner dimension")?;
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.values[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a != 0.0 {
                    axpy(a, other.row(k), orow);
                }
            }
        }
        Ok(out)
    }

    /// `MᵀM`.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                for j in i..n {
                    g.values[i * n + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.values[i * n + j] = g.values[j * n + i];
            }
        }
        g
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_diag(&mut self, d: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.values[i * self.cols + i] += d;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower-triangular Cholesky factor `L` with `LLᵀ = M`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!(
                "Cholesky needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = m.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {j} = {d:e})"
                )));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L z = b`.
    pub fn forward_sub(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[i * n + k] * z[k];
            }
            z[i] = s / self.l[i * n + i];
        }
        z
    }

    /// Solves `Lᵀ x = z`.
    pub fn backward_sub(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.n, b.len(), "Cholesky solve rhs")?;
        Ok(self.backward_sub(&self.forward_sub(b)))
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    /// `L z` for a standard-normal `z` gives a draw with covariance `M`.
    pub fn lower_mul(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| (0..=i).map(|k| self.l[i * n + k] * z[k]).sum())
            .collect()
    }
}

/// `argmin_w ‖M w − y‖² + ridge·‖w‖²` via the normal equations.
pub fn solve_least_squares(m: &DenseMatrix, y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    ensure_dim(m.rows, y.len(), "least-squares target")?;
    solve_normal_equations(&m.gram(), &m.matvec_t(y)?, ridge)
}

/// Solves `(G + ridge·I) w = rhs` for an accumulated Gram matrix `G = MᵀM`
/// and `rhs = Mᵀy`.
pub fn solve_normal_equations(gram: &DenseMatrix, rhs: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::Domain(format!("ridge must be nonnegative, got {ridge}")));
    }
    ensure_dim(gram.rows, rhs.len(), "normal-equation right-hand side")?;
    let mut normal = gram.clone();
    normal.add_diag(ridge);
    let chol = Cholesky::factor(&normal).map_err(|e| match e {
        Error::Numerical(msg) if ridge == 0.0 => Error::Numerical(format!(
            "singular normal equations ({msg}); use a positive ridge"
        )),
        other => other,
    })?;
    chol.solve(rhs)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and the matching eigenvectors as columns.
pub fn symmetric_eigen(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if !m.is_square() {
        return Err(Error::Shape("eigen-decomposition needs a square matrix".into()));
    }
    let n = m.rows;
    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = a.values.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = DenseMatrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, new, v.get(k, old));
        }
    }
    Ok((values, vecs))
}

/// Compressed sparse-row linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub out_dim: usize,
    pub in_dim: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn from_rows(in_dim: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(i, w) in row {
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            out_dim: rows.len(),
            in_dim,
            offsets,
            indices,
            weights,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).map(|(i, w)| w * x[i]).sum();
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.out_dim, self.in_dim);
        for r in 0..self.out_dim {
            for (i, w) in self.row(r) {
                d.values[r * self.in_dim + i] += w;
            }
        }
        d
    }

    /// True when no input coordinate feeds more than one output row, so that
    /// `A diag(d) Aᵀ` is itself diagonal.
    pub fn has_disjoint_rows(&self) -> bool {
        let mut seen = vec![false; self.in_dim];
        for &i in &self.indices {
            if seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearMap {
    Sparse(SparseMap),
    Dense(DenseMatrix),
}

impl LinearMap {
    pub fn out_dim(&self) -> usize {
        match self {
            LinearMap::Sparse(s) => s.out_dim,
            LinearMap::Dense(d) => d.rows,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LinearMap::Sparse(s) => s.in_dim,
            LinearMap::Dense(d) => d.cols,
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            LinearMap::Sparse(s) => s.apply_into(x, out),
            LinearMap::Dense(d) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o = dot(d.row(r), x);
                }
            }
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            LinearMap::Sparse(s) => s.to_dense(),
            LinearMap::Dense(d) => d.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Patch,
    Downsample,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ViewMeta {
    Patch {
        grid: GridShape,
        origin_row: usize,
        origin_col: usize,
        patch_h: usize,
        patch_w: usize,
    },
    Downsample {
        grid: GridShape,
        factor: usize,
    },
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewOperator {
    pub id: String,
    pub kind: ViewKind,
    pub meta: ViewMeta,
    a: LinearMap,
    b: LinearMap,
}

/// Builds the `patch_h x patch_w` crop at `(origin_row, origin_col)`.
pub fn make_patch_operator(
    grid: GridShape,
    origin_row: usize,
    origin_col: usize,
    patch_h: usize,
    patch_w: usize,
) -> Result<ViewOperator> {
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::Range(format!(
            "patch size must be positive, got {patch_h}x{patch_w}"
        )));
    }
    if origin_row + patch_h > grid.height {
        return Err(Error::Range(format!(
            "patch row extent {}..{} exceeds grid height {} (origin_row = {origin_row})",
            origin_row,
            origin_row + patch_h,
            grid.height
        )));
    }
    if origin_col + patch_w > grid.width {
        return Err(Error::Range(format!(
            "patch column extent {}..{} exceeds grid width {} (origin_col = {origin_col})",
            origin_col,
            origin_col + patch_w,
            grid.width
        )));
    }
    let c = grid.channels;
    let m = grid.dim();
    let mut a_rows = Vec::with_capacity(patch_h * patch_w * c);
    for r in origin_row..origin_row + patch_h {
        for col in origin_col..origin_col + patch_w {
            for ch in 0..c {
                a_rows.push(vec![(grid.index(r, col, ch), 1.0)]);
            }
        }
    }
    let mut b_rows = vec![Vec::new(); m];
    for (view_idx, row) in a_rows.iter().enumerate() {
        b_rows[row[0].0].push((view_idx, 1.0));
    }
    let m_i = a_rows.len();
    Ok(ViewOperator {
        id: format!("patch_{origin_row}_{origin_col}_{patch_h}x{patch_w}"),
        kind: ViewKind::Patch,
        meta: ViewMeta::Patch {
            grid,
            origin_row,
            origin_col,
            patch_h,
            patch_w,
        },
        a: LinearMap::Sparse(SparseMap::from_rows(m, a_rows)),
        b: LinearMap::Sparse(SparseMap::from_rows(m_i, b_rows)),
    })
}

/// All non-overlapping `patch x patch` crops of the grid, in row-major order.
pub fn patch_tiling(grid: GridShape, patch: usize) -> Result<Vec<ViewOperator>> {
    if patch == 0 || grid.height % patch != 0 || grid.width % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} does not tile a {}x{} grid",
            grid.height, grid.width
        )));
    }
    let mut ops = Vec::new();
    for r in (0..grid.height).step_by(patch) {
        for c in (0..grid.width).step_by(patch) {
            ops.push(make_patch_operator(grid, r, c, patch, patch)?);
        }
    }
    Ok(ops)
}

/// `factor x factor` mean pooling with nearest-neighbour upsampling as `B`.
pub fn make_downsample_operator(grid: GridShape, factor: usize) -> Result<ViewOperator> {
    if factor == 0 || grid.height % factor != 0 || grid.width % factor != 0 {
        return Err(Error::Config(format!(
            "downsample factor {factor} must divide grid {}x{}",
            grid.height, grid.width
        )));
    }
    let (oh, ow, c) = (grid.height / factor, grid.width / factor, grid.channels);
    let low = GridShape {
        height: oh,
        width: ow,
        channels: c,
    };
    let w = 1.0 / (factor * factor) as f64;
    let mut a_rows = vec![Vec::with_capacity(factor * factor); low.dim()];
    let mut b_rows = vec![Vec::with_capacity(1); grid.dim()];
    for r in 0..grid.height {
        for col in 0..grid.width {
            for ch in 0..c {
                let hi = grid.index(r, col, ch);
                let lo = low.index(r / factor, col / factor, ch);
                a_rows[lo].push((hi, w));
                b_rows[hi].push((lo, 1.0));
            }
        }
    }
    Ok(ViewOperator {
        id: format!("downsample_x{factor}"),
        kind: ViewKind::Downsample,
        meta: ViewMeta::Downsample { grid, factor },
        a: LinearMap::Sparse(SparseMap::from_rows(grid.dim(), a_rows)),
        b: LinearMap::Sparse(SparseMap::from_rows(low.dim(), b_rows)),
    })
}

/// A view given by explicit dense `A` (`m_i x m`) and `B` (`m x m_i`).
pub fn make_general_operator(
    id: impl Into<String>,
    a: DenseMatrix,
    b: DenseMatrix,
) -> Result<ViewOperator> {
    if b.rows != a.cols || b.cols != a.rows {
        return Err(Error::Shape(format!(
            "combiner must be {}x{}, got {}x{}",
            a.cols, a.rows, b.rows, b.cols
        )));
    }
    if a.rows > a.cols {
        return Err(Error::Shape(format!(
            "view dimension {} exceeds sample dimension {}",
            a.rows, a.cols
        )));
    }
    Ok(ViewOperator {
        id: id.into(),
        kind: ViewKind::General,
        meta: ViewMeta::General,
        a: LinearMap::Dense(a),
        b: LinearMap::Dense(b),
    })
}

impl ViewOperator {
    /// Full-resolution dimension `m`.
    pub fn m(&self) -> usize {
        self.a.in_dim()
    }

    /// View dimension `m_i`.
    pub fn m_i(&self) -> usize {
        self.a.out_dim()
    }

    pub fn a_map(&self) -> &LinearMap {
        &self.a
    }

    pub fn b_map(&self) -> &LinearMap {
        &self.b
    }

    pub fn apply_a(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.m(), x.len(), "apply_A input")?;
        let mut out = vec![0.0; self.m_i()];
        self.a.apply_into(x, &mut out);
        Ok(out)
    }

    pub fn apply_b(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.m_i(), v.len(), "apply_B input")?;
        let mut out = vec![0.0; self.m()];
        self.b.apply_into(v, &mut out);
        Ok(out)
    }

    /// Adds `alpha · B v` into `out` without allocating.
    pub fn accumulate_b(&self, alpha: f64, v: &[f64], out: &mut [f64]) {
        match &self.b {
            LinearMap::Sparse(s) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let s: f64 = s.row(r).map(|(i, w)| w * v[i]).sum();
                    *o += alpha * s;
                }
            }
            LinearMap::Dense(d) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o += alpha * dot(d.row(r), v);
                }
            }
        }
    }

    pub fn dense_a(&self) -> DenseMatrix {
        self.a.to_dense()
    }

    pub fn dense_b(&self) -> DenseMatrix {
        self.b.to_dense()
    }

    pub fn to_doc(&self) -> OperatorDoc {
        let (a, b) = match self.kind {
            ViewKind::General => (
                Some(self.a.to_dense().values),
                Some(self.b.to_dense().values),
            ),
            _ => (None, None),
        };
        OperatorDoc {
            id: self.id.clone(),
            kind: self.kind,
            meta: self.meta.clone(),
            m: self.m(),
            m_i: self.m_i(),
            a,
            b,
        }
    }

    pub fn from_doc(doc: &OperatorDoc) -> Result<Self> {
        let mut op = match (&doc.meta, doc.kind) {
            (
                ViewMeta::Patch {
                    grid,
                    origin_row,
                    origin_col,
                    patch_h,
                    patch_w,
                },
                ViewKind::Patch,
            ) => make_patch_operator(*grid, *origin_row, *origin_col, *patch_h, *patch_w)?,
            (ViewMeta::Downsample { grid, factor }, ViewKind::Downsample) => {
                make_downsample_operator(*grid, *factor)?
            }
            (ViewMeta::General, ViewKind::General) => {
                let (Some(a), Some(b)) = (&doc.a, &doc.b) else {
                    return Err(Error::Format(format!(
                        "general operator '{}' must embed dense a and b",
                        doc.id
                    )));
                };
                make_general_operator(
                    doc.id.clone(),
                    DenseMatrix::new(doc.m_i, doc.m, a.clone())?,
                    DenseMatrix::new(doc.m, doc.m_i, b.clone())?,
                )?
            }
            _ => {
                return Err(Error::Format(format!(
                    "operator '{}': kind {:?} does not match its meta",
                    doc.id, doc.kind
                )))
            }
        };
        if op.m() != doc.m || op.m_i() != doc.m_i {
            return Err(Error::Format(format!(
                "operator '{}': declared dims ({}, {}) disagree with meta ({}, {})",
                doc.id,
                doc.m,
                doc.m_i,
                op.m(),
                op.m_i()
            )));
        }
        op.id = doc.id.clone();
        Ok(op)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }
}

/// Serialized form of a [`ViewOperator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDoc {
    pub id: String,
    pub kind: ViewKind,
    pub meta: ViewMeta,
    pub m: usize,
    pub m_i: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sixteen_patch_tiling() {
        let grid = GridShape::square(32);
        let ops = patch_tiling(grid, 8).unwrap();
        assert_eq!(ops.len(), 16);
        assert!(ops.iter().all(|o| o.m_i() == 64 && o.m() == 1024));
        let origins: Vec<_> = ops
            .iter()
            .map(|o| match o.meta {
                ViewMeta::Patch {
                    origin_row,
                    origin_col,
                    ..
                } => (origin_row, origin_col),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(origins[0], (0, 0));
        assert_eq!(origins[5], (8, 8));
        assert_eq!(origins[15], (24, 24));
    }

    #[test]
    fn tiling_reconstructs_identity() {
        let grid = GridShape::square(32);
        let ops = patch_tiling(grid, 8).unwrap();
        let mut sum = DenseMatrix::zeros(1024, 1024);
        for op in &ops {
            sum = sum.add(&op.dense_b().matmul(&op.dense_a()).unwrap()).unwrap();
        }
        assert_eq!(sum, DenseMatrix::identity(1024));
    }

    #[test]
    fn full_cover_patch_is_identity() {
        let op = make_patch_operator(GridShape::square(2), 0, 0, 2, 2).unwrap();
        assert_eq!(op.dense_a(), DenseMatrix::identity(4));
        assert_eq!(op.dense_b(), DenseMatrix::identity(4));
    }

    #[test]
    fn single_pixel_patch() {
        let op = make_patch_operator(GridShape::square(2), 0, 0, 1, 1).unwrap();
        assert_eq!(op.apply_a(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0]);
        assert_eq!(op.apply_b(&[5.0]).unwrap(), vec![5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn patch_gram_is_zero_one_diagonal() {
        let op = make_patch_operator(GridShape::square(4), 1, 2, 2, 2).unwrap();
        let a = op.dense_a();
        let ata = a.transpose().matmul(&a).unwrap();
        for r in 0..4 * 4 {
            for c in 0..16 {
                let v = ata.get(r, c);
                if r == c {
                    assert!(v == 0.0 || v == 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(op.dense_b(), a.transpose());
    }

    #[test]
    fn out_of_bounds_patch_names_coordinate() {
        let err = make_patch_operator(GridShape::square(4), 3, 0, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Range(ref m) if m.contains("origin_row = 3")), "{err}");
        let err = make_patch_operator(GridShape::square(4), 0, 3, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Range(ref m) if m.contains("origin_col = 3")), "{err}");
    }

    #[test]
    fn downsample_means() {
        let op = make_downsample_operator(GridShape::square(2), 2).unwrap();
        assert_eq!(op.apply_a(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![2.5]);
        assert_eq!(op.apply_a(&[1.0; 4]).unwrap(), vec![1.0]);
        let big = make_downsample_operator(GridShape::square(32), 4).unwrap();
        assert_eq!(big.m_i(), 64);
        let a = big.dense_a();
        for r in 0..a.rows {
            assert_abs_diff_eq!(a.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn downsample_non_divisible_is_config_error() {
        let err = make_downsample_operator(GridShape::square(6), 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn downsample_b_is_right_inverse() {
        let grid = GridShape::new(8, 4, 2).unwrap();
        let op = make_downsample_operator(grid, 2).unwrap();
        let v: Vec<f64> = (0..op.m_i()).map(|i| (i as f64).sin() * 3.0).collect();
        let back = op.apply_a(&op.apply_b(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn general_operator_applies_dense() {
        let op = make_general_operator(
            "double",
            DenseMatrix::identity(1).scale(2.0),
            DenseMatrix::identity(1),
        )
        .unwrap();
        assert_eq!(op.apply_a(&[3.0]).unwrap(), vec![6.0]);
        let err = op.apply_a(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let op = make_patch_operator(GridShape::square(4), 0, 0, 2, 3).unwrap();
        assert!(op.apply_a(&[0.0; 16]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn least_squares_examples() {
        let m = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_abs_diff_eq!(solve_least_squares(&m, &[2.0, 4.0], 0.0).unwrap()[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(solve_least_squares(&m, &[2.0, 4.0], 2.0).unwrap()[0], 1.5, epsilon = 1e-12);
        let w = solve_least_squares(&DenseMatrix::identity(2), &[5.0, 7.0], 0.0).unwrap();
        assert_abs_diff_eq!(w[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn least_squares_singular_asks_for_ridge() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let err = solve_least_squares(&m, &[1.0, 2.0], 0.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref s) if s.contains("ridge")), "{err}");
        assert!(solve_least_squares(&m, &[1.0, 2.0], 1e-6).is_ok());
    }

    #[test]
    fn jacobi_eigen_reconstructs() {
        let m = DenseMatrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 1.0],
        ])
        .unwrap();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let recon = vecs
            .matmul(&DenseMatrix::diag(&vals))
            .unwrap()
            .matmul(&vecs.transpose())
            .unwrap();
        for (a, b) in recon.values.iter().zip(&m.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let ops = vec![
            make_patch_operator(GridShape::new(6, 4, 2).unwrap(), 2, 1, 3, 2).unwrap(),
            make_downsample_operator(GridShape::square(8), 2).unwrap(),
            make_general_operator(
                "g",
                DenseMatrix::new(2, 3, vec![0.1, 1.0 / 3.0, -2.5e-17, 7.0, 1e300, -0.0]).unwrap(),
                DenseMatrix::new(3, 2, vec![std::f64::consts::PI, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            )
            .unwrap(),
        ];
        for op in ops {
            let back = ViewOperator::from_json(&op.to_json().unwrap()).unwrap();
            assert_eq!(back, op);
            let bits = |m: DenseMatrix| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(back.dense_a()), bits(op.dense_a()));
            assert_eq!(bits(back.dense_b()), bits(op.dense_b()));
        }
    }

    proptest! {
        #[test]
        fn operators_are_linear(
            x in prop::collection::vec(-10.0f64..10.0, 64),
            y in prop::collection::vec(-10.0f64..10.0, 64),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let grid = GridShape::square(8);
            let mut ops = patch_tiling(grid, 4).unwrap();
            ops.push(make_downsample_operator(grid, 2).unwrap());
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            for op in &ops {
                let lhs = op.apply_a(&combo).unwrap();
                let ax = op.apply_a(&x).unwrap();
                let ay = op.apply_a(&y).unwrap();
                for i in 0..lhs.len() {
                    prop_assert!((lhs[i] - (alpha * ax[i] + beta * ay[i])).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn least_squares_satisfies_normal_equations(
            vals in prop::collection::vec(-2.0f64..2.0, 12),
            y in prop::collection::vec(-5.0f64..5.0, 4),
            ridge in 0.01f64..2.0,
        ) {
            let m = DenseMatrix::new(4, 3, vals).unwrap();
            let w = solve_least_squares(&m, &y, ridge).unwrap();
            let resid: Vec<f64> = m.matvec(&w).unwrap().iter().zip(&y).map(|(a, b)| a - b).collect();
            let g = m.matvec_t(&resid).unwrap();
            let scale = 1.0 + norm_sq(&m.matvec_t(&y).unwrap()).sqrt();
            for i in 0..3 {
                prop_assert!((g[i] + ridge * w[i]).abs() <= 1e-9 * scale);
            }
        }
    }
}
