//! Brute-force posterior means for two-dimensional mixtures by tensor-grid
//! trapezoid quadrature. Shares no code with the closed-form oracle.

use bdl_core::synthdata::DataSpec;
use bdl_core::{Error, Result};

/// Half-width of each integration box, in standard deviations.
pub const BOX_WIDTH: f64 = 12.0;

fn log_gauss2(x: [f64; 2], mu: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let (dx, dy) = (x[0] - mu[0], x[1] - mu[1]);
    let q = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
}

fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i + 1 == n {
        0.5
    } else {
        1.0
    }
}

/// `E[X₀ | x_t]` with `nodes × nodes` points per component. Each box is the
/// intersection of `x_t ± 12σ` and `μ_k ± 12 sd_k` per coordinate;
/// components whose box is empty are skipped.
pub fn posterior_mean_2d(spec: &DataSpec, x_t: &[f64], sigma: f64, nodes: usize) -> Result<[f64; 2]> {
    if spec.m != 2 || x_t.len() != 2 {
        return Err(Error::Shape("quadrature oracle is two-dimensional".into()));
    }
    if nodes < 3 || !(sigma > 0.0) {
        return Err(Error::Domain("need at least 3 nodes and a positive noise level".into()));
    }
    let s2 = sigma * sigma;
    let noise = [[s2, 0.0], [0.0, s2]];
    let xt = [x_t[0], x_t[1]];
    let mut terms: Vec<(f64, [f64; 2])> = Vec::new();
    for c in &spec.components {
        if c.weight <= 0.0 {
            continue;
        }
        let d = c.cov.to_dense();
        let cov = [[d.get(0, 0), d.get(0, 1)], [d.get(1, 0), d.get(1, 1)]];
        let mu = [c.mean[0], c.mean[1]];
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        for j in 0..2 {
            let sd = cov[j][j].sqrt();
            lo[j] = (xt[j] - BOX_WIDTH * sigma).max(mu[j] - BOX_WIDTH * sd);
            hi[j] = (xt[j] + BOX_WIDTH * sigma).min(mu[j] + BOX_WIDTH * sd);
        }
        if lo[0] >= hi[0] || lo[1] >= hi[1] {
            continue;
        }
        let h = [(hi[0] - lo[0]) / (nodes - 1) as f64, (hi[1] - lo[1]) / (nodes - 1) as f64];
        let log_cell = c.weight.ln() + (h[0] * h[1]).ln();
        for i in 0..nodes {
            let x = lo[0] + i as f64 * h[0];
            for k in 0..nodes {
                let y = lo[1] + k as f64 * h[1];
                let p = [x, y];
                let lw = log_cell
                    + (trapezoid_weight(i, nodes) * trapezoid_weight(k, nodes)).ln()
                    + log_gauss2(p, mu, cov)
                    + log_gauss2(xt, p, noise);
                terms.push((lw, p));
            }
        }
    }
    let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("quadrature found no posterior mass".into()));
    }
    let (mut z, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (lw, p) in &terms {
        let w = (lw - max).exp();
        z += w;
        mx += w * p[0];
        my += w * p[1];
    }
    Ok([mx / z, my / z])
}
