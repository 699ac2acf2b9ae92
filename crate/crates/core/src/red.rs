//! Regularized inverse beamforming with a sparse time-of-flight model,
//! solved by ADMM with a non-local means denoiser as the regularizer.

use crate::acquisition::{TransducerGeometry, TransmitScheme};
use crate::beamform::{transmit_delay, PixelGrid};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// CSR matrix with one row per `(ft, ch)` sample, `row = ft * n_ch + ch`,
/// and one column per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTofMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseTofMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    /// `y = Phi x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .into_par_iter()
            .map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `x = Phi^T y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            let (c, v) = self.row(r);
            for (&j, &a) in c.iter().zip(v) {
                x[j] += a * y[r];
            }
        }
        x
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in d.iter_mut().enumerate() {
            let (c, v) = self.row(r);
            for (&j, &a) in c.iter().zip(v) {
                row[j] = a;
            }
        }
        d
    }
}

/// Pixel arrival time for receive channel `ch`, matching the TOF correction.
pub fn pixel_delay(p: [f64; 2], geometry: &TransducerGeometry, scheme: &TransmitScheme, tx: usize, ch: usize, c: f64) -> f64 {
    let e = geometry.element_positions[ch];
    transmit_delay(p, geometry, scheme, tx, c) + ((e[0] - p[0]).powi(2) + (e[1] - p[1]).powi(2)).sqrt() / c
}

/// Entry `(ft, ch; pixel)` exists iff `|tau_ax - tau_pix| < 1/f_s` and holds
/// `|tau_ax - tau_pix| / t_max` with `t_max = n_ft / f_s`.
pub fn build_phi(grid: &PixelGrid, geometry: &TransducerGeometry, scheme: &TransmitScheme, c: f64, f_s: f64, tx: usize) -> Result<SparseTofMatrix> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("pixel grid is empty".into()));
    }
    if tx >= scheme.n_transmits() {
        return Err(Error::InvalidArgument(format!("transmit {tx} out of range")));
    }
    let n_ch = geometry.n_channels();
    let n_ft = scheme.n_fast_time;
    let t_max = n_ft as f64 / f_s;
    let t0 = scheme.initial_time;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_ft * n_ch];
    // per channel, each pixel touches at most the two samples around its arrival
    let per_channel: Vec<Vec<(usize, usize, f64)>> = (0..n_ch)
        .into_par_iter()
        .map(|ch| {
            let mut out = Vec::new();
            for col in 0..grid.len() {
                let tau = pixel_delay(grid.position_of(col), geometry, scheme, tx, ch, c);
                let s = (tau - t0) * f_s;
                let lo = (s - 1.0).floor().max(0.0) as i64;
                let hi = ((s + 1.0).ceil() as i64).min(n_ft as i64 - 1);
                for ft in lo..=hi {
                    let d = (t0 + ft as f64 / f_s - tau).abs();
                    if d < 1.0 / f_s {
                        out.push((ft as usize * n_ch + ch, col, d / t_max));
                    }
                }
            }
            out
        })
        .collect();
    for list in per_channel {
        for (r, col, v) in list {
            rows[r].push((col, v));
        }
    }
    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for row in rows {
        for (col, v) in row {
            col_idx.push(col);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(SparseTofMatrix { n_rows: n_ft * n_ch, n_cols: grid.len(), row_ptr, col_idx, values })
}

/// Non-local means on an `nx` by `nz` image stored depth-major. Patch
/// distances are mean squared differences over `patch x patch` blocks with
/// clamped borders; weights are `exp(-d^2 / h^2)` over a `window x window`
/// search region clipped to the image.
pub fn nlm_denoise(image: &[f64], nx: usize, nz: usize, h: f64, patch: usize, window: usize) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("NLM smoothing must be positive".into()));
    }
    if image.len() != nx * nz {
        return Err(Error::ShapeMismatch(format!("image has {} pixels, expected {}", image.len(), nx * nz)));
    }
    if patch % 2 == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument("NLM patch and window sizes must be odd".into()));
    }
    let (pr, wr) = ((patch / 2) as i64, (window / 2) as i64);
    let at = |x: i64, z: i64| -> f64 {
        let x = x.clamp(0, nx as i64 - 1) as usize;
        let z = z.clamp(0, nz as i64 - 1) as usize;
        image[z * nx + x]
    };
    let np = (patch * patch) as f64;
    let inv_h2 = 1.0 / (h * h);
    let out = (0..nx * nz)
        .into_par_iter()
        .map(|i| {
            let (px, pz) = ((i % nx) as i64, (i / nx) as i64);
            let (mut num, mut den) = (0.0, 0.0);
            for qz in (pz - wr).max(0)..=(pz + wr).min(nz as i64 - 1) {
                for qx in (px - wr).max(0)..=(px + wr).min(nx as i64 - 1) {
                    let mut d2 = 0.0;
                    for oz in -pr..=pr {
                        for ox in -pr..=pr {
                            let d = at(px + ox, pz + oz) - at(qx + ox, qz + oz);
                            d2 += d * d;
                        }
                    }
                    let w = (-(d2 / np) * inv_h2).exp();
                    num += w * at(qx, qz);
                    den += w;
                }
            }
            num / den
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedConfig {
    pub mu: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub h: f64,
    pub max_outer: usize,
    pub patch: usize,
    pub window: usize,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for RedConfig {
    fn default() -> Self {
        Self {
            mu: 2000.0,
            beta: 1000.0,
            epsilon: 5e-4,
            h: 0.8,
            max_outer: 200,
            patch: 5,
            window: 11,
            cg_tolerance: 1e-10,
            cg_max_iterations: 2000,
        }
    }
}

impl RedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.beta > 0.0 && self.h > 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("RED needs mu >= 0 and beta, h, epsilon > 0".into()));
        }
        if self.max_outer == 0 || self.cg_max_iterations == 0 {
            return Err(Error::InvalidArgument("RED iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedSolution {
    pub x: Vec<f64>,
    /// Objective at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Conjugate gradient for `A x = b` with `A` symmetric positive definite,
/// starting from `x`.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], x: &mut [f64], tolerance: f64, max_iterations: usize) -> Result<usize>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 && dot(&r, &r) == 0.0 {
        return Ok(0);
    }
    let target = tolerance * bnorm.max(f64::MIN_POSITIVE);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iterations {
        if rr.sqrt() <= target {
            return Ok(it);
        }
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= target {
        return Ok(max_iterations);
    }
    Err(Error::CgNotConverged { iterations: max_iterations, residual: rr.sqrt() / bnorm.max(f64::MIN_POSITIVE) })
}

/// The regularizer's denoiser: NLM on the image scaled to unit peak,
/// scaled back afterwards.
pub fn denoise(x: &[f64], grid: &PixelGrid, config: &RedConfig) -> Result<Vec<f64>> {
    let s = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let scaled: Vec<f64> = x.iter().map(|v| v / s).collect();
    Ok(nlm_denoise(&scaled, grid.nx, grid.nz, config.h, config.patch, config.window)?.into_iter().map(|v| v * s).collect())
}

/// `|y - Phi x|^2 + mu/2 x^T (x - F(x))`.
pub fn objective(y: &[f64], phi: &SparseTofMatrix, x: &[f64], grid: &PixelGrid, config: &RedConfig) -> Result<f64> {
    let r: f64 = phi.apply(x).iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    if config.mu == 0.0 {
        return Ok(r);
    }
    let f = denoise(x, grid, config)?;
    let reg: f64 = x.iter().zip(&f).map(|(a, b)| a * (a - b)).sum();
    Ok(r + 0.5 * config.mu * reg)
}

/// ADMM: a regularized least-squares x-update by CG, one fixed-point
/// denoiser step for the splitting variable, then the dual update. Stops
/// when the relative change of `x` drops below `epsilon`.
pub fn red_solve(y: &[f64], phi: &SparseTofMatrix, grid: &PixelGrid, config: &RedConfig) -> Result<RedSolution> {
    config.validate()?;
    if y.len() != phi.n_rows || grid.len() != phi.n_cols {
        return Err(Error::ShapeMismatch(format!(
            "data has {} samples and grid {} pixels, matrix is {}x{}",
            y.len(),
            grid.len(),
            phi.n_rows,
            phi.n_cols
        )));
    }
    log::info!(
        "RED: mu={} beta={} epsilon={} h={} patch={} window={}",
        config.mu,
        config.beta,
        config.epsilon,
        config.h,
        config.patch,
        config.window
    );
    let n = phi.n_cols;
    let beta = config.beta;
    let phty: Vec<f64> = phi.apply_transpose(y).into_iter().map(|v| 2.0 * v).collect();
    let normal = |v: &[f64]| -> Vec<f64> {
        let t = phi.apply_transpose(&phi.apply(v));
        t.iter().zip(v).map(|(a, b)| 2.0 * a + beta * b).collect()
    };
    let mut x = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut trace = vec![objective(y, phi, &x, grid, config)?];
    let mut iterations = 0;
    for _ in 0..config.max_outer {
        iterations += 1;
        let prev = x.clone();
        let rhs: Vec<f64> = (0..n).map(|i| phty[i] + beta * (v[i] - u[i])).collect();
        conjugate_gradient(normal, &rhs, &mut x, config.cg_tolerance, config.cg_max_iterations)?;
        let f = if config.mu > 0.0 { denoise(&v, grid, config)? } else { vec![0.0; n] };
        for i in 0..n {
            v[i] = (config.mu * f[i] + beta * (x[i] + u[i])) / (config.mu + beta);
            u[i] += x[i] - v[i];
        }
        trace.push(objective(y, phi, &x, grid, config)?);
        if x.iter().any(|a| !a.is_finite()) {
            return Err(Error::Divergence("RED iterate became non-finite"));
        }
        let dx: f64 = x.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let nx: f64 = prev.iter().map(|a| a * a).sum::<f64>().sqrt();
        if dx == 0.0 || (nx > 0.0 && dx / nx < config.epsilon) {
            break;
        }
    }
    Ok(RedSolution { x, objective_trace: trace, iterations })
}

/// Pixelwise mean of per-transmit solutions.
pub fn red_compound(solutions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = solutions.first().ok_or(Error::EmptyImage)?;
    if solutions.iter().any(|s| s.len() != first.len()) {
        return Err(Error::ShapeMismatch("solutions differ in size".into()));
    }
    let n = solutions.len() as f64;
    Ok((0..first.len()).map(|i| solutions.iter().map(|s| s[i]).sum::<f64>() / n).collect())
}
