//! Spatial signs and the diagonal-scale / spatial-median fixed points.
//!
//! With `xi_t = D^{-1/2}(Z_t - theta)` and `U(v) = v / |v|`, the joint
//! estimator solves
//!
//! ```text
//!   T^-1 sum_t U(xi_t)                  = 0
//!   T^-1 sum_t diag{U(xi_t) U(xi_t)'}   = N^-1 I
//! ```
//!
//! by alternating a Weiszfeld step for `theta` with the multiplicative update
//! `D <- N D^{1/2} diag{T^-1 sum U U'} D^{1/2}`. The scale-only variant keeps
//! `theta = 0` and runs the second update alone.
//!
//! Both equations are invariant to a common rescaling of `D`, so the fixed
//! point only determines `D` up to a constant. After convergence `D` is
//! rescaled so that the radii `r_t = |xi_t|` satisfy `T^-1 sum r_t^2 = N`,
//! which makes `D` estimate the diagonal of the error covariance. Signs,
//! `theta` and the equation residuals are unaffected by this rescaling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Consistency constant turning a Gaussian MAD into a standard deviation.
const MAD_TO_SD: f64 = 0.6745;
const SCALE_FLOOR: f64 = 1e-12;
/// Largest factor by which one update may move a scale entry.
const MAX_SCALE_STEP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixpointOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixpointOptions {
    fn default() -> Self {
        FixpointOptions {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

/// Converged spatial median and diagonal scale of the rows of `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianScaleEstimate {
    pub theta: DVector<f64>,
    /// Diagonal entries `d_i^2` of `D`.
    pub d: DVector<f64>,
    /// `T x N` unit signs `U(D^{-1/2}(Z_t - theta))`.
    pub signs: DMatrix<f64>,
    pub radii: DVector<f64>,
    pub iterations: usize,
    pub residual_location: f64,
    pub residual_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEstimate {
    pub d: DVector<f64>,
    pub iterations: usize,
    pub residual_scale: f64,
}

/// `E(r^2)`, `E(r^-1)` and `zeta = E(r^2) E(r^-1)^2` estimated from radii.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZetaHat {
    pub e_r2: f64,
    pub e_rinv: f64,
    pub zeta: f64,
}

/// `v / |v|`, or the zero vector when `v = 0`.
pub fn spatial_sign(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / norm).collect()
}

/// Row-major copy of a matrix, so each observation is a contiguous slice.
pub(crate) struct Rows {
    pub data: Vec<f64>,
    pub t: usize,
    pub n: usize,
}

impl Rows {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (t, n) = m.shape();
        let mut data = vec![0.0; t * n];
        for (j, col) in m.column_iter().enumerate() {
            for (s, &v) in col.iter().enumerate() {
                data[s * n + j] = v;
            }
        }
        Rows { data, t, n }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n..(s + 1) * self.n]
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Coordinate-wise median and squared normalized MAD.
fn robust_start(rows: &Rows) -> (Vec<f64>, Vec<f64>) {
    let mut center = vec![0.0; rows.n];
    let mut scale = vec![0.0; rows.n];
    let mut buf = vec![0.0; rows.t];
    for j in 0..rows.n {
        for s in 0..rows.t {
            buf[s] = rows.data[s * rows.n + j];
        }
        let med = median(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - med).abs();
        }
        let mad = median(&mut buf) / MAD_TO_SD;
        center[j] = med;
        scale[j] = (mad * mad).max(SCALE_FLOOR);
    }
    (center, scale)
}

/// Sums collected over one pass through the observations.
struct Sweep {
    sum_u: Vec<f64>,
    sum_u2: Vec<f64>,
    sum_inv_norm: f64,
    residual_location: f64,
    residual_scale: f64,
}

fn sweep(rows: &Rows, theta: &[f64], inv_sqrt_d: &[f64], xi: &mut [f64]) -> Sweep {
    let n = rows.n;
    let mut sum_u = vec![0.0; n];
    let mut sum_u2 = vec![0.0; n];
    let mut sum_inv_norm = 0.0;
    for s in 0..rows.t {
        let z = rows.row(s);
        let mut sq = 0.0;
        for j in 0..n {
            let v = (z[j] - theta[j]) * inv_sqrt_d[j];
            xi[j] = v;
            sq += v * v;
        }
        if sq == 0.0 {
            // Exact hit: dropped from every sum for this pass.
            continue;
        }
        let norm = sq.sqrt();
        let inv = 1.0 / norm;
        let inv_sq = 1.0 / sq;
        sum_inv_norm += inv;
        for j in 0..n {
            sum_u[j] += xi[j] * inv;
            sum_u2[j] += xi[j] * xi[j] * inv_sq;
        }
    }
    let tf = rows.t as f64;
    let target = 1.0 / n as f64;
    let residual_location = sum_u.iter().fold(0.0f64, |m, v| m.max((v / tf).abs()));
    let residual_scale = sum_u2
        .iter()
        .fold(0.0f64, |m, v| m.max((v / tf - target).abs()));
    Sweep {
        sum_u,
        sum_u2,
        sum_inv_norm,
        residual_location,
        residual_scale,
    }
}

fn update_scale(d: &mut [f64], sum_u2: &[f64], t: usize) {
    let n = d.len() as f64;
    for (dj, &s) in d.iter_mut().zip(sum_u2) {
        let ratio = (n * s / t as f64).clamp(1.0 / MAX_SCALE_STEP, MAX_SCALE_STEP);
        *dj *= ratio;
    }
}

/// Rescales `d` in place so that the mean squared radius equals `N`;
/// returns the factor applied to `d`.
fn normalize_scale(rows: &Rows, theta: &[f64], d: &mut [f64]) -> f64 {
    let inv_sqrt_d: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut total = 0.0;
    for s in 0..rows.t {
        let z = rows.row(s);
        let mut sq = 0.0;
        for j in 0..rows.n {
            let v = (z[j] - theta[j]) * inv_sqrt_d[j];
            sq += v * v;
        }
        total += sq;
    }
    let c = total / rows.t as f64 / rows.n as f64;
    if c > 0.0 && c.is_finite() {
        for v in d.iter_mut() {
            *v *= c;
        }
        c
    } else {
        1.0
    }
}

/// Diagonal scale `D` of residual rows via the multiplicative update alone.
pub fn scale_only_fixpoint(
    residuals: &DMatrix<f64>,
    opts: FixpointOptions,
) -> Result<ScaleEstimate> {
    let rows = Rows::from_matrix(residuals);
    if rows.t < 2 {
        return Err(Error::InvalidArgument(format!(
            "scale estimation needs T >= 2, got {}",
            rows.t
        )));
    }
    if let Some(s) = (0..rows.t).find(|&s| rows.row(s).iter().all(|&v| v == 0.0)) {
        return Err(Error::DegenerateObservation { row: s });
    }
    let theta = vec![0.0; rows.n];
    let (_, mut d) = robust_start(&rows);
    let mut xi = vec![0.0; rows.n];
    let mut iter = 0;
    loop {
        let inv_sqrt_d: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
        let sw = sweep(&rows, &theta, &inv_sqrt_d, &mut xi);
        iter += 1;
        if sw.residual_scale <= opts.tol {
            normalize_scale(&rows, &theta, &mut d);
            return Ok(ScaleEstimate {
                d: DVector::from_vec(d),
                iterations: iter,
                residual_scale: sw.residual_scale,
            });
        }
        if iter > opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: opts.max_iter,
                residual_location: 0.0,
                residual_scale: sw.residual_scale,
            });
        }
        update_scale(&mut d, &sw.sum_u2, rows.t);
    }
}

/// Joint spatial median and diagonal scale of the rows of `z`.
pub fn median_scale_fixpoint(
    z: &DMatrix<f64>,
    opts: FixpointOptions,
) -> Result<MedianScaleEstimate> {
    let rows = Rows::from_matrix(z);
    if rows.t < 3 {
        return Err(Error::InvalidArgument(format!(
            "spatial median needs T >= 3, got {}",
            rows.t
        )));
    }
    if (1..rows.t).all(|s| rows.row(s) == rows.row(0)) {
        return Err(Error::InvalidArgument(
            "all observations are identical".into(),
        ));
    }
    let (mut theta, mut d) = robust_start(&rows);
    let mut xi = vec![0.0; rows.n];
    let mut iter = 0;
    loop {
        let sqrt_d: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
        let inv_sqrt_d: Vec<f64> = sqrt_d.iter().map(|v| 1.0 / v).collect();
        let sw = sweep(&rows, &theta, &inv_sqrt_d, &mut xi);
        iter += 1;
        if sw.residual_location.max(sw.residual_scale) <= opts.tol {
            normalize_scale(&rows, &theta, &mut d);
            let theta = DVector::from_vec(theta);
            let d = DVector::from_vec(d);
            let (signs, radii) = signs_and_radii(z, &theta, &d);
            return Ok(MedianScaleEstimate {
                theta,
                d,
                signs,
                radii,
                iterations: iter,
                residual_location: sw.residual_location,
                residual_scale: sw.residual_scale,
            });
        }
        if iter > opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: opts.max_iter,
                residual_location: sw.residual_location,
                residual_scale: sw.residual_scale,
            });
        }
        if sw.sum_inv_norm > 0.0 {
            for j in 0..rows.n {
                theta[j] += sqrt_d[j] * sw.sum_u[j] / sw.sum_inv_norm;
            }
        }
        update_scale(&mut d, &sw.sum_u2, rows.t);
    }
}

/// Signs `U(D^{-1/2}(Z_t - theta))` and radii `|D^{-1/2}(Z_t - theta)|`.
pub fn signs_and_radii(
    z: &DMatrix<f64>,
    theta: &DVector<f64>,
    d: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let (t, n) = z.shape();
    let inv_sqrt_d: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut signs = DMatrix::zeros(t, n);
    let mut radii = DVector::<f64>::zeros(t);
    for (j, col) in z.column_iter().enumerate() {
        for s in 0..t {
            let v = (col[s] - theta[j]) * inv_sqrt_d[j];
            signs[(s, j)] = v;
            radii[s] += v * v;
        }
    }
    for s in 0..t {
        let r = radii[s].sqrt();
        radii[s] = r;
        if r > 0.0 {
            for j in 0..n {
                signs[(s, j)] /= r;
            }
        }
    }
    (signs, radii)
}

pub fn zeta_hat(radii: &[f64]) -> Result<ZetaHat> {
    if radii.is_empty() {
        return Err(Error::InvalidArgument("no radii".into()));
    }
    if let Some(row) = radii.iter().position(|&r| !(r > 0.0)) {
        return Err(Error::DegenerateRadius { row });
    }
    let t = radii.len() as f64;
    let e_r2 = radii.iter().map(|r| r * r).sum::<f64>() / t;
    let e_rinv = radii.iter().map(|r| 1.0 / r).sum::<f64>() / t;
    Ok(ZetaHat {
        e_r2,
        e_rinv,
        zeta: e_r2 * e_rinv * e_rinv,
    })
}
