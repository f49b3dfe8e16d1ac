//! Closed-form ground truth for the NFIR feedback benchmark
//! `y(t) = u(t-1) + u(t-2) w^2(t)`, `u(t) = r(t) - alpha y(t)`:
//! its best linear approximation, the variance of a single-realization
//! estimate, the process-noise residual, and the stability region of the
//! loop. The test and acceptance suites check every estimator against
//! these expressions.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Benchmark parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NfirParams {
    /// Feedback gain.
    pub alpha: f64,
    /// Process-noise standard deviation.
    pub sigma_w: f64,
    /// Reference standard deviation.
    pub sigma_r: f64,
    /// Plant-input standard deviation, measured from simulation.
    pub sigma_u: f64,
    /// Sampling period.
    pub t_s: f64,
}

impl NfirParams {
    pub fn new(alpha: f64, sigma_w: f64, sigma_r: f64, sigma_u: f64) -> Self {
        Self {
            alpha,
            sigma_w,
            sigma_r,
            sigma_u,
            t_s: 1.0,
        }
    }
}

/// True best linear approximation of the plant:
/// `G(jw) = e^{-jw T_s} + sigma_w^2 e^{-2 jw T_s}`.
pub fn bla_true(p: &NfirParams, omega: f64) -> Complex64 {
    let z1 = Complex64::from_polar(1.0, -omega * p.t_s);
    z1 + p.sigma_w * p.sigma_w * z1 * z1
}

/// First-order approximation of the variance of a single-realization BLA
/// estimate: `|1 + alpha G|^2 * 2 sigma_u^2 sigma_w^4 / sigma_r^2`.
/// Estimates produced by a local-polynomial fit carry `1/dof` of this.
pub fn bla_variance_true(p: &NfirParams, omega: f64) -> Result<f64> {
    if p.sigma_r <= 0.0 {
        return Err(Error::InvalidSpec("sigma_r must be positive".into()));
    }
    let g = bla_true(p, omega);
    let closed = Complex64::new(1.0, 0.0) + p.alpha * g;
    Ok(
        closed.norm_sqr() * 2.0 * p.sigma_u * p.sigma_u * p.sigma_w.powi(4)
            / (p.sigma_r * p.sigma_r),
    )
}

/// Reference-to-output and reference-to-input FRFs on the unit circle:
/// `G_ry = (z^-1 + s^2 z^-2) / (1 + a z^-1 + a s^2 z^-2)` and
/// `G_ru = 1 / (1 + a z^-1 + a s^2 z^-2)`. Their ratio is [`bla_true`].
pub fn ry_ru_true(p: &NfirParams, z: Complex64) -> Result<(Complex64, Complex64)> {
    if (z.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec("z must lie on the unit circle".into()));
    }
    let s2 = p.sigma_w * p.sigma_w;
    let zi = z.inv();
    let num = zi + s2 * zi * zi;
    let den = Complex64::new(1.0, 0.0) + p.alpha * zi + p.alpha * s2 * zi * zi;
    if den.norm() < 1e-12 {
        return Err(Error::InvalidSpec(
            "loop denominator vanishes on the unit circle".into(),
        ));
    }
    Ok((num / den, den.inv()))
}

/// Stability predicate of the loop:
/// `0 < alpha < min(4 sigma_w^2, sigma_w^-2)` when noise is present,
/// `|alpha| < 1` without noise.
pub fn stability_ok(alpha: f64, sigma_w: f64) -> bool {
    if sigma_w == 0.0 {
        alpha.abs() < 1.0
    } else {
        let s2 = sigma_w * sigma_w;
        alpha > 0.0 && alpha < (4.0 * s2).min(1.0 / s2)
    }
}

/// Poles of the closed-loop FRFs: roots of `z^2 + alpha z + alpha sigma_w^2`.
pub fn loop_poles(alpha: f64, sigma_w: f64) -> [Complex64; 2] {
    let s2 = sigma_w * sigma_w;
    let disc = Complex64::new(alpha * alpha - 4.0 * alpha * s2, 0.0).sqrt();
    [
        (Complex64::new(-alpha, 0.0) + disc) / 2.0,
        (Complex64::new(-alpha, 0.0) - disc) / 2.0,
    ]
}

/// Time-domain variance of the process-noise residual
/// `y_P(t) = u(t-2) (w^2(t) - sigma_w^2)`: equals `sigma_u^2 * 2 sigma_w^4`
/// for Gaussian noise.
pub fn yp_variance_true(sigma_u: f64, sigma_w: f64) -> f64 {
    sigma_u * sigma_u * 2.0 * sigma_w.powi(4)
}

/// Exact conditional-mean response of the benchmark given the reference:
/// the loop `y(t) = u(t-1) + sigma_w^2 u(t-2)`, `u(t) = r(t) - alpha y(t)`
/// run from zero initial conditions. Averaging the stochastic loop over
/// process-noise draws converges to this record.
pub fn conditional_mean(alpha: f64, sigma_w: f64, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s2 = sigma_w * sigma_w;
    let n = r.len();
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for t in 0..n {
        let u1 = if t >= 1 { u[t - 1] } else { 0.0 };
        let u2 = if t >= 2 { u[t - 2] } else { 0.0 };
        let y_t = u1 + s2 * u2;
        y.push(y_t);
        u.push(r[t] - alpha * y_t);
    }
    (u, y)
}
