//! Local polynomial fits of the FRF and the transient term over windows
//! of neighboring bins.
//!
//! At each target bin `k` the spectra in a window of `w` bins are modeled
//! as
//!
//! ```text
//! Y(k+d) = sum_i a_i p_i(d) R(k+d) + sum_i b_i p_i(d) + disturbance
//! U(k+d) = sum_i c_i p_i(d) R(k+d) + sum_i e_i p_i(d) + disturbance
//! ```
//!
//! with `p_i` polynomials of order up to `R` in the (normalized) offset
//! `d`. The zero-order coefficients are the local FRF and transient
//! values. Both regressions share one design matrix, so the estimator
//! weights and leverages are computed once.
//!
//! Because a periodic reference only occupies every `P`-th bin of a
//! `P`-period record spectrum, the window mixes excited lines (which see
//! noise plus stochastic distortion) and non-excited lines (noise only,
//! once the smooth transient polynomial is removed). Propagating the two
//! residual populations separately through the estimator weights yields
//! commensurate noise and total variances for the fitted FRF.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::Spectrum;

/// Local polynomial configuration: polynomial order `R` and the degrees
/// of freedom left after fitting (`window = 2 (R+1) + dof` equations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LpmConfig {
    pub poly_order: usize,
    pub dof: usize,
}

impl Default for LpmConfig {
    fn default() -> Self {
        Self {
            poly_order: 2,
            dof: 10,
        }
    }
}

impl LpmConfig {
    pub fn new(poly_order: usize, dof: usize) -> Result<Self> {
        if dof == 0 {
            return Err(Error::InvalidSpec("lpm dof must be >= 1".into()));
        }
        Ok(Self { poly_order, dof })
    }

    /// Number of parameters per channel fit.
    pub fn n_params(&self) -> usize {
        2 * (self.poly_order + 1)
    }

    /// Window size in bins.
    pub fn window(&self) -> usize {
        self.n_params() + self.dof
    }
}

/// Local fit at one target bin.
#[derive(Debug, Clone)]
pub struct LpmBinFit {
    /// Target bin index in the supplied spectra.
    pub k: usize,
    /// Zero-order FRF coefficients of the two regressions.
    pub g_ry: Complex64,
    pub g_ru: Complex64,
    /// Zero-order transient coefficients.
    pub t_ry: Complex64,
    pub t_ru: Complex64,
    /// Pooled residual variance per equation, RSS / (n_eq - n_par).
    pub residual_var_y: f64,
    pub residual_var_u: f64,
    /// Variance of `g_ry`/`g_ru` under all residual power (noise plus
    /// distortion) and under the non-excited-line power alone.
    pub var_y_total: f64,
    pub var_u_total: f64,
    pub cov_yu_total: Complex64,
    pub var_y_noise: f64,
    pub var_u_noise: f64,
    pub cov_yu_noise: Complex64,
    /// Equations minus parameters actually available at this bin.
    pub effective_dof: f64,
    pub retried: bool,
    pub invalid: bool,
}

impl LpmBinFit {
    fn invalid(k: usize, retried: bool) -> Self {
        Self {
            k,
            g_ry: Complex64::new(0.0, 0.0),
            g_ru: Complex64::new(0.0, 0.0),
            t_ry: Complex64::new(0.0, 0.0),
            t_ru: Complex64::new(0.0, 0.0),
            residual_var_y: 0.0,
            residual_var_u: 0.0,
            var_y_total: 0.0,
            var_u_total: 0.0,
            cov_yu_total: Complex64::new(0.0, 0.0),
            var_y_noise: 0.0,
            var_u_noise: 0.0,
            cov_yu_noise: Complex64::new(0.0, 0.0),
            effective_dof: 0.0,
            retried,
            invalid: true,
        }
    }
}

/// Resolve an extended bin index to a stored bin and a conjugation flag.
/// Indices beyond the stored half-spectrum refer to the conjugate-mirror
/// data of the real record (below DC and above Nyquist); the FRF and the
/// transient term continue smoothly through both edges, so windows may
/// reach across them. DC and Nyquist themselves carry no usable line.
fn resolve_bin(b: i64, n_bins: usize) -> Option<(usize, bool)> {
    let half = n_bins as i64;
    let total = 2 * half;
    if b <= -half || b >= total {
        return None;
    }
    let (idx, conj) = if b < 0 {
        (-b, true)
    } else if b < half {
        (b, false)
    } else {
        (total - b, true)
    };
    if idx == 0 || idx >= half {
        return None;
    }
    Some((idx as usize, conj))
}

/// The `len` extended bins nearest to `k`, symmetric where possible
/// (an even `len` is grown by one so odd-order remainder terms of the
/// local polynomials stay out of the center coefficient).
fn window_bins(k: usize, len: usize, n_bins: usize) -> Vec<i64> {
    let len = (len | 1).min(2 * n_bins.saturating_sub(2) + 1);
    let mut bins = Vec::with_capacity(len);
    let mut offset: i64 = 0;
    while bins.len() < len {
        for b in [k as i64 - offset, k as i64 + offset] {
            if bins.len() < len && resolve_bin(b, n_bins).is_some() && !bins.contains(&b) {
                bins.push(b);
            }
        }
        offset += 1;
        if offset > 2 * n_bins as i64 {
            break;
        }
    }
    bins.sort_unstable();
    bins
}

struct WindowFit {
    fit: LpmBinFit,
}

#[allow(clippy::too_many_arguments)]
fn fit_window(
    k: usize,
    bins: &[i64],
    r: &Spectrum,
    u: &Spectrum,
    y: &Spectrum,
    excited_mask: &[bool],
    n_poly: usize,
    retried: bool,
) -> Option<WindowFit> {
    let n_eq = bins.len();
    let n_par = 2 * n_poly;
    if n_eq <= n_par {
        return None;
    }
    let n_bins = r.len();
    let fetch = |spec: &Spectrum, b: i64| -> Complex64 {
        let (idx, conj) = resolve_bin(b, n_bins).expect("window bins are resolvable");
        if conj {
            spec.bins[idx].conj()
        } else {
            spec.bins[idx]
        }
    };
    // normalized offsets keep the polynomial columns conditioned
    let scale = bins
        .iter()
        .map(|&b| (b as f64 - k as f64).abs())
        .fold(1.0f64, f64::max);
    let a = DMatrix::<Complex64>::from_fn(n_eq, n_par, |i, j| {
        let d = (bins[i] as f64 - k as f64) / scale;
        if j < n_poly {
            fetch(r, bins[i]) * d.powi(j as i32)
        } else {
            Complex64::new(d.powi((j - n_poly) as i32), 0.0)
        }
    });
    let b_y = DVector::<Complex64>::from_fn(n_eq, |i, _| fetch(y, bins[i]));
    let b_u = DVector::<Complex64>::from_fn(n_eq, |i, _| fetch(u, bins[i]));

    let ah = a.adjoint();
    let normal = &ah * &a;
    let m_inv = normal.clone().try_inverse()?;
    if m_inv.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return None;
    }
    // crude conditioning guard on the normal equations
    let cond_proxy = normal.norm() * m_inv.norm();
    if cond_proxy > 1e12 {
        return None;
    }
    let coef_y = &m_inv * (&ah * &b_y);
    let coef_u = &m_inv * (&ah * &b_u);
    let res_y = &b_y - &a * &coef_y;
    let res_u = &b_u - &a * &coef_u;

    // estimator weights of the zero-order coefficient and leverages
    let mut c0 = vec![Complex64::new(0.0, 0.0); n_eq];
    let mut leverage = vec![0.0f64; n_eq];
    for i in 0..n_eq {
        let mut w = Complex64::new(0.0, 0.0);
        for j in 0..n_par {
            w += m_inv[(0, j)] * a[(i, j)].conj();
        }
        c0[i] = w;
        let mut h = Complex64::new(0.0, 0.0);
        for j in 0..n_par {
            let mut mj = Complex64::new(0.0, 0.0);
            for l in 0..n_par {
                mj += m_inv[(j, l)] * a[(i, l)];
            }
            h += a[(i, j)].conj() * mj;
        }
        leverage[i] = h.re.clamp(0.0, 1.0);
    }

    // split the window into excited and non-excited lines
    let mut d_exc = 0.0;
    let mut d_non = 0.0;
    let mut w_exc = 0.0;
    let mut w_non = 0.0;
    let mut ss_y_exc = 0.0;
    let mut ss_y_non = 0.0;
    let mut ss_u_exc = 0.0;
    let mut ss_u_non = 0.0;
    let mut cs_exc = Complex64::new(0.0, 0.0);
    let mut cs_non = Complex64::new(0.0, 0.0);
    for i in 0..n_eq {
        let wgt = c0[i].norm_sqr();
        let free = 1.0 - leverage[i];
        let cross = res_y[i] * res_u[i].conj();
        let stored = resolve_bin(bins[i], n_bins)
            .expect("window bins are resolvable")
            .0;
        if excited_mask[stored] {
            d_exc += free;
            w_exc += wgt;
            ss_y_exc += res_y[i].norm_sqr();
            ss_u_exc += res_u[i].norm_sqr();
            cs_exc += cross;
        } else {
            d_non += free;
            w_non += wgt;
            ss_y_non += res_y[i].norm_sqr();
            ss_u_non += res_u[i].norm_sqr();
            cs_non += cross;
        }
    }
    let dof_eff = (n_eq - n_par) as f64;
    let pooled_y = (ss_y_exc + ss_y_non) / dof_eff;
    let pooled_u = (ss_u_exc + ss_u_non) / dof_eff;
    let pooled_c = (cs_exc + cs_non) / dof_eff;
    // per-subset disturbance power; fall back to pooled when a subset
    // carries too little leverage-corrected mass to support an estimate
    let (sy_non, su_non, c_non) = if d_non > 0.5 {
        (ss_y_non / d_non, ss_u_non / d_non, cs_non / d_non)
    } else {
        (pooled_y, pooled_u, pooled_c)
    };
    let (sy_exc, su_exc, c_exc) = if d_exc > 0.5 {
        (ss_y_exc / d_exc, ss_u_exc / d_exc, cs_exc / d_exc)
    } else {
        (pooled_y, pooled_u, pooled_c)
    };

    let fit = LpmBinFit {
        k,
        g_ry: coef_y[0],
        g_ru: coef_u[0],
        t_ry: coef_y[n_poly],
        t_ru: coef_u[n_poly],
        residual_var_y: pooled_y,
        residual_var_u: pooled_u,
        var_y_total: sy_exc * w_exc + sy_non * w_non,
        var_u_total: su_exc * w_exc + su_non * w_non,
        cov_yu_total: c_exc * w_exc + c_non * w_non,
        var_y_noise: sy_non * (w_exc + w_non),
        var_u_noise: su_non * (w_exc + w_non),
        cov_yu_noise: c_non * (w_exc + w_non),
        effective_dof: dof_eff,
        retried,
        invalid: false,
    };
    Some(WindowFit { fit })
}

/// Fit every excited bin of the given spectra. `excited` lists target
/// bins on the grid of the supplied spectra (for a `P`-period record
/// these are `P` times the harmonic numbers). A rank-deficient local
/// system is retried once with a doubled window, then flagged invalid.
pub fn lpm_fit(
    r: &Spectrum,
    u: &Spectrum,
    y: &Spectrum,
    cfg: &LpmConfig,
    excited: &[usize],
) -> Result<Vec<LpmBinFit>> {
    if cfg.dof == 0 {
        return Err(Error::InvalidSpec("lpm dof must be >= 1".into()));
    }
    let n_bins = r.len();
    if u.len() != n_bins || y.len() != n_bins {
        return Err(Error::ShapeMismatch("spectra differ in length".into()));
    }
    if excited.iter().any(|&k| k == 0 || k >= n_bins) {
        return Err(Error::ShapeMismatch(
            "excited bins outside the spectrum grid".into(),
        ));
    }
    let mut excited_mask = vec![false; n_bins];
    for &k in excited {
        excited_mask[k] = true;
    }
    let n_poly = cfg.poly_order + 1;
    let fits: Vec<LpmBinFit> = excited
        .par_iter()
        .map(|&k| {
            let bins = window_bins(k, cfg.window(), n_bins);
            match fit_window(k, &bins, r, u, y, &excited_mask, n_poly, false) {
                Some(w) => w.fit,
                None => {
                    let wide = window_bins(k, 2 * cfg.window(), n_bins);
                    match fit_window(k, &wide, r, u, y, &excited_mask, n_poly, true) {
                        Some(w) => w.fit,
                        None => LpmBinFit::invalid(k, true),
                    }
                }
            }
        })
        .collect();
    Ok(fits)
}
