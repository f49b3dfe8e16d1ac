//! Nonparametric estimation of the best linear approximation (BLA) with
//! its variance split into a noise part and a nonlinear-distortion part.
//!
//! Three estimators share one output type:
//!
//! * **robust** — `M` phase realizations x `P` steady-state periods. The
//!   spread over realizations gives the total variance, the spread over
//!   periods gives the noise variance, and their difference is the
//!   distortion variance.
//! * **fast** — one realization whose excitation deliberately skips some
//!   in-band harmonics. Residual power on those detection lines measures
//!   distortion plus noise; period-to-period spread measures noise alone.
//! * **fast-lpm** — the fast method robustified against transients: a
//!   local polynomial fit of the FRF and the transient term over a window
//!   of neighboring bins of the full-record spectrum. It consumes records
//!   that still contain the start-up transient.

mod lpm;

pub use lpm::{lpm_fit, LpmBinFit, LpmConfig};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{
    cross_covariance, ensemble_spectra, sample_stats, scaled_dft, Channel, SignalEnsemble,
};
use crate::volterra::{conditional_mean_response, FeedbackSystemSpec, LoopNoiseSpec};

/// Bins with a period-averaged input magnitude below this are flagged
/// invalid rather than divided by.
pub const INVALID_INPUT_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlaMethod {
    Robust,
    Fast,
    FastLpm,
}

impl std::fmt::Display for BlaMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlaMethod::Robust => write!(f, "robust"),
            BlaMethod::Fast => write!(f, "fast"),
            BlaMethod::FastLpm => write!(f, "fast-lpm"),
        }
    }
}

/// Per-bin bookkeeping.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BinFlags {
    /// `var_nl` was negative before clipping at zero.
    pub clipped: bool,
    /// Bin excluded (vanishing input or unrecoverable local fit).
    pub invalid: bool,
    /// Local fit retried with a widened window.
    pub retried: bool,
    /// Degrees of freedom actually available at this bin (window
    /// truncation at band edges reduces it).
    pub effective_dof: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinEstimate {
    pub k: usize,
    pub freq_hz: f64,
    pub g: Complex64,
    pub var_noise: f64,
    pub var_total: f64,
    pub var_nl: f64,
    pub flags: BinFlags,
}

/// A deliberately non-excited in-band bin and the output residual power
/// observed there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionLine {
    pub k: usize,
    pub freq_hz: f64,
    pub even: bool,
    pub residual_power: f64,
}

/// FRF estimate per excited bin with its variance decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlaEstimate {
    pub method: BlaMethod,
    pub bins: Vec<BinEstimate>,
    pub detection_lines: Vec<DetectionLine>,
    /// Degrees of freedom of the estimator (`M - 1` for the robust
    /// method, the configured dof for local-polynomial fits).
    pub dof: f64,
    pub realizations: usize,
    pub periods: usize,
    /// Reference power tag `var(r)` of the experiment.
    pub reference_power: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl BlaEstimate {
    /// Valid bins only.
    pub fn valid_bins(&self) -> impl Iterator<Item = &BinEstimate> {
        self.bins.iter().filter(|b| !b.flags.invalid)
    }

    /// Average several independent estimates bin by bin. The variance
    /// fields of the result describe the averaged FRF (mean of the
    /// per-estimate variances divided by the number of estimates), so
    /// every `BlaEstimate` carries the uncertainty of its own `g` no
    /// matter how it was produced. All estimates must share one bin grid.
    pub fn average(estimates: &[BlaEstimate]) -> Result<BlaEstimate> {
        let first = estimates
            .first()
            .ok_or_else(|| Error::EstimatorPrecondition("no estimates to average".into()))?;
        let n = first.bins.len();
        if estimates
            .iter()
            .any(|e| e.bins.len() != n || e.bins.iter().zip(&first.bins).any(|(a, b)| a.k != b.k))
        {
            return Err(Error::ShapeMismatch(
                "estimates do not share one bin grid".into(),
            ));
        }
        let m = estimates.len() as f64;
        let bins = (0..n)
            .map(|i| {
                let invalid = estimates.iter().any(|e| e.bins[i].flags.invalid);
                let g = estimates.iter().map(|e| e.bins[i].g).sum::<Complex64>() / m;
                let var_noise =
                    estimates.iter().map(|e| e.bins[i].var_noise).sum::<f64>() / (m * m);
                let var_total =
                    estimates.iter().map(|e| e.bins[i].var_total).sum::<f64>() / (m * m);
                let var_nl = estimates.iter().map(|e| e.bins[i].var_nl).sum::<f64>() / (m * m);
                BinEstimate {
                    k: first.bins[i].k,
                    freq_hz: first.bins[i].freq_hz,
                    g,
                    var_noise,
                    var_total,
                    var_nl,
                    flags: BinFlags {
                        invalid,
                        effective_dof: first.bins[i].flags.effective_dof,
                        ..Default::default()
                    },
                }
            })
            .collect();
        Ok(BlaEstimate {
            method: first.method,
            bins,
            detection_lines: Vec::new(),
            dof: first.dof,
            realizations: estimates.len(),
            periods: first.periods,
            reference_power: first.reference_power,
            seed: first.seed,
            config_digest: first.config_digest.clone(),
        })
    }
}

/// The BLA of the plant as the ratio of the reference-to-output and
/// reference-to-input FRFs. `None` marks an invalid bin (vanishing
/// denominator).
pub fn bla_from_reference(g_ry: Complex64, g_ru: Complex64) -> Option<Complex64> {
    if g_ru.norm() < INVALID_INPUT_FLOOR {
        None
    } else {
        Some(g_ry / g_ru)
    }
}

/// First-order variance of a spectrum ratio `g = y0 / u0` given the
/// disturbance variances of numerator and denominator and their
/// cross-covariance.
fn ratio_variance(
    g: Complex64,
    y0: Complex64,
    u0: Complex64,
    var_y: f64,
    var_u: f64,
    cov_yu: Complex64,
) -> f64 {
    let v = g.norm_sqr()
        * (var_y / y0.norm_sqr() + var_u / u0.norm_sqr() - 2.0 * (cov_yu / (y0 * u0.conj())).re);
    v.max(0.0)
}

fn subtract_noise(var_total: f64, var_noise: f64) -> (f64, bool) {
    let raw = var_total - var_noise;
    if raw >= 0.0 {
        (raw, false)
    } else {
        (0.0, true)
    }
}

fn excited_from_meta(e: &SignalEnsemble) -> Result<Vec<usize>> {
    if e.meta.excited.is_empty() {
        return Err(Error::EstimatorPrecondition(
            "ensemble meta carries no excited-harmonic set".into(),
        ));
    }
    Ok(e.meta.excited.clone())
}

/// Robust estimate: `M >= 2` realizations, `P >= 2` periods.
///
/// Per realization the period-averaged spectra give one FRF estimate and
/// the period-to-period spread gives its noise variance (propagated
/// through the ratio). The spread of the per-realization estimates gives
/// the total variance of the final mean; whatever exceeds the propagated
/// noise level is attributed to nonlinear distortion.
pub fn bla_robust(e: &SignalEnsemble) -> Result<BlaEstimate> {
    let (m, p) = (e.realizations, e.periods);
    if m < 2 || p < 2 {
        return Err(Error::EstimatorPrecondition(format!(
            "robust method needs M >= 2 and P >= 2, got M={m}, P={p}"
        )));
    }
    let excited = excited_from_meta(e)?;
    let u_spectra = ensemble_spectra(e, Channel::Input)?;
    let y_spectra = ensemble_spectra(e, Channel::Output)?;

    struct PerRealization {
        g: Vec<Complex64>,
        var_noise_g: Vec<f64>,
        invalid: Vec<bool>,
    }

    let mut per_m = Vec::with_capacity(m);
    for i in 0..m {
        let (u_mean, u_var) = sample_stats(&u_spectra[i])?;
        let (y_mean, y_var) = sample_stats(&y_spectra[i])?;
        let yu_cov = cross_covariance(&y_spectra[i], &u_spectra[i])?;
        let pf = p as f64;
        let mut g = Vec::with_capacity(excited.len());
        let mut var_noise_g = Vec::with_capacity(excited.len());
        let mut invalid = Vec::with_capacity(excited.len());
        for &k in &excited {
            let u0 = u_mean.bins[k];
            let y0 = y_mean.bins[k];
            match bla_from_reference(y0, u0) {
                Some(g_k) => {
                    g.push(g_k);
                    var_noise_g.push(ratio_variance(
                        g_k,
                        y0,
                        u0,
                        y_var[k] / pf,
                        u_var[k] / pf,
                        yu_cov[k] / pf,
                    ));
                    invalid.push(false);
                }
                None => {
                    g.push(Complex64::new(0.0, 0.0));
                    var_noise_g.push(0.0);
                    invalid.push(true);
                }
            }
        }
        per_m.push(PerRealization {
            g,
            var_noise_g,
            invalid,
        });
    }

    let mf = m as f64;
    let bins = excited
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let invalid = per_m.iter().any(|r| r.invalid[j]);
            if invalid {
                return BinEstimate {
                    k,
                    freq_hz: k as f64 * e.clock_freq / e.n_samples as f64,
                    g: Complex64::new(0.0, 0.0),
                    var_noise: 0.0,
                    var_total: 0.0,
                    var_nl: 0.0,
                    flags: BinFlags {
                        invalid: true,
                        effective_dof: 0.0,
                        ..Default::default()
                    },
                };
            }
            let mean_g = per_m.iter().map(|r| r.g[j]).sum::<Complex64>() / mf;
            let sample_var = per_m
                .iter()
                .map(|r| (r.g[j] - mean_g).norm_sqr())
                .sum::<f64>()
                / (mf - 1.0);
            // variance of the mean over realizations
            let var_total = sample_var / mf;
            let var_noise = per_m.iter().map(|r| r.var_noise_g[j]).sum::<f64>() / (mf * mf);
            let (var_nl, clipped) = subtract_noise(var_total, var_noise);
            BinEstimate {
                k,
                freq_hz: k as f64 * e.clock_freq / e.n_samples as f64,
                g: mean_g,
                var_noise,
                var_total,
                var_nl,
                flags: BinFlags {
                    clipped,
                    effective_dof: mf - 1.0,
                    ..Default::default()
                },
            }
        })
        .collect();

    Ok(BlaEstimate {
        method: BlaMethod::Robust,
        bins,
        detection_lines: Vec::new(),
        dof: mf - 1.0,
        realizations: m,
        periods: p,
        reference_power: e.meta.reference_power,
        seed: e.meta.seed,
        config_digest: e.meta.config_digest.clone(),
    })
}

/// In-band non-excited bins: inside the excited band, k >= 1.
fn detection_bins(excited: &[usize], n_bins: usize) -> Vec<usize> {
    let lo = *excited.first().unwrap_or(&1);
    let hi = *excited.last().unwrap_or(&0);
    (lo..=hi.min(n_bins.saturating_sub(1)))
        .filter(|k| !excited.contains(k))
        .collect()
}

/// Fast estimate from realization `m` of the ensemble.
///
/// The FRF comes from the ratio of period-averaged spectra at excited
/// bins; the noise variance from the period-to-period spread; the total
/// variance from the output residual observed at the nearest detection
/// lines (two on each side), projected through the estimated FRF and
/// referred to the excited-bin input power.
pub fn bla_fast_at(e: &SignalEnsemble, m: usize) -> Result<BlaEstimate> {
    if e.periods < 2 {
        return Err(Error::EstimatorPrecondition(format!(
            "fast method needs P >= 2 periods, got {}",
            e.periods
        )));
    }
    if m >= e.realizations {
        return Err(Error::ShapeMismatch(format!(
            "realization {m} out of range ({} available)",
            e.realizations
        )));
    }
    let excited = excited_from_meta(e)?;
    let u_spectra = &ensemble_spectra(e, Channel::Input)?[m];
    let y_spectra = &ensemble_spectra(e, Channel::Output)?[m];
    let (u_mean, u_var) = sample_stats(u_spectra)?;
    let (y_mean, y_var) = sample_stats(y_spectra)?;
    let yu_cov = cross_covariance(y_spectra, u_spectra)?;
    let n_bins = u_mean.len();
    let detection = detection_bins(&excited, n_bins);
    if detection.is_empty() {
        return Err(Error::NoDetectionLines);
    }
    let pf = e.periods as f64;

    let detection_lines: Vec<DetectionLine> = detection
        .iter()
        .map(|&k| DetectionLine {
            k,
            freq_hz: k as f64 * e.clock_freq / e.n_samples as f64,
            even: k % 2 == 0,
            residual_power: y_mean.bins[k].norm_sqr(),
        })
        .collect();

    let bins = excited
        .iter()
        .map(|&k| {
            let u0 = u_mean.bins[k];
            let y0 = y_mean.bins[k];
            let freq_hz = k as f64 * e.clock_freq / e.n_samples as f64;
            let Some(g_k) = bla_from_reference(y0, u0) else {
                return BinEstimate {
                    k,
                    freq_hz,
                    g: Complex64::new(0.0, 0.0),
                    var_noise: 0.0,
                    var_total: 0.0,
                    var_nl: 0.0,
                    flags: BinFlags {
                        invalid: true,
                        ..Default::default()
                    },
                };
            };
            let var_noise =
                ratio_variance(g_k, y0, u0, y_var[k] / pf, u_var[k] / pf, yu_cov[k] / pf);
            // nearest detection lines, two per side
            let below = detection.iter().rev().filter(|&&d| d < k).take(2);
            let above = detection.iter().filter(|&&d| d > k).take(2);
            let neighbors: Vec<usize> = below.chain(above).copied().collect();
            let residual: f64 = neighbors
                .iter()
                .map(|&d| (y_mean.bins[d] - g_k * u_mean.bins[d]).norm_sqr())
                .sum::<f64>()
                / neighbors.len() as f64;
            let var_total = residual / u0.norm_sqr();
            let (var_nl, clipped) = subtract_noise(var_total, var_noise);
            BinEstimate {
                k,
                freq_hz,
                g: g_k,
                var_noise,
                var_total,
                var_nl,
                flags: BinFlags {
                    clipped,
                    effective_dof: pf - 1.0,
                    ..Default::default()
                },
            }
        })
        .collect();

    Ok(BlaEstimate {
        method: BlaMethod::Fast,
        bins,
        detection_lines,
        dof: pf - 1.0,
        realizations: 1,
        periods: e.periods,
        reference_power: e.meta.reference_power,
        seed: e.meta.seed,
        config_digest: e.meta.config_digest.clone(),
    })
}

/// [`bla_fast_at`] on the first realization.
pub fn bla_fast(e: &SignalEnsemble) -> Result<BlaEstimate> {
    bla_fast_at(e, 0)
}

/// Fast local-polynomial estimate from realization `m`: the spectrum of
/// the whole `P`-period record (transient included) is fit bin by bin
/// with local polynomials for the FRF and the transient term. Residuals
/// at non-excited lines carry noise only (periodic distortion cannot
/// reach them), residuals at excited lines carry noise plus distortion;
/// propagating each through the fit splits the variance.
pub fn bla_fast_lpm_at(e: &SignalEnsemble, m: usize, cfg: &LpmConfig) -> Result<BlaEstimate> {
    if m >= e.realizations {
        return Err(Error::ShapeMismatch(format!(
            "realization {m} out of range ({} available)",
            e.realizations
        )));
    }
    let excited = excited_from_meta(e)?;
    let r_full = scaled_dft(&e.concatenated(Channel::Reference, m)?, e.clock_freq)?;
    let u_full = scaled_dft(&e.concatenated(Channel::Input, m)?, e.clock_freq)?;
    let y_full = scaled_dft(&e.concatenated(Channel::Output, m)?, e.clock_freq)?;
    let excited_full: Vec<usize> = excited.iter().map(|&k| k * e.periods).collect();
    let fits = lpm_fit(&r_full, &u_full, &y_full, cfg, &excited_full)?;

    let bins = excited
        .iter()
        .zip(&fits)
        .map(|(&k, fit)| {
            let freq_hz = k as f64 * e.clock_freq / e.n_samples as f64;
            let g = bla_from_reference(fit.g_ry, fit.g_ru);
            match (fit.invalid, g) {
                (false, Some(g)) => {
                    let var_total = ratio_variance(
                        g,
                        fit.g_ry,
                        fit.g_ru,
                        fit.var_y_total,
                        fit.var_u_total,
                        fit.cov_yu_total,
                    );
                    let var_noise = ratio_variance(
                        g,
                        fit.g_ry,
                        fit.g_ru,
                        fit.var_y_noise,
                        fit.var_u_noise,
                        fit.cov_yu_noise,
                    );
                    let (var_nl, clipped) = subtract_noise(var_total, var_noise);
                    BinEstimate {
                        k,
                        freq_hz,
                        g,
                        var_noise,
                        var_total,
                        var_nl,
                        flags: BinFlags {
                            clipped,
                            retried: fit.retried,
                            effective_dof: fit.effective_dof,
                            ..Default::default()
                        },
                    }
                }
                _ => BinEstimate {
                    k,
                    freq_hz,
                    g: Complex64::new(0.0, 0.0),
                    var_noise: 0.0,
                    var_total: 0.0,
                    var_nl: 0.0,
                    flags: BinFlags {
                        invalid: true,
                        retried: fit.retried,
                        ..Default::default()
                    },
                },
            }
        })
        .collect();

    Ok(BlaEstimate {
        method: BlaMethod::FastLpm,
        bins,
        detection_lines: Vec::new(),
        dof: cfg.dof as f64,
        realizations: 1,
        periods: e.periods,
        reference_power: e.meta.reference_power,
        seed: e.meta.seed,
        config_digest: e.meta.config_digest.clone(),
    })
}

/// [`bla_fast_lpm_at`] on the first realization.
pub fn bla_fast_lpm(e: &SignalEnsemble, cfg: &LpmConfig) -> Result<BlaEstimate> {
    bla_fast_lpm_at(e, 0, cfg)
}

/// Output residual of one simulated record split into its two parts: the
/// stochastic nonlinear distortion `Y_S` (fixed given the reference) and
/// the observed process noise `Y_P` (zero-mean over noise draws).
///
/// `Y_S(k) = E{Y(k)|r} - G(w_k) E{U(k)|r}` and
/// `Y_P(k) = (Y(k) - E{Y(k)|r}) - G(w_k) (U(k) - E{U(k)|r})`;
/// the conditional means come from Monte-Carlo averaging over `n_mc`
/// fresh process-noise draws with `r` frozen. This needs a simulator, so
/// it is a diagnostic for synthetic systems, not for measured data.
#[derive(Debug, Clone)]
pub struct ResidualDecomposition {
    /// Bin indices of the analysis segment (`1 .. len/2`).
    pub bins: Vec<usize>,
    pub y_s: Vec<Complex64>,
    pub y_p: Vec<Complex64>,
}

#[allow(clippy::too_many_arguments)]
pub fn residual_decomposition<G: Fn(f64) -> Complex64>(
    sys: &FeedbackSystemSpec,
    r: &[f64],
    u: &[f64],
    y: &[f64],
    noise: &LoopNoiseSpec,
    n_mc: usize,
    seed: u64,
    g_bla: G,
    segment: (usize, usize),
) -> Result<ResidualDecomposition> {
    let (skip, len) = segment;
    if skip + len > r.len() || u.len() != r.len() || y.len() != r.len() {
        return Err(Error::ShapeMismatch(
            "analysis segment exceeds the record".into(),
        ));
    }
    let (u_cond, y_cond) = conditional_mean_response(sys, r, noise, n_mc, seed)?;
    let seg = |x: &[f64]| scaled_dft(&x[skip..skip + len], 1.0);
    let u_spec = seg(u)?;
    let y_spec = seg(y)?;
    let uc_spec = seg(&u_cond)?;
    let yc_spec = seg(&y_cond)?;
    let mut bins = Vec::with_capacity(len / 2 - 1);
    let mut y_s = Vec::with_capacity(len / 2 - 1);
    let mut y_p = Vec::with_capacity(len / 2 - 1);
    for k in 1..len / 2 {
        let omega = std::f64::consts::TAU * k as f64 / len as f64;
        let g = g_bla(omega);
        bins.push(k);
        y_s.push(yc_spec.bins[k] - g * uc_spec.bins[k]);
        y_p.push((y_spec.bins[k] - yc_spec.bins[k]) - g * (u_spec.bins[k] - uc_spec.bins[k]));
    }
    Ok(ResidualDecomposition { bins, y_s, y_p })
}
