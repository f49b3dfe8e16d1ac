//! Scaled DFT, signal ensembles, and sample statistics over periods and
//! realizations.
//!
//! All spectra use the DFT normalized by `1/sqrt(N)`. Under that scaling
//! one period of a multisine comes back with the designed harmonic
//! amplitudes, and the per-bin variance of white noise equals its time
//! domain variance, independent of the record length.

use std::cell::RefCell;
use std::collections::BTreeMap;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_forward(buf: &mut [Complex64]) {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()).process(buf));
}

pub(crate) fn fft_inverse(buf: &mut [Complex64]) {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()).process(buf));
}

/// Reconstruct real time samples from a full-length scaled-DFT grid
/// (conjugate-symmetric by construction of the caller).
pub(crate) fn inverse_scaled_dft(mut full_bins: Vec<Complex64>) -> Vec<f64> {
    let n = full_bins.len();
    fft_inverse(&mut full_bins);
    let scale = 1.0 / (n as f64).sqrt();
    full_bins.iter().map(|c| c.re * scale).collect()
}

/// One-sided spectrum of a real record: bins `k = 0 .. N/2-1` of the
/// `1/sqrt(N)`-scaled DFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub n_samples: usize,
    pub clock_freq: f64,
}

impl Spectrum {
    /// Frequency in Hz of bin `k`.
    pub fn freq(&self, k: usize) -> f64 {
        k as f64 * self.clock_freq / self.n_samples as f64
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// Scaled DFT of one record: `X(k) = (1/sqrt(N)) * sum_n x(n) e^{-j2πkn/N}`
/// for `k < N/2`. `N` must be even and at least 4; any even length is
/// accepted (the FFT backend is not restricted to powers of two).
pub fn scaled_dft(samples: &[f64], clock_freq: f64) -> Result<Spectrum> {
    let n = samples.len();
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::BadRecordLength(n));
    }
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_forward(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    buf.truncate(n / 2);
    for c in &mut buf {
        *c *= scale;
    }
    Ok(Spectrum {
        bins: buf,
        n_samples: n,
        clock_freq,
    })
}

/// Named channels of a signal ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Reference,
    Input,
    Output,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Channel::Reference => write!(f, "reference"),
            Channel::Input => write!(f, "input"),
            Channel::Output => write!(f, "output"),
        }
    }
}

/// Provenance carried alongside an ensemble, so downstream estimators and
/// file exports can tell how the data was produced.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnsembleMeta {
    /// Master seed the data was generated from.
    pub seed: u64,
    /// Digest of the generating configuration.
    pub config_digest: String,
    /// Excited harmonic indices of the reference design (period grid).
    pub excited: Vec<usize>,
    /// Reference power tag `var(r)` used by multi-experiment detection.
    pub reference_power: f64,
    /// Number of warm-up periods discarded before recording.
    pub warmup_discarded: usize,
    /// Free-form provenance (for example the system preset and its
    /// parameters), carried through to downstream outputs.
    #[serde(default)]
    pub label: String,
}

/// `M` realizations x `P` periods x `N` samples per channel, all channels
/// sharing one shape and sample rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalEnsemble {
    pub realizations: usize,
    pub periods: usize,
    pub n_samples: usize,
    pub clock_freq: f64,
    /// channel -> `[M][P][N]` row-major.
    pub channels: BTreeMap<Channel, Vec<Vec<Vec<f64>>>>,
    pub meta: EnsembleMeta,
}

impl SignalEnsemble {
    pub fn new(
        realizations: usize,
        periods: usize,
        n_samples: usize,
        clock_freq: f64,
        meta: EnsembleMeta,
    ) -> Result<Self> {
        if realizations == 0 || periods == 0 {
            return Err(Error::ShapeMismatch(format!(
                "ensemble must have M >= 1 and P >= 1, got M={realizations}, P={periods}"
            )));
        }
        if n_samples < 4 || !n_samples.is_multiple_of(2) {
            return Err(Error::BadRecordLength(n_samples));
        }
        Ok(Self {
            realizations,
            periods,
            n_samples,
            clock_freq,
            channels: BTreeMap::new(),
            meta,
        })
    }

    /// Insert a channel, validating its `[M][P][N]` shape.
    pub fn insert_channel(&mut self, ch: Channel, data: Vec<Vec<Vec<f64>>>) -> Result<()> {
        if data.len() != self.realizations
            || data
                .iter()
                .any(|r| r.len() != self.periods || r.iter().any(|p| p.len() != self.n_samples))
        {
            return Err(Error::ShapeMismatch(format!(
                "channel {ch} does not match ensemble shape [{}][{}][{}]",
                self.realizations, self.periods, self.n_samples
            )));
        }
        self.channels.insert(ch, data);
        Ok(())
    }

    pub fn channel(&self, ch: Channel) -> Result<&Vec<Vec<Vec<f64>>>> {
        self.channels
            .get(&ch)
            .ok_or_else(|| Error::MissingChannel(ch.to_string()))
    }

    /// One period of one realization.
    pub fn record(&self, ch: Channel, m: usize, p: usize) -> Result<&[f64]> {
        Ok(&self.channel(ch)?[m][p])
    }

    /// All `P` periods of one realization, concatenated to a `P*N` record.
    pub fn concatenated(&self, ch: Channel, m: usize) -> Result<Vec<f64>> {
        let periods = &self.channel(ch)?[m];
        let mut out = Vec::with_capacity(self.periods * self.n_samples);
        for p in periods {
            out.extend_from_slice(p);
        }
        Ok(out)
    }
}

/// Scaled DFT of every period of every realization of one channel:
/// index as `[m][p]`.
pub fn ensemble_spectra(e: &SignalEnsemble, ch: Channel) -> Result<Vec<Vec<Spectrum>>> {
    let data = e.channel(ch)?;
    data.iter()
        .map(|realization| {
            realization
                .iter()
                .map(|period| scaled_dft(period, e.clock_freq))
                .collect()
        })
        .collect()
}

fn check_same_shape(spectra: &[Spectrum]) -> Result<()> {
    let first = &spectra[0];
    if spectra
        .iter()
        .any(|s| s.len() != first.len() || s.n_samples != first.n_samples)
    {
        return Err(Error::ShapeMismatch(
            "spectra differ in length or record size".into(),
        ));
    }
    Ok(())
}

/// Per-bin complex sample mean of a set of spectra.
pub fn spectra_mean(spectra: &[Spectrum]) -> Result<Spectrum> {
    if spectra.is_empty() {
        return Err(Error::InsufficientReplicates(0));
    }
    check_same_shape(spectra)?;
    let n = spectra.len() as f64;
    let bins = (0..spectra[0].len())
        .map(|k| spectra.iter().map(|s| s.bins[k]).sum::<Complex64>() / n)
        .collect();
    Ok(Spectrum {
        bins,
        n_samples: spectra[0].n_samples,
        clock_freq: spectra[0].clock_freq,
    })
}

/// Per-bin complex sample mean and sample variance (`1/(n-1)` scaling,
/// variance of a complex variable taken as `mean |x - mean|^2`).
pub fn sample_stats(spectra: &[Spectrum]) -> Result<(Spectrum, Vec<f64>)> {
    if spectra.len() < 2 {
        return Err(Error::InsufficientReplicates(spectra.len()));
    }
    let mean = spectra_mean(spectra)?;
    let denom = (spectra.len() - 1) as f64;
    let var = (0..mean.len())
        .map(|k| {
            spectra
                .iter()
                .map(|s| (s.bins[k] - mean.bins[k]).norm_sqr())
                .sum::<f64>()
                / denom
        })
        .collect();
    Ok((mean, var))
}

/// Per-bin complex sample cross-covariance
/// `(1/(n-1)) * sum_i (a_i - mean a) * conj(b_i - mean b)`.
pub fn cross_covariance(a: &[Spectrum], b: &[Spectrum]) -> Result<Vec<Complex64>> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(Error::InsufficientReplicates(a.len().min(b.len())));
    }
    let ma = spectra_mean(a)?;
    let mb = spectra_mean(b)?;
    if ma.len() != mb.len() {
        return Err(Error::ShapeMismatch("cross-covariance bin counts".into()));
    }
    let denom = (a.len() - 1) as f64;
    Ok((0..ma.len())
        .map(|k| {
            a.iter()
                .zip(b)
                .map(|(sa, sb)| (sa.bins[k] - ma.bins[k]) * (sb.bins[k] - mb.bins[k]).conj())
                .sum::<Complex64>()
                / denom
        })
        .collect())
}
