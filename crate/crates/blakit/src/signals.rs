//! Excitation design and noise sources: random-phase multisines, periodic
//! noise, and (optionally shaped) Gaussian noise.
//!
//! A multisine is designed entirely in the frequency domain: an amplitude
//! per harmonic on the grid `k * f_s / N`, a DC value, and a phase law.
//! Amplitudes are stored before the `1/sqrt(N)` Fourier-coefficient
//! scaling, which is exactly what the scaled DFT of one realized period
//! returns, so design values and measured spectra live on the same scale.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Source};
use crate::spectra;

/// Phase assignment rule for realized multisines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLaw {
    /// Independent phases, uniform on `[0, 2π)`.
    UniformRandom,
    /// All phases zero. Deterministic; for unit tests only, never for
    /// estimation runs.
    ZeroPhaseDebug,
}

/// Frequency-domain design of one periodic excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    /// Samples per period, `N`. Even, at least 4.
    pub n_samples: usize,
    /// Generator clock frequency `f_s` in Hz.
    pub clock_freq: f64,
    /// Harmonic amplitudes for `k = 0 .. N/2-1`, before the `1/sqrt(N)`
    /// Fourier-coefficient scaling. Entry 0 must be zero; DC comes from
    /// `dc_value`.
    pub amp_grid: Vec<f64>,
    /// DC value of the signal (the set-point of the system under test).
    pub dc_value: f64,
    pub phase_law: PhaseLaw,
}

impl MultisineSpec {
    pub fn new(
        n_samples: usize,
        clock_freq: f64,
        amp_grid: Vec<f64>,
        dc_value: f64,
        phase_law: PhaseLaw,
    ) -> Result<Self> {
        let spec = Self {
            n_samples,
            clock_freq,
            amp_grid,
            dc_value,
            phase_law,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 4 || !self.n_samples.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "N = {} must be even and >= 4",
                self.n_samples
            )));
        }
        if !(self.clock_freq.is_finite() && self.clock_freq > 0.0) {
            return Err(Error::InvalidSpec("clock_freq must be positive".into()));
        }
        if self.amp_grid.len() != self.n_samples / 2 {
            return Err(Error::InvalidSpec(format!(
                "amp_grid length {} must be N/2 = {}",
                self.amp_grid.len(),
                self.n_samples / 2
            )));
        }
        if self.amp_grid.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidSpec(
                "amplitudes must be finite and non-negative".into(),
            ));
        }
        if self.amp_grid[0] != 0.0 {
            return Err(Error::InvalidSpec(
                "amp_grid[0] must be zero; set DC through dc_value".into(),
            ));
        }
        if !self.dc_value.is_finite() {
            return Err(Error::InvalidSpec("dc_value must be finite".into()));
        }
        Ok(())
    }

    /// Excited harmonic indices: `k >= 1` with nonzero amplitude.
    pub fn excited(&self) -> Vec<usize> {
        (1..self.amp_grid.len())
            .filter(|&k| self.amp_grid[k] > 0.0)
            .collect()
    }

    /// Frequency in Hz of harmonic `k`.
    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.clock_freq / self.n_samples as f64
    }

    /// Drop harmonics for which `keep` returns false, then rescale the
    /// remaining amplitudes uniformly so the per-period variance equals
    /// `target_std^2` again. Used to carve detection lines out of a flat
    /// design.
    pub fn thin_harmonics<F: Fn(usize) -> bool>(&self, keep: F, target_std: f64) -> Result<Self> {
        let mut amp_grid = self.amp_grid.clone();
        for k in 1..amp_grid.len() {
            if !keep(k) {
                amp_grid[k] = 0.0;
            }
        }
        let power: f64 = amp_grid.iter().map(|a| a * a).sum::<f64>() * 2.0 / self.n_samples as f64;
        if power == 0.0 && target_std > 0.0 {
            return Err(Error::NoExcitableHarmonics {
                f_lo: f64::NAN,
                f_hi: f64::NAN,
            });
        }
        if power > 0.0 {
            let scale = target_std / power.sqrt();
            for a in &mut amp_grid {
                *a *= scale;
            }
        }
        Self::new(
            self.n_samples,
            self.clock_freq,
            amp_grid,
            self.dc_value,
            self.phase_law,
        )
    }
}

/// One realized period of a periodic excitation, with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicSignal {
    pub samples: Vec<f64>,
    pub spec: MultisineSpec,
    pub seed: u64,
}

impl PeriodicSignal {
    /// Population standard deviation over the period.
    pub fn sample_std(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Index of the harmonic at frequency `f`, with a small relative guard so
/// band edges placed exactly on a bin stay inside it.
fn harmonic_index(f: f64, n: usize, f_s: f64, round_up: bool) -> i64 {
    let x = f * n as f64 / f_s;
    let slop = 1e-9 * x.abs().max(1.0);
    if round_up {
        (x - slop).ceil() as i64
    } else {
        (x + slop).floor() as i64
    }
}

/// Design a flat multisine: every harmonic inside `[f_lo, f_hi]` excited
/// with equal amplitude, chosen so the per-period variance of the realized
/// signal equals `target_std^2` exactly.
pub fn design_flat_multisine(
    n_samples: usize,
    clock_freq: f64,
    band: (f64, f64),
    target_std: f64,
    dc: f64,
) -> Result<MultisineSpec> {
    let (f_lo, f_hi) = band;
    if !(0.0 <= f_lo && f_lo < f_hi && f_hi < clock_freq / 2.0) {
        return Err(Error::InvalidSpec(format!(
            "band [{f_lo}, {f_hi}] must satisfy 0 <= f_lo < f_hi < f_s/2 = {}",
            clock_freq / 2.0
        )));
    }
    if !(target_std.is_finite() && target_std >= 0.0) {
        return Err(Error::InvalidSpec("target_std must be >= 0".into()));
    }
    if n_samples < 4 || !n_samples.is_multiple_of(2) {
        return Err(Error::InvalidSpec(format!(
            "N = {n_samples} must be even and >= 4"
        )));
    }
    let k_lo = harmonic_index(f_lo, n_samples, clock_freq, true).max(1);
    let k_hi = harmonic_index(f_hi, n_samples, clock_freq, false).min(n_samples as i64 / 2 - 1);
    if k_lo > k_hi {
        return Err(Error::NoExcitableHarmonics { f_lo, f_hi });
    }
    let count = (k_hi - k_lo + 1) as f64;
    // (2/N) * count * amp^2 = std^2
    let amp = target_std * (n_samples as f64 / (2.0 * count)).sqrt();
    let mut amp_grid = vec![0.0; n_samples / 2];
    for k in k_lo..=k_hi {
        amp_grid[k as usize] = amp;
    }
    MultisineSpec::new(n_samples, clock_freq, amp_grid, dc, PhaseLaw::UniformRandom)
}

fn synthesize(
    spec: &MultisineSpec,
    seed: u64,
    realization: u64,
    random_amplitudes: bool,
) -> Result<PeriodicSignal> {
    spec.validate()?;
    let n = spec.n_samples;
    let mut rng = stream_rng(seed, Source::Reference, realization);
    let mut bins = vec![Complex64::new(0.0, 0.0); n];
    bins[0] = Complex64::new((n as f64).sqrt() * spec.dc_value, 0.0);
    for k in spec.excited() {
        let amp = if random_amplitudes {
            // Rayleigh with mean square equal to the designed amp^2,
            // drawn as amp * sqrt(Exp(1)).
            let e: f64 = Exp1.sample(&mut rng);
            spec.amp_grid[k] * e.sqrt()
        } else {
            spec.amp_grid[k]
        };
        let phase = match spec.phase_law {
            PhaseLaw::UniformRandom => rng.gen::<f64>() * std::f64::consts::TAU,
            PhaseLaw::ZeroPhaseDebug => 0.0,
        };
        let c = Complex64::from_polar(amp, phase);
        bins[k] = c;
        bins[n - k] = c.conj();
    }
    let samples = spectra::inverse_scaled_dft(bins);
    Ok(PeriodicSignal {
        samples,
        spec: spec.clone(),
        seed,
    })
}

/// Realize one period of a random-phase multisine. Deterministic given
/// `(spec, seed)`.
pub fn realize_multisine(spec: &MultisineSpec, seed: u64) -> Result<PeriodicSignal> {
    synthesize(spec, seed, 0, false)
}

/// Like [`realize_multisine`] but on the stream for realization number
/// `realization`, so ensembles can be generated independently and in
/// parallel from one master seed.
pub fn realize_multisine_indexed(
    spec: &MultisineSpec,
    seed: u64,
    realization: u64,
) -> Result<PeriodicSignal> {
    synthesize(spec, seed, realization, false)
}

/// Realize one period of periodic noise: like a multisine, but each
/// excited amplitude is additionally drawn (Rayleigh, mean square equal
/// to the designed `amp^2`), independent of the phases.
pub fn realize_periodic_noise(spec: &MultisineSpec, seed: u64) -> Result<PeriodicSignal> {
    synthesize(spec, seed, 0, true)
}

/// Indexed-stream variant of [`realize_periodic_noise`].
pub fn realize_periodic_noise_indexed(
    spec: &MultisineSpec,
    seed: u64,
    realization: u64,
) -> Result<PeriodicSignal> {
    synthesize(spec, seed, realization, true)
}

/// Variance of the designed signal for finite `N`: `(2/N) * sum_k amp_k^2`.
/// Equals the per-period sample variance of any realization (the phases
/// drop out of the power), and converges to the band-power integral as
/// `N` grows.
pub fn asymptotic_variance(spec: &MultisineSpec) -> f64 {
    2.0 / spec.n_samples as f64 * spec.amp_grid.iter().map(|a| a * a).sum::<f64>()
}

/// Power of the design in the band `[f1, f2]`:
/// `(1/N) * sum_{k = ceil(N f1 / f_s)}^{floor(N f2 / f_s)} amp_k^2`.
/// Two designs with Riemann-equivalent spectra agree on every band up to
/// `O(1/N)`.
pub fn riemann_band_power(spec: &MultisineSpec, f1: f64, f2: f64) -> Result<f64> {
    if f1 >= f2 {
        return Err(Error::EmptyBand { f1, f2 });
    }
    if !(f1 > 0.0 && f2 < spec.clock_freq / 2.0) {
        return Err(Error::InvalidSpec(format!(
            "band [{f1}, {f2}] must satisfy 0 < f1 < f2 < f_s/2"
        )));
    }
    let k1 = harmonic_index(f1, spec.n_samples, spec.clock_freq, true).max(1) as usize;
    let k2 = harmonic_index(f2, spec.n_samples, spec.clock_freq, false)
        .min(spec.n_samples as i64 / 2 - 1);
    if k2 < k1 as i64 {
        return Ok(0.0);
    }
    Ok(spec.amp_grid[k1..=k2 as usize]
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        / spec.n_samples as f64)
}

/// A discrete-time LTI shaping filter `b(q)/a(q)` for colored noise.
/// `a[0]` is normalized to 1; all poles must lie strictly inside the unit
/// circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl ShapingFilter {
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if b.is_empty() || a.is_empty() || a[0] == 0.0 {
            return Err(Error::InvalidSpec(
                "shaping filter needs b non-empty and a[0] != 0".into(),
            ));
        }
        let a0 = a[0];
        let filt = Self {
            b: b.into_iter().map(|x| x / a0).collect(),
            a: a.into_iter().map(|x| x / a0).collect(),
        };
        if !filt.is_stable() {
            return Err(Error::UnstableFilter);
        }
        Ok(filt)
    }

    /// Schur-Cohn test on the denominator: stable iff every reflection
    /// coefficient has magnitude below one.
    pub fn is_stable(&self) -> bool {
        let mut a: Vec<f64> = self.a.clone();
        while a.len() > 1 {
            let p = a.len() - 1;
            let k = a[p];
            if !k.is_finite() || k.abs() >= 1.0 {
                return false;
            }
            let denom = 1.0 - k * k;
            let next: Vec<f64> = (0..p).map(|i| (a[i] - k * a[p - i]) / denom).collect();
            a = next;
        }
        true
    }

    /// Run the filter over `x` (direct form II transposed, zero initial
    /// state).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let order = self.b.len().max(self.a.len()) - 1;
        let mut b = self.b.clone();
        let mut a = self.a.clone();
        b.resize(order + 1, 0.0);
        a.resize(order + 1, 0.0);
        let mut z = vec![0.0; order];
        let mut y = Vec::with_capacity(x.len());
        for &xi in x {
            let yi = b[0] * xi + z.first().copied().unwrap_or(0.0);
            for i in 0..order {
                let znext = if i + 1 < order { z[i + 1] } else { 0.0 };
                z[i] = b[i + 1] * xi + znext - a[i + 1] * yi;
            }
            y.push(yi);
        }
        y
    }

    /// RMS gain for stationary white input: `sqrt(sum h^2)` of the impulse
    /// response, accumulated until the tail is negligible.
    pub fn noise_gain(&self) -> f64 {
        let order = self.b.len().max(self.a.len()) - 1;
        let mut b = self.b.clone();
        let mut a = self.a.clone();
        b.resize(order + 1, 0.0);
        a.resize(order + 1, 0.0);
        let mut z = vec![0.0; order];
        let mut total = 0.0;
        let mut t = 0usize;
        let mut quiet = 0usize;
        loop {
            let xi = if t == 0 { 1.0 } else { 0.0 };
            let h = b[0] * xi + z.first().copied().unwrap_or(0.0);
            for i in 0..order {
                let znext = if i + 1 < order { z[i + 1] } else { 0.0 };
                z[i] = b[i + 1] * xi + znext - a[i + 1] * h;
            }
            total += h * h;
            quiet = if h * h <= 1e-30 * total.max(1e-300) {
                quiet + 1
            } else {
                0
            };
            t += 1;
            if (quiet > 2 * order.max(1) && t > order) || t >= 1 << 22 {
                break;
            }
        }
        total.sqrt()
    }
}

/// A Gaussian noise source: i.i.d. `N(0, std_dev^2)`, optionally shaped by
/// a stable LTI filter with the output rescaled so the stationary standard
/// deviation stays `std_dev`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std_dev: f64,
    pub shaping: Option<ShapingFilter>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn white(std_dev: f64, seed: u64) -> Self {
        Self {
            std_dev,
            shaping: None,
            seed,
        }
    }
}

/// Draw `n` noise samples. The stream is independent of every multisine
/// stream by construction, honoring the independence assumption between
/// reference and noise sources.
pub fn gaussian_noise(n: usize, spec: &NoiseSpec) -> Result<Vec<f64>> {
    gaussian_noise_indexed(n, spec, 0)
}

/// Indexed-stream variant of [`gaussian_noise`] for per-realization draws.
pub fn gaussian_noise_indexed(n: usize, spec: &NoiseSpec, realization: u64) -> Result<Vec<f64>> {
    draw_noise(n, spec, Source::ProcessNoise, realization)
}

/// Measurement-noise draw on its own stream family, disjoint from both the
/// reference and the process-noise streams. `output_side` selects the
/// stream for the output sensor rather than the input sensor.
pub fn measurement_noise_indexed(
    n: usize,
    spec: &NoiseSpec,
    output_side: bool,
    realization: u64,
) -> Result<Vec<f64>> {
    let source = if output_side {
        Source::MeasurementNoiseOutput
    } else {
        Source::MeasurementNoiseInput
    };
    draw_noise(n, spec, source, realization)
}

/// Draw on an explicit stream family; used by the simulators to separate
/// Monte-Carlo replicas from recorded process noise.
pub(crate) fn noise_from_source(
    n: usize,
    spec: &NoiseSpec,
    source: Source,
    realization: u64,
) -> Result<Vec<f64>> {
    draw_noise(n, spec, source, realization)
}

fn draw_noise(n: usize, spec: &NoiseSpec, source: Source, realization: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidSpec("noise length must be >= 1".into()));
    }
    if !(spec.std_dev.is_finite() && spec.std_dev >= 0.0) {
        return Err(Error::InvalidSpec("std_dev must be >= 0".into()));
    }
    if let Some(f) = &spec.shaping {
        if !f.is_stable() {
            return Err(Error::UnstableFilter);
        }
    }
    if spec.std_dev == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut rng = stream_rng(spec.seed, source, realization);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    match &spec.shaping {
        None => Ok(white.into_iter().map(|x| x * spec.std_dev).collect()),
        Some(f) => {
            let gain = f.noise_gain();
            if gain == 0.0 {
                return Err(Error::InvalidSpec("shaping filter has zero gain".into()));
            }
            let scale = spec.std_dev / gain;
            Ok(f.apply(&white).into_iter().map(|y| y * scale).collect())
        }
    }
}
