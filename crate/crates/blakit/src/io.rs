//! File formats shared with the command-line front end: JSON containers
//! for specs, ensembles, estimates and reports, plus plot-ready CSV
//! tables. Outputs embed the seed and a digest of the generating
//! configuration so runs can be reproduced from their files alone.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bla::BlaEstimate;
use crate::detect::DetectionReport;
use crate::error::{Error, Result};
use crate::nfir;
use crate::signals::{MultisineSpec, PeriodicSignal, PhaseLaw};
use crate::spectra::{SignalEnsemble, Spectrum};
use crate::volterra::FeedbackSystemSpec;

/// Hex SHA-256 of the canonical JSON form of a configuration value.
pub fn config_digest<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

// ---------------------------------------------------------------------------
// Multisine design files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HarmonicEntry {
    k: usize,
    amp: f64,
}

/// On-disk schema of a multisine design: sparse harmonic table plus the
/// seed it is meant to be realized with.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MultisineSpecFile {
    n_samples: usize,
    clock_freq_hz: f64,
    dc: f64,
    harmonics: Vec<HarmonicEntry>,
    phase_law: PhaseLaw,
    seed: u64,
}

pub fn write_multisine_spec(path: &Path, spec: &MultisineSpec, seed: u64) -> Result<()> {
    let harmonics = spec
        .excited()
        .into_iter()
        .map(|k| HarmonicEntry {
            k,
            amp: spec.amp_grid[k],
        })
        .collect();
    write_json(
        path,
        &MultisineSpecFile {
            n_samples: spec.n_samples,
            clock_freq_hz: spec.clock_freq,
            dc: spec.dc_value,
            harmonics,
            phase_law: spec.phase_law,
            seed,
        },
    )
}

pub fn read_multisine_spec(path: &Path) -> Result<(MultisineSpec, u64)> {
    let file: MultisineSpecFile = read_json(path)?;
    let mut amp_grid = vec![0.0; file.n_samples / 2];
    for h in &file.harmonics {
        if h.k == 0 || h.k >= amp_grid.len() {
            return Err(Error::MalformedFile(format!(
                "harmonic index {} outside (0, N/2)",
                h.k
            )));
        }
        amp_grid[h.k] = h.amp;
    }
    let spec = MultisineSpec::new(
        file.n_samples,
        file.clock_freq_hz,
        amp_grid,
        file.dc,
        file.phase_law,
    )?;
    Ok((spec, file.seed))
}

// ---------------------------------------------------------------------------
// JSON containers
// ---------------------------------------------------------------------------

pub fn write_ensemble(path: &Path, e: &SignalEnsemble) -> Result<()> {
    write_json(path, e)
}

pub fn read_ensemble(path: &Path) -> Result<SignalEnsemble> {
    read_json(path)
}

pub fn write_system_spec(path: &Path, sys: &FeedbackSystemSpec) -> Result<()> {
    write_json(path, sys)
}

pub fn read_system_spec(path: &Path) -> Result<FeedbackSystemSpec> {
    let sys: FeedbackSystemSpec = read_json(path)?;
    sys.validate()?;
    Ok(sys)
}

pub fn write_bla_estimate(path: &Path, est: &BlaEstimate) -> Result<()> {
    write_json(path, est)
}

pub fn read_bla_estimate(path: &Path) -> Result<BlaEstimate> {
    read_json(path)
}

pub fn write_detection_report(path: &Path, report: &DetectionReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_detection_report(path: &Path) -> Result<DetectionReport> {
    read_json(path)
}

// ---------------------------------------------------------------------------
// CSV tables
// ---------------------------------------------------------------------------

fn provenance_comment(seed: u64, digest: &str) -> String {
    format!("# seed={seed} config={digest}\n")
}

/// One period of a realized signal: columns `t_index,value`.
pub fn write_signal_csv(path: &Path, signal: &PeriodicSignal) -> Result<()> {
    let mut out = String::new();
    out.push_str(&provenance_comment(
        signal.seed,
        &config_digest(&signal.spec),
    ));
    out.push_str("t_index,value\n");
    for (t, v) in signal.samples.iter().enumerate() {
        out.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A one-sided spectrum: columns `k,freq_hz,re,im`.
pub fn write_spectrum_csv(path: &Path, spectrum: &Spectrum) -> Result<()> {
    let mut out = String::from("k,freq_hz,re,im\n");
    for (k, c) in spectrum.bins.iter().enumerate() {
        out.push_str(&format!("{k},{},{},{}\n", spectrum.freq(k), c.re, c.im));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn flags_token(b: &crate::bla::BinEstimate) -> String {
    let mut parts = Vec::new();
    if b.flags.invalid {
        parts.push("invalid".to_string());
    }
    if b.flags.clipped {
        parts.push("clipped".to_string());
    }
    if b.flags.retried {
        parts.push("retried".to_string());
    }
    parts.push(format!("dof={}", b.flags.effective_dof));
    parts.join(";")
}

/// FRF estimate table: columns
/// `k,freq_hz,re_g,im_g,var_noise,var_total,var_nl,flags`.
pub fn write_bla_csv(path: &Path, est: &BlaEstimate) -> Result<()> {
    let mut out = String::new();
    out.push_str(&provenance_comment(est.seed, &est.config_digest));
    out.push_str("k,freq_hz,re_g,im_g,var_noise,var_total,var_nl,flags\n");
    for b in &est.bins {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            b.k,
            b.freq_hz,
            b.g.re,
            b.g.im,
            b.var_noise,
            b.var_total,
            b.var_nl,
            flags_token(b)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Plot-ready summary of a set of per-realization estimates: per bin the
/// mean FRF magnitude in dB and the mean single-realization total and
/// noise variances, next to their closed-form values when the benchmark
/// parameters are known.
pub fn write_frf_summary_csv(
    path: &Path,
    estimates: &[BlaEstimate],
    truth: Option<&nfir::NfirParams>,
) -> Result<()> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::EstimatorPrecondition("no estimates to summarize".into()))?;
    let m = estimates.len() as f64;
    let mut out = String::new();
    out.push_str(&provenance_comment(first.seed, &first.config_digest));
    if truth.is_some() {
        out.push_str("k,freq_hz,gain_db,var_total,var_noise,gain_db_true,var_total_true_per_dof\n");
    } else {
        out.push_str("k,freq_hz,gain_db,var_total,var_noise\n");
    }
    for (i, bin) in first.bins.iter().enumerate() {
        let mean_g = estimates
            .iter()
            .map(|e| e.bins[i].g)
            .sum::<num_complex::Complex64>()
            / m;
        let var_total = estimates.iter().map(|e| e.bins[i].var_total).sum::<f64>() / m;
        let var_noise = estimates.iter().map(|e| e.bins[i].var_noise).sum::<f64>() / m;
        let gain_db = 20.0 * mean_g.norm().log10();
        match truth {
            Some(p) => {
                let omega = std::f64::consts::TAU * bin.freq_hz * p.t_s;
                let g_true = nfir::bla_true(p, omega);
                let var_true =
                    nfir::bla_variance_true(p, omega).unwrap_or(0.0) / first.dof.max(1.0);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    bin.k,
                    bin.freq_hz,
                    gain_db,
                    var_total,
                    var_noise,
                    20.0 * g_true.norm().log10(),
                    var_true
                ));
            }
            None => {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    bin.k, bin.freq_hz, gain_db, var_total, var_noise
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
