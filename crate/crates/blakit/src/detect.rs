//! Classify nonlinear behavior from BLA estimates taken at two or more
//! reference powers.
//!
//! Raising the reference power and watching what moves separates two kinds
//! of nonlinearity: an input-output nonlinearity (type I) changes the BLA
//! and/or its distortion variance, while an input-process-noise
//! interaction (type II) shows up as a noise variance that fails to fall
//! off inversely with the reference power. If nothing moves and the total
//! variance matches the noise variance, the linear hypothesis stands.

use serde::{Deserialize, Serialize};

use crate::bla::BlaEstimate;
use crate::error::{Error, Result};

/// A set of BLA estimates of one system at different reference powers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSet {
    pub estimates: Vec<BlaEstimate>,
}

impl ExperimentSet {
    pub fn new(estimates: Vec<BlaEstimate>) -> Result<Self> {
        let set = Self { estimates };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut powers: Vec<f64> = self.estimates.iter().map(|e| e.reference_power).collect();
        powers.sort_by(f64::total_cmp);
        powers.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs());
        if powers.len() < 2 {
            return Err(Error::NeedTwoPowers(powers.len()));
        }
        if self.common_bins().is_empty() {
            return Err(Error::EstimatorPrecondition(
                "experiments share no valid excited bins".into(),
            ));
        }
        Ok(())
    }

    /// Bins valid in every experiment, by harmonic index.
    pub fn common_bins(&self) -> Vec<usize> {
        let Some(first) = self.estimates.first() else {
            return Vec::new();
        };
        first
            .bins
            .iter()
            .filter(|b| !b.flags.invalid)
            .map(|b| b.k)
            .filter(|&k| {
                self.estimates[1..]
                    .iter()
                    .all(|e| e.bins.iter().any(|b| b.k == k && !b.flags.invalid))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeIVerdict {
    Yes,
    No,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearHypothesis {
    Consistent,
    Rejected,
}

/// A per-bin test aggregated over the common bins, majority-weighted by
/// the FRF magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateTest {
    pub decision: bool,
    /// Weighted fraction of bins whose score exceeds the threshold.
    pub exceeding_fraction: f64,
    /// Weighted median score.
    pub median_score: f64,
}

/// Log-log regression of the FRF noise variance on the reference power.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversePowerTest {
    pub decision: bool,
    /// Mean per-bin slope; absent when no bin carries measurable noise.
    pub mean_slope: Option<f64>,
    pub slope_se: Option<f64>,
}

/// Per-bin detail retained alongside the aggregate verdicts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinDetail {
    pub k: usize,
    pub freq_hz: f64,
    /// Aggregation weight (mean FRF magnitude over experiments).
    pub weight: f64,
    /// Largest pairwise BLA-change significance.
    pub z_bla: f64,
    /// Largest pairwise distortion-variance-change significance.
    pub z_var_nl: f64,
    /// Largest total-to-noise variance ratio over experiments.
    pub total_noise_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub z_threshold: f64,
    pub reference_powers: Vec<f64>,
    pub bla_changed: AggregateTest,
    pub var_nl_changed: AggregateTest,
    /// Whether any experiment carries measurable distortion variance at a
    /// weighted majority... of bins; without it the distortion test says
    /// nothing (distortion may hide under the noise floor).
    pub var_nl_informative: bool,
    /// Noise variance inversely proportional to the reference power,
    /// evaluated on the FRF noise variance.
    pub var_noise_inverse_power: InversePowerTest,
    /// Total variance significantly above the noise variance anywhere.
    pub excess_total_variance: AggregateTest,
    pub type_i: TypeIVerdict,
    pub type_ii: bool,
    pub linear_hypothesis: LinearHypothesis,
    pub per_bin: Vec<BinDetail>,
}

/// Weighted median of `(value, weight)` pairs.
fn weighted_median(pairs: &mut [(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (v, w) in pairs.iter() {
        acc += w;
        if acc >= 0.5 * total {
            return *v;
        }
    }
    pairs.last().unwrap().0
}

fn aggregate(scores: &[(f64, f64)], z_threshold: f64) -> AggregateTest {
    let total_w: f64 = scores.iter().map(|s| s.1).sum();
    let exceeding: f64 = scores
        .iter()
        .filter(|(z, _)| *z > z_threshold)
        .map(|(_, w)| w)
        .sum();
    let fraction = if total_w > 0.0 {
        exceeding / total_w
    } else {
        0.0
    };
    let mut pairs = scores.to_vec();
    AggregateTest {
        decision: fraction > 0.5,
        exceeding_fraction: fraction,
        median_score: weighted_median(&mut pairs),
    }
}

/// Classify the nonlinear behavior of the system behind an experiment
/// set. `z_threshold` (default 3) scales every significance test; raising
/// it never flips a negative verdict to a positive one.
pub fn classify_nonlinearity(xs: &ExperimentSet, z_threshold: f64) -> Result<DetectionReport> {
    xs.validate()?;
    if !(z_threshold.is_finite() && z_threshold > 0.0) {
        return Err(Error::InvalidSpec("z_threshold must be positive".into()));
    }
    let bins = xs.common_bins();
    let n_exp = xs.estimates.len();

    // index the estimates' bins by harmonic number once
    let lookup: Vec<std::collections::BTreeMap<usize, usize>> = xs
        .estimates
        .iter()
        .map(|e| e.bins.iter().enumerate().map(|(i, b)| (b.k, i)).collect())
        .collect();
    let bin_of = |exp: usize, k: usize| &xs.estimates[exp].bins[lookup[exp][&k]];

    let mut per_bin = Vec::with_capacity(bins.len());
    let mut bla_scores = Vec::with_capacity(bins.len());
    let mut vnl_scores = Vec::with_capacity(bins.len());
    let mut excess_scores = Vec::with_capacity(bins.len());
    let mut informative_scores = Vec::with_capacity(bins.len());
    let mut slopes = Vec::new();

    for &k in &bins {
        let weight = (0..n_exp).map(|e| bin_of(e, k).g.norm()).sum::<f64>() / n_exp as f64;
        let mut z_bla = 0.0f64;
        let mut z_vnl = 0.0f64;
        for i in 0..n_exp {
            let a = bin_of(i, k);
            let dof_a = xs.estimates[i].dof.max(1.0);
            for j in i + 1..n_exp {
                let b = bin_of(j, k);
                let dof_b = xs.estimates[j].dof.max(1.0);
                let denom = (a.var_total + b.var_total).sqrt();
                if denom > 0.0 {
                    z_bla = z_bla.max((a.g - b.g).norm() / denom);
                }
                // variance-of-variance spread: relative sd ~ sqrt(2/dof)
                let spread =
                    (2.0 * a.var_total.powi(2) / dof_a + 2.0 * b.var_total.powi(2) / dof_b).sqrt();
                if spread > 0.0 {
                    z_vnl = z_vnl.max((a.var_nl - b.var_nl).abs() / spread);
                }
            }
        }
        // distortion measurable at all when var_nl clears the noise-floor
        // uncertainty in some experiment
        let z_informative = (0..n_exp)
            .map(|e| {
                let b = bin_of(e, k);
                let floor = b.var_noise * (2.0 / xs.estimates[e].dof.max(1.0)).sqrt();
                if floor > 0.0 {
                    b.var_nl / floor
                } else if b.var_nl > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0f64, f64::max);
        let ratio_of = |e: usize| {
            let b = bin_of(e, k);
            if b.var_noise > 0.0 {
                b.var_total / b.var_noise
            } else if b.var_total > 0.0 {
                f64::INFINITY
            } else {
                1.0
            }
        };
        let ratio = (0..n_exp).map(ratio_of).fold(0.0f64, f64::max);
        // excess score: how many variance-estimate spreads the ratio sits
        // above one
        let excess = (0..n_exp)
            .map(|e| {
                let spread = 2.0 * (2.0 / xs.estimates[e].dof.max(1.0)).sqrt();
                ((ratio_of(e) - 1.0) / spread).max(0.0)
            })
            .fold(0.0f64, f64::max);
        per_bin.push(BinDetail {
            k,
            freq_hz: bin_of(0, k).freq_hz,
            weight,
            z_bla,
            z_var_nl: z_vnl,
            total_noise_ratio: ratio,
        });
        bla_scores.push((z_bla, weight));
        vnl_scores.push((z_vnl, weight));
        excess_scores.push((excess, weight));
        informative_scores.push((z_informative, weight));

        // per-bin log-log slope of the noise variance vs reference power
        let pts: Vec<(f64, f64)> = (0..n_exp)
            .filter_map(|e| {
                let vn = bin_of(e, k).var_noise;
                let p = xs.estimates[e].reference_power;
                (vn > 0.0 && p > 0.0).then(|| (p.ln(), vn.ln()))
            })
            .collect();
        if pts.len() == n_exp {
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            if sxx > 0.0 {
                let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
                slopes.push((sxy / sxx, weight));
            }
        }
    }

    let bla_changed = aggregate(&bla_scores, z_threshold);
    let var_nl_changed = aggregate(&vnl_scores, z_threshold);
    let excess_total_variance = aggregate(&excess_scores, z_threshold);
    let var_nl_informative = aggregate(&informative_scores, z_threshold).decision;

    // inverse-power test on the weighted mean slope; the absolute guard
    // of 0.3 keeps the band meaningful when hundreds of bins shrink the
    // standard error below the systematic wiggle of variance estimates
    let var_noise_inverse_power = if slopes.is_empty() {
        InversePowerTest {
            decision: true,
            mean_slope: None,
            slope_se: None,
        }
    } else {
        let wsum: f64 = slopes.iter().map(|s| s.1).sum();
        let mean = slopes.iter().map(|(s, w)| s * w).sum::<f64>() / wsum;
        let var = slopes
            .iter()
            .map(|(s, w)| w * (s - mean).powi(2))
            .sum::<f64>()
            / wsum;
        let se = (var / slopes.len() as f64).sqrt();
        let band = (z_threshold * se).max(0.3);
        InversePowerTest {
            decision: (mean + 1.0).abs() <= band,
            mean_slope: Some(mean),
            slope_se: Some(se),
        }
    };

    let type_ii = !var_noise_inverse_power.decision;
    let type_i = if bla_changed.decision || (var_nl_informative && var_nl_changed.decision) {
        TypeIVerdict::Yes
    } else if var_nl_informative || !type_ii {
        // distortion measurable but unchanged, and the BLA unchanged; or
        // no process-noise interaction that could hide it
        TypeIVerdict::No
    } else {
        // nothing measurable and a type-II noise floor that could hide it
        TypeIVerdict::Undecided
    };
    let linear_hypothesis =
        if excess_total_variance.decision || type_i == TypeIVerdict::Yes || type_ii {
            LinearHypothesis::Rejected
        } else {
            LinearHypothesis::Consistent
        };

    Ok(DetectionReport {
        z_threshold,
        reference_powers: xs.estimates.iter().map(|e| e.reference_power).collect(),
        bla_changed,
        var_nl_changed,
        var_nl_informative,
        var_noise_inverse_power,
        excess_total_variance,
        type_i,
        type_ii,
        linear_hypothesis,
        per_bin,
    })
}

/// [`classify_nonlinearity`] at the conventional three-sigma threshold.
pub fn classify_nonlinearity_default(xs: &ExperimentSet) -> Result<DetectionReport> {
    classify_nonlinearity(xs, 3.0)
}

impl DetectionReport {
    /// Human-readable summary mirroring the change-in-reference-power
    /// decision table.
    pub fn render_table(&self) -> String {
        let yn = |b: bool| if b { "yes" } else { "no" };
        let mut out = String::new();
        out.push_str(&format!(
            "Change in reference power ({} experiments, powers {:?}, z = {}):\n",
            self.reference_powers.len(),
            self.reference_powers,
            self.z_threshold
        ));
        out.push_str(&format!(
            "  BLA changes?                     {:>9}   (weighted fraction {:.2}, median z {:.2})\n",
            yn(self.bla_changed.decision),
            self.bla_changed.exceeding_fraction,
            self.bla_changed.median_score
        ));
        out.push_str(&format!(
            "  distortion variance changes?     {:>9}   (informative: {}, fraction {:.2})\n",
            yn(self.var_nl_changed.decision),
            yn(self.var_nl_informative),
            self.var_nl_changed.exceeding_fraction
        ));
        let slope = self
            .var_noise_inverse_power
            .mean_slope
            .map(|s| format!("{s:.2}"))
            .unwrap_or_else(|| "n/a".into());
        out.push_str(&format!(
            "  noise variance ~ 1/ref power?    {:>9}   (log-log slope {slope} on the FRF noise variance)\n",
            yn(self.var_noise_inverse_power.decision)
        ));
        out.push_str(&format!(
            "  total variance above noise?      {:>9}   (fraction {:.2})\n",
            yn(self.excess_total_variance.decision),
            self.excess_total_variance.exceeding_fraction
        ));
        let type_i = match self.type_i {
            TypeIVerdict::Yes => "yes",
            TypeIVerdict::No => "no",
            TypeIVerdict::Undecided => "undecided",
        };
        out.push_str(&format!(
            "  => type I  (input-output nonlinearity):      {type_i}\n"
        ));
        out.push_str(&format!(
            "  => type II (input-process-noise interaction): {}\n",
            yn(self.type_ii)
        ));
        out.push_str(&format!(
            "  => linear hypothesis: {}\n",
            match self.linear_hypothesis {
                LinearHypothesis::Consistent => "consistent",
                LinearHypothesis::Rejected => "rejected",
            }
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bla::bla_robust;
    use crate::signals::{design_flat_multisine, NoiseSpec};
    use crate::volterra::{
        simulate_ensemble, FeedbackSystemSpec, KernelForm, KernelSet, LoopNoiseSpec,
        RecordingConfig, Tap, TimeDomain, VolterraKernel, NOISE_INPUT, SIGNAL_INPUT,
    };

    fn taps_kernel(taps: Vec<Tap>) -> VolterraKernel {
        VolterraKernel {
            form: KernelForm::Taps { taps },
            time_domain: TimeDomain::Discrete,
        }
    }

    /// Robust estimate of `sys` at reference std `sigma_r`.
    fn experiment(
        sys: &FeedbackSystemSpec,
        sigma_r: f64,
        sigma_w: f64,
        meas_noise: f64,
        m: usize,
        seed: u64,
    ) -> BlaEstimate {
        let n = 128;
        let spec = design_flat_multisine(n, 1.0, (0.0, 0.49), sigma_r, 0.0).unwrap();
        let mut cfg = RecordingConfig::steady_state(2);
        if meas_noise > 0.0 {
            cfg.meas_noise_y = Some(NoiseSpec::white(meas_noise, seed));
        }
        let e = simulate_ensemble(
            sys,
            &spec,
            &LoopNoiseSpec::plant_only(NoiseSpec::white(sigma_w, seed)),
            m,
            &cfg,
            seed,
        )
        .unwrap();
        bla_robust(&e).unwrap()
    }

    fn nfir_experiments(seed: u64) -> ExperimentSet {
        let sys = FeedbackSystemSpec::nfir_benchmark(0.3);
        ExperimentSet::new(vec![
            experiment(&sys, 1.0, 0.75, 0.0, 32, seed),
            experiment(&sys, 2.0, 0.75, 0.0, 32, seed + 1),
        ])
        .unwrap()
    }

    fn lti_experiments(seed: u64) -> ExperimentSet {
        let plant = KernelSet::new(vec![taps_kernel(vec![Tap::new(
            0.8,
            vec![(SIGNAL_INPUT, vec![1])],
        )])]);
        let sys = FeedbackSystemSpec::from_plant(plant, 0.2);
        ExperimentSet::new(vec![
            experiment(&sys, 1.0, 0.0, 0.02, 32, seed),
            experiment(&sys, 2.0, 0.0, 0.02, 32, seed + 1),
        ])
        .unwrap()
    }

    fn cubic_experiments(seed: u64) -> ExperimentSet {
        let plant = KernelSet::new(vec![
            taps_kernel(vec![Tap::new(1.0, vec![(SIGNAL_INPUT, vec![0])])]),
            taps_kernel(vec![Tap::new(0.1, vec![(SIGNAL_INPUT, vec![0, 0, 0])])]),
        ]);
        let sys = FeedbackSystemSpec::from_plant(plant, 0.0);
        ExperimentSet::new(vec![
            experiment(&sys, 0.5, 0.0, 1e-3, 32, seed),
            experiment(&sys, 1.0, 0.0, 1e-3, 32, seed + 1),
        ])
        .unwrap()
    }

    #[test]
    fn benchmark_classifies_as_type_ii() {
        let report = classify_nonlinearity_default(&nfir_experiments(50)).unwrap();
        assert!(report.type_ii, "{}", report.render_table());
        assert_eq!(report.type_i, TypeIVerdict::Undecided);
        assert!(!report.bla_changed.decision);
        assert_eq!(report.linear_hypothesis, LinearHypothesis::Rejected);
    }

    #[test]
    fn linear_system_with_measurement_noise_is_consistent() {
        let report = classify_nonlinearity_default(&lti_experiments(60)).unwrap();
        assert_eq!(
            report.linear_hypothesis,
            LinearHypothesis::Consistent,
            "{}",
            report.render_table()
        );
        assert_eq!(report.type_i, TypeIVerdict::No);
        assert!(!report.type_ii);
        let slope = report.var_noise_inverse_power.mean_slope.unwrap();
        assert!((slope + 1.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn static_cubic_classifies_as_type_i() {
        let report = classify_nonlinearity_default(&cubic_experiments(70)).unwrap();
        assert_eq!(
            report.type_i,
            TypeIVerdict::Yes,
            "{}",
            report.render_table()
        );
        assert!(report.bla_changed.decision);
        assert_eq!(report.linear_hypothesis, LinearHypothesis::Rejected);
    }

    #[test]
    fn classification_is_deterministic() {
        let xs = nfir_experiments(80);
        let a = classify_nonlinearity_default(&xs).unwrap();
        let b = classify_nonlinearity_default(&xs).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn raising_threshold_never_creates_detections() {
        for xs in [nfir_experiments(90), cubic_experiments(91)] {
            let mut last = classify_nonlinearity(&xs, 1.0).unwrap();
            for z in [2.0, 3.0, 5.0, 10.0, 30.0] {
                let next = classify_nonlinearity(&xs, z).unwrap();
                assert!(!(next.bla_changed.decision && !last.bla_changed.decision));
                assert!(!(next.var_nl_changed.decision && !last.var_nl_changed.decision));
                assert!(!(next.type_i == TypeIVerdict::Yes && last.type_i != TypeIVerdict::Yes));
                last = next;
            }
        }
    }

    #[test]
    fn single_power_rejected() {
        let sys = FeedbackSystemSpec::nfir_benchmark(0.3);
        let e = experiment(&sys, 1.0, 0.75, 0.0, 8, 7);
        assert!(matches!(
            ExperimentSet::new(vec![e.clone(), e]),
            Err(Error::NeedTwoPowers(1))
        ));
    }

    #[test]
    fn noise_level_shift_moves_resonant_bla_beyond_its_uncertainty() {
        // A resonant loop with the noise entering multiplicatively on a
        // tap: raising the noise level shifts the estimated FRF by far
        // more than the combined standard deviations.
        let plant = KernelSet::new(vec![taps_kernel(vec![
            Tap::new(0.9, vec![(SIGNAL_INPUT, vec![1])]),
            Tap::new(
                1.0,
                vec![(SIGNAL_INPUT, vec![1]), (NOISE_INPUT, vec![0, 0])],
            ),
            Tap::new(0.7, vec![(SIGNAL_INPUT, vec![2])]),
        ])]);
        let sys = FeedbackSystemSpec::from_plant(plant, 0.8);
        let low = experiment(&sys, 1.0, 0.2, 0.0, 128, 100);
        let high = experiment(&sys, 1.0, 0.6, 0.0, 128, 101);
        let mut big_moves = 0;
        let mut total = 0;
        let mut max_z = 0.0f64;
        for (a, b) in low.bins.iter().zip(&high.bins) {
            if a.flags.invalid || b.flags.invalid {
                continue;
            }
            total += 1;
            let z = (a.g - b.g).norm() / (a.var_total + b.var_total).sqrt();
            max_z = max_z.max(z);
            if z > 3.0 {
                big_moves += 1;
            }
        }
        // the shift is concentrated around the resonance, where the
        // estimate is also at its most precise
        assert!(
            big_moves as f64 > 0.25 * total as f64,
            "{big_moves}/{total} bins moved"
        );
        assert!(max_z > 10.0, "largest move only {max_z:.1} sigma");
        // the gain peak sits at a lower harmonic once the effective
        // first tap grows with the noise power
        let peak = |est: &BlaEstimate| {
            est.bins
                .iter()
                .max_by(|a, b| a.g.norm().total_cmp(&b.g.norm()))
                .unwrap()
                .k
        };
        assert_ne!(peak(&low), peak(&high));
        // and each noise level alone still reads as a type-II system
        let xs = ExperimentSet::new(vec![
            experiment(&sys, 0.7, 0.6, 0.0, 48, 102),
            experiment(&sys, 1.4, 0.6, 0.0, 48, 103),
        ])
        .unwrap();
        let report = classify_nonlinearity_default(&xs).unwrap();
        assert!(report.type_ii, "{}", report.render_table());
    }
}
