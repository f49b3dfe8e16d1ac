//! Finite-degree Volterra kernels and simulators: open loop, closed loop
//! with process noise on every block, and exact discretization of
//! continuous-time kernels under zero-order-hold input.
//!
//! Discrete-time kernels come in three forms. Sparse taps carry products
//! of named input channels at given lags (this is how noise couples into
//! a block: a tap may mix `"in"` and `"noise"` lags). Dense grids hold a
//! full degree-1 or degree-2 kernel on the sampling grid. Separable
//! kernels hold one 1-D factor per axis; their multi-dimensional
//! convolution collapses to a product of 1-D convolutions, which keeps
//! degree >= 3 affordable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{
    realize_multisine_indexed, realize_periodic_noise_indexed, MultisineSpec, NoiseSpec,
};
use crate::spectra::{Channel, EnsembleMeta, SignalEnsemble};

/// Divergence guard on loop signals; far above any test-signal scale.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Largest dense degree-2 grid side.
pub const DENSE_GRID_CAP: usize = 4096;

/// Conventional input names inside a feedback block.
pub const SIGNAL_INPUT: &str = "in";
pub const NOISE_INPUT: &str = "noise";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDomain {
    Continuous,
    Discrete,
}

/// One sparse tap: `coeff * prod_l prod_i x_l(t - lag_{l,i})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub coeff: f64,
    /// Per input name, the lags of each factor drawn from that input.
    pub lags: Vec<(String, Vec<usize>)>,
}

impl Tap {
    pub fn new(coeff: f64, lags: Vec<(&str, Vec<usize>)>) -> Self {
        Self {
            coeff,
            lags: lags.into_iter().map(|(n, l)| (n.to_string(), l)).collect(),
        }
    }

    /// Total degree of the tap (number of signal factors).
    pub fn degree(&self) -> usize {
        self.lags.iter().map(|(_, l)| l.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum KernelForm {
    /// Sparse multi-input taps.
    Taps { taps: Vec<Tap> },
    /// Dense single-input kernel of degree `shape.len()` (1 or 2).
    DenseGrid {
        input: String,
        shape: Vec<usize>,
        values: Vec<f64>,
    },
    /// Separable single-input kernel: one 1-D factor per axis.
    Separable { input: String, axes: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolterraKernel {
    pub form: KernelForm,
    pub time_domain: TimeDomain,
}

impl VolterraKernel {
    pub fn discrete(form: KernelForm) -> Result<Self> {
        let k = Self {
            form,
            time_domain: TimeDomain::Discrete,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.form {
            KernelForm::Taps { taps } => {
                if taps.iter().any(|t| !t.coeff.is_finite()) {
                    return Err(Error::InvalidSpec("tap coefficients must be finite".into()));
                }
            }
            KernelForm::DenseGrid { shape, values, .. } => {
                let len: usize = shape.iter().product();
                if shape.is_empty() || shape.len() > 2 {
                    return Err(Error::UnsupportedKernelForm(format!(
                        "dense grids support degree 1 or 2, got degree {}",
                        shape.len()
                    )));
                }
                if shape.len() == 2 && shape.iter().any(|&s| s > DENSE_GRID_CAP) {
                    return Err(Error::DenseGridTooLarge(*shape.iter().max().unwrap()));
                }
                if values.len() != len {
                    return Err(Error::ShapeMismatch(format!(
                        "dense grid holds {} values for shape {:?}",
                        values.len(),
                        shape
                    )));
                }
            }
            KernelForm::Separable { axes, .. } => {
                if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
                    return Err(Error::InvalidSpec(
                        "separable kernel needs non-empty axes".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Kernel degree (number of input factors per output term).
    pub fn degree(&self) -> usize {
        match &self.form {
            KernelForm::Taps { taps } => taps.iter().map(Tap::degree).max().unwrap_or(0),
            KernelForm::DenseGrid { shape, .. } => shape.len(),
            KernelForm::Separable { axes, .. } => axes.len(),
        }
    }

    /// Smallest lag at which the named input enters with a nonzero
    /// coefficient; `None` if the input does not enter at all.
    pub fn min_lag(&self, input: &str) -> Option<usize> {
        match &self.form {
            KernelForm::Taps { taps } => taps
                .iter()
                .filter(|t| t.coeff != 0.0)
                .flat_map(|t| {
                    t.lags
                        .iter()
                        .filter(|(name, _)| name == input)
                        .flat_map(|(_, lags)| lags.iter().copied())
                })
                .min(),
            KernelForm::DenseGrid {
                input: name,
                shape,
                values,
            } => {
                if name != input {
                    return None;
                }
                match shape.len() {
                    1 => values.iter().position(|&v| v != 0.0),
                    2 => {
                        let (n1, n2) = (shape[0], shape[1]);
                        let mut min = None;
                        for i in 0..n1 {
                            for j in 0..n2 {
                                if values[i * n2 + j] != 0.0 {
                                    let m = i.min(j);
                                    min = Some(min.map_or(m, |cur: usize| cur.min(m)));
                                }
                            }
                        }
                        min
                    }
                    _ => None,
                }
            }
            KernelForm::Separable { input: name, axes } => {
                if name != input {
                    return None;
                }
                axes.iter()
                    .filter_map(|a| a.iter().position(|&v| v != 0.0))
                    .min()
            }
        }
    }
}

/// A set of kernels plus the constant term of the series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelSet {
    pub constant: f64,
    pub kernels: Vec<VolterraKernel>,
}

impl KernelSet {
    pub fn new(kernels: Vec<VolterraKernel>) -> Self {
        Self {
            constant: 0.0,
            kernels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in &self.kernels {
            k.validate()?;
            if k.time_domain == TimeDomain::Continuous {
                return Err(Error::DiscretizeFirst);
            }
        }
        Ok(())
    }

    pub fn min_lag(&self, input: &str) -> Option<usize> {
        self.kernels.iter().filter_map(|k| k.min_lag(input)).min()
    }
}

/// Sample `x(t - lag)` with zero pre-history.
#[inline]
fn delayed(x: &[f64], t: usize, lag: usize) -> f64 {
    if lag > t {
        0.0
    } else {
        x[t - lag]
    }
}

fn resolve<'a>(name: &str, inputs: &[(&str, &'a [f64])]) -> Result<&'a [f64]> {
    inputs
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, x)| *x)
        .ok_or_else(|| Error::MissingChannel(name.to_string()))
}

/// Evaluate one kernel set at a single time index against (possibly
/// partial) input histories. For the `"in"` history of a feedback plant
/// the slice only reaches `t-1`; validated min-lags keep indexing in
/// range.
fn eval_set_at(set: &KernelSet, t: usize, inputs: &[(&str, &[f64])]) -> Result<f64> {
    let mut acc = set.constant;
    for kernel in &set.kernels {
        match &kernel.form {
            KernelForm::Taps { taps } => {
                for tap in taps {
                    let mut term = tap.coeff;
                    for (name, lags) in &tap.lags {
                        let x = resolve(name, inputs)?;
                        for &lag in lags {
                            term *= delayed(x, t, lag);
                        }
                    }
                    acc += term;
                }
            }
            KernelForm::DenseGrid {
                input,
                shape,
                values,
            } => {
                let x = resolve(input, inputs)?;
                match shape.len() {
                    1 => {
                        for lag in 0..shape[0].min(t + 1) {
                            acc += values[lag] * x[t - lag];
                        }
                    }
                    2 => {
                        let n2 = shape[1];
                        for l1 in 0..shape[0].min(t + 1) {
                            let x1 = x[t - l1];
                            let mut inner = 0.0;
                            for l2 in 0..n2.min(t + 1) {
                                inner += values[l1 * n2 + l2] * x[t - l2];
                            }
                            acc += x1 * inner;
                        }
                    }
                    _ => {
                        return Err(Error::UnsupportedKernelForm(
                            "dense grids support degree 1 or 2".into(),
                        ))
                    }
                }
            }
            KernelForm::Separable { input, axes } => {
                let x = resolve(input, inputs)?;
                let mut prod = 1.0;
                for axis in axes {
                    let mut s = 0.0;
                    for (lag, &g) in axis[..axis.len().min(t + 1)].iter().enumerate() {
                        s += g * x[t - lag];
                    }
                    prod *= s;
                }
                acc += prod;
            }
        }
    }
    Ok(acc)
}

/// Evaluate a discrete-time kernel set over full input records (zero
/// pre-history). All inputs must share one length, which is also the
/// output length.
pub fn eval_volterra_dt(set: &KernelSet, inputs: &[(&str, &[f64])]) -> Result<Vec<f64>> {
    set.validate()?;
    let n = inputs.first().map(|(_, x)| x.len()).unwrap_or(0);
    if inputs.iter().any(|(_, x)| x.len() != n) {
        return Err(Error::ShapeMismatch("inputs differ in length".into()));
    }
    (0..n).map(|t| eval_set_at(set, t, inputs)).collect()
}

/// The benchmark feedback loop `y(t) = u(t-1) + u(t-2) w^2(t)`,
/// `u(t) = r(t) - alpha y(t)`, run from zero initial conditions with no
/// steady-state trimming (callers discard warm-up periods). The loop is
/// explicit because `y(t)` depends only on past inputs.
pub fn simulate_nfir_feedback(alpha: f64, r: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if r.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "r has {} samples, w has {}",
            r.len(),
            w.len()
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidSpec("alpha must be finite".into()));
    }
    let n = r.len();
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for t in 0..n {
        let u1 = if t >= 1 { u[t - 1] } else { 0.0 };
        let u2 = if t >= 2 { u[t - 2] } else { 0.0 };
        let y_t = u1 + u2 * w[t] * w[t];
        let u_t = r[t] - alpha * y_t;
        if !u_t.is_finite() || u_t.abs() > DIVERGENCE_GUARD {
            return Err(Error::LoopDiverged {
                index: t,
                threshold: DIVERGENCE_GUARD,
            });
        }
        y.push(y_t);
        u.push(u_t);
    }
    Ok((u, y))
}

/// A nonlinear feedback configuration: actuator feeding a plant, with the
/// plant output fed back through an optional block and a scalar gain.
/// Every block has its own process-noise input.
///
/// The loop must be explicitly solvable sample by sample, so the plant may
/// not feed its current input straight through unless `extra_loop_delay`
/// breaks the loop instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSystemSpec {
    pub plant: KernelSet,
    #[serde(default)]
    pub actuator: Option<KernelSet>,
    #[serde(default)]
    pub feedback: Option<KernelSet>,
    /// Scalar gain on the feedback path.
    pub loop_gain: f64,
    /// Insert one sample of delay on the feedback path.
    #[serde(default)]
    pub extra_loop_delay: bool,
}

impl FeedbackSystemSpec {
    /// Open- or closed-loop wrapper around a bare plant.
    pub fn from_plant(plant: KernelSet, loop_gain: f64) -> Self {
        Self {
            plant,
            actuator: None,
            feedback: None,
            loop_gain,
            extra_loop_delay: false,
        }
    }

    /// The benchmark system as a block structure: identity actuator and
    /// feedback, plant taps `u(t-1) + u(t-2) w^2(t)`, loop gain `alpha`.
    pub fn nfir_benchmark(alpha: f64) -> Self {
        let plant = KernelSet::new(vec![VolterraKernel {
            form: KernelForm::Taps {
                taps: vec![
                    Tap::new(1.0, vec![(SIGNAL_INPUT, vec![1])]),
                    Tap::new(
                        1.0,
                        vec![(SIGNAL_INPUT, vec![2]), (NOISE_INPUT, vec![0, 0])],
                    ),
                ],
            },
            time_domain: TimeDomain::Discrete,
        }]);
        Self::from_plant(plant, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        if let Some(a) = &self.actuator {
            a.validate()?;
        }
        if let Some(f) = &self.feedback {
            f.validate()?;
        }
        if !self.loop_gain.is_finite() {
            return Err(Error::InvalidSpec("loop gain must be finite".into()));
        }
        let plant_direct = self.plant.min_lag(SIGNAL_INPUT) == Some(0);
        if self.loop_gain != 0.0 && plant_direct && !self.extra_loop_delay {
            return Err(Error::DirectFeedthrough);
        }
        Ok(())
    }
}

/// Process-noise records for the three loop blocks; any absent record is
/// treated as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoopNoise<'a> {
    pub plant: Option<&'a [f64]>,
    pub actuator: Option<&'a [f64]>,
    pub feedback: Option<&'a [f64]>,
}

impl<'a> LoopNoise<'a> {
    pub fn plant_only(w: &'a [f64]) -> Self {
        Self {
            plant: Some(w),
            actuator: None,
            feedback: None,
        }
    }
}

fn guard(v: f64, t: usize) -> Result<f64> {
    if !v.is_finite() || v.abs() > DIVERGENCE_GUARD {
        Err(Error::LoopDiverged {
            index: t,
            threshold: DIVERGENCE_GUARD,
        })
    } else {
        Ok(v)
    }
}

/// Simulate the closed loop sample by sample from zero initial
/// conditions. Returns the plant input and output records `(u, y)`.
/// Configured as the benchmark loop this reproduces
/// [`simulate_nfir_feedback`] bit for bit.
pub fn simulate_closed_loop(
    sys: &FeedbackSystemSpec,
    r: &[f64],
    noises: LoopNoise<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sys.validate()?;
    let n = r.len();
    for w in [noises.plant, noises.actuator, noises.feedback]
        .into_iter()
        .flatten()
    {
        if w.len() != n {
            return Err(Error::ShapeMismatch(
                "noise records must match the reference length".into(),
            ));
        }
    }
    let zeros = vec![0.0; n];
    let w_pl = noises.plant.unwrap_or(&zeros);
    let w_act = noises.actuator.unwrap_or(&zeros);
    let w_fb = noises.feedback.unwrap_or(&zeros);

    let mut e: Vec<f64> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let mut y: Vec<f64> = Vec::with_capacity(n);
    let mut fb: Vec<f64> = Vec::with_capacity(n);

    // With an open loop or an explicit loop delay, u(t) is computable
    // before y(t), so the plant may have lag-0 terms. Otherwise the
    // validated plant min-lag lets y(t) go first.
    let input_first = sys.extra_loop_delay || sys.loop_gain == 0.0;
    for t in 0..n {
        if input_first {
            let fb_prev = if t >= 1 { fb[t - 1] } else { 0.0 };
            e.push(r[t] - sys.loop_gain * fb_prev);
            let u_t = match &sys.actuator {
                Some(set) => eval_set_at(set, t, &[(SIGNAL_INPUT, &e), (NOISE_INPUT, w_act)])?,
                None => e[t],
            };
            u.push(guard(u_t, t)?);
            let y_t = eval_set_at(&sys.plant, t, &[(SIGNAL_INPUT, &u), (NOISE_INPUT, w_pl)])?;
            y.push(guard(y_t, t)?);
            let fb_t = match &sys.feedback {
                Some(set) => eval_set_at(set, t, &[(SIGNAL_INPUT, &y), (NOISE_INPUT, w_fb)])?,
                None => y[t],
            };
            fb.push(fb_t);
        } else {
            // Plant has no direct feed-through: y(t) only needs u up to
            // t-1, then the rest of the loop resolves within the sample.
            let y_t = eval_set_at(&sys.plant, t, &[(SIGNAL_INPUT, &u), (NOISE_INPUT, w_pl)])?;
            y.push(guard(y_t, t)?);
            let fb_t = match &sys.feedback {
                Some(set) => eval_set_at(set, t, &[(SIGNAL_INPUT, &y), (NOISE_INPUT, w_fb)])?,
                None => y[t],
            };
            fb.push(fb_t);
            e.push(r[t] - sys.loop_gain * fb[t]);
            let u_t = match &sys.actuator {
                Some(set) => eval_set_at(set, t, &[(SIGNAL_INPUT, &e), (NOISE_INPUT, w_act)])?,
                None => e[t],
            };
            u.push(guard(u_t, t)?);
        }
    }
    Ok((u, y))
}

/// Noise models of the three block sources, drawn per Monte-Carlo index
/// through disjoint streams.
#[derive(Debug, Clone, Default)]
pub struct LoopNoiseSpec {
    pub plant: Option<NoiseSpec>,
    pub actuator: Option<NoiseSpec>,
    pub feedback: Option<NoiseSpec>,
}

impl LoopNoiseSpec {
    pub fn plant_only(spec: NoiseSpec) -> Self {
        Self {
            plant: Some(spec),
            actuator: None,
            feedback: None,
        }
    }

    fn draw(&self, n: usize, index: u64) -> Result<[Option<Vec<f64>>; 3]> {
        self.draw_from(n, index, crate::rng::Source::ProcessNoise)
    }

    fn draw_from(
        &self,
        n: usize,
        index: u64,
        source: crate::rng::Source,
    ) -> Result<[Option<Vec<f64>>; 3]> {
        let mut out = [None, None, None];
        for (slot, spec) in [(0, &self.plant), (1, &self.actuator), (2, &self.feedback)] {
            if let Some(spec) = spec {
                out[slot] = Some(crate::signals::noise_from_source(
                    n,
                    spec,
                    source,
                    index * 4 + slot as u64,
                )?);
            }
        }
        Ok(out)
    }
}

/// Monte-Carlo estimate of the conditional mean response: average `(u, y)`
/// over `n_mc` independent process-noise draws with the reference record
/// held fixed.
pub fn conditional_mean_response(
    sys: &FeedbackSystemSpec,
    r: &[f64],
    noise: &LoopNoiseSpec,
    n_mc: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_mc < 2 {
        return Err(Error::InvalidSpec("n_mc must be >= 2".into()));
    }
    let n = r.len();
    // Rebind block seeds onto the caller's seed so repeated calls with
    // different seeds draw disjoint streams.
    let rebind = |s: &Option<NoiseSpec>| {
        s.as_ref().map(|spec| NoiseSpec {
            seed,
            ..spec.clone()
        })
    };
    let noise = LoopNoiseSpec {
        plant: rebind(&noise.plant),
        actuator: rebind(&noise.actuator),
        feedback: rebind(&noise.feedback),
    };
    let sums = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
            // Monte-Carlo draws live on their own stream family so they
            // can never replay an ensemble's process-noise records.
            let drawn = noise.draw_from(n, i, crate::rng::Source::MonteCarlo)?;
            let loop_noise = LoopNoise {
                plant: drawn[0].as_deref(),
                actuator: drawn[1].as_deref(),
                feedback: drawn[2].as_deref(),
            };
            simulate_closed_loop(sys, r, loop_noise)
        })
        .try_reduce(
            || (vec![0.0; n], vec![0.0; n]),
            |mut acc, (u, y)| {
                for t in 0..n {
                    acc.0[t] += u[t];
                    acc.1[t] += y[t];
                }
                Ok(acc)
            },
        )?;
    let scale = 1.0 / n_mc as f64;
    Ok((
        sums.0.iter().map(|v| v * scale).collect(),
        sums.1.iter().map(|v| v * scale).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Step-invariant (zero-order-hold) discretization
// ---------------------------------------------------------------------------

/// Smallest oversampling factor accepted for continuous-kernel grids.
pub const MIN_OVERSAMPLING: usize = 32;

/// One axis of a continuous-time kernel, sampled on a fine uniform grid
/// `t = 0, dt, 2 dt, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtAxis {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl CtAxis {
    /// Sampled exponential `e^{-rate t}` covering `[0, support]`.
    pub fn exponential(rate: f64, dt: f64, support: f64) -> Self {
        let n = (support / dt).ceil() as usize + 1;
        Self {
            values: (0..n).map(|i| (-rate * i as f64 * dt).exp()).collect(),
            dt,
        }
    }

    fn oversampling(&self, t_s: f64) -> Result<usize> {
        if !(self.dt > 0.0 && t_s > 0.0) {
            return Err(Error::BadKernelGrid("dt and T_s must be positive".into()));
        }
        let ratio = t_s / self.dt;
        let osf = ratio.round();
        if (ratio - osf).abs() > 1e-9 * ratio {
            return Err(Error::BadKernelGrid(format!(
                "T_s = {t_s} is not an integer multiple of the grid step {}",
                self.dt
            )));
        }
        let osf = osf as usize;
        if osf < MIN_OVERSAMPLING {
            return Err(Error::BadKernelGrid(format!(
                "oversampling factor {osf} below the minimum {MIN_OVERSAMPLING}"
            )));
        }
        Ok(osf)
    }

    /// Cumulative integral on the fine grid (trapezoidal rule).
    fn cumulative(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        h.push(0.0);
        for w in self.values.windows(2) {
            acc += self.dt * 0.5 * (w[0] + w[1]);
            h.push(acc);
        }
        h
    }
}

/// Discrete taps of one axis: `d(m) = h(m T_s) - h((m-1) T_s)` with `h`
/// the running integral of the axis; `d(0) = 0` because the kernel is
/// causal and the hold spans one full interval.
fn zoh_axis_taps(axis: &CtAxis, t_s: f64) -> Result<Vec<f64>> {
    let osf = axis.oversampling(t_s)?;
    let h = axis.cumulative();
    let m_max = (h.len() - 1) / osf;
    if m_max < 1 {
        return Err(Error::BadKernelGrid(
            "grid does not cover one sampling interval".into(),
        ));
    }
    let mut taps = Vec::with_capacity(m_max + 1);
    taps.push(0.0);
    for m in 1..=m_max {
        taps.push(h[m * osf] - h[(m - 1) * osf]);
    }
    Ok(taps)
}

/// Exact discrete equivalent of a degree-1 continuous kernel under
/// zero-order-hold input.
pub fn step_invariant_deg1(g1: &CtAxis, t_s: f64) -> Result<VolterraKernel> {
    let taps = zoh_axis_taps(g1, t_s)?;
    VolterraKernel::discrete(KernelForm::DenseGrid {
        input: SIGNAL_INPUT.to_string(),
        shape: vec![taps.len()],
        values: taps,
    })
}

/// A degree-2 continuous kernel: either a dense grid sampled at one fine
/// step, or a pair of separable axes.
#[derive(Debug, Clone, PartialEq)]
pub enum CtKernel2 {
    Dense { values: Vec<Vec<f64>>, dt: f64 },
    Separable { a: CtAxis, b: CtAxis },
}

/// Exact discrete equivalent of a degree-2 continuous kernel under
/// zero-order-hold input: the four-corner difference of the double
/// running integral, evaluated on the sampling grid. For separable
/// kernels the difference factorizes into per-axis degree-1 taps.
pub fn step_invariant_deg2(g2: &CtKernel2, t_s: f64) -> Result<VolterraKernel> {
    match g2 {
        CtKernel2::Separable { a, b } => {
            let ta = zoh_axis_taps(a, t_s)?;
            let tb = zoh_axis_taps(b, t_s)?;
            VolterraKernel::discrete(KernelForm::Separable {
                input: SIGNAL_INPUT.to_string(),
                axes: vec![ta, tb],
            })
        }
        CtKernel2::Dense { values, dt } => {
            let rows = values.len();
            if rows == 0 || values.iter().any(|r| r.len() != values[0].len()) {
                return Err(Error::BadKernelGrid(
                    "dense grid must be rectangular".into(),
                ));
            }
            let cols = values[0].len();
            let probe = CtAxis {
                values: vec![0.0; rows.min(cols)],
                dt: *dt,
            };
            let osf = probe.oversampling(t_s)?;
            // Double running integral H(i, j): cumulative trapezoid along
            // each axis in turn.
            let mut h = vec![vec![0.0; cols]; rows];
            for i in 0..rows {
                let mut acc = 0.0;
                for j in 1..cols {
                    acc += dt * 0.5 * (values[i][j - 1] + values[i][j]);
                    h[i][j] = acc;
                }
            }
            for j in 0..cols {
                let mut acc = 0.0;
                let mut prev_row = h[0][j];
                h[0][j] = 0.0;
                for i in 1..rows {
                    let cur = h[i][j];
                    acc += dt * 0.5 * (prev_row + cur);
                    prev_row = cur;
                    h[i][j] = acc;
                }
            }
            let m1 = (rows - 1) / osf;
            let m2 = (cols - 1) / osf;
            if m1 < 1 || m2 < 1 {
                return Err(Error::BadKernelGrid(
                    "grid does not cover one sampling interval".into(),
                ));
            }
            if m1 + 1 > DENSE_GRID_CAP || m2 + 1 > DENSE_GRID_CAP {
                return Err(Error::DenseGridTooLarge((m1 + 1).max(m2 + 1)));
            }
            let corner = |i: usize, j: usize| h[i * osf][j * osf];
            let mut taps = vec![0.0; (m1 + 1) * (m2 + 1)];
            for i in 1..=m1 {
                for j in 1..=m2 {
                    taps[i * (m2 + 1) + j] =
                        corner(i, j) + corner(i - 1, j - 1) - corner(i, j - 1) - corner(i - 1, j);
                }
            }
            VolterraKernel::discrete(KernelForm::DenseGrid {
                input: SIGNAL_INPUT.to_string(),
                shape: vec![m1 + 1, m2 + 1],
                values: taps,
            })
        }
    }
}

/// Exact discrete equivalent of a separable degree-N continuous kernel:
/// per-axis degree-1 differencing; the tensor of products is never
/// materialized. Degree 1 reduces to [`step_invariant_deg1`].
pub fn step_invariant_sep(axes: &[CtAxis], t_s: f64) -> Result<VolterraKernel> {
    if axes.is_empty() {
        return Err(Error::UnsupportedKernelForm("no axes given".into()));
    }
    if axes.len() == 1 {
        return step_invariant_deg1(&axes[0], t_s);
    }
    let taps: Result<Vec<Vec<f64>>> = axes.iter().map(|a| zoh_axis_taps(a, t_s)).collect();
    VolterraKernel::discrete(KernelForm::Separable {
        input: SIGNAL_INPUT.to_string(),
        axes: taps?,
    })
}

// ---------------------------------------------------------------------------
// Ensemble simulation
// ---------------------------------------------------------------------------

/// Recording plan for ensemble simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingConfig {
    /// Periods kept in the ensemble.
    pub periods: usize,
    /// Warm-up periods simulated and discarded before recording. Zero
    /// keeps the transient, which is what the transient-suppressing
    /// estimator expects.
    pub warmup_periods: usize,
    /// Measurement noise added to the recorded input channel.
    pub meas_noise_u: Option<NoiseSpec>,
    /// Measurement noise added to the recorded output channel.
    pub meas_noise_y: Option<NoiseSpec>,
}

impl RecordingConfig {
    pub fn steady_state(periods: usize) -> Self {
        Self {
            periods,
            warmup_periods: 2,
            meas_noise_u: None,
            meas_noise_y: None,
        }
    }

    pub fn transient(periods: usize) -> Self {
        Self {
            periods,
            warmup_periods: 0,
            meas_noise_u: None,
            meas_noise_y: None,
        }
    }
}

fn split_periods(record: &[f64], skip: usize, periods: usize, n: usize) -> Vec<Vec<f64>> {
    (0..periods)
        .map(|p| record[skip + p * n..skip + (p + 1) * n].to_vec())
        .collect()
}

struct Realized {
    reference: Vec<Vec<f64>>,
    input: Vec<Vec<f64>>,
    output: Vec<Vec<f64>>,
}

/// Drive the loop with the periodic extension of one reference period and
/// record `cfg.periods` periods after the warm-up discard.
fn drive_realization(
    sys: &FeedbackSystemSpec,
    period: &[f64],
    process_noise: &LoopNoiseSpec,
    cfg: &RecordingConfig,
    index: u64,
) -> Result<Realized> {
    let n = period.len();
    let total_periods = cfg.warmup_periods + cfg.periods;
    let len = total_periods * n;
    let skip = cfg.warmup_periods * n;
    let mut r = Vec::with_capacity(len);
    for _ in 0..total_periods {
        r.extend_from_slice(period);
    }
    let drawn = process_noise.draw(len, index)?;
    let noise = LoopNoise {
        plant: drawn[0].as_deref(),
        actuator: drawn[1].as_deref(),
        feedback: drawn[2].as_deref(),
    };
    let (mut u, mut y) = simulate_closed_loop(sys, &r, noise)?;
    if let Some(spec) = &cfg.meas_noise_u {
        let nu = crate::signals::measurement_noise_indexed(len, spec, false, index)?;
        for (ui, ni) in u.iter_mut().zip(nu) {
            *ui += ni;
        }
    }
    if let Some(spec) = &cfg.meas_noise_y {
        let ny = crate::signals::measurement_noise_indexed(len, spec, true, index)?;
        for (yi, ni) in y.iter_mut().zip(ny) {
            *yi += ni;
        }
    }
    Ok(Realized {
        reference: split_periods(&r, skip, cfg.periods, n),
        input: split_periods(&u, skip, cfg.periods, n),
        output: split_periods(&y, skip, cfg.periods, n),
    })
}

fn assemble_ensemble(
    realized: Vec<Realized>,
    periods: usize,
    n: usize,
    clock_freq: f64,
    meta: EnsembleMeta,
) -> Result<SignalEnsemble> {
    let mut ensemble = SignalEnsemble::new(realized.len(), periods, n, clock_freq, meta)?;
    ensemble.insert_channel(
        Channel::Reference,
        realized.iter().map(|r| r.reference.clone()).collect(),
    )?;
    ensemble.insert_channel(
        Channel::Input,
        realized.iter().map(|r| r.input.clone()).collect(),
    )?;
    ensemble.insert_channel(
        Channel::Output,
        realized.iter().map(|r| r.output.clone()).collect(),
    )?;
    Ok(ensemble)
}

/// The signal class a reference realization is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcitationClass {
    /// Deterministic amplitudes, random phases.
    Multisine,
    /// Random (Rayleigh) amplitudes and random phases.
    PeriodicNoise,
}

/// Simulate `m` independent realizations of the closed loop driven by
/// multisine realizations of `excitation`, recording `cfg.periods`
/// periods after the warm-up discard. The reference channel holds the
/// known periodic reference (no transient); input and output channels
/// hold the simulated records plus any measurement noise.
pub fn simulate_ensemble(
    sys: &FeedbackSystemSpec,
    excitation: &MultisineSpec,
    process_noise: &LoopNoiseSpec,
    m: usize,
    cfg: &RecordingConfig,
    seed: u64,
) -> Result<SignalEnsemble> {
    simulate_ensemble_class(
        sys,
        excitation,
        ExcitationClass::Multisine,
        process_noise,
        m,
        cfg,
        seed,
    )
}

/// [`simulate_ensemble`] with an explicit excitation class.
pub fn simulate_ensemble_class(
    sys: &FeedbackSystemSpec,
    excitation: &MultisineSpec,
    class: ExcitationClass,
    process_noise: &LoopNoiseSpec,
    m: usize,
    cfg: &RecordingConfig,
    seed: u64,
) -> Result<SignalEnsemble> {
    sys.validate()?;
    excitation.validate()?;
    if m == 0 || cfg.periods == 0 {
        return Err(Error::ShapeMismatch("need m >= 1 and periods >= 1".into()));
    }
    let realized: Result<Vec<Realized>> = (0..m as u64)
        .into_par_iter()
        .map(|i| -> Result<Realized> {
            let period = match class {
                ExcitationClass::Multisine => realize_multisine_indexed(excitation, seed, i)?,
                ExcitationClass::PeriodicNoise => {
                    realize_periodic_noise_indexed(excitation, seed, i)?
                }
            };
            drive_realization(sys, &period.samples, process_noise, cfg, i)
        })
        .collect();

    let meta = EnsembleMeta {
        seed,
        config_digest: crate::io::config_digest(&(
            sys,
            excitation,
            class,
            cfg.periods,
            cfg.warmup_periods,
            seed,
        )),
        excited: excitation.excited(),
        reference_power: crate::signals::asymptotic_variance(excitation),
        warmup_discarded: cfg.warmup_periods,
        label: String::new(),
    };
    assemble_ensemble(
        realized?,
        cfg.periods,
        excitation.n_samples,
        excitation.clock_freq,
        meta,
    )
}

/// Drive the loop with already-realized reference periods (one period per
/// realization, extended periodically), recording like
/// [`simulate_ensemble`]. The excited set and reference-power tag are
/// copied from `template`, so an ensemble written by a generation step
/// can be fed straight back in.
pub fn simulate_from_reference(
    sys: &FeedbackSystemSpec,
    reference_periods: &[Vec<f64>],
    clock_freq: f64,
    process_noise: &LoopNoiseSpec,
    cfg: &RecordingConfig,
    seed: u64,
    template: &EnsembleMeta,
) -> Result<SignalEnsemble> {
    sys.validate()?;
    let m = reference_periods.len();
    if m == 0 || cfg.periods == 0 {
        return Err(Error::ShapeMismatch("need m >= 1 and periods >= 1".into()));
    }
    let n = reference_periods[0].len();
    if reference_periods.iter().any(|p| p.len() != n) {
        return Err(Error::ShapeMismatch(
            "reference periods differ in length".into(),
        ));
    }
    let realized: Result<Vec<Realized>> = reference_periods
        .par_iter()
        .enumerate()
        .map(|(i, period)| drive_realization(sys, period, process_noise, cfg, i as u64))
        .collect();
    let meta = EnsembleMeta {
        seed,
        config_digest: crate::io::config_digest(&(
            sys,
            &template.config_digest,
            cfg.periods,
            cfg.warmup_periods,
            seed,
        )),
        excited: template.excited.clone(),
        reference_power: template.reference_power,
        warmup_discarded: cfg.warmup_periods,
        label: template.label.clone(),
    };
    assemble_ensemble(realized?, cfg.periods, n, clock_freq, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::design_flat_multisine;

    fn unit_impulse(n: usize) -> Vec<f64> {
        let mut r = vec![0.0; n];
        r[0] = 1.0;
        r
    }

    #[test]
    fn pure_delay_kernel() {
        let set = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![Tap::new(1.0, vec![(SIGNAL_INPUT, vec![1])])],
        })
        .unwrap()]);
        let u = [1.0, 2.0, 3.0, 4.0];
        let y = eval_volterra_dt(&set, &[(SIGNAL_INPUT, &u)]).unwrap();
        assert_eq!(y, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn benchmark_taps_with_zero_noise_reduce_to_delay() {
        let sys = FeedbackSystemSpec::nfir_benchmark(0.0);
        let u = [0.5, -1.0, 2.0, 0.25, 1.5];
        let w = [0.0; 5];
        let y = eval_volterra_dt(&sys.plant, &[(SIGNAL_INPUT, &u), (NOISE_INPUT, &w)]).unwrap();
        for t in 1..u.len() {
            assert_eq!(y[t], u[t - 1]);
        }
    }

    #[test]
    fn constant_inputs_evaluate_products() {
        // coefficient 1 at (in lag 2; noise lags 0,0), u = 1, w = c
        let set = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![Tap::new(
                1.0,
                vec![(SIGNAL_INPUT, vec![2]), (NOISE_INPUT, vec![0, 0])],
            )],
        })
        .unwrap()]);
        let c = 1.7;
        let u = vec![1.0; 6];
        let w = vec![c; 6];
        let y = eval_volterra_dt(&set, &[(SIGNAL_INPUT, &u), (NOISE_INPUT, &w)]).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 0.0);
        for t in 2..6 {
            assert!((y[t] - c * c).abs() < 1e-15);
        }
    }

    #[test]
    fn continuous_kernel_rejected_by_eval() {
        let set = KernelSet::new(vec![VolterraKernel {
            form: KernelForm::DenseGrid {
                input: SIGNAL_INPUT.into(),
                shape: vec![2],
                values: vec![1.0, 0.5],
            },
            time_domain: TimeDomain::Continuous,
        }]);
        assert!(matches!(
            eval_volterra_dt(&set, &[(SIGNAL_INPUT, &[1.0, 2.0, 3.0, 4.0])]),
            Err(Error::DiscretizeFirst)
        ));
    }

    #[test]
    fn open_loop_benchmark_recursion() {
        let r = [1.0, -0.5, 0.25, 2.0, -1.5, 0.75];
        let w = [0.3, -0.2, 0.5, 0.1, -0.4, 0.2];
        let (u, y) = simulate_nfir_feedback(0.0, &r, &w).unwrap();
        assert_eq!(u.to_vec(), r.to_vec());
        for t in 0..r.len() {
            let expect = if t >= 2 {
                r[t - 1] + r[t - 2] * w[t] * w[t]
            } else if t == 1 {
                r[0]
            } else {
                0.0
            };
            assert_eq!(y[t], expect);
        }
    }

    #[test]
    fn closed_loop_block_form_matches_direct_recursion_bitwise() {
        let spec = design_flat_multisine(128, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let r = crate::signals::realize_multisine(&spec, 5).unwrap().samples;
        let w = crate::signals::gaussian_noise(r.len(), &NoiseSpec::white(0.75, 17)).unwrap();
        let (u_direct, y_direct) = simulate_nfir_feedback(0.3, &r, &w).unwrap();
        let sys = FeedbackSystemSpec::nfir_benchmark(0.3);
        let (u_block, y_block) = simulate_closed_loop(&sys, &r, LoopNoise::plant_only(&w)).unwrap();
        assert_eq!(u_direct, u_block);
        assert_eq!(y_direct, y_block);
    }

    #[test]
    fn all_zero_kernels_pass_reference_through() {
        let sys = FeedbackSystemSpec::from_plant(KernelSet::default(), 0.4);
        let r = [1.0, 2.0, 3.0, 4.0];
        let (u, y) = simulate_closed_loop(&sys, &r, LoopNoise::default()).unwrap();
        assert_eq!(u, r.to_vec());
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn lti_closed_loop_matches_hand_recursion() {
        // plant y(t) = 0.5 u(t-1), loop gain 0.5, unit impulse reference
        let plant = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![Tap::new(0.5, vec![(SIGNAL_INPUT, vec![1])])],
        })
        .unwrap()]);
        let sys = FeedbackSystemSpec::from_plant(plant, 0.5);
        let r = unit_impulse(10);
        let (u, y) = simulate_closed_loop(&sys, &r, LoopNoise::default()).unwrap();
        let mut u_ref = vec![0.0; 10];
        let mut y_ref = vec![0.0; 10];
        for t in 0..10 {
            y_ref[t] = if t >= 1 { 0.5 * u_ref[t - 1] } else { 0.0 };
            u_ref[t] = r[t] - 0.5 * y_ref[t];
        }
        assert_eq!(u, u_ref);
        assert_eq!(y, y_ref);
    }

    #[test]
    fn direct_feedthrough_detected() {
        let plant = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![Tap::new(1.0, vec![(SIGNAL_INPUT, vec![0])])],
        })
        .unwrap()]);
        let sys = FeedbackSystemSpec::from_plant(plant.clone(), 0.5);
        assert!(matches!(sys.validate(), Err(Error::DirectFeedthrough)));

        // the same plant is fine in open loop or with the extra delay
        let open = FeedbackSystemSpec::from_plant(plant.clone(), 0.0);
        assert!(open.validate().is_ok());
        let delayed = FeedbackSystemSpec {
            extra_loop_delay: true,
            ..FeedbackSystemSpec::from_plant(plant, 0.5)
        };
        assert!(delayed.validate().is_ok());
        let r = unit_impulse(8);
        let (u, y) = simulate_closed_loop(&delayed, &r, LoopNoise::default()).unwrap();
        // u(t) = r(t) - 0.5 y(t-1), y(t) = u(t)
        let mut u_ref = vec![0.0; 8];
        for t in 0..8 {
            let fb = if t >= 1 { u_ref[t - 1] } else { 0.0 };
            u_ref[t] = r[t] - 0.5 * fb;
        }
        assert_eq!(u, u_ref);
        assert_eq!(y, u_ref);
    }

    #[test]
    fn noise_enters_every_block() {
        // actuator u = e + 0.5 w_act(t-1), plant y = 0.8 u(t-1) + w_pl(t),
        // feedback fb = y + 0.3 w_fb(t), loop gain 0.5
        let actuator = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![
                Tap::new(1.0, vec![(SIGNAL_INPUT, vec![0])]),
                Tap::new(0.5, vec![(NOISE_INPUT, vec![1])]),
            ],
        })
        .unwrap()]);
        let plant = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![
                Tap::new(0.8, vec![(SIGNAL_INPUT, vec![1])]),
                Tap::new(1.0, vec![(NOISE_INPUT, vec![0])]),
            ],
        })
        .unwrap()]);
        let feedback = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![
                Tap::new(1.0, vec![(SIGNAL_INPUT, vec![0])]),
                Tap::new(0.3, vec![(NOISE_INPUT, vec![0])]),
            ],
        })
        .unwrap()]);
        let sys = FeedbackSystemSpec {
            plant,
            actuator: Some(actuator),
            feedback: Some(feedback),
            loop_gain: 0.5,
            extra_loop_delay: false,
        };
        let n = 12;
        let r: Vec<f64> = (0..n).map(|t| ((t * 3 % 7) as f64 - 3.0) * 0.25).collect();
        let w_pl = crate::signals::gaussian_noise(n, &NoiseSpec::white(0.4, 1)).unwrap();
        let w_act = crate::signals::gaussian_noise(n, &NoiseSpec::white(0.3, 2)).unwrap();
        let w_fb = crate::signals::gaussian_noise(n, &NoiseSpec::white(0.2, 3)).unwrap();
        let (u, y) = simulate_closed_loop(
            &sys,
            &r,
            LoopNoise {
                plant: Some(&w_pl),
                actuator: Some(&w_act),
                feedback: Some(&w_fb),
            },
        )
        .unwrap();
        let mut u_ref = vec![0.0; n];
        let mut y_ref = vec![0.0; n];
        for t in 0..n {
            let u1 = if t >= 1 { u_ref[t - 1] } else { 0.0 };
            y_ref[t] = 0.8 * u1 + w_pl[t];
            let fb = y_ref[t] + 0.3 * w_fb[t];
            let e = r[t] - 0.5 * fb;
            let wa = if t >= 1 { w_act[t - 1] } else { 0.0 };
            u_ref[t] = e + 0.5 * wa;
        }
        for t in 0..n {
            assert!((u[t] - u_ref[t]).abs() < 1e-14, "u at {t}");
            assert!((y[t] - y_ref[t]).abs() < 1e-14, "y at {t}");
        }
    }

    #[test]
    fn divergence_guard_reports_index() {
        let r = vec![1.0; 4000];
        let w = crate::signals::gaussian_noise(4000, &NoiseSpec::white(0.75, 3)).unwrap();
        // alpha far outside the stable region
        let err = simulate_nfir_feedback(2.0, &r, &w).unwrap_err();
        match err {
            Error::LoopDiverged { index, .. } => assert!(index > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stability_frontier_without_noise() {
        let spec = design_flat_multisine(1000, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let period = crate::signals::realize_multisine(&spec, 1).unwrap().samples;
        let mut r = Vec::with_capacity(1_000_000);
        for _ in 0..1000 {
            r.extend_from_slice(&period);
        }
        let w = vec![0.0; r.len()];
        let (u, _) = simulate_nfir_feedback(0.95, &r, &w).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e3));
        assert!(matches!(
            simulate_nfir_feedback(-1.05, &r, &w),
            Err(Error::LoopDiverged { .. })
        ));
    }

    #[test]
    fn homogeneity_of_benchmark_loop() {
        let spec = design_flat_multisine(256, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let r = crate::signals::realize_multisine(&spec, 2).unwrap().samples;
        let w = crate::signals::gaussian_noise(256, &NoiseSpec::white(0.75, 8)).unwrap();
        let (u1, _) = simulate_nfir_feedback(0.3, &r, &w).unwrap();
        for beta in [0.5, 2.0, 10.0] {
            let rb: Vec<f64> = r.iter().map(|v| v * beta).collect();
            let (ub, _) = simulate_nfir_feedback(0.3, &rb, &w).unwrap();
            for t in 0..r.len() {
                let err = (ub[t] - beta * u1[t]).abs();
                assert!(
                    err <= 1e-10 * (beta * u1[t]).abs().max(1e-3),
                    "t={t}: {} vs {}",
                    ub[t],
                    beta * u1[t]
                );
            }
        }
    }

    #[test]
    fn steady_state_periodicity_with_frozen_noise() {
        let spec = design_flat_multisine(64, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let period = crate::signals::realize_multisine(&spec, 4).unwrap().samples;
        let mut r = Vec::new();
        for _ in 0..5 {
            r.extend_from_slice(&period);
        }
        let w = vec![0.0; r.len()];
        let (_, y) = simulate_nfir_feedback(0.3, &r, &w).unwrap();
        // discard 2 warm-up periods, compare successive periods
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for p in 2..4 {
            for t in 0..64 {
                let a = y[p * 64 + t];
                let b = y[(p + 1) * 64 + t];
                assert!((a - b).abs() < 1e-9 * scale);
            }
        }
    }

    #[test]
    fn conditional_mean_with_zero_noise_is_single_simulation() {
        let spec = design_flat_multisine(64, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let r = crate::signals::realize_multisine(&spec, 6).unwrap().samples;
        let sys = FeedbackSystemSpec::nfir_benchmark(0.3);
        let noise = LoopNoiseSpec::plant_only(NoiseSpec::white(0.0, 0));
        let (u_mc, y_mc) = conditional_mean_response(&sys, &r, &noise, 4, 9).unwrap();
        let (u, y) = simulate_closed_loop(&sys, &r, LoopNoise::default()).unwrap();
        for t in 0..r.len() {
            assert!((u_mc[t] - u[t]).abs() < 1e-12);
            assert!((y_mc[t] - y[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_mean_satisfies_lti_relation() {
        // E{y|r} obeys y(t) + a y(t-1) + a s^2 y(t-2) = r(t-1) + s^2 r(t-2)
        let alpha = 0.3;
        let sigma_w = 0.75;
        let spec = design_flat_multisine(256, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let r = crate::signals::realize_multisine(&spec, 10)
            .unwrap()
            .samples;
        let sys = FeedbackSystemSpec::nfir_benchmark(alpha);
        let noise = LoopNoiseSpec::plant_only(NoiseSpec::white(sigma_w, 0));
        let n_mc = 10_000;
        let (_, y_cond) = conditional_mean_response(&sys, &r, &noise, n_mc, 13).unwrap();
        let s2 = sigma_w * sigma_w;
        let n = r.len();
        let mut rss = 0.0;
        for t in 2..n {
            let lhs = y_cond[t] + alpha * y_cond[t - 1] + alpha * s2 * y_cond[t - 2];
            let rhs = r[t - 1] + s2 * r[t - 2];
            rss += (lhs - rhs).powi(2);
        }
        let resid_rms = (rss / (n - 2) as f64).sqrt();
        let y_std = {
            let mean = y_cond.iter().sum::<f64>() / n as f64;
            (y_cond.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        let bound = 5.0 / (n_mc as f64).sqrt() * y_std.max(1.0);
        assert!(resid_rms < bound, "residual {resid_rms} vs bound {bound}");
    }

    #[test]
    fn conditional_mean_of_linear_system_is_noise_free_response() {
        // linear plant with additive noise: y = 0.4 u(t-1) + w(t)
        let plant = KernelSet::new(vec![VolterraKernel::discrete(KernelForm::Taps {
            taps: vec![
                Tap::new(0.4, vec![(SIGNAL_INPUT, vec![1])]),
                Tap::new(1.0, vec![(NOISE_INPUT, vec![0])]),
            ],
        })
        .unwrap()]);
        let sys = FeedbackSystemSpec::from_plant(plant, 0.25);
        let spec = design_flat_multisine(128, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let r = crate::signals::realize_multisine(&spec, 3).unwrap().samples;
        let noise = LoopNoiseSpec::plant_only(NoiseSpec::white(0.5, 0));
        let n_mc = 20_000;
        let (u_mc, y_mc) = conditional_mean_response(&sys, &r, &noise, n_mc, 55).unwrap();
        let (u0, y0) = simulate_closed_loop(&sys, &r, LoopNoise::default()).unwrap();
        // Monte-Carlo error of the mean ~ sigma_w-scale / sqrt(n_mc)
        let bound = 5.0 * 0.5 / (n_mc as f64).sqrt() * 3.0;
        for t in 0..r.len() {
            assert!((u_mc[t] - u0[t]).abs() < bound, "u at {t}");
            assert!((y_mc[t] - y0[t]).abs() < bound, "y at {t}");
        }
    }

    // ------------------------------------------------------------------
    // zero-order-hold discretization
    // ------------------------------------------------------------------

    /// Independent continuous-time reference: midpoint-rule convolution of
    /// an analytically evaluated exponential kernel with the zoh input,
    /// sharing no quadrature with the step-invariant transform.
    fn ct_exp_response_midpoint(
        rate: f64,
        u: &[f64],
        t_s: f64,
        osf: usize,
        support: f64,
    ) -> Vec<f64> {
        let dt = t_s / osf as f64;
        let cells = (support / dt).ceil() as usize;
        (0..u.len())
            .map(|l| {
                let mut acc = 0.0;
                for i in 0..cells {
                    let tau = (i as f64 + 0.5) * dt;
                    let pos = l as f64 * osf as f64 - (i as f64 + 0.5);
                    if pos < 0.0 {
                        break;
                    }
                    acc += (-rate * tau).exp() * u[(pos / osf as f64).floor() as usize] * dt;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn deg1_exponential_matches_closed_form() {
        let a = 1.0;
        let t_s = 0.1;
        let g1 = CtAxis::exponential(a, t_s / 64.0, 4.0);
        let kernel = step_invariant_deg1(&g1, t_s).unwrap();
        let KernelForm::DenseGrid { values, .. } = &kernel.form else {
            panic!("expected dense taps");
        };
        assert_eq!(values[0], 0.0);
        for (n, &tap) in values.iter().enumerate().skip(1) {
            let expect = (1.0 - (-a * t_s).exp()) / a * (-a * t_s * (n as f64 - 1.0)).exp();
            assert!((tap - expect).abs() < 1e-6, "tap {n}: {tap} vs {expect}");
        }
    }

    #[test]
    fn deg1_zero_kernel_gives_zero_taps() {
        let g1 = CtAxis {
            values: vec![0.0; 65],
            dt: 1.0 / 32.0,
        };
        let kernel = step_invariant_deg1(&g1, 1.0).unwrap();
        let KernelForm::DenseGrid { values, .. } = &kernel.form else {
            panic!();
        };
        assert!(values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deg1_dt_simulation_matches_oversampled_ct() {
        let t_s = 0.25;
        let g1 = CtAxis::exponential(0.8, t_s / 64.0, 12.0);
        let kernel = step_invariant_deg1(&g1, t_s).unwrap();
        let set = KernelSet::new(vec![kernel]);
        let spec = design_flat_multisine(32, 1.0 / t_s, (0.0, 1.9), 1.0, 0.0).unwrap();
        let u = crate::signals::realize_multisine(&spec, 12)
            .unwrap()
            .samples;
        let y_dt = eval_volterra_dt(&set, &[(SIGNAL_INPUT, &u)]).unwrap();
        let y_ct = ct_exp_response_midpoint(0.8, &u, t_s, 64, 12.0);
        let scale = y_ct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for t in 0..u.len() {
            assert!(
                (y_dt[t] - y_ct[t]).abs() < 1e-5 * scale,
                "t={t}: {} vs {}",
                y_dt[t],
                y_ct[t]
            );
        }
    }

    #[test]
    fn deg2_separable_factorizes_into_deg1_taps() {
        let t_s = 0.2;
        let dt = t_s / 32.0;
        let a = CtAxis::exponential(1.0, dt, 8.0);
        let b = CtAxis::exponential(0.5, dt, 8.0);
        let sep = step_invariant_deg2(
            &CtKernel2::Separable {
                a: a.clone(),
                b: b.clone(),
            },
            t_s,
        )
        .unwrap();
        let da = step_invariant_deg1(&a, t_s).unwrap();
        let db = step_invariant_deg1(&b, t_s).unwrap();
        let (
            KernelForm::Separable { axes, .. },
            KernelForm::DenseGrid { values: va, .. },
            KernelForm::DenseGrid { values: vb, .. },
        ) = (&sep.form, &da.form, &db.form)
        else {
            panic!();
        };
        assert_eq!(&axes[0], va);
        assert_eq!(&axes[1], vb);
    }

    #[test]
    fn deg2_dense_matches_separable_construction() {
        // Build the same separable kernel both ways; the dense path goes
        // through the 2-D running integral and four-corner difference.
        let t_s = 0.5;
        let dt = t_s / 32.0;
        let a = CtAxis::exponential(1.0, dt, 6.0);
        let b = CtAxis::exponential(0.7, dt, 6.0);
        let dense_vals: Vec<Vec<f64>> = a
            .values
            .iter()
            .map(|&ai| b.values.iter().map(|&bj| ai * bj).collect())
            .collect();
        let dense = step_invariant_deg2(
            &CtKernel2::Dense {
                values: dense_vals,
                dt,
            },
            t_s,
        )
        .unwrap();
        let sep = step_invariant_deg2(&CtKernel2::Separable { a, b }, t_s).unwrap();
        let KernelForm::DenseGrid { shape, values, .. } = &dense.form else {
            panic!();
        };
        let KernelForm::Separable { axes, .. } = &sep.form else {
            panic!();
        };
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                let expect = axes[0][i] * axes[1][j];
                let got = values[i * shape[1] + j];
                assert!(
                    (got - expect).abs() < 1e-9 * max.max(1.0),
                    "tap ({i},{j}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn deg3_separable_eval_matches_explicit_tensor() {
        let t_s = 0.25;
        let dt = t_s / 32.0;
        let axes_ct = [
            CtAxis::exponential(1.0, dt, 5.0),
            CtAxis::exponential(1.0, dt, 5.0),
            CtAxis::exponential(1.0, dt, 5.0),
        ];
        let kernel = step_invariant_sep(&axes_ct, t_s).unwrap();
        let KernelForm::Separable { axes, .. } = kernel.form.clone() else {
            panic!();
        };
        // every axis equal: taps must match the degree-1 transform
        let d1 = step_invariant_deg1(&axes_ct[0], t_s).unwrap();
        let KernelForm::DenseGrid {
            values: d1_taps, ..
        } = &d1.form
        else {
            panic!();
        };
        for axis in &axes {
            for (x, y) in axis.iter().zip(d1_taps) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        // evaluate through the separable path and through an explicit
        // triple sum over the tensor of products
        let set = KernelSet::new(vec![kernel]);
        let u: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let y = eval_volterra_dt(&set, &[(SIGNAL_INPUT, &u)]).unwrap();
        for t in 0..u.len() {
            let mut expect = 0.0;
            for (l1, &g1) in axes[0].iter().enumerate() {
                for (l2, &g2) in axes[1].iter().enumerate() {
                    for (l3, &g3) in axes[2].iter().enumerate() {
                        expect += g1
                            * g2
                            * g3
                            * delayed(&u, t, l1)
                            * delayed(&u, t, l2)
                            * delayed(&u, t, l3);
                    }
                }
            }
            assert!(
                (y[t] - expect).abs() < 1e-10 * expect.abs().max(1.0),
                "t={t}: {} vs {expect}",
                y[t]
            );
        }
    }

    #[test]
    fn single_axis_sep_reduces_to_deg1() {
        let t_s = 0.5;
        let axis = CtAxis::exponential(2.0, t_s / 32.0, 4.0);
        let via_sep = step_invariant_sep(std::slice::from_ref(&axis), t_s).unwrap();
        let via_deg1 = step_invariant_deg1(&axis, t_s).unwrap();
        assert_eq!(via_sep, via_deg1);
    }

    #[test]
    fn coarse_grid_rejected() {
        let axis = CtAxis::exponential(1.0, 0.1, 4.0);
        assert!(matches!(
            step_invariant_deg1(&axis, 0.1),
            Err(Error::BadKernelGrid(_))
        ));
        // grid shorter than one sampling interval
        let short = CtAxis {
            values: vec![1.0; 16],
            dt: 1.0 / 64.0,
        };
        assert!(matches!(
            step_invariant_deg1(&short, 1.0),
            Err(Error::BadKernelGrid(_))
        ));
    }

    #[test]
    fn ensemble_simulation_shapes_and_determinism() {
        let spec = design_flat_multisine(64, 1.0, (0.0, 0.49), 1.0, 0.0).unwrap();
        let sys = FeedbackSystemSpec::nfir_benchmark(0.3);
        let noise = LoopNoiseSpec::plant_only(NoiseSpec::white(0.75, 21));
        let cfg = RecordingConfig::steady_state(2);
        let a = simulate_ensemble(&sys, &spec, &noise, 3, &cfg, 21).unwrap();
        assert_eq!(a.realizations, 3);
        assert_eq!(a.periods, 2);
        assert_eq!(a.channels.len(), 3);
        let b = simulate_ensemble(&sys, &spec, &noise, 3, &cfg, 21).unwrap();
        assert_eq!(
            a.channel(Channel::Output).unwrap(),
            b.channel(Channel::Output).unwrap()
        );
        // realizations differ from each other
        assert_ne!(
            a.channel(Channel::Input).unwrap()[0],
            a.channel(Channel::Input).unwrap()[1]
        );
    }
}
