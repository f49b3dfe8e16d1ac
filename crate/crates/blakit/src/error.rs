use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A signal or system specification violates one of its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A multisine design produced no excitable harmonics.
    #[error("no excitable harmonics in band [{f_lo} Hz, {f_hi} Hz]")]
    NoExcitableHarmonics { f_lo: f64, f_hi: f64 },

    /// A band query with `f1 >= f2`.
    #[error("empty band: f1 = {f1} Hz >= f2 = {f2} Hz")]
    EmptyBand { f1: f64, f2: f64 },

    /// A shaping filter with poles on or outside the unit circle.
    #[error("unstable shaping filter")]
    UnstableFilter,

    /// DFT input of odd or too-short length.
    #[error("record length {0} must be even and >= 4")]
    BadRecordLength(usize),

    /// Statistics over an axis of length one.
    #[error("insufficient replicates: need >= 2, got {0}")]
    InsufficientReplicates(usize),

    /// A requested channel is absent from the ensemble.
    #[error("channel {0} missing from ensemble")]
    MissingChannel(String),

    /// Mismatched array lengths or ensemble shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A closed-loop simulation exceeded the divergence guard.
    #[error("loop diverged at sample {index} (|u| > {threshold:e})")]
    LoopDiverged { index: usize, threshold: f64 },

    /// The loop output depends on its own current input.
    #[error("direct feed-through: loop output depends on its input at lag 0")]
    DirectFeedthrough,

    /// A continuous-time kernel was passed where a discrete one is required.
    #[error("continuous-time kernel: discretize first")]
    DiscretizeFirst,

    /// A kernel form is not supported by the requested operation.
    #[error("unsupported kernel form: {0}")]
    UnsupportedKernelForm(String),

    /// A sampled continuous-time kernel grid too coarse or too short.
    #[error("kernel grid not usable: {0}")]
    BadKernelGrid(String),

    /// Dense degree-2 grids are capped to keep memory desk-scale.
    #[error("dense grid of {0}x{0} taps exceeds the 4096x4096 cap; use the separable form")]
    DenseGridTooLarge(usize),

    /// The fast method needs in-band non-excited bins.
    #[error("fast method requires detection lines (non-excited in-band bins)")]
    NoDetectionLines,

    /// Estimator preconditions on the ensemble shape.
    #[error("estimator precondition failed: {0}")]
    EstimatorPrecondition(String),

    /// Nonlinearity classification needs experiments at distinct powers.
    #[error("need >= 2 distinct reference powers, got {0}")]
    NeedTwoPowers(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed input file: {0}")]
    MalformedFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
