use thiserror::Error;

/// Errors produced by the sensing, quantization and allocation pipeline.
#[derive(Debug, Error)]
pub enum CoopError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("path loss requires positive distance and frequency (d={d} km, f={f} GHz)")]
    InvalidPathloss { d: f64, f: f64 },

    #[error("pulse energy in the candidate window is degenerate (tau outside observation window)")]
    DegenerateWindow,

    #[error("delay search interval is empty")]
    EmptySearchInterval,

    #[error("reflecting coefficient estimate is zero; delay CRLB is unbounded")]
    ZeroAlpha,

    #[error("sample window around tau-hat contains no indices")]
    EmptyWindow,

    #[error("eigendecomposition failed on non-finite input")]
    EigenFailure,

    #[error("Lloyd quantizer did not converge after {0} iterations")]
    LloydNonConvergence(usize),

    #[error("Lloyd quantizer requires at least 1 bit and positive variance")]
    InvalidQuantizer,

    #[error("geometry degenerate: target coincides with a transmitter or receiver")]
    CoincidentGeometry,

    #[error("Fisher information matrix is singular; target unlocalizable with this selection")]
    Unlocalizable,

    #[error("localization requires at least {need} receivers, got {got}")]
    TooFewReceivers { need: usize, got: usize },

    #[error("localization search region is empty")]
    EmptyRegion,

    #[error("MAC region enumeration guard exceeded: |Omega| = {0} > 12")]
    MacRegionTooLarge(usize),

    #[error("epsilon {eps} is below the minimum achievable CRLB {eps_star}")]
    InfeasibleEpsilon { eps: f64, eps_star: f64 },

    #[error("inner solve requires restoration: center point infeasible ({0})")]
    RestorationRequired(String),

    #[error("inner solve numerical failure: {0}")]
    SolverNumerical(String),

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoopError>;
