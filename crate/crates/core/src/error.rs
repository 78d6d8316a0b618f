use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix exponential overflowed (norm of A*t = {norm:.3e})")]
    ExpOverflow { norm: f64 },

    #[error("matrix is defective or numerically non-diagonalizable near eigenvalue {re:.6e}{im:+.6e}i")]
    DefectiveMatrix { re: f64, im: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionError(String),

    #[error("conjugated perturbation is unbounded; offending terms: {0}")]
    UnboundedConjugation(String),

    #[error("running average diverged at T = {time:.6e} (norm {norm:.3e})")]
    DivergenceDetected { time: f64, norm: f64 },

    #[error("sampled forcing grid ends at {grid_end} but t = {requested} was requested")]
    GridTooShort { grid_end: f64, requested: f64 },

    #[error("unsupported forcing: {0}")]
    UnsupportedForcing(String),

    #[error("this approximation requires zero forcing")]
    NonzeroForcing,

    #[error("trajectory grids differ: {0}")]
    GridMismatch(String),

    #[error("step size underflow at t = {time:.6e} (h = {step:.3e})")]
    StepUnderflow { time: f64, step: f64 },

    #[error("parameter schedule does not cover t = {0:.6e}")]
    ScheduleGap(f64),

    #[error("initial state is zero; phase is undefined")]
    ZeroState,

    #[error("target amplitude must be positive, got {value:.6e} at t = {time:.6e}")]
    NonpositiveTarget { time: f64, value: f64 },

    #[error("bank is overdamped: resonance radicand {0:.6e} <= 0")]
    OverdampedBank(f64),

    #[error("drive frequency {given} is not the resonant frequency {resonant}")]
    NotAtResonance { given: f64, resonant: f64 },

    #[error("coupling transform is singular (zeta = 0)")]
    SingularCouplingData,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
