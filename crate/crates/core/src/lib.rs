//! Temporal homogenization of periodically perturbed linear systems
//! `x' = A x + eps P(t) x + f(t)`.

pub mod algebra;
pub mod circuits;
pub mod control;
pub mod error;
pub mod growth;
pub mod homogenize;
pub mod integrate;
pub mod io;
pub mod series;

pub use algebra::{conjugate, mat_exp, spectral_decompose, Mat, Spectrum, Vector};
pub use circuits::{
    build_bank, build_bank_constitutive, coupling_transform, effective_delta, resonant_frequency,
    super_resonance_threshold, verify_growth, CircuitBank, GrowthCheck, Threshold,
};
pub use control::{
    decay_phase, mathieu_effective, mathieu_system, run_control, simulate_ignition, ControlConfig, ControlTrace,
    TargetSpec,
};
pub use error::{Error, Result};
pub use growth::{
    effective_matrix_algebraic, effective_matrix_averaged, growth_operator, BoundednessVerdict, EffectiveModel, Method,
};
pub use homogenize::{
    augment_forcing, cell_rhs, effective_solution, error_report, floquet_approx, forcing_integral, solve_cell,
    uniform_grid, ErrorMetrics, ForcingSpec, ForcingTerm, LinearSystem, ScaledFrame, Trajectory,
};
pub use integrate::{integrate_reference, velocity_verlet, Schedule, ScheduleWindow};
pub use series::{conjugate_series, FourierMatrix, SeriesOptions, TrigSeries, TrigTerm};
