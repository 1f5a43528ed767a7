//! Simulator and measurement-setting optimizer for frequency-bin entangled
//! photon pairs from a cavity-enhanced SPDC source.
//!
//! The crate models a biphoton comb `Σ_n f_n |n⟩_s |-n⟩_i`, applies one
//! electro-optic modulator per arm (sideband amplitudes given by
//! integer-order Bessel functions), and predicts two-photon interference
//! fringes, Clauser-Horne S-values and their Poissonian uncertainties.
//!
//! Modules follow the processing chain:
//!
//! * [`spectrum`] — frequency-bin amplitudes and their ingestion,
//! * [`modulator`] — the EOM unitary on the bin basis,
//! * [`interference`] — coincidence probabilities, normalization schemes,
//!   fringes,
//! * [`belltest`] — CH quantity, k estimation, S-maps, setting optimization,
//! * [`stats`] — Monte-Carlo counts, visibility, error propagation.

pub mod belltest;
pub mod interference;
pub mod modulator;
pub mod spectrum;
pub mod stats;

pub use belltest::{
    ch_value, estimate_k, fit_phase_offset, optimize_settings, s_from_counts, s_map,
    BellConfig, BellCounts, BellError, BellResult, KMode, ModIndexBounds, OptimizeConstraint,
    SearchSpec,
};
pub use interference::{
    coincidence_prob, fringe_scan, joint_amplitude, marginal_prob, normalization_deviation,
    probability_table, FilterSelection, FringePoint, InterferenceError, ProbabilityTable,
    Scheme, Side,
};
pub use modulator::{
    bessel_j, eom_coefficients, truncation_order, EomCoefficients, EomSetting, ModulatorError,
    DEFAULT_TRUNCATION_TOL,
};
pub use spectrum::{Envelope, ModeSpectrum, ModeWeight, SpectrumConfig, SpectrumError};
pub use stats::{
    fit_fringe, propagate_s_error, sample_counts, visibility, CountRecord, StatsError,
};
