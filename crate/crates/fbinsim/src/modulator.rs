//! Electro-optic modulator unitary on the discrete frequency-bin basis.
//!
//! Driving a phase modulator at the cavity free spectral range scatters each
//! frequency bin `|n⟩` into its neighbours `|n+k⟩` with amplitude
//! `U_k(c, γ) = J_k(c) · exp(ik(γ − π/2))`, where `c` is the dimensionless
//! modulation index, `γ` the RF phase and `J_k` the integer-order Bessel
//! function of the first kind.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation bound on the modulation index; experimental settings stay
/// below 1.4.
pub const MAX_MOD_INDEX: f64 = 5.0;

/// Validated argument range of [`bessel_j`].
pub const MAX_BESSEL_ARG: f64 = 5.0;

/// Default sideband-truncation tolerance. Orders of magnitude below every
/// experimental uncertainty in scope.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-9;

/// Largest tolerance accepted by [`truncation_order`].
pub const MAX_TRUNCATION_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModulatorError {
    #[error("bessel argument {0} outside validated range |x| <= {MAX_BESSEL_ARG}")]
    ArgumentOutOfRange(f64),
    #[error("modulation index {0} outside [0, {MAX_MOD_INDEX}]")]
    ModIndexOutOfRange(f64),
    #[error("modulation index must be finite, got {0}")]
    NonFiniteModIndex(f64),
    #[error("phase must be finite, got {0}")]
    NonFinitePhase(f64),
    #[error("truncation tolerance {0} outside (0, {MAX_TRUNCATION_TOL}]")]
    InvalidTolerance(f64),
    #[error("RF frequency detuned from the cavity FSR is out of scope")]
    RfNotAtFsr,
}

/// One modulator configuration: modulation index `c` and RF phase `γ`.
///
/// Phases are accepted in degrees and reduced mod 360 before use; the RF
/// drive frequency is pinned to the cavity free spectral range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EomSetting {
    /// Dimensionless modulation index `c`.
    pub mod_index: f64,
    /// RF phase `γ` in degrees.
    pub phase_deg: f64,
    /// The RF drive equals the cavity FSR. Only `true` is in scope.
    #[serde(default = "default_true")]
    pub rf_equals_fsr: bool,
}

fn default_true() -> bool {
    true
}

impl EomSetting {
    pub fn new(mod_index: f64, phase_deg: f64) -> Result<Self, ModulatorError> {
        let setting = EomSetting {
            mod_index,
            phase_deg,
            rf_equals_fsr: true,
        };
        setting.validate()?;
        Ok(setting)
    }

    pub fn validate(&self) -> Result<(), ModulatorError> {
        if !self.mod_index.is_finite() {
            return Err(ModulatorError::NonFiniteModIndex(self.mod_index));
        }
        if !(0.0..=MAX_MOD_INDEX).contains(&self.mod_index) {
            return Err(ModulatorError::ModIndexOutOfRange(self.mod_index));
        }
        if !self.phase_deg.is_finite() {
            return Err(ModulatorError::NonFinitePhase(self.phase_deg));
        }
        if !self.rf_equals_fsr {
            return Err(ModulatorError::RfNotAtFsr);
        }
        Ok(())
    }

    /// Phase reduced to `[0, 360)` degrees.
    pub fn phase_reduced_deg(&self) -> f64 {
        self.phase_deg.rem_euclid(360.0)
    }

    /// Reduced phase in radians.
    pub fn phase_rad(&self) -> f64 {
        self.phase_reduced_deg().to_radians()
    }

    /// Same setting with the phase shifted by `delta_deg`.
    pub fn with_phase_offset(&self, delta_deg: f64) -> Self {
        EomSetting {
            phase_deg: self.phase_deg + delta_deg,
            ..*self
        }
    }
}

/// Sideband coefficients `U_k` of one modulator, truncated at `|k| <= K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EomCoefficients {
    order_cutoff: u32,
    coeffs: Vec<Complex64>,
}

impl EomCoefficients {
    /// Truncation order `K`.
    pub fn order_cutoff(&self) -> u32 {
        self.order_cutoff
    }

    /// `U_k`, zero outside the truncation window.
    pub fn coeff(&self, order: i32) -> Complex64 {
        let k = self.order_cutoff as i32;
        if order.abs() > k {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[(order + k) as usize]
        }
    }

    /// `Σ_{|k|<=K} |U_k|²`; equals 1 up to the truncation tolerance.
    pub fn total_weight(&self) -> f64 {
        self.coeffs.iter().map(|u| u.norm_sqr()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, Complex64)> + '_ {
        let k = self.order_cutoff as i32;
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, &u)| (i as i32 - k, u))
    }
}

/// Integer-order Bessel function of the first kind, `J_n(x)`.
///
/// Evaluated from the defining power series with compensated summation;
/// negative orders use `J_{-n}(x) = (-1)^n J_n(x)` exactly. The argument is
/// restricted to the validated range `|x| <= 5`, which covers every
/// modulation index in scope with ample margin.
pub fn bessel_j(order: i32, argument: f64) -> Result<f64, ModulatorError> {
    if !argument.is_finite() || argument.abs() > MAX_BESSEL_ARG {
        return Err(ModulatorError::ArgumentOutOfRange(argument));
    }
    Ok(bessel_j_unchecked(order, argument))
}

pub(crate) fn bessel_j_unchecked(order: i32, argument: f64) -> f64 {
    let (n, sign) = if order < 0 {
        // J_{-n}(x) = (-1)^n J_n(x)
        (order.unsigned_abs(), if order % 2 == 0 { 1.0 } else { -1.0 })
    } else {
        (order as u32, 1.0)
    };
    sign * bessel_series(n, argument)
}

/// Power series Σ_k (-1)^k (x/2)^(2k+n) / (k! (k+n)!) with Kahan summation.
fn bessel_series(n: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0_f64;
    for i in 1..=n {
        term *= half / i as f64;
        if term == 0.0 {
            return 0.0;
        }
    }
    let ratio = -half * half;
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut k = 0u32;
    loop {
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        if term.abs() < 1e-18 || k >= 400 {
            break;
        }
        k += 1;
        term *= ratio / (k as f64 * (k as f64 + n as f64));
    }
    sum
}

/// Smallest `K` such that the sideband weight outside `|k| <= K` is below
/// `tol`, i.e. `1 - Σ_{|k|<=K} J_k(c)² < tol`.
///
/// The tail is monotone, so the scan terminates; Σ_k J_k(c)² = 1 guarantees
/// the deficit eventually reaches the floating-point floor.
pub fn truncation_order(mod_index: f64, tol: f64) -> Result<u32, ModulatorError> {
    if !(tol > 0.0 && tol <= MAX_TRUNCATION_TOL) {
        return Err(ModulatorError::InvalidTolerance(tol));
    }
    if !mod_index.is_finite() || !(0.0..=MAX_MOD_INDEX).contains(&mod_index) {
        return Err(ModulatorError::ModIndexOutOfRange(mod_index));
    }
    let j0 = bessel_j_unchecked(0, mod_index);
    let mut captured = j0 * j0;
    if 1.0 - captured < tol {
        return Ok(0);
    }
    for k in 1..=MAX_ORDER_SCAN {
        let jk = bessel_j_unchecked(k as i32, mod_index);
        captured += 2.0 * jk * jk;
        if 1.0 - captured < tol {
            return Ok(k);
        }
    }
    // Unreachable for c <= 5: the weight above order ~40 is far below 1e-300.
    Ok(MAX_ORDER_SCAN)
}

const MAX_ORDER_SCAN: u32 = 64;

/// Single sideband coefficient `U_k(c, γ) = J_k(c)·exp(ik(γ − π/2))` with
/// the phase already in radians.
pub(crate) fn eom_coefficient_rad(order: i32, mod_index: f64, phase_rad: f64) -> Complex64 {
    let j = bessel_j_unchecked(order, mod_index);
    Complex64::from_polar(j, order as f64 * (phase_rad - std::f64::consts::FRAC_PI_2))
}

/// All sideband coefficients of `setting` within the truncation window for
/// `tol`. The unitarity defect `1 - Σ|U_k|²` stays below `tol`.
pub fn eom_coefficients(
    setting: &EomSetting,
    tol: f64,
) -> Result<EomCoefficients, ModulatorError> {
    setting.validate()?;
    let cutoff = truncation_order(setting.mod_index, tol)?;
    let phase = setting.phase_rad();
    let k = cutoff as i32;
    let coeffs = (-k..=k)
        .map(|order| eom_coefficient_rad(order, setting.mod_index, phase))
        .collect();
    Ok(EomCoefficients {
        order_cutoff: cutoff,
        coeffs,
    })
}
