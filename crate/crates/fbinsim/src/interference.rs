//! Post-modulator two-photon state: coincidence amplitudes, marginals,
//! normalization schemes and phase-scanned fringes.
//!
//! With the pair state `Σ_n f_n |n⟩_s |-n⟩_i` and one modulator per arm, the
//! amplitude for detecting the signal photon in bin `a` and the idler photon
//! in bin `b` collapses (each modulator order is fixed by the detected bin)
//! to a single sum over the source modes:
//!
//! ```text
//! A(a,b) = Σ_n f_n · U_{a-n}(c_s, β) · U_{b+n}(c_i, α)
//! ```
//!
//! All probabilities derive from `|A|²`; each normalization scheme divides by
//! its own total.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::modulator::{
    eom_coefficient_rad, truncation_order, EomSetting, ModulatorError,
};
use crate::spectrum::ModeSpectrum;

/// Probabilities below this are clamped to zero (denormal hygiene).
pub const PROB_CLAMP: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterferenceError {
    #[error(transparent)]
    Modulator(#[from] ModulatorError),
    #[error("scheme total is zero: degenerate filter set")]
    DegenerateScheme,
    #[error("empty phase grid")]
    EmptyGrid,
}

/// One spectral-filter choice per arm. `d = a - b` is the mode separation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FilterSelection {
    pub signal_mode: i32,
    pub idler_mode: i32,
}

impl FilterSelection {
    pub fn new(signal_mode: i32, idler_mode: i32) -> Self {
        FilterSelection {
            signal_mode,
            idler_mode,
        }
    }

    /// Mode separation `d = a - b`.
    pub fn d(&self) -> i32 {
        self.signal_mode - self.idler_mode
    }
}

/// Which arm of the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Signal,
    Idler,
}

/// Normalization scheme of a [`ProbabilityTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Every mode pair reachable within the truncation window.
    Full,
    /// Pairs with `|a - b| <= 4`, as in the simulation of the comb spectrum.
    Sim4,
    /// Experimental filter set: signal fixed to bin 0, idler in {-1, 0, +1}.
    Exp3,
    /// Mirror of [`Scheme::Exp3`]: idler fixed to bin 0, signal in {-1, 0, +1}.
    ExpBell,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::Sim4 => "sim4",
            Scheme::Exp3 => "exp3",
            Scheme::ExpBell => "expbell",
        }
    }

    fn includes(&self, a: i32, b: i32) -> bool {
        match self {
            Scheme::Full => true,
            Scheme::Sim4 => (a - b).abs() <= 4,
            Scheme::Exp3 => a == 0 && b.abs() <= 1,
            Scheme::ExpBell => b == 0 && a.abs() <= 1,
        }
    }

    /// Which side's filter stays fixed in the restricted schemes.
    pub fn scanned_side(&self) -> Option<Side> {
        match self {
            Scheme::Exp3 => Some(Side::Idler),
            Scheme::ExpBell => Some(Side::Signal),
            _ => None,
        }
    }
}

/// Joint outcome probabilities `P(a,b|x,y)` under a declared normalization
/// scheme. Entries are normalized by the scheme's own raw total, which is
/// kept for diagnostics.
#[derive(Debug, Clone)]
pub struct ProbabilityTable {
    entries: BTreeMap<(i32, i32), f64>,
    scheme: Scheme,
    raw_total: f64,
    signal_setting: EomSetting,
    idler_setting: EomSetting,
}

impl ProbabilityTable {
    /// Normalized probability for `(a, b)`; zero outside the scheme.
    pub fn prob(&self, a: i32, b: i32) -> f64 {
        self.entries.get(&(a, b)).copied().unwrap_or(0.0)
    }

    /// Scheme total before normalization. For [`Scheme::Full`] this is the
    /// captured state weight and equals 1 up to the truncation tolerance.
    pub fn raw_total(&self) -> f64 {
        self.raw_total
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn settings(&self) -> (EomSetting, EomSetting) {
        (self.signal_setting, self.idler_setting)
    }

    /// Entries in ascending `(a, b)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((i32, i32), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One point of a phase-scanned fringe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringePoint {
    pub beta_deg: f64,
    pub probability: f64,
}

fn clamp_prob(p: f64) -> f64 {
    if p < PROB_CLAMP {
        0.0
    } else {
        p
    }
}

/// Coincidence amplitude `⟨a|⟨b| Ψ̃⟩` for signal setting `x` and idler
/// setting `y`, with modulator orders outside the truncation window for
/// `tol` dropped.
pub fn joint_amplitude(
    spec: &ModeSpectrum,
    x: &EomSetting,
    y: &EomSetting,
    sel: FilterSelection,
    tol: f64,
) -> Result<Complex64, InterferenceError> {
    x.validate()?;
    y.validate()?;
    let k_s = truncation_order(x.mod_index, tol)? as i32;
    let k_i = truncation_order(y.mod_index, tol)? as i32;
    Ok(joint_amplitude_trunc(spec, x, y, sel, k_s, k_i))
}

fn joint_amplitude_trunc(
    spec: &ModeSpectrum,
    x: &EomSetting,
    y: &EomSetting,
    sel: FilterSelection,
    k_s: i32,
    k_i: i32,
) -> Complex64 {
    let beta = x.phase_rad();
    let alpha = y.phase_rad();
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, f_n) in spec.iter() {
        let signal_order = sel.signal_mode - n;
        let idler_order = sel.idler_mode + n;
        if signal_order.abs() > k_s || idler_order.abs() > k_i {
            continue;
        }
        acc += f_n
            * eom_coefficient_rad(signal_order, x.mod_index, beta)
            * eom_coefficient_rad(idler_order, y.mod_index, alpha);
    }
    acc
}

/// `P(a,b|x,y) = |⟨a|⟨b|Ψ̃⟩|²` without scheme normalization.
pub fn coincidence_prob(
    spec: &ModeSpectrum,
    x: &EomSetting,
    y: &EomSetting,
    sel: FilterSelection,
    tol: f64,
) -> Result<f64, InterferenceError> {
    Ok(clamp_prob(joint_amplitude(spec, x, y, sel, tol)?.norm_sqr()))
}

/// Single-photon probability of finding the `side` photon in `mode` after
/// its modulator: `Σ_n f_n² J_{mode∓n}(c)²` (signal carries `+n`, idler
/// `-n`). Phase-independent.
pub fn marginal_prob(
    spec: &ModeSpectrum,
    setting: &EomSetting,
    side: Side,
    mode: i32,
    tol: f64,
) -> Result<f64, InterferenceError> {
    setting.validate()?;
    let cutoff = truncation_order(setting.mod_index, tol)? as i32;
    let mut total = 0.0;
    for (n, f_n) in spec.iter() {
        let order = match side {
            Side::Signal => mode - n,
            Side::Idler => mode + n,
        };
        if order.abs() > cutoff {
            continue;
        }
        let j = crate::modulator::bessel_j_unchecked(order, setting.mod_index);
        total += f_n * f_n * j * j;
    }
    Ok(total)
}

/// Mode-pair rectangle reachable from the stored spectrum within the
/// truncation windows.
fn support(
    spec: &ModeSpectrum,
    k_s: i32,
    k_i: i32,
) -> (std::ops::RangeInclusive<i32>, std::ops::RangeInclusive<i32>) {
    let a_range = (spec.min_index() - k_s)..=(spec.max_index() + k_s);
    let b_range = (-spec.max_index() - k_i)..=(-spec.min_index() + k_i);
    (a_range, b_range)
}

/// Joint probability table under `scheme`, renormalized by the scheme's own
/// total.
pub fn probability_table(
    spec: &ModeSpectrum,
    x: &EomSetting,
    y: &EomSetting,
    scheme: Scheme,
    tol: f64,
) -> Result<ProbabilityTable, InterferenceError> {
    x.validate()?;
    y.validate()?;
    let k_s = truncation_order(x.mod_index, tol)? as i32;
    let k_i = truncation_order(y.mod_index, tol)? as i32;
    let (a_range, b_range) = support(spec, k_s, k_i);

    let mut entries = BTreeMap::new();
    let mut raw_total = 0.0;
    for a in a_range {
        for b in b_range.clone() {
            if !scheme.includes(a, b) {
                continue;
            }
            let p = clamp_prob(
                joint_amplitude_trunc(spec, x, y, FilterSelection::new(a, b), k_s, k_i)
                    .norm_sqr(),
            );
            raw_total += p;
            entries.insert((a, b), p);
        }
    }
    if raw_total <= 0.0 {
        return Err(InterferenceError::DegenerateScheme);
    }
    for p in entries.values_mut() {
        *p /= raw_total;
    }
    Ok(ProbabilityTable {
        entries,
        scheme,
        raw_total,
        signal_setting: *x,
        idler_setting: *y,
    })
}

/// Relative deficit of a restricted scheme's normalizer against all
/// sidebands at the same fixed filter.
///
/// For [`Scheme::Exp3`] the signal filter sits on bin 0 and the idler
/// scans; the full reference is then the signal central-bin marginal, and
/// the deviation is `1 - Σ_{|b|<=1} P(0,b) / P(0|signal)`. [`Scheme::ExpBell`]
/// mirrors the roles. Restricting the normalization to three bins biases
/// every probability of that setting by `1/(1 - deviation)`.
pub fn normalization_deviation(
    spec: &ModeSpectrum,
    x: &EomSetting,
    y: &EomSetting,
    scheme: Scheme,
    tol: f64,
) -> Result<f64, InterferenceError> {
    let (fixed_side, fixed_mode) = match scheme {
        Scheme::Exp3 => (Side::Signal, 0),
        Scheme::ExpBell => (Side::Idler, 0),
        // The unrestricted schemes have no three-bin normalizer to compare.
        Scheme::Full | Scheme::Sim4 => return Ok(0.0),
    };
    let table = probability_table(spec, x, y, scheme, tol)?;
    let full = match fixed_side {
        Side::Signal => marginal_prob(spec, x, Side::Signal, fixed_mode, tol)?,
        Side::Idler => marginal_prob(spec, y, Side::Idler, fixed_mode, tol)?,
    };
    if full <= 0.0 {
        return Err(InterferenceError::DegenerateScheme);
    }
    Ok(1.0 - table.raw_total() / full)
}

/// Scheme-normalized coincidence probability at `sel` for every signal phase
/// `β` in `beta_grid_deg`, idler setting fixed. Grid points evaluate in
/// parallel with deterministic ordering.
pub fn fringe_scan(
    spec: &ModeSpectrum,
    x_base: &EomSetting,
    y: &EomSetting,
    sel: FilterSelection,
    beta_grid_deg: &[f64],
    scheme: Scheme,
    tol: f64,
) -> Result<Vec<FringePoint>, InterferenceError> {
    if beta_grid_deg.is_empty() {
        return Err(InterferenceError::EmptyGrid);
    }
    x_base.validate()?;
    y.validate()?;
    beta_grid_deg
        .par_iter()
        .map(|&beta_deg| {
            let x = EomSetting {
                phase_deg: beta_deg,
                ..*x_base
            };
            let table = probability_table(spec, &x, y, scheme, tol)?;
            Ok(FringePoint {
                beta_deg,
                probability: table.prob(sel.signal_mode, sel.idler_mode),
            })
        })
        .collect()
}

/// Inclusive degree grid `start:stop:step`.
pub fn degree_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "grid step must be positive");
    let mut out = Vec::new();
    let n = ((stop - start) / step).round() as i64;
    let count = n.max(0);
    for i in 0..=count {
        let v = start + i as f64 * step;
        if v <= stop + 1e-9 {
            out.push(v);
        }
    }
    out
}
