//! Discrete frequency-bin representation of the biphoton state.
//!
//! A cavity-enhanced SPDC source emits photon pairs on a comb of cavity
//! modes. Each comb peak is one frequency bin; the pair state is
//! `Σ_n f_n |n⟩_s |-n⟩_i` with real non-negative amplitudes `f_n` indexed by
//! the signal mode (the idler partner of signal mode `n` is mode `-n`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `Σ f_n² = 1` after construction.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// `linewidth/FSR` ratio above which bins stop being cleanly resolved.
pub const LINEWIDTH_RATIO_WARN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("mode {n} has negative weight {weight}")]
    NegativeWeight { n: i32, weight: f64 },
    #[error("mode {n} has non-finite weight")]
    NonFiniteWeight { n: i32 },
    #[error("duplicate mode index {0}")]
    DuplicateIndex(i32),
    #[error("spectrum has no modes")]
    EmptyModes,
    #[error("all mode weights are zero")]
    AllZero,
    #[error("fsr_mhz must be > 0, got {0}")]
    NonPositiveFsr(f64),
    #[error("linewidth_mhz must be > 0, got {0}")]
    NonPositiveLinewidth(f64),
    #[error("gaussian envelope sigma must be > 0, got {0}")]
    NonPositiveSigma(f64),
    #[error("envelope spectrum needs at least one mode")]
    NoModesRequested,
}

/// On-disk spectrum document: intensity-like weights per mode plus cavity
/// metadata. Weights are coincidence-peak heights, i.e. proportional to
/// `f_n²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub fsr_mhz: f64,
    pub linewidth_mhz: f64,
    pub modes: Vec<ModeWeight>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModeWeight {
    pub n: i32,
    pub weight: f64,
}

/// Envelope for synthetic test spectra.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Envelope {
    Flat,
    /// Gaussian weight envelope `exp(-(n-center)²/(2σ²))` in mode units.
    Gaussian { sigma: f64, center: f64 },
}

/// Normalized frequency-bin amplitudes plus cavity metadata.
///
/// Immutable after construction; `Σ f_n² = 1` within [`NORMALIZATION_TOL`]
/// and every `f_n >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpectrum {
    amplitudes: BTreeMap<i32, f64>,
    fsr_mhz: f64,
    linewidth_mhz: f64,
}

impl ModeSpectrum {
    /// Build from intensity-like weights (`f_n = sqrt(w_n / Σ w)`).
    pub fn from_weights<I>(weights: I, fsr_mhz: f64, linewidth_mhz: f64) -> Result<Self, SpectrumError>
    where
        I: IntoIterator<Item = (i32, f64)>,
    {
        let mut map = BTreeMap::new();
        for (n, w) in weights {
            if !w.is_finite() {
                return Err(SpectrumError::NonFiniteWeight { n });
            }
            if w < 0.0 {
                return Err(SpectrumError::NegativeWeight { n, weight: w });
            }
            if map.insert(n, w).is_some() {
                return Err(SpectrumError::DuplicateIndex(n));
            }
        }
        Self::from_weight_map(map, fsr_mhz, linewidth_mhz)
    }

    /// Build from amplitudes; relative magnitudes are preserved and the
    /// result is renormalized to `Σ f² = 1`.
    pub fn from_amplitudes<I>(
        amplitudes: I,
        fsr_mhz: f64,
        linewidth_mhz: f64,
    ) -> Result<Self, SpectrumError>
    where
        I: IntoIterator<Item = (i32, f64)>,
    {
        Self::from_weights(
            amplitudes.into_iter().map(|(n, a)| (n, a * a)),
            fsr_mhz,
            linewidth_mhz,
        )
    }

    /// Parse and normalize a spectrum document.
    pub fn load(config: &SpectrumConfig) -> Result<Self, SpectrumError> {
        if config.modes.is_empty() {
            return Err(SpectrumError::EmptyModes);
        }
        Self::from_weights(
            config.modes.iter().map(|m| (m.n, m.weight)),
            config.fsr_mhz,
            config.linewidth_mhz,
        )
    }

    /// Deterministic synthetic spectrum with the given envelope, centered on
    /// mode 0 (even counts extend one mode further on the positive side).
    pub fn generate(
        n_modes: usize,
        envelope: Envelope,
        fsr_mhz: f64,
        linewidth_mhz: f64,
    ) -> Result<Self, SpectrumError> {
        if n_modes == 0 {
            return Err(SpectrumError::NoModesRequested);
        }
        if let Envelope::Gaussian { sigma, .. } = envelope {
            if !(sigma > 0.0) {
                return Err(SpectrumError::NonPositiveSigma(sigma));
            }
        }
        let start = -((n_modes as i32 - 1) / 2);
        let weights = (0..n_modes as i32).map(|i| {
            let n = start + i;
            let w = match envelope {
                Envelope::Flat => 1.0,
                Envelope::Gaussian { sigma, center } => {
                    let t = (n as f64 - center) / sigma;
                    (-0.5 * t * t).exp()
                }
            };
            (n, w)
        });
        Self::from_weights(weights, fsr_mhz, linewidth_mhz)
    }

    /// Renormalize (a no-op up to floating point on an already valid
    /// spectrum; idempotent).
    pub fn normalized(&self) -> Self {
        Self::from_amplitudes(
            self.amplitudes.iter().map(|(&n, &a)| (n, a)),
            self.fsr_mhz,
            self.linewidth_mhz,
        )
        .expect("renormalizing a valid spectrum cannot fail")
    }

    fn from_weight_map(
        map: BTreeMap<i32, f64>,
        fsr_mhz: f64,
        linewidth_mhz: f64,
    ) -> Result<Self, SpectrumError> {
        if map.is_empty() {
            return Err(SpectrumError::EmptyModes);
        }
        if !(fsr_mhz > 0.0) || !fsr_mhz.is_finite() {
            return Err(SpectrumError::NonPositiveFsr(fsr_mhz));
        }
        if !(linewidth_mhz > 0.0) || !linewidth_mhz.is_finite() {
            return Err(SpectrumError::NonPositiveLinewidth(linewidth_mhz));
        }
        let total: f64 = map.values().sum();
        if total <= 0.0 {
            return Err(SpectrumError::AllZero);
        }
        let amplitudes = map
            .into_iter()
            .map(|(n, w)| (n, (w / total).sqrt()))
            .collect();
        Ok(ModeSpectrum {
            amplitudes,
            fsr_mhz,
            linewidth_mhz,
        })
    }

    /// Amplitude `f_n`; zero for modes not present.
    pub fn amplitude(&self, n: i32) -> f64 {
        self.amplitudes.get(&n).copied().unwrap_or(0.0)
    }

    /// `f_n²`.
    pub fn weight(&self, n: i32) -> f64 {
        let a = self.amplitude(n);
        a * a
    }

    /// Stored modes in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.amplitudes.iter().map(|(&n, &a)| (n, a))
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn min_index(&self) -> i32 {
        *self.amplitudes.keys().next().expect("non-empty")
    }

    pub fn max_index(&self) -> i32 {
        *self.amplitudes.keys().next_back().expect("non-empty")
    }

    pub fn fsr_mhz(&self) -> f64 {
        self.fsr_mhz
    }

    pub fn linewidth_mhz(&self) -> f64 {
        self.linewidth_mhz
    }

    /// `Σ f_n²`; 1 within [`NORMALIZATION_TOL`].
    pub fn sum_sq(&self) -> f64 {
        self.amplitudes.values().map(|a| a * a).sum()
    }

    /// Non-fatal validation findings.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let ratio = self.linewidth_mhz / self.fsr_mhz;
        if ratio > LINEWIDTH_RATIO_WARN {
            out.push(format!(
                "linewidth/FSR ratio {ratio:.3} exceeds {LINEWIDTH_RATIO_WARN}; \
                 frequency bins are no longer cleanly resolved"
            ));
        }
        out
    }

    /// Export as a weight document; `load` of the result reproduces the
    /// spectrum.
    pub fn to_config(&self) -> SpectrumConfig {
        SpectrumConfig {
            fsr_mhz: self.fsr_mhz,
            linewidth_mhz: self.linewidth_mhz,
            modes: self
                .amplitudes
                .iter()
                .map(|(&n, &a)| ModeWeight { n, weight: a * a })
                .collect(),
        }
    }
}
