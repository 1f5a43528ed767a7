//! Clauser-Horne Bell quantity: S-value evaluation, k estimation, S-maps
//! over phase offsets, constrained setting optimization and the global
//! phase-offset fit against fringe data.
//!
//! The count-normalized quantity is
//!
//! ```text
//! S = 2 [C(00|x0y0) + C(00|x0y1) + C(00|x1y0) - C(00|x1y1)]
//!     / (C(0|A) (1 + k))        with classical bound S <= 2,
//! ```
//!
//! where `k` relates the two central-bin marginals, `P(0|x0) = k P(0|y0)`.
//! On the model side the denominator is evaluated as the sum of the two
//! marginals, `P(0|x0) + P(0|y0)`, which is the same expression with
//! `C(0|A)` read as the idler-side marginal; this keeps the classical bound
//! exactly 2 for every separable input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interference::{
    probability_table, marginal_prob, InterferenceError, Scheme, Side,
};
use crate::modulator::EomSetting;
use crate::spectrum::ModeSpectrum;
use crate::stats::{propagate_s_error, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellError {
    #[error(transparent)]
    Interference(#[from] InterferenceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("idler central-bin marginal is zero; k undefined")]
    ZeroIdlerMarginal,
    #[error("S denominator is zero")]
    ZeroDenominator,
    #[error("k must be > 0, got {0}")]
    NonPositiveK(f64),
    #[error("marginal count C(0|A) must be > 0, got {0}")]
    NonPositiveMarginalCount(f64),
    #[error("counts must be non-negative, got {0}")]
    NegativeCount(f64),
    #[error("empty grid")]
    EmptyGrid,
    #[error("no feasible settings under the given constraint")]
    EmptyFeasibleSet,
    #[error("phase-offset fit needs at least 3 data points, got {0}")]
    InsufficientData(usize),
    #[error("data uncertainties must be > 0")]
    NonPositiveSigma,
    #[error("model fringe is flat; phase offset unidentifiable")]
    DegenerateModel,
}

/// How the marginal proportionality constant `k` enters the S-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMode {
    /// Derive `k` from the model marginals of the `x0`/`y0` settings.
    Computed,
    /// Use a caller-supplied value (must be positive).
    Fixed(f64),
}

/// The four measurement settings of one Bell test plus the k-handling rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellConfig {
    pub x0: EomSetting,
    pub x1: EomSetting,
    pub y0: EomSetting,
    pub y1: EomSetting,
    pub k_mode: KMode,
}

impl BellConfig {
    pub fn validate(&self) -> Result<(), BellError> {
        for s in [&self.x0, &self.x1, &self.y0, &self.y1] {
            s.validate().map_err(InterferenceError::from)?;
        }
        if let KMode::Fixed(k) = self.k_mode {
            if !(k > 0.0) || !k.is_finite() {
                return Err(BellError::NonPositiveK(k));
            }
        }
        Ok(())
    }
}

/// The four joint values and two marginals an S-value was built from.
/// Probabilities for model evaluation, counts for measured data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BellComponents {
    pub joint_x0y0: f64,
    pub joint_x0y1: f64,
    pub joint_x1y0: f64,
    pub joint_x1y1: f64,
    pub marginal_x0: f64,
    pub marginal_y0: f64,
}

/// Outcome of one Bell evaluation. `s_error` is present only when the input
/// was counts with Poissonian statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BellResult {
    pub s_value: f64,
    pub s_error: Option<f64>,
    pub k_used: f64,
    pub components: BellComponents,
}

/// Counts entering the count-form S: four coincidence counts plus the
/// marginal count `C(0|A)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellCounts {
    pub c_x0y0: f64,
    pub c_x0y1: f64,
    pub c_x1y0: f64,
    pub c_x1y1: f64,
    /// Marginal count `C(0|A)`.
    pub c_marginal: f64,
}

/// Marginal ratio `k = P(0|x0) / P(0|y0)` of the central-bin detection
/// probabilities under the two base settings.
pub fn estimate_k(
    spec: &ModeSpectrum,
    x0: &EomSetting,
    y0: &EomSetting,
    tol: f64,
) -> Result<f64, BellError> {
    let m_signal = marginal_prob(spec, x0, Side::Signal, 0, tol)?;
    let m_idler = marginal_prob(spec, y0, Side::Idler, 0, tol)?;
    if m_idler <= 0.0 {
        return Err(BellError::ZeroIdlerMarginal);
    }
    Ok(m_signal / m_idler)
}

/// Model-side S-value from joint probabilities under full normalization.
pub fn ch_value(
    spec: &ModeSpectrum,
    config: &BellConfig,
    tol: f64,
) -> Result<BellResult, BellError> {
    config.validate()?;
    let joint = |x: &EomSetting, y: &EomSetting| -> Result<f64, BellError> {
        Ok(probability_table(spec, x, y, Scheme::Full, tol)?.prob(0, 0))
    };
    let p00 = joint(&config.x0, &config.y0)?;
    let p01 = joint(&config.x0, &config.y1)?;
    let p10 = joint(&config.x1, &config.y0)?;
    let p11 = joint(&config.x1, &config.y1)?;
    let m_x0 = marginal_prob(spec, &config.x0, Side::Signal, 0, tol)?;
    let m_y0 = marginal_prob(spec, &config.y0, Side::Idler, 0, tol)?;
    if m_y0 <= 0.0 {
        return Err(BellError::ZeroIdlerMarginal);
    }
    let k = match config.k_mode {
        KMode::Computed => m_x0 / m_y0,
        KMode::Fixed(k) => k,
    };
    let numerator = p00 + p01 + p10 - p11;
    let denominator = match config.k_mode {
        // With the computed k this is exactly m_y0 * (1 + k).
        KMode::Computed => m_x0 + m_y0,
        KMode::Fixed(k) => m_y0 * (1.0 + k),
    };
    if denominator <= 0.0 {
        return Err(BellError::ZeroDenominator);
    }
    Ok(BellResult {
        s_value: 2.0 * numerator / denominator,
        s_error: None,
        k_used: k,
        components: BellComponents {
            joint_x0y0: p00,
            joint_x0y1: p01,
            joint_x1y0: p10,
            joint_x1y1: p11,
            marginal_x0: m_x0,
            marginal_y0: m_y0,
        },
    })
}

/// Count-form S-value with Poissonian error propagation.
pub fn s_from_counts(counts: &BellCounts, k: f64) -> Result<BellResult, BellError> {
    for c in [
        counts.c_x0y0,
        counts.c_x0y1,
        counts.c_x1y0,
        counts.c_x1y1,
    ] {
        if !(c >= 0.0) {
            return Err(BellError::NegativeCount(c));
        }
    }
    if !(counts.c_marginal > 0.0) {
        return Err(BellError::NonPositiveMarginalCount(counts.c_marginal));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(BellError::NonPositiveK(k));
    }
    let numerator = counts.c_x0y0 + counts.c_x0y1 + counts.c_x1y0 - counts.c_x1y1;
    let s_value = 2.0 * numerator / (counts.c_marginal * (1.0 + k));
    let s_error = propagate_s_error(
        [
            counts.c_x0y0,
            counts.c_x0y1,
            counts.c_x1y0,
            counts.c_x1y1,
        ],
        counts.c_marginal,
        k,
    )?;
    Ok(BellResult {
        s_value,
        s_error: Some(s_error),
        k_used: k,
        components: BellComponents {
            joint_x0y0: counts.c_x0y0,
            joint_x0y1: counts.c_x0y1,
            joint_x1y0: counts.c_x1y0,
            joint_x1y1: counts.c_x1y1,
            marginal_x0: k * counts.c_marginal,
            marginal_y0: counts.c_marginal,
        },
    })
}

/// Relative change of the model S when every joint probability is rescaled
/// by its setting's three-bin normalizer (the experimental scheme) instead
/// of the full one.
pub fn s_normalization_bias(
    spec: &ModeSpectrum,
    config: &BellConfig,
    tol: f64,
) -> Result<f64, BellError> {
    config.validate()?;
    let mut num_full = 0.0;
    let mut num_biased = 0.0;
    let combos: [(&EomSetting, &EomSetting, f64); 4] = [
        (&config.x0, &config.y0, 1.0),
        (&config.x0, &config.y1, 1.0),
        (&config.x1, &config.y0, 1.0),
        (&config.x1, &config.y1, -1.0),
    ];
    for (x, y, sign) in combos {
        let p = probability_table(spec, x, y, Scheme::Full, tol)?.prob(0, 0);
        let deviation =
            crate::interference::normalization_deviation(spec, x, y, Scheme::Exp3, tol)?;
        num_full += sign * p;
        // Three-bin normalization inflates this setting's probabilities by
        // 1/(1 - deviation).
        num_biased += sign * p / (1.0 - deviation);
    }
    if num_full == 0.0 {
        return Err(BellError::ZeroDenominator);
    }
    Ok((num_biased / num_full - 1.0).abs())
}

/// Dense S-map over additive signal-phase offsets applied to `x0` (rows)
/// and `x1` (columns). Row-major, deterministic.
#[derive(Debug, Clone)]
pub struct SMap {
    pub beta0_deg: Vec<f64>,
    pub beta1_deg: Vec<f64>,
    /// `values[i][j] = S(beta0[i], beta1[j])`.
    pub values: Vec<Vec<f64>>,
}

impl SMap {
    /// Maximum S and its offsets, ties resolved toward the first row-major
    /// cell.
    pub fn argmax(&self) -> (f64, f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if s > best.0 {
                    best = (s, self.beta0_deg[i], self.beta1_deg[j]);
                }
            }
        }
        best
    }
}

/// Evaluate S for every combination of phase offsets on the two signal
/// settings. Rows evaluate in parallel; the output layout is deterministic.
pub fn s_map(
    spec: &ModeSpectrum,
    config: &BellConfig,
    beta0_grid_deg: &[f64],
    beta1_grid_deg: &[f64],
    tol: f64,
) -> Result<SMap, BellError> {
    if beta0_grid_deg.is_empty() || beta1_grid_deg.is_empty() {
        return Err(BellError::EmptyGrid);
    }
    config.validate()?;
    let values = beta0_grid_deg
        .par_iter()
        .map(|&b0| {
            beta1_grid_deg
                .iter()
                .map(|&b1| {
                    let shifted = BellConfig {
                        x0: config.x0.with_phase_offset(b0),
                        x1: config.x1.with_phase_offset(b1),
                        ..*config
                    };
                    ch_value(spec, &shifted, tol).map(|r| r.s_value)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SMap {
        beta0_deg: beta0_grid_deg.to_vec(),
        beta1_deg: beta1_grid_deg.to_vec(),
        values,
    })
}

/// Constraint on the four settings during optimization. Both variants
/// search the switching family realized by the RF chain: each arm toggles
/// between two drive states separated by a fixed phase shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizeConstraint {
    /// One modulation index per arm (`c_x0 = c_x1`, `c_y0 = c_y1`) and the
    /// within-arm phase shift locked at 180°.
    Constant,
    /// Indices may alternate between the two settings of an arm by at most
    /// `max_delta_c`; the `x1`/`y1` phases start `phase_shift_hint_deg`
    /// away from `x0`/`y0` and are refined freely.
    Alternating {
        max_delta_c: f64,
        phase_shift_hint_deg: f64,
    },
}

/// Box bounds on every modulation index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModIndexBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for ModIndexBounds {
    /// The experimental operating range.
    fn default() -> Self {
        ModIndexBounds { min: 0.0, max: 1.4 }
    }
}

/// Deterministic search parameters: coarse grid resolution and the
/// coordinate-descent stopping threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSpec {
    /// Grid points per axis, in both the coarse scan and each line scan.
    pub points_per_axis: usize,
    /// Stop refining once a full descent cycle improves S by less than this.
    pub refine_tol: f64,
    /// Hard cap on descent cycles.
    pub max_cycles: usize,
    /// Sideband truncation tolerance used by the objective.
    pub truncation_tol: f64,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            points_per_axis: 15,
            refine_tol: 1e-6,
            max_cycles: 64,
            truncation_tol: crate::modulator::DEFAULT_TRUNCATION_TOL,
        }
    }
}

/// Free parameters of the search: four mod indices and four phases with the
/// `x0` phase gauge-fixed to zero (S depends on phase differences only).
#[derive(Debug, Clone, Copy)]
struct Params {
    c: [f64; 4],     // x0, x1, y0, y1
    phase: [f64; 4], // x0 (fixed 0), x1, y0, y1
}

impl Params {
    fn to_config(self) -> BellConfig {
        let s = |c: f64, p: f64| EomSetting {
            mod_index: c,
            phase_deg: p,
            rf_equals_fsr: true,
        };
        BellConfig {
            x0: s(self.c[0], self.phase[0]),
            x1: s(self.c[1], self.phase[1]),
            y0: s(self.c[2], self.phase[2]),
            y1: s(self.c[3], self.phase[3]),
            k_mode: KMode::Computed,
        }
    }
}

/// Objective: S from raw joint probabilities (the full-scheme normalizer is
/// 1 up to the truncation tolerance, far below the refinement threshold).
fn s_objective(spec: &ModeSpectrum, p: &Params, tol: f64) -> f64 {
    use crate::interference::{joint_amplitude, FilterSelection};
    let cfg = p.to_config();
    let sel = FilterSelection::new(0, 0);
    let joint = |x: &EomSetting, y: &EomSetting| -> f64 {
        joint_amplitude(spec, x, y, sel, tol)
            .map(|a| a.norm_sqr())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let numerator = joint(&cfg.x0, &cfg.y0) + joint(&cfg.x0, &cfg.y1) + joint(&cfg.x1, &cfg.y0)
        - joint(&cfg.x1, &cfg.y1);
    let m_x0 = marginal_prob(spec, &cfg.x0, Side::Signal, 0, tol).unwrap_or(0.0);
    let m_y0 = marginal_prob(spec, &cfg.y0, Side::Idler, 0, tol).unwrap_or(0.0);
    let denominator = m_x0 + m_y0;
    if denominator <= 0.0 {
        return f64::NEG_INFINITY;
    }
    2.0 * numerator / denominator
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Deterministic maximization of S under `constraint`: an exhaustive coarse
/// grid over the free axes followed by cyclic per-axis line scans with a
/// shrinking bracket, until one full cycle improves S by less than
/// `search.refine_tol`.
///
/// Both constraints search within the switching measurement family of the
/// experiment: each arm toggles between two RF states whose phases differ
/// by a fixed shift (180° unless the alternating hint says otherwise).
/// Under `Constant` the shift stays locked — the family the constant-index
/// simulation explores — while `Alternating` uses the hint only to seed the
/// scan and then refines all phases freely.
///
/// The returned S is `ch_value` re-evaluated at the returned config. `seed`
/// is recorded by callers for run metadata; the default search is
/// deterministic and does not consume it.
pub fn optimize_settings(
    spec: &ModeSpectrum,
    constraint: OptimizeConstraint,
    bounds: ModIndexBounds,
    search: SearchSpec,
    _seed: u64,
) -> Result<(BellConfig, f64), BellError> {
    if !(bounds.min <= bounds.max)
        || bounds.min < 0.0
        || bounds.max > crate::modulator::MAX_MOD_INDEX
    {
        return Err(BellError::EmptyFeasibleSet);
    }
    if let OptimizeConstraint::Alternating { max_delta_c, .. } = constraint {
        if max_delta_c < 0.0 {
            return Err(BellError::EmptyFeasibleSet);
        }
    }
    let n = search.points_per_axis.max(2);
    let tol = search.truncation_tol;
    let c_grid = linspace(bounds.min, bounds.max, n);
    let phase_grid = linspace(0.0, 360.0 * (n as f64 - 1.0) / n as f64, n);
    let shift = match constraint {
        OptimizeConstraint::Constant => 180.0,
        OptimizeConstraint::Alternating {
            phase_shift_hint_deg,
            ..
        } => phase_shift_hint_deg,
    };

    // Coarse scan. Axes: constant -> (c_x, c_y, base idler phase);
    // alternating -> (c_x0, c_x1, c_y0, c_y1, base idler phase). The x0
    // phase is gauge-fixed to zero and the second setting of each arm sits
    // `shift` away. Cells evaluate in parallel; ties resolve to the lowest
    // index.
    let total = match constraint {
        OptimizeConstraint::Constant => n * n * n,
        OptimizeConstraint::Alternating { .. } => n * n * n * n * n,
    };
    let decode = |idx: usize| -> Option<Params> {
        match constraint {
            OptimizeConstraint::Constant => {
                let i0 = idx / (n * n);
                let i1 = (idx / n) % n;
                let i2 = idx % n;
                Some(Params {
                    c: [c_grid[i0], c_grid[i0], c_grid[i1], c_grid[i1]],
                    phase: [0.0, shift, phase_grid[i2], phase_grid[i2] + shift],
                })
            }
            OptimizeConstraint::Alternating { max_delta_c, .. } => {
                let i0 = idx / (n * n * n * n);
                let i1 = (idx / (n * n * n)) % n;
                let i2 = (idx / (n * n)) % n;
                let i3 = (idx / n) % n;
                let i4 = idx % n;
                if (c_grid[i0] - c_grid[i1]).abs() > max_delta_c
                    || (c_grid[i2] - c_grid[i3]).abs() > max_delta_c
                {
                    return None;
                }
                Some(Params {
                    c: [c_grid[i0], c_grid[i1], c_grid[i2], c_grid[i3]],
                    phase: [0.0, shift, phase_grid[i4], phase_grid[i4] + shift],
                })
            }
        }
    };
    let best_cell = (0..total)
        .into_par_iter()
        .filter_map(|idx| decode(idx).map(|p| (s_objective(spec, &p, tol), idx)))
        .reduce(
            || (f64::NEG_INFINITY, usize::MAX),
            |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );
    if best_cell.1 == usize::MAX {
        return Err(BellError::EmptyFeasibleSet);
    }
    let mut params = decode(best_cell.1).expect("winning cell decodes");
    let mut best_s = best_cell.0;

    // Cyclic coordinate descent. Constant keeps the per-arm index pairs and
    // the within-arm shift locked; alternating frees every phase.
    #[derive(Clone, Copy)]
    enum Axis {
        CPair { members: [usize; 2] },
        C { member: usize, partner: usize },
        Phase { member: usize },
        PhasePair { members: [usize; 2] },
    }
    let axes: Vec<Axis> = match constraint {
        OptimizeConstraint::Constant => vec![
            Axis::CPair { members: [0, 1] },
            Axis::CPair { members: [2, 3] },
            Axis::PhasePair { members: [2, 3] },
        ],
        OptimizeConstraint::Alternating { .. } => vec![
            Axis::C {
                member: 0,
                partner: 1,
            },
            Axis::C {
                member: 1,
                partner: 0,
            },
            Axis::C {
                member: 2,
                partner: 3,
            },
            Axis::C {
                member: 3,
                partner: 2,
            },
            Axis::Phase { member: 1 },
            Axis::Phase { member: 2 },
            Axis::Phase { member: 3 },
        ],
    };
    let c_span = bounds.max - bounds.min;
    let mut half_c = c_span / 2.0;
    let mut half_phase = 180.0_f64;
    for _cycle in 0..search.max_cycles {
        let cycle_start = best_s;
        for axis in &axes {
            let scan = |lo: f64, hi: f64, apply: &dyn Fn(&Params, f64) -> Params| {
                let mut local_best = (best_s, None);
                for v in linspace(lo, hi, n) {
                    let candidate = apply(&params, v);
                    let s = s_objective(spec, &candidate, tol);
                    if s > local_best.0 {
                        local_best = (s, Some(candidate));
                    }
                }
                local_best
            };
            match *axis {
                Axis::CPair { members } => {
                    let v0 = params.c[members[0]];
                    let lo = (v0 - half_c).max(bounds.min);
                    let hi = (v0 + half_c).min(bounds.max);
                    let (s, cand) = scan(lo, hi, &|p, v| {
                        let mut q = *p;
                        q.c[members[0]] = v;
                        q.c[members[1]] = v;
                        q
                    });
                    if let Some(c) = cand {
                        params = c;
                        best_s = s;
                    }
                }
                Axis::C { member, partner } => {
                    let delta = match constraint {
                        OptimizeConstraint::Alternating { max_delta_c, .. } => max_delta_c,
                        OptimizeConstraint::Constant => 0.0,
                    };
                    let anchor = params.c[partner];
                    let lo = (params.c[member] - half_c)
                        .max(bounds.min)
                        .max(anchor - delta);
                    let hi = (params.c[member] + half_c)
                        .min(bounds.max)
                        .min(anchor + delta);
                    let (s, cand) = scan(lo, hi, &|p, v| {
                        let mut q = *p;
                        q.c[member] = v;
                        q
                    });
                    if let Some(c) = cand {
                        params = c;
                        best_s = s;
                    }
                }
                Axis::Phase { member } => {
                    let v0 = params.phase[member];
                    let (s, cand) = scan(v0 - half_phase, v0 + half_phase, &|p, v| {
                        let mut q = *p;
                        q.phase[member] = v;
                        q
                    });
                    if let Some(c) = cand {
                        params = c;
                        best_s = s;
                    }
                }
                Axis::PhasePair { members } => {
                    let v0 = params.phase[members[0]];
                    let offset = params.phase[members[1]] - v0;
                    let (s, cand) = scan(v0 - half_phase, v0 + half_phase, &|p, v| {
                        let mut q = *p;
                        q.phase[members[0]] = v;
                        q.phase[members[1]] = v + offset;
                        q
                    });
                    if let Some(c) = cand {
                        params = c;
                        best_s = s;
                    }
                }
            }
        }
        half_c *= 0.5;
        half_phase *= 0.5;
        if best_s - cycle_start < search.refine_tol {
            break;
        }
    }

    let config = params.to_config();
    config.validate()?;
    let reported = ch_value(spec, &config, tol)?;
    Ok((config, reported.s_value))
}

/// Least-squares global phase offset between a model fringe and measured
/// counts, with the amplitude scale fitted jointly. Returns
/// `(offset_deg in [-180, 180), chi^2)` minimizing
/// `Σ ((s·model(β+offset) − count)/σ)²`.
pub fn fit_phase_offset(
    model: impl Fn(f64) -> f64,
    data: &[(f64, f64, f64)],
) -> Result<(f64, f64), BellError> {
    if data.len() < 3 {
        return Err(BellError::InsufficientData(data.len()));
    }
    if data.iter().any(|&(_, _, sigma)| !(sigma > 0.0)) {
        return Err(BellError::NonPositiveSigma);
    }
    let chi2_at = |offset: f64| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(beta, y, sigma) in data {
            let m = model(beta + offset);
            let w = 1.0 / (sigma * sigma);
            num += w * m * y;
            den += w * m * m;
        }
        let scale = if den > 0.0 { num / den } else { 0.0 };
        data.iter()
            .map(|&(beta, y, sigma)| {
                let r = (scale * model(beta + offset) - y) / sigma;
                r * r
            })
            .sum()
    };

    // Degeneracy check: a flat model cannot localize an offset.
    let mut m_lo = f64::INFINITY;
    let mut m_hi = f64::NEG_INFINITY;
    for off in 0..360 {
        for &(beta, _, _) in data {
            let m = model(beta + off as f64);
            m_lo = m_lo.min(m);
            m_hi = m_hi.max(m);
        }
    }
    if m_hi - m_lo < 1e-12 * m_hi.abs().max(1.0) {
        return Err(BellError::DegenerateModel);
    }

    let mut best = (f64::INFINITY, 0.0);
    for i in 0..360 {
        let off = -180.0 + i as f64;
        let chi2 = chi2_at(off);
        if chi2 < best.0 {
            best = (chi2, off);
        }
    }
    // Ternary refinement around the coarse winner.
    let (mut lo, mut hi) = (best.1 - 1.0, best.1 + 1.0);
    for _ in 0..120 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if chi2_at(m1) <= chi2_at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let offset = 0.5 * (lo + hi);
    let offset = (offset + 180.0).rem_euclid(360.0) - 180.0;
    Ok((offset, chi2_at(offset)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulator::DEFAULT_TRUNCATION_TOL as TOL;
    use approx::assert_abs_diff_eq;

    fn symmetric_spectrum() -> ModeSpectrum {
        ModeSpectrum::from_weights([(-1, 0.3), (0, 1.0), (1, 0.3)], 423.66, 2.8).unwrap()
    }

    fn config(
        x0: (f64, f64),
        x1: (f64, f64),
        y0: (f64, f64),
        y1: (f64, f64),
    ) -> BellConfig {
        BellConfig {
            x0: EomSetting::new(x0.0, x0.1).unwrap(),
            x1: EomSetting::new(x1.0, x1.1).unwrap(),
            y0: EomSetting::new(y0.0, y0.1).unwrap(),
            y1: EomSetting::new(y1.0, y1.1).unwrap(),
            k_mode: KMode::Computed,
        }
    }

    #[test]
    fn k_is_one_for_symmetric_spectrum_and_equal_indices() {
        let spec = symmetric_spectrum();
        let x0 = EomSetting::new(0.7, 0.0).unwrap();
        let y0 = EomSetting::new(0.7, 120.0).unwrap();
        let k = estimate_k(&spec, &x0, &y0, TOL).unwrap();
        assert_abs_diff_eq!(k, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn k_scale_invariant_in_weights() {
        let base: Vec<(i32, f64)> = vec![(-1, 0.2), (0, 1.0), (1, 0.4)];
        let scaled: Vec<(i32, f64)> = base.iter().map(|&(n, w)| (n, 3.7 * w)).collect();
        let s1 = ModeSpectrum::from_weights(base, 423.66, 2.8).unwrap();
        let s2 = ModeSpectrum::from_weights(scaled, 423.66, 2.8).unwrap();
        let x0 = EomSetting::new(0.29, 0.0).unwrap();
        let y0 = EomSetting::new(0.34, 0.0).unwrap();
        assert_abs_diff_eq!(
            estimate_k(&s1, &x0, &y0, TOL).unwrap(),
            estimate_k(&s2, &x0, &y0, TOL).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn zero_modulation_gives_exactly_two() {
        let spec = symmetric_spectrum();
        let cfg = config((0.0, 0.0), (0.0, 10.0), (0.0, 20.0), (0.0, 30.0));
        let r = ch_value(&spec, &cfg, TOL).unwrap();
        assert!((r.s_value - 2.0).abs() < 1e-12);
        assert_eq!(r.s_error, None);
        assert_abs_diff_eq!(r.k_used, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn counts_arithmetic_example() {
        let counts = BellCounts {
            c_x0y0: 100.0,
            c_x0y1: 100.0,
            c_x1y0: 100.0,
            c_x1y1: 100.0,
            c_marginal: 200.0,
        };
        let r = s_from_counts(&counts, 1.0).unwrap();
        assert_abs_diff_eq!(r.s_value, 1.0, epsilon = 1e-15);
        assert!(r.s_error.is_some());
    }

    #[test]
    fn counts_scale_invariance() {
        let counts = BellCounts {
            c_x0y0: 120.0,
            c_x0y1: 90.0,
            c_x1y0: 110.0,
            c_x1y1: 15.0,
            c_marginal: 180.0,
        };
        let a = s_from_counts(&counts, 0.97).unwrap();
        let scaled = BellCounts {
            c_x0y0: 1200.0,
            c_x0y1: 900.0,
            c_x1y0: 1100.0,
            c_x1y1: 150.0,
            c_marginal: 1800.0,
        };
        let b = s_from_counts(&scaled, 0.97).unwrap();
        assert_abs_diff_eq!(a.s_value, b.s_value, epsilon = 1e-12);
    }

    #[test]
    fn counts_reproduce_model_s_exactly() {
        // Any counts proportional to the model components reproduce the
        // model S: C(00|xy) ∝ P(00|xy), C(0|A) ∝ P(0|y0), k = m_x0/m_y0.
        let spec = symmetric_spectrum();
        let cfg = config((0.29, 0.0), (0.85, 182.0), (0.34, 314.0), (0.81, 181.0));
        let model = ch_value(&spec, &cfg, TOL).unwrap();
        let scale = 1.0e6;
        let counts = BellCounts {
            c_x0y0: scale * model.components.joint_x0y0,
            c_x0y1: scale * model.components.joint_x0y1,
            c_x1y0: scale * model.components.joint_x1y0,
            c_x1y1: scale * model.components.joint_x1y1,
            c_marginal: scale * model.components.marginal_y0,
        };
        let from_counts = s_from_counts(&counts, model.k_used).unwrap();
        assert_abs_diff_eq!(from_counts.s_value, model.s_value, epsilon = 1e-12);
    }

    #[test]
    fn counts_validation() {
        let bad = BellCounts {
            c_x0y0: -1.0,
            c_x0y1: 0.0,
            c_x1y0: 0.0,
            c_x1y1: 0.0,
            c_marginal: 1.0,
        };
        assert!(matches!(
            s_from_counts(&bad, 1.0),
            Err(BellError::NegativeCount(_))
        ));
        let zero_marg = BellCounts {
            c_x0y0: 1.0,
            c_x0y1: 1.0,
            c_x1y0: 1.0,
            c_x1y1: 1.0,
            c_marginal: 0.0,
        };
        assert!(matches!(
            s_from_counts(&zero_marg, 1.0),
            Err(BellError::NonPositiveMarginalCount(_))
        ));
        let good = BellCounts {
            c_x0y0: 1.0,
            c_x0y1: 1.0,
            c_x1y0: 1.0,
            c_x1y1: 1.0,
            c_marginal: 10.0,
        };
        assert!(matches!(
            s_from_counts(&good, 0.0),
            Err(BellError::NonPositiveK(_))
        ));
    }

    #[test]
    fn s_map_uniform_two_at_zero_modulation() {
        let spec = symmetric_spectrum();
        let cfg = config((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
        let grid = [-20.0, 0.0, 20.0];
        let map = s_map(&spec, &cfg, &grid, &grid, TOL).unwrap();
        for row in &map.values {
            for &s in row {
                assert!((s - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn s_map_argmax_consistent_with_ch_value() {
        let spec = symmetric_spectrum();
        let cfg = config((0.29, 0.0), (0.85, 182.0), (0.34, 314.0), (0.81, 181.0));
        let b0 = [-10.0, 0.0, 10.0];
        let b1 = [-6.0, 0.0, 6.0];
        let map = s_map(&spec, &cfg, &b0, &b1, TOL).unwrap();
        let (s_max, off0, off1) = map.argmax();
        let shifted = BellConfig {
            x0: cfg.x0.with_phase_offset(off0),
            x1: cfg.x1.with_phase_offset(off1),
            ..cfg
        };
        let direct = ch_value(&spec, &shifted, TOL).unwrap();
        assert_abs_diff_eq!(s_max, direct.s_value, epsilon = 1e-12);
    }

    fn tiny_search() -> SearchSpec {
        SearchSpec {
            points_per_axis: 7,
            ..SearchSpec::default()
        }
    }

    #[test]
    fn optimizer_single_mode_never_violates() {
        let spec = ModeSpectrum::from_weights([(0, 1.0)], 423.66, 2.8).unwrap();
        for constraint in [
            OptimizeConstraint::Constant,
            OptimizeConstraint::Alternating {
                max_delta_c: 0.5,
                phase_shift_hint_deg: 180.0,
            },
        ] {
            let (_cfg, s) = optimize_settings(
                &spec,
                constraint,
                ModIndexBounds::default(),
                tiny_search(),
                0,
            )
            .unwrap();
            assert!(
                (s - 2.0).abs() < 1e-12,
                "product state must cap at S = 2, got {s}"
            );
        }
    }

    #[test]
    fn optimizer_reported_s_matches_ch_value() {
        let spec = symmetric_spectrum();
        let (cfg, s) = optimize_settings(
            &spec,
            OptimizeConstraint::Alternating {
                max_delta_c: 0.5,
                phase_shift_hint_deg: 180.0,
            },
            ModIndexBounds::default(),
            tiny_search(),
            0,
        )
        .unwrap();
        let again = ch_value(&spec, &cfg, TOL).unwrap();
        assert!((s - again.s_value).abs() < 1e-9);
    }

    #[test]
    fn optimizer_deterministic() {
        let spec = symmetric_spectrum();
        let run = || {
            optimize_settings(
                &spec,
                OptimizeConstraint::Constant,
                ModIndexBounds::default(),
                tiny_search(),
                7,
            )
            .unwrap()
        };
        let (cfg_a, s_a) = run();
        let (cfg_b, s_b) = run();
        assert_eq!(s_a.to_bits(), s_b.to_bits());
        assert_eq!(
            format!("{cfg_a:?}"),
            format!("{cfg_b:?}"),
            "identical seed and search spec must reproduce the config"
        );
    }

    #[test]
    fn optimizer_rejects_empty_feasible_set() {
        let spec = symmetric_spectrum();
        let bad = ModIndexBounds { min: 1.0, max: 0.5 };
        assert!(matches!(
            optimize_settings(
                &spec,
                OptimizeConstraint::Constant,
                bad,
                tiny_search(),
                0
            ),
            Err(BellError::EmptyFeasibleSet)
        ));
    }

    fn cosine_model(beta_deg: f64) -> f64 {
        40.0 + 20.0 * (beta_deg.to_radians() - 1.0).cos()
            + 3.0 * (2.0 * beta_deg.to_radians()).cos()
    }

    #[test]
    fn fit_offset_zero_for_unshifted_data() {
        let data: Vec<(f64, f64, f64)> = (0..40)
            .map(|i| {
                let beta = 9.0 * i as f64;
                (beta, cosine_model(beta), 1.0)
            })
            .collect();
        let (offset, chi2) = fit_phase_offset(cosine_model, &data).unwrap();
        assert_abs_diff_eq!(offset, 0.0, epsilon = 1e-6);
        assert!(chi2 < 1e-18, "chi2 = {chi2}");
    }

    #[test]
    fn fit_recovers_pattern_shift() {
        // Pattern shifted by +37 deg: data(beta) = model(beta - 37).
        let data: Vec<(f64, f64, f64)> = (0..40)
            .map(|i| {
                let beta = 9.0 * i as f64;
                (beta, cosine_model(beta - 37.0), 1.0)
            })
            .collect();
        let (offset, chi2) = fit_phase_offset(cosine_model, &data).unwrap();
        assert_abs_diff_eq!(offset, -37.0, epsilon = 1e-6);
        assert!(chi2 < 1e-18, "chi2 = {chi2}");
    }

    #[test]
    fn fit_rejects_flat_model() {
        let data: Vec<(f64, f64, f64)> =
            (0..10).map(|i| (36.0 * i as f64, 5.0, 1.0)).collect();
        assert!(matches!(
            fit_phase_offset(|_| 5.0, &data),
            Err(BellError::DegenerateModel)
        ));
    }

    #[test]
    fn fit_recovers_offset_from_poisson_noise() {
        // Repeated-seed study: the fixed-seed recovery must sit within three
        // empirical standard deviations of the truth.
        let truth = 23.0;
        let betas: Vec<f64> = (0..40).map(|i| 9.0 * i as f64).collect();
        let recover = |seed: u64| {
            let rates: Vec<(String, f64)> = betas
                .iter()
                .map(|&b| (format!("b{b}"), cosine_model(b - truth)))
                .collect();
            let recs = crate::stats::sample_counts(&rates, 1, seed).unwrap();
            let data: Vec<(f64, f64, f64)> = betas
                .iter()
                .zip(recs.iter())
                .map(|(&b, r)| {
                    let y = r.count as f64;
                    (b, y, y.max(1.0).sqrt())
                })
                .collect();
            fit_phase_offset(cosine_model, &data).unwrap().0
        };
        let samples: Vec<f64> = (0..60).map(|s| recover(s) + truth).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            / (samples.len() - 1) as f64)
            .sqrt();
        let fixed = recover(4242) + truth;
        assert!(
            fixed.abs() <= 3.0 * sd.max(1e-6),
            "recovered offset {} deg outside 3 sigma = {}",
            fixed,
            3.0 * sd
        );
    }
}
