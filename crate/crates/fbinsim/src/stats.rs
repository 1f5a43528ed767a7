//! Monte-Carlo count sampling, visibility estimation and Poissonian error
//! propagation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;
use thiserror::Error;

/// Counter-based generator used for all count sampling. Recorded in output
/// metadata next to the seed so runs can be reproduced bit-for-bit.
pub const RNG_ALGORITHM: &str = "ChaCha12";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("expected rate must be non-negative and finite, got {0}")]
    InvalidRate(f64),
    #[error("trials must be >= 1")]
    NoTrials,
    #[error("too many trials for stream addressing (max 2^32 - 1)")]
    TooManyTrials,
    #[error("visibility fit needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("fringe points span {0} degrees; a full 360-degree period is required")]
    InsufficientSpan(f64),
    #[error("fitted mean level is not positive; visibility undefined")]
    NonPositiveMean,
    #[error("singular normal equations in least-squares fit")]
    SingularFit,
    #[error("marginal count must be > 0, got {0}")]
    NonPositiveMarginal(f64),
    #[error("counts must be non-negative, got {0}")]
    NegativeCount(f64),
    #[error("k must be > 0, got {0}")]
    NonPositiveK(f64),
}

/// One Poisson draw of one labelled rate in one trial. Reproducible from
/// `(lambda, trial, seed)` alone: every record owns its own RNG stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRecord {
    pub label: String,
    /// Expected counts per trial.
    pub lambda: f64,
    /// Trial index, 0-based.
    pub trial: u64,
    pub count: u64,
    pub seed: u64,
}

fn record_stream(rate_index: usize, trial: u64) -> u64 {
    ((rate_index as u64) << 32) | trial
}

/// Independent Poisson draws for every `(rate, trial)` pair, seeded
/// deterministically with one [`ChaCha12Rng`] stream per record.
pub fn sample_counts(
    rates: &[(String, f64)],
    trials: u64,
    seed: u64,
) -> Result<Vec<CountRecord>, StatsError> {
    if trials == 0 {
        return Err(StatsError::NoTrials);
    }
    if trials > u32::MAX as u64 {
        return Err(StatsError::TooManyTrials);
    }
    for (_, lambda) in rates {
        if !lambda.is_finite() || *lambda < 0.0 {
            return Err(StatsError::InvalidRate(*lambda));
        }
    }
    let mut out = Vec::with_capacity(rates.len() * trials as usize);
    for (i, (label, lambda)) in rates.iter().enumerate() {
        for trial in 0..trials {
            let count = if *lambda == 0.0 {
                0
            } else {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(record_stream(i, trial));
                let poisson = Poisson::new(*lambda).expect("validated above");
                poisson.sample(&mut rng) as u64
            };
            out.push(CountRecord {
                label: label.clone(),
                lambda: *lambda,
                trial,
                count,
                seed,
            });
        }
    }
    Ok(out)
}

/// Single Poisson draw at rate `lambda` from an externally managed stream.
pub fn sample_poisson<R: Rng>(rng: &mut R, lambda: f64) -> Result<u64, StatsError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(StatsError::InvalidRate(lambda));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    let poisson = Poisson::new(lambda).expect("validated above");
    Ok(poisson.sample(rng) as u64)
}

/// Least-squares fit of `value(β) = A + B·cos(β·π/180 − φ)` with the period
/// fixed to 360° in β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringeFit {
    pub mean: f64,
    pub amplitude: f64,
    pub phase_rad: f64,
}

/// Fit the first-harmonic cosine through `(β_deg, value)` points.
pub fn fit_fringe(points: &[(f64, f64)]) -> Result<FringeFit, StatsError> {
    if points.len() < 4 {
        return Err(StatsError::TooFewPoints(points.len()));
    }
    // Linear model A + C cosθ + D sinθ; solve the 3x3 normal equations.
    let mut m = [[0.0_f64; 3]; 3];
    let mut v = [0.0_f64; 3];
    for &(beta_deg, y) in points {
        let theta = beta_deg.to_radians();
        let row = [1.0, theta.cos(), theta.sin()];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += row[r] * row[c];
            }
            v[r] += row[r] * y;
        }
    }
    let x = solve3(m, v).ok_or(StatsError::SingularFit)?;
    Ok(FringeFit {
        mean: x[0],
        amplitude: (x[1] * x[1] + x[2] * x[2]).sqrt(),
        phase_rad: x[2].atan2(x[1]),
    })
}

fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in (col + 1)..3 {
            let factor = m[row][col] / m[col][col];
            for c in col..3 {
                m[row][c] -= factor * m[col][c];
            }
            v[row] -= factor * v[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = v[row];
        for c in (row + 1)..3 {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Fringe contrast `V = |B|/A` of the fitted first harmonic.
///
/// Requires at least 4 points spanning a full 360° period unless
/// `from_model` marks the input as a dense model evaluation. Values outside
/// `[0, 1]` indicate an unphysical fit and are clamped.
pub fn visibility(points: &[(f64, f64)], from_model: bool) -> Result<f64, StatsError> {
    if points.len() < 4 {
        return Err(StatsError::TooFewPoints(points.len()));
    }
    if !from_model {
        let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 360.0 - 1e-9 {
            return Err(StatsError::InsufficientSpan(hi - lo));
        }
    }
    let fit = fit_fringe(points)?;
    if fit.mean <= 0.0 {
        return Err(StatsError::NonPositiveMean);
    }
    Ok((fit.amplitude / fit.mean).clamp(0.0, 1.0))
}

/// Poissonian standard error of the count-form S-value.
///
/// With `S = 2 (C1 + C2 + C3 - C4) / (C0 (1 + k))`, `Var C_i = C_i` and `k`
/// exact, the analytic propagation gives
/// `σ_S² = (2 / (C0 (1+k)))² (C1+C2+C3+C4) + S²/C0`.
pub fn propagate_s_error(joints: [f64; 4], marginal: f64, k: f64) -> Result<f64, StatsError> {
    for c in joints {
        if !(c >= 0.0) {
            return Err(StatsError::NegativeCount(c));
        }
    }
    if !(marginal > 0.0) {
        return Err(StatsError::NonPositiveMarginal(marginal));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(StatsError::NonPositiveK(k));
    }
    let scale = 2.0 / (marginal * (1.0 + k));
    let s = scale * (joints[0] + joints[1] + joints[2] - joints[3]);
    let joint_var = scale * scale * (joints[0] + joints[1] + joints[2] + joints[3]);
    let marginal_var = s * s / marginal;
    Ok((joint_var + marginal_var).sqrt())
}
