//! Independent oracles for the acceptance suite: Miller backward recurrence
//! for Bessel values, a dense outer-product expansion of the post-modulator
//! pair state, and a chi-square goodness-of-fit p-value for the Poisson
//! sampler. None of these share evaluation code with the paths they check.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use fbinsim::interference::{joint_amplitude, FilterSelection};
use fbinsim::modulator::EomSetting;
use fbinsim::spectrum::ModeSpectrum;

/// `J_n(x)` by Miller's backward recurrence with even-order normalization
/// (`J_0 + 2 J_2 + 2 J_4 + ... = 1`).
pub fn bessel_backward_recurrence(order: i32, x: f64) -> f64 {
    let n = order.unsigned_abs() as i32;
    let sign = if order < 0 && n % 2 == 1 { -1.0 } else { 1.0 };
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let start = (n.max(x.abs().ceil() as i32) + 30) & !1; // even start order
    let mut jp = 0.0_f64; // J_{k+1}
    let mut jc = 1e-30_f64; // J_k at k = start
    let mut result = if n == start { jc } else { 0.0 };
    let mut norm = 0.0;
    let mut k = start;
    while k > 0 {
        let jm = (2.0 * k as f64 / x) * jc - jp;
        jp = jc;
        jc = jm;
        k -= 1;
        if k == n {
            result = jc;
        }
        if k % 2 == 0 && k > 0 {
            norm += 2.0 * jc;
        }
        if jc.abs() > 1e250 {
            jc *= 1e-250;
            jp *= 1e-250;
            result *= 1e-250;
            norm *= 1e-250;
        }
    }
    norm += jc; // J_0 term
    sign * result / norm
}

fn oracle_u(order: i32, c: f64, gamma_rad: f64) -> Complex64 {
    Complex64::from_polar(
        bessel_backward_recurrence(order, c),
        order as f64 * (gamma_rad - std::f64::consts::FRAC_PI_2),
    )
}

/// Maximum |collapsed - dense| over random spectra and settings.
///
/// The dense route builds the full post-modulator amplitude array by
/// scattering every (mode, signal-order, idler-order) triple into its
/// destination cell, with coefficients from the recurrence oracle, then
/// reads out each cell; the collapsed route is `joint_amplitude`.
pub fn dense_expansion_max_diff(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tol = 1e-12;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let n_modes = rng.gen_range(1..=5);
        let mut indices: Vec<i32> = (-3..=3).collect();
        for i in (1..indices.len()).rev() {
            indices.swap(i, rng.gen_range(0..=i));
        }
        let weights: Vec<(i32, f64)> = indices[..n_modes]
            .iter()
            .map(|&n| (n, rng.gen_range(0.1..1.0)))
            .collect();
        let spec = ModeSpectrum::from_weights(weights, 423.66, 2.8).unwrap();
        let x = EomSetting::new(rng.gen_range(0.0..1.4), rng.gen_range(0.0..360.0)).unwrap();
        let y = EomSetting::new(rng.gen_range(0.0..1.4), rng.gen_range(0.0..360.0)).unwrap();

        let k_s = fbinsim::modulator::truncation_order(x.mod_index, tol).unwrap() as i32;
        let k_i = fbinsim::modulator::truncation_order(y.mod_index, tol).unwrap() as i32;
        let (n_min, n_max) = (spec.min_index(), spec.max_index());
        let a_min = n_min - k_s;
        let a_max = n_max + k_s;
        let b_min = -n_max - k_i;
        let b_max = -n_min + k_i;
        let width = (b_max - b_min + 1) as usize;
        let mut dense =
            vec![Complex64::new(0.0, 0.0); ((a_max - a_min + 1) as usize) * width];
        for (n, f_n) in spec.iter() {
            for p in -k_s..=k_s {
                let us = oracle_u(p, x.mod_index, x.phase_rad());
                for q in -k_i..=k_i {
                    let ui = oracle_u(q, y.mod_index, y.phase_rad());
                    let a = n + p;
                    let b = -n + q;
                    let cell =
                        ((a - a_min) as usize) * width + (b - b_min) as usize;
                    dense[cell] += f_n * us * ui;
                }
            }
        }
        for a in a_min..=a_max {
            for b in b_min..=b_max {
                let collapsed =
                    joint_amplitude(&spec, &x, &y, FilterSelection::new(a, b), tol).unwrap();
                let cell = ((a - a_min) as usize) * width + (b - b_min) as usize;
                worst = worst.max((collapsed - dense[cell]).norm());
            }
        }
    }
    worst
}

/// Pearson chi-square p-value of `draws` sampler outputs against the exact
/// Poisson pmf, with bins merged to expected counts >= 5.
pub fn poisson_chi2_pvalue(lambda: f64, draws: u64, seed: u64) -> f64 {
    let records =
        fbinsim::stats::sample_counts(&[("gof".to_string(), lambda)], draws, seed).unwrap();
    let k_cap = (lambda + 20.0 * lambda.sqrt().max(1.0)).ceil() as usize + 5;
    let mut observed = vec![0u64; k_cap + 1];
    for r in &records {
        let k = (r.count as usize).min(k_cap);
        observed[k] += 1;
    }
    // Exact pmf by upward recurrence.
    let mut pmf = Vec::with_capacity(k_cap + 1);
    let mut p = (-lambda).exp();
    pmf.push(p);
    for k in 1..=k_cap {
        p *= lambda / k as f64;
        pmf.push(p);
    }

    let n = draws as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new(); // (expected, observed)
    let mut acc_exp = 0.0;
    let mut acc_obs = 0.0;
    for k in 0..=k_cap {
        acc_exp += n * pmf[k];
        acc_obs += observed[k] as f64;
        if acc_exp >= 5.0 {
            bins.push((acc_exp, acc_obs));
            acc_exp = 0.0;
            acc_obs = 0.0;
        }
    }
    // Tail: everything beyond k_cap plus any unfinished bin.
    let tail_exp = acc_exp + n * (1.0 - pmf.iter().sum::<f64>()).max(0.0);
    let tail_obs = acc_obs;
    if tail_exp >= 5.0 || bins.is_empty() {
        bins.push((tail_exp, tail_obs));
    } else if let Some(last) = bins.last_mut() {
        last.0 += tail_exp;
        last.1 += tail_obs;
    }

    let stat: f64 = bins
        .iter()
        .map(|&(e, o)| {
            let d = o - e;
            d * d / e
        })
        .sum();
    let dof = (bins.len() - 1).max(1) as f64;
    let chi2 = ChiSquared::new(dof).expect("valid dof");
    1.0 - chi2.cdf(stat)
}
