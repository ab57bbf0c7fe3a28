//! Poisson variates for photo-electron counts.
//!
//! Inversion below a mean of 30, transformed rejection with squeeze (PTRS)
//! up to 1e4, and a rounded Gaussian above that.

use rand::Rng;
use rand_distr::StandardNormal;

pub const INVERSION_LIMIT: f64 = 30.0;
pub const GAUSSIAN_LIMIT: f64 = 1e4;

pub fn sample<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    if mean < INVERSION_LIMIT {
        inversion(rng, mean)
    } else if mean <= GAUSSIAN_LIMIT {
        ptrs(rng, mean)
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (mean + mean.sqrt() * z).round().max(0.0) as u64
    }
}

fn inversion<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let u: f64 = rng.gen();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0u64;
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        // cdf saturates at 1 - ε; the tail beyond this is far below f64 resolution
        if p < 1e-300 && k as f64 > mean {
            break;
        }
    }
    k
}

/// Hörmann (1993), "The transformed rejection method for generating Poisson
/// random variables", algorithm PTRS.
fn ptrs<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let smu = mean.sqrt();
    let b = 0.931 + 2.53 * smu;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    let log_mu = mean.ln();
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        if lhs <= -mean + k * log_mu - ln_factorial(k as u64) {
            return k as u64;
        }
    }
}

pub(crate) fn ln_factorial(k: u64) -> f64 {
    if k < 16 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    let x = k as f64;
    let x2 = x * x;
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2)
}
