//! Poisson photon-count sampling.
//!
//! Small means use sequential inversion of the CDF; means of 30 and above use
//! Hörmann's transformed rejection with squeeze (PTRS). Both consume uniforms
//! from the caller's generator only, so a seeded generator gives identical
//! counts on every platform.

use rand::Rng;

use crate::error::{CoreError, Result};

const INVERSION_LIMIT: f64 = 30.0;

pub fn sample_poisson<R: Rng + ?Sized>(lam: f64, rng: &mut R) -> u64 {
    if lam <= 0.0 {
        0
    } else if lam < INVERSION_LIMIT {
        inversion(lam, rng)
    } else {
        ptrs(lam, rng)
    }
}

fn inversion<R: Rng + ?Sized>(lam: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut x = 0u64;
    let mut p = (-lam).exp();
    let mut s = p;
    while u > s {
        x += 1;
        p *= lam / x as f64;
        s += p;
        // u sits in the far tail where p underflowed
        if p == 0.0 {
            break;
        }
    }
    x
}

fn ptrs<R: Rng + ?Sized>(lam: f64, rng: &mut R) -> u64 {
    let slam = lam.sqrt();
    let loglam = lam.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lam + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lam + k * loglam - libm::lgamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// Draws a count image with per-pixel means `photon_budget * intensity`.
pub fn poisson_sample<R: Rng + ?Sized>(intensity: &[f64], photon_budget: f64, rng: &mut R) -> Result<Vec<u32>> {
    intensity
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Numeric(format!("intensity at pixel {i} is {v}")));
            }
            let lam = photon_budget * v;
            if lam > 1e9 {
                return Err(CoreError::Numeric(format!(
                    "expected count {lam:.3e} at pixel {i} exceeds the u32 count range"
                )));
            }
            Ok(sample_poisson(lam, rng) as u32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mean_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = poisson_sample(&[0.0; 100], 1e4, &mut rng).unwrap();
        assert!(c.iter().all(|&x| x == 0));
    }

    #[test]
    fn rejects_nonfinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(poisson_sample(&[f64::NAN], 1.0, &mut rng).is_err());
        assert!(poisson_sample(&[-1.0], 1.0, &mut rng).is_err());
    }

    #[test]
    fn seeded_draws_repeat() {
        let i: Vec<f64> = (0..64).map(|k| k as f64 * 0.1).collect();
        let a = poisson_sample(&i, 100.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = poisson_sample(&i, 100.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
