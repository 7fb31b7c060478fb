#![allow(dead_code)]
//! Independent oracles shared by the integration tests.

use std::f64::consts::PI;

use ledvae_autodiff::Complex64;
use ledvae_core::{ObjectModel, OpticalConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn cfg8() -> OpticalConfig {
    OpticalConfig {
        grid_n: 8,
        ..Default::default()
    }
}

/// Plain DFT over both axes: `sign = -1` forward, `+1` inverse with the 1/N^2 factor.
pub fn dft2(a: &[Complex64], n: usize, sign: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let ph = sign * 2.0 * PI * ((ky * y + kx * x) % n) as f64 / n as f64;
                    s += a[y * n + x] * Complex64::from_polar(1.0, ph);
                }
            }
            out[ky * n + kx] = if sign > 0.0 { s / (n * n) as f64 } else { s };
        }
    }
    out
}

pub fn freq(k: usize, n: usize, dx: f64) -> f64 {
    let m = if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
    m / (n as f64 * dx)
}

pub fn oracle_pupil(cfg: &OpticalConfig) -> Vec<f64> {
    let n = cfg.grid_n;
    let cut = cfg.na / cfg.wavelength_um;
    let mut p = vec![0.0; n * n];
    for ky in 0..n {
        for kx in 0..n {
            let (fx, fy) = (freq(kx, n, cfg.pixel_pitch_um), freq(ky, n, cfg.pixel_pitch_um));
            if (fx * fx + fy * fy).sqrt() <= cut {
                p[ky * n + kx] = 1.0;
            }
        }
    }
    p
}

/// Integer Fourier shift of LED `(u, v)` from the geometry.
pub fn oracle_shift(cfg: &OpticalConfig, led: (i32, i32)) -> (i64, i64) {
    let x = led.0 as f64 * cfg.led_pitch_mm;
    let y = led.1 as f64 * cfg.led_pitch_mm;
    let r = (x * x + y * y + cfg.led_z_mm * cfg.led_z_mm).sqrt();
    let s = cfg.grid_n as f64 * cfg.pixel_pitch_um / cfg.wavelength_um;
    ((x / r * s).round() as i64, (y / r * s).round() as i64)
}

pub fn ramp(n: usize, (dm, dn): (i64, i64)) -> Vec<Complex64> {
    let mut r = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            r.push(Complex64::from_polar(
                1.0,
                2.0 * PI * (dm * x as i64 + dn * y as i64) as f64 / n as f64,
            ));
        }
    }
    r
}

pub fn oracle_transfer(cfg: &OpticalConfig, d: f64) -> Vec<Complex64> {
    let n = cfg.grid_n;
    let k = cfg.medium_index / cfg.wavelength_um;
    let mut h = vec![Complex64::new(0.0, 0.0); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let (fx, fy) = (freq(kx, n, cfg.pixel_pitch_um), freq(ky, n, cfg.pixel_pitch_um));
            let f2 = fx * fx + fy * fy;
            if d == 0.0 {
                h[ky * n + kx] = Complex64::new(1.0, 0.0);
            } else if f2 <= k * k {
                h[ky * n + kx] = Complex64::from_polar(1.0, 2.0 * PI * d * (k * k - f2).sqrt());
            }
        }
    }
    h
}

/// Direct-DFT intensity of one LED; single slice via the tilted exit field, two
/// slices via ramp, propagation and the second slice.
pub fn oracle_intensity(cfg: &OpticalConfig, obj: &ObjectModel, led: usize) -> Vec<f64> {
    let n = cfg.grid_n;
    let r = ramp(n, oracle_shift(cfg, cfg.led_indices[led]));
    let lit: Vec<Complex64> = obj.slices[0].iter().zip(&r).map(|(o, r)| o * r).collect();
    let exit = if obj.slices.len() == 2 {
        let h = oracle_transfer(cfg, cfg.slice_gap_um);
        let spec: Vec<Complex64> = dft2(&lit, n, -1.0).iter().zip(&h).map(|(s, h)| s * h).collect();
        dft2(&spec, n, 1.0).iter().zip(&obj.slices[1]).map(|(a, o)| a * o).collect()
    } else {
        lit
    };
    let pupil = oracle_pupil(cfg);
    let spec: Vec<Complex64> = dft2(&exit, n, -1.0).iter().zip(&pupil).map(|(s, p)| s * p).collect();
    dft2(&spec, n, 1.0).iter().map(|z| z.norm_sqr()).collect()
}

pub fn random_object(n: usize, slices: usize, rng: &mut ChaCha8Rng) -> ObjectModel {
    let s = (0..slices)
        .map(|_| {
            (0..n * n)
                .map(|_| Complex64::from_polar(rng.random_range(0.2..1.0), rng.random_range(-PI..PI)))
                .collect()
        })
        .collect();
    ObjectModel::new(n, s).unwrap()
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}


/// Spectrum bins reached by the pupil under at least one LED tilt.
pub fn covered_bins(cfg: &OpticalConfig) -> Vec<bool> {
    let n = cfg.grid_n as i64;
    let pupil = oracle_pupil(cfg);
    let mut cover = vec![false; (n * n) as usize];
    for &led in &cfg.led_indices {
        let (dm, dn) = oracle_shift(cfg, led);
        for ky in 0..n {
            for kx in 0..n {
                if pupil[(ky * n + kx) as usize] > 0.0 {
                    let y = (ky + dn).rem_euclid(n);
                    let x = (kx + dm).rem_euclid(n);
                    cover[(y * n + x) as usize] = true;
                }
            }
        }
    }
    cover
}

/// Projects a single-slice object onto the spectrum bins selected by `keep`.
pub fn band_project(obj: &ObjectModel, keep: &[bool]) -> ObjectModel {
    let n = obj.grid_n;
    let spec: Vec<Complex64> = dft2(&obj.slices[0], n, -1.0)
        .into_iter()
        .zip(keep)
        .map(|(z, &k)| if k { z } else { Complex64::new(0.0, 0.0) })
        .collect();
    ObjectModel::new(n, vec![dft2(&spec, n, 1.0)]).unwrap()
}
