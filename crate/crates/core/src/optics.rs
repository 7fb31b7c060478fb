//! Image formation in an LED-array microscope: tilted plane-wave illumination,
//! a binary coherent pupil, optional two-slice propagation, and incoherent
//! summation over LEDs.
//!
//! All spectra are kept in unshifted FFT order: bin `k` holds the signed
//! frequency index `k` for `k < N/2` and `k - N` otherwise.

use std::f64::consts::PI;

use ledvae_autodiff::{Complex64, FftDirection, Graph, Tensor, Var};

use crate::config::{LedIndex, OpticalConfig};
use crate::error::{CoreError, Result};

/// Floor applied to the expected counts inside the Poisson log.
pub const NLL_EPS: f64 = 1e-8;

/// A thin object: one or two complex transmittance slices on an `N x N` grid,
/// each stored row-major (`data[y * N + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub grid_n: usize,
    pub slices: Vec<Vec<Complex64>>,
}

impl ObjectModel {
    pub fn new(grid_n: usize, slices: Vec<Vec<Complex64>>) -> Result<Self> {
        if slices.is_empty() || slices.len() > 2 {
            return Err(CoreError::Data(format!(
                "objects have 1 or 2 slices, got {}",
                slices.len()
            )));
        }
        for s in &slices {
            if s.len() != grid_n * grid_n {
                return Err(CoreError::Data(format!(
                    "slice has {} values, expected {}",
                    s.len(),
                    grid_n * grid_n
                )));
            }
        }
        Ok(Self { grid_n, slices })
    }

    pub fn uniform(grid_n: usize, n_slices: usize, v: Complex64) -> Self {
        Self {
            grid_n,
            slices: vec![vec![v; grid_n * grid_n]; n_slices],
        }
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_tensors(&self) -> Vec<Tensor> {
        self.slices
            .iter()
            .map(|s| Tensor::complex(vec![self.grid_n, self.grid_n], s.clone()).unwrap())
            .collect()
    }

    /// Slices concatenated, `[slices, N, N]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.slices.concat();
        Tensor::complex(vec![self.n_slices(), self.grid_n, self.grid_n], data).unwrap()
    }
}

/// Direction sines of the plane wave from LED `(u, v)`.
pub fn led_wavevector(led: LedIndex, cfg: &OpticalConfig) -> (f64, f64) {
    let x = led.0 as f64 * cfg.led_pitch_mm;
    let y = led.1 as f64 * cfg.led_pitch_mm;
    let r = (x * x + y * y + cfg.led_z_mm * cfg.led_z_mm).sqrt();
    (x / r, y / r)
}

/// Signed frequency index of FFT bin `k` on an `n`-point grid.
pub fn signed_bin(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Squared spatial frequency `|f|^2` (um^-2) of every bin, unshifted order.
fn freq_sq(cfg: &OpticalConfig) -> Vec<f64> {
    let n = cfg.grid_n;
    let df = 1.0 / (n as f64 * cfg.pixel_pitch_um);
    let mut out = Vec::with_capacity(n * n);
    for ky in 0..n {
        let fy = signed_bin(ky, n) as f64 * df;
        for kx in 0..n {
            let fx = signed_bin(kx, n) as f64 * df;
            out.push(fx * fx + fy * fy);
        }
    }
    out
}

/// Binary coherent pupil: 1 where `|f| <= na / wavelength`.
pub fn pupil_mask(cfg: &OpticalConfig) -> Vec<f64> {
    let cut = cfg.na / cfg.wavelength_um;
    freq_sq(cfg)
        .into_iter()
        .map(|f2| if f2 <= cut * cut { 1.0 } else { 0.0 })
        .collect()
}

/// Fourier shift of one LED rounded to whole frequency bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedShift {
    /// Column (x) shift in bins.
    pub dm: i64,
    /// Row (y) shift in bins.
    pub dn: i64,
    /// Largest per-axis rounding error, in bins.
    pub quantization_error: f64,
}

pub fn led_shift_pixels(led: LedIndex, cfg: &OpticalConfig) -> LedShift {
    let (sx, sy) = led_wavevector(led, cfg);
    let scale = cfg.grid_n as f64 * cfg.pixel_pitch_um / cfg.wavelength_um;
    let (ex, ey) = (sx * scale, sy * scale);
    let (dm, dn) = (ex.round(), ey.round());
    LedShift {
        dm: dm as i64,
        dn: dn as i64,
        quantization_error: (ex - dm).abs().max((ey - dn).abs()),
    }
}

/// Angular-spectrum transfer function for distance `d` (um), unshifted order.
/// Evanescent components are dropped for `d > 0`; `d == 0` is the identity.
pub fn transfer_function(cfg: &OpticalConfig, d: f64) -> Vec<Complex64> {
    let k2 = (cfg.medium_index / cfg.wavelength_um).powi(2);
    freq_sq(cfg)
        .into_iter()
        .map(|f2| {
            if d == 0.0 {
                Complex64::new(1.0, 0.0)
            } else if f2 > k2 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(1.0, 2.0 * PI * d * (k2 - f2).sqrt())
            }
        })
        .collect()
}

pub fn angular_spectrum_propagate(field: &[Complex64], d: f64, cfg: &OpticalConfig) -> Result<Vec<Complex64>> {
    if d < 0.0 {
        return Err(CoreError::config(format!("propagation distance must be >= 0 (got {d})")));
    }
    let n = cfg.grid_n;
    if d == 0.0 {
        if field.len() != n * n {
            return Err(CoreError::Data(format!("field has {} values, expected {}", field.len(), n * n)));
        }
        return Ok(field.to_vec());
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::complex(vec![n, n], field.to_vec()).map_err(CoreError::from)?);
    let h = g.constant(Tensor::complex(vec![n, n], transfer_function(cfg, d)).unwrap());
    let spec = g.fft2(f, FftDirection::Forward)?;
    let spec = g.mul(spec, h)?;
    let out = g.fft2(spec, FftDirection::Inverse)?;
    Ok(g.value(out).as_complex().unwrap().to_vec())
}

/// Precomputed forward operator for one configuration.
#[derive(Debug, Clone)]
pub struct Optics {
    cfg: OpticalConfig,
    pupil: Vec<Complex64>,
    shifts: Vec<LedShift>,
    /// Quantized illumination ramps `exp(i 2 pi (dm x + dn y) / N)`, `[l, N, N]`.
    ramps: Vec<Complex64>,
    transfer: Vec<Complex64>,
}

impl Optics {
    pub fn new(cfg: &OpticalConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid_n;
        let shifts: Vec<LedShift> = cfg.led_indices.iter().map(|&l| led_shift_pixels(l, cfg)).collect();
        let mut ramps = Vec::with_capacity(shifts.len() * n * n);
        for s in &shifts {
            for y in 0..n {
                for x in 0..n {
                    let ph = 2.0 * PI * ((s.dm * x as i64 + s.dn * y as i64).rem_euclid(n as i64)) as f64 / n as f64;
                    ramps.push(Complex64::from_polar(1.0, ph));
                }
            }
        }
        Ok(Self {
            pupil: pupil_mask(cfg).into_iter().map(|p| Complex64::new(p, 0.0)).collect(),
            transfer: transfer_function(cfg, cfg.slice_gap_um),
            cfg: cfg.clone(),
            shifts,
            ramps,
        })
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.cfg
    }

    pub fn grid_n(&self) -> usize {
        self.cfg.grid_n
    }

    pub fn led_count(&self) -> usize {
        self.shifts.len()
    }

    pub fn shifts(&self) -> &[LedShift] {
        &self.shifts
    }

    pub fn max_quantization_error(&self) -> f64 {
        self.shifts.iter().map(|s| s.quantization_error).fold(0.0, f64::max)
    }

    /// Coherent intensities `|psi_j|^2` for the LEDs in `leds`, as a real `[len(leds), N, N]` node.
    pub fn led_intensities(&self, g: &mut Graph, slices: &[Var], leds: &[usize]) -> Result<Var> {
        let n = self.grid_n();
        let pupil = g.constant(Tensor::complex(vec![n, n], self.pupil.clone()).unwrap());
        let field = match slices {
            [o] => {
                let spec = g.fft2(*o, FftDirection::Forward)?;
                let shifts: Vec<(isize, isize)> = leds
                    .iter()
                    .map(|&j| (self.shifts[j].dn as isize, self.shifts[j].dm as isize))
                    .collect();
                let stack = g.shift_stack(spec, &shifts)?;
                let filtered = g.mul(stack, pupil)?;
                g.fft2(filtered, FftDirection::Inverse)?
            }
            [o1, o2] => {
                let nn = n * n;
                let mut r = Vec::with_capacity(leds.len() * nn);
                for &j in leds {
                    r.extend_from_slice(&self.ramps[j * nn..(j + 1) * nn]);
                }
                let ramps = g.constant(Tensor::complex(vec![leds.len(), n, n], r).unwrap());
                let h = g.constant(Tensor::complex(vec![n, n], self.transfer.clone()).unwrap());
                let lit = g.mul(ramps, *o1)?;
                let spec = g.fft2(lit, FftDirection::Forward)?;
                let spec = g.mul(spec, h)?;
                let at2 = g.fft2(spec, FftDirection::Inverse)?;
                let exit = g.mul(at2, *o2)?;
                let spec = g.fft2(exit, FftDirection::Forward)?;
                let filtered = g.mul(spec, pupil)?;
                g.fft2(filtered, FftDirection::Inverse)?
            }
            _ => {
                return Err(CoreError::Data(format!(
                    "objects have 1 or 2 slices, got {}",
                    slices.len()
                )))
            }
        };
        Ok(g.abs2(field))
    }

    /// Expected intensity images `[n_patterns, N, N]` for a set of LED weight vectors.
    /// Only LEDs with a nonzero weight in some pattern are simulated.
    pub fn multiplexed(&self, g: &mut Graph, slices: &[Var], patterns: &[Vec<f64>]) -> Result<Var> {
        let n = self.grid_n();
        let l = self.led_count();
        for p in patterns {
            check_pattern(p, l)?;
        }
        let active: Vec<usize> = (0..l).filter(|&j| patterns.iter().any(|p| p[j] > 0.0)).collect();
        if active.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[patterns.len(), n, n], ledvae_autodiff::Dtype::Real)));
        }
        let per_led = self.led_intensities(g, slices, &active)?;
        let weights: Vec<f64> = patterns.iter().flat_map(|p| active.iter().map(|&j| p[j])).collect();
        let w = g.constant(Tensor::real(vec![patterns.len(), active.len(), 1, 1], weights).unwrap());
        let weighted = g.mul(w, per_led)?;
        Ok(g.sum(weighted, &[1])?)
    }

    /// Expected photon counts `N_ph * I` for each pattern, `[n_patterns, N, N]`.
    pub fn expected_counts(&self, g: &mut Graph, slices: &[Var], patterns: &[Vec<f64>]) -> Result<Var> {
        let i = self.multiplexed(g, slices, patterns)?;
        Ok(g.scale(i, self.cfg.photon_budget))
    }

    fn eval<F>(&self, obj: &ObjectModel, f: F) -> Result<Vec<f64>>
    where
        F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
    {
        if obj.grid_n != self.grid_n() {
            return Err(CoreError::Data(format!(
                "object grid {} does not match configured grid {}",
                obj.grid_n,
                self.grid_n()
            )));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = obj.slice_tensors().into_iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).as_real().unwrap().to_vec())
    }

    /// Intensity image under LED `led` alone.
    pub fn coherent_intensity(&self, obj: &ObjectModel, led: usize) -> Result<Vec<f64>> {
        if led >= self.led_count() {
            return Err(CoreError::Data(format!("LED {led} out of range")));
        }
        self.eval(obj, |g, v| self.led_intensities(g, v, &[led]))
    }

    /// Expected intensity image under a multiplexed pattern.
    pub fn forward_multiplexed(&self, obj: &ObjectModel, pattern: &[f64]) -> Result<Vec<f64>> {
        self.eval(obj, |g, v| self.multiplexed(g, v, &[pattern.to_vec()]))
    }
}

fn check_pattern(p: &[f64], l: usize) -> Result<()> {
    if p.len() != l {
        return Err(CoreError::Data(format!("pattern has {} weights, expected {l}", p.len())));
    }
    if let Some(w) = p.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(CoreError::Data(format!("pattern weights must be finite and >= 0 (got {w})")));
    }
    Ok(())
}

/// `sum(lam - y log(max(lam, eps)))` on the graph; `counts` is a constant.
pub fn poisson_nll(g: &mut Graph, counts: Tensor, lam: Var) -> Result<Var> {
    let y = g.constant(counts);
    let clamped = g.clamp_min(lam, NLL_EPS)?;
    let log = g.log(clamped)?;
    let ylog = g.mul(y, log)?;
    let d = g.sub(lam, ylog)?;
    Ok(g.sum_all(d))
}

pub fn poisson_nll_value(counts: &[f64], lam: &[f64]) -> f64 {
    counts
        .iter()
        .zip(lam)
        .map(|(&y, &l)| l - y * l.max(NLL_EPS).ln())
        .sum()
}

/// NLL of the expected counts equal to the observed counts, the smallest value
/// the NLL can reach for a given observation.
pub fn poisson_nll_floor(counts: &[f64]) -> f64 {
    poisson_nll_value(counts, counts)
}
