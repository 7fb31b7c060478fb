//! Optical system parameters.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Integer LED lattice coordinates `(u, v)`.
pub type LedIndex = (i32, i32);

/// Microscope and acquisition geometry. Lengths carry their unit in the key name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticalConfig {
    pub wavelength_um: f64,
    pub na: f64,
    pub pixel_pitch_um: f64,
    pub grid_n: usize,
    pub led_z_mm: f64,
    pub led_pitch_mm: f64,
    pub led_indices: Vec<LedIndex>,
    /// Expected photon count at unit intensity.
    pub photon_budget: f64,
    pub slice_gap_um: f64,
    pub medium_index: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            wavelength_um: 0.525,
            na: 0.75,
            pixel_pitch_um: 0.25,
            grid_n: 32,
            led_z_mm: 115.0,
            led_pitch_mm: 6.5,
            led_indices: lattice_disk(9),
            photon_budget: 1e4,
            slice_gap_um: 10.0,
            medium_index: 1.0,
        }
    }
}

/// Lattice points with `u^2 + v^2 <= r2`, ordered centre-out (by radius, then row, then column).
pub fn lattice_disk(r2: i32) -> Vec<LedIndex> {
    let r = (r2 as f64).sqrt().floor() as i32;
    let mut pts: Vec<LedIndex> = (-r..=r)
        .flat_map(|v| (-r..=r).map(move |u| (u, v)))
        .filter(|&(u, v)| u * u + v * v <= r2)
        .collect();
    pts.sort_by_key(|&(u, v)| (u * u + v * v, v, u));
    pts
}

impl OpticalConfig {
    pub fn led_count(&self) -> usize {
        self.led_indices.len()
    }

    /// Largest `|sin(theta)|` over the configured LEDs.
    pub fn max_sin_theta(&self) -> f64 {
        self.led_indices
            .iter()
            .map(|&led| {
                let (sx, sy) = crate::optics::led_wavevector(led, self);
                sx.hypot(sy)
            })
            .fold(0.0, f64::max)
    }

    /// Checks every invariant and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("wavelength_um", self.wavelength_um),
            ("pixel_pitch_um", self.pixel_pitch_um),
            ("led_z_mm", self.led_z_mm),
            ("led_pitch_mm", self.led_pitch_mm),
            ("photon_budget", self.photon_budget),
            ("medium_index", self.medium_index),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be a positive finite number (got {v})"));
            }
        }
        if !(self.slice_gap_um.is_finite() && self.slice_gap_um >= 0.0) {
            errs.push(format!("slice_gap_um must be >= 0 (got {})", self.slice_gap_um));
        }
        if !(self.na > 0.0 && self.na < self.medium_index) {
            errs.push(format!(
                "na must satisfy 0 < na < medium_index (na {}, medium_index {})",
                self.na, self.medium_index
            ));
        }
        if self.grid_n < 2 || self.grid_n % 2 != 0 {
            errs.push(format!("grid_n must be even and >= 2 (got {})", self.grid_n));
        }
        if self.led_indices.is_empty() {
            errs.push("led_indices must list at least one LED".into());
        }
        let mut seen = self.led_indices.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            errs.push("led_indices contains duplicates".into());
        }
        if errs.is_empty() {
            let band = (self.na + self.max_sin_theta()) / self.wavelength_um;
            let nyquist = 1.0 / (2.0 * self.pixel_pitch_um);
            if band >= nyquist {
                errs.push(format!(
                    "bandwidth {band:.4} um^-1 (na/wavelength + max sin(theta)/wavelength) must be below the grid Nyquist limit {nyquist:.4} um^-1; reduce pixel_pitch_um"
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CoreError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_29_leds() {
        let c = OpticalConfig::default();
        assert_eq!(c.led_count(), 29);
        assert_eq!(c.led_indices[0], (0, 0));
        c.validate().unwrap();
    }

    #[test]
    fn all_violations_reported() {
        let c = OpticalConfig {
            wavelength_um: -1.0,
            na: 2.0,
            grid_n: 7,
            led_indices: vec![],
            ..Default::default()
        };
        match c.validate() {
            Err(CoreError::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coarse_pitch_fails_bandwidth() {
        let c = OpticalConfig {
            pixel_pitch_um: 0.5,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("Nyquist"), "{err}");
    }

    #[test]
    fn json_keys_and_unknown_rejection() {
        let c = OpticalConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        for key in [
            "wavelength_um",
            "na",
            "pixel_pitch_um",
            "grid_n",
            "led_z_mm",
            "led_pitch_mm",
            "led_indices",
            "photon_budget",
            "slice_gap_um",
            "medium_index",
        ] {
            assert!(s.contains(&format!("\"{key}\"")), "{key}");
        }
        assert_eq!(OpticalConfig::from_json(&s).unwrap(), c);
        assert!(OpticalConfig::from_json(r#"{"wavelenght_um": 0.5}"#).is_err());
        assert_eq!(OpticalConfig::from_json("{}").unwrap(), c);
    }
}
