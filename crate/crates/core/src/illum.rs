//! Illumination pattern samplers: per-LED brightness weights.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::OpticalConfig;
use crate::error::{CoreError, Result};
use crate::rng::{object_rng, stream_rng, Stream};

const CIRCLE_ATTEMPTS: usize = 10_000;

/// Gamma(alpha, 1) by Marsaglia and Tsang; shapes below one use
/// `Gamma(alpha + 1) * U^(1 / alpha)`.
pub fn sample_gamma<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha < 1.0 {
        let u: f64 = rng.random();
        return sample_gamma(alpha + 1.0, rng) * u.powf(1.0 / alpha);
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Symmetric Dirichlet draw over `l` components.
pub fn sample_dirichlet<R: Rng + ?Sized>(l: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..l).map(|_| sample_gamma(alpha, rng)).collect();
        let s: f64 = g.iter().sum();
        // all gammas underflowing to zero is possible for tiny alpha
        if s > 0.0 {
            return g.into_iter().map(|x| x / s).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternMode {
    /// Independent Dirichlet draws for every object and shot.
    Dirichlet,
    /// One set of Dirichlet draws shared by every object.
    Deterministic,
    /// One LED at a time, in layout order.
    Sequential,
    /// Half of the LEDs inside a randomly placed circle.
    CircleMask,
}

impl PatternMode {
    pub fn name(self) -> &'static str {
        match self {
            PatternMode::Dirichlet => "dirichlet",
            PatternMode::Deterministic => "deterministic",
            PatternMode::Sequential => "sequential",
            PatternMode::CircleMask => "circle-mask",
        }
    }
}

impl std::str::FromStr for PatternMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(PatternMode::Dirichlet),
            "deterministic" => Ok(PatternMode::Deterministic),
            "sequential" => Ok(PatternMode::Sequential),
            "circle-mask" => Ok(PatternMode::CircleMask),
            _ => Err(CoreError::config(format!(
                "unknown pattern mode {s:?} (expected dirichlet, deterministic, sequential or circle-mask)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternPlan {
    pub mode: PatternMode,
    pub alpha: f64,
    /// Shots per object.
    pub n: usize,
    pub circle_radius_mm: f64,
    pub seed: u64,
}

impl Default for PatternPlan {
    fn default() -> Self {
        Self {
            mode: PatternMode::Dirichlet,
            alpha: 0.1,
            n: 1,
            circle_radius_mm: 2.5,
            seed: 0,
        }
    }
}

impl PatternPlan {
    pub fn validate(&self, led_count: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            errs.push(format!("alpha must be > 0 (got {})", self.alpha));
        }
        if self.n == 0 {
            errs.push("n must be >= 1".into());
        }
        if self.mode == PatternMode::Sequential && self.n > led_count {
            errs.push(format!(
                "sequential mode needs n <= LED count ({} > {led_count})",
                self.n
            ));
        }
        if !(self.circle_radius_mm > 0.0) {
            errs.push(format!("circle_radius_mm must be > 0 (got {})", self.circle_radius_mm));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }
}

/// Physical LED positions (mm) of a configuration's lattice.
pub fn led_positions(cfg: &OpticalConfig) -> Vec<(f64, f64)> {
    cfg.led_indices
        .iter()
        .map(|&(u, v)| (u as f64 * cfg.led_pitch_mm, v as f64 * cfg.led_pitch_mm))
        .collect()
}

/// Concentric layout: a centre LED plus rings `r = 1..rings` of `4r` LEDs at radius `r * pitch`.
/// Seven rings give the 85-LED layout.
pub fn concentric_layout(rings: usize, pitch_mm: f64) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0)];
    for r in 1..rings {
        let k = 4 * r;
        for j in 0..k {
            let t = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            out.push((r as f64 * pitch_mm * t.cos(), r as f64 * pitch_mm * t.sin()));
        }
    }
    out
}

/// Lights `floor(|S| / 2)` randomly chosen LEDs out of the set `S` inside a circle
/// placed uniformly over the layout's bounding box, with equal weights summing to 1.
pub fn sample_circle_mask<R: Rng + ?Sized>(layout: &[(f64, f64)], radius_mm: f64, rng: &mut R) -> Result<Vec<f64>> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in layout {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    for _ in 0..CIRCLE_ATTEMPTS {
        let cx = x0 + (x1 - x0) * rng.random::<f64>();
        let cy = y0 + (y1 - y0) * rng.random::<f64>();
        let inside: Vec<usize> = layout
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| (x - cx).hypot(y - cy) <= radius_mm)
            .map(|(i, _)| i)
            .collect();
        let k = inside.len() / 2;
        if k == 0 {
            continue;
        }
        let mut w = vec![0.0; layout.len()];
        for j in sample(rng, inside.len(), k) {
            w[inside[j]] = 1.0 / k as f64;
        }
        return Ok(w);
    }
    Err(CoreError::config(format!(
        "no circle of radius {radius_mm} mm covered two or more LEDs in {CIRCLE_ATTEMPTS} placements"
    )))
}

fn one_hot(l: usize, i: usize) -> Vec<f64> {
    let mut w = vec![0.0; l];
    w[i] = 1.0;
    w
}

/// Patterns for `m` objects: `result[object][shot]` is a weight vector of length `l`.
pub fn plan_patterns(plan: &PatternPlan, m: usize, layout: &[(f64, f64)]) -> Result<Vec<Vec<Vec<f64>>>> {
    let l = layout.len();
    plan.validate(l)?;
    Ok(match plan.mode {
        PatternMode::Dirichlet => (0..m)
            .map(|i| {
                let mut rng = object_rng(plan.seed, i, Stream::Patterns);
                (0..plan.n).map(|_| sample_dirichlet(l, plan.alpha, &mut rng)).collect()
            })
            .collect(),
        PatternMode::Deterministic => {
            let mut rng = stream_rng(plan.seed, Stream::Patterns);
            let shared: Vec<Vec<f64>> = (0..plan.n).map(|_| sample_dirichlet(l, plan.alpha, &mut rng)).collect();
            vec![shared; m]
        }
        PatternMode::Sequential => vec![(0..plan.n).map(|i| one_hot(l, i)).collect(); m],
        PatternMode::CircleMask => (0..m)
            .map(|i| {
                let mut rng = object_rng(plan.seed, i, Stream::Patterns);
                (0..plan.n)
                    .map(|_| sample_circle_mask(layout, plan.circle_radius_mm, &mut rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
    })
}
