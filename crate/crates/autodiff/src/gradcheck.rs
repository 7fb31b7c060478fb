//! Central finite-difference validation of analytic gradients.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Cap on coordinates probed per parameter tensor; `None` probes all.
    pub max_coords: Option<usize>,
    /// Seed for choosing which coordinates to probe when capped.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over probed coordinates.
    pub max_rel_error: f64,
    /// `(param index, flat coordinate, imaginary part?)` of the worst coordinate.
    pub worst: Option<(usize, usize, bool)>,
    pub coords_checked: usize,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g
        .value(out)
        .item()
        .ok_or_else(|| AutodiffError::Invalid("grad_check function must return a real scalar".into()))?;
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(format!(
            "function value {v} during finite differencing"
        )));
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `params`
/// against central differences. Complex parameters are probed along their
/// real and imaginary parts separately, matching the engine's gradient
/// convention (`dL/dRe + i dL/dIm`).
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if let Some(node) = g.first_nonfinite() {
        return Err(AutodiffError::NonFinite(format!("forward pass, node {node}")));
    }
    let grads = g.backward(out)?;

    let mut rng = opts.seed ^ 0xA076_1D64_78BD_642F;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(cap) if cap < n => (0..cap).map(|_| (splitmix(&mut rng) % n as u64) as usize).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape(), p.dtype()));
        if !analytic.is_finite() {
            return Err(AutodiffError::NonFinite(format!("analytic gradient of parameter {pi}")));
        }
        let parts: &[bool] = match p.dtype() {
            Dtype::Real => &[false],
            Dtype::Complex => &[false, true],
        };
        for &c in &coords {
            for &imag in parts {
                let numeric = {
                    perturb(&mut work[pi], c, imag, opts.h);
                    let fp = eval(&f, &work)?;
                    perturb(&mut work[pi], c, imag, -2.0 * opts.h);
                    let fm = eval(&f, &work)?;
                    perturb(&mut work[pi], c, imag, opts.h);
                    (fp - fm) / (2.0 * opts.h)
                };
                let a = match (analytic.as_real(), analytic.as_complex()) {
                    (Some(r), _) => r[c],
                    (_, Some(z)) if imag => z[c].im,
                    (_, Some(z)) => z[c].re,
                    _ => unreachable!(),
                };
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                report.coords_checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((pi, c, imag));
                }
            }
        }
        work[pi] = p.clone();
    }
    Ok(report)
}

fn perturb(t: &mut Tensor, c: usize, imag: bool, delta: f64) {
    if let Some(r) = t.as_real_mut() {
        r[c] += delta;
    } else if let Some(z) = t.as_complex_mut() {
        if imag {
            z[c].im += delta;
        } else {
            z[c].re += delta;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum_all(y))
            },
            &[Tensor::scalar(3.0)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_aborts() {
        let r = grad_check(
            |g, v| {
                let y = g.log(v[0])?;
                Ok(g.sum_all(y))
            },
            &[Tensor::scalar(-1.0)],
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(AutodiffError::NonFinite(_))));
    }
}
