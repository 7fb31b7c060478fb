//! Posterior sampling: one encoding, many decodes.

use ledvae_autodiff::{Complex64, Graph, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::optics::ObjectModel;
use crate::pvae::model::{slice_values, Net, Noise, PreparedStack, Pvae};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub samples: Vec<ObjectModel>,
    /// Per-slice, per-pixel mean amplitude.
    pub mean_amp: Vec<Vec<f64>>,
    pub std_amp: Vec<Vec<f64>>,
    /// Circular mean of the phase.
    pub mean_phase: Vec<Vec<f64>>,
    /// Standard deviation of phase differences to the circular mean, wrapped to (-pi, pi].
    pub std_phase: Vec<Vec<f64>>,
}

impl PosteriorSummary {
    /// `mean_amp * exp(i mean_phase)`.
    pub fn point_estimate(&self) -> ObjectModel {
        let grid_n = self.samples[0].grid_n;
        let slices = self
            .mean_amp
            .iter()
            .zip(&self.mean_phase)
            .map(|(a, p)| a.iter().zip(p).map(|(&a, &p)| Complex64::from_polar(a, p)).collect())
            .collect();
        ObjectModel { grid_n, slices }
    }
}

/// Decodes with `z = mu`.
pub fn decode_mean(model: &Pvae, prep: &PreparedStack) -> Result<ObjectModel> {
    let mut g = Graph::new();
    let w: Vec<Var> = model.weights.iter().map(|t| g.constant(t.clone())).collect();
    let net = Net::new(model, &w);
    let input = g.constant(prep.input.clone());
    let p = net.pass(&mut g, input, Noise::Zero)?;
    ObjectModel::new(model.grid_n, slice_values(&g, &p.slices))
}

/// Draws `count` posterior samples for one object.
pub fn sample_posterior(model: &Pvae, prep: &PreparedStack, count: usize, seed: u64) -> Result<PosteriorSummary> {
    if count == 0 {
        return Err(CoreError::config("sample count must be >= 1"));
    }
    let mut g = Graph::new();
    let w: Vec<Var> = model.weights.iter().map(|t| g.constant(t.clone())).collect();
    let net = Net::new(model, &w);
    let input = g.constant(prep.input.clone());
    let lat = net.latents(&mut g, input)?;
    let mut rng = stream_rng(seed, Stream::Sampling);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let z = net.sample_z(&mut g, &lat.mu, &lat.logvar, Noise::Seeded(rng.random()))?;
        let slices = net.decode(&mut g, &z)?;
        let obj = ObjectModel::new(model.grid_n, slice_values(&g, &slices))?;
        if obj.slices.iter().flatten().any(|z| !z.is_finite()) {
            return Err(CoreError::Numeric(format!("non-finite decoded sample for object {}", prep.id)));
        }
        samples.push(obj);
    }
    Ok(summarize(samples))
}

fn summarize(samples: Vec<ObjectModel>) -> PosteriorSummary {
    let s = samples.len() as f64;
    let n_slices = samples[0].n_slices();
    let px = samples[0].slices[0].len();
    let mut out = PosteriorSummary {
        mean_amp: vec![vec![0.0; px]; n_slices],
        std_amp: vec![vec![0.0; px]; n_slices],
        mean_phase: vec![vec![0.0; px]; n_slices],
        std_phase: vec![vec![0.0; px]; n_slices],
        samples: Vec::new(),
    };
    for k in 0..n_slices {
        for i in 0..px {
            let vals: Vec<Complex64> = samples.iter().map(|o| o.slices[k][i]).collect();
            let ma = vals.iter().map(|z| z.norm()).sum::<f64>() / s;
            let va = vals.iter().map(|z| (z.norm() - ma).powi(2)).sum::<f64>() / s;
            // Circular mean taken relative to the first sample's phase.
            let th: Vec<f64> = vals.iter().map(|z| z.arg()).collect();
            let unit: Complex64 = th.iter().map(|t| Complex64::from_polar(1.0, t - th[0])).sum();
            let mp = wrap(th[0] + unit.arg());
            let vp = th.iter().map(|t| wrap(t - mp).powi(2)).sum::<f64>() / s;
            out.mean_amp[k][i] = ma;
            out.std_amp[k][i] = va.sqrt();
            out.mean_phase[k][i] = mp;
            out.std_phase[k][i] = vp.sqrt();
        }
    }
    out.samples = samples;
    out
}

/// Wraps an angle into (-pi, pi].
fn wrap(t: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (t + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}
