//! Per-object maximum-likelihood reconstruction by gradient descent through the
//! differentiable forward model.

use ledvae_autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::MeasurementStack;
use crate::error::{CoreError, Result};
use crate::optics::{poisson_nll, ObjectModel, Optics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconParams {
    pub lr: f64,
    pub iterations: usize,
    /// Weight of `||a||^2` on the log-amplitude.
    pub l2_logamp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Recorded for provenance; the solver itself starts from `O = 1` and draws no random numbers.
    pub seed: u64,
}

impl Default for ReconParams {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            iterations: 2000,
            l2_logamp: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl ReconParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.iterations == 0 {
            errs.push("iterations must be >= 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be > 0 (got {})", self.lr));
        }
        if !(self.l2_logamp >= 0.0) {
            errs.push(format!("l2_logamp must be >= 0 (got {})", self.l2_logamp));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub estimate: ObjectModel,
    pub loss_trace: Vec<f64>,
}

/// `O = exp(a + i phi)` for each `(a, phi)` pair of parameters.
pub fn transmittance(g: &mut Graph, logamp: Var, phase: Var) -> Result<Var> {
    let z = g.make_complex(logamp, phase)?;
    Ok(g.exp(z))
}

/// Total loss `sum_i NLL(counts_i, N_ph F(O, p_i)) + l2 ||a||^2` for parameters
/// `[a_1, phi_1, (a_2, phi_2)]`.
pub fn recon_loss(
    g: &mut Graph,
    optics: &Optics,
    params: &[Var],
    patterns: &[Vec<f64>],
    counts: &Tensor,
    l2_logamp: f64,
) -> Result<Var> {
    let slices = params
        .chunks(2)
        .map(|p| transmittance(g, p[0], p[1]))
        .collect::<Result<Vec<_>>>()?;
    let lam = optics.expected_counts(g, &slices, patterns)?;
    let mut loss = poisson_nll(g, counts.clone(), lam)?;
    if l2_logamp > 0.0 {
        for p in params.chunks(2) {
            let sq = g.mul(p[0], p[0])?;
            let s = g.sum_all(sq);
            let s = g.scale(s, l2_logamp);
            loss = g.add(loss, s)?;
        }
    }
    Ok(loss)
}

/// Fits an object with `n_slices` slices to real-valued counts `[n, N, N]`
/// (noiseless expected counts are allowed). `on_step(k, loss)` is called every iteration.
pub fn reconstruct_counts(
    optics: &Optics,
    patterns: &[Vec<f64>],
    counts: &[f64],
    n_slices: usize,
    params: &ReconParams,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<ReconResult> {
    params.validate()?;
    let n = optics.grid_n();
    if counts.len() != patterns.len() * n * n {
        return Err(CoreError::Data(format!(
            "{} count values for {} shots of {n}x{n}",
            counts.len(),
            patterns.len()
        )));
    }
    let counts = Tensor::real(vec![patterns.len(), n, n], counts.to_vec()).unwrap();
    let mut values: Vec<Tensor> = (0..2 * n_slices).map(|_| Tensor::filled(&[n, n], 0.0)).collect();
    let mut adam = Adam::new(params.adam(), &values);
    let mut trace = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = recon_loss(&mut g, optics, &vars, patterns, &counts, params.l2_logamp)?;
        let lv = g.value(loss).item().unwrap();
        if !lv.is_finite() {
            return Err(CoreError::Numeric(format!("reconstruction loss is {lv} at iteration {it}")));
        }
        trace.push(lv);
        on_step(it, lv);
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
        adam.update(&mut values, &gs)?;
    }
    Ok(ReconResult {
        estimate: params_to_object(n, &values),
        loss_trace: trace,
    })
}

/// Object from `[a_1, phi_1, (a_2, phi_2)]` parameter planes.
pub fn params_to_object(n: usize, values: &[Tensor]) -> ObjectModel {
    let slices = values
        .chunks(2)
        .map(|p| {
            let a = p[0].as_real().unwrap();
            let phi = p[1].as_real().unwrap();
            a.iter()
                .zip(phi)
                .map(|(&a, &phi)| ledvae_autodiff::Complex64::new(a, phi).exp())
                .collect()
        })
        .collect();
    ObjectModel { grid_n: n, slices }
}

pub fn reconstruct(
    optics: &Optics,
    stack: &MeasurementStack,
    n_slices: usize,
    params: &ReconParams,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<ReconResult> {
    stack.check(optics.config())?;
    reconstruct_counts(optics, &stack.patterns, &stack.counts_f64(), n_slices, params, on_step)
}
