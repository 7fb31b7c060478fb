//! Minibatch ELBO training with resumable checkpoints.

use std::path::Path;

use ledvae_autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{write_container, Array, ArrayData, Container};
use crate::error::{CoreError, Result};
use crate::optics::Optics;
use crate::pvae::model::{elbo_terms, Net, Noise, PreparedStack, Pvae, PvaeArch};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Objects per step.
    pub batch: usize,
    pub steps: usize,
    /// KL weight.
    pub beta: f64,
    /// Linear KL warm-up length in steps; 0 uses `beta` from the start.
    pub kl_warmup_steps: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            steps: 2000,
            beta: 1.0,
            kl_warmup_steps: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be > 0 (got {})", self.lr));
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".into());
        }
        if !(self.beta >= 0.0) {
            errs.push(format!("beta must be >= 0 (got {})", self.beta));
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

    /// KL weight in effect at `step`.
    pub fn beta_at(&self, step: usize) -> f64 {
        if self.kl_warmup_steps == 0 {
            self.beta
        } else {
            self.beta * ((step + 1) as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

/// Batch-averaged loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Pvae,
    pub adam: Adam,
    /// Steps completed.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub curve: Vec<StepLoss>,
}

impl TrainState {
    pub fn new(arch: &PvaeArch, grid_n: usize, hyper: &TrainHyper) -> Result<Self> {
        let model = Pvae::init(arch, grid_n, hyper.seed)?;
        Ok(Self {
            adam: Adam::new(hyper.adam(), &model.weights),
            model,
            step: 0,
            rng: stream_rng(hyper.seed, Stream::Training),
            curve: Vec::new(),
        })
    }
}

/// Loss and weight gradients of one object.
pub fn object_loss_and_grads(
    model: &Pvae,
    optics: &Optics,
    prep: &PreparedStack,
    noise: Noise,
    beta: f64,
) -> Result<(StepLoss, Vec<Tensor>)> {
    let mut g = Graph::new();
    let w: Vec<Var> = model.weights.iter().map(|t| g.param(t.clone())).collect();
    let net = Net::new(model, &w);
    let input = g.constant(prep.input.clone());
    let pass = net.pass(&mut g, input, noise)?;
    let loss = elbo_terms(&mut g, optics, prep, &pass, beta)?;
    let val = |v: Var| g.value(v).item().unwrap();
    let parts = StepLoss {
        total: val(loss.total),
        nll: val(loss.nll),
        kl: val(loss.kl),
    };
    if !parts.total.is_finite() {
        return Err(CoreError::Numeric(format!("loss is {} on object {}", parts.total, prep.id)));
    }
    let mut grads = g.backward(loss.total)?;
    let gs = w
        .iter()
        .zip(&model.weights)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::filled(t.shape(), 0.0)))
        .collect();
    Ok((parts, gs))
}

/// Runs one optimizer step on a batch drawn from `data`.
pub fn train_step(state: &mut TrainState, optics: &Optics, data: &[PreparedStack], hyper: &TrainHyper) -> Result<StepLoss> {
    let b = hyper.batch.min(data.len());
    let mut idx: Vec<usize> = sample(&mut state.rng, data.len(), b).into_vec();
    idx.sort_unstable();
    let seeds: Vec<u64> = idx.iter().map(|_| state.rng.random()).collect();
    let beta = hyper.beta_at(state.step);
    let model = &state.model;
    let results = idx
        .par_iter()
        .zip(&seeds)
        .map(|(&i, &s)| object_loss_and_grads(model, optics, &data[i], Noise::Seeded(s), beta))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / b as f64;
    let mut loss = StepLoss {
        total: 0.0,
        nll: 0.0,
        kl: 0.0,
    };
    let mut sum: Vec<Vec<f64>> = model.weights.iter().map(|t| vec![0.0; t.numel()]).collect();
    for (parts, grads) in &results {
        loss.total += parts.total * scale;
        loss.nll += parts.nll * scale;
        loss.kl += parts.kl * scale;
        for (acc, gr) in sum.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(gr.as_real().unwrap()) {
                *a += v * scale;
            }
        }
    }
    let grads: Vec<Tensor> = sum
        .into_iter()
        .zip(&model.weights)
        .map(|(v, t)| Tensor::real(t.shape().to_vec(), v).unwrap())
        .collect();
    state.adam.update(&mut state.model.weights, &grads)?;
    state.step += 1;
    state.curve.push(loss);
    Ok(loss)
}

/// Trains until `hyper.steps` steps have been taken, starting from `state`
/// (fresh or resumed). Checkpoints go to `checkpoint` when given; on a
/// non-finite loss the last good state is checkpointed before the error returns.
pub fn train(
    mut state: TrainState,
    optics: &Optics,
    data: &[PreparedStack],
    hyper: &TrainHyper,
    checkpoint: Option<&Path>,
    on_step: &mut dyn FnMut(usize, &StepLoss),
) -> Result<TrainState> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(CoreError::Data("training needs at least one object".into()));
    }
    while state.step < hyper.steps {
        let before = (state.adam.clone(), state.model.weights.clone(), state.rng.clone());
        match train_step(&mut state, optics, data, hyper) {
            Ok(loss) => on_step(state.step, &loss),
            Err(e) => {
                if let Some(p) = checkpoint {
                    (state.adam, state.model.weights, state.rng) = before;
                    save_checkpoint(&state, hyper, p)?;
                }
                return Err(e);
            }
        }
        if let Some(p) = checkpoint {
            if hyper.checkpoint_every > 0 && state.step % hyper.checkpoint_every == 0 {
                save_checkpoint(&state, hyper, p)?;
            }
        }
    }
    if let Some(p) = checkpoint {
        save_checkpoint(&state, hyper, p)?;
    }
    Ok(state)
}

// ---- checkpoints --------------------------------------------------------------

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut b = rng.get_seed().to_vec();
    b.extend(rng.get_stream().to_le_bytes());
    b.extend(rng.get_word_pos().to_le_bytes());
    b
}

fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 56 {
        return Err(CoreError::Data(format!("rng_state has {} bytes, expected 56", b.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
    Ok(rng)
}

pub fn save_checkpoint(state: &TrainState, hyper: &TrainHyper, path: &Path) -> Result<()> {
    let m = &state.model;
    let mut arrays = Vec::with_capacity(3 * m.names.len() + 3);
    for (name, w) in m.names.iter().zip(&m.weights) {
        arrays.push(Array::new(
            format!("weights/{name}"),
            w.shape().to_vec(),
            ArrayData::F64(w.as_real().unwrap().to_vec()),
        ));
    }
    for (kind, moments) in [("m", &state.adam.m), ("v", &state.adam.v)] {
        for ((name, w), buf) in m.names.iter().zip(&m.weights).zip(moments) {
            arrays.push(Array::new(format!("opt/{kind}/{name}"), w.shape().to_vec(), ArrayData::F64(buf.clone())));
        }
    }
    arrays.push(Array::new("step", vec![1], ArrayData::U64(vec![state.step as u64])));
    arrays.push(Array::new("rng_state", vec![56], ArrayData::U8(rng_bytes(&state.rng))));
    arrays.push(Array::new(
        "loss_curve",
        vec![state.curve.len(), 3],
        ArrayData::F64(state.curve.iter().flat_map(|l| [l.total, l.nll, l.kl]).collect()),
    ));
    let meta = serde_json::json!({
        "kind": "checkpoint",
        "arch": m.arch,
        "grid_n": m.grid_n,
        "hyper": hyper,
        "adam_step": state.adam.step,
    });
    write_container(path, meta, &arrays)?;
    Ok(())
}

/// Restores a checkpoint; returns the state and the hyperparameters it was written with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainHyper)> {
    let c = Container::open(path)?;
    let meta = c.meta();
    if meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
        return Err(CoreError::Data(format!("{} is not a checkpoint", path.display())));
    }
    let parse = |key: &str| {
        meta.get(key)
            .cloned()
            .ok_or_else(|| CoreError::Data(format!("checkpoint header lacks {key:?}")))
    };
    let bad = |e: serde_json::Error| CoreError::Data(format!("checkpoint header: {e}"));
    let arch: PvaeArch = serde_json::from_value(parse("arch")?).map_err(bad)?;
    let grid_n: usize = serde_json::from_value(parse("grid_n")?).map_err(bad)?;
    let hyper: TrainHyper = serde_json::from_value(parse("hyper")?).map_err(bad)?;
    let adam_step: u64 = serde_json::from_value(parse("adam_step")?).map_err(bad)?;
    let mut model = Pvae::init(&arch, grid_n, 0)?;
    let f64s = |name: String, shape: &[usize]| -> Result<Vec<f64>> {
        let a = c.read(&name)?;
        match a.data {
            ArrayData::F64(v) if a.shape == shape => Ok(v),
            _ => Err(CoreError::Data(format!("{name} has the wrong dtype or shape"))),
        }
    };
    let mut mm = Vec::new();
    let mut vv = Vec::new();
    for (name, w) in model.names.iter().zip(model.weights.iter_mut()) {
        let shape = w.shape().to_vec();
        *w = Tensor::real(shape.clone(), f64s(format!("weights/{name}"), &shape)?).unwrap();
        mm.push(f64s(format!("opt/m/{name}"), &shape)?);
        vv.push(f64s(format!("opt/v/{name}"), &shape)?);
    }
    let step = match c.read("step")?.data {
        ArrayData::U64(v) if v.len() == 1 => v[0] as usize,
        _ => return Err(CoreError::Data("step must be a single u64".into())),
    };
    let rng = match c.read("rng_state")?.data {
        ArrayData::U8(v) => rng_from_bytes(&v)?,
        _ => return Err(CoreError::Data("rng_state must be u8".into())),
    };
    let curve = match c.read("loss_curve")?.data {
        ArrayData::F64(v) => v
            .chunks_exact(3)
            .map(|c| StepLoss {
                total: c[0],
                nll: c[1],
                kl: c[2],
            })
            .collect(),
        _ => return Err(CoreError::Data("loss_curve must be f64".into())),
    };
    let adam = Adam {
        config: hyper.adam(),
        step: adam_step,
        m: mm,
        v: vv,
    };
    Ok((
        TrainState {
            model,
            adam,
            step,
            rng,
            curve,
        },
        hyper,
    ))
}
