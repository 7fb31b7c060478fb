//! Network definition: a U-Net-shaped encoder applied to every shot with shared
//! weights, attention pooling over shots into Gaussian latents at every scale,
//! and a decoder that maps a latent sample to object transmittance.

use ledvae_autodiff::{Complex64, Dtype, Graph, PoolMode, Tensor, Var};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::MeasurementStack;
use crate::error::{CoreError, Result};
use crate::optics::{poisson_nll, Optics};
use crate::rng::{stream_rng, Stream};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Softmax over per-shot logits.
    Attention,
    /// Plain mean over shots.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvaeArch {
    /// Number of downsampling stages; latents live at scales `0..=k`.
    pub scales: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    /// Object slices produced by the decoder (1 or 2).
    pub slices: usize,
    pub pooling: Pooling,
    pub leaky_slope: f64,
}

impl Default for PvaeArch {
    fn default() -> Self {
        Self {
            scales: 3,
            base_channels: 16,
            latent_channels: 4,
            slices: 1,
            pooling: Pooling::Attention,
            leaky_slope: 0.1,
        }
    }
}

impl PvaeArch {
    pub fn validate(&self, grid_n: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.scales == 0 {
            errs.push("scales must be >= 1".to_string());
        } else if self.scales >= usize::BITS as usize || grid_n % (1 << self.scales) != 0 {
            errs.push(format!("grid_n {grid_n} must be divisible by 2^scales (scales {})", self.scales));
        }
        if self.base_channels == 0 || self.latent_channels == 0 {
            errs.push("base_channels and latent_channels must be >= 1".into());
        }
        if !(1..=2).contains(&self.slices) {
            errs.push(format!("slices must be 1 or 2 (got {})", self.slices));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }

    fn channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// `(name, shape)` of every trainable tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, ks: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, ks, ks]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let lc = self.latent_channels;
        for s in 0..=self.scales {
            let cin = if s == 0 { 2 } else { self.channels(s - 1) };
            let c = self.channels(s);
            conv(format!("enc{s}.a"), c, cin, 3);
            conv(format!("enc{s}.b"), c, c, 3);
            conv(format!("pool{s}"), 1, c, 1);
            conv(format!("mu{s}"), lc, c, 1);
            conv(format!("logvar{s}"), lc, c, 1);
        }
        let k = self.scales;
        conv(format!("dec{k}"), self.channels(k), lc, 3);
        for j in (0..k).rev() {
            conv(format!("dec{j}"), self.channels(j), self.channels(j + 1) + lc, 3);
        }
        conv("out".into(), 2 * self.slices, self.channels(0), 1);
        out
    }
}

/// Trainable state of a P-VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct Pvae {
    pub arch: PvaeArch,
    pub grid_n: usize,
    pub names: Vec<String>,
    pub weights: Vec<Tensor>,
}

impl Pvae {
    /// He-normal convolution weights, zero biases, and a zero output layer so the
    /// first decoded object is the unit transmittance.
    pub fn init(arch: &PvaeArch, grid_n: usize, seed: u64) -> Result<Self> {
        arch.validate(grid_n)?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut names = Vec::new();
        let mut weights = Vec::new();
        for (name, shape) in arch.layout() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") || name.starts_with("out.") {
                vec![0.0; n]
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                (0..n).map(|_| rng.sample(dist)).collect()
            };
            names.push(name);
            weights.push(Tensor::real(shape, data).unwrap());
        }
        Ok(Self {
            arch: arch.clone(),
            grid_n,
            names,
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.numel()).sum()
    }
}

/// One object's shots, put into canonical order (by pattern, then counts) so
/// every downstream sum runs in the same order whatever the stored order was.
#[derive(Debug, Clone)]
pub struct PreparedStack {
    pub id: String,
    pub patterns: Vec<Vec<f64>>,
    /// Raw counts `[n, N, N]`.
    pub counts: Tensor,
    /// Encoder input `[n, 2, N, N]`: counts over their mean, and the pattern map.
    pub input: Tensor,
}

fn lex_cmp<T: Copy>(a: &[T], b: &[T], cmp: impl Fn(T, T) -> std::cmp::Ordering) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| cmp(x, y))
        .find(|o| o.is_ne())
        .unwrap_or(a.len().cmp(&b.len()))
}

/// Pattern map: weight of LED `j` at its Fourier-shift pixel, centred on the grid.
pub fn pattern_map(optics: &Optics, pattern: &[f64]) -> Vec<f64> {
    let n = optics.grid_n() as i64;
    let mut map = vec![0.0; (n * n) as usize];
    for (w, s) in pattern.iter().zip(optics.shifts()) {
        let y = (n / 2 + s.dn).rem_euclid(n);
        let x = (n / 2 + s.dm).rem_euclid(n);
        map[(y * n + x) as usize] += w;
    }
    map
}

pub fn prepare(optics: &Optics, stack: &MeasurementStack) -> Result<PreparedStack> {
    stack.check(optics.config())?;
    let n = optics.grid_n();
    let nn = n * n;
    let mut order: Vec<usize> = (0..stack.n_shots()).collect();
    order.sort_by(|&i, &j| {
        lex_cmp(&stack.patterns[i], &stack.patterns[j], |a: f64, b: f64| a.total_cmp(&b))
            .then_with(|| lex_cmp(&stack.counts[i], &stack.counts[j], |a: u32, b: u32| a.cmp(&b)))
    });
    let mut counts = Vec::with_capacity(order.len() * nn);
    let mut input = Vec::with_capacity(order.len() * 2 * nn);
    let mut patterns = Vec::with_capacity(order.len());
    for &i in &order {
        let c: Vec<f64> = stack.counts[i].iter().map(|&v| v as f64).collect();
        let mean = c.iter().sum::<f64>() / nn as f64;
        let norm = if mean > 0.0 { mean } else { 1.0 };
        input.extend(c.iter().map(|v| v / norm));
        input.extend(pattern_map(optics, &stack.patterns[i]));
        counts.extend(c);
        patterns.push(stack.patterns[i].clone());
    }
    let k = order.len();
    Ok(PreparedStack {
        id: stack.id.clone(),
        patterns,
        counts: Tensor::real(vec![k, n, n], counts).unwrap(),
        input: Tensor::real(vec![k, 2, n, n], input).unwrap(),
    })
}

/// Where the reparameterization noise comes from.
#[derive(Debug, Clone, Copy)]
pub enum Noise {
    /// Standard normal draws from a generator seeded with this value.
    Seeded(u64),
    /// `eps = 0`, so `z = mu`.
    Zero,
}

/// Graph nodes of one encoder/decoder pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub mu: Vec<Var>,
    pub logvar: Vec<Var>,
    /// Per-scale attention weights over shots (`[n]`).
    pub attention: Vec<Var>,
    pub z: Vec<Var>,
    /// Complex `[N, N]` transmittance per slice.
    pub slices: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
}

/// Builds the network on a graph; `w` are the weight nodes in [`PvaeArch::layout`] order.
pub struct Net<'a> {
    pub arch: &'a PvaeArch,
    pub grid_n: usize,
    w: &'a [Var],
    cursor: std::collections::HashMap<&'a str, usize>,
}

impl<'a> Net<'a> {
    pub fn new(model: &'a Pvae, w: &'a [Var]) -> Self {
        let cursor = model.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        Self {
            arch: &model.arch,
            grid_n: model.grid_n,
            w,
            cursor,
        }
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let wi = self.cursor[format!("{name}.w").as_str()];
        let bi = self.cursor[format!("{name}.b").as_str()];
        Ok(g.conv2d(x, self.w[wi], self.w[bi])?)
    }

    fn conv_act(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(g, name, x)?;
        Ok(g.leaky_relu(y, self.arch.leaky_slope)?)
    }

    /// Per-scale shot features `[n, c_s, N/2^s, N/2^s]`.
    pub fn encode(&self, g: &mut Graph, input: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.arch.scales + 1);
        let mut h = input;
        for s in 0..=self.arch.scales {
            if s > 0 {
                h = g.pool2(h, PoolMode::AvgDown)?;
            }
            h = self.conv_act(g, &format!("enc{s}.a"), h)?;
            h = self.conv_act(g, &format!("enc{s}.b"), h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Pools shot features of scale `s` into `[1, c, h, w]`; returns `(pooled, attention)`.
    pub fn pool(&self, g: &mut Graph, s: usize, feat: Var) -> Result<(Var, Var)> {
        let shape = g.shape(feat).to_vec();
        let n = shape[0];
        let attn = match self.arch.pooling {
            Pooling::Attention => {
                let logits = self.conv(g, &format!("pool{s}"), feat)?;
                let logits = g.mean(logits, &[1, 2, 3])?;
                let max = g.value(logits).as_real().unwrap().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let shift = g.constant(Tensor::scalar(max));
                let centred = g.sub(logits, shift)?;
                let e = g.exp(centred);
                let total = g.sum_all(e);
                g.div(e, total)?
            }
            Pooling::Uniform => g.constant(Tensor::filled(&[n], 1.0 / n as f64)),
        };
        let a = g.reshape(attn, &[n, 1, 1, 1])?;
        let weighted = g.mul(a, feat)?;
        let pooled = g.sum(weighted, &[0])?;
        let mut one = shape.clone();
        one[0] = 1;
        Ok((g.reshape(pooled, &one)?, attn))
    }

    /// Decodes latent samples (finest scale first) to per-slice complex transmittance.
    pub fn decode(&self, g: &mut Graph, z: &[Var]) -> Result<Vec<Var>> {
        let k = self.arch.scales;
        let n = self.grid_n;
        let mut h = self.conv_act(g, &format!("dec{k}"), z[k])?;
        for j in (0..k).rev() {
            h = g.pool2(h, PoolMode::NearestUp)?;
            h = g.concat(&[h, z[j]], 1)?;
            h = self.conv_act(g, &format!("dec{j}"), h)?;
        }
        let out = self.conv(g, "out", h)?;
        (0..self.arch.slices)
            .map(|s| {
                let a = g.slice(out, 1, 2 * s, 1)?;
                let phi = g.slice(out, 1, 2 * s + 1, 1)?;
                let a = g.reshape(a, &[n, n])?;
                let phi = g.reshape(phi, &[n, n])?;
                let c = g.make_complex(a, phi)?;
                Ok(g.exp(c))
            })
            .collect()
    }

    /// Encoder and pooling: per-scale `(mu, logvar, attention)`.
    pub fn latents(&self, g: &mut Graph, input: Var) -> Result<Pass> {
        let feats = self.encode(g, input)?;
        let mut p = Pass {
            mu: vec![],
            logvar: vec![],
            attention: vec![],
            z: vec![],
            slices: vec![],
        };
        for (s, &f) in feats.iter().enumerate() {
            let (pooled, attn) = self.pool(g, s, f)?;
            let mu = self.conv(g, &format!("mu{s}"), pooled)?;
            let lv = self.conv(g, &format!("logvar{s}"), pooled)?;
            p.mu.push(mu);
            p.logvar.push(g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?);
            p.attention.push(attn);
        }
        Ok(p)
    }

    /// `z = mu + exp(logvar / 2) * eps` at every scale.
    pub fn sample_z(&self, g: &mut Graph, mu: &[Var], logvar: &[Var], noise: Noise) -> Result<Vec<Var>> {
        let mut rng = match noise {
            Noise::Seeded(s) => stream_rng(s, Stream::Sampling),
            Noise::Zero => return Ok(mu.to_vec()),
        };
        mu.iter()
            .zip(logvar)
            .map(|(&mu, &lv)| {
                let shape = g.shape(mu).to_vec();
                let count: usize = shape.iter().product();
                let eps: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
                let eps = g.constant(Tensor::real(shape, eps).unwrap());
                let half = g.scale(lv, 0.5);
                let sd = g.exp(half);
                let noise = g.mul(sd, eps)?;
                Ok(g.add(mu, noise)?)
            })
            .collect()
    }

    /// Encoder, pooling, reparameterization and decoder for one object.
    pub fn pass(&self, g: &mut Graph, input: Var, noise: Noise) -> Result<Pass> {
        let mut p = self.latents(g, input)?;
        p.z = self.sample_z(g, &p.mu, &p.logvar, noise)?;
        p.slices = self.decode(g, &p.z)?;
        Ok(p)
    }
}

/// `sum 0.5 (mu^2 + exp(logvar) - 1 - logvar)` over every latent element.
pub fn kl_standard_normal(g: &mut Graph, mu: &[Var], logvar: &[Var]) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for (&m, &lv) in mu.iter().zip(logvar) {
        let m2 = g.mul(m, m)?;
        let ev = g.exp(lv);
        let t = g.add(m2, ev)?;
        let t = g.sub(t, lv)?;
        let s = g.sum_all(t);
        let count = g.value(m).numel() as f64;
        let s = g.scale(s, 0.5);
        let c = g.constant(Tensor::scalar(0.5 * count));
        let s = g.sub(s, c)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Physics NLL of decoded slices plus `beta` times the KL term.
pub fn elbo_terms(
    g: &mut Graph,
    optics: &Optics,
    prep: &PreparedStack,
    pass: &Pass,
    beta: f64,
) -> Result<LossNodes> {
    let lam = optics.expected_counts(g, &pass.slices, &prep.patterns)?;
    let nll = poisson_nll(g, prep.counts.clone(), lam)?;
    let kl = kl_standard_normal(g, &pass.mu, &pass.logvar)?;
    let bkl = g.scale(kl, beta);
    let total = g.add(nll, bkl)?;
    Ok(LossNodes { total, nll, kl })
}

/// Per-slice complex values of decoded transmittance nodes.
pub fn slice_values(g: &Graph, slices: &[Var]) -> Vec<Vec<Complex64>> {
    slices
        .iter()
        .map(|&s| {
            debug_assert_eq!(g.dtype(s), Dtype::Complex);
            g.value(s).as_complex().unwrap().to_vec()
        })
        .collect()
}
