//! Linear-β noise schedule, v-prediction loss with SNR weighting, ancestral
//! sampling and a small trainable denoiser.

use crate::plane::{LayeredPlane, PLANE_CHANNELS, PLANE_WIDTH};
use crate::template::{LAYER_RES, NUM_LAYERS};
use crate::tensor::{Adam, CustomOp, Gradients, NamedTensors, Param, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

pub const NUM_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Exponent of the SNR loss weight `(α/σ)^{2ω}`.
pub const DEFAULT_OMEGA: f32 = 0.5;
/// Cap on the loss weight, which diverges as σ → 0.
pub const MAX_WEIGHT: f32 = 1e4;

/// Discrete DDPM schedule addressed by continuous `t ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(NUM_TIMESTEPS, BETA_START, BETA_END)
    }
}

impl Schedule {
    pub fn linear(steps: usize, start: f64, end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps.max(2) - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Self { betas, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Step index `round(t·(T − 1))`.
    pub fn index(&self, t: f32) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok((t as f64 * (self.len() - 1) as f64).round() as usize)
    }

    /// Continuous time of step `i`.
    pub fn time_of(&self, i: usize) -> f32 {
        (i as f64 / (self.len() - 1) as f64) as f32
    }

    pub fn alpha_at(&self, i: usize) -> f64 {
        self.alpha_bar[i].sqrt()
    }

    pub fn sigma_at(&self, i: usize) -> f64 {
        (1.0 - self.alpha_bar[i]).sqrt()
    }

    pub fn alpha(&self, t: f32) -> Result<f64> {
        Ok(self.alpha_at(self.index(t)?))
    }

    pub fn sigma(&self, t: f32) -> Result<f64> {
        Ok(self.sigma_at(self.index(t)?))
    }

    /// `min((α/σ)^{2ω}, MAX_WEIGHT)`.
    pub fn weight(&self, t: f32, omega: f32) -> Result<f32> {
        let i = self.index(t)?;
        let snr = self.alpha_bar[i] / (1.0 - self.alpha_bar[i]);
        Ok((snr.powf(omega as f64) as f32).min(MAX_WEIGHT))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn affine(a: &Tensor, ka: f64, b: &Tensor, kb: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| (ka * x as f64 + kb * y as f64) as f32).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// `x_t = α(t)x₀ + σ(t)ε`.
pub fn forward_diffuse(x0: &Tensor, noise: &Tensor, t: f32, schedule: &Schedule) -> Result<Tensor> {
    check_same("forward_diffuse", x0, noise)?;
    let i = schedule.index(t)?;
    Ok(affine(x0, schedule.alpha_at(i), noise, schedule.sigma_at(i)))
}

/// `v = α(t)ε − σ(t)x₀`.
pub fn v_target(x0: &Tensor, noise: &Tensor, t: f32, schedule: &Schedule) -> Result<Tensor> {
    check_same("v_target", x0, noise)?;
    let i = schedule.index(t)?;
    Ok(affine(noise, schedule.alpha_at(i), x0, -schedule.sigma_at(i)))
}

/// `x̂₀ = α(t)x_t − σ(t)v`.
pub fn recover_x0(x_t: &Tensor, v: &Tensor, t: f32, schedule: &Schedule) -> Result<Tensor> {
    check_same("recover_x0", x_t, v)?;
    let i = schedule.index(t)?;
    Ok(affine(x_t, schedule.alpha_at(i), v, -schedule.sigma_at(i)))
}

/// `ε̂ = σ(t)x_t + α(t)v`.
pub fn recover_noise(x_t: &Tensor, v: &Tensor, t: f32, schedule: &Schedule) -> Result<Tensor> {
    check_same("recover_noise", x_t, v)?;
    let i = schedule.index(t)?;
    Ok(affine(x_t, schedule.sigma_at(i), v, schedule.alpha_at(i)))
}

/// Width-wise concatenation of `[12, 128, 128]` layers (body, hair+shoes, top+bottom).
pub fn concat_layers(layers: &[Tensor]) -> Result<LayeredPlane> {
    let want = [PLANE_CHANNELS, LAYER_RES, LAYER_RES];
    if layers.len() != NUM_LAYERS {
        return Err(Error::invalid("concat_layers", format!("expected {NUM_LAYERS} layers, got {}", layers.len())));
    }
    for l in layers {
        if l.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "concat_layers",
                lhs: l.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
    }
    let mut out = Tensor::zeros(&LayeredPlane::SHAPE);
    for (k, l) in layers.iter().enumerate() {
        for (row, src) in l.data().chunks(LAYER_RES).enumerate() {
            out.data_mut()[row * PLANE_WIDTH + k * LAYER_RES..][..LAYER_RES].copy_from_slice(src);
        }
    }
    LayeredPlane::new(out)
}

pub fn split_layers(plane: &LayeredPlane) -> Vec<Tensor> {
    (0..NUM_LAYERS).map(|l| plane.layer(l)).collect()
}

/// A network predicting v from a noisy plane and its time.
///
/// Parameters are bound onto the tape by the caller (in [`Denoiser::params`]
/// order) so gradients can be collected for them.
pub trait Denoiser {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];
    /// Shape of the planes this denoiser accepts.
    fn plane_shape(&self) -> Vec<usize>;
    fn forward<'t>(&self, params: &[Var<'t>], x_t: Var<'t>, t: f32) -> Result<Var<'t>>;
}

/// Puts a denoiser's parameters on `tape`, as leaves when `trainable`.
pub fn bind_params<'t>(denoiser: &dyn Denoiser, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
    denoiser
        .params()
        .iter()
        .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
        .collect()
}

/// Adds the bound parameters' gradients into the denoiser's gradient slots.
pub fn accumulate_grads(denoiser: &mut dyn Denoiser, grads: &Gradients, bound: &[Var<'_>]) -> Result<()> {
    for (p, &v) in denoiser.params_mut().iter_mut().zip(bound) {
        if let Some(g) = grads.get(v) {
            let total = match p.grad() {
                Some(old) => affine(old, 1.0, g, 1.0),
                None => g.clone(),
            };
            p.set_grad(total)?;
        }
    }
    Ok(())
}

/// Gradient-free prediction.
pub fn predict(denoiser: &dyn Denoiser, x_t: &Tensor, t: f32) -> Result<Tensor> {
    let tape = Tape::new();
    let params = bind_params(denoiser, &tape, false);
    let v = denoiser.forward(&params, tape.constant(x_t.clone()), t)?;
    Ok((*v.value()).clone())
}

/// `½ w(t) ‖x̂₀ − x₀‖²` with x̂₀ recovered from the predicted v. Gradients
/// reach both the denoiser parameters and `x0`.
pub fn diffusion_loss<'t>(
    x0: Var<'t>,
    denoiser: &dyn Denoiser,
    params: &[Var<'t>],
    t: f32,
    noise: &Tensor,
    schedule: &Schedule,
    omega: f32,
) -> Result<Var<'t>> {
    let i = schedule.index(t)?;
    let (alpha, sigma) = (schedule.alpha_at(i) as f32, schedule.sigma_at(i) as f32);
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_loss",
            lhs: x0.shape(),
            rhs: noise.shape().to_vec(),
        });
    }
    let tape = x0.tape();
    let x_t = x0.scale(alpha).add(tape.constant(noise.map(|e| sigma * e)))?;
    let v = denoiser.forward(params, x_t, t)?;
    let x0_hat = x_t.scale(alpha).sub(v.scale(sigma))?;
    let w = schedule.weight(t, omega)?;
    Ok(x0_hat.sub(x0)?.square().sum().scale(0.5 * w))
}

/// Ancestral sampling from pure noise with `steps` evenly strided steps of the
/// schedule. Deterministic for a given seed.
pub fn ddpm_sample(denoiser: &dyn Denoiser, schedule: &Schedule, steps: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = denoiser.plane_shape();
    let x = Tensor::randn(&shape, &mut rng);
    ddpm_sample_from(denoiser, schedule, steps, x, &mut rng)
}

/// Indices visited by a `steps`-step strided chain, highest first.
pub fn strided_steps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    (0..steps).rev().map(|i| (i + 1) * total / steps - 1).collect()
}

pub fn ddpm_sample_from(
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    steps: usize,
    mut x: Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let chain = strided_steps(schedule.len(), steps);
    for (k, &i) in chain.iter().enumerate() {
        let t = schedule.time_of(i);
        let v = predict(denoiser, &x, t)?;
        let x0 = recover_x0(&x, &v, t, schedule)?;
        let Some(&prev) = chain.get(k + 1) else {
            return Ok(x0);
        };
        // posterior q(x_prev | x_t, x̂₀) of the strided chain
        let (ab_t, ab_s) = (schedule.alpha_bar[i], schedule.alpha_bar[prev]);
        let a_ts = ab_t / ab_s;
        let b_ts = 1.0 - a_ts;
        let c0 = ab_s.sqrt() * b_ts / (1.0 - ab_t);
        let ct = a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let std = ((1.0 - ab_s) / (1.0 - ab_t) * b_ts).sqrt();
        let noise = Tensor::randn(x.shape(), rng);
        let data = x0
            .data()
            .iter()
            .zip(x.data())
            .zip(noise.data())
            .map(|((&p, &q), &e)| (c0 * p as f64 + ct * q as f64 + std * e as f64) as f32)
            .collect();
        x = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub time_dim: usize,
    /// Learnable planes the denoiser can recall.
    pub memory: usize,
    pub memory_init_std: f32,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: PLANE_CHANNELS,
            height: LAYER_RES,
            width: PLANE_WIDTH,
            hidden: 16,
            time_dim: 16,
            memory: 8,
            memory_init_std: 0.01,
        }
    }
}

/// Three 3×3 conv blocks with a sinusoidal time embedding added per channel,
/// on top of a bank of learnable planes read out by their posterior weights
/// `softmax(−‖x_t − α m_k‖² / 2σ²)`. The x₀ estimate is
/// `Σ p_k m_k + conv(x_t, t)`, returned as v.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub config: DenoiserConfig,
    pub params: Vec<Param>,
    pub schedule: Schedule,
}

mod slot {
    pub const CONV1_W: usize = 0;
    pub const CONV1_B: usize = 1;
    pub const TIME1: usize = 2;
    pub const CONV2_W: usize = 3;
    pub const CONV2_B: usize = 4;
    pub const TIME2: usize = 5;
    pub const CONV3_W: usize = 6;
    pub const CONV3_B: usize = 7;
    pub const MEMORY: usize = 8;
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Self {
        let (c, h, d) = (config.channels, config.hidden, config.time_dim);
        let kaiming = |o: usize, i: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / ((i * 9) as f32).sqrt();
            Tensor::from_fn(&[o, i, 3, 3], |_| rng.random_range(-bound..bound))
        };
        let linear = |o: usize, i: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (i as f32).sqrt();
            Tensor::from_fn(&[o, i], |_| rng.random_range(-bound..bound))
        };
        let mut params = vec![
            Param::new("denoiser.conv1.weight", kaiming(h, c, rng)),
            Param::new("denoiser.conv1.bias", Tensor::zeros(&[h])),
            Param::new("denoiser.time1.weight", linear(h, d, rng)),
            Param::new("denoiser.conv2.weight", kaiming(h, h, rng)),
            Param::new("denoiser.conv2.bias", Tensor::zeros(&[h])),
            Param::new("denoiser.time2.weight", linear(h, d, rng)),
            // zero output layer: the residual starts switched off
            Param::new("denoiser.conv3.weight", Tensor::zeros(&[c, h, 3, 3])),
            Param::new("denoiser.conv3.bias", Tensor::zeros(&[c])),
        ];
        let std = config.memory_init_std;
        let memory = Tensor::randn(&[config.memory, c, config.height, config.width], rng).map(|v| v * std);
        params.push(Param::new("denoiser.memory", memory));
        Self {
            config,
            params,
            schedule: Schedule::default(),
        }
    }

    /// Overwrites the memory bank with `planes` (cycled when fewer than the
    /// bank size), plus the configured jitter so no two entries coincide.
    pub fn seed_memory(&mut self, planes: &[Tensor], rng: &mut impl Rng) -> Result<()> {
        let shape = self.plane_shape();
        let per: usize = shape.iter().product();
        let std = self.config.memory_init_std;
        if planes.is_empty() {
            return Err(Error::invalid("seed_memory", "no planes given"));
        }
        let bank = &mut self.params[slot::MEMORY].value;
        for k in 0..self.config.memory {
            let p = &planes[k % planes.len()];
            if p.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "seed_memory",
                    lhs: p.shape().to_vec(),
                    rhs: shape,
                });
            }
            let jitter = k >= planes.len();
            for (dst, &src) in bank.data_mut()[k * per..(k + 1) * per].iter_mut().zip(p.data()) {
                let e: f32 = if jitter { rng.sample(rand_distr::StandardNormal) } else { 0.0 };
                *dst = src + std * e;
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> NamedTensors {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn load(&mut self, named: &NamedTensors) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Builds a denoiser whose shapes are inferred from a checkpoint.
    pub fn from_named(named: &NamedTensors) -> Result<Self> {
        let get = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let memory = get("denoiser.memory")?;
        let time = get("denoiser.time1.weight")?;
        let config = DenoiserConfig {
            memory: memory[0],
            channels: memory[1],
            height: memory[2],
            width: memory[3],
            hidden: time[0],
            time_dim: time[1],
            ..DenoiserConfig::default()
        };
        let mut d = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        d.load(named)?;
        Ok(d)
    }
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding(step: f32, dim: usize) -> Tensor {
    Tensor::from_fn(&[dim, 1], |i| {
        let freq = 10000f32.powf(-((i / 2 * 2) as f32) / dim as f32);
        if i % 2 == 0 {
            (step * freq).sin()
        } else {
            (step * freq).cos()
        }
    })
}

struct MemoryReadOp {
    x: Rc<Tensor>,
    memory: Rc<Tensor>,
    probs: Vec<f64>,
    out: Vec<f64>,
    alpha: f64,
    sigma2: f64,
}

impl CustomOp for MemoryReadOp {
    fn name(&self) -> &'static str {
        "memory_read"
    }

    fn backward(&self, g: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.x.numel();
        let (x, m, g) = (self.x.data(), self.memory.data(), g.data());
        let mut gx = vec![0.0f64; n];
        let mut gm = vec![0.0f32; self.memory.numel()];
        for (k, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mk = &m[k * n..(k + 1) * n];
            // g · (m_k − out), the sensitivity to logit k
            let gk: f64 = (0..n).map(|i| g[i] as f64 * (mk[i] as f64 - self.out[i])).sum::<f64>() * p;
            let dst = &mut gm[k * n..(k + 1) * n];
            for i in 0..n {
                let r = x[i] as f64 - self.alpha * mk[i] as f64;
                gx[i] -= gk * r / self.sigma2;
                dst[i] = (p * g[i] as f64 + gk * self.alpha * r / self.sigma2) as f32;
            }
        }
        vec![
            Some(Tensor::new(self.x.shape().to_vec(), gx.into_iter().map(|v| v as f32).collect()).unwrap()),
            Some(Tensor::new(self.memory.shape().to_vec(), gm).unwrap()),
        ]
    }
}

/// Posterior-weighted mean of the memory planes given `x_t`.
fn memory_read<'t>(x: Var<'t>, memory: Var<'t>, alpha: f64, sigma: f64) -> Var<'t> {
    let (xv, mv) = (x.value(), memory.value());
    let n = xv.numel();
    let k = mv.shape()[0];
    let sigma2 = sigma * sigma;
    let logits: Vec<f64> = (0..k)
        .map(|j| {
            let mk = &mv.data()[j * n..(j + 1) * n];
            let d: f64 = xv.data().iter().zip(mk).map(|(&a, &b)| (a as f64 - alpha * b as f64).powi(2)).sum();
            -d / (2.0 * sigma2)
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let mut out = vec![0.0f64; n];
    for (j, &p) in probs.iter().enumerate() {
        if p != 0.0 {
            for (o, &b) in out.iter_mut().zip(&mv.data()[j * n..(j + 1) * n]) {
                *o += p * b as f64;
            }
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out.iter().map(|&v| v as f32).collect()).unwrap();
    let op = MemoryReadOp {
        x: xv,
        memory: mv,
        probs,
        out,
        alpha,
        sigma2,
    };
    x.tape().custom(op, &[x, memory], value)
}

impl Denoiser for ToyDenoiser {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn plane_shape(&self) -> Vec<usize> {
        vec![self.config.channels, self.config.height, self.config.width]
    }

    fn forward<'t>(&self, p: &[Var<'t>], x_t: Var<'t>, t: f32) -> Result<Var<'t>> {
        let shape = self.plane_shape();
        if x_t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: x_t.shape(),
                rhs: shape,
            });
        }
        let i = self.schedule.index(t)?;
        let (alpha, sigma) = (self.schedule.alpha_at(i), self.schedule.sigma_at(i));
        let (c, h, w, hid) = (shape[0], shape[1], shape[2], self.config.hidden);
        let tape = x_t.tape();
        let emb = tape.constant(time_embedding(i as f32, self.config.time_dim));
        let time1 = p[slot::TIME1].matmul(emb)?.reshape(&[1, hid, 1, 1])?;
        let time2 = p[slot::TIME2].matmul(emb)?.reshape(&[1, hid, 1, 1])?;

        let input = x_t.reshape(&[1, c, h, w])?;
        let h1 = input.conv2d(p[slot::CONV1_W], Some(p[slot::CONV1_B]))?.add(time1)?.silu();
        let h2 = h1.conv2d(p[slot::CONV2_W], Some(p[slot::CONV2_B]))?.add(time2)?.silu();
        let residual = h2.conv2d(p[slot::CONV3_W], Some(p[slot::CONV3_B]))?.reshape(&shape)?;
        let recalled = memory_read(x_t, p[slot::MEMORY], alpha, sigma);
        let x0 = recalled.add(residual)?;
        // v = (α x_t − x̂₀) / σ
        Ok(x_t.scale(alpha as f32).sub(x0)?.scale((1.0 / sigma) as f32))
    }
}

/// Trains a denoiser alone on fixed planes: uniform t, fresh noise per step.
/// The memory bank is seeded from the planes first. Returns per-step losses.
pub fn fit_denoiser(
    denoiser: &mut ToyDenoiser,
    planes: &[Tensor],
    steps: usize,
    lr: f32,
    omega: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    denoiser.seed_memory(planes, &mut rng)?;
    let schedule = denoiser.schedule.clone();
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x0 = &planes[rng.random_range(0..planes.len())];
        let t: f32 = rng.random_range(0.0..=1.0);
        let noise = Tensor::randn(x0.shape(), &mut rng);
        let tape = Tape::new();
        let params = bind_params(denoiser, &tape, true);
        let loss = diffusion_loss(tape.constant(x0.clone()), denoiser, &params, t, &noise, &schedule, omega)?;
        losses.push(loss.item());
        let grads = tape.backward(loss)?;
        accumulate_grads(denoiser, &grads, &params)?;
        for p in denoiser.params_mut() {
            p.apply(&mut adam)?;
        }
    }
    Ok(losses)
}

/// Mean squared difference of two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n
}
