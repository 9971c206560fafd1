//! The layered UV feature plane, the geometry/texture decoders, and Gaussian
//! assembly from decoded attribute maps.

use crate::math::{mat3_from, mat3_to, rodrigues, rodrigues_jacobian, Mat3, Vec3};
use crate::render::{col, GaussianBatch, GAUSSIAN_WIDTH};
use crate::template::{GaussianSeed, LAYER_RES, NUM_LAYERS};
use crate::tensor::{
    BatchStats, BilinearTaps, CustomOp, Gradients, NamedTensors, Param, Tape, Tensor, Var,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub const PLANE_CHANNELS: usize = 12;
/// Channels 0..6 feed the geometry decoder, 6..12 the texture decoder.
pub const GEOMETRY_CHANNELS: usize = 6;
pub const PLANE_WIDTH: usize = NUM_LAYERS * LAYER_RES;
/// Largest position offset (metres) the geometry head can express per unit output.
pub const MAX_OFFSET: f32 = 0.1;
/// Channels of a decoded attribute map.
pub const ATTRIBUTE_CHANNELS: usize = 13;

/// Channel offsets within an attribute map.
pub mod attr {
    pub const OFFSET: usize = 0;
    pub const OPACITY: usize = 3;
    pub const COLOR: usize = 4;
    pub const ROTATION: usize = 7;
    pub const SCALE: usize = 10;
}

const BN_EPS: f32 = 1e-5;

/// Three 12×128×128 layers stored side by side as one 12×128×384 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredPlane(pub Tensor);

impl LayeredPlane {
    pub const SHAPE: [usize; 3] = [PLANE_CHANNELS, LAYER_RES, PLANE_WIDTH];

    pub fn zeros() -> Self {
        Self(Tensor::zeros(&Self::SHAPE))
    }

    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape() != Self::SHAPE {
            return Err(Error::ShapeMismatch {
                op: "layered_plane",
                lhs: t.shape().to_vec(),
                rhs: Self::SHAPE.to_vec(),
            });
        }
        if !t.is_finite() {
            return Err(Error::invalid("layered_plane", "non-finite values"));
        }
        Ok(Self(t))
    }

    /// One `[12, 128, 128]` layer.
    pub fn layer(&self, l: usize) -> Tensor {
        let d = self.0.data();
        let mut out = Vec::with_capacity(PLANE_CHANNELS * LAYER_RES * LAYER_RES);
        for c in 0..PLANE_CHANNELS {
            for y in 0..LAYER_RES {
                let row = (c * LAYER_RES + y) * PLANE_WIDTH + l * LAYER_RES;
                out.extend_from_slice(&d[row..row + LAYER_RES]);
            }
        }
        Tensor::new(vec![PLANE_CHANNELS, LAYER_RES, LAYER_RES], out).unwrap()
    }

    /// Copies the texels of `uv_box` (`[u0, v0, u1, v1]`) in layer `l` from `src`.
    pub fn copy_box(&mut self, src: &LayeredPlane, l: usize, uv_box: [f32; 4]) {
        let x0 = (uv_box[0] * LAYER_RES as f32).round() as usize;
        let x1 = (uv_box[2] * LAYER_RES as f32).round() as usize;
        let y0 = (uv_box[1] * LAYER_RES as f32).round() as usize;
        let y1 = (uv_box[3] * LAYER_RES as f32).round() as usize;
        let s = src.0.data();
        let d = self.0.data_mut();
        for c in 0..PLANE_CHANNELS {
            for y in y0..y1 {
                let row = (c * LAYER_RES + y) * PLANE_WIDTH + l * LAYER_RES;
                d[row + x0..row + x1].copy_from_slice(&s[row + x0..row + x1]);
            }
        }
    }
}

/// Splits a `[12, 128, 384]` plane into a `[3, 12, 128, 128]` batch of layers.
pub fn plane_to_layers(plane: Var<'_>) -> Result<Var<'_>> {
    let layers = (0..NUM_LAYERS)
        .map(|l| {
            plane
                .narrow(2, l * LAYER_RES, LAYER_RES)?
                .reshape(&[1, PLANE_CHANNELS, LAYER_RES, LAYER_RES])
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&layers, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Offset/covariance heads drawn from U(−1e−5, 1e−5) instead of U(−1e−5, 1e−1).
    pub symmetric_head_init: bool,
    /// Iterations that normalise with batch statistics (and update the running
    /// statistics) before they are frozen.
    pub bn_warmup: usize,
    pub bn_momentum: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            symmetric_head_init: false,
            bn_warmup: 0,
            bn_momentum: 0.1,
        }
    }
}

/// Parameter slots of one decoder, in storage order.
const SLOTS: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "bn1.weight",
    "bn1.bias",
    "head.weight",
    "head.bias",
    "bn2.weight",
    "bn2.bias",
];

/// conv3×3 → BN → SiLU → conv3×3 → BN → per-channel head activation.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub prefix: &'static str,
    pub params: Vec<Param>,
    pub running_mean: [Vec<f32>; 2],
    pub running_var: [Vec<f32>; 2],
}

impl Decoder {
    /// `init_heads` lists the output channels that use the small residual init.
    fn new(
        prefix: &'static str,
        inputs: usize,
        outputs: usize,
        init_heads: &[usize],
        config: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let h = config.hidden;
        let kaiming = |o: usize, i: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / ((i * 9) as f32).sqrt();
            Tensor::from_fn(&[o, i, 3, 3], |_| rng.random_range(-bound..bound))
        };
        let conv1 = kaiming(h, inputs, rng);
        let mut head = kaiming(outputs, h, rng);
        let hi = if config.symmetric_head_init { 1e-5 } else { 1e-1 };
        let per_out = h * 9;
        for &c in init_heads {
            for w in &mut head.data_mut()[c * per_out..(c + 1) * per_out] {
                *w = rng.random_range(-1e-5..hi);
            }
        }
        let values = [
            conv1,
            Tensor::zeros(&[h]),
            Tensor::ones(&[h]),
            Tensor::zeros(&[h]),
            head,
            Tensor::zeros(&[outputs]),
            Tensor::ones(&[outputs]),
            Tensor::zeros(&[outputs]),
        ];
        Self {
            prefix,
            params: SLOTS
                .iter()
                .zip(values)
                .map(|(s, v)| Param::new(format!("{prefix}.{s}"), v))
                .collect(),
            running_mean: [vec![0.0; h], vec![0.0; outputs]],
            running_var: [vec![1.0; h], vec![1.0; outputs]],
        }
    }

    fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        batch_stats: bool,
    ) -> Result<(Var<'t>, Vec<BatchStats>)> {
        let mut stats = Vec::new();
        let mut norm = |y: Var<'t>, g: Var<'t>, b: Var<'t>, i: usize| -> Result<Var<'t>> {
            if batch_stats {
                let (v, s) = y.batch_norm_train(g, b, BN_EPS)?;
                stats.push(s);
                Ok(v)
            } else {
                y.batch_norm_frozen(g, b, &self.running_mean[i], &self.running_var[i], BN_EPS)
            }
        };
        let hidden = norm(x.conv2d(p[0], Some(p[1]))?, p[2], p[3], 0)?.silu();
        let out = norm(hidden.conv2d(p[4], Some(p[5]))?, p[6], p[7], 1)?;
        Ok((out, stats))
    }

    fn update_running(&mut self, stats: &[BatchStats], momentum: f32) {
        for (i, s) in stats.iter().enumerate() {
            // running variance tracks the unbiased estimate
            let unbias = s.count as f32 / (s.count.max(2) - 1) as f32;
            for c in 0..s.mean.len() {
                self.running_mean[i][c] = (1.0 - momentum) * self.running_mean[i][c] + momentum * s.mean[c];
                self.running_var[i][c] =
                    (1.0 - momentum) * self.running_var[i][c] + momentum * s.var[c] * unbias;
            }
        }
    }

    fn named_tensors(&self) -> NamedTensors {
        let mut out: NamedTensors = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for i in 0..2 {
            let n = self.running_mean[i].len();
            out.push((
                format!("{}.bn{}.running_mean", self.prefix, i + 1),
                Tensor::new(vec![n], self.running_mean[i].clone()).unwrap(),
            ));
            out.push((
                format!("{}.bn{}.running_var", self.prefix, i + 1),
                Tensor::new(vec![n], self.running_var[i].clone()).unwrap(),
            ));
        }
        out
    }

    fn load(&mut self, named: &NamedTensors) -> Result<()> {
        let find = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        for p in &mut self.params {
            let t = find(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for i in 0..2 {
            let m = find(&format!("{}.bn{}.running_mean", self.prefix, i + 1))?;
            let v = find(&format!("{}.bn{}.running_var", self.prefix, i + 1))?;
            if m.numel() != self.running_mean[i].len() || v.numel() != self.running_var[i].len() {
                return Err(Error::Checkpoint(format!("{}: running statistics size", self.prefix)));
            }
            self.running_mean[i] = m.data().to_vec();
            self.running_var[i] = v.data().to_vec();
        }
        Ok(())
    }
}

/// The shared geometry (`dg`) and texture (`dt`) decoders.
#[derive(Clone, Debug)]
pub struct Decoders {
    pub geometry: Decoder,
    pub texture: Decoder,
    pub config: DecoderConfig,
    /// Completed training steps, used for the batch-norm warm-up.
    pub steps: usize,
}

/// Decoder parameters recorded on a tape.
pub struct BoundDecoders<'t> {
    geometry: Vec<Var<'t>>,
    texture: Vec<Var<'t>>,
}

impl<'t> BoundDecoders<'t> {
    /// Bound parameters in [`Decoders::params`] order.
    pub fn vars(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.geometry.iter().chain(&self.texture).copied()
    }
}

impl Decoders {
    pub fn new(config: DecoderConfig, rng: &mut impl Rng) -> Self {
        // geometry head: Δμ (3, linear) and α; texture head: c, Δr, Δs
        let geometry = Decoder::new("dg", GEOMETRY_CHANNELS, 4, &[0, 1, 2], &config, rng);
        let texture = Decoder::new(
            "dt",
            PLANE_CHANNELS - GEOMETRY_CHANNELS,
            9,
            &[3, 4, 5, 6, 7, 8],
            &config,
            rng,
        );
        Self {
            geometry,
            texture,
            config,
            steps: 0,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.geometry.params.iter().chain(&self.texture.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.geometry.params.iter_mut().chain(&mut self.texture.params)
    }

    /// Records the parameters as leaves (`trainable`) or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDecoders<'t> {
        let bind = |d: &Decoder| {
            d.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.leaf(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect()
        };
        BoundDecoders {
            geometry: bind(&self.geometry),
            texture: bind(&self.texture),
        }
    }

    /// Adds the bound parameters' gradients to the stored gradient slots.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &BoundDecoders<'_>) -> Result<()> {
        let vars = bound.geometry.iter().chain(&bound.texture);
        for (p, v) in self.params_mut().zip(vars) {
            if let Some(g) = grads.get(*v) {
                let total = match p.grad() {
                    Some(prev) => {
                        let mut t = prev.clone();
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                        t
                    }
                    None => g.clone(),
                };
                p.set_grad(total)?;
            }
        }
        Ok(())
    }

    pub fn uses_batch_stats(&self, training: bool) -> bool {
        training && self.steps < self.config.bn_warmup
    }

    /// Decodes a `[12, 128, 384]` plane into `[3, 13, 128, 128]` attribute maps
    /// (one batch entry per layer). Returns the batch statistics when the
    /// warm-up is active.
    pub fn decode<'t>(
        &self,
        bound: &BoundDecoders<'t>,
        plane: Var<'t>,
        training: bool,
    ) -> Result<(Var<'t>, Vec<BatchStats>)> {
        if plane.shape() != LayeredPlane::SHAPE {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: plane.shape(),
                rhs: LayeredPlane::SHAPE.to_vec(),
            });
        }
        let batch = self.uses_batch_stats(training);
        let layers = plane_to_layers(plane.tanh())?;
        let geo_in = layers.narrow(1, 0, GEOMETRY_CHANNELS)?;
        let tex_in = layers.narrow(1, GEOMETRY_CHANNELS, PLANE_CHANNELS - GEOMETRY_CHANNELS)?;
        let (geo, mut stats) = self.geometry.forward(&bound.geometry, geo_in, batch)?;
        let (tex, tex_stats) = self.texture.forward(&bound.texture, tex_in, batch)?;
        stats.extend(tex_stats);
        let offset = geo.narrow(1, 0, 3)?;
        let opacity = geo.narrow(1, 3, 1)?.sigmoid();
        let maps = Var::concat(&[offset, opacity, tex.sigmoid()], 1)?;
        Ok((maps, stats))
    }

    /// Decoding without gradients (frozen statistics).
    pub fn decode_maps(&self, plane: &LayeredPlane) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (maps, _) = self.decode(&bound, tape.constant(plane.0.clone()), false)?;
        let t = maps.value();
        Ok((*t).clone())
    }

    /// Ends a training step: folds batch statistics into the running ones.
    pub fn finish_step(&mut self, stats: &[BatchStats]) {
        if !stats.is_empty() {
            let m = self.config.bn_momentum;
            self.geometry.update_running(&stats[..2], m);
            self.texture.update_running(&stats[2..], m);
        }
        self.steps += 1;
    }

    pub fn named_tensors(&self) -> NamedTensors {
        let mut out = self.geometry.named_tensors();
        out.extend(self.texture.named_tensors());
        out
    }

    pub fn load(&mut self, named: &NamedTensors) -> Result<()> {
        self.geometry.load(named)?;
        self.texture.load(named)
    }

    /// Weights plus the width needed to rebuild the network.
    pub fn checkpoint_tensors(&self) -> NamedTensors {
        let mut out = vec![("meta.decoder_hidden".to_string(), Tensor::scalar(self.config.hidden as f32))];
        out.extend(self.named_tensors());
        out
    }

    /// Rebuilds decoders from [`Self::checkpoint_tensors`] (extra entries are ignored).
    pub fn from_named(named: &NamedTensors) -> Result<Self> {
        let hidden = named
            .iter()
            .find(|(n, _)| n == "meta.decoder_hidden")
            .map(|(_, t)| t.item() as usize)
            .ok_or_else(|| Error::Checkpoint("missing tensor meta.decoder_hidden".into()))?;
        let config = DecoderConfig {
            hidden,
            ..DecoderConfig::default()
        };
        let mut decoders = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        decoders.load(named)?;
        Ok(decoders)
    }
}

// ---------------------------------------------------------------------------
// Gaussian assembly
// ---------------------------------------------------------------------------

struct ExtractOp {
    taps: Vec<BilinearTaps>,
    layers: Vec<usize>,
    r0: Vec<Mat3>,
    rot_jac: Vec<[Mat3; 3]>,
    s0: Vec<[f32; 3]>,
    maps_shape: Vec<usize>,
}

const ROT_RANGE: f64 = std::f64::consts::FRAC_PI_2;

impl CustomOp for ExtractOp {
    fn name(&self) -> &'static str {
        "extract_gaussians"
    }

    fn backward(&self, g: &Tensor) -> Vec<Option<Tensor>> {
        let (h, w) = (self.maps_shape[2], self.maps_shape[3]);
        let hw = h * w;
        let mut dm = vec![0.0f32; self.maps_shape.iter().product()];
        for (i, taps) in self.taps.iter().enumerate() {
            let gi = &g.data()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
            let mut d = [0.0f32; ATTRIBUTE_CHANNELS];
            for k in 0..3 {
                d[attr::OFFSET + k] = MAX_OFFSET * gi[col::MU + k];
                d[attr::COLOR + k] = gi[col::COLOR + k];
                d[attr::SCALE + k] = 2.0 * self.s0[i][k] * gi[col::SCALE + k];
            }
            d[attr::OPACITY] = gi[col::OPACITY];
            let g_r = mat3_from(&gi[col::ROT..col::ROT + 9]);
            for k in 0..3 {
                let dr = self.r0[i] * self.rot_jac[i][k];
                d[attr::ROTATION + k] = (g_r.component_mul(&dr).sum() * ROT_RANGE) as f32;
            }
            let base = self.layers[i] * ATTRIBUTE_CHANNELS * hw;
            for (c, &dc) in d.iter().enumerate() {
                if dc != 0.0 {
                    taps.scatter(&mut dm[base + c * hw..base + (c + 1) * hw], dc);
                }
            }
        }
        vec![Some(Tensor::new(self.maps_shape.clone(), dm).unwrap())]
    }
}

/// Samples each seed's layer of the `[3, 13, H, W]` maps at its UV and applies
/// the residuals: μ = μ⁰ + ρΔμ, α and c direct, s = s⁰·2Δs and
/// R = R⁰·Rodrigues((Δr − ½)·π/2). Returns `[N, 19]` Gaussian rows.
pub fn extract_gaussians<'t>(maps: Var<'t>, seeds: &[GaussianSeed]) -> Result<Var<'t>> {
    let shape = maps.shape();
    if shape.len() != 4 || shape[0] != NUM_LAYERS || shape[1] != ATTRIBUTE_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "extract_gaussians",
            lhs: shape,
            rhs: vec![NUM_LAYERS, ATTRIBUTE_CHANNELS, LAYER_RES, LAYER_RES],
        });
    }
    let (h, w) = (shape[2], shape[3]);
    let hw = h * w;
    let m = maps.value();
    let n = seeds.len();
    let mut out = vec![0.0f32; n * GAUSSIAN_WIDTH];
    let mut op = ExtractOp {
        taps: Vec::with_capacity(n),
        layers: Vec::with_capacity(n),
        r0: Vec::with_capacity(n),
        rot_jac: Vec::with_capacity(n),
        s0: Vec::with_capacity(n),
        maps_shape: shape.clone(),
    };
    for (i, s) in seeds.iter().enumerate() {
        if !(0.0..=1.0).contains(&s.uv[0]) || !(0.0..=1.0).contains(&s.uv[1]) {
            return Err(Error::invalid("extract_gaussians", format!("seed {i} uv {:?} outside [0, 1]²", s.uv)));
        }
        let taps = BilinearTaps::new(s.uv, h, w);
        let base = s.layer * ATTRIBUTE_CHANNELS * hw;
        let v: Vec<f32> = (0..ATTRIBUTE_CHANNELS)
            .map(|c| taps.eval(&m.data()[base + c * hw..base + (c + 1) * hw]))
            .collect();
        let row = &mut out[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
        for k in 0..3 {
            row[col::MU + k] = s.mu0[k] + MAX_OFFSET * v[attr::OFFSET + k];
            row[col::SCALE + k] = s.s0[k] * 2.0 * v[attr::SCALE + k];
            row[col::COLOR + k] = v[attr::COLOR + k];
        }
        row[col::OPACITY] = v[attr::OPACITY];
        let wv = Vec3::new(
            (v[attr::ROTATION] as f64 - 0.5) * ROT_RANGE,
            (v[attr::ROTATION + 1] as f64 - 0.5) * ROT_RANGE,
            (v[attr::ROTATION + 2] as f64 - 0.5) * ROT_RANGE,
        );
        let r0 = mat3_from(&s.r0);
        mat3_to(&(r0 * rodrigues(&wv)), &mut row[col::ROT..col::ROT + 9]);
        op.taps.push(taps);
        op.layers.push(s.layer);
        op.r0.push(r0);
        op.rot_jac.push(rodrigues_jacobian(&wv));
        op.s0.push(s.s0);
    }
    let out = Tensor::new(vec![n, GAUSSIAN_WIDTH], out)?;
    Ok(maps.tape().custom(op, &[maps], out))
}

/// Gradient-free assembly of a batch from decoded maps.
pub fn gaussians_from_maps(maps: &Tensor, seeds: &[GaussianSeed]) -> Result<GaussianBatch> {
    let tape = Tape::new();
    let rows = extract_gaussians(tape.constant(maps.clone()), seeds)?;
    let params = (*rows.value()).clone();
    Ok(GaussianBatch {
        params,
        labels: seeds.iter().map(|s| s.label).collect(),
    })
}
