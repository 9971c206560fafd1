//! Oracle suites shared by the `check` command and the acceptance tests.

use crate::math::{rodrigues, Vec3};
use crate::render::{
    col, render, render_f64, render_reference, Camera, GaussianBatch, RenderContext, RenderMode,
    RenderSettings, GAUSSIAN_WIDTH,
};
use crate::template::Label;
use crate::tensor::Tensor;
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Camera at the origin looking down +z.
pub fn axis_camera(focal: f64, size: usize) -> Camera {
    Camera::from_matrix(
        &crate::math::Mat4::identity(),
        focal,
        focal,
        size as f64 / 2.0,
        size as f64 / 2.0,
        size,
        size,
    )
}

/// `n` random Gaussians in front of an axis camera of `size`² pixels.
/// `pixel_sigma` is the typical projected standard deviation in pixels.
pub fn random_scene(rng: &mut impl Rng, n: usize, size: usize, pixel_sigma: f64) -> (GaussianBatch, Camera) {
    let focal = size as f64 * 1.2;
    let cam = axis_camera(focal, size);
    let mut params = Vec::with_capacity(n * GAUSSIAN_WIDTH);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = rng.random_range(2.0..4.0);
        let half = 0.45 * size as f64 / focal * z;
        let mu = [rng.random_range(-half..half), rng.random_range(-half..half), z];
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = rodrigues(&(axis * rng.random_range(0.0..1.5)));
        let world_sigma = pixel_sigma * z / focal;
        let mut row = [0.0f32; GAUSSIAN_WIDTH];
        for k in 0..3 {
            row[col::MU + k] = mu[k] as f32;
            row[col::SCALE + k] = (world_sigma * rng.random_range(0.4..1.6)) as f32;
            row[col::COLOR + k] = rng.random_range(0.0..1.0);
            for j in 0..3 {
                row[col::ROT + k * 3 + j] = r[(k, j)] as f32;
            }
        }
        row[col::OPACITY] = rng.random_range(0.2..0.95);
        params.extend_from_slice(&row);
        labels.push(Label::from_index(rng.random_range(0..Label::COUNT)).unwrap());
    }
    let batch = GaussianBatch {
        params: Tensor::new(vec![n, GAUSSIAN_WIDTH], params).unwrap(),
        labels,
    };
    (batch, cam)
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub scenes: usize,
    pub max_abs_diff: f32,
}

/// Tiled renderer vs the per-pixel reference (matched cutoff) on random
/// 64×64 scenes with up to 500 Gaussians, in colour and segmentation modes.
pub fn renderer_equivalence(seed: u64, scenes: usize) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..scenes {
        let n = rng.random_range(1..=500);
        let spread = rng.random_range(0.8..4.0);
        let (batch, cam) = random_scene(&mut rng, n, 64, spread);
        let bg = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        for settings in [RenderSettings::color(bg), RenderSettings::mode(RenderMode::Segmentation)] {
            let tiled = render(&batch, &cam, &settings)?;
            let reference = render_reference(&batch, &cam, &settings, true)?;
            worst = worst.max(tiled.image.max_abs_diff(&reference.image));
        }
    }
    Ok(EquivalenceReport {
        scenes,
        max_abs_diff: worst,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub parameters: usize,
    pub passing: usize,
    pub fraction: f64,
    pub median_rel_err: f64,
}

/// Analytic render gradients vs central differences (h = 1e-3) of a random
/// linear functional of the colour + alpha image, over every row entry of
/// 10-Gaussian 16×16 scenes. The 3σ cutoff is disabled: with it, a step can
/// move an ellipse boundary across a pixel centre, and the difference then
/// measures that jump instead of a derivative.
pub fn renderer_gradients(seed: u64, scenes: usize) -> Result<GradientReport> {
    const H: f32 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::new();
    for _ in 0..scenes {
        let (batch, cam) = random_scene(&mut rng, 10, 16, 2.5);
        let settings = RenderSettings {
            cutoff: false,
            ..RenderSettings::color([0.2, 0.3, 0.4])
        };
        let shape = [4, 16, 16];
        let w = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng);
        let mut ctx = RenderContext::new();
        ctx.forward(&batch, None, &cam, &settings)?;
        let grad = ctx.backward(&w)?;
        let loss = |b: &GaussianBatch| -> Result<f64> {
            let img = render_f64(b, &cam, &settings)?;
            Ok(img.iter().zip(w.data()).map(|(a, &b)| a * b as f64).sum())
        };
        for i in 0..batch.params.numel() {
            let mut p = batch.clone();
            let mut m = batch.clone();
            p.params.data_mut()[i] += H;
            m.params.data_mut()[i] -= H;
            let dx = p.params.data()[i] as f64 - m.params.data()[i] as f64;
            let fd = (loss(&p)? - loss(&m)?) / dx;
            let an = grad.data()[i] as f64;
            let denom = an.abs().max(fd.abs());
            errs.push(if denom == 0.0 { 0.0 } else { (an - fd).abs() / denom });
        }
    }
    let passing = errs.iter().filter(|&&e| e < 1e-2).count();
    let mut sorted = errs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(GradientReport {
        parameters: errs.len(),
        passing,
        fraction: passing as f64 / errs.len() as f64,
        median_rel_err: sorted[sorted.len() / 2],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CompositingReport {
    /// Colour at the shared centre pixel of a red half-opaque Gaussian in
    /// front of a blue one, on black.
    pub pixel: [f32; 3],
    /// Largest deviation of an empty render from its background.
    pub empty_max_abs_diff: f32,
}

fn unit_gaussian(mu: [f32; 3], scale: f32, opacity: f32, color: [f32; 3]) -> [f32; GAUSSIAN_WIDTH] {
    let mut r = [0.0f32; GAUSSIAN_WIDTH];
    r[col::MU..col::MU + 3].copy_from_slice(&mu);
    for k in 0..3 {
        r[col::ROT + 4 * k] = 1.0;
        r[col::SCALE + k] = scale;
    }
    r[col::OPACITY] = opacity;
    r[col::COLOR..col::COLOR + 3].copy_from_slice(&color);
    r
}

pub fn compositing_example() -> Result<CompositingReport> {
    let mut cam = axis_camera(20.0, 16);
    cam.cx = 8.5;
    cam.cy = 8.5;
    let rows = [
        unit_gaussian([0.0, 0.0, 3.0], 0.1, 0.5, [0.0, 0.0, 1.0]),
        unit_gaussian([0.0, 0.0, 2.0], 0.1, 0.5, [1.0, 0.0, 0.0]),
    ];
    let batch = GaussianBatch {
        params: Tensor::new(vec![2, GAUSSIAN_WIDTH], rows.concat())?,
        labels: vec![Label::Body, Label::Top],
    };
    let out = render(&batch, &cam, &RenderSettings::color([0.0; 3]))?;
    let hw = 16 * 16;
    let centre = 8 * 16 + 8;
    let pixel = [0, 1, 2].map(|c| out.image.data()[c * hw + centre]);
    let bg = [0.1, 0.2, 0.3];
    let empty = render(&GaussianBatch::empty(), &cam, &RenderSettings::color(bg))?;
    let mut empty_max_abs_diff = 0.0f32;
    for c in 0..4 {
        let want = if c < 3 { bg[c] } else { 0.0 };
        for &v in &empty.image.data()[c * hw..(c + 1) * hw] {
            empty_max_abs_diff = empty_max_abs_diff.max((v - want).abs());
        }
    }
    Ok(CompositingReport {
        pixel,
        empty_max_abs_diff,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DeformationReport {
    /// Largest row change when posing with the rest pose.
    pub rest_max_abs_diff: f32,
    /// Largest pixel difference between rendering rigidly moved Gaussians and
    /// rendering the originals from the inversely moved camera.
    pub rigid_max_abs_diff: f32,
    /// The same for a rotation of the root joint.
    pub root_max_abs_diff: f32,
}

/// Rest-pose identity and rigid equivariance of the deformation on the toy
/// template decoded from a zero plane.
pub fn deformation_checks(seed: u64) -> Result<DeformationReport> {
    use crate::body::{make_toy_model, BodyParams};
    use crate::deform::{deform_batch, DeformContext};
    use crate::math::rigid;
    use crate::plane::{gaussians_from_maps, DecoderConfig, Decoders, LayeredPlane};
    use crate::template::AvatarTemplate;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = AvatarTemplate::build(&make_toy_model(0), 1, 64)?;
    let model = &template.set.model;
    let dec = Decoders::new(DecoderConfig::default(), &mut rng);
    let batch = gaussians_from_maps(&dec.decode_maps(&LayeredPlane::zeros())?, &template.seeds)?;
    let rest = BodyParams::rest(model);
    let ctx = DeformContext::new(model, &rest, &template.seeds)?;
    let posed = deform_batch(&batch, &template.seeds, &rest, &ctx)?;
    let rest_max_abs_diff = posed.params.max_abs_diff(&batch.params);

    let cam = Camera::look_at(
        Vec3::new(0.3, 0.9, 3.0),
        Vec3::new(0.0, 0.9, 0.0),
        Vec3::y(),
        64.0 * 1.6,
        64,
        64,
    );
    let settings = RenderSettings::color([0.1, 0.2, 0.3]);
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let g = rigid(
        &rodrigues(&(axis.normalize() * rng.random_range(0.3..2.5))),
        &Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
    );
    let moved = deform_batch(&batch, &template.seeds, &rest, &DeformContext::uniform(g, batch.len()))?;
    let a = render(&moved, &cam, &settings)?;
    let b = render(&batch, &cam.compose(&g), &settings)?;
    let rigid_max_abs_diff = a.image.max_abs_diff(&b.image);

    let turn = rng.random_range(-1.5..1.5);
    let mut params = rest.clone();
    params.pose[0] = [0.0, turn, 0.0];
    let ctx = DeformContext::new(model, &params, &template.seeds)?;
    let root = model.skeleton(&params.betas)?[0];
    let r = rodrigues(&Vec3::new(0.0, turn as f64, 0.0));
    let g = rigid(&r, &(root - r * root));
    let a = render(&deform_batch(&batch, &template.seeds, &params, &ctx)?, &cam, &settings)?;
    let b = render(&batch, &cam.compose(&g), &settings)?;
    Ok(DeformationReport {
        rest_max_abs_diff,
        rigid_max_abs_diff,
        root_max_abs_diff: a.image.max_abs_diff(&b.image),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffusionReport {
    /// Largest `|α² + σ² − 1|` over the schedule.
    pub variance_max_err: f64,
    /// Largest error recovering x₀ and ε from (x_t, v).
    pub roundtrip_max_err: f32,
    /// Largest loss of a denoiser that returns the exact v.
    pub perfect_loss: f32,
}

/// Returns the exact v for a known clean sample.
struct OracleDenoiser {
    x0: Tensor,
    schedule: crate::diffusion::Schedule,
}

impl crate::diffusion::Denoiser for OracleDenoiser {
    fn params(&self) -> &[crate::tensor::Param] {
        &[]
    }
    fn params_mut(&mut self) -> &mut [crate::tensor::Param] {
        &mut []
    }
    fn plane_shape(&self) -> Vec<usize> {
        self.x0.shape().to_vec()
    }
    fn forward<'t>(&self, _: &[crate::tensor::Var<'t>], x_t: crate::tensor::Var<'t>, t: f32) -> Result<crate::tensor::Var<'t>> {
        let (a, s) = (self.schedule.alpha(t)? as f32, self.schedule.sigma(t)? as f32);
        let x0 = x_t.tape().constant(self.x0.clone());
        x_t.scale(a).sub(x0).map(|d| d.scale(1.0 / s))
    }
}

pub fn diffusion_checks(seed: u64) -> Result<DiffusionReport> {
    use crate::diffusion::{diffusion_loss, forward_diffuse, recover_noise, recover_x0, v_target, Schedule, DEFAULT_OMEGA};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = Schedule::default();
    let variance_max_err = (0..schedule.len())
        .map(|i| (schedule.alpha_at(i).powi(2) + schedule.sigma_at(i).powi(2) - 1.0).abs())
        .fold(0.0, f64::max);
    let mut roundtrip_max_err = 0.0f32;
    let mut perfect_loss = 0.0f32;
    for k in 0..20 {
        let t: f32 = if k == 0 { 1.0 } else { rng.random_range(0.0..=1.0) };
        let x0 = Tensor::randn(&[3, 8, 8], &mut rng);
        let eps = Tensor::randn(&[3, 8, 8], &mut rng);
        let xt = forward_diffuse(&x0, &eps, t, &schedule)?;
        let v = v_target(&x0, &eps, t, &schedule)?;
        roundtrip_max_err = roundtrip_max_err
            .max(recover_x0(&xt, &v, t, &schedule)?.max_abs_diff(&x0))
            .max(recover_noise(&xt, &v, t, &schedule)?.max_abs_diff(&eps));
        let oracle = OracleDenoiser {
            x0: x0.clone(),
            schedule: schedule.clone(),
        };
        let tape = crate::tensor::Tape::new();
        let loss = diffusion_loss(tape.leaf(x0), &oracle, &[], t, &eps, &schedule, DEFAULT_OMEGA)?;
        perfect_loss = perfect_loss.max(loss.item().abs());
    }
    Ok(DiffusionReport {
        variance_max_err,
        roundtrip_max_err,
        perfect_loss,
    })
}
