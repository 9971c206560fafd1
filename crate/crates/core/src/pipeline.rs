//! Joint fitting of per-subject planes, shared decoders and the denoiser, plus
//! component transfer and animation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{load_scene, scene_dirs, SceneManifest, TemplateOptions};
use crate::body::{BodyModel, BodyParams, Region};
use crate::deform::{deform_batch, pose_transform, warp_shape, DeformContext, PoseFrame};
use crate::diffusion::{self, ddpm_sample, diffusion_loss, DenoiserConfig, ToyDenoiser, DEFAULT_OMEGA};
use crate::losses::{
    maskin_loss, offset_loss, recon_loss, skin_color_or_default, skin_loss, smooth_loss, LossBreakdown, LossWeights,
    SceneTruth, ViewRenders, ViewTruth,
};
use crate::plane::{gaussians_from_maps, extract_gaussians, DecoderConfig, Decoders, LayeredPlane};
use crate::render::{col, render, render_subset, render_var, Camera, GaussianBatch, RenderMode, RenderOutput, RenderSettings, GAUSSIAN_WIDTH};
use crate::template::{AvatarTemplate, GaussianSeed, Label};
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, NamedTensors, Param, Tape, Tensor, Var};
use crate::{Error, Result};

/// Consecutive non-finite iterations tolerated before training aborts.
pub const MAX_FAILURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub scenes_per_iteration: usize,
    pub views_per_scene: usize,
    pub lr_plane: f32,
    pub lr_decoders: f32,
    pub lr_denoiser: f32,
    pub iterations: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Multiplier of the summed diffusion loss; `None` means one over the
    /// plane size, i.e. a per-element mean.
    pub diffusion_weight: Option<f32>,
    pub omega: f32,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// DDPM samples rendered into `samples/` with each checkpoint.
    pub samples: usize,
    pub sample_steps: usize,
    pub decoder: DecoderConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            scenes_per_iteration: 4,
            views_per_scene: 2,
            lr_plane: 0.04,
            lr_decoders: 1e-4,
            lr_denoiser: 1e-4,
            iterations: 2000,
            weights: LossWeights::default(),
            seed: 0,
            diffusion_weight: None,
            omega: DEFAULT_OMEGA,
            checkpoint_every: 0,
            samples: 0,
            sample_steps: 50,
            decoder: DecoderConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("fit config", msg.to_string()));
        if self.scenes_per_iteration == 0 || self.views_per_scene == 0 {
            return bad("scenes and views per iteration must be positive");
        }
        let rates = [self.lr_plane, self.lr_decoders, self.lr_denoiser];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.diffusion_weight.is_some_and(|w| !w.is_finite() || w < 0.0) {
            return bad("diffusion_weight must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return bad("omega must lie in [0, 1]");
        }
        if self.sample_steps == 0 {
            return bad("sample_steps must be positive");
        }
        self.weights.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::asset(path, e.to_string()))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::asset(path, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Avatars
// ---------------------------------------------------------------------------

/// One subject's plane and body coefficients, with a cache of its decoded
/// canonical Gaussians split by component.
#[derive(Clone, Debug)]
pub struct AvatarInstance {
    pub subject: String,
    pub plane: LayeredPlane,
    pub params: BodyParams,
    cache: Option<Vec<GaussianBatch>>,
}

impl PartialEq for AvatarInstance {
    fn eq(&self, other: &Self) -> bool {
        self.subject == other.subject && self.plane == other.plane && self.params == other.params
    }
}

impl AvatarInstance {
    pub fn new(subject: impl Into<String>, plane: LayeredPlane, params: BodyParams) -> Self {
        Self {
            subject: subject.into(),
            plane,
            params,
            cache: None,
        }
    }

    /// Canonical (unposed, unwarped) Gaussians of the whole avatar.
    pub fn decode(&self, decoders: &Decoders, template: &AvatarTemplate) -> Result<GaussianBatch> {
        let maps = decoders.decode_maps(&self.plane)?;
        gaussians_from_maps(&maps, &template.seeds)
    }

    /// Canonical Gaussians of each component, indexed by [`Label::index`].
    /// Concatenated in label order they are exactly [`Self::decode`].
    pub fn components(&mut self, decoders: &Decoders, template: &AvatarTemplate) -> Result<&[GaussianBatch]> {
        if self.cache.is_none() {
            let full = self.decode(decoders, template)?;
            let parts = template.ranges.iter().map(|r| slice_batch(&full, r.clone())).collect();
            self.cache = Some(parts);
        }
        Ok(self.cache.as_deref().unwrap())
    }

    /// Drops cached batches; call after editing the plane or the decoders.
    pub fn invalidate(&mut self) {
        self.cache = None;
    }

    /// Warped and posed Gaussians for `params` (the avatar's own shape and
    /// expression are used by callers that pass [`PoseFrame::resolve`]).
    pub fn posed(&self, decoders: &Decoders, template: &AvatarTemplate, params: &BodyParams) -> Result<GaussianBatch> {
        let canonical = self.decode(decoders, template)?;
        let ctx = DeformContext::new(&template.set.model, params, &template.seeds)?;
        deform_batch(&canonical, &template.seeds, params, &ctx)
    }

    pub fn named_tensors(&self) -> NamedTensors {
        let p = &self.params;
        let pose: Vec<f32> = p.pose.iter().flatten().copied().collect();
        vec![
            ("avatar.plane".into(), self.plane.0.clone()),
            ("avatar.betas".into(), Tensor::new(vec![p.betas.len()], p.betas.clone()).unwrap()),
            ("avatar.pose".into(), Tensor::new(vec![p.pose.len(), 3], pose).unwrap()),
            ("avatar.expr".into(), Tensor::new(vec![p.expr.len()], p.expr.clone()).unwrap()),
        ]
    }

    pub fn from_named(subject: impl Into<String>, named: &NamedTensors) -> Result<Self> {
        let get = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let plane = LayeredPlane::new(get("avatar.plane")?)?;
        let pose = get("avatar.pose")?;
        let params = BodyParams {
            betas: get("avatar.betas")?.into_data(),
            pose: pose.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            expr: get("avatar.expr")?.into_data(),
        };
        Ok(Self::new(subject, plane, params))
    }

    /// Self-contained checkpoint: the avatar plus the decoders it was fitted with.
    pub fn save(&self, decoders: &Decoders, path: impl AsRef<Path>) -> Result<()> {
        let mut named = self.named_tensors();
        named.extend(decoders.checkpoint_tensors());
        write_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Decoders)> {
        let path = path.as_ref();
        let named = read_checkpoint(path).map_err(|e| Error::asset(path, e.to_string()))?;
        let subject = path.file_stem().and_then(|s| s.to_str()).unwrap_or("avatar").to_string();
        Ok((Self::from_named(subject, &named)?, Decoders::from_named(&named)?))
    }
}

fn slice_batch(batch: &GaussianBatch, range: std::ops::Range<usize>) -> GaussianBatch {
    let rows = batch.params.data()[range.start * GAUSSIAN_WIDTH..range.end * GAUSSIAN_WIDTH].to_vec();
    GaussianBatch {
        params: Tensor::new(vec![range.len(), GAUSSIAN_WIDTH], rows).unwrap(),
        labels: batch.labels[range].to_vec(),
    }
}

/// Copies `label`'s UV island from `source` into a copy of `target`. The
/// target keeps its shape and expression, so the transferred component is
/// re-baked to the target body.
pub fn transfer_component(target: &AvatarInstance, source: &AvatarInstance, label: Label) -> Result<AvatarInstance> {
    if target.plane.0.shape() != source.plane.0.shape() {
        return Err(Error::ShapeMismatch {
            op: "transfer_component",
            lhs: target.plane.0.shape().to_vec(),
            rhs: source.plane.0.shape().to_vec(),
        });
    }
    let mut out = AvatarInstance::new(target.subject.clone(), target.plane.clone(), target.params.clone());
    out.plane.copy_box(&source.plane, label.layer(), label.uv_box());
    Ok(out)
}

/// [`transfer_component`] with the label given by name.
pub fn transfer_named(target: &AvatarInstance, source: &AvatarInstance, label: &str) -> Result<AvatarInstance> {
    transfer_component(target, source, label.parse()?)
}

/// Renders the avatar in `params` from `camera`.
pub fn render_avatar(
    avatar: &AvatarInstance,
    decoders: &Decoders,
    template: &AvatarTemplate,
    params: &BodyParams,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    render(&avatar.posed(decoders, template, params)?, camera, settings)
}

/// One render per frame; opacity and colour are decoded once and shared.
pub fn animate(
    avatar: &AvatarInstance,
    decoders: &Decoders,
    template: &AvatarTemplate,
    frames: &[PoseFrame],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Vec<RenderOutput>> {
    let canonical = avatar.decode(decoders, template)?;
    frames
        .iter()
        .map(|f| {
            let params = f.resolve(&avatar.params);
            let ctx = DeformContext::new(&template.set.model, &params, &template.seeds)?;
            render(&deform_batch(&canonical, &template.seeds, &params, &ctx)?, camera, settings)
        })
        .collect()
}

/// Builds the template a manifest asks for.
pub fn build_template(model: &BodyModel, opts: TemplateOptions) -> Result<AvatarTemplate> {
    AvatarTemplate::build(model, opts.subdivisions, opts.field_res)
}

/// Body seeds lying on hand faces; their silhouette locates skin in the images.
pub fn hand_seeds(template: &AvatarTemplate) -> Vec<usize> {
    let model = &template.set.model;
    let Some(regions) = &model.regions else { return Vec::new() };
    template
        .indices_of(Label::Body)
        .into_iter()
        .filter(|&i| {
            let f = model.faces[template.seeds[i].face];
            f.iter().all(|&v| regions[v as usize] == Region::Hand)
        })
        .collect()
}

/// Template seeds as opaque Gaussians, for geometry-only silhouettes.
fn seed_batch(seeds: &[GaussianSeed]) -> GaussianBatch {
    let mut rows = vec![0.0f32; seeds.len() * GAUSSIAN_WIDTH];
    for (i, s) in seeds.iter().enumerate() {
        let r = &mut rows[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
        r[col::MU..col::MU + 3].copy_from_slice(&s.mu0);
        r[col::ROT..col::ROT + 9].copy_from_slice(&s.r0);
        r[col::SCALE..col::SCALE + 3].copy_from_slice(&s.s0);
        r[col::OPACITY] = 1.0;
    }
    GaussianBatch {
        params: Tensor::new(vec![seeds.len(), GAUSSIAN_WIDTH], rows).unwrap(),
        labels: seeds.iter().map(|s| s.label).collect(),
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// A subject being fitted.
pub struct Subject {
    pub truth: SceneTruth,
    pub plane: Param,
    /// Skin colour estimated from the hand region of the training images.
    pub skin: [f32; 3],
    ctx: DeformContext,
}

impl Subject {
    pub fn avatar(&self) -> AvatarInstance {
        AvatarInstance::new(
            self.truth.subject.clone(),
            LayeredPlane(self.plane.value.clone()),
            self.truth.params.clone(),
        )
    }
}

/// Single-stage optimisation state.
pub struct Trainer {
    pub config: FitConfig,
    pub template: AvatarTemplate,
    pub decoders: Decoders,
    pub denoiser: ToyDenoiser,
    pub subjects: Vec<Subject>,
    pub iteration: usize,
    labels: Vec<Label>,
    components: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    failures: usize,
    adam_plane: Adam,
    adam_decoders: Adam,
    adam_denoiser: Adam,
}

impl Trainer {
    pub fn new(scenes: Vec<SceneTruth>, template: AvatarTemplate, config: FitConfig) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::invalid("fit", "no scenes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let decoders = Decoders::new(config.decoder, &mut rng);
        let denoiser = ToyDenoiser::new(config.denoiser.clone(), &mut rng);
        if denoiser.config.channels != LayeredPlane::SHAPE[0]
            || denoiser.config.height != LayeredPlane::SHAPE[1]
            || denoiser.config.width != LayeredPlane::SHAPE[2]
        {
            return Err(Error::invalid("fit", "denoiser plane shape differs from the layered plane"));
        }
        let hands = hand_seeds(&template);
        let seeds = seed_batch(&template.seeds);
        let mut subjects = Vec::with_capacity(scenes.len());
        for truth in scenes {
            for v in truth.views.iter().chain(&truth.heldout) {
                v.validate()?;
            }
            template.set.model.check_params(&truth.params)?;
            let ctx = DeformContext::new(&template.set.model, &truth.params, &template.seeds)?;
            let posed_seeds = deform_batch(&seeds, &template.seeds, &truth.params, &ctx)?;
            let mut hand_sils = Vec::with_capacity(truth.views.len());
            for v in &truth.views {
                let sil = render_subset(&posed_seeds, &hands, &v.camera, &RenderSettings::mode(RenderMode::Silhouette))?;
                let (h, w) = v.size();
                // only hand pixels the segmentation marks as visible body
                let body = &v.components[Label::Body.index()];
                let visible = sil.alpha().iter().zip(body.data()).map(|(&a, &m)| a * m).collect();
                hand_sils.push(Tensor::new(vec![h, w], visible)?);
            }
            let skin = skin_color_or_default(truth.views.iter().map(|v| &v.rgb).zip(&hand_sils));
            let name = format!("plane.{}", truth.subject);
            subjects.push(Subject {
                truth,
                plane: Param::new(name, LayeredPlane::zeros().0),
                skin,
                ctx,
            });
        }
        let labels = template.seeds.iter().map(|s| s.label).collect();
        let components = template.ranges.iter().map(|r| r.clone().collect()).collect();
        Ok(Self {
            adam_plane: Adam::new(config.lr_plane),
            adam_decoders: Adam::new(config.lr_decoders),
            adam_denoiser: Adam::new(config.lr_denoiser),
            config,
            template,
            decoders,
            denoiser,
            subjects,
            iteration: 0,
            labels,
            components,
            rng,
            failures: 0,
        })
    }

    /// Loads every scene under `root` and builds the template they share.
    pub fn from_dataset(root: impl AsRef<Path>, config: FitConfig) -> Result<Self> {
        let dirs = scene_dirs(&root)?;
        let first = crate::assets::manifest_path(&dirs[0]);
        let manifest = SceneManifest::load(&first)?;
        let model = manifest.body_model(first.parent().unwrap_or(Path::new(".")))?;
        let template = build_template(&model, manifest.template)?;
        let scenes = dirs.iter().map(load_scene).collect::<Result<Vec<_>>>()?;
        Self::new(scenes, template, config)
    }

    pub fn avatars(&self) -> Vec<AvatarInstance> {
        self.subjects.iter().map(Subject::avatar).collect()
    }

    /// Posed Gaussians of subject `i` under the current parameters.
    pub fn posed(&self, i: usize) -> Result<GaussianBatch> {
        let s = &self.subjects[i];
        let canonical = s.avatar().decode(&self.decoders, &self.template)?;
        deform_batch(&canonical, &self.template.seeds, &s.truth.params, &s.ctx)
    }

    /// Unweighted Huber colour loss of the full render, averaged over every
    /// training view of every subject. No gradients, no sampling.
    pub fn full_color_loss(&self) -> Result<f32> {
        let delta = self.config.weights.huber_delta;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (i, s) in self.subjects.iter().enumerate() {
            let posed = self.posed(i)?;
            for v in &s.truth.views {
                let out = render(&posed, &v.camera, &RenderSettings::color(s.truth.background))?;
                let n = v.rgb.numel();
                let loss: f64 = out.image.data()[..n]
                    .iter()
                    .zip(v.rgb.data())
                    .map(|(&a, &b)| crate::tensor::huber(a - b, delta) as f64)
                    .sum();
                sum += loss / n as f64;
                count += 1;
            }
        }
        Ok((sum / count as f64) as f32)
    }

    fn diffusion_weight(&self) -> f32 {
        let numel: usize = LayeredPlane::SHAPE.iter().product();
        self.config.diffusion_weight.unwrap_or(1.0 / numel as f32)
    }

    /// Renders needed by the losses of one view, from posed rows.
    fn view_renders<'t>(
        &self,
        rows: Var<'t>,
        view: &ViewTruth,
        background: [f32; 3],
    ) -> Result<(ViewRenders<'t>, Var<'t>, usize)> {
        let color = RenderSettings::color(background);
        let (full, mut skipped) = render_var(rows, &self.labels, None, &view.camera, &color)?;
        let mut components = Vec::with_capacity(Label::COUNT);
        for idx in &self.components {
            let (r, s) = render_var(rows, &self.labels, Some(idx), &view.camera, &color)?;
            skipped += s;
            components.push(Some(r));
        }
        let (segmentation, s) =
            render_var(rows, &self.labels, None, &view.camera, &RenderSettings::mode(RenderMode::Segmentation))?;
        skipped += s;
        let body = &self.components[Label::Body.index()];
        let (body_sil, s) = render_var(
            rows,
            &self.labels,
            Some(body),
            &view.camera,
            &RenderSettings::mode(RenderMode::SilhouetteDetached),
        )?;
        skipped += s;
        let renders = ViewRenders {
            full,
            components,
            segmentation,
        };
        Ok((renders, body_sil, skipped))
    }

    /// One optimisation step. A non-finite loss or gradient leaves every
    /// parameter untouched and returns a breakdown with `skipped` set;
    /// [`MAX_FAILURES`] of those in a row abort training.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.iteration += 1;
        let cfg = &self.config;
        let w = cfg.weights;
        let n_scenes = self.subjects.len();
        let chosen: Vec<usize> = if n_scenes <= cfg.scenes_per_iteration {
            (0..n_scenes).collect()
        } else {
            let mut c = sample(&mut self.rng, n_scenes, cfg.scenes_per_iteration).into_vec();
            c.sort_unstable();
            c
        };
        let mut draws = Vec::with_capacity(chosen.len());
        for &s in &chosen {
            let nv = self.subjects[s].truth.views.len();
            let mut views = sample(&mut self.rng, nv, cfg.views_per_scene.min(nv)).into_vec();
            views.sort_unstable();
            let t: f32 = self.rng.random_range(0.0..=1.0);
            let noise = Tensor::randn(&LayeredPlane::SHAPE, &mut self.rng);
            draws.push((s, views, t, noise));
        }

        let tape = Tape::new();
        let bound_dec = self.decoders.bind(&tape, true);
        let bound_den = diffusion::bind_params(&self.denoiser, &tape, true);
        let mut planes = Vec::with_capacity(draws.len());
        let mut stats = Vec::new();
        let mut log = LossBreakdown {
            iteration: self.iteration,
            ..LossBreakdown::default()
        };
        let mut total: Option<Var> = None;
        let scene_share = 1.0 / draws.len() as f32;
        let dw = self.diffusion_weight();
        for (s, views, t, noise) in &draws {
            let subject = &self.subjects[*s];
            let plane = tape.leaf(subject.plane.value.clone());
            planes.push(plane);
            let (maps, st) = self.decoders.decode(&bound_dec, plane, true)?;
            stats.extend(st);
            let canonical = extract_gaussians(maps, &self.template.seeds)?;
            let offset = offset_loss(canonical, &self.template.seeds, w.offset)?;
            let smooth = smooth_loss(maps, w.smooth)?;
            let warped = warp_shape(canonical, &self.template.seeds, &subject.truth.params)?;
            let posed = pose_transform(warped, &subject.ctx)?;
            let diff = diffusion_loss(plane, &self.denoiser, &bound_den, *t, noise, &self.denoiser.schedule, cfg.omega)?
                .scale(dw);
            let mut scene_total = offset.add(smooth)?.add(diff)?;
            log.offset += offset.item() * scene_share;
            log.smooth += smooth.item() * scene_share;
            log.diffusion += diff.item() * scene_share;
            let view_share = 1.0 / views.len() as f32;
            for &v in views {
                let truth = &subject.truth.views[v];
                let (renders, body_sil, skipped) = self.view_renders(posed, truth, subject.truth.background)?;
                log.skipped_gaussians += skipped;
                let recon = recon_loss(&renders, truth, &w, None)?;
                let maskin = maskin_loss(body_sil, &truth.foreground, w.maskin)?;
                let body_rgb = renders.components[Label::Body.index()].unwrap().narrow(0, 0, 3)?;
                let skin = skin_loss(body_rgb, &truth.occluded_mask(), subject.skin, w.skin, w.huber_delta)?;
                let share = scene_share * view_share;
                log.color += recon.color.item() * share;
                log.mask += recon.mask.item() * share;
                log.seg += recon.seg.item() * share;
                log.maskin += maskin.item() * share;
                log.skin += skin.item() * share;
                let view_total = recon.total()?.add(maskin)?.add(skin)?.scale(view_share);
                scene_total = scene_total.add(view_total)?;
            }
            let scaled = scene_total.scale(scene_share);
            total = Some(match total {
                Some(acc) => acc.add(scaled)?,
                None => scaled,
            });
        }
        let total = total.expect("at least one scene");
        log.total = total.item();

        let grads = if log.total.is_finite() { Some(tape.backward(total)?) } else { None };
        let finite = grads.as_ref().is_some_and(|g| {
            planes.iter().all(|&p| g.get(p).is_none_or(Tensor::is_finite))
                && bound_dec.vars().all(|v| g.get(v).is_none_or(Tensor::is_finite))
                && bound_den.iter().all(|&v| g.get(v).is_none_or(Tensor::is_finite))
        });
        let Some(grads) = grads.filter(|_| finite) else {
            self.failures += 1;
            log.skipped = true;
            log::warn!("iteration {}: non-finite loss or gradient, step skipped", self.iteration);
            if self.failures >= MAX_FAILURES {
                return Err(Error::TrainingAborted(format!(
                    "{MAX_FAILURES} consecutive non-finite iterations (last at {})",
                    self.iteration
                )));
            }
            return Ok(log);
        };
        self.failures = 0;

        for ((s, ..), &p) in draws.iter().zip(&planes) {
            let subject = &mut self.subjects[*s];
            if let Some(g) = grads.get(p) {
                subject.plane.set_grad(g.clone())?;
                subject.plane.apply(&mut self.adam_plane)?;
            }
        }
        self.decoders.accumulate_grads(&grads, &bound_dec)?;
        for p in self.decoders.params_mut() {
            p.apply(&mut self.adam_decoders)?;
        }
        self.decoders.finish_step(&stats);
        diffusion::accumulate_grads(&mut self.denoiser, &grads, &bound_den)?;
        for p in diffusion::Denoiser::params_mut(&mut self.denoiser) {
            p.apply(&mut self.adam_denoiser)?;
        }
        Ok(log)
    }

    /// Saves decoders, denoiser and every avatar under `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let dec = self.decoders.checkpoint_tensors();
        write_checkpoint(dir.join("decoders.lavt"), dec.iter().map(|(n, t)| (n.as_str(), t)))?;
        let den = self.denoiser.named_tensors();
        write_checkpoint(dir.join("denoiser.lavt"), den.iter().map(|(n, t)| (n.as_str(), t)))?;
        for s in &self.subjects {
            s.avatar().save(&self.decoders, dir.join(format!("{}.lavt", s.truth.subject)))?;
        }
        Ok(())
    }

    /// Samples planes from the denoiser and renders each in the rest pose of
    /// the first subject from its first view.
    pub fn write_samples(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let first = &self.subjects[0];
        let rest = BodyParams::rest(&self.template.set.model);
        let camera = &first.truth.views[0].camera;
        for k in 0..self.config.samples {
            let seed = self.config.seed.wrapping_add(1_000_003 * (self.iteration as u64) + k as u64);
            let plane = ddpm_sample(&self.denoiser, &self.denoiser.schedule, self.config.sample_steps, seed)?;
            let avatar = AvatarInstance::new(format!("sample{k}"), LayeredPlane::new(plane)?, rest.clone());
            let out = render_avatar(
                &avatar,
                &self.decoders,
                &self.template,
                &rest,
                camera,
                &RenderSettings::color(first.truth.background),
            )?;
            crate::render::save_png(&out.image, dir.join(format!("iter_{}_sample_{k}.png", self.iteration)))?;
        }
        Ok(())
    }
}

/// Writes `config.json`, appends one JSON line per iteration to
/// `losses.jsonl` and saves checkpoints under `checkpoints/iter_N/`.
pub struct RunDir {
    pub root: PathBuf,
    losses: std::io::BufWriter<std::fs::File>,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>, config: &FitConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("samples"))?;
        let mut text = serde_json::to_string_pretty(config)?;
        text.push('\n');
        std::fs::write(root.join("config.json"), text)?;
        let losses = std::io::BufWriter::new(std::fs::File::create(root.join("losses.jsonl"))?);
        Ok(Self { root, losses })
    }

    pub fn log(&mut self, entry: &LossBreakdown) -> Result<()> {
        serde_json::to_writer(&mut self.losses, entry)?;
        self.losses.write_all(b"\n")?;
        Ok(())
    }

    pub fn checkpoint_dir(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration}"))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.losses.flush()?;
        Ok(())
    }
}

/// Runs `trainer.config.iterations` steps, logging each and checkpointing on
/// the configured period and at the end. Returns the per-iteration log.
pub fn fit(trainer: &mut Trainer, run: Option<&mut RunDir>) -> Result<Vec<LossBreakdown>> {
    let mut run = run;
    let iterations = trainer.config.iterations;
    let every = trainer.config.checkpoint_every;
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let entry = trainer.step()?;
        if trainer.iteration % 100 == 0 || trainer.iteration == 1 {
            log::info!(
                "iteration {}: total {:.5} color {:.5} diffusion {:.5}",
                entry.iteration,
                entry.total,
                entry.color,
                entry.diffusion
            );
        }
        if let Some(run) = run.as_deref_mut() {
            run.log(&entry)?;
            let last = trainer.iteration == iterations;
            if last || (every > 0 && trainer.iteration % every == 0) {
                run.flush()?;
                trainer.save_checkpoint(run.checkpoint_dir(trainer.iteration))?;
                trainer.write_samples(run.root.join("samples"))?;
            }
        }
        history.push(entry);
    }
    if let Some(run) = run {
        run.flush()?;
    }
    Ok(history)
}
