use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lavatar_core::assets::{
    export_ply, label_map, make_toy_scene, manifest_path, write_mask, write_segmentation, PlyFormat, SceneManifest,
    ToySceneOptions,
};
use lavatar_core::body::BodyParams;
use lavatar_core::checks;
use lavatar_core::deform::load_pose_sequence;
use lavatar_core::diffusion::{ddpm_sample, ToyDenoiser};
use lavatar_core::pipeline::{
    animate, build_template, fit, render_avatar, transfer_named, AvatarInstance, FitConfig, RunDir, Trainer,
};
use lavatar_core::plane::{Decoders, LayeredPlane};
use lavatar_core::render::{render_subset, save_png, Camera, RenderMode, RenderSettings};
use lavatar_core::template::{AvatarTemplate, Label};
use lavatar_core::tensor::{read_checkpoint, Tensor};

#[derive(Parser)]
#[command(name = "lavatar", version, about = "Layered Gaussian avatars: fitting, rendering, transfer and sampling")]
struct Cli {
    /// Random seed (overrides the seed of a fit config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-view scene with exact masks.
    MakeToyScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Salt-noise rate for the segmentation of the first `noisy-views` views.
        #[arg(long, default_value_t = 0.0)]
        mask_noise: f32,
        #[arg(long, default_value_t = 0)]
        noisy_views: usize,
    },
    /// Fit avatars, decoders and denoiser to every scene under a directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Run directory for config, loss log, checkpoints and samples.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// JSON fit configuration; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render an avatar from one of a scene's cameras.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Use the held-out cameras instead of the training ones.
        #[arg(long)]
        heldout: bool,
        #[arg(long, value_enum, default_value_t = Mode::Color)]
        mode: Mode,
        /// Render only this component (body, hair, top, bottom, shoes).
        #[arg(long)]
        component: Option<String>,
        /// Rest pose instead of the fitted pose.
        #[arg(long)]
        rest: bool,
    },
    /// Render an avatar through a JSON pose sequence.
    Animate {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Copy one component from a source avatar into a target avatar.
    Transfer {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw planes from a trained denoiser and render them.
    Sample {
        /// A `checkpoints/iter_N` directory of a run.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Write an avatar's Gaussians as a PLY point cloud.
    ExportPly {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
        /// Unposed canonical Gaussians instead of the fitted pose.
        #[arg(long)]
        canonical: bool,
    },
    /// Run a self-check suite.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Color,
    Silhouette,
    Segmentation,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    Renderer,
    Gradients,
    Deformation,
    Diffusion,
    All,
}

/// Bad input from the command line; exits with status 1.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use lavatar_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument { .. }
                | E::ShapeMismatch { .. }
                | E::CoefficientMismatch { .. }
                | E::MissingRegions(_)
                | E::UnknownLabel(_)
                | E::TimeOutOfRange(_)
                | E::Checkpoint(_)
                | E::Asset { .. }
                | E::ImageDecode { .. }
                | E::Json(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::MakeToyScene {
            out,
            views,
            size,
            mask_noise,
            noisy_views,
        } => {
            if views == 0 || size < 8 {
                return Err(invalid("need at least one view of at least 8 pixels"));
            }
            if !(0.0..=1.0).contains(&mask_noise) || noisy_views > 2 {
                return Err(invalid("mask noise must lie in [0, 1] on at most two views"));
            }
            let opts = ToySceneOptions {
                seed: seed.unwrap_or(0),
                views,
                size,
                mask_noise,
                noisy_views,
            };
            let manifest = make_toy_scene(&out, &opts)?;
            log::info!("wrote {} ({} views) to {}", manifest.subject, manifest.views.len(), out.display());
        }
        Command::Fit {
            data,
            out,
            iters,
            config,
        } => {
            let mut cfg = match config {
                Some(path) => FitConfig::load(path)?,
                None => FitConfig::default(),
            };
            if let Some(n) = iters {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let mut trainer = Trainer::from_dataset(&data, cfg)?;
            let mut run = RunDir::create(&out, &trainer.config)?;
            let history = fit(&mut trainer, Some(&mut run))?;
            if let Some(last) = history.last() {
                log::info!("finished {} iterations: total {:.5} color {:.5}", last.iteration, last.total, last.color);
            }
        }
        Command::Render {
            avatar,
            data,
            out,
            view,
            heldout,
            mode,
            component,
            rest,
        } => {
            let scene = SceneContext::load(&data)?;
            let (avatar, decoders) = AvatarInstance::load(&avatar)?;
            let camera = scene.camera(view, heldout)?;
            let params = if rest { rest_params(&avatar, &scene.template) } else { avatar.params.clone() };
            let settings = match mode {
                Mode::Color => RenderSettings::color(scene.manifest.background),
                Mode::Silhouette => RenderSettings::mode(RenderMode::Silhouette),
                Mode::Segmentation => RenderSettings::mode(RenderMode::Segmentation),
            };
            let output = match component {
                Some(name) => {
                    let label: Label = name.parse()?;
                    let posed = avatar.posed(&decoders, &scene.template, &params)?;
                    render_subset(&posed, &posed.indices_of(label), &camera, &settings)?
                }
                None => render_avatar(&avatar, &decoders, &scene.template, &params, &camera, &settings)?,
            };
            let (h, w) = (camera.height, camera.width);
            match mode {
                Mode::Color => save_png(&output.image, &out)?,
                Mode::Silhouette => write_mask(&Tensor::new(vec![h, w], output.alpha().to_vec())?, &out)?,
                Mode::Segmentation => write_segmentation(&label_map(&output, output.alpha()), w, h, &out)?,
            }
        }
        Command::Animate {
            avatar,
            data,
            poses,
            out,
            view,
        } => {
            let scene = SceneContext::load(&data)?;
            let (avatar, decoders) = AvatarInstance::load(&avatar)?;
            let frames = load_pose_sequence(&poses)?;
            let camera = scene.camera(view, false)?;
            let settings = RenderSettings::color(scene.manifest.background);
            let renders = animate(&avatar, &decoders, &scene.template, &frames, &camera, &settings)?;
            std::fs::create_dir_all(&out)?;
            for (i, r) in renders.iter().enumerate() {
                save_png(&r.image, out.join(format!("frame_{i:04}.png")))?;
            }
            log::info!("wrote {} frames to {}", renders.len(), out.display());
        }
        Command::Transfer {
            target,
            source,
            label,
            out,
        } => {
            let (target, decoders) = AvatarInstance::load(&target)?;
            let (source, source_decoders) = AvatarInstance::load(&source)?;
            if decoders.named_tensors() != source_decoders.named_tensors() {
                log::warn!("source and target were fitted with different decoders; keeping the target's");
            }
            let moved = transfer_named(&target, &source, &label)?;
            moved.save(&decoders, &out)?;
        }
        Command::Sample {
            checkpoint,
            data,
            out,
            count,
            steps,
        } => {
            if steps == 0 {
                return Err(invalid("--steps must be positive"));
            }
            let scene = SceneContext::load(&data)?;
            let decoders = Decoders::from_named(&read_named(&checkpoint.join("decoders.lavt"))?)?;
            let denoiser = ToyDenoiser::from_named(&read_named(&checkpoint.join("denoiser.lavt"))?)?;
            let camera = scene.camera(0, false)?;
            let rest = BodyParams::rest(&scene.template.set.model);
            let settings = RenderSettings::color(scene.manifest.background);
            std::fs::create_dir_all(&out)?;
            let base = seed.unwrap_or(0);
            for k in 0..count {
                let plane = ddpm_sample(&denoiser, &denoiser.schedule, steps, base.wrapping_add(k as u64))?;
                let avatar = AvatarInstance::new(format!("sample_{k}"), LayeredPlane::new(plane)?, rest.clone());
                avatar.save(&decoders, out.join(format!("sample_{k}.lavt")))?;
                let img = render_avatar(&avatar, &decoders, &scene.template, &rest, &camera, &settings)?;
                save_png(&img.image, out.join(format!("sample_{k}.png")))?;
            }
        }
        Command::ExportPly {
            avatar,
            data,
            out,
            binary,
            canonical,
        } => {
            let scene = SceneContext::load(&data)?;
            let (avatar, decoders) = AvatarInstance::load(&avatar)?;
            let batch = if canonical {
                avatar.decode(&decoders, &scene.template)?
            } else {
                avatar.posed(&decoders, &scene.template, &avatar.params)?
            };
            let format = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
            export_ply(&batch, &out, format)?;
        }
        Command::Check { suite } => {
            if !run_checks(suite, seed.unwrap_or(0))? {
                anyhow::bail!("check suite failed");
            }
        }
    }
    Ok(())
}

fn read_named(path: &Path) -> Result<lavatar_core::tensor::NamedTensors> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

/// Avatar's own shape and expression in the rest pose.
fn rest_params(avatar: &AvatarInstance, template: &AvatarTemplate) -> BodyParams {
    BodyParams {
        pose: BodyParams::rest(&template.set.model).pose,
        ..avatar.params.clone()
    }
}

/// Manifest, cameras and template of a scene directory.
struct SceneContext {
    manifest: SceneManifest,
    template: AvatarTemplate,
}

impl SceneContext {
    fn load(data: &Path) -> Result<Self> {
        let path = manifest_path(data);
        let manifest = SceneManifest::load(&path)?;
        let model = manifest.body_model(path.parent().unwrap_or(Path::new(".")))?;
        let template = build_template(&model, manifest.template)?;
        Ok(Self { manifest, template })
    }

    fn camera(&self, view: usize, heldout: bool) -> Result<Camera> {
        let views = if heldout { &self.manifest.heldout } else { &self.manifest.views };
        views
            .get(view)
            .map(|v| v.camera.clone())
            .ok_or_else(|| invalid(format!("view {view} out of range ({} available)", views.len())))
    }
}

fn report(name: &str, pass: bool, detail: impl serde::Serialize) -> bool {
    let detail = serde_json::to_string(&detail).unwrap_or_default();
    println!("{name}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn run_checks(suite: Suite, seed: u64) -> Result<bool> {
    let all = suite == Suite::All;
    let mut ok = true;
    if all || suite == Suite::Renderer {
        let eq = checks::renderer_equivalence(seed, 20)?;
        ok &= report("renderer equivalence", eq.max_abs_diff <= 1e-5, &eq);
        let comp = checks::compositing_example()?;
        ok &= report(
            "compositing",
            comp.pixel == [0.5, 0.0, 0.25] && comp.empty_max_abs_diff == 0.0,
            &comp,
        );
    }
    if all || suite == Suite::Gradients {
        let g = checks::renderer_gradients(seed, 4)?;
        ok &= report("render gradients", g.fraction >= 0.95, &g);
    }
    if all || suite == Suite::Deformation {
        let d = checks::deformation_checks(seed)?;
        let pass = d.rest_max_abs_diff <= 1e-6 && d.rigid_max_abs_diff <= 1e-4 && d.root_max_abs_diff <= 1e-4;
        ok &= report("deformation", pass, &d);
    }
    if all || suite == Suite::Diffusion {
        let d = checks::diffusion_checks(seed)?;
        let pass = d.variance_max_err <= 1e-6 && d.roundtrip_max_err <= 1e-5 && d.perfect_loss <= 1e-10;
        ok &= report("diffusion", pass, &d);
    }
    Ok(ok)
}
