use std::path::PathBuf;
use std::sync::OnceLock;

use lavatar_core::assets::{load_scene, make_toy_scene, ToySceneOptions};
use lavatar_core::body::{make_toy_model, BodyParams};
use lavatar_core::deform::PoseFrame;
use lavatar_core::diffusion::{bind_params, diffusion_loss};
use lavatar_core::losses::{LossBreakdown, LossWeights, SceneTruth};
use lavatar_core::math::{rigid, rodrigues, Vec3};
use lavatar_core::pipeline::{
    animate, build_template, fit, hand_seeds, render_avatar, transfer_component, transfer_named, AvatarInstance,
    FitConfig, RunDir, Trainer,
};
use lavatar_core::plane::{extract_gaussians, DecoderConfig, Decoders, LayeredPlane};
use lavatar_core::render::{render, render_subset, render_var, RenderSettings};
use lavatar_core::template::{AvatarTemplate, Label};
use lavatar_core::tensor::{Tape, Tensor};
use lavatar_core::deform::{pose_transform, warp_shape, DeformContext};
use lavatar_core::{assets::TemplateOptions, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    scene: SceneTruth,
    template: AvatarTemplate,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pipeline_toy");
        let opts = ToySceneOptions {
            seed: 3,
            views: 3,
            size: 32,
            ..ToySceneOptions::default()
        };
        make_toy_scene(&dir, &opts).unwrap();
        let scene = load_scene(&dir).unwrap();
        let template = build_template(&make_toy_model(0), TemplateOptions::default()).unwrap();
        Fixture { scene, template }
    })
}

fn trainer(config: FitConfig) -> Trainer {
    let f = fixture();
    Trainer::new(vec![f.scene.clone()], f.template.clone(), config).unwrap()
}

fn random_plane(seed: u64, std: f32) -> LayeredPlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayeredPlane(Tensor::randn(&LayeredPlane::SHAPE, &mut rng).map(|v| v * std))
}

fn decoders() -> Decoders {
    Decoders::new(DecoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(11))
}

fn snapshot(t: &Trainer) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = t.subjects.iter().map(|s| s.plane.value.clone()).collect();
    out.extend(t.decoders.params().map(|p| p.value.clone()));
    out.extend(lavatar_core::diffusion::Denoiser::params(&t.denoiser).iter().map(|p| p.value.clone()));
    out
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut t = trainer(FitConfig {
        lr_plane: 0.0,
        lr_decoders: 0.0,
        lr_denoiser: 0.0,
        ..FitConfig::default()
    });
    let before = snapshot(&t);
    let log = t.step().unwrap();
    assert!(!log.skipped && log.total.is_finite() && log.total > 0.0);
    assert_eq!(snapshot(&t), before);
}

#[test]
fn diffusion_gradient_reaches_the_plane() {
    let t = trainer(FitConfig::default());
    let plane = random_plane(1, 0.5).0;
    let noise = Tensor::randn(&LayeredPlane::SHAPE, &mut ChaCha8Rng::seed_from_u64(2));
    let schedule = &t.denoiser.schedule;
    let loss_at = |p: &Tensor| {
        let tape = Tape::new();
        let params = bind_params(&t.denoiser, &tape, false);
        diffusion_loss(tape.constant(p.clone()), &t.denoiser, &params, 0.3, &noise, schedule, 0.5)
            .unwrap()
            .item() as f64
    };
    let tape = Tape::new();
    let params = bind_params(&t.denoiser, &tape, false);
    let x0 = tape.leaf(plane.clone());
    let loss = diffusion_loss(x0, &t.denoiser, &params, 0.3, &noise, schedule, 0.5).unwrap();
    let grad = tape.backward(loss).unwrap().get(x0).unwrap().clone();
    let norm = grad.data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    // central difference along the normalised gradient equals its norm
    let h = 1e-2;
    let step = |s: f64| {
        let data = plane.data().iter().zip(grad.data()).map(|(&p, &g)| p + (s * g as f64 / norm) as f32).collect();
        Tensor::new(plane.shape().to_vec(), data).unwrap()
    };
    let fd = (loss_at(&step(h)) - loss_at(&step(-h))) / (2.0 * h);
    assert!((fd - norm).abs() <= 2e-2 * norm, "fd {fd} vs analytic {norm}");
}

#[test]
fn diffusion_only_step_moves_the_plane() {
    let mut t = trainer(FitConfig {
        weights: LossWeights::zero(),
        diffusion_weight: Some(1.0),
        ..FitConfig::default()
    });
    t.subjects[0].plane.value = random_plane(3, 0.5).0;
    let before = t.subjects[0].plane.value.clone();
    let dec_before: Vec<Tensor> = t.decoders.params().map(|p| p.value.clone()).collect();
    t.step().unwrap();
    assert!(t.subjects[0].plane.value.max_abs_diff(&before) > 0.0);
    // decoders see no gradient from the diffusion term alone
    let dec_after: Vec<Tensor> = t.decoders.params().map(|p| p.value.clone()).collect();
    assert_eq!(dec_before, dec_after);
}

#[test]
fn gradients_flow_through_warp_and_pose_to_the_plane() {
    let f = fixture();
    let dec = decoders();
    let seeds = &f.template.seeds;
    let labels: Vec<Label> = seeds.iter().map(|s| s.label).collect();
    let params = &f.scene.params;
    let ctx = DeformContext::new(&f.template.set.model, params, seeds).unwrap();
    let view = &f.scene.views[0];
    let settings = RenderSettings {
        cutoff: false,
        ..RenderSettings::color(f.scene.background)
    };
    let weights = Tensor::rand_uniform(&[4, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let plane = random_plane(5, 0.3).0;
    let eval = |p: &Tensor, grad: bool| {
        let tape = Tape::new();
        let bound = dec.bind(&tape, false);
        let leaf = tape.leaf(p.clone());
        let (maps, _) = dec.decode(&bound, leaf, false).unwrap();
        let rows = extract_gaussians(maps, seeds).unwrap();
        let posed = pose_transform(warp_shape(rows, seeds, params).unwrap(), &ctx).unwrap();
        let (img, _) = render_var(posed, &labels, None, &view.camera, &settings).unwrap();
        let loss = img.mul(tape.constant(weights.clone())).unwrap().sum();
        let value = loss.item() as f64;
        let g = grad.then(|| tape.backward(loss).unwrap().get(leaf).unwrap().clone());
        (value, g)
    };
    let (_, grad) = eval(&plane, true);
    let grad = grad.unwrap();
    let norm = grad.data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    let h = 1e-2;
    let step = |s: f64| {
        let data = plane.data().iter().zip(grad.data()).map(|(&p, &g)| p + (s * g as f64 / norm) as f32).collect();
        Tensor::new(plane.shape().to_vec(), data).unwrap()
    };
    let fd = (eval(&step(h), false).0 - eval(&step(-h), false).0) / (2.0 * h);
    assert!((fd - norm).abs() <= 3e-2 * norm, "fd {fd} vs analytic {norm}");
}

#[test]
fn fixed_seed_is_deterministic_across_thread_counts() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut t = trainer(FitConfig {
                seed: 7,
                ..FitConfig::default()
            });
            let logs: Vec<LossBreakdown> = (0..2).map(|_| t.step().unwrap()).collect();
            (logs, t.subjects[0].plane.value.clone())
        })
    };
    let (la, pa) = run(1);
    let (lb, pb) = run(3);
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn color_only_fitting_still_descends() {
    let mut t = trainer(FitConfig {
        weights: LossWeights::color_only(),
        diffusion_weight: Some(0.0),
        views_per_scene: 3,
        ..FitConfig::default()
    });
    let before = t.full_color_loss().unwrap();
    for _ in 0..6 {
        t.step().unwrap();
    }
    let after = t.full_color_loss().unwrap();
    assert!(after < before, "colour loss {before} → {after}");
}

#[test]
fn non_finite_steps_are_skipped_then_abort() {
    let mut t = trainer(FitConfig::default());
    t.subjects[0].plane.value.data_mut()[0] = f32::NAN;
    let before = snapshot(&t);
    for _ in 0..2 {
        let log = t.step().unwrap();
        assert!(log.skipped);
        let after = snapshot(&t);
        // NaN != NaN, so compare bit patterns
        let bits = |v: &[Tensor]| v.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&after), bits(&before));
    }
    assert!(matches!(t.step(), Err(Error::TrainingAborted(_))));
}

#[test]
fn skin_colour_is_estimated_from_the_hands() {
    let f = fixture();
    assert!(!hand_seeds(&f.template).is_empty());
    let t = trainer(FitConfig::default());
    let skin = t.subjects[0].skin;
    let want = [0.86, 0.64, 0.52];
    for k in 0..3 {
        assert!((skin[k] - want[k]).abs() < 0.08, "skin {skin:?}");
    }
}

fn avatars() -> (AvatarInstance, AvatarInstance) {
    let f = fixture();
    let a = AvatarInstance::new("a", random_plane(21, 0.8), f.scene.params.clone());
    let mut pb = f.scene.params.clone();
    pb.betas.iter_mut().for_each(|b| *b = -*b);
    let b = AvatarInstance::new("b", random_plane(22, 0.8), pb);
    (a, b)
}

#[test]
fn self_transfer_is_the_identity() {
    let (a, _) = avatars();
    for l in Label::ALL {
        assert_eq!(transfer_component(&a, &a, l).unwrap(), a);
    }
}

#[test]
fn transfer_overwrites_only_the_island() {
    let f = fixture();
    let dec = decoders();
    let (a, b) = avatars();
    for label in [Label::Hair, Label::Top] {
        let moved = transfer_component(&a, &b, label).unwrap();
        assert_eq!(moved.params, a.params);
        let (da, db, dm) = (
            a.decode(&dec, &f.template).unwrap(),
            b.decode(&dec, &f.template).unwrap(),
            moved.decode(&dec, &f.template).unwrap(),
        );
        assert_eq!(dm.labels, da.labels);
        for l in Label::ALL {
            let range = f.template.ranges[l.index()].clone();
            let rows = |x: &lavatar_core::render::GaussianBatch| (range.clone()).flat_map(|i| x.row(i).to_vec()).collect::<Vec<f32>>();
            if l == label {
                assert_eq!(rows(&dm), rows(&db), "{l} should come from the source");
            } else {
                assert_eq!(rows(&dm), rows(&da), "{l} should be untouched");
            }
        }
        // overwrite semantics: transferring back restores the original
        assert_eq!(transfer_component(&moved, &a, label).unwrap(), a);
    }
}

#[test]
fn transfer_changes_pixels_only_under_the_component() {
    let f = fixture();
    let dec = decoders();
    let (a, b) = avatars();
    let label = Label::Top;
    let moved = transfer_component(&a, &b, label).unwrap();
    let settings = RenderSettings::color(f.scene.background);
    let idx = f.template.indices_of(label);
    for view in &f.scene.views {
        let pa = a.posed(&dec, &f.template, &a.params).unwrap();
        let pm = moved.posed(&dec, &f.template, &moved.params).unwrap();
        let ra = render(&pa, &view.camera, &settings).unwrap();
        let rm = render(&pm, &view.camera, &settings).unwrap();
        let sa = render_subset(&pa, &idx, &view.camera, &RenderSettings::mode(lavatar_core::render::RenderMode::Silhouette)).unwrap();
        let sm = render_subset(&pm, &idx, &view.camera, &RenderSettings::mode(lavatar_core::render::RenderMode::Silhouette)).unwrap();
        let hw = 32 * 32;
        let mut outside = 0;
        let mut changed_inside = 0;
        for p in 0..hw {
            let covered = sa.alpha()[p] > 0.0 || sm.alpha()[p] > 0.0;
            let diff = (0..4).map(|c| (ra.image.data()[c * hw + p] - rm.image.data()[c * hw + p]).abs()).fold(0.0, f32::max);
            if covered {
                changed_inside += usize::from(diff > 0.0);
            } else {
                outside += 1;
                assert!(diff <= 1e-6, "pixel {p} outside the component changed by {diff}");
            }
        }
        assert!(outside > 0 && changed_inside > 0);
    }
}

#[test]
fn unknown_label_is_rejected() {
    let (a, b) = avatars();
    assert!(matches!(transfer_named(&a, &b, "cape"), Err(Error::UnknownLabel(_))));
    assert_eq!(transfer_named(&a, &b, "hair").unwrap(), transfer_component(&a, &b, Label::Hair).unwrap());
}

#[test]
fn component_cache_partitions_the_avatar() {
    let f = fixture();
    let dec = decoders();
    let (a, b) = avatars();
    for avatar in [a.clone(), transfer_component(&a, &b, Label::Shoes).unwrap()] {
        let mut avatar = avatar;
        let full = avatar.decode(&dec, &f.template).unwrap();
        let parts = avatar.components(&dec, &f.template).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (l, part) in Label::ALL.iter().zip(parts) {
            assert!(part.labels.iter().all(|x| x == l));
            rows.extend_from_slice(part.params.data());
            labels.extend_from_slice(&part.labels);
        }
        assert_eq!(rows, full.params.data());
        assert_eq!(labels, full.labels);
    }
}

#[test]
fn avatar_checkpoint_round_trips() {
    let dec = decoders();
    let (a, _) = avatars();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.lavt");
    a.save(&dec, &path).unwrap();
    let (back, dec2) = AvatarInstance::load(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(dec2.named_tensors(), dec.named_tensors());
}

#[test]
fn animation_frames() {
    let f = fixture();
    let dec = decoders();
    let (a, _) = avatars();
    let cam = &f.scene.views[0].camera;
    let settings = RenderSettings::color(f.scene.background);
    let rest = PoseFrame {
        pose: a.params.pose.clone(),
        betas: None,
        expr: None,
    };
    let frames = animate(&a, &dec, &f.template, &[rest.clone(), rest.clone(), rest], cam, &settings).unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!(frames[0].image, frames[1].image);
    assert_eq!(frames[1].image, frames[2].image);

    // turning the root is the same as orbiting the camera the other way
    let model = &f.template.set.model;
    let root = model.skeleton(&a.params.betas).unwrap()[0];
    let angles = [0.4f32, -0.9];
    let seq: Vec<PoseFrame> = angles
        .iter()
        .map(|&t| {
            let mut pose = a.params.pose.clone();
            pose[0] = [0.0, t, 0.0];
            PoseFrame { pose, betas: None, expr: None }
        })
        .collect();
    let frames = animate(&a, &dec, &f.template, &seq, cam, &settings).unwrap();
    let still = a.posed(&dec, &f.template, &a.params).unwrap();
    for (frame, &t) in frames.iter().zip(&angles) {
        let r = rodrigues(&Vec3::new(0.0, t as f64, 0.0));
        let g = rigid(&r, &(root - r * root));
        let orbit = render(&still, &cam.compose(&g), &settings).unwrap();
        let diff = frame.image.max_abs_diff(&orbit.image);
        assert!(diff <= 1e-4, "L∞ {diff}");
    }
}

#[test]
fn render_avatar_matches_posed_render() {
    let f = fixture();
    let dec = decoders();
    let (a, _) = avatars();
    let cam = &f.scene.views[1].camera;
    let settings = RenderSettings::color([0.0; 3]);
    let mut params = BodyParams::rest(&f.template.set.model);
    params.betas = a.params.betas.clone();
    let out = render_avatar(&a, &dec, &f.template, &params, cam, &settings).unwrap();
    let want = render(&a.posed(&dec, &f.template, &params).unwrap(), cam, &settings).unwrap();
    assert_eq!(out.image, want.image);
}

#[test]
fn run_directory_layout() {
    let mut t = trainer(FitConfig {
        iterations: 2,
        samples: 1,
        sample_steps: 2,
        ..FitConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::create(dir.path(), &t.config).unwrap();
    let history = fit(&mut t, Some(&mut run)).unwrap();
    assert_eq!(history.len(), 2);
    let config: FitConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config, t.config);
    let lines: Vec<LossBreakdown> = std::fs::read_to_string(dir.path().join("losses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, history);
    let ck = dir.path().join("checkpoints").join("iter_2");
    for name in ["decoders.lavt", "denoiser.lavt", &format!("{}.lavt", t.subjects[0].truth.subject)] {
        assert!(ck.join(name).is_file(), "missing {name}");
    }
    assert!(dir.path().join("samples").join("iter_2_sample_0.png").is_file());
}

#[test]
fn config_validation() {
    assert!(FitConfig::default().validate().is_ok());
    assert!(FitConfig { views_per_scene: 0, ..FitConfig::default() }.validate().is_err());
    assert!(FitConfig { lr_plane: -1.0, ..FitConfig::default() }.validate().is_err());
    assert!(FitConfig { omega: 2.0, ..FitConfig::default() }.validate().is_err());
    let weights = LossWeights { huber_delta: 0.0, ..LossWeights::default() };
    assert!(FitConfig { weights, ..FitConfig::default() }.validate().is_err());
    let text = serde_json::to_string(&FitConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<FitConfig>(&text).unwrap(), FitConfig::default());
    // partial JSON fills in the defaults
    let partial: FitConfig = serde_json::from_str(r#"{"iterations": 5}"#).unwrap();
    assert_eq!(partial.iterations, 5);
    assert_eq!(partial.lr_plane, 0.04);
}
