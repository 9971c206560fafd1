//! Reconstruction, constraint and regulariser terms on hand-built images.

use lavatar_core::losses::*;
use lavatar_core::math::Vec3;
use lavatar_core::render::{col, render_var, Camera, RenderMode, RenderSettings, GAUSSIAN_WIDTH};
use lavatar_core::template::Label;
use lavatar_core::tensor::{Tape, Tensor, Var};
use lavatar_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 8;
const W: usize = 10;

fn camera(w: usize, h: usize) -> Camera {
    Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y(), w as f64, w, h)
}

/// Top half foreground: left quarter body, rest top; one top pixel is hair.
fn truth() -> ViewTruth {
    let mut seg = vec![SEG_BACKGROUND; H * W];
    let mut fg = Tensor::zeros(&[H, W]);
    for y in 0..H / 2 {
        for x in 0..W {
            let p = y * W + x;
            fg.data_mut()[p] = 1.0;
            seg[p] = if x < W / 4 { Label::Body.index() as u8 } else { Label::Top.index() as u8 };
        }
    }
    seg[W + 6] = Label::Hair.index() as u8;
    let rgb = Tensor::from_fn(&[3, H, W], |i| ((i * 37) % 11) as f32 / 10.0);
    ViewTruth::new(camera(W, H), rgb, fg, seg).unwrap()
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let c: usize = parts.iter().map(|t| t.numel() / (H * W)).sum();
    Tensor::new(vec![c, H, W], data).unwrap()
}

/// Renders that reproduce the truth exactly.
fn perfect<'t>(tape: &'t Tape, t: &ViewTruth) -> ViewRenders<'t> {
    let full = tape.leaf(stack(&[&t.rgb, &t.foreground]));
    let components = Label::ALL
        .iter()
        .map(|l| Some(tape.leaf(stack(&[&t.rgb, &t.components[l.index()]]))))
        .collect();
    let segmentation = tape.leaf(stack(&[&t.seg_one_hot(), &t.foreground]));
    ViewRenders {
        full,
        components,
        segmentation,
    }
}

fn total(terms: &ReconTerms<'_>) -> f32 {
    terms.total().unwrap().item()
}

#[test]
fn matching_renders_cost_nothing() {
    let t = truth();
    let tape = Tape::new();
    let r = perfect(&tape, &t);
    let terms = recon_loss(&r, &t, &LossWeights::default(), None).unwrap();
    assert_eq!(total(&terms), 0.0);
}

#[test]
fn white_against_black_is_the_linear_huber_branch() {
    let (h, w) = (4, 4);
    let black = ViewTruth::new(camera(w, h), Tensor::zeros(&[3, h, w]), Tensor::zeros(&[h, w]), vec![SEG_BACKGROUND; h * w]).unwrap();
    let tape = Tape::new();
    let mut white = Tensor::ones(&[4, h, w]);
    white.data_mut()[3 * h * w..].fill(0.0);
    let r = ViewRenders {
        full: tape.leaf(white.clone()),
        components: Label::ALL.iter().map(|_| Some(tape.leaf(white.clone()))).collect(),
        segmentation: tape.leaf(Tensor::zeros(&[6, h, w])),
    };
    let terms = recon_loss(&r, &black, &LossWeights::color_only(), None).unwrap();
    let want = HUBER_DELTA * (1.0 - HUBER_DELTA / 2.0) * 18.0;
    assert!((want - 1.71).abs() < 1e-6);
    assert!((total(&terms) - want).abs() < 1e-5, "{}", total(&terms));
}

#[test]
fn each_weight_scales_its_term() {
    let t = truth();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let noisy = |c: usize, rng: &mut ChaCha8Rng| tape.leaf(Tensor::rand_uniform(&[c, H, W], 0.0, 1.0, rng));
    let r = ViewRenders {
        full: noisy(4, &mut rng),
        components: Label::ALL.iter().map(|_| Some(noisy(4, &mut rng))).collect(),
        segmentation: noisy(6, &mut rng),
    };
    let base = LossWeights::default();
    let a = recon_loss(&r, &t, &base, None).unwrap();
    let doubled = LossWeights {
        color: 2.0 * base.color,
        mask: 2.0 * base.mask,
        seg: 2.0 * base.seg,
        ..base
    };
    let b = recon_loss(&r, &t, &doubled, None).unwrap();
    assert_eq!(b.color.item(), 2.0 * a.color.item());
    assert_eq!(b.mask.item(), 2.0 * a.mask.item());
    assert_eq!(b.seg.item(), 2.0 * a.seg.item());
    assert!(a.color.item() > 0.0 && a.mask.item() > 0.0 && a.seg.item() > 0.0);
}

#[test]
fn missing_component_render_is_an_error() {
    let t = truth();
    let tape = Tape::new();
    let mut r = perfect(&tape, &t);
    r.components[Label::Shoes.index()] = None;
    match recon_loss(&r, &t, &LossWeights::default(), None) {
        Err(Error::MissingRender(name)) => assert_eq!(name, "shoes"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

struct MeanHook;

impl PerceptualHook for MeanHook {
    fn loss<'t>(&self, render: Var<'t>, target: &Tensor) -> lavatar_core::Result<Var<'t>> {
        Ok(render.sub(render.tape().constant(target.clone()))?.square().mean())
    }
}

#[test]
fn perceptual_hook_is_weighted_and_optional() {
    let t = truth();
    let tape = Tape::new();
    let mut r = perfect(&tape, &t);
    r.full = tape.leaf(stack(&[&Tensor::zeros(&[3, H, W]), &t.foreground]));
    let w = LossWeights::zero();
    assert!(recon_loss(&r, &t, &w, Some(&MeanHook)).unwrap().perceptual.is_none());
    let w = LossWeights { perceptual: 0.05, ..w };
    let terms = recon_loss(&r, &t, &w, Some(&MeanHook)).unwrap();
    let want = 0.05 * t.rgb.data().iter().map(|v| v * v).sum::<f32>() / t.rgb.numel() as f32;
    assert!((terms.perceptual.unwrap().item() - want).abs() < 1e-6);
}

/// Rows of `n` random Gaussians in front of [`camera`].
fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut rows = Tensor::zeros(&[n, GAUSSIAN_WIDTH]);
    for i in 0..n {
        let r = &mut rows.data_mut()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
        r[col::MU] = rng.random_range(-1.0..1.0);
        r[col::MU + 1] = rng.random_range(-0.8..0.8);
        r[col::MU + 2] = rng.random_range(-0.5..0.5);
        for k in 0..3 {
            r[col::ROT + 4 * k] = 1.0;
            r[col::SCALE + k] = rng.random_range(0.15..0.4);
            r[col::COLOR + k] = rng.random_range(0.0..1.0);
        }
        r[col::OPACITY] = rng.random_range(0.3..0.9);
    }
    rows
}

#[test]
fn loss_decreases_along_the_negative_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (w, h) = (24, 20);
    let cam = camera(w, h);
    let n = 12;
    let labels: Vec<Label> = (0..n).map(|i| Label::from_index(i % Label::COUNT).unwrap()).collect();
    let settings = RenderSettings::color([0.0; 3]);
    // ground truth rendered from another random scene
    let (rgb, fg) = {
        let tape = Tape::new();
        let rows = tape.constant(random_rows(&mut rng, n));
        let img = render_var(rows, &labels, None, &cam, &settings).unwrap().0.value();
        let fg: Vec<f32> = img.data()[3 * w * h..].iter().map(|&a| f32::from(a > 0.5)).collect();
        (
            Tensor::new(vec![3, h, w], img.data()[..3 * w * h].to_vec()).unwrap(),
            Tensor::new(vec![h, w], fg).unwrap(),
        )
    };
    let seg: Vec<u8> = fg.data().iter().map(|&f| if f > 0.0 { 0 } else { SEG_BACKGROUND }).collect();
    let truth = ViewTruth::new(cam.clone(), rgb, fg, seg).unwrap();
    let start = random_rows(&mut rng, n);
    let weights = LossWeights::default();
    let eval = |x: &Tensor, want_grad: bool| -> (f32, Option<Tensor>) {
        let tape = Tape::new();
        let rows = tape.leaf(x.clone());
        let (full, _) = render_var(rows, &labels, None, &cam, &settings).unwrap();
        let components = Label::ALL
            .iter()
            .map(|l| {
                let subset: Vec<usize> = (0..n).filter(|&i| labels[i] == *l).collect();
                Some(render_var(rows, &labels, Some(&subset), &cam, &settings).unwrap().0)
            })
            .collect();
        let (segmentation, _) = render_var(rows, &labels, None, &cam, &RenderSettings::mode(RenderMode::Segmentation)).unwrap();
        let r = ViewRenders { full, components, segmentation };
        let loss = recon_loss(&r, &truth, &weights, None).unwrap().total().unwrap();
        let grad = want_grad.then(|| tape.backward(loss).unwrap().get_or_zeros(rows));
        (loss.item(), grad)
    };
    let (l0, g) = eval(&start, true);
    let g = g.unwrap();
    let norm = g.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm > 0.0);
    let mut prev = l0;
    for step in [1e-4f32, 2e-4, 4e-4] {
        let moved = Tensor::new(start.shape().to_vec(), start.data().iter().zip(g.data()).map(|(x, d)| x - step * d / norm).collect()).unwrap();
        let (l, _) = eval(&moved, false);
        assert!(l < prev, "step {step}: {l} !< {prev}");
        prev = l;
    }
}

#[test]
fn maskin_is_zero_inside_the_foreground() {
    let t = truth();
    let tape = Tape::new();
    let mut inside = t.foreground.clone();
    inside.data_mut()[3] = 0.0;
    let l = maskin_loss(tape.leaf(inside.reshape(&[1, H, W]).unwrap()), &t.foreground, 5.0).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn maskin_is_weighted_violating_area() {
    let t = truth();
    let tape = Tape::new();
    // whole top half plus two extra rows of background covered
    let mut sil = t.foreground.clone();
    sil.data_mut()[(H / 2) * W..(H / 2 + 2) * W].fill(1.0);
    let l = maskin_loss(tape.leaf(sil), &t.foreground, 5.0).unwrap();
    let f = (2 * W) as f32 / (H * W) as f32;
    assert!((l.item() - 5.0 * f).abs() < 1e-6);
}

#[test]
fn maskin_has_no_opacity_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h) = (16, 16);
    let cam = camera(w, h);
    let n = 6;
    let rows = random_rows(&mut rng, n);
    let labels = vec![Label::Body; n];
    let fg = Tensor::from_fn(&[h, w], |p| f32::from(p % w < w / 2));
    let settings = RenderSettings::mode(RenderMode::SilhouetteDetached);
    let eval = |x: &Tensor| -> f32 {
        let tape = Tape::new();
        let (sil, _) = render_var(tape.constant(x.clone()), &labels, None, &cam, &settings).unwrap();
        maskin_loss(sil, &fg, 5.0).unwrap().item()
    };
    let tape = Tape::new();
    let x = tape.leaf(rows.clone());
    let (sil, _) = render_var(x, &labels, None, &cam, &settings).unwrap();
    let loss = maskin_loss(sil, &fg, 5.0).unwrap();
    assert!(loss.item() > 0.0);
    let g = tape.backward(loss).unwrap().get_or_zeros(x);
    for i in 0..n {
        let k = i * GAUSSIAN_WIDTH + col::OPACITY;
        assert_eq!(g.data()[k], 0.0);
        let (mut p, mut m) = (rows.clone(), rows.clone());
        p.data_mut()[k] += 0.05;
        m.data_mut()[k] -= 0.05;
        assert_eq!(eval(&p), eval(&m));
    }
    // geometry does receive gradient
    assert!((0..n).any(|i| g.data()[i * GAUSSIAN_WIDTH + col::MU] != 0.0));
}

#[test]
fn skin_loss_cases() {
    let t = truth();
    let m_oc = t.occluded_mask();
    let skin = [0.7, 0.5, 0.4];
    let tape = Tape::new();
    let exact = Tensor::from_fn(&[3, H, W], |i| skin[i / (H * W)]);
    assert_eq!(skin_loss(tape.leaf(exact), &m_oc, skin, 0.5, HUBER_DELTA).unwrap().item(), 0.0);
    let c0 = [0.2, 0.55, 0.4];
    let constant = Tensor::from_fn(&[3, H, W], |i| c0[i / (H * W)]);
    let l = skin_loss(tape.leaf(constant.clone()), &m_oc, skin, 0.5, HUBER_DELTA).unwrap().item();
    let huber = |d: f32| if d.abs() <= HUBER_DELTA { 0.5 * d * d } else { HUBER_DELTA * (d.abs() - 0.5 * HUBER_DELTA) };
    let want = 0.5 * (0..3).map(|c| huber(c0[c] - skin[c])).sum::<f32>() / 3.0;
    assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    let empty = Tensor::zeros(&[H, W]);
    assert_eq!(skin_loss(tape.leaf(constant), &empty, skin, 0.5, HUBER_DELTA).unwrap().item(), 0.0);
}

#[test]
fn occluded_mask_is_the_exterior_union() {
    let t = truth();
    let m = t.occluded_mask();
    for p in 0..H * W {
        let exterior = t.segmentation[p] != SEG_BACKGROUND && t.segmentation[p] != 0;
        assert_eq!(m.data()[p], f32::from(exterior));
    }
}

#[test]
fn skin_color_averages_hand_pixels() {
    let t = truth();
    let mut sil = Tensor::zeros(&[H, W]);
    sil.data_mut()[0] = 0.9;
    sil.data_mut()[1] = 0.6;
    sil.data_mut()[2] = 0.5;
    let c = skin_color(&t.rgb, &sil).unwrap();
    for k in 0..3 {
        let want = (t.rgb.data()[k * H * W] + t.rgb.data()[k * H * W + 1]) / 2.0;
        assert!((c[k] - want).abs() < 1e-6);
    }
    assert_eq!(skin_color(&t.rgb, &Tensor::zeros(&[H, W])), None);
    let empty = Tensor::zeros(&[H, W]);
    assert_eq!(skin_color_or_default([(&t.rgb, &empty)]), DEFAULT_SKIN_COLOR);
}

#[test]
fn tv_of_constant_maps_is_zero() {
    let tape = Tape::new();
    let c = tape.leaf(Tensor::full(&[3, 2, 6, 6], 0.37));
    assert_eq!(total_variation(c).unwrap().item(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::rand_uniform(&[2, 5, 7], 0.0, 1.0, &mut rng);
    let shifted = x.map(|v| v + 0.25);
    let a = total_variation(tape.leaf(x)).unwrap().item();
    let b = total_variation(tape.leaf(shifted)).unwrap().item();
    assert!((a - b).abs() < 1e-6);
}

#[test]
fn tv_of_a_step_edge() {
    let (h, w, step) = (6, 9, 0.4f32);
    let map = Tensor::from_fn(&[h, w], |i| if i % w >= 4 { step } else { 0.0 });
    let tape = Tape::new();
    let tv = total_variation(tape.leaf(map)).unwrap().item();
    let pairs = h * (w - 1) + (h - 1) * w;
    let want = h as f32 * step * step / pairs as f32;
    assert!((tv - want).abs() < 1e-7);
}

#[test]
fn tv_does_not_cross_layers() {
    // two maps, each constant, but different: no neighbour differences
    let tape = Tape::new();
    let maps = Tensor::from_fn(&[2, 4, 4], |i| (i / 16) as f32);
    assert_eq!(total_variation(tape.leaf(maps)).unwrap().item(), 0.0);
}

#[test]
fn tv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (8, 8);
    let x = Tensor::rand_uniform(&[h, w], 0.0, 1.0, &mut rng);
    // f64 oracle of the same functional
    let tv = |v: &[f64]| -> f64 {
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                if xx + 1 < w {
                    s += (v[y * w + xx + 1] - v[y * w + xx]).powi(2);
                }
                if y + 1 < h {
                    s += (v[(y + 1) * w + xx] - v[y * w + xx]).powi(2);
                }
            }
        }
        s / (h * (w - 1) + (h - 1) * w) as f64
    };
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = total_variation(v).unwrap();
    let g = tape.backward(loss).unwrap().get_or_zeros(v);
    let base: Vec<f64> = x.data().iter().map(|&a| a as f64).collect();
    let hh = 1e-3;
    for i in 0..h * w {
        let (mut p, mut m) = (base.clone(), base.clone());
        p[i] += hh;
        m[i] -= hh;
        let fd = (tv(&p) - tv(&m)) / (2.0 * hh);
        let an = g.data()[i] as f64;
        assert!((an - fd).abs() / fd.abs().max(1e-12) < 1e-4, "{i}: {an} vs {fd}");
    }
}

#[test]
fn offset_loss_is_mean_squared_displacement() {
    let seeds: Vec<_> = {
        let avatar = lavatar_core::template::AvatarTemplate::build(&lavatar_core::body::make_toy_model(0), 0, 16).unwrap();
        avatar.seeds.into_iter().take(3).collect()
    };
    let mut rows = Tensor::zeros(&[3, GAUSSIAN_WIDTH]);
    for (i, s) in seeds.iter().enumerate() {
        for k in 0..3 {
            rows.data_mut()[i * GAUSSIAN_WIDTH + col::MU + k] = s.mu0[k] + if i == 1 { 0.03 } else { 0.0 };
        }
    }
    let tape = Tape::new();
    let l = offset_loss(tape.leaf(rows.clone()), &seeds, 5.0).unwrap().item();
    assert!((l - 5.0 * 3.0 * 0.03f32.powi(2) / 3.0).abs() < 1e-7, "{l}");
    let smooth = smooth_loss(tape.leaf(Tensor::full(&[3, 13, 4, 4], 0.5)), 0.5).unwrap().item();
    assert_eq!(smooth, 0.0);
}

#[test]
fn truth_validation_rejects_bad_inputs() {
    let t = truth();
    let mut bad = t.clone();
    bad.foreground.data_mut()[0] = 0.5;
    assert!(bad.validate().is_err());
    let mut bad = t.clone();
    bad.segmentation[H * W - 1] = 0; // labelled background pixel
    assert!(bad.validate().is_err());
    assert!(ViewTruth::new(camera(W, H), Tensor::zeros(&[3, H, W + 1]), t.foreground.clone(), t.segmentation.clone()).is_err());
    // component masks partition the foreground
    let union: Vec<f32> = (0..H * W).map(|p| t.components.iter().map(|m| m.data()[p]).sum()).collect();
    assert_eq!(union, t.foreground.data());
    assert!(LossWeights { skin: -1.0, ..LossWeights::default() }.validate().is_err());
}
