//! Fitting objective: Huber reconstruction of full, per-component and
//! segmentation renders, the body-inside-foreground and skin-colour
//! constraints, and offset / total-variation regularisers.
//!
//! Every term is a per-pixel (or per-Gaussian) mean so weights do not depend on
//! resolution.

use crate::render::{col, Camera};
use crate::template::{GaussianSeed, Label};
use crate::tensor::{CustomOp, Tensor, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Huber transition in [0, 1] intensity units.
pub const HUBER_DELTA: f32 = 0.1;

/// Skin colour used when no hand pixels are visible.
pub const DEFAULT_SKIN_COLOR: [f32; 3] = [0.8, 0.6, 0.5];

/// Segmentation value of background pixels.
pub const SEG_BACKGROUND: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub color: f32,
    pub mask: f32,
    pub perceptual: f32,
    pub seg: f32,
    pub maskin: f32,
    pub skin: f32,
    pub offset: f32,
    pub smooth: f32,
    /// Huber transition point, in [0, 1] pixel units.
    pub huber_delta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 18.0,
            mask: 9.0,
            perceptual: 0.05,
            seg: 9.0,
            maskin: 5.0,
            skin: 0.5,
            offset: 5.0,
            smooth: 0.5,
            huber_delta: HUBER_DELTA,
        }
    }
}

impl LossWeights {
    /// Every weight zero except colour.
    pub fn color_only() -> Self {
        Self {
            color: 18.0,
            ..Self::zero()
        }
    }

    pub fn zero() -> Self {
        Self {
            color: 0.0,
            mask: 0.0,
            perceptual: 0.0,
            seg: 0.0,
            maskin: 0.0,
            skin: 0.0,
            offset: 0.0,
            smooth: 0.0,
            huber_delta: HUBER_DELTA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.color, self.mask, self.perceptual, self.seg, self.maskin, self.skin, self.offset, self.smooth];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights", format!("weights must be non-negative: {self:?}")));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::invalid("loss weights", format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        Ok(())
    }
}

/// Pluggable image-feature loss between a colour render `[3, H, W]` and its target.
pub trait PerceptualHook {
    fn loss<'t>(&self, render: Var<'t>, target: &Tensor) -> Result<Var<'t>>;
}

/// Ground truth for one view. Masks are `[H, W]` in {0, 1}; the segmentation
/// holds a label index per foreground pixel and [`SEG_BACKGROUND`] elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTruth {
    pub camera: Camera,
    pub rgb: Tensor,
    pub foreground: Tensor,
    pub segmentation: Vec<u8>,
    /// Visible silhouette of each component, indexed by [`Label::index`].
    pub components: Vec<Tensor>,
}

impl ViewTruth {
    /// Builds a view whose component masks are the segmentation classes.
    pub fn new(camera: Camera, rgb: Tensor, foreground: Tensor, segmentation: Vec<u8>) -> Result<Self> {
        let components = component_masks(&segmentation, foreground.shape())?;
        let view = Self {
            camera,
            rgb,
            foreground,
            segmentation,
            components,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.foreground.shape()[0], self.foreground.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.camera.height, self.camera.width);
        let check = |t: &Tensor, want: Vec<usize>| -> Result<()> {
            if t.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "view truth",
                    lhs: t.shape().to_vec(),
                    rhs: want,
                });
            }
            Ok(())
        };
        check(&self.rgb, vec![3, h, w])?;
        check(&self.foreground, vec![h, w])?;
        if self.components.len() != Label::COUNT {
            return Err(Error::invalid("view truth", format!("{} component masks", self.components.len())));
        }
        for m in &self.components {
            check(m, vec![h, w])?;
        }
        if self.segmentation.len() != h * w {
            return Err(Error::invalid("view truth", "segmentation size differs from the image"));
        }
        let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.foreground) || !self.components.iter().all(binary) {
            return Err(Error::invalid("view truth", "masks must be binary"));
        }
        for (p, &s) in self.segmentation.iter().enumerate() {
            let fg = self.foreground.data()[p] == 1.0;
            if s != SEG_BACKGROUND && (s as usize >= Label::COUNT || !fg) {
                return Err(Error::invalid("view truth", format!("segmentation value {s} at pixel {p}")));
            }
        }
        Ok(())
    }

    /// `[5, H, W]` one-hot segmentation; background pixels are all zero.
    pub fn seg_one_hot(&self) -> Tensor {
        let (h, w) = self.size();
        let mut out = Tensor::zeros(&[Label::COUNT, h, w]);
        for (p, &s) in self.segmentation.iter().enumerate() {
            if (s as usize) < Label::COUNT {
                out.data_mut()[s as usize * h * w + p] = 1.0;
            }
        }
        out
    }

    /// Pixels covered by any exterior component: where the body is hidden.
    pub fn occluded_mask(&self) -> Tensor {
        let (h, w) = self.size();
        let mut out = Tensor::zeros(&[h, w]);
        for l in Label::ALL.into_iter().filter(|l| l.is_exterior()) {
            for (o, &m) in out.data_mut().iter_mut().zip(self.components[l.index()].data()) {
                *o = o.max(m);
            }
        }
        for (o, &f) in out.data_mut().iter_mut().zip(self.foreground.data()) {
            *o *= f;
        }
        out
    }
}

/// Everything known about one subject: body parameters of the captured pose,
/// training views and optional held-out views.
#[derive(Clone, Debug)]
pub struct SceneTruth {
    pub subject: String,
    pub params: crate::body::BodyParams,
    pub background: [f32; 3],
    pub views: Vec<ViewTruth>,
    pub heldout: Vec<ViewTruth>,
}

/// Per-label masks of a segmentation map.
pub fn component_masks(segmentation: &[u8], shape: &[usize]) -> Result<Vec<Tensor>> {
    if shape.len() != 2 || segmentation.len() != shape[0] * shape[1] {
        return Err(Error::invalid("component_masks", format!("segmentation of {} for {shape:?}", segmentation.len())));
    }
    Ok(Label::ALL
        .iter()
        .map(|l| {
            let data = segmentation.iter().map(|&s| f32::from(s as usize == l.index())).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        })
        .collect())
}

/// Renders of one view needed by the reconstruction loss. Colour renders are
/// `[4, H, W]` (rgb + alpha), the segmentation render `[6, H, W]`.
pub struct ViewRenders<'t> {
    pub full: Var<'t>,
    pub components: Vec<Option<Var<'t>>>,
    pub segmentation: Var<'t>,
}

/// Weighted reconstruction terms of one view.
pub struct ReconTerms<'t> {
    pub color: Var<'t>,
    pub mask: Var<'t>,
    pub seg: Var<'t>,
    pub perceptual: Option<Var<'t>>,
}

impl<'t> ReconTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        let t = self.color.add(self.mask)?.add(self.seg)?;
        match self.perceptual {
            Some(p) => t.add(p),
            None => Ok(t),
        }
    }
}

fn split_color(render: Var<'_>, h: usize, w: usize) -> Result<(Var<'_>, Var<'_>)> {
    let shape = render.shape();
    if shape != [4, h, w] {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: shape,
            rhs: vec![4, h, w],
        });
    }
    Ok((render.narrow(0, 0, 3)?, render.narrow(0, 3, 1)?.reshape(&[h, w])?))
}

/// Huber colour + mask of the full render, the same pair per component (colour
/// where the component is visible, mask wherever no other component hides
/// it), and Huber of the segmentation render against the one-hot map.
pub fn recon_loss<'t>(
    renders: &ViewRenders<'t>,
    truth: &ViewTruth,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualHook>,
) -> Result<ReconTerms<'t>> {
    let tape = renders.full.tape();
    let (h, w) = truth.size();
    let c = |t: &Tensor| tape.constant(t.clone());
    let delta = weights.huber_delta;
    let rgb = c(&truth.rgb);
    let fg = c(&truth.foreground);

    let (full_rgb, full_alpha) = split_color(renders.full, h, w)?;
    let mut color = full_rgb.huber(rgb, delta)?.mean();
    let mut mask = full_alpha.huber(fg, delta)?.mean();
    if renders.components.len() != Label::COUNT {
        return Err(Error::MissingRender(format!("{} of {} components", renders.components.len(), Label::COUNT)));
    }
    for l in Label::ALL {
        let render = renders.components[l.index()].ok_or_else(|| Error::MissingRender(l.to_string()))?;
        let (comp_rgb, comp_alpha) = split_color(render, h, w)?;
        let visible = &truth.components[l.index()];
        let valid = truth.foreground.data().iter().zip(visible.data()).map(|(&f, &v)| 1.0 - (f - v)).collect();
        let valid = c(&Tensor::new(vec![h, w], valid)?);
        let visible = c(visible);
        color = color.add(comp_rgb.huber(rgb, delta)?.mul(visible)?.mean())?;
        mask = mask.add(comp_alpha.huber(visible, delta)?.mul(valid)?.mean())?;
    }

    let seg_shape = renders.segmentation.shape();
    if seg_shape != [Label::COUNT + 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: seg_shape,
            rhs: vec![Label::COUNT + 1, h, w],
        });
    }
    let seg_probs = renders.segmentation.narrow(0, 0, Label::COUNT)?;
    let seg = seg_probs.huber(c(&truth.seg_one_hot()), delta)?.mean();

    let perceptual = match perceptual {
        Some(hook) if weights.perceptual > 0.0 => Some(hook.loss(full_rgb, &truth.rgb)?.scale(weights.perceptual)),
        _ => None,
    };
    Ok(ReconTerms {
        color: color.scale(weights.color),
        mask: mask.scale(weights.mask),
        seg: seg.scale(weights.seg),
        perceptual,
    })
}

fn as_image<'t>(sil: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let s = sil.shape();
    let n: usize = s.iter().product();
    if n != shape.iter().product::<usize>() || (s.len() == 3 && s[0] != 1) {
        return Err(Error::ShapeMismatch {
            op: "silhouette",
            lhs: s,
            rhs: shape.to_vec(),
        });
    }
    sil.reshape(shape)
}

/// `λ · mean(max(0, silhouette − M_fg))` over a silhouette rendered with
/// detached, unit opacity.
pub fn maskin_loss<'t>(silhouette: Var<'t>, foreground: &Tensor, weight: f32) -> Result<Var<'t>> {
    let sil = as_image(silhouette, foreground.shape())?;
    let fg = sil.tape().constant(foreground.clone());
    Ok(sil.sub(fg)?.relu().mean().scale(weight))
}

/// `λ · mean over M_oc of Huber(body rgb − C_skin)`; zero when M_oc is empty.
pub fn skin_loss<'t>(body_rgb: Var<'t>, occluded: &Tensor, skin: [f32; 3], weight: f32, delta: f32) -> Result<Var<'t>> {
    let tape = body_rgb.tape();
    let (h, w) = (occluded.shape()[0], occluded.shape()[1]);
    if body_rgb.shape() != [3, h, w] {
        return Err(Error::ShapeMismatch {
            op: "skin_loss",
            lhs: body_rgb.shape(),
            rhs: vec![3, h, w],
        });
    }
    let count = occluded.sum();
    if count == 0.0 {
        return Ok(body_rgb.sum().scale(0.0));
    }
    let target = Tensor::from_fn(&[3, h, w], |i| skin[i / (h * w)]);
    let m = tape.constant(occluded.clone());
    Ok(body_rgb
        .huber(tape.constant(target), delta)?
        .mul(m)?
        .sum()
        .scale(weight / (3.0 * count)))
}

/// Mean ground-truth colour where the rendered hand silhouette exceeds ½.
pub fn skin_color(rgb: &Tensor, hand_silhouette: &Tensor) -> Option<[f32; 3]> {
    let hw = hand_silhouette.numel();
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (p, &a) in hand_silhouette.data().iter().enumerate() {
        if a > 0.5 {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += rgb.data()[c * hw + p] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| (s / n as f64) as f32))
}

/// [`skin_color`] pooled over several views, falling back to [`DEFAULT_SKIN_COLOR`].
pub fn skin_color_or_default<'a>(views: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>) -> [f32; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0.0f64;
    for (rgb, sil) in views {
        let count = sil.data().iter().filter(|&&a| a > 0.5).count() as f64;
        if let Some(c) = skin_color(rgb, sil) {
            for k in 0..3 {
                sum[k] += c[k] as f64 * count;
            }
            n += count;
        }
    }
    if n == 0.0 {
        log::warn!("no visible hand pixels; using the default skin colour");
        return DEFAULT_SKIN_COLOR;
    }
    sum.map(|s| (s / n) as f32)
}

/// `λ · mean over Gaussians of ‖μ − μ⁰‖²` on extracted canonical rows.
pub fn offset_loss<'t>(rows: Var<'t>, seeds: &[GaussianSeed], weight: f32) -> Result<Var<'t>> {
    let n = seeds.len();
    if rows.shape() != [n, crate::render::GAUSSIAN_WIDTH] {
        return Err(Error::ShapeMismatch {
            op: "offset_loss",
            lhs: rows.shape(),
            rhs: vec![n, crate::render::GAUSSIAN_WIDTH],
        });
    }
    let mu0: Vec<f32> = seeds.iter().flat_map(|s| s.mu0).collect();
    let mu0 = rows.tape().constant(Tensor::new(vec![n, 3], mu0)?);
    let d = rows.narrow(1, col::MU, 3)?.sub(mu0)?;
    Ok(d.square().sum().scale(weight / n.max(1) as f32))
}

/// `λ · TV` of attribute maps.
pub fn smooth_loss<'t>(maps: Var<'t>, weight: f32) -> Result<Var<'t>> {
    Ok(total_variation(maps)?.scale(weight))
}

struct TvOp {
    input: std::rc::Rc<Tensor>,
    pairs: f32,
}

impl CustomOp for TvOp {
    fn name(&self) -> &'static str {
        "total_variation"
    }

    fn backward(&self, g: &Tensor) -> Vec<Option<Tensor>> {
        let shape = self.input.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let x = self.input.data();
        let k = 2.0 * g.item() / self.pairs;
        let mut out = vec![0.0f32; x.len()];
        for (m, xs) in x.chunks(h * w).enumerate() {
            let o = &mut out[m * h * w..(m + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    if xx + 1 < w {
                        let d = k * (xs[p + 1] - xs[p]);
                        o[p + 1] += d;
                        o[p] -= d;
                    }
                    if y + 1 < h {
                        let d = k * (xs[p + w] - xs[p]);
                        o[p + w] += d;
                        o[p] -= d;
                    }
                }
            }
        }
        vec![Some(Tensor::new(shape.to_vec(), out).unwrap())]
    }
}

/// Mean of squared horizontal and vertical neighbour differences over the last
/// two axes; leading axes (layers, channels) are independent maps, so no
/// differences cross layer boundaries.
pub fn total_variation(maps: Var<'_>) -> Result<Var<'_>> {
    let input = maps.value();
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::invalid("total_variation", format!("needs at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let count = input.numel() / (h * w).max(1);
    let pairs = (count * (h * (w - 1) + (h - 1) * w)).max(1) as f32;
    let mut total = 0.0f64;
    for xs in input.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    total += ((xs[p + 1] - xs[p]) as f64).powi(2);
                }
                if y + 1 < h {
                    total += ((xs[p + w] - xs[p]) as f64).powi(2);
                }
            }
        }
    }
    let out = Tensor::scalar((total / pairs as f64) as f32);
    Ok(maps.tape().custom(TvOp { input, pairs }, &[maps], out))
}

/// Per-iteration loss values, one JSON object per line in `losses.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub color: f32,
    pub mask: f32,
    pub perceptual: f32,
    pub seg: f32,
    pub maskin: f32,
    pub skin: f32,
    pub offset: f32,
    pub smooth: f32,
    pub diffusion: f32,
    pub total: f32,
    /// The step was dropped for a non-finite loss or gradient.
    #[serde(default)]
    pub skipped: bool,
    /// Gaussians skipped by the renderer for an ill-conditioned footprint.
    #[serde(default)]
    pub skipped_gaussians: usize,
}

impl LossBreakdown {
    /// Adds every term of `other` (iteration and flags are left alone).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.color += other.color;
        self.mask += other.mask;
        self.perceptual += other.perceptual;
        self.seg += other.seg;
        self.maskin += other.maskin;
        self.skin += other.skin;
        self.offset += other.offset;
        self.smooth += other.smooth;
        self.diffusion += other.diffusion;
        self.total += other.total;
    }
}
