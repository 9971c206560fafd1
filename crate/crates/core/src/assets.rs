//! Scene manifests, image/mask IO, PLY interchange and synthetic toy scenes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{make_toy_model, BodyModel, BodyParams};
use crate::deform::{deform_batch, DeformContext};
use crate::losses::{component_masks, SceneTruth, ViewTruth, SEG_BACKGROUND};
use crate::math::{mat3_from, mat3_to, quat_to_rotation, rotation_to_quat, Vec3};
use crate::render::{col, render, render_subset, Camera, GaussianBatch, RenderMode, RenderOutput, RenderSettings, GAUSSIAN_WIDTH};
use crate::template::{AvatarTemplate, Label};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const BODY_MODEL_NAME: &str = "body_model.lavt";

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// One subject: body parameters, background and per-view files. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub subject: String,
    pub body: BodyParams,
    #[serde(default)]
    pub background: [f32; 3],
    /// Body model checkpoint; the built-in toy model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_model: Option<String>,
    #[serde(default)]
    pub template: TemplateOptions,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heldout: Vec<ViewEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateOptions {
    pub subdivisions: usize,
    pub field_res: usize,
}

impl Default for TemplateOptions {
    fn default() -> Self {
        Self {
            subdivisions: 1,
            field_res: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera: Camera,
    pub rgb: String,
    pub mask: String,
    pub segmentation: String,
    /// Visible per-component masks keyed by label name; derived from the
    /// segmentation when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, String>,
    /// Exact synthetic ground truth that a real capture would not have.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    /// Render of the body alone.
    pub body_rgb: String,
    /// Full (occlusion-free) silhouette of each component, keyed by label name.
    pub amodal: BTreeMap<String, String>,
}

/// Decoded reference images of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewReference {
    pub body_rgb: Tensor,
    /// Indexed by [`Label::index`].
    pub amodal: Vec<Tensor>,
}

impl SceneManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::asset(path, e.to_string()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::asset(path, e.to_string()))?;
        m.validate().map_err(|e| Error::asset(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Structural checks that do not touch the referenced files.
    pub fn validate(&self) -> Result<()> {
        if self.subject.is_empty() {
            return Err(Error::invalid("manifest", "empty subject id"));
        }
        if self.views.is_empty() {
            return Err(Error::invalid("manifest", "no views"));
        }
        for v in self.views.iter().chain(&self.heldout) {
            v.camera.validate()?;
            for key in v.components.keys().chain(v.reference.iter().flat_map(|r| r.amodal.keys())) {
                key.parse::<Label>()?;
            }
        }
        Ok(())
    }

    /// The body model this scene was captured with.
    pub fn body_model(&self, dir: &Path) -> Result<BodyModel> {
        match &self.body_model {
            Some(p) => BodyModel::load(dir.join(p)),
            None => Ok(make_toy_model(0)),
        }
    }
}

/// Resolves a scene path to its manifest file (accepting the directory).
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Loads and decodes a scene. `path` is the manifest or its directory.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneTruth> {
    let path = manifest_path(path);
    let manifest = SceneManifest::load(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let load_views = |entries: &[ViewEntry]| -> Result<Vec<ViewTruth>> {
        entries.iter().map(|e| load_view(e, dir)).collect()
    };
    Ok(SceneTruth {
        subject: manifest.subject.clone(),
        params: manifest.body.clone(),
        background: manifest.background,
        views: load_views(&manifest.views)?,
        heldout: load_views(&manifest.heldout)?,
    })
}

/// All scenes below `root`: `root` itself if it holds a manifest, otherwise
/// every immediate subdirectory that does, in name order.
pub fn scene_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join(MANIFEST_NAME).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::asset(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::asset(root, "no manifest.json found"));
    }
    Ok(dirs)
}

fn load_view(entry: &ViewEntry, dir: &Path) -> Result<ViewTruth> {
    let (w, h) = (entry.camera.width, entry.camera.height);
    let rgb = read_rgb(dir.join(&entry.rgb), (w, h))?;
    let foreground = read_mask(dir.join(&entry.mask), (w, h))?;
    let segmentation = read_segmentation(dir.join(&entry.segmentation), (w, h))?;
    let mut components = component_masks(&segmentation, &[h, w])?;
    for (name, file) in &entry.components {
        let label: Label = name.parse()?;
        components[label.index()] = read_mask(dir.join(file), (w, h))?;
    }
    let view = ViewTruth {
        camera: entry.camera.clone(),
        rgb,
        foreground,
        segmentation,
        components,
    };
    view.validate().map_err(|e| Error::asset(dir.join(&entry.rgb), e.to_string()))?;
    Ok(view)
}

/// Reference images for the training views and then the held-out views;
/// `None` where a view carries no reference.
pub fn load_reference(path: impl AsRef<Path>) -> Result<Vec<Option<ViewReference>>> {
    let path = manifest_path(path);
    let manifest = SceneManifest::load(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .views
        .iter()
        .chain(&manifest.heldout)
        .map(|v| {
            let Some(r) = &v.reference else { return Ok(None) };
            let size = (v.camera.width, v.camera.height);
            let body_rgb = read_rgb(dir.join(&r.body_rgb), size)?;
            let mut amodal = vec![Tensor::zeros(&[size.1, size.0]); Label::COUNT];
            for (name, file) in &r.amodal {
                amodal[name.parse::<Label>()?.index()] = read_mask(dir.join(file), size)?;
            }
            Ok(Some(ViewReference { body_rgb, amodal }))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

fn open_image(path: &Path, size: Option<(usize, usize)>) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::asset(path, e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|source| {
        Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        }
    })?;
    if let Some((w, h)) = size {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::asset(
                path,
                format!("image is {}×{}, expected {w}×{h}", img.width(), img.height()),
            ));
        }
    }
    Ok(img)
}

/// `[3, H, W]` in [0, 1].
pub fn read_rgb(path: impl AsRef<Path>, size: (usize, usize)) -> Result<Tensor> {
    let img = open_image(path.as_ref(), Some(size))?.to_rgb8();
    let (w, h) = size;
    let mut out = Tensor::zeros(&[3, h, w]);
    let d = out.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            d[c * h * w + i] = f32::from(p[c]) / 255.0;
        }
    }
    Ok(out)
}

/// `[H, W]` binarised at 0.5.
pub fn read_mask(path: impl AsRef<Path>, size: (usize, usize)) -> Result<Tensor> {
    let img = open_image(path.as_ref(), Some(size))?.to_luma8();
    let (w, h) = size;
    let data = img.pixels().map(|p| f32::from(f32::from(p[0]) / 255.0 >= 0.5)).collect();
    Tensor::new(vec![h, w], data)
}

/// Label indices per pixel, [`SEG_BACKGROUND`] for background.
pub fn read_segmentation(path: impl AsRef<Path>, size: (usize, usize)) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let img = open_image(path, Some(size))?.to_luma8();
    let seg = img.into_raw();
    if let Some(bad) = seg.iter().find(|&&s| s != SEG_BACKGROUND && s as usize >= Label::COUNT) {
        return Err(Error::asset(path, format!("segmentation value {bad} is not a label index")));
    }
    Ok(seg)
}

pub fn write_mask(mask: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let raw = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_gray(raw, w, h, path.as_ref())
}

pub fn write_segmentation(seg: &[u8], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    write_gray(seg.to_vec(), width, height, path.as_ref())
}

fn write_gray(raw: Vec<u8>, w: usize, h: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::asset(path, "buffer does not match the image size"))?;
    img.save(path).map_err(|e| Error::asset(path, e.to_string()))
}

/// Writes the first three channels of `[C, H, W]` as 8-bit RGB.
pub fn write_rgb(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    crate::render::save_png(image, path)
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

const PLY_FLOATS: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "red", "green",
    "blue",
];

/// One vertex per Gaussian: position, opacity, scales, unit quaternion
/// (w, x, y, z), colour in [0, 1] and the component label index.
pub fn export_ply(batch: &GaussianBatch, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    batch.validate()?;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::asset(path, e.to_string()))?;
    let mut out = std::io::BufWriter::new(file);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", batch.len())?;
    for name in PLY_FLOATS {
        writeln!(out, "property float {name}")?;
    }
    writeln!(out, "property uchar label\nend_header")?;
    for i in 0..batch.len() {
        let values = ply_values(batch.row(i));
        let label = batch.labels[i].index() as u8;
        match format {
            PlyFormat::Ascii => {
                let text: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{} {label}", text.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in values {
                    out.write_all(&v.to_le_bytes())?;
                }
                out.write_all(&[label])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn ply_values(row: &[f32]) -> [f32; 14] {
    let q = rotation_to_quat(&mat3_from(&row[col::ROT..col::ROT + 9]));
    let mut v = [0.0f32; 14];
    v[..3].copy_from_slice(&row[col::MU..col::MU + 3]);
    v[3] = row[col::OPACITY];
    v[4..7].copy_from_slice(&row[col::SCALE..col::SCALE + 3]);
    for k in 0..4 {
        v[7 + k] = q[k] as f32;
    }
    v[11..14].copy_from_slice(&row[col::COLOR..col::COLOR + 3]);
    v
}

/// Reads a file written by [`export_ply`] (either encoding).
pub fn import_ply(path: impl AsRef<Path>) -> Result<GaussianBatch> {
    let path = path.as_ref();
    let bad = |msg: &str| Error::asset(path, msg.to_string());
    let file = std::fs::File::open(path).map_err(|e| Error::asset(path, e.to_string()))?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("unterminated PLY header"));
        }
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        header.push(line);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(bad("not a PLY file"));
    }
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    for line in &header[1..] {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["comment", ..] => {}
            _ => return Err(bad(&format!("unsupported header line `{line}`"))),
        }
    }
    let expected: Vec<(String, String)> = PLY_FLOATS
        .iter()
        .map(|n| ("float".to_string(), n.to_string()))
        .chain(std::iter::once(("uchar".to_string(), "label".to_string())))
        .collect();
    if props != expected {
        return Err(bad("unexpected vertex properties"));
    }
    let (format, n) = (format.ok_or_else(|| bad("missing format"))?, count.ok_or_else(|| bad("missing vertex count"))?);
    let mut records: Vec<([f32; 14], u8)> = Vec::with_capacity(n);
    match format {
        PlyFormat::Ascii => {
            let mut text = String::new();
            reader.read_to_string(&mut text)?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for _ in 0..n {
                let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 15 {
                    return Err(bad("wrong number of vertex fields"));
                }
                let mut v = [0.0f32; 14];
                for (k, f) in fields[..14].iter().enumerate() {
                    v[k] = f.parse().map_err(|_| bad("bad float"))?;
                }
                records.push((v, fields[14].parse().map_err(|_| bad("bad label"))?));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 14 * 4 + 1];
            for _ in 0..n {
                reader.read_exact(&mut buf).map_err(|_| bad("truncated vertex data"))?;
                let mut v = [0.0f32; 14];
                for (k, c) in buf[..56].chunks_exact(4).enumerate() {
                    v[k] = f32::from_le_bytes(c.try_into().unwrap());
                }
                records.push((v, buf[56]));
            }
        }
    }
    let mut params = vec![0.0f32; n * GAUSSIAN_WIDTH];
    let mut labels = Vec::with_capacity(n);
    for (i, (v, label)) in records.iter().enumerate() {
        let row = &mut params[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
        row[col::MU..col::MU + 3].copy_from_slice(&v[..3]);
        row[col::OPACITY] = v[3];
        row[col::SCALE..col::SCALE + 3].copy_from_slice(&v[4..7]);
        let q = [v[7] as f64, v[8] as f64, v[9] as f64, v[10] as f64];
        mat3_to(&quat_to_rotation(q), &mut row[col::ROT..col::ROT + 9]);
        row[col::COLOR..col::COLOR + 3].copy_from_slice(&v[11..14]);
        labels.push(Label::from_index(*label as usize).ok_or_else(|| bad("label index out of range"))?);
    }
    Ok(GaussianBatch {
        params: Tensor::new(vec![n, GAUSSIAN_WIDTH], params)?,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneOptions {
    pub seed: u64,
    pub views: usize,
    pub size: usize,
    /// Salt-noise rate applied to the segmentation of the first
    /// `noisy_views` views (at most two).
    pub mask_noise: f32,
    pub noisy_views: usize,
}

impl Default for ToySceneOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            views: 8,
            size: 128,
            mask_noise: 0.0,
            noisy_views: 0,
        }
    }
}

pub const TOY_BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];
pub const TOY_OPACITY: f32 = 0.92;
const SKIN: [f32; 3] = [0.86, 0.64, 0.52];
const STRIPE: [[f32; 3]; 2] = [[0.16, 0.34, 0.72], [0.88, 0.86, 0.80]];
const BOTTOM: [f32; 3] = [0.22, 0.24, 0.32];
const HAIR: [f32; 3] = [0.30, 0.18, 0.10];
const SHOES: [f32; 3] = [0.12, 0.10, 0.10];

/// A hand-built avatar in the template's own parameterisation: every
/// attribute is reachable by the decoders, so fitting can match it exactly.
pub struct ToyAvatar {
    pub model: BodyModel,
    pub template: AvatarTemplate,
    pub params: BodyParams,
    /// Canonical Gaussians before shape warp and posing.
    pub canonical: GaussianBatch,
}

impl ToyAvatar {
    pub fn new(seed: u64) -> Result<Self> {
        let model = make_toy_model(0);
        let opts = TemplateOptions::default();
        let template = AvatarTemplate::build(&model, opts.subdivisions, opts.field_res)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BodyParams::rest(&model);
        for b in &mut params.betas {
            *b = rng.random_range(-0.6..0.6);
        }
        // Arms lowered from the T-pose, slight elbow bend.
        let arm = 1.05 + rng.random_range(-0.1..0.1);
        params.pose[16] = [0.0, 0.0, -arm];
        params.pose[17] = [0.0, 0.0, arm];
        params.pose[18] = [0.0, -0.25, 0.0];
        params.pose[19] = [0.0, 0.25, 0.0];
        let hue: f32 = rng.random_range(-0.05..0.05);

        let n = template.len();
        let mut rows = vec![0.0f32; n * GAUSSIAN_WIDTH];
        for (i, s) in template.seeds.iter().enumerate() {
            let row = &mut rows[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
            let push = match s.label {
                Label::Body => 0.0,
                Label::Top | Label::Bottom => 0.012,
                Label::Hair => 0.015,
                Label::Shoes => 0.01,
            };
            let normal = [s.r0[2], s.r0[5], s.r0[8]];
            for k in 0..3 {
                row[col::MU + k] = s.mu0[k] + push * normal[k];
                row[col::SCALE + k] = s.s0[k];
            }
            row[col::ROT..col::ROT + 9].copy_from_slice(&s.r0);
            row[col::OPACITY] = TOY_OPACITY;
            let color = match s.label {
                Label::Body => SKIN,
                Label::Top => STRIPE[((s.mu0[1] / 0.09).floor() as i64).rem_euclid(2) as usize],
                Label::Bottom => BOTTOM,
                Label::Hair => HAIR,
                Label::Shoes => SHOES,
            };
            for k in 0..3 {
                row[col::COLOR + k] = (color[k] + if k == 2 { hue } else { -hue }).clamp(0.02, 0.98);
            }
        }
        let canonical = GaussianBatch {
            params: Tensor::new(vec![n, GAUSSIAN_WIDTH], rows)?,
            labels: template.seeds.iter().map(|s| s.label).collect(),
        };
        Ok(Self {
            model,
            template,
            params,
            canonical,
        })
    }

    /// Shape-warped, posed Gaussians.
    pub fn posed(&self) -> Result<GaussianBatch> {
        let seeds = &self.template.seeds;
        let ctx = DeformContext::new(&self.template.set.model, &self.params, seeds)?;
        deform_batch(&self.canonical, seeds, &self.params, &ctx)
    }
}

/// Cameras on a horizontal ring around the posed body, framing it fully.
pub fn ring_cameras(batch: &GaussianBatch, count: usize, size: usize, phase: f64) -> Vec<Camera> {
    let (lo, hi) = bounds(batch);
    let center = (lo + hi) * 0.5;
    let height = (hi.y - lo.y).max(1e-3);
    let distance = 3.2;
    let focal = 0.8 * size as f64 * distance / height;
    (0..count)
        .map(|k| {
            let a = phase + std::f64::consts::TAU * k as f64 / count as f64;
            let eye = center + Vec3::new(distance * a.sin(), 0.25, distance * a.cos());
            Camera::look_at(eye, center, Vec3::y(), focal, size, size)
        })
        .collect()
}

fn bounds(batch: &GaussianBatch) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for i in 0..batch.len() {
        let r = batch.row(i);
        let p = Vec3::new(r[0] as f64, r[1] as f64, r[2] as f64);
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    (lo, hi)
}

/// Exact ground truth for one camera.
struct ToyView {
    rgb: Tensor,
    foreground: Tensor,
    segmentation: Vec<u8>,
    body_rgb: Tensor,
    amodal: Vec<Tensor>,
}

/// Per-pixel label of a segmentation render: the strongest class where
/// `foreground` is set, the background value elsewhere.
pub fn label_map(seg: &RenderOutput, foreground: &[f32]) -> Vec<u8> {
    let f = seg.features();
    let hw = foreground.len();
    (0..hw)
        .map(|p| {
            if foreground[p] < 0.5 {
                return SEG_BACKGROUND;
            }
            let best = (0..Label::COUNT).max_by(|&a, &b| f[a * hw + p].total_cmp(&f[b * hw + p])).unwrap();
            best as u8
        })
        .collect()
}

fn render_toy_view(batch: &GaussianBatch, camera: &Camera) -> Result<ToyView> {
    let (h, w) = (camera.height, camera.width);
    let full = render(batch, camera, &RenderSettings::color(TOY_BACKGROUND))?;
    let binarise = |a: &[f32]| Tensor::new(vec![h, w], a.iter().map(|&v| f32::from(v > 0.5)).collect());
    let foreground = binarise(full.alpha())?;
    let seg = render(batch, camera, &RenderSettings::mode(RenderMode::Segmentation))?;
    let segmentation = label_map(&seg, foreground.data());
    let body = batch.indices_of(Label::Body);
    let body_rgb = render_subset(batch, &body, camera, &RenderSettings::color(TOY_BACKGROUND))?;
    let amodal = Label::ALL
        .iter()
        .map(|&l| {
            let idx = batch.indices_of(l);
            let sil = render_subset(batch, &idx, camera, &RenderSettings::mode(RenderMode::Silhouette))?;
            binarise(sil.alpha())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyView {
        rgb: full.image.narrow_channels(3),
        foreground,
        segmentation,
        body_rgb: body_rgb.image.narrow_channels(3),
        amodal,
    })
}

trait NarrowChannels {
    fn narrow_channels(&self, c: usize) -> Tensor;
}

impl NarrowChannels for Tensor {
    fn narrow_channels(&self, c: usize) -> Tensor {
        let (h, w) = (self.shape()[1], self.shape()[2]);
        Tensor::new(vec![c, h, w], self.data()[..c * h * w].to_vec()).unwrap()
    }
}

fn salt_noise(seg: &mut [u8], rate: f32, rng: &mut ChaCha8Rng) {
    for s in seg.iter_mut().filter(|s| **s != SEG_BACKGROUND) {
        if rng.random::<f32>() < rate {
            *s = rng.random_range(0..Label::COUNT as u8);
        }
    }
}

/// Writes a synthetic subject to `dir`: body model, manifest, per-view rgb,
/// mask and segmentation PNGs plus reference renders, and one held-out view
/// between two ring cameras. Output is byte-identical for a given seed.
pub fn make_toy_scene(dir: impl AsRef<Path>, opts: &ToySceneOptions) -> Result<SceneManifest> {
    if opts.views == 0 || opts.size < 8 {
        return Err(Error::invalid("make_toy_scene", "need at least one view of at least 8×8 pixels"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::asset(dir, e.to_string()))?;
    let avatar = ToyAvatar::new(opts.seed)?;
    avatar.model.save(dir.join(BODY_MODEL_NAME))?;
    let posed = avatar.posed()?;
    let cameras = ring_cameras(&posed, opts.views, opts.size, 0.0);
    let heldout = ring_cameras(&posed, opts.views, opts.size, std::f64::consts::PI / opts.views as f64);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_5a17);

    let mut write_view = |name: &str, camera: &Camera, noisy: bool| -> Result<ViewEntry> {
        let mut v = render_toy_view(&posed, camera)?;
        if noisy && opts.mask_noise > 0.0 {
            salt_noise(&mut v.segmentation, opts.mask_noise, &mut noise_rng);
        }
        let file = |kind: &str| format!("{name}_{kind}.png");
        write_rgb(&v.rgb, dir.join(file("rgb")))?;
        write_mask(&v.foreground, dir.join(file("mask")))?;
        write_segmentation(&v.segmentation, camera.width, camera.height, dir.join(file("seg")))?;
        write_rgb(&v.body_rgb, dir.join(file("body")))?;
        let mut amodal = BTreeMap::new();
        for l in Label::ALL {
            let f = file(&format!("amodal_{l}"));
            write_mask(&v.amodal[l.index()], dir.join(&f))?;
            amodal.insert(l.to_string(), f);
        }
        Ok(ViewEntry {
            camera: camera.clone(),
            rgb: file("rgb"),
            mask: file("mask"),
            segmentation: file("seg"),
            components: BTreeMap::new(),
            reference: Some(ReferenceEntry {
                body_rgb: file("body"),
                amodal,
            }),
        })
    };
    let noisy = opts.noisy_views.min(2);
    let views = cameras
        .iter()
        .enumerate()
        .map(|(k, c)| write_view(&format!("view{k:02}"), c, k < noisy))
        .collect::<Result<Vec<_>>>()?;
    let heldout = vec![write_view("heldout00", &heldout[0], false)?];
    let manifest = SceneManifest {
        subject: format!("toy{:04}", opts.seed),
        body: avatar.params.clone(),
        background: TOY_BACKGROUND,
        body_model: Some(BODY_MODEL_NAME.to_string()),
        template: TemplateOptions::default(),
        views,
        heldout,
    };
    manifest.save(dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
