//! Tile-based differentiable Gaussian rasterizer and its brute-force oracle.
//!
//! Pixel centres sit at integer + ½. Each Gaussian contributes
//! σ = min(α·exp(−½ dᵀΣ′⁻¹d), 0.99) where its Mahalanobis distance is within
//! 3; contributions are composited front to back by view depth, ties broken
//! by input index.

use crate::math::{mat3_from, Mat3, Mat4, Vec3};
use crate::template::Label;
use crate::tensor::{CustomOp, Tensor, Var};
use crate::{Error, Result};
use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Floats per Gaussian row: μ(3), R(9, row-major), s(3), α, c(3).
pub const GAUSSIAN_WIDTH: usize = 19;

/// Column offsets within a Gaussian row.
pub mod col {
    pub const MU: usize = 0;
    pub const ROT: usize = 3;
    pub const SCALE: usize = 12;
    pub const OPACITY: usize = 15;
    pub const COLOR: usize = 16;
}

pub const TILE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the projected covariance diagonal (px²).
pub const DILATION: f64 = 0.3;
pub const MAX_SIGMA: f64 = 0.99;
/// Squared Mahalanobis cutoff (3σ).
pub const CUTOFF: f64 = 9.0;
const MAX_CONDITION: f64 = 1e8;

/// Gaussians as `[N, 19]` rows plus their component labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch {
    pub params: Tensor,
    pub labels: Vec<Label>,
}

impl GaussianBatch {
    pub fn empty() -> Self {
        Self {
            params: Tensor::zeros(&[0, GAUSSIAN_WIDTH]),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.params.data()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.params.data_mut()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH]
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.shape() != [self.labels.len(), GAUSSIAN_WIDTH] {
            return Err(Error::ShapeMismatch {
                op: "gaussian_batch",
                lhs: self.params.shape().to_vec(),
                rhs: vec![self.labels.len(), GAUSSIAN_WIDTH],
            });
        }
        for i in 0..self.len() {
            let r = self.row(i);
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("gaussian_batch", format!("row {i} is not finite")));
            }
            if r[col::SCALE..col::SCALE + 3].iter().any(|&s| s <= 0.0) {
                return Err(Error::invalid("gaussian_batch", format!("row {i} has a non-positive scale")));
            }
        }
        Ok(())
    }

    /// Indices of the Gaussians carrying `label`.
    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Pinhole camera looking down +z (x right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rigid transform.
    pub world_to_cam: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target` with world `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let f = (target - eye).normalize();
        let r = f.cross(&up).normalize();
        let d = f.cross(&r);
        let rot = Mat3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let t = -(rot * eye);
        let m = crate::math::rigid(&rot, &t);
        Self::from_matrix(&m, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn from_matrix(m: &Mat4, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let mut w = [[0.0; 4]; 4];
        for (i, row) in w.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        Self {
            fx,
            fy,
            cx,
            cy,
            world_to_cam: w,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Mat4 {
        Mat4::from_fn(|i, j| self.world_to_cam[i][j])
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_fn(|i, j| self.world_to_cam[i][j])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.world_to_cam[0][3], self.world_to_cam[1][3], self.world_to_cam[2][3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "focal lengths and image size must be positive"));
        }
        let r = self.rotation();
        if (r.transpose() * r - Mat3::identity()).norm() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera", "rotation is not orthonormal"));
        }
        Ok(())
    }

    /// The same view after moving the whole scene by `g` (world → world).
    pub fn compose(&self, g: &Mat4) -> Self {
        let mut c = self.clone();
        let m = self.matrix() * g;
        c.world_to_cam = Self::from_matrix(&m, 1.0, 1.0, 0.0, 0.0, 1, 1).world_to_cam;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// rgb + alpha.
    Color,
    /// alpha only.
    Silhouette,
    /// alpha with every opacity replaced by 1; no opacity gradient.
    SilhouetteDetached,
    /// five one-hot label channels (background 0) + alpha.
    Segmentation,
}

impl RenderMode {
    /// Feature channels before the trailing alpha channel.
    pub fn features(self) -> usize {
        match self {
            RenderMode::Color => 3,
            RenderMode::Silhouette | RenderMode::SilhouetteDetached => 0,
            RenderMode::Segmentation => Label::COUNT,
        }
    }

    pub fn channels(self) -> usize {
        self.features() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub mode: RenderMode,
    pub background: [f32; 3],
    /// Skip contributions beyond 3σ. Disabling it evaluates every Gaussian at
    /// every pixel, which makes the image smooth in all parameters.
    pub cutoff: bool,
}

impl RenderSettings {
    pub fn color(background: [f32; 3]) -> Self {
        Self {
            mode: RenderMode::Color,
            background,
            cutoff: true,
        }
    }

    pub fn mode(mode: RenderMode) -> Self {
        Self {
            mode,
            background: [0.0; 3],
            cutoff: true,
        }
    }
}

/// `image` is `[F + 1, H, W]`: the mode's feature channels followed by alpha.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Tensor,
    pub mode: RenderMode,
    /// Gaussians skipped for an ill-conditioned 2D covariance.
    pub skipped: usize,
}

impl RenderOutput {
    pub fn alpha(&self) -> &[f32] {
        let hw = self.image.shape()[1] * self.image.shape()[2];
        let c = self.image.shape()[0];
        &self.image.data()[(c - 1) * hw..]
    }

    pub fn features(&self) -> &[f32] {
        let hw = self.image.shape()[1] * self.image.shape()[2];
        let c = self.image.shape()[0];
        &self.image.data()[..(c - 1) * hw]
    }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug)]
pub struct Projection {
    pub mean: [f64; 2],
    /// Dilated 2D covariance `[xx, xy, yy]`.
    pub cov: [f64; 3],
    pub depth: f64,
    conic: [f64; 3],
    radius: [f64; 2],
    t: Vec3,
    m: Matrix2x3<f64>,
    sigma: Mat3,
}

enum Projected {
    Visible(Box<Projection>),
    Culled,
    Degenerate,
}

fn project_row(row: &[f32], cam: &Camera, w: &Mat3, tw: &Vec3) -> Projected {
    let mu = Vec3::new(row[col::MU] as f64, row[col::MU + 1] as f64, row[col::MU + 2] as f64);
    let t = w * mu + tw;
    if t.z < NEAR_PLANE {
        return Projected::Culled;
    }
    let r = mat3_from(&row[col::ROT..col::ROT + 9]);
    let s2 = Vec3::new(
        (row[col::SCALE] as f64).powi(2),
        (row[col::SCALE + 1] as f64).powi(2),
        (row[col::SCALE + 2] as f64).powi(2),
    );
    let sigma = r * Mat3::from_diagonal(&s2) * r.transpose();
    let iz = 1.0 / t.z;
    let j = Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz * iz, 0.0, cam.fy * iz, -cam.fy * t.y * iz * iz);
    let m = j * w;
    let c = m * sigma * m.transpose() + Matrix2::identity() * DILATION;
    let (a, b, d) = (c[(0, 0)], c[(0, 1)], c[(1, 1)]);
    let mid = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (lmax, lmin) = (mid + disc, mid - disc);
    if !(lmin > 0.0) || lmax / lmin > MAX_CONDITION || !lmax.is_finite() {
        return Projected::Degenerate;
    }
    let det = a * d - b * b;
    Projected::Visible(Box::new(Projection {
        mean: [cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy],
        cov: [a, b, d],
        depth: t.z,
        conic: [d / det, -b / det, a / det],
        radius: [3.0 * a.sqrt(), 3.0 * d.sqrt()],
        t,
        m,
        sigma,
    }))
}

/// Projects every Gaussian; `None` for culled or degenerate ones.
pub fn project(batch: &GaussianBatch, camera: &Camera) -> Vec<Option<Projection>> {
    let (w, tw) = (camera.rotation(), camera.translation());
    (0..batch.len())
        .map(|i| match project_row(batch.row(i), camera, &w, &tw) {
            Projected::Visible(p) => Some(*p),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Forward state shared by forward, backward and the reference
// ---------------------------------------------------------------------------

struct Splat {
    /// Index into the full row set.
    row: usize,
    proj: Projection,
    opacity: f64,
    features: [f64; Label::COUNT],
}

struct FrameState {
    camera: Camera,
    mode: RenderMode,
    background: [f64; 3],
    rows: Arc<Tensor>,
    splats: Vec<Splat>,
    skipped: usize,
    cutoff: bool,
}

/// Per-pixel record of one contribution, kept for the backward sweep.
#[derive(Clone, Copy)]
struct Hit {
    /// Position in the tile list.
    pos: u32,
    sigma: f64,
    trans: f64,
    gauss: f64,
    capped: bool,
    d: [f64; 2],
}

impl FrameState {
    fn build(
        rows: Arc<Tensor>,
        labels: &[Label],
        subset: Option<&[usize]>,
        camera: &Camera,
        settings: &RenderSettings,
    ) -> Result<Self> {
        camera.validate()?;
        let n = rows.shape()[0];
        if rows.shape() != [n, GAUSSIAN_WIDTH] || labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "render",
                lhs: rows.shape().to_vec(),
                rhs: vec![labels.len(), GAUSSIAN_WIDTH],
            });
        }
        let all: Vec<usize>;
        let subset = match subset {
            Some(s) => {
                if let Some(&bad) = s.iter().find(|&&i| i >= n) {
                    return Err(Error::invalid("render", format!("subset index {bad} out of range")));
                }
                s
            }
            None => {
                all = (0..n).collect();
                &all
            }
        };
        let (w, tw) = (camera.rotation(), camera.translation());
        let mode = settings.mode;
        let projected: Vec<(usize, Projected)> = subset
            .par_iter()
            .map(|&i| {
                let row = &rows.data()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
                (i, project_row(row, camera, &w, &tw))
            })
            .collect();
        let mut splats = Vec::with_capacity(projected.len());
        let mut skipped = 0;
        for (i, p) in projected {
            match p {
                Projected::Visible(proj) => {
                    let row = &rows.data()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
                    let mut features = [0.0; Label::COUNT];
                    match mode {
                        RenderMode::Color => {
                            for k in 0..3 {
                                features[k] = row[col::COLOR + k] as f64;
                            }
                        }
                        RenderMode::Segmentation => features[labels[i].index()] = 1.0,
                        _ => {}
                    }
                    let opacity = if mode == RenderMode::SilhouetteDetached {
                        1.0
                    } else {
                        row[col::OPACITY] as f64
                    };
                    splats.push(Splat {
                        row: i,
                        proj: *proj,
                        opacity,
                        features,
                    });
                }
                Projected::Degenerate => skipped += 1,
                Projected::Culled => {}
            }
        }
        let background = if mode == RenderMode::Color {
            settings.background.map(|b| b as f64)
        } else {
            [0.0; 3]
        };
        Ok(Self {
            camera: camera.clone(),
            mode,
            background,
            rows,
            splats,
            skipped,
            cutoff: settings.cutoff,
        })
    }

    fn tiles(&self) -> (usize, usize) {
        (self.camera.width.div_ceil(TILE), self.camera.height.div_ceil(TILE))
    }

    /// Depth-sorted splat lists per tile (row-major tiles).
    fn bin(&self) -> Vec<Vec<u32>> {
        let (tx, ty) = self.tiles();
        let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
        let (w, h) = (self.camera.width as f64, self.camera.height as f64);
        for (k, s) in self.splats.iter().enumerate() {
            let p = &s.proj;
            if !self.cutoff {
                bins.iter_mut().for_each(|b| b.push(k as u32));
                continue;
            }
            // pixel centres x + ½ inside [mean − r, mean + r]
            let x0 = (p.mean[0] - p.radius[0] - 0.5).ceil().max(0.0);
            let x1 = (p.mean[0] + p.radius[0] - 0.5).floor().min(w - 1.0);
            let y0 = (p.mean[1] - p.radius[1] - 0.5).ceil().max(0.0);
            let y1 = (p.mean[1] + p.radius[1] - 0.5).floor().min(h - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (x0, x1, y0, y1) = (x0 as usize / TILE, x1 as usize / TILE, y0 as usize / TILE, y1 as usize / TILE);
            for ty_ in y0..=y1 {
                for tx_ in x0..=x1 {
                    bins[ty_ * tx + tx_].push(k as u32);
                }
            }
        }
        let order = |a: &u32, b: &u32| self.depth_order(*a, *b);
        bins.par_iter_mut().for_each(|b| b.sort_by(order));
        bins
    }

    fn depth_order(&self, a: u32, b: u32) -> std::cmp::Ordering {
        let (sa, sb) = (&self.splats[a as usize], &self.splats[b as usize]);
        sa.proj.depth.total_cmp(&sb.proj.depth).then(sa.row.cmp(&sb.row))
    }

    /// Composites one pixel; writes F features + alpha to `out`.
    fn shade(&self, list: &[u32], px: usize, py: usize, cutoff: bool, out: &mut [f64], mut hits: Option<&mut Vec<Hit>>) -> f64 {
        let f = self.mode.features();
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let mut trans = 1.0f64;
        out[..=f].iter_mut().for_each(|v| *v = 0.0);
        for (pos, &k) in list.iter().enumerate() {
            let s = &self.splats[k as usize];
            let d = [x - s.proj.mean[0], y - s.proj.mean[1]];
            let q = &s.proj.conic;
            let m = q[0] * d[0] * d[0] + 2.0 * q[1] * d[0] * d[1] + q[2] * d[1] * d[1];
            if cutoff && m > CUTOFF {
                continue;
            }
            let g = (-0.5 * m).exp();
            let raw = s.opacity * g;
            let capped = raw > MAX_SIGMA;
            let sigma = raw.min(MAX_SIGMA);
            if sigma <= 0.0 {
                continue;
            }
            let wgt = sigma * trans;
            for c in 0..f {
                out[c] += s.features[c] * wgt;
            }
            if let Some(h) = hits.as_deref_mut() {
                h.push(Hit {
                    pos: pos as u32,
                    sigma,
                    trans,
                    gauss: g,
                    capped,
                    d,
                });
            }
            trans *= 1.0 - sigma;
        }
        for c in 0..f.min(3) {
            out[c] += self.background[c] * trans;
        }
        out[f] = 1.0 - trans;
        trans
    }

    fn forward(&self) -> (Tensor, Vec<Vec<u32>>) {
        let (img, bins) = self.forward_f64();
        let (w, h) = (self.camera.width, self.camera.height);
        let data = img.iter().map(|&v| v as f32).collect();
        (Tensor::new(vec![self.mode.channels(), h, w], data).unwrap(), bins)
    }

    fn forward_f64(&self) -> (Vec<f64>, Vec<Vec<u32>>) {
        let (w, h) = (self.camera.width, self.camera.height);
        let ch = self.mode.channels();
        let bins = self.bin();
        let (tx, _) = self.tiles();
        let tiles: Vec<Vec<f64>> = bins
            .par_iter()
            .enumerate()
            .map(|(t, list)| {
                let (ox, oy) = ((t % tx) * TILE, (t / tx) * TILE);
                let mut buf = vec![0.0f64; TILE * TILE * ch];
                let mut px = vec![0.0f64; ch];
                for y in oy..(oy + TILE).min(h) {
                    for x in ox..(ox + TILE).min(w) {
                        self.shade(list, x, y, self.cutoff, &mut px, None);
                        let o = ((y - oy) * TILE + (x - ox)) * ch;
                        buf[o..o + ch].copy_from_slice(&px);
                    }
                }
                buf
            })
            .collect();
        let mut img = vec![0.0f64; ch * h * w];
        for (t, buf) in tiles.iter().enumerate() {
            let (ox, oy) = ((t % tx) * TILE, (t / tx) * TILE);
            for y in oy..(oy + TILE).min(h) {
                for x in ox..(ox + TILE).min(w) {
                    let o = ((y - oy) * TILE + (x - ox)) * ch;
                    for c in 0..ch {
                        img[(c * h + y) * w + x] = buf[o + c];
                    }
                }
            }
        }
        (img, bins)
    }

    /// Gradient of `Σ grad ⊙ image` with respect to the `[N, 19]` rows.
    fn backward(&self, bins: &[Vec<u32>], grad: &Tensor) -> Tensor {
        let (w, h) = (self.camera.width, self.camera.height);
        let f = self.mode.features();
        let ch = f + 1;
        let (tx, _) = self.tiles();
        // per splat: mean(2), conic(3: xx, xy, yy), opacity, features(F)
        let gw = 6 + f;
        let detached = self.mode == RenderMode::SilhouetteDetached;
        let tile_grads: Vec<Vec<f64>> = bins
            .par_iter()
            .enumerate()
            .map(|(t, list)| {
                let mut buf = vec![0.0f64; list.len() * gw];
                if list.is_empty() {
                    return buf;
                }
                let (ox, oy) = ((t % tx) * TILE, (t / tx) * TILE);
                let mut px = vec![0.0f64; ch];
                let mut hits = Vec::new();
                let mut suffix = vec![0.0f64; f];
                for y in oy..(oy + TILE).min(h) {
                    for x in ox..(ox + TILE).min(w) {
                        let g: Vec<f64> = (0..ch).map(|c| grad.data()[(c * h + y) * w + x] as f64).collect();
                        if g.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        hits.clear();
                        let t_final = self.shade(list, x, y, self.cutoff, &mut px, Some(&mut hits));
                        for c in 0..f {
                            suffix[c] = if c < 3 { self.background[c] * t_final } else { 0.0 };
                        }
                        let g_alpha = g[f];
                        for hit in hits.iter().rev() {
                            let s = &self.splats[list[hit.pos as usize] as usize];
                            let o = hit.pos as usize * gw;
                            let one_minus = 1.0 - hit.sigma;
                            let mut d_sigma = g_alpha * t_final / one_minus;
                            for c in 0..f {
                                d_sigma += g[c] * (s.features[c] * hit.trans - suffix[c] / one_minus);
                                suffix[c] += s.features[c] * hit.sigma * hit.trans;
                                buf[o + 6 + c] += g[c] * hit.sigma * hit.trans;
                            }
                            if hit.capped {
                                continue;
                            }
                            if !detached {
                                buf[o + 5] += d_sigma * hit.gauss;
                            }
                            let d_g = d_sigma * s.opacity;
                            let d_m = -0.5 * hit.gauss * d_g;
                            let q = &s.proj.conic;
                            let (dx, dy) = (hit.d[0], hit.d[1]);
                            // m = dᵀQd with d = pixel − mean
                            buf[o] += d_m * -2.0 * (q[0] * dx + q[1] * dy);
                            buf[o + 1] += d_m * -2.0 * (q[1] * dx + q[2] * dy);
                            buf[o + 2] += d_m * dx * dx;
                            buf[o + 3] += d_m * dx * dy;
                            buf[o + 4] += d_m * dy * dy;
                        }
                    }
                }
                buf
            })
            .collect();
        // fixed-order reduction keeps the result independent of the thread count
        let mut per_splat = vec![0.0f64; self.splats.len() * gw];
        for (list, buf) in bins.iter().zip(&tile_grads) {
            for (i, &k) in list.iter().enumerate() {
                for c in 0..gw {
                    per_splat[k as usize * gw + c] += buf[i * gw + c];
                }
            }
        }
        let n = self.rows.shape()[0];
        let mut out = vec![0.0f32; n * GAUSSIAN_WIDTH];
        let wcam = self.camera.rotation();
        let rows: Vec<(usize, [f64; GAUSSIAN_WIDTH])> = self
            .splats
            .par_iter()
            .enumerate()
            .map(|(k, s)| (s.row, self.chain(s, &per_splat[k * gw..(k + 1) * gw], &wcam)))
            .collect();
        for (row, g) in rows {
            for c in 0..GAUSSIAN_WIDTH {
                out[row * GAUSSIAN_WIDTH + c] += g[c] as f32;
            }
        }
        Tensor::new(vec![n, GAUSSIAN_WIDTH], out).unwrap()
    }

    /// Screen-space gradients → row gradients.
    fn chain(&self, s: &Splat, g: &[f64], wcam: &Mat3) -> [f64; GAUSSIAN_WIDTH] {
        let mut out = [0.0f64; GAUSSIAN_WIDTH];
        if self.mode == RenderMode::Color {
            for c in 0..3 {
                out[col::COLOR + c] = g[6 + c];
            }
        }
        out[col::OPACITY] = g[5];
        let p = &s.proj;
        let cam = &self.camera;
        let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let g_q = Matrix2::new(g[2], g[3], g[3], g[4]);
        let g_cov = -(q * g_q * q);
        let g_m = 2.0 * g_cov * p.m * p.sigma;
        let g_sigma = p.m.transpose() * g_cov * p.m;
        let g_j = g_m * wcam.transpose();
        let (tx, ty, tz) = (p.t.x, p.t.y, p.t.z);
        let iz = 1.0 / tz;
        let iz2 = iz * iz;
        let g_mean = Vector2::new(g[0], g[1]);
        let mut g_t = Vec3::new(
            g_mean[0] * cam.fx * iz,
            g_mean[1] * cam.fy * iz,
            -g_mean[0] * cam.fx * tx * iz2 - g_mean[1] * cam.fy * ty * iz2,
        );
        // J = [[fx/z, 0, −fx x/z²], [0, fy/z, −fy y/z²]]
        g_t.x += g_j[(0, 2)] * -cam.fx * iz2;
        g_t.y += g_j[(1, 2)] * -cam.fy * iz2;
        g_t.z += g_j[(0, 0)] * -cam.fx * iz2
            + g_j[(0, 2)] * 2.0 * cam.fx * tx * iz2 * iz
            + g_j[(1, 1)] * -cam.fy * iz2
            + g_j[(1, 2)] * 2.0 * cam.fy * ty * iz2 * iz;
        let g_mu = wcam.transpose() * g_t;
        for k in 0..3 {
            out[col::MU + k] = g_mu[k];
        }
        let row = &self.rows.data()[s.row * GAUSSIAN_WIDTH..(s.row + 1) * GAUSSIAN_WIDTH];
        let r = mat3_from(&row[col::ROT..col::ROT + 9]);
        let sc = Vec3::new(row[col::SCALE] as f64, row[col::SCALE + 1] as f64, row[col::SCALE + 2] as f64);
        let d2 = Mat3::from_diagonal(&sc.component_mul(&sc));
        let g_r = 2.0 * g_sigma * r * d2;
        for i in 0..3 {
            for j in 0..3 {
                out[col::ROT + i * 3 + j] = g_r[(i, j)];
            }
        }
        let inner = r.transpose() * g_sigma * r;
        for k in 0..3 {
            out[col::SCALE + k] = 2.0 * sc[k] * inner[(k, k)];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// A forward/backward pair. `backward` before `forward` is an error.
#[derive(Default)]
pub struct RenderContext {
    state: Option<(Arc<FrameState>, Arc<Vec<Vec<u32>>>)>,
}

impl RenderContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        batch: &GaussianBatch,
        subset: Option<&[usize]>,
        camera: &Camera,
        settings: &RenderSettings,
    ) -> Result<RenderOutput> {
        let state = FrameState::build(Arc::new(batch.params.clone()), &batch.labels, subset, camera, settings)?;
        let (image, bins) = state.forward();
        let out = RenderOutput {
            image,
            mode: settings.mode,
            skipped: state.skipped,
        };
        self.state = Some((Arc::new(state), Arc::new(bins)));
        Ok(out)
    }

    /// Row gradients `[N, 19]` for an image gradient shaped like the output.
    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let (state, bins) = self.state.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let (w, h) = (state.camera.width, state.camera.height);
        let want = [state.mode.channels(), h, w];
        if grad.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "render_backward",
                lhs: grad.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(state.backward(bins, grad))
    }
}

pub fn render(batch: &GaussianBatch, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    RenderContext::new().forward(batch, None, camera, settings)
}

/// Renders only the Gaussians in `subset`, through the same code path.
pub fn render_subset(
    batch: &GaussianBatch,
    subset: &[usize],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    RenderContext::new().forward(batch, Some(subset), camera, settings)
}

struct RenderOp {
    state: Arc<FrameState>,
    bins: Vec<Vec<u32>>,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(self.state.backward(&self.bins, grad))]
    }
}

/// Renders `[N, 19]` rows recorded on a tape; the result is `[F + 1, H, W]`.
pub fn render_var<'t>(
    rows: Var<'t>,
    labels: &[Label],
    subset: Option<&[usize]>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(Var<'t>, usize)> {
    let state = FrameState::build(Arc::new((*rows.value()).clone()), labels, subset, camera, settings)?;
    let (image, bins) = state.forward();
    let skipped = state.skipped;
    let op = RenderOp {
        state: Arc::new(state),
        bins,
    };
    Ok((rows.tape().custom(op, &[rows], image), skipped))
}

/// The tiled render before rounding to f32, `[F + 1, H, W]` row-major.
/// Finite-difference oracles use it to keep output rounding out of the estimate.
pub fn render_f64(batch: &GaussianBatch, camera: &Camera, settings: &RenderSettings) -> Result<Vec<f64>> {
    let state = FrameState::build(Arc::new(batch.params.clone()), &batch.labels, None, camera, settings)?;
    Ok(state.forward_f64().0)
}

/// Naive oracle: one global depth sort, every Gaussian evaluated at every
/// pixel; `cutoff` applies the same 3σ test as the tiled renderer.
pub fn render_reference(
    batch: &GaussianBatch,
    camera: &Camera,
    settings: &RenderSettings,
    cutoff: bool,
) -> Result<RenderOutput> {
    let state = FrameState::build(Arc::new(batch.params.clone()), &batch.labels, None, camera, settings)?;
    let mut order: Vec<u32> = (0..state.splats.len() as u32).collect();
    order.sort_by(|a, b| state.depth_order(*a, *b));
    let (w, h) = (camera.width, camera.height);
    let ch = settings.mode.channels();
    let mut img = vec![0.0f32; ch * h * w];
    let mut px = vec![0.0f64; ch];
    for y in 0..h {
        for x in 0..w {
            state.shade(&order, x, y, cutoff, &mut px, None);
            for c in 0..ch {
                img[(c * h + y) * w + x] = px[c] as f32;
            }
        }
    }
    Ok(RenderOutput {
        image: Tensor::new(vec![ch, h, w], img)?,
        mode: settings.mode,
        skipped: state.skipped,
    })
}

// ---------------------------------------------------------------------------
// Image output
// ---------------------------------------------------------------------------

/// Writes the first three channels (or one grey channel) of a `[C, H, W]`
/// image as 8-bit PNG.
pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = image.data();
    let path = path.as_ref();
    let img = if c >= 3 {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            let i = y as usize * w + x as usize;
            *p = image::Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])]);
        }
        image::DynamicImage::ImageRgb8(buf)
    } else {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            *p = image::Luma([q(d[y as usize * w + x as usize])]);
        }
        image::DynamicImage::ImageLuma8(buf)
    };
    img.save(path).map_err(|e| Error::asset(path, e.to_string()))
}

/// Raw little-endian dump: `C, H, W` as u32 then `C·H·W` f32 values.
pub fn save_raw(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * image.numel());
    for &e in image.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let b = std::fs::read(path)?;
    if b.len() < 12 {
        return Err(Error::asset(path, "truncated raw image"));
    }
    let dim = |i: usize| u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if b.len() != 12 + 4 * n {
        return Err(Error::asset(path, "raw image size does not match its header"));
    }
    let data = b[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}
