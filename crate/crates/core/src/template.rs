//! Component templates carved from the body model, their three-layer UV atlas,
//! Gaussian seeds and the fused skinning-weight volume.

use crate::body::{BodyModel, Region};
use crate::math::Vec3;
use crate::tensor::{read_checkpoint, write_checkpoint, NamedTensors, Tensor};
use crate::{Error, Result};
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Texels per side of one atlas layer.
pub const LAYER_RES: usize = 128;
pub const NUM_LAYERS: usize = 3;
/// Exterior shells sit this far outside the body surface (metres).
pub const EXTERIOR_OFFSET: f32 = 0.005;
/// Empty texels kept between an island and its component's box edge.
const BOX_MARGIN: f64 = 4.0;
/// Empty texels kept between two islands of one component.
const ISLAND_GAP: f64 = 2.0;

/// Semantic component of a Gaussian; the discriminant is its segmentation class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Body = 0,
    Top = 1,
    Bottom = 2,
    Hair = 3,
    Shoes = 4,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::Body, Label::Top, Label::Bottom, Label::Hair, Label::Shoes];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Body => "body",
            Label::Top => "top",
            Label::Bottom => "bottom",
            Label::Hair => "hair",
            Label::Shoes => "shoes",
        }
    }

    /// Atlas layer: 0 body, 1 hair + shoes, 2 top + bottom.
    pub fn layer(self) -> usize {
        match self {
            Label::Body => 0,
            Label::Hair | Label::Shoes => 1,
            Label::Top | Label::Bottom => 2,
        }
    }

    /// The component's reserved box `[u0, v0, u1, v1]` within its layer.
    pub fn uv_box(self) -> [f32; 4] {
        match self {
            Label::Body => [0.0, 0.0, 1.0, 1.0],
            Label::Hair | Label::Top => [0.0, 0.0, 0.5, 1.0],
            Label::Shoes | Label::Bottom => [0.5, 0.0, 1.0, 1.0],
        }
    }

    pub fn is_exterior(self) -> bool {
        self != Label::Body
    }

    fn regions(self) -> &'static [Region] {
        match self {
            Label::Body => &Region::ALL,
            Label::Top => &[Region::Torso, Region::Arm],
            Label::Bottom => &[Region::Pelvis, Region::Leg],
            Label::Hair => &[Region::Scalp],
            Label::Shoes => &[Region::Foot],
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Faces of the body model belonging to one component, with per-corner UVs in
/// the component's layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentTemplate {
    pub label: Label,
    pub layer: usize,
    pub faces: Vec<usize>,
    pub uvs: Vec<[[f32; 2]; 3]>,
    pub normal_offset: f32,
}

/// A (possibly subdivided) body model and the five component templates over it.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub model: BodyModel,
    pub components: Vec<ComponentTemplate>,
}

impl TemplateSet {
    pub fn component(&self, label: Label) -> &ComponentTemplate {
        &self.components[label.index()]
    }
}

// ---------------------------------------------------------------------------
// Atlas
// ---------------------------------------------------------------------------

fn vertex(model: &BodyModel, i: u32) -> Vec3 {
    let p = model.template[i as usize];
    Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

/// Splits a face set into vertex-connected pieces, each sorted, in order of first face.
fn connected_pieces(model: &BodyModel, faces: &[usize]) -> Vec<Vec<usize>> {
    let mut parent: HashMap<u32, u32> = HashMap::new();
    fn find(parent: &mut HashMap<u32, u32>, x: u32) -> u32 {
        let p = *parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let r = find(parent, p);
        parent.insert(x, r);
        r
    }
    for &f in faces {
        let [a, b, c] = model.faces[f];
        for (x, y) in [(a, b), (b, c)] {
            let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
            if rx != ry {
                parent.insert(rx.max(ry), rx.min(ry));
            }
        }
    }
    let mut order: Vec<u32> = Vec::new();
    let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
    for &f in faces {
        let r = find(&mut parent, model.faces[f][0]);
        if !groups.contains_key(&r) {
            order.push(r);
        }
        groups.entry(r).or_default().push(f);
    }
    order.into_iter().map(|r| groups.remove(&r).unwrap()).collect()
}

/// One UV island before packing: per-corner coordinates in metres.
struct Island {
    faces: Vec<usize>,
    corners: Vec<[[f64; 2]; 3]>,
    min: [f64; 2],
    max: [f64; 2],
}

/// Cylindrical unwrap around the piece's principal axis (seam at the back),
/// or a planar projection when the piece does not wrap around its axis.
fn unwrap_piece(model: &BodyModel, faces: &[usize]) -> Island {
    let mut ids: Vec<u32> = faces.iter().flat_map(|&f| model.faces[f]).collect();
    ids.sort_unstable();
    ids.dedup();
    let pts: Vec<Vec3> = ids.iter().map(|&i| vertex(model, i)).collect();
    let mean = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
    let cov = pts
        .iter()
        .fold(Matrix3::zeros(), |a, p| a + (p - mean) * (p - mean).transpose())
        / pts.len() as f64;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axis: Vec3 = eig.eigenvectors.column(order[0]).into();
    let imax = (0..3).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap();
    if axis[imax] < 0.0 {
        axis = -axis;
    }
    // front reference: +z projected off the axis (falls back to +y)
    let mut front = Vec3::z() - axis * axis.z;
    if front.norm() < 0.3 {
        front = Vec3::y() - axis * axis.y;
    }
    let front = front.normalize();
    let side = axis.cross(&front);

    let radial = |p: &Vec3| {
        let d = p - mean;
        let r = d - axis * d.dot(&axis);
        (r.dot(&front), r.dot(&side), d.dot(&axis))
    };
    let mut angles: Vec<f64> = pts
        .iter()
        .map(|p| {
            let (x, y, _) = radial(p);
            y.atan2(x)
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let max_gap = angles
        .windows(2)
        .map(|w| w[1] - w[0])
        .chain(std::iter::once(angles[0] + std::f64::consts::TAU - angles[angles.len() - 1]))
        .fold(0.0, f64::max);
    let cylindrical = max_gap < std::f64::consts::FRAC_PI_2;

    let mean_radius = pts
        .iter()
        .map(|p| {
            let (x, y, _) = radial(p);
            x.hypot(y)
        })
        .sum::<f64>()
        / pts.len() as f64;
    let circumference = std::f64::consts::TAU * mean_radius;
    let minor: Vec3 = eig.eigenvectors.column(order[1]).into();

    let mut corners = Vec::with_capacity(faces.len());
    for &f in faces {
        let ps = model.faces[f].map(|i| vertex(model, i));
        let c = if cylindrical {
            let mut u = [0.0f64; 3];
            let mut v = [0.0f64; 3];
            let mut pole = [false; 3];
            for k in 0..3 {
                let (x, y, a) = radial(&ps[k]);
                // angle in (-π, π]; the seam at ±π faces away from +z
                u[k] = y.atan2(x) / std::f64::consts::TAU + 0.5;
                v[k] = a;
                pole[k] = x.hypot(y) < 1e-3 * mean_radius;
            }
            let live: Vec<usize> = (0..3).filter(|&k| !pole[k]).collect();
            let lo = live.iter().map(|&k| u[k]).fold(f64::INFINITY, f64::min);
            let hi = live.iter().map(|&k| u[k]).fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > 0.5 {
                for &k in &live {
                    if u[k] < 0.5 {
                        u[k] += 1.0;
                    }
                }
            }
            let mean_u = live.iter().map(|&k| u[k]).sum::<f64>() / live.len().max(1) as f64;
            for k in 0..3 {
                if pole[k] {
                    u[k] = mean_u;
                }
            }
            [0, 1, 2].map(|k| [u[k] * circumference, v[k]])
        } else {
            ps.map(|p| {
                let d = p - mean;
                [d.dot(&axis), d.dot(&minor)]
            })
        };
        corners.push(c);
    }
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for c in corners.iter().flatten() {
        for a in 0..2 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    Island {
        faces: faces.to_vec(),
        corners,
        min,
        max,
    }
}

/// Shelf-packs islands (scaled by `s` texels per metre) into a `w × h` texel box.
/// Returns each island's lower-left texel offset, or `None` when they do not fit.
fn shelf_pack(sizes: &[[f64; 2]], s: f64, w: f64, h: f64) -> Option<Vec<[f64; 2]>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b][1].total_cmp(&sizes[a][1]).then(a.cmp(&b)));
    let mut pos = vec![[0.0; 2]; sizes.len()];
    let (mut x, mut y, mut shelf_h) = (BOX_MARGIN, BOX_MARGIN, 0.0f64);
    for i in order {
        let (iw, ih) = (sizes[i][0] * s, sizes[i][1] * s);
        if x + iw > w - BOX_MARGIN {
            x = BOX_MARGIN;
            y += shelf_h + ISLAND_GAP;
            shelf_h = 0.0;
        }
        if x + iw > w - BOX_MARGIN || y + ih > h - BOX_MARGIN {
            return None;
        }
        pos[i] = [x, y];
        x += iw + ISLAND_GAP;
        shelf_h = shelf_h.max(ih);
    }
    Some(pos)
}

fn face_in_regions(model: &BodyModel, regions: &[Region], f: usize) -> Result<bool> {
    let labels = model.regions.as_ref().ok_or_else(|| Error::MissingRegions("body model has no region labels".into()))?;
    let inside = model.faces[f]
        .iter()
        .filter(|&&v| regions.contains(&labels[v as usize]))
        .count();
    Ok(inside >= 2)
}

/// Builds the five component templates and their atlas for `model`.
pub fn default_atlas(model: &BodyModel) -> Result<TemplateSet> {
    if model.regions.is_none() {
        return Err(Error::MissingRegions("body model has no region labels".into()));
    }
    let mut components = Vec::with_capacity(Label::COUNT);
    for label in Label::ALL {
        let mut faces = Vec::new();
        for f in 0..model.faces.len() {
            if face_in_regions(model, label.regions(), f)? {
                faces.push(f);
            }
        }
        if faces.is_empty() {
            return Err(Error::invalid(
                "default_atlas",
                format!("no faces carry the regions of `{label}`"),
            ));
        }
        let islands: Vec<Island> = connected_pieces(model, &faces)
            .iter()
            .map(|piece| unwrap_piece(model, piece))
            .collect();
        let sizes: Vec<[f64; 2]> = islands
            .iter()
            .map(|i| [i.max[0] - i.min[0], i.max[1] - i.min[1]])
            .collect();
        let b = label.uv_box();
        let bw = (b[2] - b[0]) as f64 * LAYER_RES as f64;
        let bh = (b[3] - b[1]) as f64 * LAYER_RES as f64;
        // largest texels-per-metre scale that still packs
        let (mut lo, mut hi) = (1.0f64, 4096.0f64);
        if shelf_pack(&sizes, lo, bw, bh).is_none() {
            return Err(Error::invalid("default_atlas", format!("`{label}` islands do not fit")));
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if shelf_pack(&sizes, mid, bw, bh).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let scale = lo;
        let offsets = shelf_pack(&sizes, scale, bw, bh).unwrap();
        let mut placed: Vec<(usize, [[f32; 2]; 3])> = Vec::with_capacity(faces.len());
        for (island, off) in islands.iter().zip(&offsets) {
            for (&f, c) in island.faces.iter().zip(&island.corners) {
                let uv = c.map(|p| {
                    let tx = b[0] as f64 * LAYER_RES as f64 + off[0] + (p[0] - island.min[0]) * scale;
                    let ty = b[1] as f64 * LAYER_RES as f64 + off[1] + (p[1] - island.min[1]) * scale;
                    [(tx / LAYER_RES as f64) as f32, (ty / LAYER_RES as f64) as f32]
                });
                placed.push((f, uv));
            }
        }
        placed.sort_by_key(|(f, _)| *f);
        components.push(ComponentTemplate {
            label,
            layer: label.layer(),
            faces: placed.iter().map(|p| p.0).collect(),
            uvs: placed.iter().map(|p| p.1).collect(),
            normal_offset: if label.is_exterior() { EXTERIOR_OFFSET } else { 0.0 },
        });
    }
    Ok(TemplateSet {
        model: model.clone(),
        components,
    })
}

// ---------------------------------------------------------------------------
// Subdivision
// ---------------------------------------------------------------------------

fn mid2(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Splits every face four ways `levels` times. New vertices take the average
/// of their edge's endpoints (position, blendshapes, skinning weights) and do
/// not enter the joint regressor. Face `f` becomes faces `4f..4f+4`.
pub fn subdivide(set: &TemplateSet, levels: usize) -> TemplateSet {
    let mut out = set.clone();
    for _ in 0..levels {
        out = subdivide_once(&out);
    }
    out
}

fn subdivide_once(set: &TemplateSet) -> TemplateSet {
    let m = &set.model;
    let nv = m.num_vertices();
    let j = m.num_joints();
    let (nb, ne, np) = (m.num_betas, m.num_exprs, m.num_pose_basis());
    let mut template = m.template.clone();
    let mut shape_dirs = m.shape_dirs.clone();
    let mut expr_dirs = m.expr_dirs.clone();
    let mut pose_dirs = m.pose_dirs.clone();
    let mut lbs_weights = m.lbs_weights.clone();
    let mut regions = m.regions.clone();
    let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
    let mut faces = Vec::with_capacity(m.faces.len() * 4);

    let avg_rows = |dirs: &mut Vec<f32>, a: usize, b: usize, width: usize| {
        for k in 0..width {
            let v = 0.5 * (dirs[a * width + k] + dirs[b * width + k]);
            dirs.push(v);
        }
    };
    for f in &m.faces {
        let mut mids = [0u32; 3];
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            mids[k] = *midpoint.entry(key).or_insert_with(|| {
                let (a, b) = (key.0 as usize, key.1 as usize);
                let (pa, pb) = (template[a], template[b]);
                template.push([0, 1, 2].map(|i| 0.5 * (pa[i] + pb[i])));
                avg_rows(&mut shape_dirs, a, b, 3 * nb);
                avg_rows(&mut expr_dirs, a, b, 3 * ne);
                avg_rows(&mut pose_dirs, a, b, 3 * np);
                avg_rows(&mut lbs_weights, a, b, j);
                if let Some(r) = regions.as_mut() {
                    let ra = r[a];
                    r.push(ra);
                }
                (template.len() - 1) as u32
            });
        }
        let [a, b, c] = *f;
        let [ab, bc, ca] = mids;
        faces.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
    }
    let new_v = template.len();
    let mut j_regressor = vec![0.0f32; j * new_v];
    for jj in 0..j {
        j_regressor[jj * new_v..jj * new_v + nv].copy_from_slice(&m.j_regressor[jj * nv..(jj + 1) * nv]);
    }
    let model = BodyModel {
        template,
        faces,
        shape_dirs,
        expr_dirs,
        pose_dirs,
        j_regressor,
        parents: m.parents.clone(),
        lbs_weights,
        regions,
        num_betas: nb,
        num_exprs: ne,
    };
    let components = set
        .components
        .iter()
        .map(|c| {
            let mut faces = Vec::with_capacity(c.faces.len() * 4);
            let mut uvs = Vec::with_capacity(c.faces.len() * 4);
            for (&f, uv) in c.faces.iter().zip(&c.uvs) {
                let [a, b, cc] = *uv;
                let (ab, bc, ca) = (mid2(a, b), mid2(b, cc), mid2(cc, a));
                faces.extend((0..4).map(|k| 4 * f + k));
                uvs.extend([[a, ab, ca], [ab, b, bc], [ca, bc, cc], [ab, bc, ca]]);
            }
            ComponentTemplate {
                faces,
                uvs,
                ..c.clone()
            }
        })
        .collect();
    TemplateSet { model, components }
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// Initial geometry of one Gaussian and its baked deformation data.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSeed {
    pub label: Label,
    pub layer: usize,
    pub face: usize,
    pub mu0: [f32; 3],
    /// Row-major rotation; columns are (edge, normal × edge, normal).
    pub r0: [f32; 9],
    pub s0: [f32; 3],
    pub uv: [f32; 2],
    /// `[3, N_β]` row-major.
    pub shape_offsets: Vec<f32>,
    /// `[3, N_ψ]` row-major.
    pub expr_offsets: Vec<f32>,
    /// `[3, 9(J−1)]` row-major.
    pub pose_offsets: Vec<f32>,
    pub weights: Vec<f32>,
}

const DEGENERATE_AREA: f64 = 1e-12;

/// One seed per non-degenerate face: centroid (pushed out along the normal for
/// exterior shells), tangent-frame rotation and a thin surface-aligned scale.
pub fn init_seeds(template: &ComponentTemplate, model: &BodyModel) -> Vec<GaussianSeed> {
    let mut seeds = Vec::with_capacity(template.faces.len());
    let mut skipped = 0usize;
    for (&f, uv) in template.faces.iter().zip(&template.uvs) {
        let [a, b, c] = model.faces[f].map(|i| vertex(model, i));
        let cross = (b - a).cross(&(c - a));
        if 0.5 * cross.norm() < DEGENERATE_AREA {
            skipped += 1;
            continue;
        }
        let n = cross.normalize();
        let e = (b - a).normalize();
        let t = n.cross(&e);
        let centroid = (a + b + c) / 3.0 + n * template.normal_offset as f64;
        let mean_edge = ((b - a).norm() + (c - b).norm() + (a - c).norm()) / 3.0;
        let mut r0 = [0.0f32; 9];
        for row in 0..3 {
            r0[row * 3] = e[row] as f32;
            r0[row * 3 + 1] = t[row] as f32;
            r0[row * 3 + 2] = n[row] as f32;
        }
        seeds.push(GaussianSeed {
            label: template.label,
            layer: template.layer,
            face: f,
            mu0: [centroid.x as f32, centroid.y as f32, centroid.z as f32],
            r0,
            s0: [
                (mean_edge / 2.0) as f32,
                (mean_edge / 2.0) as f32,
                (mean_edge / 8.0) as f32,
            ],
            uv: [
                (uv[0][0] + uv[1][0] + uv[2][0]) / 3.0,
                (uv[0][1] + uv[1][1] + uv[2][1]) / 3.0,
            ],
            shape_offsets: Vec::new(),
            expr_offsets: Vec::new(),
            pose_offsets: Vec::new(),
            weights: Vec::new(),
        });
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} degenerate faces", template.label);
    }
    seeds
}

/// Centroid (⅓, ⅓, ⅓) combination of the face's `[V, 3, K]` blendshape rows, as `[3, K]`.
fn bake(dirs: &[f32], k: usize, face: [u32; 3]) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * k];
    for &v in &face {
        let row = &dirs[v as usize * 3 * k..(v as usize + 1) * 3 * k];
        for (o, &d) in out.iter_mut().zip(row) {
            *o += d / 3.0;
        }
    }
    out
}

/// Shape, expression and pose offsets at the seed, interpolated from its face.
pub fn bake_offsets(seed: &mut GaussianSeed, model: &BodyModel) {
    let face = model.faces[seed.face];
    seed.shape_offsets = bake(&model.shape_dirs, model.num_betas, face);
    seed.expr_offsets = bake(&model.expr_dirs, model.num_exprs, face);
    seed.pose_offsets = bake(&model.pose_dirs, model.num_pose_basis(), face);
}

/// Regular grid of normalised skinning weights over the canonical bounding box.
#[derive(Clone, Debug)]
pub struct SkinningField {
    pub res: usize,
    pub min: [f64; 3],
    pub cell: [f64; 3],
    pub num_joints: usize,
    /// `[res, res, res, J]` with x fastest... indexed `((z * res + y) * res + x) * J`.
    pub weights: Vec<f32>,
}

/// Neighbours fused per cell.
const FIELD_NEIGHBOURS: usize = 8;

impl SkinningField {
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        Vec3::new(
            self.min[0] + (ix as f64 + 0.5) * self.cell[0],
            self.min[1] + (iy as f64 + 0.5) * self.cell[1],
            self.min[2] + (iz as f64 + 0.5) * self.cell[2],
        )
    }

    pub fn cell_weights(&self, ix: usize, iy: usize, iz: usize) -> &[f32] {
        let i = (iz * self.res + iy) * self.res + ix;
        &self.weights[i * self.num_joints..(i + 1) * self.num_joints]
    }

    /// Trilinear lookup, renormalised. The flag reports a clamped (outside) query.
    pub fn lookup(&self, p: &Vec3) -> (Vec<f32>, bool) {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut clamped = false;
        for a in 0..3 {
            let x = (p[a] - self.min[a]) / self.cell[a] - 0.5;
            let hi = (self.res - 1) as f64;
            if !(0.0..=hi).contains(&x) {
                clamped = true;
            }
            let x = x.clamp(0.0, hi);
            let i0 = (x.floor() as usize).min(self.res.saturating_sub(2));
            idx[a] = i0;
            frac[a] = x - i0 as f64;
        }
        let mut w = vec![0.0f64; self.num_joints];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut cw = 1.0;
            for a in 0..3 {
                cw *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if cw == 0.0 {
                continue;
            }
            let cell = self.cell_weights(
                (idx[0] + o[0]).min(self.res - 1),
                (idx[1] + o[1]).min(self.res - 1),
                (idx[2] + o[2]).min(self.res - 1),
            );
            for (acc, &c) in w.iter_mut().zip(cell) {
                *acc += cw * c as f64;
            }
        }
        let total: f64 = w.iter().sum();
        (w.iter().map(|&x| (x / total) as f32).collect(), clamped)
    }
}

pub fn mean_edge_length(model: &BodyModel) -> f64 {
    let mut total = 0.0;
    for f in &model.faces {
        for k in 0..3 {
            total += (vertex(model, f[k]) - vertex(model, f[(k + 1) % 3])).norm();
        }
    }
    total / (3 * model.faces.len()) as f64
}

/// Gaussian-falloff fusion of the 8 nearest template vertices' weights per cell
/// (bandwidth twice the mean edge length).
pub fn build_skinning_field(model: &BodyModel, res: usize) -> SkinningField {
    let pts: Vec<Vec3> = (0..model.num_vertices() as u32).map(|i| vertex(model, i)).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let pad = 0.05;
    let min = [lo[0] - pad, lo[1] - pad, lo[2] - pad];
    let cell = [0, 1, 2].map(|a| (hi[a] - lo[a] + 2.0 * pad) / res as f64);
    let h = 2.0 * mean_edge_length(model);
    let inv2h2 = 1.0 / (2.0 * h * h);
    let j = model.num_joints();
    let mut field = SkinningField {
        res,
        min,
        cell,
        num_joints: j,
        weights: vec![],
    };
    let slices: Vec<Vec<f32>> = (0..res)
        .into_par_iter()
        .map(|iz| {
            let mut out = vec![0.0f32; res * res * j];
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(FIELD_NEIGHBOURS + 1);
            for iy in 0..res {
                for ix in 0..res {
                    let c = field.cell_center(ix, iy, iz);
                    best.clear();
                    for (i, p) in pts.iter().enumerate() {
                        let d = (p - c).norm_squared();
                        if best.len() < FIELD_NEIGHBOURS || d < best[best.len() - 1].0 {
                            let at = best.partition_point(|b| b.0 <= d);
                            best.insert(at, (d, i));
                            best.truncate(FIELD_NEIGHBOURS);
                        }
                    }
                    let dmin = best[0].0;
                    let mut w = vec![0.0f64; j];
                    for &(d, v) in &best {
                        let g = (-(d - dmin) * inv2h2).exp();
                        for (acc, &wv) in w.iter_mut().zip(model.weights_of(v)) {
                            *acc += g * wv as f64;
                        }
                    }
                    let total: f64 = w.iter().sum();
                    let dst = &mut out[(iy * res + ix) * j..(iy * res + ix + 1) * j];
                    for (o, x) in dst.iter_mut().zip(&w) {
                        *o = (x / total) as f32;
                    }
                }
            }
            out
        })
        .collect();
    field.weights = slices.concat();
    field
}

/// Skinning weights per seed: barycentric for body seeds, field lookup for
/// exterior shells. Returns the number of lookups clamped to the grid.
pub fn assign_weights(seeds: &mut [GaussianSeed], model: &BodyModel, field: &SkinningField) -> usize {
    let mut clamped = 0;
    for s in seeds.iter_mut() {
        s.weights = if s.label.is_exterior() {
            let (w, c) = field.lookup(&Vec3::new(s.mu0[0] as f64, s.mu0[1] as f64, s.mu0[2] as f64));
            clamped += c as usize;
            w
        } else {
            let face = model.faces[s.face];
            let mut w = vec![0.0f64; model.num_joints()];
            for &v in &face {
                for (acc, &x) in w.iter_mut().zip(model.weights_of(v as usize)) {
                    *acc += x as f64 / 3.0;
                }
            }
            let total: f64 = w.iter().sum();
            w.iter().map(|&x| (x / total) as f32).collect()
        };
    }
    if clamped > 0 {
        log::warn!("{clamped} seeds fell outside the skinning field and were clamped");
    }
    clamped
}

// ---------------------------------------------------------------------------
// Avatar template bundle
// ---------------------------------------------------------------------------

/// Everything shared by all avatars: subdivided templates, the skinning field
/// and the full ordered seed set (grouped by label).
#[derive(Clone, Debug)]
pub struct AvatarTemplate {
    pub set: TemplateSet,
    pub seeds: Vec<GaussianSeed>,
    /// `ranges[label]` is the seed index range of that component.
    pub ranges: [std::ops::Range<usize>; Label::COUNT],
}

/// Sidecar description of the seed bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSidecar {
    pub layers: usize,
    pub layer_res: usize,
    pub components: Vec<ComponentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub label: Label,
    pub layer: usize,
    pub uv_box: [f32; 4],
    pub face_count: usize,
    pub seed_range: [usize; 2],
}

impl AvatarTemplate {
    /// Atlas → subdivision → seeds → baked offsets → skinning weights.
    pub fn build(model: &BodyModel, levels: usize, field_res: usize) -> Result<Self> {
        let set = subdivide(&default_atlas(model)?, levels);
        let field = build_skinning_field(&set.model, field_res);
        let mut seeds = Vec::new();
        let mut ranges: [std::ops::Range<usize>; Label::COUNT] = Default::default();
        for c in &set.components {
            let start = seeds.len();
            let mut s = init_seeds(c, &set.model);
            for seed in s.iter_mut() {
                bake_offsets(seed, &set.model);
            }
            assign_weights(&mut s, &set.model, &field);
            seeds.extend(s);
            ranges[c.label.index()] = start..seeds.len();
        }
        Ok(Self { set, seeds, ranges })
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.seeds.iter().map(|s| s.label).collect()
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.ranges[label.index()].clone().collect()
    }

    pub fn sidecar(&self) -> TemplateSidecar {
        TemplateSidecar {
            layers: NUM_LAYERS,
            layer_res: LAYER_RES,
            components: self
                .set
                .components
                .iter()
                .map(|c| ComponentEntry {
                    label: c.label,
                    layer: c.layer,
                    uv_box: c.label.uv_box(),
                    face_count: c.faces.len(),
                    seed_range: [self.ranges[c.label.index()].start, self.ranges[c.label.index()].end],
                })
                .collect(),
        }
    }

    /// Seed arrays as named tensors (`seeds.*`).
    pub fn seed_tensors(&self) -> NamedTensors {
        let n = self.seeds.len();
        let cat = |f: &dyn Fn(&GaussianSeed) -> Vec<f32>| -> Vec<f32> { self.seeds.iter().flat_map(f).collect() };
        let m = &self.set.model;
        let t = |shape: Vec<usize>, d: Vec<f32>| Tensor::new(shape, d).expect("seed tensor");
        vec![
            ("seeds.label".into(), t(vec![n], cat(&|s| vec![s.label.index() as f32]))),
            ("seeds.face".into(), t(vec![n], cat(&|s| vec![s.face as f32]))),
            ("seeds.mu0".into(), t(vec![n, 3], cat(&|s| s.mu0.to_vec()))),
            ("seeds.r0".into(), t(vec![n, 3, 3], cat(&|s| s.r0.to_vec()))),
            ("seeds.s0".into(), t(vec![n, 3], cat(&|s| s.s0.to_vec()))),
            ("seeds.uv".into(), t(vec![n, 2], cat(&|s| s.uv.to_vec()))),
            (
                "seeds.shape_offsets".into(),
                t(vec![n, 3, m.num_betas], cat(&|s| s.shape_offsets.clone())),
            ),
            (
                "seeds.expr_offsets".into(),
                t(vec![n, 3, m.num_exprs], cat(&|s| s.expr_offsets.clone())),
            ),
            (
                "seeds.pose_offsets".into(),
                t(vec![n, 3, m.num_pose_basis()], cat(&|s| s.pose_offsets.clone())),
            ),
            ("seeds.weights".into(), t(vec![n, m.num_joints()], cat(&|s| s.weights.clone()))),
        ]
    }

    /// Writes `<stem>.ckpt` (seed tensors) and `<stem>.json` (sidecar).
    pub fn save_bundle(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let named = self.seed_tensors();
        write_checkpoint(dir.join(format!("{stem}.ckpt")), named.iter().map(|(n, t)| (n.as_str(), t)))?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.sidecar())?,
        )?;
        Ok(())
    }
}

/// Reads back seeds written by [`AvatarTemplate::save_bundle`].
pub fn load_seed_bundle(dir: impl AsRef<Path>, stem: &str) -> Result<(Vec<GaussianSeed>, TemplateSidecar)> {
    let dir = dir.as_ref();
    let named = read_checkpoint(dir.join(format!("{stem}.ckpt")))?;
    let sidecar: TemplateSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let get = |name: &str| {
        named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("seed bundle is missing `{name}`")))
    };
    let label = get("seeds.label")?;
    let n = label.numel();
    let row = |name: &str| -> Result<(usize, &[f32])> {
        let t = get(name)?;
        Ok((t.numel() / n.max(1), t.data()))
    };
    let (face, mu0, r0, s0, uv) = (row("seeds.face")?, row("seeds.mu0")?, row("seeds.r0")?, row("seeds.s0")?, row("seeds.uv")?);
    let (so, eo, po, w) = (
        row("seeds.shape_offsets")?,
        row("seeds.expr_offsets")?,
        row("seeds.pose_offsets")?,
        row("seeds.weights")?,
    );
    let slice = |(k, d): (usize, &[f32]), i: usize| d[i * k..(i + 1) * k].to_vec();
    let mut seeds = Vec::with_capacity(n);
    for i in 0..n {
        let l = Label::from_index(label.data()[i] as usize)
            .ok_or_else(|| Error::UnknownLabel(label.data()[i].to_string()))?;
        seeds.push(GaussianSeed {
            label: l,
            layer: l.layer(),
            face: face.1[i] as usize,
            mu0: slice(mu0, i).try_into().unwrap(),
            r0: slice(r0, i).try_into().unwrap(),
            s0: slice(s0, i).try_into().unwrap(),
            uv: slice(uv, i).try_into().unwrap(),
            shape_offsets: slice(so, i),
            expr_offsets: slice(eo, i),
            pose_offsets: slice(po, i),
            weights: slice(w, i),
        });
    }
    Ok((seeds, sidecar))
}
