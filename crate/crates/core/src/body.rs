//! Parametric body model with the structure of SMPL-X: rest template,
//! shape/expression/pose blendshapes, a joint regressor, a kinematic tree and
//! linear blend skinning. A procedural capsule humanoid stands in for the
//! licensed model files.

use crate::math::{rigid, rodrigues, transform_point, Mat3, Mat4, Vec3};
use crate::tensor::{read_checkpoint, write_checkpoint, NamedTensors, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Coarse anatomical region of a template vertex; drives the component atlas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Scalp,
    Face,
    Torso,
    Pelvis,
    Arm,
    Hand,
    Leg,
    Foot,
}

impl Region {
    pub const ALL: [Region; 8] = [
        Region::Scalp,
        Region::Face,
        Region::Torso,
        Region::Pelvis,
        Region::Arm,
        Region::Hand,
        Region::Leg,
        Region::Foot,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&r| r == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Template mesh plus blendshapes and skinning data.
///
/// Blendshape arrays are `[V, 3, K]` row-major; the joint regressor is `[J, V]`
/// and the skinning weights `[V, J]`. Parents are topologically ordered
/// (`parents[j] < j`), joint 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyModel {
    pub template: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub shape_dirs: Vec<f32>,
    pub expr_dirs: Vec<f32>,
    pub pose_dirs: Vec<f32>,
    pub j_regressor: Vec<f32>,
    pub parents: Vec<Option<usize>>,
    pub lbs_weights: Vec<f32>,
    pub regions: Option<Vec<Region>>,
    pub num_betas: usize,
    pub num_exprs: usize,
}

/// Shape, pose (axis-angle per joint) and expression coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub betas: Vec<f32>,
    pub pose: Vec<[f32; 3]>,
    pub expr: Vec<f32>,
}

impl BodyParams {
    /// Zero shape and expression, rest pose.
    pub fn rest(model: &BodyModel) -> Self {
        Self {
            betas: vec![0.0; model.num_betas],
            pose: vec![[0.0; 3]; model.num_joints()],
            expr: vec![0.0; model.num_exprs],
        }
    }
}

const WEIGHT_TOL: f32 = 1e-5;

impl BodyModel {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Length of the pose feature: nine rotation-residual entries per non-root joint.
    pub fn num_pose_basis(&self) -> usize {
        9 * self.num_joints().saturating_sub(1)
    }

    /// Checks every structural invariant; all constructors go through this.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let j = self.num_joints();
        let bad = |msg: String| Err(Error::invalid("body_model", msg));
        if j == 0 || self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (k, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return bad(format!("joint {k} must have a parent with a smaller index")),
            }
        }
        let sizes = [
            ("shape_dirs", self.shape_dirs.len(), v * 3 * self.num_betas),
            ("expr_dirs", self.expr_dirs.len(), v * 3 * self.num_exprs),
            ("pose_dirs", self.pose_dirs.len(), v * 3 * self.num_pose_basis()),
            ("j_regressor", self.j_regressor.len(), j * v),
            ("lbs_weights", self.lbs_weights.len(), v * j),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return bad(format!("{name} has {got} values, expected {want}"));
            }
        }
        if let Some(r) = &self.regions {
            if r.len() != v {
                return bad(format!("{} region labels for {v} vertices", r.len()));
            }
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= v) {
            return bad("face references a missing vertex".into());
        }
        for (k, row) in self.lbs_weights.chunks(j).enumerate() {
            let s: f32 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || (s - 1.0).abs() > WEIGHT_TOL {
                return bad(format!("skinning weights of vertex {k} sum to {s}"));
            }
        }
        for (k, row) in self.j_regressor.chunks(v).enumerate() {
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > WEIGHT_TOL {
                return bad(format!("joint regressor row {k} sums to {s}"));
            }
        }
        Ok(())
    }

    pub fn check_params(&self, params: &BodyParams) -> Result<()> {
        let checks = [
            ("betas", self.num_betas, params.betas.len()),
            ("pose", self.num_joints(), params.pose.len()),
            ("expr", self.num_exprs, params.expr.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::CoefficientMismatch { what, expected, got });
            }
        }
        let finite = params.betas.iter().chain(&params.expr).all(|v| v.is_finite())
            && params.pose.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("body_params", "non-finite coefficient"));
        }
        Ok(())
    }

    fn rest_vertices(&self) -> Vec<Vec3> {
        self.template
            .iter()
            .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect()
    }

    /// Rest template plus shape, expression and pose blendshapes.
    pub fn canonical_mesh(&self, params: &BodyParams) -> Result<Vec<Vec3>> {
        self.check_params(params)?;
        let mut verts = self.rest_vertices();
        add_blend(&mut verts, &self.shape_dirs, &to_f64(&params.betas));
        add_blend(&mut verts, &self.expr_dirs, &to_f64(&params.expr));
        let feat = pose_feature(&params.pose);
        if feat.iter().any(|&f| f != 0.0) {
            add_blend(&mut verts, &self.pose_dirs, &feat);
        }
        Ok(verts)
    }

    /// Rest joint locations for a body shape: `regressor · (T_c + B_s(β))`.
    pub fn skeleton(&self, betas: &[f32]) -> Result<Vec<Vec3>> {
        if betas.len() != self.num_betas {
            return Err(Error::CoefficientMismatch {
                what: "betas",
                expected: self.num_betas,
                got: betas.len(),
            });
        }
        let mut verts = self.rest_vertices();
        add_blend(&mut verts, &self.shape_dirs, &to_f64(betas));
        Ok(regress_joints(&self.j_regressor, &verts))
    }

    /// Per-joint transforms mapping rest-pose space to posed space.
    pub fn rigid_transforms(&self, betas: &[f32], pose: &[[f32; 3]]) -> Result<Vec<Mat4>> {
        if pose.len() != self.num_joints() {
            return Err(Error::CoefficientMismatch {
                what: "pose",
                expected: self.num_joints(),
                got: pose.len(),
            });
        }
        let joints = self.skeleton(betas)?;
        Ok(forward_kinematics(&self.parents, &joints, pose))
    }

    /// Posed mesh: canonical mesh skinned by the blended joint transforms.
    pub fn lbs_mesh(&self, params: &BodyParams) -> Result<Vec<Vec3>> {
        let verts = self.canonical_mesh(params)?;
        let transforms = self.rigid_transforms(&params.betas, &params.pose)?;
        Ok(lbs(&verts, &self.lbs_weights, &transforms))
    }

    /// Skinning-weight row of vertex `v`.
    pub fn weights_of(&self, v: usize) -> &[f32] {
        let j = self.num_joints();
        &self.lbs_weights[v * j..(v + 1) * j]
    }

    /// Serialises the model under the reserved tensor names.
    pub fn to_named_tensors(&self) -> NamedTensors {
        let v = self.num_vertices();
        let j = self.num_joints();
        let t = |shape: Vec<usize>, data: Vec<f32>| Tensor::new(shape, data).expect("consistent model");
        let mut out = vec![
            (
                "template".to_string(),
                t(vec![v, 3], self.template.iter().flatten().copied().collect()),
            ),
            (
                "faces".to_string(),
                t(
                    vec![self.faces.len(), 3],
                    self.faces.iter().flatten().map(|&i| i as f32).collect(),
                ),
            ),
            ("shape_dirs".to_string(), t(vec![v, 3, self.num_betas], self.shape_dirs.clone())),
            ("pose_dirs".to_string(), t(vec![v, 3, self.num_pose_basis()], self.pose_dirs.clone())),
            ("expr_dirs".to_string(), t(vec![v, 3, self.num_exprs], self.expr_dirs.clone())),
            ("j_regressor".to_string(), t(vec![j, v], self.j_regressor.clone())),
            (
                "parents".to_string(),
                t(
                    vec![j],
                    self.parents.iter().map(|p| p.map_or(-1.0, |p| p as f32)).collect(),
                ),
            ),
            ("lbs_weights".to_string(), t(vec![v, j], self.lbs_weights.clone())),
        ];
        if let Some(r) = &self.regions {
            out.push((
                "regions".to_string(),
                t(vec![v], r.iter().map(|r| r.code() as f32).collect()),
            ));
        }
        out
    }

    /// Builds a model from named tensors.
    ///
    /// Externally exported SMPL-X arrays map onto the reserved names as follows:
    /// `v_template → template [V,3]`, `f → faces [F,3]`,
    /// `shapedirs[:, :, :Nβ] → shape_dirs [V,3,Nβ]`,
    /// `shapedirs[:, :, 300:] → expr_dirs [V,3,Nψ]`,
    /// `posedirs` (stored `[P, 3V]`) transposed and reshaped `→ pose_dirs [V,3,P]`,
    /// `J_regressor → j_regressor [J,V]`, `kintree_table[0] → parents [J]`
    /// (root encoded as −1) and `weights → lbs_weights [V,J]`. An optional
    /// `regions [V]` tensor holds [`Region`] codes.
    pub fn from_named_tensors(tensors: &NamedTensors) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("body model is missing tensor `{name}`")))
        };
        let rank = |t: &Tensor, r: usize, name: &str| {
            if t.rank() == r {
                Ok(())
            } else {
                Err(Error::Checkpoint(format!("`{name}` must have rank {r}, got {:?}", t.shape())))
            }
        };
        let template = get("template")?;
        rank(template, 2, "template")?;
        let faces = get("faces")?;
        rank(faces, 2, "faces")?;
        let shape_dirs = get("shape_dirs")?;
        rank(shape_dirs, 3, "shape_dirs")?;
        let expr_dirs = get("expr_dirs")?;
        rank(expr_dirs, 3, "expr_dirs")?;
        let parents = get("parents")?;
        let regions = match tensors.iter().find(|(n, _)| n == "regions") {
            Some((_, t)) => Some(
                t.data()
                    .iter()
                    .map(|&c| Region::from_code(c as u8).ok_or(Error::UnknownLabel(c.to_string())))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let model = BodyModel {
            template: template.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            faces: faces
                .data()
                .chunks(3)
                .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
                .collect(),
            num_betas: shape_dirs.shape()[2],
            shape_dirs: shape_dirs.data().to_vec(),
            num_exprs: expr_dirs.shape()[2],
            expr_dirs: expr_dirs.data().to_vec(),
            pose_dirs: get("pose_dirs")?.data().to_vec(),
            j_regressor: get("j_regressor")?.data().to_vec(),
            parents: parents
                .data()
                .iter()
                .map(|&p| if p < 0.0 { None } else { Some(p as usize) })
                .collect(),
            lbs_weights: get("lbs_weights")?.data().to_vec(),
            regions,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.to_named_tensors();
        write_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named_tensors(&read_checkpoint(path)?)
    }
}

/// Joint positions `[J, V] · verts`.
pub fn regress_joints(j_regressor: &[f32], verts: &[Vec3]) -> Vec<Vec3> {
    j_regressor
        .chunks(verts.len())
        .map(|row| {
            row.iter()
                .zip(verts)
                .filter(|(w, _)| **w != 0.0)
                .fold(Vec3::zeros(), |acc, (&w, p)| acc + p * w as f64)
        })
        .collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `verts[v] += Σ_k dirs[v, :, k] · coeffs[k]`.
fn add_blend(verts: &mut [Vec3], dirs: &[f32], coeffs: &[f64]) {
    let n = coeffs.len();
    if n == 0 {
        return;
    }
    for (v, p) in verts.iter_mut().enumerate() {
        for a in 0..3 {
            let row = &dirs[(v * 3 + a) * n..(v * 3 + a + 1) * n];
            p[a] += row.iter().zip(coeffs).map(|(&d, &c)| d as f64 * c).sum::<f64>();
        }
    }
}

/// Concatenated `R_j − I` (row-major) of every non-root joint.
pub fn pose_feature(pose: &[[f32; 3]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * pose.len().saturating_sub(1));
    for aa in pose.iter().skip(1) {
        let r = rodrigues(&Vec3::new(aa[0] as f64, aa[1] as f64, aa[2] as f64)) - Mat3::identity();
        for i in 0..3 {
            for j in 0..3 {
                out.push(r[(i, j)]);
            }
        }
    }
    out
}

/// World transforms composed root to leaf, expressed relative to the rest pose.
pub fn forward_kinematics(parents: &[Option<usize>], joints: &[Vec3], pose: &[[f32; 3]]) -> Vec<Mat4> {
    let mut world: Vec<Mat4> = Vec::with_capacity(joints.len());
    for (j, aa) in pose.iter().enumerate() {
        let r = rodrigues(&Vec3::new(aa[0] as f64, aa[1] as f64, aa[2] as f64));
        let local = match parents[j] {
            None => rigid(&r, &joints[j]),
            Some(p) => world[p] * rigid(&r, &(joints[j] - joints[p])),
        };
        world.push(local);
    }
    world
        .iter()
        .zip(joints)
        .map(|(w, jp)| w * rigid(&Mat3::identity(), &-jp))
        .collect()
}

/// Blend of joint transforms under one skinning-weight row.
pub fn blend_transforms(weights: &[f32], transforms: &[Mat4]) -> Mat4 {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut t = Mat4::zeros();
    for (&w, b) in weights.iter().zip(transforms) {
        if w != 0.0 {
            t += b * (w as f64 / total);
        }
    }
    t
}

/// Linear blend skinning of `verts` with `[V, J]` weights.
pub fn lbs(verts: &[Vec3], weights: &[f32], transforms: &[Mat4]) -> Vec<Vec3> {
    let j = transforms.len();
    verts
        .iter()
        .enumerate()
        .map(|(v, p)| transform_point(&blend_transforms(&weights[v * j..(v + 1) * j], transforms), p))
        .collect()
}

// ---------------------------------------------------------------------------
// Procedural toy model
// ---------------------------------------------------------------------------

/// Joint count of the toy model (SMPL ordering).
pub const TOY_JOINTS: usize = 24;
pub const TOY_BETAS: usize = 10;
pub const TOY_EXPRS: usize = 10;

/// SMPL kinematic tree.
pub const TOY_PARENTS: [i32; TOY_JOINTS] =
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

/// A closed capsule-like tube: `rings` cross-sections between two hemispherical-ish caps.
struct Capsule {
    start: Vec3,
    end: Vec3,
    /// Cross-section radii along the `hint` direction and the third axis.
    radii: (f64, f64),
    cap: f64,
    hint: Vec3,
    segments: usize,
    body_rings: usize,
    cap_rings: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Part {
    Torso,
    Head,
    Arm(Side),
    Hand(Side),
    Leg(Side),
    Foot(Side),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Side {
    Left,
    Right,
}

struct PartMesh {
    part: Part,
    axis_start: Vec3,
    axis_dir: Vec3,
    first_vertex: usize,
    /// Vertex ids of the straight-section rings, in axis order.
    rings: Vec<Vec<usize>>,
}

#[derive(Default)]
struct MeshBuilder {
    verts: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    parts: Vec<PartMesh>,
}

impl MeshBuilder {
    fn add(&mut self, part: Part, c: Capsule) {
        let first = self.verts.len();
        let len = (c.end - c.start).norm();
        let dir = (c.end - c.start) / len;
        let u = (c.hint - dir * c.hint.dot(&dir)).normalize();
        let w = dir.cross(&u);
        // (axial position, radius scale) per ring, bottom to top
        let mut profile = Vec::new();
        for k in 1..c.cap_rings {
            let a = k as f64 / c.cap_rings as f64 * std::f64::consts::FRAC_PI_2;
            profile.push((-c.cap * a.cos(), a.sin(), false));
        }
        for j in 0..=c.body_rings {
            profile.push((len * j as f64 / c.body_rings as f64, 1.0, true));
        }
        for k in (1..c.cap_rings).rev() {
            let a = k as f64 / c.cap_rings as f64 * std::f64::consts::FRAC_PI_2;
            profile.push((len + c.cap * a.cos(), a.sin(), false));
        }
        let bottom = self.verts.len();
        self.verts.push(c.start - dir * c.cap);
        let mut ring_ids = Vec::new();
        let mut body = Vec::new();
        for &(axial, scale, is_body) in &profile {
            let ids: Vec<usize> = (0..c.segments)
                .map(|s| {
                    let phi = s as f64 / c.segments as f64 * std::f64::consts::TAU;
                    let p = c.start
                        + dir * axial
                        + u * (c.radii.0 * scale * phi.cos())
                        + w * (c.radii.1 * scale * phi.sin());
                    self.verts.push(p);
                    self.verts.len() - 1
                })
                .collect();
            if is_body {
                body.push(ids.clone());
            }
            ring_ids.push(ids);
        }
        let top = self.verts.len();
        self.verts.push(c.end + dir * c.cap);
        let n = c.segments;
        let f = |a: usize, b: usize, c: usize| [a as u32, b as u32, c as u32];
        for s in 0..n {
            let r = &ring_ids[0];
            self.faces.push(f(bottom, r[(s + 1) % n], r[s]));
        }
        for pair in ring_ids.windows(2) {
            let (lo, hi) = (&pair[0], &pair[1]);
            for s in 0..n {
                let s1 = (s + 1) % n;
                self.faces.push(f(lo[s], lo[s1], hi[s1]));
                self.faces.push(f(lo[s], hi[s1], hi[s]));
            }
        }
        let r = ring_ids.last().unwrap();
        for s in 0..n {
            self.faces.push(f(r[s], r[(s + 1) % n], top));
        }
        self.parts.push(PartMesh {
            part,
            axis_start: c.start,
            axis_dir: dir,
            first_vertex: first,
            rings: body,
        });
    }

    fn part(&self, part: Part) -> &PartMesh {
        self.parts.iter().find(|p| p.part == part).unwrap()
    }

    fn part_of(&self, v: usize) -> &PartMesh {
        self.parts.iter().rev().find(|p| p.first_vertex <= v).unwrap()
    }
}

fn sided(side: Side, x: f64) -> f64 {
    match side {
        Side::Left => x,
        Side::Right => -x,
    }
}

fn build_toy_mesh() -> MeshBuilder {
    let mut m = MeshBuilder::default();
    let v = Vec3::new;
    m.add(
        Part::Torso,
        Capsule {
            start: v(0.0, 0.95, 0.0),
            end: v(0.0, 1.40, 0.0),
            radii: (0.11, 0.16),
            cap: 0.09,
            hint: Vec3::z(),
            segments: 16,
            body_rings: 9,
            cap_rings: 3,
        },
    );
    m.add(
        Part::Head,
        Capsule {
            start: v(0.0, 1.56, 0.0),
            end: v(0.0, 1.66, 0.0),
            radii: (0.095, 0.085),
            cap: 0.09,
            hint: Vec3::z(),
            segments: 12,
            body_rings: 2,
            cap_rings: 3,
        },
    );
    for side in [Side::Left, Side::Right] {
        let x = |a: f64| sided(side, a);
        m.add(
            Part::Arm(side),
            Capsule {
                start: v(x(0.19), 1.36, 0.0),
                end: v(x(0.69), 1.36, 0.0),
                radii: (0.045, 0.045),
                cap: 0.04,
                hint: Vec3::y(),
                segments: 8,
                body_rings: 10,
                cap_rings: 2,
            },
        );
        m.add(
            Part::Hand(side),
            Capsule {
                start: v(x(0.745), 1.36, 0.0),
                end: v(x(0.82), 1.36, 0.0),
                radii: (0.022, 0.04),
                cap: 0.03,
                hint: Vec3::y(),
                segments: 6,
                body_rings: 2,
                cap_rings: 2,
            },
        );
        m.add(
            Part::Leg(side),
            Capsule {
                start: v(x(0.09), 0.90, 0.0),
                end: v(x(0.09), 0.10, 0.0),
                radii: (0.065, 0.065),
                cap: 0.05,
                hint: Vec3::z(),
                segments: 8,
                body_rings: 16,
                cap_rings: 2,
            },
        );
        m.add(
            Part::Foot(side),
            Capsule {
                start: v(x(0.09), 0.05, -0.03),
                end: v(x(0.09), 0.05, 0.15),
                radii: (0.04, 0.045),
                cap: 0.04,
                hint: Vec3::y(),
                segments: 6,
                body_rings: 4,
                cap_rings: 2,
            },
        );
    }
    m
}

/// Ring-average joint definitions: `(part, ring, weight)` terms per joint.
fn joint_rings(j: usize) -> Vec<(Part, usize, f64)> {
    use Part::*;
    use Side::*;
    let side = |l: bool| if l { Left } else { Right };
    match j {
        0 => vec![(Torso, 0, 1.0)],
        1 | 2 => vec![(Leg(side(j == 1)), 0, 1.0)],
        3 => vec![(Torso, 2, 1.0)],
        4 | 5 => vec![(Leg(side(j == 4)), 8, 1.0)],
        6 => vec![(Torso, 4, 1.0)],
        7 | 8 => vec![(Leg(side(j == 7)), 16, 1.0)],
        9 => vec![(Torso, 6, 1.0)],
        10 | 11 => vec![(Foot(side(j == 10)), 3, 1.0)],
        12 => vec![(Torso, 9, 1.0)],
        13 | 14 => vec![(Torso, 8, 0.5), (Arm(side(j == 13)), 0, 0.5)],
        15 => vec![(Head, 0, 1.0)],
        16 | 17 => vec![(Arm(side(j == 16)), 0, 1.0)],
        18 | 19 => vec![(Arm(side(j == 18)), 5, 1.0)],
        20 | 21 => vec![(Arm(side(j == 20)), 10, 1.0)],
        22 | 23 => vec![(Hand(side(j == 22)), 1, 1.0)],
        _ => unreachable!("toy model has 24 joints"),
    }
}

/// Joints whose bones may influence each part.
fn candidate_joints(part: Part) -> &'static [usize] {
    use Side::*;
    match part {
        Part::Torso => &[0, 1, 2, 3, 6, 9, 12, 13, 14, 16, 17],
        Part::Head => &[12, 15],
        Part::Arm(Left) => &[13, 16, 18, 20, 22],
        Part::Arm(Right) => &[14, 17, 19, 21, 23],
        Part::Hand(Left) => &[20, 22],
        Part::Hand(Right) => &[21, 23],
        Part::Leg(Left) => &[0, 1, 4, 7, 10],
        Part::Leg(Right) => &[0, 2, 5, 8, 11],
        Part::Foot(Left) => &[7, 10],
        Part::Foot(Right) => &[8, 11],
    }
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Excess distance over which neighbouring bones blend.
const BLEND_RADIUS: f64 = 0.06;

fn region_of(part: Part, p: &Vec3) -> Region {
    match part {
        Part::Torso if p.y < 1.0 => Region::Pelvis,
        Part::Torso => Region::Torso,
        Part::Head if p.y > 1.66 || (p.z < -0.02 && p.y > 1.55) => Region::Scalp,
        Part::Head => Region::Face,
        Part::Arm(_) => Region::Arm,
        Part::Hand(_) => Region::Hand,
        Part::Leg(_) => Region::Leg,
        Part::Foot(_) => Region::Foot,
    }
}

/// Capsule-limb humanoid in a T-pose (y up, facing +z, metres) with 24
/// SMPL-ordered joints, 10 shape and 10 expression blendshapes and small random
/// pose blendshapes. Only the pose blendshapes depend on `seed`.
pub fn make_toy_model(seed: u64) -> BodyModel {
    let mesh = build_toy_mesh();
    let nv = mesh.verts.len();
    let j = TOY_JOINTS;
    let parents: Vec<Option<usize>> =
        TOY_PARENTS.iter().map(|&p| (p >= 0).then_some(p as usize)).collect();

    let mut j_regressor = vec![0.0f32; j * nv];
    for (jj, row) in j_regressor.chunks_mut(nv).enumerate() {
        for (part, ring, w) in joint_rings(jj) {
            let ids = &mesh.part(part).rings[ring];
            for &i in ids {
                row[i] += (w / ids.len() as f64) as f32;
            }
        }
    }
    let joints = regress_joints(&j_regressor, &mesh.verts);

    // Bone segment of each joint: towards its primary child (or a leaf tip).
    let tip = |jj: usize| -> Vec3 {
        let child = |c: usize| joints[c];
        match jj {
            0 => child(3),
            3 => child(6),
            6 => child(9),
            9 => child(12),
            12 => child(15),
            15 => Vec3::new(0.0, 1.75, 0.0),
            1 | 2 => child(jj + 3),
            4 | 5 => child(jj + 3),
            7 | 8 => child(jj + 3),
            10 | 11 => joints[jj] + Vec3::new(0.0, 0.0, 0.08),
            13 | 14 => child(jj + 3),
            16..=19 => child(jj + 2),
            20 | 21 => child(jj + 2),
            22 | 23 => joints[jj] + Vec3::new(sided(if jj == 22 { Side::Left } else { Side::Right }, 0.07), 0.0, 0.0),
            _ => unreachable!(),
        }
    };
    let bones: Vec<(Vec3, Vec3)> = (0..j).map(|jj| (joints[jj], tip(jj))).collect();

    let mut lbs_weights = vec![0.0f32; nv * j];
    let mut regions = Vec::with_capacity(nv);
    for (v, p) in mesh.verts.iter().enumerate() {
        let part = mesh.part_of(v).part;
        regions.push(region_of(part, p));
        let cands = candidate_joints(part);
        let d: Vec<f64> = cands
            .iter()
            .map(|&c| point_segment_distance(p, &bones[c].0, &bones[c].1))
            .collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = d
            .iter()
            .map(|&di| {
                let x = ((di - dmin) / BLEND_RADIUS).min(1.0);
                (1.0 - x * x).powi(2)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let row = &mut lbs_weights[v * j..(v + 1) * j];
        for (&c, &w) in cands.iter().zip(&raw) {
            row[c] = (w / total) as f32;
        }
        // f32 rounding: fold the residual into the largest entry
        let s: f32 = row.iter().sum();
        let imax = (0..j).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        row[imax] += 1.0 - s;
    }

    let shape_dirs = toy_shape_dirs(&mesh, &joints);
    let expr_dirs = toy_expr_dirs(&mesh);
    let np = 9 * (j - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose_dirs = Tensor::randn(&[nv * 3 * np], &mut rng)
        .map(|x| x * 1e-3)
        .into_data();

    let model = BodyModel {
        template: mesh.verts.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        faces: mesh.faces.clone(),
        shape_dirs,
        expr_dirs,
        pose_dirs,
        j_regressor,
        parents,
        lbs_weights,
        regions: Some(regions),
        num_betas: TOY_BETAS,
        num_exprs: TOY_EXPRS,
    };
    debug_assert!(model.validate().is_ok(), "{:?}", model.validate());
    model
}

fn toy_shape_dirs(mesh: &MeshBuilder, joints: &[Vec3]) -> Vec<f32> {
    let nv = mesh.verts.len();
    let mut dirs = vec![0.0f32; nv * 3 * TOY_BETAS];
    let head_center = (joints[15] + Vec3::new(0.0, 1.66, 0.0)) * 0.5;
    for (v, p) in mesh.verts.iter().enumerate() {
        let pm = mesh.part_of(v);
        let along = (p - pm.axis_start).dot(&pm.axis_dir);
        let radial = p - (pm.axis_start + pm.axis_dir * along);
        let side = p.x.signum();
        let mut basis = [Vec3::zeros(); TOY_BETAS];
        basis[0] = Vec3::new(0.0, 0.05 * p.y, 0.0);
        basis[1] = radial * 0.08;
        match pm.part {
            Part::Torso => {
                basis[2] = radial * 0.1;
                if p.z > 0.0 {
                    basis[7] = Vec3::new(0.0, 0.0, 0.03 * (-(p.y - 1.1).powi(2) / 0.02).exp());
                }
            }
            Part::Head => basis[5] = (p - head_center) * 0.08,
            Part::Arm(_) => {
                basis[3] = radial * 0.12;
                basis[6] = Vec3::new(0.03 * side, 0.0, 0.0);
            }
            Part::Hand(_) => {
                basis[6] = Vec3::new(0.03 * side, 0.0, 0.0);
                basis[9] = radial * 0.1;
            }
            Part::Leg(_) => {
                basis[4] = radial * 0.12;
                basis[8] = Vec3::new(0.02 * side, 0.0, 0.0);
            }
            Part::Foot(_) => {
                basis[8] = Vec3::new(0.02 * side, 0.0, 0.0);
                basis[9] = radial * 0.1;
            }
        }
        for (k, b) in basis.iter().enumerate() {
            for a in 0..3 {
                dirs[(v * 3 + a) * TOY_BETAS + k] = b[a] as f32;
            }
        }
    }
    dirs
}

fn toy_expr_dirs(mesh: &MeshBuilder) -> Vec<f32> {
    let nv = mesh.verts.len();
    let mut dirs = vec![0.0f32; nv * 3 * TOY_EXPRS];
    let head = mesh.part(Part::Head);
    let center = head.axis_start + head.axis_dir * 0.05;
    let bump_centers: Vec<Vec3> = (0..TOY_EXPRS)
        .map(|k| {
            let azim: f64 = (k % 5) as f64 / 4.0 * 2.0 - 1.0; // -1..1 → ±60°
            let elev: f64 = if k < 5 { 0.35 } else { -0.35 };
            let (a, e) = (azim * std::f64::consts::FRAC_PI_3, elev);
            center + Vec3::new(a.sin() * e.cos(), e.sin(), a.cos() * e.cos()) * 0.1
        })
        .collect();
    for (v, p) in mesh.verts.iter().enumerate() {
        if mesh.part_of(v).part != Part::Head {
            continue;
        }
        let n = (p - center).normalize();
        for (k, c) in bump_centers.iter().enumerate() {
            let g = 0.01 * (-(p - c).norm_squared() / (2.0 * 0.03 * 0.03)).exp();
            for a in 0..3 {
                dirs[(v * 3 + a) * TOY_EXPRS + k] = (n[a] * g) as f32;
            }
        }
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn toy_model_is_valid_and_deterministic() {
        let a = make_toy_model(3);
        a.validate().unwrap();
        assert_eq!(a.num_joints(), 24);
        assert!((700..1200).contains(&a.num_vertices()), "{}", a.num_vertices());
        assert_eq!(a, make_toy_model(3));
        assert_ne!(a.pose_dirs, make_toy_model(4).pose_dirs);
    }

    #[test]
    fn toy_mesh_is_closed_manifold() {
        let m = make_toy_model(0);
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &m.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
    }

    #[test]
    fn toy_mesh_faces_point_outward() {
        // Signed volume of a closed, outward-oriented mesh is positive.
        let m = make_toy_model(0);
        let p = |i: u32| Vec3::new(
            m.template[i as usize][0] as f64,
            m.template[i as usize][1] as f64,
            m.template[i as usize][2] as f64,
        );
        let vol: f64 = m.faces.iter().map(|f| p(f[0]).dot(&p(f[1]).cross(&p(f[2]))) / 6.0).sum();
        assert!(vol > 0.0, "{vol}");
    }

    #[test]
    fn toy_root_is_torso_ring_centroid() {
        let m = make_toy_model(0);
        let mesh = build_toy_mesh();
        let ids = &mesh.part(Part::Torso).rings[0];
        let c = ids.iter().fold(Vec3::zeros(), |a, &i| a + mesh.verts[i]) / ids.len() as f64;
        let j = m.skeleton(&[0.0; 10]).unwrap();
        assert!((j[0] - c).norm() < 1e-6);
        assert!((j[0] - Vec3::new(0.0, 0.95, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn rest_transforms_are_identity() {
        let m = make_toy_model(0);
        let p = BodyParams::rest(&m);
        for b in m.rigid_transforms(&p.betas, &p.pose).unwrap() {
            assert!((b - Mat4::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn coefficient_mismatch_is_reported() {
        let m = make_toy_model(0);
        let mut p = BodyParams::rest(&m);
        p.betas.pop();
        assert!(matches!(
            m.canonical_mesh(&p),
            Err(Error::CoefficientMismatch { what: "betas", .. })
        ));
    }
}
