//! Canonical-to-posed deformation of Gaussian rows: baked shape, expression
//! and pose offsets, then linear blend skinning with rotation and scale updates.

use crate::body::{blend_transforms, pose_feature, BodyModel, BodyParams};
use crate::math::{mat3_from, mat3_to, polar_rotation, vec3_from, Mat3, Mat4, Vec3};
use crate::render::{col, GaussianBatch, GAUSSIAN_WIDTH};
use crate::template::GaussianSeed;
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Blends whose linear part has a determinant outside this range are reported.
pub const DET_RANGE: (f64, f64) = (0.5, 2.0);

/// Per-seed displacement `B_s·β + B_e·ψ + B_p·posefeat(θ)` from the baked offsets.
pub fn seed_offsets(seeds: &[GaussianSeed], params: &BodyParams) -> Result<Vec<[f32; 3]>> {
    let feat = pose_feature(&params.pose);
    let mut out = Vec::with_capacity(seeds.len());
    for s in seeds {
        check_len("betas", s.shape_offsets.len(), 3 * params.betas.len())?;
        check_len("expression", s.expr_offsets.len(), 3 * params.expr.len())?;
        check_len("pose feature", s.pose_offsets.len(), 3 * feat.len())?;
        let dot = |dirs: &[f32], coeffs: &mut dyn Iterator<Item = f64>, c: usize, n: usize| -> f64 {
            dirs[c * n..(c + 1) * n].iter().zip(coeffs).map(|(&d, x)| d as f64 * x).sum()
        };
        let mut d = [0.0f32; 3];
        for (c, dc) in d.iter_mut().enumerate() {
            let nb = params.betas.len();
            let ne = params.expr.len();
            let v = dot(&s.shape_offsets, &mut params.betas.iter().map(|&b| b as f64), c, nb)
                + dot(&s.expr_offsets, &mut params.expr.iter().map(|&e| e as f64), c, ne)
                + dot(&s.pose_offsets, &mut feat.iter().copied(), c, feat.len());
            *dc = v as f32;
        }
        out.push(d);
    }
    Ok(out)
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::CoefficientMismatch {
            what,
            expected: expected / 3,
            got: got / 3,
        });
    }
    Ok(())
}

/// Adds the per-seed offsets to the position columns; α, c, R and s pass through.
pub fn warp_shape<'t>(rows: Var<'t>, seeds: &[GaussianSeed], params: &BodyParams) -> Result<Var<'t>> {
    let n = check_rows(&rows.shape(), seeds.len(), "warp_shape")?;
    let offsets = seed_offsets(seeds, params)?;
    let mut shift = vec![0.0f32; n * GAUSSIAN_WIDTH];
    for (i, d) in offsets.iter().enumerate() {
        shift[i * GAUSSIAN_WIDTH + col::MU..][..3].copy_from_slice(d);
    }
    let shift = rows.tape().constant(Tensor::new(vec![n, GAUSSIAN_WIDTH], shift)?);
    rows.add(shift)
}

fn check_rows(shape: &[usize], n: usize, op: &'static str) -> Result<usize> {
    if shape != [n, GAUSSIAN_WIDTH] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![n, GAUSSIAN_WIDTH],
        });
    }
    Ok(n)
}

/// Blended per-seed transforms `T = Σ wᵢBᵢ`.
#[derive(Clone, Debug)]
pub struct DeformContext {
    pub transforms: Vec<Mat4>,
    /// Seeds whose blended linear part has a determinant outside [`DET_RANGE`].
    pub degenerate: Vec<usize>,
}

impl DeformContext {
    /// Blends the body's joint transforms for `params` with each seed's weights.
    pub fn new(model: &BodyModel, params: &BodyParams, seeds: &[GaussianSeed]) -> Result<Self> {
        let joints = model.rigid_transforms(&params.betas, &params.pose)?;
        Self::from_joint_transforms(&joints, seeds)
    }

    pub fn from_joint_transforms(joints: &[Mat4], seeds: &[GaussianSeed]) -> Result<Self> {
        let mut transforms = Vec::with_capacity(seeds.len());
        let mut degenerate = Vec::new();
        for (i, s) in seeds.iter().enumerate() {
            check_len("skinning weights", 3 * s.weights.len(), 3 * joints.len())?;
            let t = blend_transforms(&s.weights, joints);
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteTransform { seed: i });
            }
            let det = t.fixed_view::<3, 3>(0, 0).determinant();
            if !(DET_RANGE.0..=DET_RANGE.1).contains(&det) {
                degenerate.push(i);
            }
            transforms.push(t);
        }
        if !degenerate.is_empty() {
            log::warn!("{} seeds have degenerate blended transforms", degenerate.len());
        }
        Ok(Self { transforms, degenerate })
    }

    /// Every seed moved by the same rigid transform (rest pose when identity).
    pub fn uniform(transform: Mat4, n: usize) -> Self {
        Self {
            transforms: vec![transform; n],
            degenerate: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

struct PoseOp {
    linear: Vec<Mat3>,
    polar: Vec<Mat3>,
    rot: Vec<Mat3>,
    scale: Vec<Vec3>,
    stretch: Vec<Vec3>,
}

impl CustomOp for PoseOp {
    fn name(&self) -> &'static str {
        "pose_transform"
    }

    fn backward(&self, g: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.linear.len();
        let mut out = g.clone();
        for i in 0..n {
            let gi = &g.data()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
            let a = &self.linear[i];
            let g_mu = a.transpose() * vec3_from(&gi[col::MU..col::MU + 3]);
            let mut g_r = self.polar[i].transpose() * mat3_from(&gi[col::ROT..col::ROT + 9]);
            let ata = a.transpose() * a;
            let mut g_s = [0.0f32; 3];
            for k in 0..3 {
                let gs = gi[col::SCALE + k] as f64;
                let norm = self.stretch[i][k];
                g_s[k] = (gs * norm) as f32;
                if norm > 0.0 {
                    // d‖A r_k‖ / d r_k = AᵀA r_k / ‖A r_k‖
                    let dr = ata * self.rot[i].column(k) * (gs * self.scale[i][k] / norm);
                    for r in 0..3 {
                        g_r[(r, k)] += dr[r];
                    }
                }
            }
            let row = &mut out.data_mut()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
            for k in 0..3 {
                row[col::MU + k] = g_mu[k] as f32;
                row[col::SCALE + k] = g_s[k];
            }
            mat3_to(&g_r, &mut row[col::ROT..col::ROT + 9]);
        }
        vec![Some(out)]
    }
}

/// Skins every row by its blended transform: μ′ = T₃μ + t, R′ = polar(T₃)·R,
/// s′_k = s_k·‖T₃ R e_k‖. Opacity and colour pass through.
pub fn pose_transform<'t>(rows: Var<'t>, ctx: &DeformContext) -> Result<Var<'t>> {
    let n = check_rows(&rows.shape(), ctx.len(), "pose_transform")?;
    let input = rows.value();
    let mut out = (*input).clone();
    let mut op = PoseOp {
        linear: Vec::with_capacity(n),
        polar: Vec::with_capacity(n),
        rot: Vec::with_capacity(n),
        scale: Vec::with_capacity(n),
        stretch: Vec::with_capacity(n),
    };
    for (i, t) in ctx.transforms.iter().enumerate() {
        let row = &mut out.data_mut()[i * GAUSSIAN_WIDTH..(i + 1) * GAUSSIAN_WIDTH];
        let a: Mat3 = t.fixed_view::<3, 3>(0, 0).into();
        let p = polar_rotation(&a);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTransform { seed: i });
        }
        let mu = a * vec3_from(&row[col::MU..col::MU + 3]) + t.fixed_view::<3, 1>(0, 3);
        let r = mat3_from(&row[col::ROT..col::ROT + 9]);
        let s = vec3_from(&row[col::SCALE..col::SCALE + 3]);
        let stretch = Vec3::from_fn(|k, _| (a * r.column(k)).norm());
        for k in 0..3 {
            row[col::MU + k] = mu[k] as f32;
            row[col::SCALE + k] = (s[k] * stretch[k]) as f32;
        }
        mat3_to(&(p * r), &mut row[col::ROT..col::ROT + 9]);
        op.linear.push(a);
        op.polar.push(p);
        op.rot.push(r);
        op.scale.push(s);
        op.stretch.push(stretch);
    }
    Ok(rows.tape().custom(op, &[rows], out))
}

/// Gradient-free warp + pose of a decoded batch.
pub fn deform_batch(
    batch: &GaussianBatch,
    seeds: &[GaussianSeed],
    params: &BodyParams,
    ctx: &DeformContext,
) -> Result<GaussianBatch> {
    let tape = Tape::new();
    let rows = warp_shape(tape.constant(batch.params.clone()), seeds, params)?;
    let posed = pose_transform(rows, ctx)?;
    Ok(GaussianBatch {
        params: (*posed.value()).clone(),
        labels: batch.labels.clone(),
    })
}

/// One frame of a pose sequence. Missing shape or expression fall back to the
/// subject's own coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    #[serde(alias = "theta")]
    pub pose: Vec<[f32; 3]>,
    #[serde(default, alias = "beta")]
    pub betas: Option<Vec<f32>>,
    #[serde(default, alias = "psi")]
    pub expr: Option<Vec<f32>>,
}

impl PoseFrame {
    pub fn resolve(&self, subject: &BodyParams) -> BodyParams {
        BodyParams {
            betas: self.betas.clone().unwrap_or_else(|| subject.betas.clone()),
            pose: self.pose.clone(),
            expr: self.expr.clone().unwrap_or_else(|| subject.expr.clone()),
        }
    }
}

/// Reads a JSON array of frames.
pub fn load_pose_sequence(path: impl AsRef<Path>) -> Result<Vec<PoseFrame>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::asset(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::asset(path, e.to_string()))
}

pub fn save_pose_sequence(frames: &[PoseFrame], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(frames)?)?;
    Ok(())
}
