//! Small rotation helpers shared by the body model, the decoders and the deformer.
//!
//! Geometry is evaluated in f64 and stored as f32.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};

pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Vec3 = Vector3<f64>;

const SMALL_ANGLE: f64 = 1e-8;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axis-angle vector to rotation matrix. Uses the second-order series below
/// `|w| < 1e-8`.
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + a * k + b * k * k
}

/// Partial derivatives `dR/dw_i` of [`rodrigues`], i = 0..3.
pub fn rodrigues_jacobian(w: &Vec3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let e = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < 1e-12 {
        // R ≈ I + [w] + ½[w]²
        let k = skew(w);
        return e.map(|ei| {
            let ki = skew(&ei);
            ki + 0.5 * (ki * k + k * ki)
        });
    }
    // Gallego & Yezzi: dR/dw_i = (w_i [w] + [w × (I − R) e_i]) / |w|² · R
    let r = rodrigues(w);
    let k = skew(w);
    let i_r = Mat3::identity() - r;
    [0, 1, 2].map(|i| (w[i] * k + skew(&w.cross(&(i_r * e[i])))) / theta2 * r)
}

/// Nearest rotation (in Frobenius norm) to `m`; `det = +1`.
pub fn polar_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix.
pub fn rotation_to_quat(r: &Mat3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    [q.w, q.i, q.j, q.k]
}

/// Rotation matrix of a (not necessarily normalised) quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *q.to_rotation_matrix().matrix()
}

/// Row-major 3×3 from f32 storage.
pub fn mat3_from(r: &[f32]) -> Mat3 {
    Mat3::from_row_slice(&r.iter().map(|&v| v as f64).collect::<Vec<_>>())
}

/// Row-major f32 storage of a 3×3.
pub fn mat3_to(m: &Mat3, out: &mut [f32]) {
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = m[(i, j)] as f32;
        }
    }
}

pub fn vec3_from(v: &[f32]) -> Vec3 {
    Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

/// Rigid 4×4 from rotation and translation.
pub fn rigid(r: &Mat3, t: &Vec3) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

pub fn transform_point(m: &Mat4, p: &Vec3) -> Vec3 {
    m.fixed_view::<3, 3>(0, 0) * p + m.fixed_view::<3, 1>(0, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rodrigues_quarter_turn() {
        let r = rodrigues(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let p = r * Vec3::x();
        assert!((p - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn rodrigues_small_angle_continuous() {
        let w = Vec3::new(3e-9, -1e-9, 2e-9);
        let a = rodrigues(&w);
        let b = rodrigues(&(w * 1.0000001));
        assert!((a - b).norm() < 1e-15);
        assert!((a.transpose() * a - Mat3::identity()).norm() < 1e-15);
    }

    #[test]
    fn rodrigues_jacobian_matches_differences() {
        for w in [
            Vec3::new(0.3, -0.7, 0.2),
            Vec3::new(1e-7, 0.0, -2e-7),
            Vec3::zeros(),
            Vec3::new(0.0, 2.5, 0.1),
        ] {
            let jac = rodrigues_jacobian(&w);
            let h = 1e-6;
            for i in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[i] += h;
                wm[i] -= h;
                let fd = (rodrigues(&wp) - rodrigues(&wm)) / (2.0 * h);
                assert!((fd - jac[i]).norm() < 1e-6, "w={w:?} i={i}");
            }
        }
    }

    #[test]
    fn polar_of_scaled_rotation() {
        let r = rodrigues(&Vec3::new(0.2, 0.4, -0.1));
        let m = r * Mat3::from_diagonal(&Vec3::new(2.0, 0.5, 1.3));
        let p = polar_rotation(&m);
        assert!((p - r).norm() < 1e-10);
        assert!((p.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_roundtrip() {
        let r = rodrigues(&Vec3::new(-1.2, 0.4, 2.0));
        let q = rotation_to_quat(&r);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!((quat_to_rotation(q) - r).norm() < 1e-12);
    }
}
