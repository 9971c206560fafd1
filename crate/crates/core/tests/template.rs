//! Atlas, subdivision, seeding and skinning-field checks on the toy body.

use lavatar_core::body::{make_toy_model, BodyModel, BodyParams};
use lavatar_core::math::Vec3;
use lavatar_core::template::*;
use std::sync::OnceLock;

fn toy() -> &'static BodyModel {
    static M: OnceLock<BodyModel> = OnceLock::new();
    M.get_or_init(|| make_toy_model(0))
}

fn avatar() -> &'static AvatarTemplate {
    static A: OnceLock<AvatarTemplate> = OnceLock::new();
    A.get_or_init(|| AvatarTemplate::build(toy(), 1, 64).unwrap())
}

fn face_area(m: &BodyModel, f: usize) -> f64 {
    let p = m.faces[f].map(|i| {
        let v = m.template[i as usize];
        Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    });
    0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm()
}

#[test]
fn body_template_covers_every_face() {
    let set = default_atlas(toy()).unwrap();
    let body = set.component(Label::Body);
    assert_eq!(body.faces, (0..toy().faces.len()).collect::<Vec<_>>());
    for l in Label::ALL {
        assert!(!set.component(l).faces.is_empty(), "{l} is empty");
        assert_eq!(set.component(l).layer, l.layer());
    }
}

#[test]
fn subdivision_preserves_area_and_counts() {
    let set = default_atlas(toy()).unwrap();
    let sub = subdivide(&set, 1);
    let m = &set.model;
    let edges = 3 * m.faces.len() / 2;
    assert_eq!(sub.model.num_vertices(), m.num_vertices() + edges);
    assert_eq!(sub.model.faces.len(), 4 * m.faces.len());
    sub.model.validate().unwrap();
    for f in 0..m.faces.len() {
        let children: f64 = (0..4).map(|k| face_area(&sub.model, 4 * f + k)).sum();
        assert!((children - face_area(m, f)).abs() < 1e-5 * face_area(m, f));
    }
    for l in Label::ALL {
        let before: f64 = set.component(l).faces.iter().map(|&f| face_area(m, f)).sum();
        let after: f64 = sub.component(l).faces.iter().map(|&f| face_area(&sub.model, f)).sum();
        assert!((before - after).abs() < 1e-5 * before, "{l}");
    }
    // midpoint vertices interpolate their edge's blendshapes, so the
    // subdivided mesh still deforms linearly with the same joints
    let params = BodyParams {
        betas: (0..m.num_betas).map(|i| 0.3 * (i as f32 - 4.0)).collect(),
        ..BodyParams::rest(m)
    };
    let coarse = m.canonical_mesh(&params).unwrap();
    let fine = sub.model.canonical_mesh(&params).unwrap();
    for v in 0..m.num_vertices() {
        assert!((coarse[v] - fine[v]).norm() < 1e-6);
    }
    let (a, b) = (m.skeleton(&params.betas).unwrap(), sub.model.skeleton(&params.betas).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).norm() < 1e-9);
    }
}

#[test]
fn seeds_sit_on_face_centroids() {
    let a = avatar();
    let m = &a.set.model;
    for s in &a.seeds {
        let p = m.faces[s.face].map(|i| {
            let v = m.template[i as usize];
            Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
        });
        let n = (p[1] - p[0]).cross(&(p[2] - p[0])).normalize();
        let offset = if s.label.is_exterior() { EXTERIOR_OFFSET as f64 } else { 0.0 };
        let want = (p[0] + p[1] + p[2]) / 3.0 + n * offset;
        let got = Vec3::new(s.mu0[0] as f64, s.mu0[1] as f64, s.mu0[2] as f64);
        assert!((got - want).norm() < 1e-6);
        let r = lavatar_core::math::mat3_from(&s.r0);
        assert!((r.transpose() * r - lavatar_core::math::Mat3::identity()).norm() < 1e-5);
        assert!((r.determinant() - 1.0).abs() < 1e-5);
        assert!((r.column(2) - n).norm() < 1e-5);
        assert!((s.s0[0] - 4.0 * s.s0[2]).abs() < 1e-6);
    }
}

#[test]
fn baked_offsets_follow_the_mesh() {
    let a = avatar();
    let m = &a.set.model;
    let params = BodyParams {
        betas: (0..m.num_betas).map(|i| 0.5 - 0.1 * i as f32).collect(),
        expr: (0..m.num_exprs).map(|i| 0.2 * i as f32).collect(),
        ..BodyParams::rest(m)
    };
    let mesh = m.canonical_mesh(&params).unwrap();
    for s in a.seeds.iter().filter(|s| s.label == Label::Body).step_by(7) {
        let centroid = m.faces[s.face].iter().fold(Vec3::zeros(), |acc, &i| acc + mesh[i as usize]) / 3.0;
        let mut p = Vec3::new(s.mu0[0] as f64, s.mu0[1] as f64, s.mu0[2] as f64);
        for c in 0..3 {
            for (k, &b) in params.betas.iter().enumerate() {
                p[c] += (s.shape_offsets[c * m.num_betas + k] * b) as f64;
            }
            for (k, &e) in params.expr.iter().enumerate() {
                p[c] += (s.expr_offsets[c * m.num_exprs + k] * e) as f64;
            }
        }
        assert!((p - centroid).norm() < 1e-5);
    }
}

#[test]
fn weights_are_normalised() {
    for s in &avatar().seeds {
        let total: f32 = s.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(s.weights.iter().all(|&w| w >= 0.0));
    }
}

#[test]
fn field_matches_surface_weights() {
    // the field the avatar actually uses: built on the subdivided template
    let m = &avatar().set.model;
    let field = build_skinning_field(m, 64);
    // at cell centres the lookup returns exactly the cell's entry
    let (w, clamped) = field.lookup(&field.cell_center(20, 31, 40));
    assert!(!clamped);
    for (a, b) in w.iter().zip(field.cell_weights(20, 31, 40)) {
        assert!((a - b).abs() < 1e-6);
    }
    // on the surface, the field agrees with barycentric interpolation
    let mut total = 0.0;
    let mut count = 0;
    for face in m.faces.iter().step_by(3) {
        let p = face.iter().fold(Vec3::zeros(), |acc, &i| {
            let v = m.template[i as usize];
            acc + Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
        }) / 3.0;
        let (w, _) = field.lookup(&p);
        let mut l1 = 0.0;
        for j in 0..m.num_joints() {
            let bary: f32 = face.iter().map(|&i| m.weights_of(i as usize)[j]).sum::<f32>() / 3.0;
            l1 += (w[j] - bary).abs() as f64;
        }
        total += l1;
        count += 1;
    }
    let mean = total / count as f64;
    assert!(mean < 0.1, "mean L1 {mean}");
}

#[test]
fn components_never_share_texels() {
    let a = avatar();
    let half = 0.5 / LAYER_RES as f32;
    for (i, s) in a.seeds.iter().enumerate() {
        for t in &a.seeds[i + 1..] {
            if s.layer == t.layer && s.label != t.label {
                let close = (s.uv[0] - t.uv[0]).abs() < half && (s.uv[1] - t.uv[1]).abs() < half;
                assert!(!close, "{} and {} collide at {:?}", s.label, t.label, s.uv);
            }
        }
    }
    for l in Label::ALL {
        let b = l.uv_box();
        for s in &a.seeds[a.ranges[l.index()].clone()] {
            assert_eq!(s.label, l);
            assert!(s.uv[0] > b[0] && s.uv[0] < b[2] && s.uv[1] > b[1] && s.uv[1] < b[3]);
        }
    }
}

#[test]
fn seed_bundle_roundtrip() {
    let a = avatar();
    let dir = tempfile::tempdir().unwrap();
    a.save_bundle(dir.path(), "seeds").unwrap();
    let (seeds, sidecar) = load_seed_bundle(dir.path(), "seeds").unwrap();
    assert_eq!(seeds, a.seeds);
    assert_eq!(sidecar, a.sidecar());
    assert_eq!(sidecar.components.len(), Label::COUNT);
}

#[test]
fn missing_regions_are_rejected() {
    let mut m = toy().clone();
    m.regions = None;
    assert!(default_atlas(&m).is_err());
}

/// Two far-apart tetrahedra skinned to different joints.
fn two_islands() -> BodyModel {
    let tet = |o: [f32; 3]| {
        [[0.0, 0.0, 0.0], [0.02, 0.0, 0.0], [0.0, 0.02, 0.0], [0.0, 0.0, 0.02]]
            .map(|p: [f32; 3]| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
    };
    let template: Vec<[f32; 3]> = tet([0.0; 3]).into_iter().chain(tet([1.0, 0.5, 0.3])).collect();
    let faces = [[0u32, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    let faces: Vec<[u32; 3]> = faces.iter().chain(&faces).enumerate().map(|(i, f)| {
        let o = if i < 4 { 0 } else { 4 };
        f.map(|v| v + o)
    }).collect();
    let mut lbs_weights = vec![0.0; 8 * 2];
    for v in 0..8 {
        lbs_weights[v * 2 + usize::from(v >= 4)] = 1.0;
    }
    BodyModel {
        template,
        faces,
        shape_dirs: vec![],
        expr_dirs: vec![],
        pose_dirs: vec![0.0; 8 * 3 * 9],
        j_regressor: vec![0.0; 2 * 8],
        parents: vec![None, Some(0)],
        lbs_weights,
        regions: None,
        num_betas: 0,
        num_exprs: 0,
    }
}

#[test]
fn field_cells_are_normalised() {
    let field = build_skinning_field(&avatar().set.model, 16);
    for cell in field.weights.chunks(field.num_joints) {
        assert!((cell.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn isolated_vertex_dominates_its_cells() {
    let m = two_islands();
    let field = build_skinning_field(&m, 64);
    for v in [0usize, 5] {
        let p = m.template[v];
        let (w, clamped) = field.lookup(&Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
        assert!(!clamped);
        for (a, b) in w.iter().zip(m.weights_of(v)) {
            assert!((a - b).abs() <= 1e-3);
        }
    }
}

#[test]
fn out_of_grid_seeds_are_clamped() {
    let a = avatar();
    let field = build_skinning_field(&a.set.model, 16);
    let mut seeds: Vec<GaussianSeed> = a.seeds[a.ranges[Label::Hair.index()].clone()].iter().take(3).cloned().collect();
    seeds[0].mu0 = [0.0, 5.0, 0.0];
    assert_eq!(assign_weights(&mut seeds, &a.set.model, &field), 1);
    assert!((seeds[0].weights.iter().sum::<f32>() - 1.0).abs() < 1e-5);
}
