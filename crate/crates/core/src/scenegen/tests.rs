use super::*;
use crate::renderer::generate_rays;

fn unit_box_part(joint: JointType, range: (f64, f64)) -> PartSpec {
    PartSpec {
        name: "p".into(),
        captions: ("closed p".into(), "open p".into()),
        shape: BoxShape { min: [0.4, 0.4, 0.4], max: [0.6, 0.6, 0.6] },
        joint,
        axis: [0.0, 0.0, 1.0],
        origin: [0.5, 0.5, 0.5],
        range,
        color: [1.0, 0.0, 0.0],
    }
}

fn spec_with(parts: Vec<PartSpec>) -> SceneSpec {
    SceneSpec { parts, static_geometry: vec![], embed_seed: 11 }
}

/// First point along the ray inside any box, by fixed-step marching.
fn march(scene: &SceneModel, ray: &Ray, kappa: &ControlState, step: f64) -> Option<(f64, i32)> {
    let inside = |b: &BoxShape, p: [f64; 3]| (0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a]);
    let mut t = ray.near;
    while t <= ray.far + step {
        let p = ray.at(t);
        for b in &scene.spec.static_geometry {
            if inside(&b.shape, p) {
                return Some((t, -1));
            }
        }
        for (i, part) in scene.spec.parts.iter().enumerate() {
            let pose = scene.part_pose(i, kappa.kappa[i]);
            if inside(&part.shape, pose.inverse_apply(p)) {
                return Some((t, i as i32));
            }
        }
        t += step;
    }
    None
}

#[test]
fn joint_poses() {
    let hinge = build_scene(&spec_with(vec![unit_box_part(JointType::Hinge, (0.0, PI / 2.0))])).unwrap();
    let p = hinge.part_pose(0, 0.0);
    for c in hinge.spec.parts[0].shape.corners() {
        assert_eq!(p.apply(c), c);
    }
    let slide = build_scene(&spec_with(vec![PartSpec {
        axis: [0.0, 2.0, 0.0],
        ..unit_box_part(JointType::Slide, (0.0, 0.2))
    }]))
    .unwrap();
    let moved = slide.part_pose(0, 0.5).apply([0.4, 0.4, 0.4]);
    assert!((moved[1] - 0.5).abs() < 1e-15 && moved[0] == 0.4 && moved[2] == 0.4);
}

#[test]
fn hinge_matches_rotation_matrix_oracle() {
    let scene = build_scene(&spec_with(vec![unit_box_part(JointType::Hinge, (0.0, PI / 2.0))])).unwrap();
    let x = [0.6, 0.45, 0.55];
    let got = scene.part_pose(0, 1.0).apply(x);
    let (s, c) = (PI / 2.0).sin_cos();
    let (dx, dy) = (x[0] - 0.5, x[1] - 0.5);
    let expect = [0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy, x[2]];
    for a in 0..3 {
        assert!((got[a] - expect[a]).abs() < 1e-12);
    }
    // arbitrary axis against the quaternion sandwich product
    let axis = [0.3f64, -0.5, 0.8];
    let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = axis.map(|v| v / n);
    let th = 0.7f64;
    let (qw, qs) = ((th / 2.0).cos(), (th / 2.0).sin());
    let q = [qw, qs * u[0], qs * u[1], qs * u[2]];
    let v = [0.2, -0.1, 0.4];
    let mul = |a: [f64; 4], b: [f64; 4]| {
        [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ]
    };
    let r = mul(mul(q, [0.0, v[0], v[1], v[2]]), [q[0], -q[1], -q[2], -q[3]]);
    let m = rotation(axis, th);
    let got = mat_vec(&m, v);
    for a in 0..3 {
        assert!((got[a] - r[a + 1]).abs() < 1e-12);
    }
}

#[test]
fn validation_rejects_escaping_parts() {
    let mut part = unit_box_part(JointType::Slide, (0.0, 0.5));
    part.axis = [1.0, 0.0, 0.0];
    let err = build_scene(&spec_with(vec![part])).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert!(build_scene(&spec_with(vec![])).is_err());
    assert!(build_scene(&toy_scene_spec()).is_ok());
}

#[test]
fn empty_view_and_filled_view() {
    let scene = build_scene(&spec_with(vec![unit_box_part(JointType::Hinge, (0.0, 1.0))])).unwrap();
    let away = Camera::look_at([0.5, -1.0, 0.5], [0.5, -2.0, 0.5], [0.0, 0.0, 1.0], 40.0, 8, 8).unwrap();
    let f = gt_render(&scene, &away, &ControlState::uniform(1, 0.2)).unwrap();
    assert!(f.rgb.iter().all(|&v| v == 1.0));
    assert!(f.mask.iter().all(|&m| m == -1));
    let rays = generate_rays(&away, &away.all_pixels()).unwrap();
    assert!(f.depth.iter().zip(&rays).all(|(&d, r)| d == r.far as f32));

    let mut spec = spec_with(vec![unit_box_part(JointType::Hinge, (0.0, 1.0))]);
    spec.static_geometry.push(StaticBox {
        name: "red".into(),
        shape: BoxShape { min: [0.0, 0.7, 0.0], max: [1.0, 1.0, 1.0] },
        color: [1.0, 0.0, 0.0],
    });
    let scene = build_scene(&spec).unwrap();
    let cam = Camera::look_at([0.5, 0.62, 0.5], [0.5, 1.0, 0.5], [0.0, 0.0, 1.0], 20.0, 8, 8).unwrap();
    let f = gt_render(&scene, &cam, &ControlState::uniform(1, 0.0)).unwrap();
    assert!(f.rgb.chunks(3).all(|c| c == [1.0, 0.0, 0.0]));
    assert!(f.mask.iter().all(|&m| m == -1));
}

#[test]
fn door_opening_reveals_cabinet() {
    let scene = build_scene(&toy_scene_spec()).unwrap();
    let cam = Camera::look_at([0.45, -0.6, 0.4], [0.45, 0.58, 0.35], [0.0, 0.0, 1.0], 10.0, 8, 8).unwrap();
    let closed = gt_render(&scene, &cam, &ControlState::new(vec![0.0, 0.0]).unwrap()).unwrap();
    let open = gt_render(&scene, &cam, &ControlState::new(vec![1.0, 0.0]).unwrap()).unwrap();
    let rays = generate_rays(&cam, &cam.all_pixels()).unwrap();
    let mut flips = 0;
    for i in 0..64 {
        if closed.mask[i] == 0 && open.mask[i] == -1 {
            flips += 1;
            assert!(open.depth[i] > closed.depth[i]);
            let (t0, id0) = march(&scene, &rays[i], &ControlState::new(vec![0.0, 0.0]).unwrap(), 1e-4).unwrap();
            let (t1, id1) = march(&scene, &rays[i], &ControlState::new(vec![1.0, 0.0]).unwrap(), 1e-4).unwrap();
            assert_eq!((id0, id1), (0, -1));
            assert!((t0 - closed.depth[i] as f64).abs() < 2e-4);
            assert!((t1 - open.depth[i] as f64).abs() < 2e-4);
        }
    }
    assert!(flips > 40, "only {flips} pixels changed");
}

#[test]
fn hits_agree_with_ray_marching() {
    let scene = build_scene(&toy_scene_spec()).unwrap();
    let cams = toy_trajectory(5, 32, 32, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for (ci, cam) in cams.iter().enumerate() {
        let k = ControlState::new(vec![ci as f64 / 4.0, 1.0 - ci as f64 / 4.0]).unwrap();
        let f = gt_render(&scene, cam, &k).unwrap();
        let rays = generate_rays(cam, &cam.all_pixels()).unwrap();
        for _ in 0..60 {
            let i = rng.random_range(0..rays.len());
            let marched = march(&scene, &rays[i], &k, 2e-4);
            match marched {
                Some((t, id)) => {
                    // grazing hits near silhouettes can differ by a step
                    if (t - f.depth[i] as f64).abs() < 5e-4 {
                        assert_eq!(id, f.mask[i]);
                        checked += 1;
                    } else {
                        assert!((t - f.depth[i] as f64).abs() < 0.05, "pixel {i}: {t} vs {}", f.depth[i]);
                    }
                }
                None => assert_eq!(f.mask[i], -1),
            }
        }
    }
    assert!(checked > 250);
}

#[test]
fn depth_is_continuous_in_kappa_off_boundaries() {
    let scene = build_scene(&toy_scene_spec()).unwrap();
    let cam = &toy_trajectory(3, 32, 32, 1).unwrap()[1];
    let a = gt_render(&scene, cam, &ControlState::new(vec![0.3, 0.5]).unwrap()).unwrap();
    let b = gt_render(&scene, cam, &ControlState::new(vec![0.3 + 1e-6, 0.5]).unwrap()).unwrap();
    for i in 0..a.mask.len() {
        if a.mask[i] == b.mask[i] {
            assert!((a.depth[i] - b.depth[i]).abs() < 1e-4);
        }
    }
}

#[test]
fn dataset_generation_contracts() {
    let spec = toy_scene_spec();
    let cams = toy_trajectory(1, 8, 8, 0).unwrap();
    let ds = generate_dataset(&spec, &cams, &[ControlState::uniform(2, 0.5)], &[Split::Train]).unwrap();
    assert_eq!(ds.frames.len(), 1);
    assert!(generate_dataset(&spec, &cams, &[], &[]).is_err());

    // constant control state: masks change with the viewpoint alone
    let cams = toy_trajectory(3, 16, 16, 0).unwrap();
    let k = vec![ControlState::uniform(2, 0.4); 3];
    let ds = generate_dataset(&spec, &cams, &k, &[Split::Train; 3]).unwrap();
    let scene = build_scene(&spec).unwrap();
    for (f, cam) in ds.frames.iter().zip(&cams) {
        assert_eq!(f.mask, gt_render(&scene, cam, &k[0]).unwrap().mask);
    }
    ds.validate().unwrap();
}

#[test]
fn toy_recipe_occlusion_change_matches_marched_counts() {
    let ds = toy_dataset(60, 48, 48, 7).unwrap();
    assert_eq!(ds.alpha(), 2);
    assert_eq!(ds.split_indices(Split::Test), vec![0, 10, 20, 30, 40, 50]);
    assert_eq!(ds.frames[0].kappa.kappa[0], 0.0);
    let scene = build_scene(&ds.manifest.spec).unwrap();
    let count = |f: &Frame, marched: bool, part: i32| -> usize {
        if !marched {
            return f.mask.iter().filter(|&&m| m == part).count();
        }
        let rays = generate_rays(&f.camera, &f.camera.all_pixels()).unwrap();
        rays.iter()
            .filter(|r| march(&scene, r, &f.kappa, 1.5e-3).is_some_and(|h| h.1 == part))
            .count()
    };
    for part in [0, 1] {
        let rendered = count(&ds.frames[59], false, part) as i64 - count(&ds.frames[0], false, part) as i64;
        let marched = count(&ds.frames[59], true, part) as i64 - count(&ds.frames[0], true, part) as i64;
        assert!((rendered - marched).abs() <= 12, "part {part}: {rendered} vs {marched}");
    }
    assert_ne!(count(&ds.frames[0], false, 0), count(&ds.frames[59], false, 0));
}

#[test]
fn dataset_round_trip_and_corruption() {
    let ds = toy_dataset(6, 12, 10, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    for (a, b) in back.frames.iter().zip(&ds.frames) {
        assert!(a.rgb.iter().zip(&b.rgb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.camera, b.camera);
        assert_eq!(a.kappa, b.kappa);
    }

    let f3 = dir.path().join(frame_file_name(3));
    let bytes = std::fs::read(&f3).unwrap();
    std::fs::write(&f3, &bytes[..bytes.len() - 7]).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format { .. }) && msg.contains("frame 3") && msg.contains("truncated"), "{msg}");

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    std::fs::write(&f3, &bad).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Version { found: 9, expected: 1, .. }));

    bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&f3, &bad).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Format { .. }));
    std::fs::write(&f3, &bytes).unwrap();
    load_dataset(dir.path()).unwrap();

    let mpath = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&mpath).unwrap();
    std::fs::write(&mpath, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Version { found: 2, .. }));
    std::fs::write(&mpath, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Json { .. }));
    std::fs::remove_file(&mpath).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Io { .. }));
}
