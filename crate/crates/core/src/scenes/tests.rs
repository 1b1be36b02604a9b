use super::*;
use crate::diffengine::Tape;
use crate::fields::AnalyticField;
use crate::shadowrender::{incoming_radiance, light_at_binary, SampleConfig};

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("umbra-scenes-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn test_camera(res: usize) -> CameraModel {
    CameraModel::look_at(
        res,
        res,
        Vec3::new(0.0, -1.7, 1.0),
        Vec3::new(0.0, 0.0, -0.2),
        Vec3::new(0.0, 0.0, 1.0),
        50.0,
    )
}

#[test]
fn look_at_camera_is_orthonormal_and_points_at_target() {
    let cam = test_camera(64);
    cam.validate().unwrap();
    assert!((cam.position() - Vec3::new(0.0, -1.7, 1.0)).norm() < 1e-12);
    // The center pixel ray passes through the look-at target.
    let ray = cam.pixel_ray(cam.cx, cam.cy, 2.0);
    let target = Vec3::new(0.0, 0.0, -0.2);
    let along = (target - ray.origin).normalized();
    assert!((along - ray.dir).norm() < 1e-12);
}

#[test]
fn bad_rotation_is_rejected() {
    let mut cam = test_camera(16);
    cam.rotation[0][0] += 1e-3;
    let err = cam.validate().unwrap_err();
    assert!(err.to_string().contains("rotation"));
}

#[test]
fn footprint_matches_pixel_rays() {
    let cam = test_camera(64);
    let fp = cam.footprint(10, 40, 1.0);
    // u = v = 0 is the pixel center, u = 1 its right edge.
    let center = cam.pixel_ray(10.5, 40.5, 1.0);
    assert!((fp.ray(0.0, 0.0).dir - center.dir).norm() < 1e-12);
    let edge = cam.pixel_ray(11.0, 40.5, 1.0);
    assert!((fp.ray(1.0, 0.0).dir - edge.dir).norm() < 1e-12);
    // locate() inverts ray(): a world point on the sub-ray maps back.
    let x = fp.ray(0.3, -0.6).at(1.4);
    let (u, v) = fp.locate(x).unwrap();
    assert!((u - 0.3).abs() < 1e-9 && (v + 0.6).abs() < 1e-9);
}

#[test]
fn empty_scene_binary_renders_fully_lit() {
    let mut scene = SceneSpec::builtin("sphere-plane", 32, 32).unwrap();
    // Ground only: every visible pixel sees the light.
    scene.object = AnalyticSdf::plane(Vec3::new(0.0, 0.0, 1.0), -0.4);
    let light = LightSource::Directional { direction: Vec3::new(0.0, 0.0, 1.0), intensity: 1.0 };
    let raster = oracle_render(&scene, &light, ImageKind::Binary);
    assert!(raster.data().iter().all(|&v| v == 1.0));
}

#[test]
fn overhead_shadow_is_the_analytic_disk() {
    // Floating sphere so the shadow disk is not hidden under the occluder.
    let mut scene = SceneSpec::builtin("sphere-plane", 96, 96).unwrap();
    scene.object = AnalyticSdf::sphere(Vec3::new(0.0, 0.0, 0.1), 0.2);
    let light = LightSource::Directional { direction: Vec3::new(0.0, 0.0, 1.0), intensity: 1.0 };
    let raster = oracle_render(&scene, &light, ImageKind::Binary);

    let geom = scene.geometry();
    let plane = AnalyticSdf::plane(scene.ground.normal, scene.ground.offset);
    let (mut rendered, mut predicted, mut mismatched) = (0usize, 0usize, 0usize);
    for py in 0..96 {
        for px in 0..96 {
            let ray = scene
                .camera
                .pixel_ray(px as f64 + 0.5, py as f64 + 0.5, scene.scene_radius);
            let t = geom.march_intersect(&ray, ORACLE_MARCH_STEPS);
            let tp = plane.ray_intersect(&ray);
            let on_ground = matches!((t, tp), (Some(t), Some(tp)) if (t - tp).abs() < 1e-3);
            if !on_ground {
                continue;
            }
            let p = ray.at(t.unwrap());
            let in_disk = p.x * p.x + p.y * p.y < 0.2 * 0.2;
            let in_shadow = raster.get(px, py)[0] == 0.0;
            rendered += in_shadow as usize;
            predicted += in_disk as usize;
            mismatched += (in_shadow != in_disk) as usize;
        }
    }
    assert!(predicted > 100);
    let rel = (rendered as f64 - predicted as f64).abs() / predicted as f64;
    assert!(rel < 0.02, "shadow pixel count off by {rel:.3} ({rendered} vs {predicted})");
    assert!((mismatched as f64) < 0.02 * predicted as f64);
}

#[test]
fn lambertian_plane_at_normal_incidence_renders_albedo() {
    let mut scene = SceneSpec::builtin("sphere-plane", 24, 24).unwrap();
    scene.object = AnalyticSdf::plane(Vec3::new(0.0, 0.0, 1.0), -0.4);
    let light = LightSource::Directional { direction: Vec3::new(0.0, 0.0, 1.0), intensity: 1.0 };
    let raster = oracle_render(&scene, &light, ImageKind::Rgb);
    let geom = scene.geometry();
    for py in 0..24 {
        for px in 0..24 {
            let ray = scene
                .camera
                .pixel_ray(px as f64 + 0.5, py as f64 + 0.5, scene.scene_radius);
            let px_val = raster.get(px, py);
            if geom.march_intersect(&ray, 512).is_some() {
                for (c, a) in px_val.iter().zip([0.7, 0.7, 0.7]) {
                    assert!((c - a).abs() < 1e-9);
                }
            } else {
                assert!(px_val.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn oracle_agrees_with_binarized_transmittance() {
    let scene = SceneSpec::builtin("sphere-plane", 32, 32).unwrap();
    let light_dir = Vec3::new(0.4, 0.1, 0.9).normalized();
    let light = LightSource::Directional { direction: light_dir, intensity: 1.0 };
    let mask = oracle_render(&scene, &light, ImageKind::Binary);

    let geom = scene.geometry();
    let cfg = SampleConfig { n_uniform: 448, n_importance: 64, scene_radius: 1.0 };
    let (mut total, mut agree) = (0usize, 0usize);
    for py in 0..32 {
        for px in 0..32 {
            let ray = scene
                .camera
                .pixel_ray(px as f64 + 0.5, py as f64 + 0.5, scene.scene_radius);
            let Some(t) = geom.march_intersect(&ray, ORACLE_MARCH_STEPS) else { continue };
            let x = ray.at(t);
            let tape = Tape::new();
            let field = AnalyticField::new(&tape, geom.clone());
            let s = tape.scalar(1e3);
            let sample = light_at_binary(&light, x).unwrap();
            let xv = crate::testutil::pts_var(&tape, &[x.as_array()]);
            let c = incoming_radiance(&field, &xv, sample, &s, &cfg).scalar_value();
            let binarized = if c > 0.5 { 1.0 } else { 0.0 };
            total += 1;
            agree += (binarized == mask.get(px, py)[0]) as usize;
        }
    }
    assert!(total > 300);
    let frac = agree as f64 / total as f64;
    assert!(frac >= 0.99, "oracle/transmittance agreement {frac:.4}");
}

#[test]
fn generated_manifests_are_seed_deterministic() {
    let scene = SceneSpec::builtin("sphere-plane", 16, 16).unwrap();
    let opts = GenerateOptions {
        n_lights: 3,
        kind: ImageKind::Binary,
        light: LightFamily::Directional,
        seed: 7,
    };
    let (d1, d2) = (tmp_dir("det-a"), tmp_dir("det-b"));
    generate_dataset(&scene, &opts, &d1).unwrap();
    generate_dataset(&scene, &opts, &d2).unwrap();
    let m1 = fs::read(d1.join("manifest.json")).unwrap();
    let m2 = fs::read(d2.join("manifest.json")).unwrap();
    assert_eq!(m1, m2);
    let _ = fs::remove_dir_all(&d1);
    let _ = fs::remove_dir_all(&d2);
}

#[test]
fn directional_lights_are_unit_upper_hemisphere() {
    let scene = SceneSpec::builtin("sphere-plane", 8, 8).unwrap();
    let opts = GenerateOptions {
        n_lights: 16,
        kind: ImageKind::Binary,
        light: LightFamily::Directional,
        seed: 11,
    };
    let dir = tmp_dir("hemi");
    let ds = generate_dataset(&scene, &opts, &dir).unwrap();
    assert_eq!(ds.images.len(), 16);
    for img in &ds.images {
        let LightSource::Directional { direction, .. } = &img.light else {
            panic!("expected directional light");
        };
        assert!((direction.norm() - 1.0).abs() < 1e-12);
        assert!(direction.z > 0.0);
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn point_lights_give_unit_radiance_at_center() {
    let scene = SceneSpec::builtin("sphere-plane", 8, 8).unwrap();
    let opts = GenerateOptions {
        n_lights: 5,
        kind: ImageKind::Rgb,
        light: LightFamily::Point { radius: 3.0 },
        seed: 3,
    };
    let dir = tmp_dir("point");
    let ds = generate_dataset(&scene, &opts, &dir).unwrap();
    for img in &ds.images {
        let sample = light_at(&img.light, Vec3::ZERO).unwrap();
        assert!((sample.intensity - 1.0).abs() < 1e-12);
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn generate_load_round_trip_is_lossless() {
    let scene = SceneSpec::builtin("two-spheres", 16, 16).unwrap();
    let opts = GenerateOptions {
        n_lights: 2,
        kind: ImageKind::Rgb,
        light: LightFamily::Point { radius: 2.5 },
        seed: 21,
    };
    let dir = tmp_dir("roundtrip");
    let written = generate_dataset(&scene, &opts, &dir).unwrap();
    let loaded = load_dataset(&dir).unwrap();
    assert_eq!(written.manifest, loaded.manifest);
    // PFM stores f32: loaded rasters match to single precision.
    for (a, b) in written.images.iter().zip(&loaded.images) {
        assert_eq!(a.file, b.file);
        for (x, y) in a.raster.data().iter().zip(b.raster.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn binary_round_trip_is_exact() {
    let scene = SceneSpec::builtin("sphere-plane", 16, 16).unwrap();
    let opts = GenerateOptions {
        n_lights: 1,
        kind: ImageKind::Binary,
        light: LightFamily::Directional,
        seed: 2,
    };
    let dir = tmp_dir("binary");
    let written = generate_dataset(&scene, &opts, &dir).unwrap();
    let loaded = load_dataset(&dir).unwrap();
    assert_eq!(written.images[0].raster, loaded.images[0].raster);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn corrupt_manifest_is_rejected_with_field_name() {
    let dir = tmp_dir("corrupt");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("manifest.json"), r#"{"version": 1, "scene": "x"}"#).unwrap();
    let err = load_dataset(&dir).unwrap_err();
    assert!(matches!(err, SceneError::Manifest { .. }));
    assert!(err.to_string().contains("scene_radius"), "{err}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn unsupported_version_is_rejected() {
    let scene = SceneSpec::builtin("sphere-plane", 8, 8).unwrap();
    let opts = GenerateOptions {
        n_lights: 1,
        kind: ImageKind::Binary,
        light: LightFamily::Directional,
        seed: 2,
    };
    let dir = tmp_dir("version");
    generate_dataset(&scene, &opts, &dir).unwrap();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 99");
    fs::write(&path, text).unwrap();
    let err = load_dataset(&dir).unwrap_err();
    assert!(err.to_string().contains("unsupported version 99"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn non_binary_mask_is_rejected() {
    let scene = SceneSpec::builtin("sphere-plane", 8, 8).unwrap();
    let opts = GenerateOptions {
        n_lights: 1,
        kind: ImageKind::Binary,
        light: LightFamily::Directional,
        seed: 2,
    };
    let dir = tmp_dir("nonbinary");
    generate_dataset(&scene, &opts, &dir).unwrap();
    let gray = image::GrayImage::from_pixel(8, 8, image::Luma([128u8]));
    gray.save(dir.join("images/img_000.png")).unwrap();
    let err = load_dataset(&dir).unwrap_err();
    assert!(err.to_string().contains("non-binary"), "{err}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn missing_image_file_is_reported_with_path() {
    let scene = SceneSpec::builtin("sphere-plane", 8, 8).unwrap();
    let opts = GenerateOptions {
        n_lights: 1,
        kind: ImageKind::Binary,
        light: LightFamily::Directional,
        seed: 2,
    };
    let dir = tmp_dir("missing");
    generate_dataset(&scene, &opts, &dir).unwrap();
    fs::remove_file(dir.join("images/img_000.png")).unwrap();
    let err = load_dataset(&dir).unwrap_err();
    assert!(err.to_string().contains("img_000.png"), "{err}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn downsample_box_filters() {
    let mut r = Raster::new(4, 2, 1);
    for (i, v) in [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0].iter().enumerate() {
        r.set(i % 4, i / 4, &[*v]);
    }
    let d = r.downsample(2);
    assert_eq!((d.width, d.height), (2, 1));
    assert_eq!(d.get(0, 0)[0], 0.5);
    assert_eq!(d.get(1, 0)[0], 0.5);
}

#[test]
fn builtin_scenes_fit_the_unit_sphere() {
    for name in ["sphere-plane", "two-spheres", "box-plane", "bumpy-ground"] {
        let scene = SceneSpec::builtin(name, 8, 8).unwrap();
        // Object surface stays inside the bounding sphere: f > 0 on a shell
        // of probe points at radius 1.
        for i in 0..200 {
            let a = i as f64 * 0.61803 * std::f64::consts::TAU;
            let z = -1.0 + 2.0 * (i as f64 + 0.5) / 200.0;
            let r = (1.0f64 - z * z).sqrt();
            let p = Vec3::new(r * a.cos(), r * a.sin(), z);
            // Margin clears the bumpy ground's displacement amplitude.
            if scene.ground.signed_distance(p) > 0.08 {
                assert!(scene.object.value(p) > 0.0, "{name} leaks outside at {p:?}");
            }
        }
    }
    assert!(SceneSpec::builtin("unknown", 8, 8).is_none());
}
