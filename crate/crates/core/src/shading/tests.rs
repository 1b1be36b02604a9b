use super::*;
use crate::diffengine::Tape;
use crate::fields::{eikonal_loss, field_normal, BoundScene, MaterialConfig, MaterialNetwork};
use crate::raycast::{differentiable_intersection, ray_march, TangentWarnings};
use crate::shadowrender::{incoming_radiance_batch, LightSample, SampleConfig};
use crate::testutil::{fd_check_params, pts_var, small_net};
use crate::Ray;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn half_vector_examples() {
    let h = half_vector(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)).unwrap();
    assert!((h - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

    // l orthogonal to -v bisects them at 45 degrees.
    let l = Vec3::new(1.0, 0.0, 0.0);
    let v = Vec3::new(0.0, 0.0, -1.0);
    let h = half_vector(l, v).unwrap();
    assert!((h.dot(l) - (std::f64::consts::FRAC_PI_4).cos()).abs() < 1e-12);
    assert!((h.dot(-v) - (std::f64::consts::FRAC_PI_4).cos()).abs() < 1e-12);

    assert!(half_vector(l, l).is_none());
}

#[test]
fn half_vector_is_unit_for_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut unit = || {
        Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalized()
    };
    for _ in 0..1000 {
        let (l, v) = (unit(), unit());
        if let Some(h) = half_vector(l, v) {
            assert!((h.norm() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn kappa_bank_is_log_spaced() {
    let basis = SgBasis::default();
    assert_eq!(basis.kappa[0], 1.0);
    assert_eq!(basis.kappa[8], 512.0);
    let r = basis.kappa[1] / basis.kappa[0];
    for k in 1..SG_BASIS_COUNT - 1 {
        assert!((basis.kappa[k + 1] / basis.kappa[k] - r).abs() < 1e-9);
    }
    for d in basis.eval(0.3) {
        assert!(d > 0.0 && d <= 1.0);
    }
    assert!(basis.eval(1.0).iter().all(|&d| d == 1.0));
}

#[test]
fn specular_examples() {
    let tape = Tape::new();
    let basis = SgBasis::default();
    let n = pts_var(&tape, &[[0.0, 0.0, 1.0]]);
    let h = vec![Some(Vec3::new(0.0, 0.0, 1.0))];

    let y0 = tape.input(ArrayD::zeros(IxDyn(&[1, 27])));
    let rho = specular(&y0, &basis, &h, &n);
    assert!(rho.value().iter().all(|&v| v == 0.0));

    // One-hot on basis 4, green channel, h = n so D_4 = 1.
    let mut y = vec![0.0; 27];
    y[SG_BASIS_COUNT + 4] = 0.8;
    let y = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 27]), y).unwrap());
    let rho = specular(&y, &basis, &h, &n);
    assert!((rho.value()[[0, 1]] - 0.8).abs() < 1e-12);
    assert_eq!(rho.value()[[0, 0]], 0.0);

    // h.n = 0 with the sharpest basis: e^-512 is an exact zero in f64.
    let h_side = vec![Some(Vec3::new(1.0, 0.0, 0.0))];
    let mut y8 = vec![0.0; 27];
    y8[8] = 1.0;
    let y8 = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 27]), y8).unwrap());
    let rho = specular(&y8, &basis, &h_side, &n);
    assert!(rho.value()[[0, 0]] < 1e-200);

    // Degenerate half vector drops the specular term entirely.
    let rho = specular(&y, &basis, &[None], &n);
    assert!(rho.value().iter().all(|&v| v == 0.0));
}

#[test]
fn lambertian_at_normal_incidence_returns_albedo() {
    let tape = Tape::new();
    let n = pts_var(&tape, &[[0.0, 0.0, 1.0]]);
    let rho_d = pts_var(&tape, &[[0.7, 0.5, 0.3]]);
    let rho_s = tape.input(ArrayD::zeros(IxDyn(&[1, 3])));
    let c_in = tape.input(ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());
    let light = LightSample { l: Vec3::new(0.0, 0.0, 1.0), intensity: 1.0 };
    let c = render_outgoing(&rho_d, &rho_s, &c_in, &n, &[light]);
    let v = c.value();
    assert!((v[[0, 0]] - 0.7).abs() < 1e-12);
    assert!((v[[0, 1]] - 0.5).abs() < 1e-12);
    assert!((v[[0, 2]] - 0.3).abs() < 1e-12);
}

#[test]
fn backfacing_light_renders_black() {
    let tape = Tape::new();
    let n = pts_var(&tape, &[[0.0, 0.0, 1.0]]);
    let rho_d = pts_var(&tape, &[[0.7, 0.5, 0.3]]);
    let rho_s = pts_var(&tape, &[[0.2, 0.2, 0.2]]);
    let c_in = tape.input(ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());
    let light = LightSample { l: Vec3::new(0.0, 0.0, -1.0), intensity: 1.0 };
    let c = render_outgoing(&rho_d, &rho_s, &c_in, &n, &[light]);
    assert!(c.value().iter().all(|&v| v == 0.0));
}

#[test]
fn radiance_monotone_in_incoming() {
    let tape = Tape::new();
    let n = pts_var(&tape, &[[0.0, 0.6, 0.8]]);
    let rho_d = pts_var(&tape, &[[0.4, 0.4, 0.4]]);
    let rho_s = pts_var(&tape, &[[0.1, 0.0, 0.2]]);
    let light = LightSample { l: Vec3::new(0.0, 0.0, 1.0), intensity: 1.0 };
    let mut prev = -1.0;
    for k in 0..=10 {
        let cin = k as f64 / 10.0;
        let c_in = tape.input(ArrayD::from_shape_vec(IxDyn(&[1]), vec![cin]).unwrap());
        let c = render_outgoing(&rho_d, &rho_s, &c_in, &n, &[light]);
        let total: f64 = c.value().iter().sum();
        assert!(total >= prev);
        assert!(c.value().iter().all(|&v| v >= 0.0));
        prev = total;
    }
}

#[test]
fn rgb_loss_examples() {
    let tape = Tape::new();
    let c = pts_var(&tape, &[[0.2, 0.4, 0.6]]);
    assert_eq!(rgb_loss(&c, &[[0.2, 0.4, 0.6]]).scalar_value(), 0.0);
    // Unit difference in one channel, sum convention over channels.
    assert!((rgb_loss(&c, &[[1.2, 0.4, 0.6]]).scalar_value() - 1.0).abs() < 1e-12);

    let c2 = pts_var(&tape, &[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
    let loss = rgb_loss(&c2, &[[0.5, 0.0, 0.0], [1.0, 1.0, 0.0]]);
    assert!((loss.scalar_value() - (0.5 + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let tape = Tape::new();
    let photo = tape.scalar(0.2);
    let eik = tape.scalar(1.0);
    assert!((total_loss(&photo, &eik, None).scalar_value() - 0.3).abs() < 1e-15);
    let zero = tape.scalar(0.0);
    assert_eq!(total_loss(&zero, &zero, None).scalar_value(), 0.0);
    let pin = tape.scalar(0.05);
    assert!((total_loss(&photo, &eik, Some(&pin)).scalar_value() - 0.35).abs() < 1e-15);
}

#[test]
fn full_objective_gradient_matches_fd() {
    let (net, mut params) = small_net(40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mat_cfg = MaterialConfig { depth: 2, width: 8, feature_dim: 8 };
    let mat = MaterialNetwork::new(mat_cfg, &mut params, &mut rng);
    let basis = SgBasis::default();
    let cfg = SampleConfig { n_uniform: 16, n_importance: 0, scene_radius: 1.0 };
    let light = LightSample { l: Vec3::new(0.1, -0.2, 1.0).normalized(), intensity: 1.0 };

    // Two frozen camera hits on the initial surface.
    let mut dirs = Vec::new();
    let mut hits = Vec::new();
    {
        let tape = Tape::new();
        let scene = BoundScene::new(&tape, net.bind(&tape, &params), None);
        for off in [-0.1, 0.15] {
            let origin = Vec3::new(off, 0.05, 1.4);
            let ray = Ray::new(origin, Vec3::new(0.0, 0.0, -1.0), 0.0, 3.0);
            let hit = ray_march(&scene, &ray, None);
            assert!(hit.valid);
            dirs.push(ray.dir);
            hits.push(hit.x);
        }
    }
    let h: Vec<Option<Vec3>> = dirs.iter().map(|&v| half_vector(light.l, v)).collect();
    let targets = [[0.3, 0.2, 0.1], [0.6, 0.6, 0.6]];
    let eik_pts = [[0.2, 0.1, 0.3], [-0.3, 0.4, -0.1], [0.0, -0.5, 0.2]];

    let err = fd_check_params(&params, 1e-4, |tape, p| {
        let scene = BoundScene::new(tape, net.bind(tape, p), None);
        let bound_mat = mat.bind(tape, p);
        let mut pairs = scene.sdf.param_vars();
        pairs.extend(bound_mat.param_vars());

        let warnings = TangentWarnings::default();
        let x_hat = differentiable_intersection(&scene, &dirs, &hits, &warnings);
        let n = field_normal(&scene, &x_hat).unwrap();
        let (_, feat) = scene.sdf.eval(&x_hat);
        let (rho_d, y) = bound_mat.eval(&x_hat, &n, &feat);
        let rho_s = specular(&y, &basis, &h, &n);
        let s = scene.sdf.s();
        let c_in = incoming_radiance_batch(&scene, &x_hat, &[light; 2], &s, &cfg);
        let c = render_outgoing(&rho_d, &rho_s, &c_in, &n, &[light; 2]);
        let photo = rgb_loss(&c, &targets);
        let eik = eikonal_loss(&scene, &pts_var(tape, &eik_pts));
        (total_loss(&photo, &eik, None), pairs)
    });
    assert!(err < 5e-4, "objective FD error {err}");
}
