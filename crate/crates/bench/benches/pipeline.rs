//! Hot-path benchmarks: field evaluation, camera-ray marching, shadow-ray
//! transmittance and the backward pass.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umbra_core::diffengine::Tape;
use umbra_core::fields::{
    flat_gradient, BoundScene, DiffField, FieldParameters, GroundPlane, SdfConfig, SdfNetwork,
};
use umbra_core::shadowrender::{incoming_radiance_batch, LightSample, SampleConfig};
use umbra_core::{Ray, Vec3};

fn bench_net() -> (SdfNetwork, FieldParameters) {
    let mut params = FieldParameters::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SdfConfig {
        depth: 4,
        width: 64,
        freqs: 4,
        feature_dim: 32,
        init_radius: 0.5,
        init_s: 10.0,
    };
    let net = SdfNetwork::new(cfg, &mut params, &mut rng);
    (net, params)
}

fn random_points(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0))
}

fn sdf_eval(c: &mut Criterion) {
    let (net, params) = bench_net();
    let tape = Tape::new();
    let sdf = net.bind(&tape, &params);
    let pts = random_points(1024, 3);
    c.bench_function("sdf_eval_1024", |b| {
        b.iter(|| black_box(sdf.network().f_values(sdf.parameters(), black_box(&pts))))
    });
}

fn ray_march(c: &mut Criterion) {
    let (net, params) = bench_net();
    let tape = Tape::new();
    let ground = GroundPlane::new(Vec3::new(0.0, 0.0, 1.0), -0.4);
    let scene = BoundScene::new(&tape, net.bind(&tape, &params), Some(ground.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rays: Vec<Ray> = (0..256)
        .map(|_| {
            let target = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 0.0);
            let origin = Vec3::new(0.0, -1.7, 1.0);
            Ray::new(origin, target - origin, 0.0, 4.0)
        })
        .collect();
    c.bench_function("ray_march_256", |b| {
        b.iter(|| {
            black_box(umbra_core::raycast::ray_march_batch_steps(
                &scene,
                black_box(&rays),
                Some(&ground),
                128,
            ))
        })
    });
}

fn shadow_radiance(c: &mut Criterion) {
    let (net, params) = bench_net();
    let tape = Tape::new();
    let scene = BoundScene::new(&tape, net.bind(&tape, &params), None);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 64;
    let flat: Vec<f64> = (0..n)
        .flat_map(|_| {
            let d = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized()
                * 0.55;
            d.as_array()
        })
        .collect();
    let x = tape.input(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[n, 3]), flat).unwrap());
    let lights = vec![LightSample { l: Vec3::new(0.2, 0.1, 1.0).normalized(), intensity: 1.0 }; n];
    let cfg = SampleConfig { n_uniform: 80, n_importance: 64, scene_radius: 1.0 };
    c.bench_function("incoming_radiance_64px", |b| {
        b.iter(|| {
            let s = scene.sdf.s();
            black_box(incoming_radiance_batch(&scene, black_box(&x), &lights, &s, &cfg))
        })
    });
}

fn backward_pass(c: &mut Criterion) {
    let (net, params) = bench_net();
    let pts = random_points(256, 13);
    c.bench_function("backward_eikonal_256", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let scene = BoundScene::new(&tape, net.bind(&tape, &params), None);
            let flat: Vec<f64> = pts.iter().copied().collect();
            let x = tape
                .input(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[256, 3]), flat).unwrap());
            let loss = umbra_core::fields::eikonal_loss(&scene.sdf, &x);
            let pairs = scene.sdf.param_vars();
            black_box(flat_gradient(&params, &pairs, &loss).unwrap())
        })
    });
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = sdf_eval, ray_march, shadow_radiance, backward_pass
);
criterion_main!(benches);
