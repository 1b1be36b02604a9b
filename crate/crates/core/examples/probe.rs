use ndarray::{ArrayD, IxDyn};
use umbra_core::diffengine::Tape;
use umbra_core::evaluate::{depth_l1, normal_mae, render_depth_normal};
use umbra_core::fields::{field_normal, AnalyticField, BoundScene};
use umbra_core::math::Ray;
use umbra_core::raycast::ray_march_batch;
use umbra_core::scenes::SceneSpec;
use umbra_core::trainer::Checkpoint;

fn erode(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            out[y * w + x] = (-1i64..=1).all(|dy| {
                (-1i64..=1).all(|dx| {
                    mask[((y as i64 + dy) as usize) * w + (x as i64 + dx) as usize]
                })
            });
        }
    }
    out
}

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let ckpt = Checkpoint::load(std::path::Path::new(&path)).unwrap();
    let spec = SceneSpec::builtin("sphere-plane", 64, 64).unwrap();

    let tape = Tape::new();
    let scene =
        BoundScene::new(&tape, ckpt.sdf.bind(&tape, &ckpt.params), Some(spec.ground.clone()));
    let (pd, pn) = render_depth_normal(&scene, &spec.camera, Some(&spec.ground), spec.scene_radius);
    let gt_tape = Tape::new();
    let gt = AnalyticField::new(&gt_tape, spec.object.clone());
    let (gd, gn) = render_depth_normal(&gt, &spec.camera, Some(&spec.ground), spec.scene_radius);

    let shared: Vec<bool> =
        pd.mask.iter().zip(&gd.mask).map(|(a, b)| *a && *b).collect();
    let interior = erode(&shared, 64, 64);

    let m = depth_l1(&pd, &gd).unwrap();
    println!("depth_aligned {:.4}", m.aligned);
    println!("mae_full {:.2}  (n={})", normal_mae(&pn, &gn, &shared).unwrap(),
        shared.iter().filter(|b| **b).count());
    println!("mae_interior {:.2}  (n={})", normal_mae(&pn, &gn, &interior).unwrap(),
        interior.iter().filter(|b| **b).count());
    println!("s = {:.1}", ckpt.sdf.sharpness(&ckpt.params));

    if let Some(material) = &ckpt.material {
        let mat = material.bind(&tape, &ckpt.params);
        let camera = &spec.camera;
        let rays: Vec<Ray> = (0..camera.height)
            .flat_map(|py| (0..camera.width).map(move |px| (px, py)))
            .map(|(px, py)| {
                camera.pixel_ray(px as f64 + 0.5, py as f64 + 0.5, spec.scene_radius)
            })
            .collect();
        let hits = ray_march_batch(&scene, &rays, Some(&spec.ground));
        let surface: Vec<_> =
            hits.iter().filter(|h| h.valid && !h.hit_ground).map(|h| h.x).collect();
        let mut within = 0usize;
        for chunk in surface.chunks(256) {
            let flat: Vec<f64> = chunk.iter().flat_map(|p| p.as_array()).collect();
            let x = tape
                .input(ArrayD::from_shape_vec(IxDyn(&[chunk.len(), 3]), flat).unwrap());
            let (_, feat) = scene.sdf.eval(&x);
            let n = field_normal(&scene.sdf, &x).unwrap();
            let (rho_d, _) = mat.eval(&x, &n, &feat);
            let v = rho_d.value();
            for i in 0..chunk.len() {
                let mean = (v[[i, 0]] + v[[i, 1]] + v[[i, 2]]) / 3.0;
                if (mean - 0.7).abs() / 0.7 <= 0.15 {
                    within += 1;
                }
            }
        }
        println!(
            "albedo_ok {:.3}  (n={})",
            within as f64 / surface.len().max(1) as f64,
            surface.len()
        );
    }
}
