//! Post-training evaluation: depth and normal metrics, zero-level-set mesh
//! extraction, novel-light re-rendering and invisible-surface coverage.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fields::{AnalyticSdf, BoundMaterial, DiffField, GroundPlane};
use crate::math::Vec3;
use crate::raycast::{gradient_fast, ray_march_batch};
use crate::scenes::{CameraModel, Raster};
use crate::shading::{half_vector, render_outgoing, specular, SgBasis};
use crate::shadowrender::{
    incoming_radiance_batch, light_at, LightSource, SampleConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty shared foreground mask")]
    EmptyMask,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Depth and normals
// ---------------------------------------------------------------------------

/// Per-pixel ray parameter of the first surface hit, with a foreground mask
/// (valid non-ground hits).
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub t: Vec<f64>,
    pub mask: Vec<bool>,
}

/// March every camera ray; depth in ray-parameter units (scene units along
/// the ray), normals from the normalized field gradient at the hit.
pub fn render_depth_normal<F: DiffField + ?Sized>(
    field: &F,
    camera: &CameraModel,
    ground: Option<&GroundPlane>,
    scene_radius: f64,
) -> (DepthMap, Vec<Vec3>) {
    let rays: Vec<_> = (0..camera.height)
        .flat_map(|py| {
            (0..camera.width).map(move |px| (px as f64 + 0.5, py as f64 + 0.5))
        })
        .map(|(px, py)| camera.pixel_ray(px, py, scene_radius))
        .collect();
    let hits = ray_march_batch(field, &rays, ground);
    let mut depth = DepthMap {
        width: camera.width,
        height: camera.height,
        t: vec![f64::INFINITY; rays.len()],
        mask: vec![false; rays.len()],
    };
    let mut normals = vec![Vec3::ZERO; rays.len()];
    for (i, hit) in hits.iter().enumerate() {
        if hit.valid {
            depth.t[i] = hit.t;
            depth.mask[i] = !hit.hit_ground;
            let g = gradient_fast(field, hit.x);
            if g.norm() > 1e-12 {
                normals[i] = g.normalized();
            }
        }
    }
    (depth, normals)
}

#[derive(Debug, Clone, Copy)]
pub struct DepthMetrics {
    /// Mean |Δt| after the closed-form scale+offset fit.
    pub aligned: f64,
    pub unaligned: f64,
    pub scale: f64,
    pub offset: f64,
}

/// L1 depth error over the shared foreground mask. The aligned variant fits
/// `a·pred + b` to the ground truth by least squares first (stand-in for the
/// usual ICP alignment; our calibrated setup already fixes scale).
pub fn depth_l1(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics, EvalError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(EvalError::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .t
        .iter()
        .zip(&gt.t)
        .zip(pred.mask.iter().zip(&gt.mask))
        .filter(|(_, (mp, mg))| **mp && **mg)
        .map(|((p, g), _)| (*p, *g))
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let n = pairs.len() as f64;
    let sp: f64 = pairs.iter().map(|(p, _)| p).sum();
    let sg: f64 = pairs.iter().map(|(_, g)| g).sum();
    let spp: f64 = pairs.iter().map(|(p, _)| p * p).sum();
    let spg: f64 = pairs.iter().map(|(p, g)| p * g).sum();
    let det = n * spp - sp * sp;
    let (scale, offset) = if det.abs() < 1e-18 {
        (1.0, (sg - sp) / n)
    } else {
        ((n * spg - sp * sg) / det, (sg * spp - sp * spg) / det)
    };
    let aligned = pairs.iter().map(|(p, g)| (scale * p + offset - g).abs()).sum::<f64>() / n;
    let unaligned = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    Ok(DepthMetrics { aligned, unaligned, scale, offset })
}

/// Mean angular error in degrees over the mask; inputs must be unit normals.
pub fn normal_mae(pred: &[Vec3], gt: &[Vec3], mask: &[bool]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), m) in pred.iter().zip(gt).zip(mask) {
        if *m {
            sum += p.dot(*g).clamp(-1.0, 1.0).acos().to_degrees();
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Mesh extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for n in &self.normals {
            out.push_str(&format!("vn {} {} {}\n", n.x, n.y, n.z));
        }
        for t in &self.triangles {
            let (a, b, c) = (t[0] + 1, t[1] + 1, t[2] + 1);
            out.push_str(&format!("f {a}//{a} {b}//{b} {c}//{c}\n"));
        }
        let io = |e| EvalError::Io { path: path.to_path_buf(), source: e };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(out.as_bytes()).map_err(io)
    }
}

fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * (b - a).cross(c - a).norm()
}

/// Zero level set by tetrahedral decomposition of a uniform grid over the
/// bounding cube `[-1,1]^3` (each cell splits into six tetrahedra; surface
/// vertices by linear interpolation along crossing edges). An empty surface
/// yields an empty mesh. Triangles are oriented along the field gradient and
/// degenerate slivers are dropped.
pub fn extract_mesh<F: DiffField + ?Sized>(field: &F, resolution: usize) -> Mesh {
    assert!(resolution >= 16, "grid resolution below 16");
    let n = resolution;
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / n as f64;

    // One batched field evaluation for the whole (n+1)^3 lattice.
    let mut pts = Array2::zeros(((n + 1) * (n + 1) * (n + 1), 3));
    for iz in 0..=n {
        for iy in 0..=n {
            for ix in 0..=n {
                let row = (iz * (n + 1) + iy) * (n + 1) + ix;
                pts[[row, 0]] = coord(ix);
                pts[[row, 1]] = coord(iy);
                pts[[row, 2]] = coord(iz);
            }
        }
    }
    let f = field.f_fast(&pts);
    let value = |ix: usize, iy: usize, iz: usize| f[(iz * (n + 1) + iy) * (n + 1) + ix];
    let point =
        |ix: usize, iy: usize, iz: usize| Vec3::new(coord(ix), coord(iy), coord(iz));

    // Six tetrahedra per cube, all sharing the main diagonal 0-7.
    const CUBE: [[usize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [1, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [0, 1, 1],
        [1, 1, 1],
    ];
    const TETS: [[usize; 4]; 6] = [
        [0, 1, 3, 7],
        [0, 3, 2, 7],
        [0, 2, 6, 7],
        [0, 6, 4, 7],
        [0, 4, 5, 7],
        [0, 5, 1, 7],
    ];

    let mut mesh = Mesh::default();
    let mut emit = |tri: [(Vec3, f64, Vec3, f64); 3]| {
        let interp = |(pa, fa, pb, fb): (Vec3, f64, Vec3, f64)| {
            let t = fa / (fa - fb);
            pa + (pb - pa) * t
        };
        let v = [interp(tri[0]), interp(tri[1]), interp(tri[2])];
        if triangle_area(v[0], v[1], v[2]) <= 1e-12 {
            return;
        }
        let base = mesh.vertices.len();
        mesh.vertices.extend_from_slice(&v);
        mesh.triangles.push([base, base + 1, base + 2]);
    };

    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let corners: Vec<(Vec3, f64)> = CUBE
                    .iter()
                    .map(|d| {
                        let (cx, cy, cz) = (ix + d[0], iy + d[1], iz + d[2]);
                        (point(cx, cy, cz), value(cx, cy, cz))
                    })
                    .collect();
                for tet in TETS {
                    let c: Vec<(Vec3, f64)> = tet.iter().map(|&k| corners[k]).collect();
                    let inside: Vec<usize> =
                        (0..4).filter(|&k| c[k].1 <= 0.0).collect();
                    let outside: Vec<usize> =
                        (0..4).filter(|&k| c[k].1 > 0.0).collect();
                    let edge = |i: usize, o: usize| (c[i].0, c[i].1, c[o].0, c[o].1);
                    match inside.len() {
                        1 => {
                            let i = inside[0];
                            emit([
                                edge(i, outside[0]),
                                edge(i, outside[1]),
                                edge(i, outside[2]),
                            ]);
                        }
                        3 => {
                            let o = outside[0];
                            emit([
                                edge(inside[0], o),
                                edge(inside[1], o),
                                edge(inside[2], o),
                            ]);
                        }
                        2 => {
                            let (i0, i1) = (inside[0], inside[1]);
                            let (o0, o1) = (outside[0], outside[1]);
                            let (a, b, cc, d) =
                                (edge(i0, o0), edge(i0, o1), edge(i1, o0), edge(i1, o1));
                            emit([a, b, cc]);
                            emit([b, d, cc]);
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    // Per-vertex normals from the field gradient; reorient triangles so the
    // geometric normal agrees with the field's outward direction.
    mesh.normals = mesh
        .vertices
        .iter()
        .map(|&v| {
            let g = gradient_fast(field, v);
            if g.norm() > 1e-12 {
                g.normalized()
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            }
        })
        .collect();
    for tri in mesh.triangles.iter_mut() {
        let [a, b, c] = *tri;
        let geo = (mesh.vertices[b] - mesh.vertices[a])
            .cross(mesh.vertices[c] - mesh.vertices[a]);
        let want = mesh.normals[a] + mesh.normals[b] + mesh.normals[c];
        if geo.dot(want) < 0.0 {
            tri.swap(1, 2);
        }
    }
    mesh
}

// ---------------------------------------------------------------------------
// Relighting
// ---------------------------------------------------------------------------

/// Non-boundary pixels default to this physical sharpness when re-rendering.
pub const RELIGHT_SHARPNESS: f64 = 1.0e3;

/// Shading material for relighting: the learned net where available, else a
/// constant Lambertian albedo (shadow-only checkpoints carry no material).
pub enum RelightShading<'a> {
    Material(&'a crate::fields::BoundScene<'a>, &'a BoundMaterial<'a>),
    Lambertian(Vec3),
}

/// Full re-render under a novel light. Marches every camera ray, then shades
/// hit points in chunks (one tape pass per chunk); missed rays stay black.
#[allow(clippy::too_many_arguments)]
pub fn relight<F: DiffField + ?Sized>(
    field: &F,
    shading: &RelightShading,
    camera: &CameraModel,
    ground: Option<&GroundPlane>,
    light: &LightSource,
    scene_radius: f64,
    sharpness: f64,
    sample_cfg: &SampleConfig,
) -> Raster {
    let rays: Vec<_> = (0..camera.height)
        .flat_map(|py| {
            (0..camera.width).map(move |px| (px as f64 + 0.5, py as f64 + 0.5))
        })
        .map(|(px, py)| camera.pixel_ray(px, py, scene_radius))
        .collect();
    let hits = ray_march_batch(field, &rays, ground);
    let mut out = Raster::new(camera.width, camera.height, 3);

    let indices: Vec<usize> = (0..hits.len()).filter(|&i| hits[i].valid).collect();
    for chunk in indices.chunks(256) {
        let tape = field.tape();
        let p = chunk.len();
        let flat: Vec<f64> = chunk.iter().flat_map(|&i| hits[i].x.as_array()).collect();
        let x = tape.input(ArrayD::from_shape_vec(IxDyn(&[p, 3]), flat).unwrap());
        let lights: Vec<_> = chunk
            .iter()
            .map(|&i| light_at(light, hits[i].x).expect("light off the surface"))
            .collect();
        let s = tape.scalar(sharpness);
        let c_in = incoming_radiance_batch(field, &x, &lights, &s, sample_cfg);
        let normal = crate::fields::field_normal(field, &x).expect("non-degenerate normals");
        let rgb = match shading {
            RelightShading::Material(scene, mat) => {
                let (_, feat) = scene.sdf.eval(&x);
                let (rho_d, y) = mat.eval(&x, &normal, &feat);
                let h: Vec<Option<Vec3>> = chunk
                    .iter()
                    .zip(&lights)
                    .map(|(&i, l)| half_vector(l.l, rays[i].dir))
                    .collect();
                let rho_s = specular(&y, &SgBasis::default(), &h, &normal);
                render_outgoing(&rho_d, &rho_s, &c_in, &normal, &lights)
            }
            RelightShading::Lambertian(albedo) => {
                let a = tape.input(
                    ArrayD::from_shape_vec(IxDyn(&[1, 3]), albedo.as_array().to_vec()).unwrap(),
                );
                let zero = tape.input(ArrayD::zeros(IxDyn(&[p, 3])));
                let rho_d = &a.broadcast(&[p, 3]) + &zero;
                render_outgoing(&rho_d, &zero, &c_in, &normal, &lights)
            }
        };
        let vals = rgb.value();
        for (row, &i) in chunk.iter().enumerate() {
            let px = [vals[[row, 0]], vals[[row, 1]], vals[[row, 2]]];
            out.set(i % camera.width, i / camera.width, &px);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Invisible-surface coverage
// ---------------------------------------------------------------------------

fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    // Ericson's closest-point-on-triangle, specialized to return a distance.
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm();
    }
    let n = ab.cross(ac);
    (ap.dot(n) / n.norm()).abs()
}

/// Distance from a point to the mesh surface (brute force over triangles).
pub fn distance_to_mesh(mesh: &Mesh, p: Vec3) -> f64 {
    mesh.triangles
        .iter()
        .map(|t| {
            point_triangle_distance(p, mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Fraction of camera-occluded ground-truth surface points lying within
/// `tau` of the mesh. Surface points are drawn by Newton-projecting random
/// ball samples onto the zero level set; a point is occluded when the open
/// segment from the camera center is blocked.
pub fn invisible_coverage(
    mesh: &Mesh,
    gt: &AnalyticSdf,
    camera: &CameraModel,
    tau: f64,
    n_points: usize,
    seed: u64,
) -> f64 {
    assert!(tau > 0.0);
    if mesh.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = camera.position();
    let mut covered = 0usize;
    let mut occluded = 0usize;
    let mut tries = 0usize;
    while occluded < n_points && tries < n_points * 200 {
        tries += 1;
        let mut p = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        for _ in 0..12 {
            let f = gt.value(p);
            let g = gt.gradient(p);
            if g.norm() < 1e-9 {
                break;
            }
            p = p - g * (f / g.norm().powi(2));
        }
        if gt.value(p).abs() > 1e-4 || p.norm() > 1.0 {
            continue;
        }
        if !gt.segment_occluded(origin, p, 1e-3) {
            continue;
        }
        occluded += 1;
        if distance_to_mesh(mesh, p) < tau {
            covered += 1;
        }
    }
    if occluded == 0 {
        return 0.0;
    }
    covered as f64 / occluded as f64
}
