//! Camera-ray intersection with the field: batched ray marching with secant
//! refinement, differentiable intersection points, and silhouette handling.
//!
//! Silhouette pixels get special treatment. A surface walk slides the center
//! hit along the surface until the normal is perpendicular to the view ray,
//! then the pixel is split by the projected silhouette line into a near and a
//! far region whose area fraction `w` stays differentiable in the field
//! parameters (the boundary point is displaced along the surface normal by a
//! Newton step, and the induced shift of the line is chained through `w`).

use ndarray::{Array2, ArrayD, IxDyn};
use std::cell::Cell;

use crate::diffengine::Var;
use crate::fields::{field_gradient, DiffField, GroundPlane};
use crate::math::{Ray, Vec3};

pub const MARCH_STEPS: usize = 256;
pub const SECANT_ITERS: usize = 8;
pub const MARCH_TOL: f64 = 1e-4;

/// Denominator floor for the differentiable intersection near tangency.
pub const TANGENT_EPS: f64 = 1e-4;

/// A silhouette point has |n . v| below this.
pub const BOUNDARY_NV: f64 = 0.01;
pub const WALK_STEP: f64 = 2e-3;
pub const WALK_MAX_STEPS: usize = 16;
/// Largest single surface move of the silhouette walk, in scene units.
pub const WALK_TRUST: f64 = 0.12;
/// The walk is abandoned when the Newton reprojection leaves |f| above this.
pub const WALK_DIVERGED: f64 = 1e-2;

/// Result of marching one camera ray.
#[derive(Debug, Clone, Copy)]
pub struct Intersection {
    pub x: Vec3,
    pub t: f64,
    pub hit_ground: bool,
    pub valid: bool,
}

impl Intersection {
    pub fn miss() -> Self {
        Intersection { x: Vec3::ZERO, t: f64::INFINITY, hit_ground: false, valid: false }
    }
}

/// Value-only spatial gradient by central differences on the fast path.
pub fn gradient_fast<F: DiffField + ?Sized>(field: &F, p: Vec3) -> Vec3 {
    let h = 1e-5;
    let mut pts = Array2::zeros((6, 3));
    for axis in 0..3 {
        for (row, sign) in [(2 * axis, 1.0), (2 * axis + 1, -1.0)] {
            let mut q = p.as_array();
            q[axis] += sign * h;
            for c in 0..3 {
                pts[[row, c]] = q[c];
            }
        }
    }
    let f = field.f_fast(&pts);
    Vec3::new(
        (f[0] - f[1]) / (2.0 * h),
        (f[2] - f[3]) / (2.0 * h),
        (f[4] - f[5]) / (2.0 * h),
    )
}

fn f_at<F: DiffField + ?Sized>(field: &F, p: Vec3) -> f64 {
    let pts = Array2::from_shape_vec((1, 3), p.as_array().to_vec()).unwrap();
    field.f_fast(&pts)[0]
}

pub fn ray_march<F: DiffField + ?Sized>(
    field: &F,
    ray: &Ray,
    ground: Option<&GroundPlane>,
) -> Intersection {
    ray_march_batch(field, std::slice::from_ref(ray), ground).pop().unwrap()
}

/// Marches every ray in lockstep so each step is one batched field
/// evaluation: 256 uniform steps, first positive-to-nonpositive sign change,
/// then bracketed secant refinement. Rays with no sign change fall back to
/// the ground plane when one is known.
pub fn ray_march_batch<F: DiffField + ?Sized>(
    field: &F,
    rays: &[Ray],
    ground: Option<&GroundPlane>,
) -> Vec<Intersection> {
    ray_march_batch_steps(field, rays, ground, MARCH_STEPS)
}

/// `ray_march_batch` with a caller-chosen uniform step count (training uses
/// fewer steps than the default; refinement recovers the precision).
pub fn ray_march_batch_steps<F: DiffField + ?Sized>(
    field: &F,
    rays: &[Ray],
    ground: Option<&GroundPlane>,
    steps: usize,
) -> Vec<Intersection> {
    let n = rays.len();
    if n == 0 {
        return Vec::new();
    }
    let mut pts = Array2::zeros((n * (steps + 1), 3));
    for (i, ray) in rays.iter().enumerate() {
        for k in 0..=steps {
            let t = ray.near + (ray.far - ray.near) * k as f64 / steps as f64;
            let p = ray.at(t);
            let row = i * (steps + 1) + k;
            pts[[row, 0]] = p.x;
            pts[[row, 1]] = p.y;
            pts[[row, 2]] = p.z;
        }
    }
    let f = field.f_fast(&pts);

    // Bracket per ray: (t_pos, f_pos, t_neg, f_neg) around the sign change.
    let mut brackets: Vec<Option<(f64, f64, f64, f64)>> = vec![None; n];
    for (i, ray) in rays.iter().enumerate() {
        let base = i * (steps + 1);
        let step = (ray.far - ray.near) / steps as f64;
        if f[base] <= 0.0 {
            // Origin-side sample already inside the surface.
            brackets[i] = Some((ray.near, f[base], ray.near, f[base]));
            continue;
        }
        for k in 0..steps {
            let (fi, fj) = (f[base + k], f[base + k + 1]);
            if fi > 0.0 && fj <= 0.0 {
                let ti = ray.near + step * k as f64;
                brackets[i] = Some((ti, fi, ti + step, fj));
                break;
            }
        }
    }

    // Batched safeguarded secant: one field evaluation per iteration.
    for _ in 0..SECANT_ITERS {
        let active: Vec<usize> = (0..n)
            .filter(|&i| brackets[i].is_some_and(|(_, fp, _, fq)| fp.min(-fq) > 0.0))
            .collect();
        if active.is_empty() {
            break;
        }
        let mut probe = Array2::zeros((active.len(), 3));
        let mut ts = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let (tp, fp, tq, fq) = brackets[i].unwrap();
            let mut t = tp - fp * (tq - tp) / (fq - fp);
            let (lo, hi) = (tp.min(tq), tp.max(tq));
            if !(lo..=hi).contains(&t) {
                t = 0.5 * (tp + tq);
            }
            let p = rays[i].at(t);
            probe[[row, 0]] = p.x;
            probe[[row, 1]] = p.y;
            probe[[row, 2]] = p.z;
            ts.push(t);
        }
        let fv = field.f_fast(&probe);
        for (row, &i) in active.iter().enumerate() {
            let b = brackets[i].as_mut().unwrap();
            if fv[row] > 0.0 {
                (b.0, b.1) = (ts[row], fv[row]);
            } else {
                (b.2, b.3) = (ts[row], fv[row]);
            }
        }
    }

    (0..n)
        .map(|i| {
            if let Some((tp, fp, tq, fq)) = brackets[i] {
                let (mut t, mut fb) = if fp.abs() <= fq.abs() { (tp, fp) } else { (tq, fq) };
                // Rare: secant did not converge inside the budget; bisect.
                let (mut lo, mut hi) = (tp, tq);
                let mut iter = 0;
                while fb.abs() >= MARCH_TOL && iter < 60 && (hi - lo).abs() > 1e-15 {
                    t = 0.5 * (lo + hi);
                    fb = f_at(field, rays[i].at(t));
                    if fb > 0.0 {
                        lo = t;
                    } else {
                        hi = t;
                    }
                    iter += 1;
                }
                let x = rays[i].at(t);
                let hit_ground =
                    ground.is_some_and(|g| g.signed_distance(x).abs() < 10.0 * MARCH_TOL);
                return Intersection { x, t, hit_ground, valid: fb.abs() < MARCH_TOL };
            }
            match ground.and_then(|g| g.intersect(&rays[i])) {
                Some(t) if t >= rays[i].near && t <= rays[i].far => {
                    Intersection { x: rays[i].at(t), t, hit_ground: true, valid: true }
                }
                _ => Intersection::miss(),
            }
        })
        .collect()
}

/// Counts rays whose `n . v` denominator had to be floored at `TANGENT_EPS`.
#[derive(Debug, Default)]
pub struct TangentWarnings(Cell<usize>);

impl TangentWarnings {
    pub fn count(&self) -> usize {
        self.0.get()
    }
}

/// The marched hit, re-expressed so it carries field-parameter gradients:
/// `x_hat = x - (v / (n . v)) f(x)` with `n = grad f` unnormalized. `x` and
/// `v` enter as constants; numerically `x_hat == x` up to the marching
/// tolerance. Batched over rows, returns `[n,3]`.
pub fn differentiable_intersection<F: DiffField + ?Sized>(
    field: &F,
    dirs: &[Vec3],
    points: &[Vec3],
    warnings: &TangentWarnings,
) -> Var {
    let tape = field.tape();
    let n = points.len();
    let flat = |vs: &[Vec3]| {
        let data: Vec<f64> = vs.iter().flat_map(|v| v.as_array()).collect();
        tape.input(ArrayD::from_shape_vec(IxDyn(&[n, 3]), data).unwrap())
    };
    let x = flat(points);
    let v = flat(dirs);
    let f = field.f_var(&x).reshape(&[n, 1]);
    let g = field_gradient(field, &x);
    let denom = (&g * &v).sum_to(&[n, 1]);

    let mut signs = Vec::with_capacity(n);
    for &d in denom.value().iter() {
        if d.abs() <= TANGENT_EPS {
            warnings.0.set(warnings.0.get() + 1);
        }
        signs.push(if d < 0.0 { -1.0 } else { 1.0 });
    }
    let sign = tape.input(ArrayD::from_shape_vec(IxDyn(&[n, 1]), signs).unwrap());
    let safe = &denom.abs().clamp_min(TANGENT_EPS) * &sign;
    &x - &(&v * &(&f / &safe))
}

/// One pixel's ray bundle: `ray(u, v)` for sub-pixel offsets in
/// `[-1/2, 1/2]^2`, with far bounds on the scene sphere.
#[derive(Debug, Clone, Copy)]
pub struct PixelFootprint {
    pub origin: Vec3,
    /// Center direction, not necessarily unit length.
    pub dir: Vec3,
    /// Direction increment per unit sub-pixel u (right) and v (down).
    pub du: Vec3,
    pub dv: Vec3,
    pub scene_radius: f64,
}

impl PixelFootprint {
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let d = (self.dir + self.du * u + self.dv * v).normalized();
        let probe = Ray::new(self.origin, d, 0.0, f64::INFINITY);
        let far = probe
            .sphere_exit(Vec3::ZERO, self.scene_radius)
            .unwrap_or(2.0 * self.scene_radius + self.origin.norm());
        Ray::new(self.origin, d, 0.0, far)
    }

    /// Sub-pixel coordinates of the pixel ray passing through a world point:
    /// solves `k (x - origin) = dir + u du + v dv` exactly (3x3 Cramer).
    pub fn locate(&self, x: Vec3) -> Option<(f64, f64)> {
        let d = x - self.origin;
        let det3 = |a: Vec3, b: Vec3, c: Vec3| a.dot(b.cross(c));
        let det = det3(d, -self.du, -self.dv);
        if det.abs() < 1e-15 {
            return None;
        }
        let u = det3(d, self.dir, -self.dv) / det;
        let v = det3(d, -self.du, self.dir) / det;
        Some((u, v))
    }

    /// Jacobian d(u,v)/dx at a world point, by central differences.
    fn pixel_jacobian(&self, x: Vec3) -> Option<[[f64; 3]; 2]> {
        let h = 1e-6;
        let mut j = [[0.0; 3]; 2];
        for axis in 0..3 {
            let mut e = [0.0; 3];
            e[axis] = h;
            let e = Vec3::from_array(e);
            let (up, vp) = self.locate(x + e)?;
            let (um, vm) = self.locate(x - e)?;
            j[0][axis] = (up - um) / (2.0 * h);
            j[1][axis] = (vp - vm) / (2.0 * h);
        }
        Some(j)
    }
}

/// A pixel straddling a silhouette, split into near and far regions.
#[derive(Debug, Clone)]
pub struct BoundaryInfo {
    pub is_boundary: bool,
    pub x_near: Intersection,
    pub x_far: Intersection,
    /// Area fraction of the near region, in [0,1].
    pub w: f64,
    /// Boundary (silhouette) point found by the surface walk.
    pub boundary_point: Vec3,
    /// World-space direction whose displacement shifts the silhouette line:
    /// `d offset = offset_dir . dx` in sub-pixel units along the line normal.
    pub offset_dir: Vec3,
    /// d(area fraction)/d(offset): the silhouette chord length in the pixel.
    pub chord: f64,
}

impl BoundaryInfo {
    pub fn interior(center: Intersection) -> Self {
        BoundaryInfo {
            is_boundary: false,
            x_near: center,
            x_far: center,
            w: 1.0,
            boundary_point: center.x,
            offset_dir: Vec3::ZERO,
            chord: 0.0,
        }
    }
}

/// Area of the part of the unit square `[-1/2,1/2]^2` with
/// `(p - b) . m <= 0`, plus the length of the clipped line segment.
fn clip_square(b: [f64; 2], m: [f64; 2]) -> (f64, f64) {
    let sq = [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]];
    let side = |p: [f64; 2]| (p[0] - b[0]) * m[0] + (p[1] - b[1]) * m[1];
    let mut poly: Vec<[f64; 2]> = Vec::with_capacity(5);
    let mut on_line: Vec<[f64; 2]> = Vec::new();
    for i in 0..4 {
        let (p, q) = (sq[i], sq[(i + 1) % 4]);
        let (sp, sq_) = (side(p), side(q));
        if sp <= 0.0 {
            poly.push(p);
        }
        if (sp < 0.0) != (sq_ < 0.0) && sp != sq_ {
            let t = sp / (sp - sq_);
            let c = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
            poly.push(c);
            on_line.push(c);
        }
    }
    let mut area = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        area += p[0] * q[1] - q[0] * p[1];
    }
    let chord = match on_line.len() {
        2 => ((on_line[0][0] - on_line[1][0]).powi(2) + (on_line[0][1] - on_line[1][1]).powi(2))
            .sqrt(),
        _ => 0.0,
    };
    (0.5 * area.abs(), chord)
}

/// Walks from the center hit along the surface (view direction projected onto
/// the tangent plane, one Newton reprojection per move) looking for a
/// silhouette point inside the pixel. On success the pixel is split by the
/// projected silhouette line; rays through the centroids of the two parts
/// produce `x_near` and `x_far`.
/// Moves along the surface: tangent step, then one Newton reprojection onto
/// f = 0. Returns the new point unless the projection diverged.
fn surface_step<F: DiffField + ?Sized>(field: &F, x: Vec3, step: Vec3) -> Option<Vec3> {
    let mut y = x + step;
    let g = gradient_fast(field, y);
    let f = f_at(field, y);
    y = y - g * (f / g.dot(g).max(1e-12));
    (f_at(field, y).abs() <= WALK_DIVERGED).then_some(y)
}

fn walk_from<F: DiffField + ?Sized>(
    field: &F,
    footprint: &PixelFootprint,
    start: Vec3,
) -> Option<Vec3> {
    let mut x = start;
    for _ in 0..=WALK_MAX_STEPS {
        let g = gradient_fast(field, x);
        if g.norm() < 1e-8 {
            return None;
        }
        let n = g.normalized();
        let v = (x - footprint.origin).normalized();
        let nv = n.dot(v);
        if nv.abs() < BOUNDARY_NV {
            return Some(x);
        }
        let tangent = v - n * nv;
        if tangent.norm() < 1e-12 {
            return None;
        }
        let d = tangent.normalized();
        // Newton step on s -> n(x + s d) . v: the slope is probed one base
        // step ahead, then the move is clamped to the trust region. A fixed
        // base step cannot reach the silhouette, where n . v flattens out
        // quadratically with surface distance.
        let probe = surface_step(field, x, d * WALK_STEP)?;
        let gp = gradient_fast(field, probe);
        if gp.norm() < 1e-8 {
            return None;
        }
        let nv_probe = gp.normalized().dot((probe - footprint.origin).normalized());
        let slope = (nv_probe - nv) / WALK_STEP;
        if slope.abs() < 1e-9 {
            return None;
        }
        let s = (-nv / slope).clamp(-WALK_TRUST, WALK_TRUST);
        x = if s.abs() <= WALK_STEP { surface_step(field, x, d * s)? } else {
            // Cover long moves in base-step hops so the Newton projection
            // stays in its basin.
            let hops = (s.abs() / WALK_STEP).ceil() as usize;
            let mut y = x;
            for _ in 0..hops.min(64) {
                y = surface_step(field, y, d * s.signum() * WALK_STEP)?;
            }
            y
        };
        match footprint.locate(x) {
            Some((u, v)) if u.abs() <= 1.0 && v.abs() <= 1.0 => {}
            _ => return None,
        }
    }
    None
}

pub fn surface_walk<F: DiffField + ?Sized>(
    field: &F,
    footprint: &PixelFootprint,
    center: &Intersection,
    ground: Option<&GroundPlane>,
) -> BoundaryInfo {
    let interior = || BoundaryInfo::interior(*center);
    let mut found = center.valid.then(|| walk_from(field, footprint, center.x)).flatten();
    if found.is_none() {
        // A center ray landing on the background (ground) of a silhouette
        // pixel walks away from the object; retry from the nearest corner
        // hit, which sits on the occluder when the pixel straddles an edge.
        let corners: Vec<Ray> = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
            .iter()
            .map(|&(u, v)| footprint.ray(u, v))
            .collect();
        let hits = ray_march_batch(field, &corners, ground);
        let nearest = hits
            .iter()
            .filter(|h| h.valid)
            .min_by(|a, b| a.t.total_cmp(&b.t));
        if let Some(h) = nearest {
            let gap = if center.valid { (center.t - h.t).abs() } else { f64::INFINITY };
            if gap > 3.0 * WALK_STEP {
                found = walk_from(field, footprint, h.x);
            }
        }
    }
    let Some(x) = found else {
        return interior();
    };

    let Some((ub, vb)) = footprint.locate(x) else {
        return interior();
    };
    let Some(jac) = footprint.pixel_jacobian(x) else {
        return interior();
    };
    let n = gradient_fast(field, x).normalized();
    let view = (x - footprint.origin).normalized();
    // Silhouette tangent in 3D is n x v; its pixel projection gives the line
    // direction, the perpendicular is the line normal, oriented so +m points
    // to the far (background) side like the projected surface normal.
    let s3 = n.cross(view);
    let proj = |w: Vec3| [jac[0][0] * w.x + jac[0][1] * w.y + jac[0][2] * w.z,
                          jac[1][0] * w.x + jac[1][1] * w.y + jac[1][2] * w.z];
    let s2 = proj(s3);
    let mut m = [s2[1], -s2[0]];
    let mn = (m[0] * m[0] + m[1] * m[1]).sqrt();
    if mn < 1e-9 {
        return interior();
    }
    m = [m[0] / mn, m[1] / mn];
    let n2 = proj(n);
    if m[0] * n2[0] + m[1] * n2[1] < 0.0 {
        m = [-m[0], -m[1]];
    }

    let (w, chord) = clip_square([ub, vb], m);
    if !(0.02..=0.98).contains(&w) {
        return interior();
    }

    // Probe rays through points displaced from the boundary along -m (near)
    // and +m (far), clamped into the pixel.
    let clamp_px = |p: [f64; 2]| [p[0].clamp(-0.48, 0.48), p[1].clamp(-0.48, 0.48)];
    let near_px = clamp_px([ub - 0.25 * m[0], vb - 0.25 * m[1]]);
    let far_px = clamp_px([ub + 0.25 * m[0], vb + 0.25 * m[1]]);
    let rays = [footprint.ray(near_px[0], near_px[1]), footprint.ray(far_px[0], far_px[1])];
    let hits = ray_march_batch(field, &rays, ground);
    if !hits[0].valid || !hits[1].valid {
        return interior();
    }
    let (x_near, x_far, w) =
        if hits[0].t <= hits[1].t { (hits[0], hits[1], w) } else { (hits[1], hits[0], 1.0 - w) };

    // offset_dir maps a world displacement of the boundary point to the
    // signed sub-pixel shift of the line along m.
    let offset_dir = Vec3::new(
        m[0] * jac[0][0] + m[1] * jac[1][0],
        m[0] * jac[0][1] + m[1] * jac[1][1],
        m[0] * jac[0][2] + m[1] * jac[1][2],
    );

    BoundaryInfo {
        is_boundary: true,
        x_near,
        x_far,
        w,
        boundary_point: x,
        offset_dir,
        chord,
    }
}

/// The area fraction `w` as a tape variable. Its value is the detected `w`;
/// its gradient chains through a Newton displacement of the boundary point
/// along the surface normal, `dx = -grad f * f / |grad f|^2`, projected onto
/// the silhouette line normal in pixel space.
pub fn boundary_w_var<F: DiffField + ?Sized>(field: &F, info: &BoundaryInfo) -> Var {
    let tape = field.tape();
    if !info.is_boundary {
        return tape.scalar(info.w);
    }
    let x = tape.input(
        ArrayD::from_shape_vec(IxDyn(&[1, 3]), info.boundary_point.as_array().to_vec()).unwrap(),
    );
    let f = field.f_var(&x).reshape(&[1, 1]);
    let g = field_gradient(field, &x);
    let norm2 = g.square().sum_to(&[1, 1]).clamp_min(1e-12);
    let dx = &(&g * &f).neg() / &norm2;
    let m = tape.input(
        ArrayD::from_shape_vec(IxDyn(&[1, 3]), info.offset_dir.as_array().to_vec()).unwrap(),
    );
    let offset = (&dx * &m).sum();
    // Detected value plus the (numerically near-zero) differentiable shift.
    let base = info.w - offset.scalar_value() * info.chord;
    (&(&offset * info.chord) + base).clamp_min(0.0).clamp_max(1.0)
}
