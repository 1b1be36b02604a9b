//! Shadow rays: light models, SDF-derived opacity, transmittance integration
//! with hierarchical sampling, and boundary-pixel aggregation.
//!
//! Sampling is deterministic: the importance round places its samples by
//! stratified inverse-CDF draws over the coarse opacity mass, so a training
//! run is reproducible without threading an RNG through the renderer.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::Var;
use crate::fields::DiffField;
use crate::math::{Ray, Vec3};

pub const N_UNIFORM: usize = 80;
pub const N_IMPORTANCE: usize = 64;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("point light coincides with the shaded point (distance {0:.2e})")]
    LightTooClose(f64),
}

/// A known light. Directional lights carry a unit direction toward the
/// light; point lights fall off with inverse-square distance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LightSource {
    Directional { direction: Vec3, intensity: f64 },
    Point { position: Vec3, intensity: f64 },
}

/// Light direction and scalar intensity at one surface point.
#[derive(Debug, Clone, Copy)]
pub struct LightSample {
    pub l: Vec3,
    pub intensity: f64,
}

pub fn light_at(light: &LightSource, x: Vec3) -> Result<LightSample, ShadowError> {
    match light {
        LightSource::Directional { direction, intensity } => {
            Ok(LightSample { l: direction.normalized(), intensity: *intensity })
        }
        LightSource::Point { position, intensity } => {
            let d = *position - x;
            let r = d.norm();
            if r < 1e-6 {
                return Err(ShadowError::LightTooClose(r));
            }
            Ok(LightSample { l: d / r, intensity: intensity / (r * r) })
        }
    }
}

/// Binary-shadow supervision compares the incoming radiance against {0,1}
/// labels, so only the direction matters and the intensity is fixed to one.
pub fn light_at_binary(light: &LightSource, x: Vec3) -> Result<LightSample, ShadowError> {
    Ok(LightSample { intensity: 1.0, ..light_at(light, x)? })
}

/// Opacity of one ray segment from the SDF at its endpoints:
/// `max(1 - phi_s(f_next) / phi_s(f_i), 0)` with the logistic `phi_s`.
pub fn alpha_from_sdf(f_i: f64, f_next: f64, s: f64) -> f64 {
    let phi = |x: f64| 1.0 / (1.0 + (-s * x).exp());
    (1.0 - phi(f_next) / phi(f_i).max(1e-200)).max(0.0)
}

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub n_uniform: usize,
    pub n_importance: usize,
    /// Shadow rays terminate on this bounding sphere around the origin.
    pub scene_radius: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n_uniform: N_UNIFORM, n_importance: N_IMPORTANCE, scene_radius: 1.0 }
    }
}

/// One shadow ray's sample positions with field values and segment opacities.
#[derive(Debug, Clone)]
pub struct ShadowRaySamples {
    /// Strictly increasing, starting at the near bound 0.
    pub t: Vec<f64>,
    pub f: Vec<f64>,
    /// Per segment, length `t.len() - 1`.
    pub alpha: Vec<f64>,
}

fn f_along<F: DiffField + ?Sized>(field: &F, x: Vec3, l: Vec3, ts: &[f64]) -> Vec<f64> {
    let mut pts = Array2::zeros((ts.len(), 3));
    for (i, &t) in ts.iter().enumerate() {
        let p = x + l * t;
        pts[[i, 0]] = p.x;
        pts[[i, 1]] = p.y;
        pts[[i, 2]] = p.z;
    }
    field.f_fast(&pts).to_vec()
}

/// Sample positions along the shadow ray from `x` toward `l`: `n_uniform`
/// uniform samples on `[0, far]`, then `n_importance` stratified inverse-CDF
/// samples over the coarse opacity mass. `far` is the scene-sphere exit.
pub fn shadow_ray_ts<F: DiffField + ?Sized>(
    field: &F,
    x: Vec3,
    l: Vec3,
    s: f64,
    cfg: &SampleConfig,
) -> Vec<f64> {
    let ray = Ray::new(x, l, 0.0, f64::INFINITY);
    let far = ray.sphere_exit(Vec3::ZERO, cfg.scene_radius).unwrap_or(0.0);
    if far <= 1e-9 || cfg.n_uniform < 2 {
        return vec![0.0, far.max(1e-6)];
    }
    let mut ts: Vec<f64> =
        (0..cfg.n_uniform).map(|k| far * k as f64 / (cfg.n_uniform - 1) as f64).collect();
    if cfg.n_importance > 0 {
        let f = f_along(field, x, l, &ts);
        let weights: Vec<f64> =
            (0..ts.len() - 1).map(|i| alpha_from_sdf(f[i], f[i + 1], s).max(1e-9)).collect();
        let total: f64 = weights.iter().sum();
        let mut cdf = 0.0;
        let mut seg = 0;
        for j in 0..cfg.n_importance {
            let u = (j as f64 + 0.5) / cfg.n_importance as f64 * total;
            while seg + 1 < weights.len() && cdf + weights[seg] < u {
                cdf += weights[seg];
                seg += 1;
            }
            let frac = ((u - cdf) / weights[seg]).clamp(0.0, 1.0);
            ts.push(ts[seg] + frac * (ts[seg + 1] - ts[seg]));
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    }
    ts
}

/// Value-only sample record (test and inspection path).
pub fn sample_shadow_ray<F: DiffField + ?Sized>(
    field: &F,
    x: Vec3,
    l: Vec3,
    s: f64,
    cfg: &SampleConfig,
) -> ShadowRaySamples {
    let t = shadow_ray_ts(field, x, l, s, cfg);
    let f = f_along(field, x, l, &t);
    let alpha = (0..t.len() - 1).map(|i| alpha_from_sdf(f[i], f[i + 1], s)).collect();
    ShadowRaySamples { t, f, alpha }
}

/// Incoming radiance for a batch of pixels: `C_in = L prod_i (1 - alpha_i)`
/// along each pixel's shadow ray. `x_hat` is the differentiable `[P,3]` ray
/// start (the corrected intersection); sample positions are chosen from its
/// detached value. Returns `[P]`.
pub fn incoming_radiance_batch<F: DiffField + ?Sized>(
    field: &F,
    x_hat: &Var,
    lights: &[LightSample],
    s: &Var,
    cfg: &SampleConfig,
) -> Var {
    let tape = field.tape();
    let p = lights.len();
    assert_eq!(x_hat.shape(), vec![p, 3]);
    let s_val = s.scalar_value();
    let xv = x_hat.value();

    // Per-pixel sample counts differ after dedup; pad to a common length by
    // repeating the far sample (zero-length segments have alpha 0).
    let mut per_pixel: Vec<Vec<f64>> = Vec::with_capacity(p);
    for (i, light) in lights.iter().enumerate() {
        let x = Vec3::new(xv[[i, 0]], xv[[i, 1]], xv[[i, 2]]);
        per_pixel.push(shadow_ray_ts(field, x, light.l, s_val, cfg));
    }
    let n = per_pixel.iter().map(Vec::len).max().unwrap().max(2);
    let mut disp = ArrayD::zeros(IxDyn(&[p, n, 3]));
    for (i, ts) in per_pixel.iter().enumerate() {
        let l = lights[i].l;
        for k in 0..n {
            let t = ts[k.min(ts.len() - 1)];
            disp[[i, k, 0]] = l.x * t;
            disp[[i, k, 1]] = l.y * t;
            disp[[i, k, 2]] = l.z * t;
        }
    }

    let pts = &x_hat.reshape(&[p, 1, 3]).broadcast(&[p, n, 3]) + &tape.input(disp);
    let f = field.f_var(&pts.reshape(&[p * n, 3])).reshape(&[p, n]);
    let phi = (&f * s).sigmoid();
    let phi_i = phi.slice_cols(0, n - 1).clamp_min(1e-200);
    let phi_next = phi.slice_cols(1, n);
    let alpha = (&tape.scalar(1.0) - &(&phi_next / &phi_i)).relu();
    let trans = (&tape.scalar(1.0) - &alpha).clamp_min(1e-12).prod_axis(1);
    let lv = tape.input(ArrayD::from_shape_vec(
        IxDyn(&[p]),
        lights.iter().map(|l| l.intensity).collect(),
    )
    .unwrap());
    &trans * &lv
}

/// Single-pixel wrapper, returns a scalar-shaped `[1]` radiance.
pub fn incoming_radiance<F: DiffField + ?Sized>(
    field: &F,
    x_hat: &Var,
    light: LightSample,
    s: &Var,
    cfg: &SampleConfig,
) -> Var {
    incoming_radiance_batch(field, x_hat, &[light], s, cfg)
}

/// Boundary-pixel aggregation: `w C_near + (1 - w) C_far`. `w` comes from
/// the silhouette construction and stays on the tape.
pub fn aggregate_boundary(c_near: &Var, c_far: &Var, w: &Var) -> Var {
    let one_minus = &w.neg() + 1.0;
    &(w * c_near) + &(&one_minus * c_far)
}

/// Mean L1 distance between computed incoming radiance `[P]` and the
/// per-pixel shadow labels.
pub fn shadow_loss(c_hat: &Var, targets: &[f64]) -> Var {
    let tape = c_hat.tape();
    let t = tape
        .input(ArrayD::from_shape_vec(IxDyn(&[targets.len()]), targets.to_vec()).unwrap());
    (c_hat - &t).abs().mean()
}
