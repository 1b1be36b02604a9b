//! Outgoing radiance for RGB supervision: spherical-Gaussian speculars, the
//! shading equation and assembly of the training objective.

use ndarray::{ArrayD, IxDyn};

use crate::diffengine::Var;
use crate::fields::SG_BASIS_COUNT;
use crate::math::Vec3;

/// Weight of the eikonal regularizer in the total objective.
pub const EIKONAL_WEIGHT: f64 = 0.1;

/// Fixed spherical-Gaussian shininess bank: `D_k(h, n) = exp(kappa_k ((h.n) - 1))`.
#[derive(Debug, Clone)]
pub struct SgBasis {
    pub kappa: [f64; SG_BASIS_COUNT],
}

impl Default for SgBasis {
    /// Nine exponents log-spaced over [1, 512], from diffuse-adjacent lobes
    /// to sharp highlights.
    fn default() -> Self {
        let mut kappa = [0.0; SG_BASIS_COUNT];
        for (k, v) in kappa.iter_mut().enumerate() {
            *v = 512f64.powf(k as f64 / (SG_BASIS_COUNT - 1) as f64);
        }
        SgBasis { kappa }
    }
}

impl SgBasis {
    pub fn eval(&self, h_dot_n: f64) -> [f64; SG_BASIS_COUNT] {
        self.kappa.map(|k| (k * (h_dot_n - 1.0)).exp())
    }
}

/// Half vector between the light direction and the view direction `-v`:
/// `h = (l - v) / |l - v|`. `None` when the light shines along the camera
/// ray through the point (degenerate; speculars are dropped).
pub fn half_vector(l: Vec3, v: Vec3) -> Option<Vec3> {
    let d = l - v;
    let n = d.norm();
    (n > 1e-9).then(|| d / n)
}

/// Specular albedo `rho_s[c] = sum_k y[c,k] D_k(h, n)` for a pixel batch.
/// `y` is `[P, 27]` laid out channel-major (9 basis weights per channel),
/// `n` is the differentiable `[P,3]` unit normal, `h` the per-pixel half
/// vector (`None` rows contribute zero). Returns `[P, 3]`.
pub fn specular(y: &Var, basis: &SgBasis, h: &[Option<Vec3>], n: &Var) -> Var {
    let tape = y.tape();
    let p = h.len();
    assert_eq!(y.shape(), vec![p, 3 * SG_BASIS_COUNT]);
    let mut h_flat = vec![0.0; p * 3];
    let mut mask = vec![0.0; p];
    for (i, hv) in h.iter().enumerate() {
        if let Some(hv) = hv {
            h_flat[3 * i..3 * i + 3].copy_from_slice(&hv.as_array());
            mask[i] = 1.0;
        }
    }
    let hc = tape.input(ArrayD::from_shape_vec(IxDyn(&[p, 3]), h_flat).unwrap());
    let mc = tape.input(ArrayD::from_shape_vec(IxDyn(&[p, 1]), mask).unwrap());
    let h_dot_n = (&(n * &hc).sum_to(&[p, 1]) * &mc).broadcast(&[p, SG_BASIS_COUNT]);
    let kappa = tape.input(
        ArrayD::from_shape_vec(IxDyn(&[1, SG_BASIS_COUNT]), basis.kappa.to_vec()).unwrap(),
    );
    let d = (&(&h_dot_n - 1.0) * &kappa.broadcast(&[p, SG_BASIS_COUNT])).exp();
    let d = &d * &mc;
    let per_channel: Vec<Var> = (0..3)
        .map(|c| {
            let yc = y.slice_cols(c * SG_BASIS_COUNT, (c + 1) * SG_BASIS_COUNT);
            (&yc * &d).sum_to(&[p, 1])
        })
        .collect();
    crate::diffengine::concat_cols(&per_channel.iter().collect::<Vec<_>>())
}

/// Shading equation: `C = (rho_d + rho_s) C_in max(l.n, 0)`, per channel in
/// linear color. `c_in` is `[P]`, albedos `[P,3]`, `n` the unit normal.
/// The foreshortening clamp keeps back-facing radiance at zero.
pub fn render_outgoing(
    rho_d: &Var,
    rho_s: &Var,
    c_in: &Var,
    n: &Var,
    lights: &[crate::shadowrender::LightSample],
) -> Var {
    let tape = rho_d.tape();
    let p = lights.len();
    let l_flat: Vec<f64> = lights.iter().flat_map(|s| s.l.as_array()).collect();
    let lc = tape.input(ArrayD::from_shape_vec(IxDyn(&[p, 3]), l_flat).unwrap());
    let cos = (n * &lc).sum_to(&[p, 1]).relu();
    &(&(rho_d + rho_s) * &c_in.reshape(&[p, 1])) * &cos
}

/// Per-pixel L1 over channels (sum convention), averaged over the batch.
/// `c` is `[P,3]`.
pub fn rgb_loss(c: &Var, targets: &[[f64; 3]]) -> Var {
    let tape = c.tape();
    let p = targets.len();
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let t = tape.input(ArrayD::from_shape_vec(IxDyn(&[p, 3]), flat).unwrap());
    &(c - &t).abs().sum() * (1.0 / p as f64)
}

/// Training objective: photometric term plus the weighted eikonal
/// regularizer, plus an optional ground-pinning term for non-planar grounds.
pub fn total_loss(photometric: &Var, eikonal: &Var, pinning: Option<&Var>) -> Var {
    let base = photometric + &(eikonal * EIKONAL_WEIGHT);
    match pinning {
        Some(p) => &base + p,
        None => base,
    }
}

#[cfg(test)]
mod tests;
