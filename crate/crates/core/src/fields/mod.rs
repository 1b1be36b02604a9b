//! Neural SDF and material networks, positional encoding, analytic SDF
//! primitives (test oracles and dataset geometry), surface normals and the
//! eikonal regularizer.

use crate::diffengine::{concat_cols, grad, Tape, Var};
use crate::math::{Ray, Vec3};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("degenerate normal: |grad f| = {norm:.3e} at point index {index}")]
    DegenerateNormal { index: usize, norm: f64 },
    #[error("parameter segment `{0}` not found")]
    MissingSegment(String),
}

// ---------------------------------------------------------------------------
// Flat parameter storage
// ---------------------------------------------------------------------------

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus the layer layout that carves it up.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FieldParameters {
    pub data: Vec<f64>,
    pub segments: Vec<ParamSegment>,
}

impl FieldParameters {
    pub fn new() -> Self {
        FieldParameters { data: Vec::new(), segments: Vec::new() }
    }

    /// Append a zero-initialized segment, returning its index.
    pub fn reserve(&mut self, name: &str, shape: &[usize]) -> usize {
        let offset = self.data.len();
        let seg = ParamSegment { name: name.to_string(), offset, shape: shape.to_vec() };
        self.data.resize(offset + seg.len(), 0.0);
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn segment(&self, idx: usize) -> &ParamSegment {
        &self.segments[idx]
    }

    pub fn values(&self, idx: usize) -> &[f64] {
        let s = &self.segments[idx];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut [f64] {
        let s = self.segments[idx].clone();
        &mut self.data[s.offset..s.offset + s.len()]
    }

    pub fn array(&self, idx: usize) -> ArrayD<f64> {
        let s = &self.segments[idx];
        ArrayD::from_shape_vec(IxDyn(&s.shape), self.values(idx).to_vec()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Default for FieldParameters {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Frequency encoding: `p -> (p, sin(2^k pi p), cos(2^k pi p))` for
/// `k = 0..freqs-1`, per coordinate. Output width `3 + 6 * freqs`.
pub fn positional_encode(tape: &Tape, p: &Var, freqs: usize) -> Var {
    if freqs == 0 {
        return p.clone();
    }
    let _ = tape;
    let mut parts = vec![p.clone()];
    for k in 0..freqs {
        let scale = std::f64::consts::PI * (1u64 << k) as f64;
        let scaled = p * scale;
        parts.push(scaled.sin());
        parts.push(scaled.cos());
    }
    let refs: Vec<&Var> = parts.iter().collect();
    concat_cols(&refs)
}

/// Value-only mirror of [`positional_encode`].
pub fn positional_encode_values(p: &Array2<f64>, freqs: usize) -> Array2<f64> {
    let n = p.nrows();
    let mut out = Array2::zeros((n, 3 + 6 * freqs));
    out.slice_mut(ndarray::s![.., 0..3]).assign(p);
    for k in 0..freqs {
        let scale = std::f64::consts::PI * (1u64 << k) as f64;
        let col = 3 + 6 * k;
        out.slice_mut(ndarray::s![.., col..col + 3]).assign(&p.mapv(|v| (v * scale).sin()));
        out.slice_mut(ndarray::s![.., col + 3..col + 6]).assign(&p.mapv(|v| (v * scale).cos()));
    }
    out
}

pub fn encoded_width(freqs: usize) -> usize {
    3 + 6 * freqs
}

// ---------------------------------------------------------------------------
// SDF network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SdfConfig {
    /// Number of linear layers in the geometry MLP.
    pub depth: usize,
    pub width: usize,
    pub freqs: usize,
    /// Width of the geometry feature passed to the material network.
    pub feature_dim: usize,
    /// Radius of the sphere the network is initialized to.
    pub init_radius: f64,
    /// Initial value of the sharpness scalar `s` (stored as its logarithm).
    pub init_s: f64,
}

impl Default for SdfConfig {
    fn default() -> Self {
        SdfConfig {
            depth: 8,
            width: 256,
            freqs: 6,
            feature_dim: 256,
            init_radius: 0.5,
            init_s: 10.0,
        }
    }
}

/// Geometry MLP: softplus (beta=100) hidden activations, one input skip
/// connection for deep configurations, outputs signed distance plus a
/// feature vector. The sharpness scalar `s` lives here as `exp(ln_s)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SdfNetwork {
    pub config: SdfConfig,
    /// Layer at which the encoded input is re-concatenated, if any.
    pub skip_layer: Option<usize>,
    seg_w: Vec<usize>,
    seg_b: Vec<usize>,
    seg_ln_s: usize,
}

const HIDDEN_BETA: f64 = 100.0;

impl SdfNetwork {
    /// Reserve parameter segments and apply geometric sphere initialization.
    pub fn new(config: SdfConfig, params: &mut FieldParameters, rng: &mut ChaCha8Rng) -> Self {
        let d_in = encoded_width(config.freqs);
        let d_out = 1 + config.feature_dim;
        let skip_layer = (config.depth >= 6).then_some(config.depth / 2);

        let mut dims = Vec::new(); // (fan_in, fan_out) per layer
        for l in 0..config.depth {
            let fan_in = if l == 0 {
                d_in
            } else if skip_layer == Some(l) {
                config.width + d_in
            } else {
                config.width
            };
            let fan_out = if l == config.depth - 1 { d_out } else { config.width };
            dims.push((fan_in, fan_out));
        }

        let mut seg_w = Vec::new();
        let mut seg_b = Vec::new();
        for (l, &(fi, fo)) in dims.iter().enumerate() {
            seg_w.push(params.reserve(&format!("sdf.w{l}"), &[fi, fo]));
            seg_b.push(params.reserve(&format!("sdf.b{l}"), &[fo]));
        }
        let seg_ln_s = params.reserve("sdf.ln_s", &[]);
        params.values_mut(seg_ln_s)[0] = config.init_s.ln();

        let net = SdfNetwork { config, skip_layer, seg_w, seg_b, seg_ln_s };
        net.geometric_init(params, &dims, rng);
        net
    }

    /// Initialize weights so the network starts close to the signed distance
    /// of a sphere of `init_radius` centered at the origin (SAL-style init;
    /// positional-encoding channels start at zero weight).
    fn geometric_init(
        &self,
        params: &mut FieldParameters,
        dims: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) {
        let depth = self.config.depth;
        let d_in = encoded_width(self.config.freqs);
        for (l, &(fi, fo)) in dims.iter().enumerate() {
            let last = l == depth - 1;
            let w = params.values_mut(self.seg_w[l]);
            if last {
                // SDF output column: positive mean so f grows along |x|;
                // feature columns get an ordinary narrow init.
                let mean = (std::f64::consts::PI).sqrt() / (fi as f64).sqrt();
                for r in 0..fi {
                    for c in 0..fo {
                        let idx = r * fo + c;
                        w[idx] = if c == 0 {
                            mean + 1e-4 * normal(rng)
                        } else {
                            1e-2 * normal(rng)
                        };
                    }
                }
            } else {
                let std = (2.0f64).sqrt() / (fo as f64).sqrt();
                for v in w.iter_mut() {
                    *v = std * normal(rng);
                }
                // Zero the rows fed by sin/cos channels so the init is a
                // function of raw position only.
                let zero_rows: Vec<usize> = if l == 0 {
                    (3..d_in).collect()
                } else if self.skip_layer == Some(l) {
                    (self.config.width + 3..fi).collect()
                } else {
                    Vec::new()
                };
                let w = params.values_mut(self.seg_w[l]);
                for r in zero_rows {
                    for c in 0..fo {
                        w[r * fo + c] = 0.0;
                    }
                }
            }
            let b = params.values_mut(self.seg_b[l]);
            if last {
                b[0] = -self.config.init_radius;
            }
        }
        self.calibrate_init(params);
    }

    /// Rescale the SDF output column and bias so that f(0) = -r exactly and
    /// f vanishes (on average over directions) at radius r.
    fn calibrate_init(&self, params: &mut FieldParameters) {
        let r = self.config.init_radius;
        let last = self.config.depth - 1;
        let fo = params.segment(self.seg_w[last]).shape[1];

        params.values_mut(self.seg_b[last])[0] = 0.0;
        let dirs = [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        let mut pts = Array2::zeros((1 + dirs.len(), 3));
        for (i, d) in dirs.iter().enumerate() {
            for c in 0..3 {
                pts[[1 + i, c]] = d[c] * r;
            }
        }
        let f = self.f_values(params, &pts);
        let f0 = f[0];
        let fr = f.iter().skip(1).sum::<f64>() / dirs.len() as f64;
        if fr - f0 <= 1e-9 {
            // Degenerate draw; keep the uncalibrated init.
            params.values_mut(self.seg_b[last])[0] = -r;
            return;
        }
        let k = r / (fr - f0);
        let w = params.values_mut(self.seg_w[last]);
        for row in 0..w.len() / fo {
            w[row * fo] *= k;
        }
        params.values_mut(self.seg_b[last])[0] = -r - k * f0;
    }

    pub fn bind<'p>(&'p self, tape: &Tape, params: &'p FieldParameters) -> BoundSdf<'p> {
        let ws = self.seg_w.iter().map(|&i| tape.input(params.array(i))).collect();
        let bs = self.seg_b.iter().map(|&i| tape.input(params.array(i))).collect();
        let ln_s = tape.input(params.array(self.seg_ln_s));
        BoundSdf { net: self, params, ws, bs, ln_s }
    }

    pub fn ln_s_segment(&self) -> usize {
        self.seg_ln_s
    }

    pub fn sharpness(&self, params: &FieldParameters) -> f64 {
        params.values(self.seg_ln_s)[0].exp()
    }

    /// Value-only forward pass for the signed distance (no tape, no feature).
    pub fn f_values(&self, params: &FieldParameters, pts: &Array2<f64>) -> Array1<f64> {
        let enc = positional_encode_values(pts, self.config.freqs);
        let mut h = enc.clone();
        for l in 0..self.config.depth {
            if self.skip_layer == Some(l) {
                h = ndarray::concatenate(Axis(1), &[h.view(), enc.view()]).unwrap();
            }
            let w = self.params_matrix(params, self.seg_w[l]);
            let b = params.values(self.seg_b[l]);
            let mut z = h.dot(&w);
            for mut row in z.rows_mut() {
                for (v, &bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            if l == self.config.depth - 1 {
                return z.column(0).to_owned();
            }
            z.mapv_inplace(|v| stable_softplus(v, HIDDEN_BETA));
            h = z;
        }
        unreachable!()
    }

    fn params_matrix(&self, params: &FieldParameters, seg: usize) -> Array2<f64> {
        let s = params.segment(seg);
        Array2::from_shape_vec((s.shape[0], s.shape[1]), params.values(seg).to_vec()).unwrap()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn stable_softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else if bx < -30.0 {
        bx.exp() / beta
    } else {
        (1.0 + bx.exp()).ln() / beta
    }
}

/// An SDF network bound to one tape: parameter leaves are created once so
/// gradients accumulate onto a single `Var` per layer.
pub struct BoundSdf<'p> {
    net: &'p SdfNetwork,
    params: &'p FieldParameters,
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
    pub ln_s: Var,
}

impl<'p> BoundSdf<'p> {
    /// Forward pass on the tape: `x` is `[n,3]`, returns `(f [n], feature [n,F])`.
    pub fn eval(&self, x: &Var) -> (Var, Var) {
        let tape = x.tape().clone();
        let enc = positional_encode(&tape, x, self.net.config.freqs);
        let mut h = enc.clone();
        for l in 0..self.net.config.depth {
            if self.net.skip_layer == Some(l) {
                h = concat_cols(&[&h, &enc]);
            }
            let z = &h.matmul(&self.ws[l]) + &self.bs[l];
            if l == self.net.config.depth - 1 {
                let n = x.shape()[0];
                let f = z.slice_cols(0, 1).reshape(&[n]);
                let feat = z.slice_cols(1, 1 + self.net.config.feature_dim);
                return (f, feat);
            }
            h = z.softplus(HIDDEN_BETA);
        }
        unreachable!()
    }

    pub fn f(&self, x: &Var) -> Var {
        self.eval(x).0
    }

    /// Sharpness `s = exp(ln_s)` as a differentiable scalar.
    pub fn s(&self) -> Var {
        self.ln_s.exp()
    }

    /// All parameter leaves with their segment indices, for gradient scatter.
    pub fn param_vars(&self) -> Vec<(usize, Var)> {
        let mut out = Vec::new();
        for (i, v) in self.net.seg_w.iter().zip(&self.ws) {
            out.push((*i, v.clone()));
        }
        for (i, v) in self.net.seg_b.iter().zip(&self.bs) {
            out.push((*i, v.clone()));
        }
        out.push((self.net.seg_ln_s, self.ln_s.clone()));
        out
    }

    pub fn network(&self) -> &SdfNetwork {
        self.net
    }

    pub fn parameters(&self) -> &FieldParameters {
        self.params
    }
}

// ---------------------------------------------------------------------------
// Material network
// ---------------------------------------------------------------------------

pub const SG_BASIS_COUNT: usize = 9;
pub const SPECULAR_COEFFS: usize = 3 * SG_BASIS_COUNT;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaterialConfig {
    pub depth: usize,
    pub width: usize,
    /// Must match the geometry network's `feature_dim`.
    pub feature_dim: usize,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        MaterialConfig { depth: 4, width: 256, feature_dim: 256 }
    }
}

/// Material MLP: input `position (+) normal (+) geometry feature`, ReLU hidden
/// activations, softplus (beta=100) output activation. Outputs a 3-channel
/// diffuse albedo and 27 specular coefficients, all nonnegative.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaterialNetwork {
    pub config: MaterialConfig,
    seg_w: Vec<usize>,
    seg_b: Vec<usize>,
}

impl MaterialNetwork {
    pub fn new(config: MaterialConfig, params: &mut FieldParameters, rng: &mut ChaCha8Rng) -> Self {
        let d_in = 3 + 3 + config.feature_dim;
        let d_out = 3 + SPECULAR_COEFFS;
        let mut seg_w = Vec::new();
        let mut seg_b = Vec::new();
        for l in 0..config.depth {
            let fi = if l == 0 { d_in } else { config.width };
            let fo = if l == config.depth - 1 { d_out } else { config.width };
            let wi = params.reserve(&format!("mat.w{l}"), &[fi, fo]);
            let std = (2.0 / fi as f64).sqrt();
            for v in params.values_mut(wi) {
                *v = std * normal(rng);
            }
            seg_w.push(wi);
            seg_b.push(params.reserve(&format!("mat.b{l}"), &[fo]));
        }
        MaterialNetwork { config, seg_w, seg_b }
    }

    pub fn bind<'p>(&'p self, tape: &Tape, params: &'p FieldParameters) -> BoundMaterial<'p> {
        let ws = self.seg_w.iter().map(|&i| tape.input(params.array(i))).collect();
        let bs = self.seg_b.iter().map(|&i| tape.input(params.array(i))).collect();
        BoundMaterial { net: self, ws, bs }
    }
}

pub struct BoundMaterial<'p> {
    net: &'p MaterialNetwork,
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
}

impl<'p> BoundMaterial<'p> {
    /// `(rho_d [n,3], y [n,27])`, both nonnegative.
    pub fn eval(&self, pos: &Var, normal: &Var, feature: &Var) -> (Var, Var) {
        let mut h = concat_cols(&[pos, normal, feature]);
        for l in 0..self.net.config.depth {
            let z = &h.matmul(&self.ws[l]) + &self.bs[l];
            if l == self.net.config.depth - 1 {
                let out = z.softplus(HIDDEN_BETA);
                let rho_d = out.slice_cols(0, 3);
                let y = out.slice_cols(3, 3 + SPECULAR_COEFFS);
                return (rho_d, y);
            }
            h = z.relu();
        }
        unreachable!()
    }

    pub fn param_vars(&self) -> Vec<(usize, Var)> {
        let mut out = Vec::new();
        for (i, v) in self.net.seg_w.iter().zip(&self.ws) {
            out.push((*i, v.clone()));
        }
        for (i, v) in self.net.seg_b.iter().zip(&self.bs) {
            out.push((*i, v.clone()));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Differentiable field abstraction
// ---------------------------------------------------------------------------

/// A signed-distance field usable both on the tape (differentiable) and in
/// value-only hot paths (ray marching). Implemented by bound networks, by
/// analytic oracles and by ground-composited scenes.
pub trait DiffField {
    fn tape(&self) -> &Tape;
    /// `[n,3] -> [n]` signed distances, differentiable.
    fn f_var(&self, x: &Var) -> Var;
    /// Value-only signed distances.
    fn f_fast(&self, pts: &Array2<f64>) -> Array1<f64>;
}

/// Unit-normalized spatial gradient of the field: `grad f / |grad f|`,
/// differentiable in the field parameters (taped double-backward).
pub fn field_normal<F: DiffField + ?Sized>(field: &F, x: &Var) -> Result<Var, FieldError> {
    let g = field_gradient(field, x);
    let norms = g.square().sum_to(&[x.shape()[0], 1]).sqrt();
    for (i, v) in norms.value().iter().enumerate() {
        if *v < 1e-8 {
            return Err(FieldError::DegenerateNormal { index: i, norm: *v });
        }
    }
    Ok(&g / &norms)
}

/// Raw (unnormalized) spatial gradient `grad_x f`, `[n,3]`.
pub fn field_gradient<F: DiffField + ?Sized>(field: &F, x: &Var) -> Var {
    let f = field.f_var(x);
    grad(&f.sum(), &[x]).remove(0)
}

/// Eikonal regularizer: `mean_i (|grad f(p_i)| - 1)^2`.
pub fn eikonal_loss<F: DiffField + ?Sized>(field: &F, points: &Var) -> Var {
    let g = field_gradient(field, points);
    let norms = g.square().sum_to(&[points.shape()[0], 1]).sqrt();
    (&norms - 1.0).square().mean()
}

/// Backward pass from `loss` through the given `(segment, leaf)` pairs,
/// scattered into a flat gradient vector aligned with `params.data`.
pub fn flat_gradient(
    params: &FieldParameters,
    pairs: &[(usize, Var)],
    loss: &Var,
) -> Result<Vec<f64>, crate::diffengine::DiffError> {
    let vars: Vec<&Var> = pairs.iter().map(|(_, v)| v).collect();
    let grads = crate::diffengine::backward(loss, &vars)?;
    let mut out = vec![0.0; params.len()];
    for ((seg, _), g) in pairs.iter().zip(&grads) {
        let s = params.segment(*seg);
        for (slot, v) in out[s.offset..s.offset + s.len()].iter_mut().zip(g.iter()) {
            *slot += v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ground plane
// ---------------------------------------------------------------------------

/// The known ground: a plane `n . p = offset` with unit normal, optionally
/// with a known depth raster for non-planar grounds (handled by a pinning
/// loss rather than analytic compositing).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundPlane {
    pub normal: Vec3,
    pub offset: f64,
}

impl GroundPlane {
    pub fn new(normal: Vec3, offset: f64) -> Self {
        GroundPlane { normal: normal.normalized(), offset }
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Ray parameter of the plane intersection, if in front of the origin.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let denom = self.normal.dot(ray.dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - self.normal.dot(ray.origin)) / denom;
        (t > 0.0).then_some(t)
    }
}

// ---------------------------------------------------------------------------
// Scene field: network composited with the known ground
// ---------------------------------------------------------------------------

/// How the known ground enters the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundMode {
    /// Planar ground composited analytically: `min(f_net, f_plane)`.
    AnalyticPlane,
    /// Non-planar ground: network alone; a pinning loss holds f = 0 on
    /// sampled ground-depth points.
    Pinned,
    /// No ground handling (free-space field).
    None,
}

/// Network SDF bound to one tape, optionally min-composited with the ground
/// plane. This is the field the rendering modules consume during training.
pub struct BoundScene<'p> {
    pub sdf: BoundSdf<'p>,
    pub ground: Option<GroundPlane>,
    tape: Tape,
}

impl<'p> BoundScene<'p> {
    pub fn new(tape: &Tape, sdf: BoundSdf<'p>, ground: Option<GroundPlane>) -> Self {
        BoundScene { sdf, ground, tape: tape.clone() }
    }

    fn plane_f_var(&self, x: &Var) -> Option<Var> {
        let g = self.ground.as_ref()?;
        let n = x.shape()[0];
        let nw = self.tape.input(
            ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![g.normal.x, g.normal.y, g.normal.z])
                .unwrap(),
        );
        Some(&x.matmul(&nw).reshape(&[n]) - g.offset)
    }
}

/// The bare network as a field (no ground compositing). Eikonal and pinning
/// regularizers act on this, never on the plane-composited minimum.
impl<'p> DiffField for BoundSdf<'p> {
    fn tape(&self) -> &Tape {
        self.ln_s.tape()
    }

    fn f_var(&self, x: &Var) -> Var {
        self.f(x)
    }

    fn f_fast(&self, pts: &Array2<f64>) -> Array1<f64> {
        self.net.f_values(self.params, pts)
    }
}

impl<'p> DiffField for BoundScene<'p> {
    fn tape(&self) -> &Tape {
        &self.tape
    }

    fn f_var(&self, x: &Var) -> Var {
        let f_net = self.sdf.f(x);
        match self.plane_f_var(x) {
            Some(f_plane) => f_net.mine(&f_plane),
            None => f_net,
        }
    }

    fn f_fast(&self, pts: &Array2<f64>) -> Array1<f64> {
        let mut f = self.sdf.network().f_values(self.sdf.parameters(), pts);
        if let Some(g) = &self.ground {
            for (i, row) in pts.rows().into_iter().enumerate() {
                let p = Vec3::new(row[0], row[1], row[2]);
                f[i] = f[i].min(g.signed_distance(p));
            }
        }
        f
    }
}

// ---------------------------------------------------------------------------
// Analytic SDFs (oracles, initializers, dataset geometry)
// ---------------------------------------------------------------------------

/// Closed-form signed distance fields. Test oracle and synthetic-dataset
/// geometry; `Union` is a lower bound on true distance, every other variant
/// is exact. `BumpyPlane` is Lipschitz-normalized (a lower bound, not exact).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum AnalyticSdf {
    Sphere { center: Vec3, radius: f64 },
    Plane { normal: Vec3, offset: f64 },
    Box { center: Vec3, half_extents: Vec3 },
    Union(Vec<AnalyticSdf>),
    /// Plane displaced by `amplitude * sin(freq x) * sin(freq y)`, divided by
    /// its Lipschitz bound so `|grad f| <= 1`.
    BumpyPlane { normal: Vec3, offset: f64, amplitude: f64, frequency: f64 },
}

impl AnalyticSdf {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        AnalyticSdf::Sphere { center, radius }
    }

    pub fn plane(normal: Vec3, offset: f64) -> Self {
        AnalyticSdf::Plane { normal: normal.normalized(), offset }
    }

    pub fn value(&self, p: Vec3) -> f64 {
        match self {
            AnalyticSdf::Sphere { center, radius } => (p - *center).norm() - radius,
            AnalyticSdf::Plane { normal, offset } => normal.dot(p) - offset,
            AnalyticSdf::Box { center, half_extents } => {
                let q = (p - *center).abs() - *half_extents;
                let outside = q.max(Vec3::ZERO).norm();
                let inside = q.max_component().min(0.0);
                outside + inside
            }
            AnalyticSdf::Union(children) => children
                .iter()
                .map(|c| c.value(p))
                .fold(f64::INFINITY, f64::min),
            AnalyticSdf::BumpyPlane { normal, offset, amplitude, frequency } => {
                let lip = (1.0 + 2.0 * amplitude * frequency).max(1.0);
                let h = amplitude * (frequency * p.x).sin() * (frequency * p.y).sin();
                (normal.dot(p) - offset - h) / lip
            }
        }
    }

    /// Analytic gradient where closed-form, central differences otherwise.
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        match self {
            AnalyticSdf::Sphere { center, .. } => {
                let d = p - *center;
                let n = d.norm();
                if n < 1e-12 {
                    Vec3::new(0.0, 0.0, 1.0)
                } else {
                    d / n
                }
            }
            AnalyticSdf::Plane { normal, .. } => *normal,
            _ => {
                let h = 1e-6;
                let dx = Vec3::new(h, 0.0, 0.0);
                let dy = Vec3::new(0.0, h, 0.0);
                let dz = Vec3::new(0.0, 0.0, h);
                Vec3::new(
                    (self.value(p + dx) - self.value(p - dx)) / (2.0 * h),
                    (self.value(p + dy) - self.value(p - dy)) / (2.0 * h),
                    (self.value(p + dz) - self.value(p - dz)) / (2.0 * h),
                )
            }
        }
    }

    /// Exact first intersection where a closed form exists, dense bisection
    /// marching otherwise. Returns the ray parameter.
    pub fn ray_intersect(&self, ray: &Ray) -> Option<f64> {
        match self {
            AnalyticSdf::Sphere { center, radius } => {
                let oc = ray.origin - *center;
                let b = oc.dot(ray.dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                for t in [-b - sq, -b + sq] {
                    if t >= ray.near && t <= ray.far {
                        return Some(t);
                    }
                }
                None
            }
            AnalyticSdf::Plane { normal, offset } => {
                let denom = normal.dot(ray.dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - normal.dot(ray.origin)) / denom;
                (t >= ray.near && t <= ray.far).then_some(t)
            }
            AnalyticSdf::Union(children) => children
                .iter()
                .filter_map(|c| c.ray_intersect(ray))
                .min_by(|a, b| a.partial_cmp(b).unwrap()),
            _ => self.march_intersect(ray, 4096),
        }
    }

    /// Dense uniform marching with bisection refinement; the brute-force
    /// oracle path used by the synthetic renderer for non-closed-form shapes.
    pub fn march_intersect(&self, ray: &Ray, steps: usize) -> Option<f64> {
        let (t0, t1) = (ray.near, ray.far);
        if !(t1 > t0) {
            return None;
        }
        let dt = (t1 - t0) / steps as f64;
        let mut prev_t = t0;
        let mut prev_f = self.value(ray.at(t0));
        if prev_f <= 0.0 {
            return Some(t0);
        }
        for i in 1..=steps {
            let t = t0 + dt * i as f64;
            let f = self.value(ray.at(t));
            if f <= 0.0 {
                // Bisection down to machine-level bracket width.
                let (mut lo, mut hi) = (prev_t, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.value(ray.at(mid)) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            prev_t = t;
            prev_f = f;
        }
        let _ = prev_f;
        None
    }

    /// Whether the open segment between two points is blocked by the surface.
    pub fn segment_occluded(&self, from: Vec3, to: Vec3, eps: f64) -> bool {
        let d = to - from;
        let len = d.norm();
        if len < 1e-12 {
            return false;
        }
        let ray = Ray::new(from, d / len, eps, len - eps);
        self.ray_intersect(&ray).is_some()
    }
}

/// Tape adapter for an analytic SDF: forward values enter as constants per
/// evaluation, so the field is differentiable in position only. Used by
/// oracle-vs-implementation tests.
pub struct AnalyticField {
    pub sdf: AnalyticSdf,
    tape: Tape,
}

impl AnalyticField {
    pub fn new(tape: &Tape, sdf: AnalyticSdf) -> Self {
        AnalyticField { sdf, tape: tape.clone() }
    }
}

impl DiffField for AnalyticField {
    fn tape(&self) -> &Tape {
        &self.tape
    }

    fn f_var(&self, x: &Var) -> Var {
        match &self.sdf {
            AnalyticSdf::Sphere { center, radius } => {
                let n = x.shape()[0];
                let c = self.tape.input(
                    ArrayD::from_shape_vec(IxDyn(&[3]), vec![center.x, center.y, center.z])
                        .unwrap(),
                );
                let d = x - &c;
                &d.square().sum_to(&[n, 1]).sqrt().reshape(&[n]) - *radius
            }
            AnalyticSdf::Plane { normal, offset } => {
                let n = x.shape()[0];
                let nw = self.tape.input(
                    ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![normal.x, normal.y, normal.z])
                        .unwrap(),
                );
                &x.matmul(&nw).reshape(&[n]) - *offset
            }
            AnalyticSdf::Union(children) => {
                // Elementwise min via min(a,b) = b - relu(b - a).
                let mut vals: Vec<Var> = children
                    .iter()
                    .map(|c| AnalyticField::new(&self.tape, c.clone()).f_var(x))
                    .collect();
                let mut acc = vals.remove(0);
                for v in vals {
                    acc = &v - &(&v - &acc).relu();
                }
                acc
            }
            other => {
                // No tape-native form; values enter as constants.
                let pts = x.value();
                let n = pts.shape()[0];
                let vals: Vec<f64> = (0..n)
                    .map(|i| other.value(Vec3::new(pts[[i, 0]], pts[[i, 1]], pts[[i, 2]])))
                    .collect();
                self.tape.input(ArrayD::from_shape_vec(IxDyn(&[n]), vals).unwrap())
            }
        }
    }

    fn f_fast(&self, pts: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(
            pts.rows()
                .into_iter()
                .map(|r| self.sdf.value(Vec3::new(r[0], r[1], r[2]))),
        )
    }
}
