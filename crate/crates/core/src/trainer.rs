//! Optimization loop: batch sampling, Adam, warmup + cosine learning rate,
//! coarse-to-fine image pyramid, checkpointing with bit-identical resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{Tape, Var};
use crate::fields::{
    eikonal_loss, field_normal, flat_gradient, BoundScene, DiffField, FieldParameters, GroundMode,
    GroundPlane, MaterialConfig, MaterialNetwork, ParamSegment, SdfConfig, SdfNetwork,
};
use crate::math::{Ray, Vec3};
use crate::raycast::{
    boundary_w_var, differentiable_intersection, ray_march_batch_steps, surface_walk,
    BoundaryInfo, Intersection, TangentWarnings, WALK_STEP,
};
use crate::scenes::{CameraModel, ImageKind, Raster, SceneDataset};
use crate::shading::{half_vector, render_outgoing, specular, SgBasis};
use crate::shadowrender::{
    incoming_radiance_batch, light_at, light_at_binary, LightSample, LightSource, SampleConfig,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UMBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset kind {found:?} does not match training mode {mode:?}")]
    ModeMismatch { mode: TrainMode, found: ImageKind },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Supervise incoming radiance against binary shadow masks.
    Shadow,
    /// Supervise outgoing radiance against linear RGB images.
    Rgb,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_images: usize,
    pub pixels_per_image: usize,
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub lr_min: f64,
    pub photometric_weight: f64,
    pub eikonal_weight: f64,
    pub eikonal_samples: usize,
    /// Weight of the ground-pinning term (Pinned ground mode only).
    pub pinning_weight: f64,
    pub coarse_to_fine: bool,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Shadow-ray sample counts per pixel.
    pub n_uniform: usize,
    pub n_importance: usize,
    /// Uniform steps for the camera-ray march.
    pub march_steps: usize,
    /// Silhouette handling: off reproduces the single-ray ablation.
    pub boundary_sampling: bool,
    /// Cap on surface walks per iteration (they are per-pixel and serial).
    pub boundary_budget: usize,
    /// Off freezes intersections to constants (stop-gradient ablation).
    pub differentiable_intersection: bool,
    pub sdf: SdfConfig,
    pub material: MaterialConfig,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Shadow,
            iterations: 5000,
            batch_images: 4,
            pixels_per_image: 256,
            lr_peak: 1e-3,
            warmup_iters: 500,
            lr_min: 5e-5,
            photometric_weight: 1.0,
            eikonal_weight: 0.1,
            eikonal_samples: 512,
            pinning_weight: 0.1,
            coarse_to_fine: true,
            grad_clip: 10.0,
            seed: 0,
            checkpoint_every: 1000,
            n_uniform: 80,
            n_importance: 64,
            march_steps: 128,
            boundary_sampling: true,
            boundary_budget: 128,
            differentiable_intersection: true,
            sdf: SdfConfig::default(),
            material: MaterialConfig::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("iterations", self.iterations),
            ("batch_images", self.batch_images),
            ("pixels_per_image", self.pixels_per_image),
            ("eikonal_samples", self.eikonal_samples),
            ("n_uniform", self.n_uniform),
            ("march_steps", self.march_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_peak > 0.0 && self.lr_min > 0.0 && self.grad_clip > 0.0) {
            return Err(TrainError::Config("rates and clip must be positive".into()));
        }
        if self.warmup_iters >= self.iterations {
            return Err(TrainError::Config(format!(
                "warmup_iters {} must be below iterations {}",
                self.warmup_iters, self.iterations
            )));
        }
        if self.material.feature_dim != self.sdf.feature_dim {
            return Err(TrainError::Config(
                "material.feature_dim must match sdf.feature_dim".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then cosine decay to `lr_min`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr_peak * step as f64 / cfg.warmup_iters as f64;
    }
    let span = (cfg.iterations - cfg.warmup_iters).max(1);
    let progress = (step - cfg.warmup_iters) as f64 / span as f64;
    cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Image-pyramid downsample factor at `step`: 1/8 resolution for the first
/// 10% of iterations, doubling every further 10% until full resolution.
pub fn pyramid_factor(step: usize, cfg: &TrainConfig) -> usize {
    if !cfg.coarse_to_fine {
        return 1;
    }
    let tenth = (cfg.iterations / 10).max(1);
    match step / tenth {
        0 => 8,
        1 => 4,
        2 => 2,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, data: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..data.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PixelSample {
    pub image: usize,
    pub px: usize,
    pub py: usize,
    pub target: Vec<f64>,
    pub light: LightSource,
}

/// One resolution level: the downsampled rasters and a camera with rescaled
/// intrinsics so pixel indexing works unchanged.
pub struct PyramidLevel {
    pub factor: usize,
    pub camera: CameraModel,
    pub rasters: Vec<Raster>,
}

pub fn build_level(dataset: &SceneDataset, factor: usize) -> PyramidLevel {
    let cam = dataset.camera();
    let f = factor as f64;
    let camera = CameraModel {
        fx: cam.fx / f,
        fy: cam.fy / f,
        cx: cam.cx / f,
        cy: cam.cy / f,
        width: cam.width / factor,
        height: cam.height / factor,
        ..cam.clone()
    };
    let rasters = dataset.images.iter().map(|img| img.raster.downsample(factor)).collect();
    PyramidLevel { factor, camera, rasters }
}

/// `batch_images` images uniform without replacement, `pixels_per_image`
/// pixels uniform per image, targets read from the level's rasters.
pub fn sample_batch(
    dataset: &SceneDataset,
    level: &PyramidLevel,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Vec<PixelSample> {
    let n_img = dataset.images.len();
    let take = cfg.batch_images.min(n_img);
    let mut order: Vec<usize> = (0..n_img).collect();
    for i in 0..take {
        let j = rng.gen_range(i..n_img);
        order.swap(i, j);
    }
    let mut out = Vec::with_capacity(take * cfg.pixels_per_image);
    for &image in &order[..take] {
        let raster = &level.rasters[image];
        for _ in 0..cfg.pixels_per_image {
            let px = rng.gen_range(0..raster.width);
            let py = rng.gen_range(0..raster.height);
            out.push(PixelSample {
                image,
                px,
                py,
                target: raster.get(px, py).to_vec(),
                light: dataset.images[image].light.clone(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: TrainConfig,
    pub sdf: SdfNetwork,
    pub material: Option<MaterialNetwork>,
    pub params: FieldParameters,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    config: TrainConfig,
    sdf: SdfNetwork,
    material: Option<MaterialNetwork>,
    segments: Vec<ParamSegment>,
    adam_t: usize,
}

impl Checkpoint {
    /// Fresh geometric-init checkpoint for a config; material net only in
    /// RGB mode.
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut params = FieldParameters::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sdf = SdfNetwork::new(cfg.sdf.clone(), &mut params, &mut rng);
        let material = (cfg.mode == TrainMode::Rgb)
            .then(|| MaterialNetwork::new(cfg.material.clone(), &mut params, &mut rng));
        let adam = AdamState::new(params.len());
        Checkpoint { step: 0, config: cfg.clone(), sdf, material, params, adam }
    }

    /// Binary format: magic, version, u64 JSON header length, JSON header,
    /// then three little-endian f64 blobs (params, Adam m, Adam v). Floats
    /// never pass through text, so saving is bit-exact.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let header = CheckpointHeader {
            step: self.step,
            config: self.config.clone(),
            sdf: self.sdf.clone(),
            material: self.material.clone(),
            segments: self.params.segments.clone(),
            adam_t: self.adam.t,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for blob in [&self.params.data, &self.adam.m, &self.adam.v] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            for v in blob.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bad = |detail: &str| TrainError::Checkpoint {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], TrainError> {
            if *off + n > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(&mut off, hlen)?).map_err(|e| bad(&e.to_string()))?;
        let mut blobs = Vec::new();
        for _ in 0..3 {
            let n = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut off, n * 8)?;
            blobs.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f64>>(),
            );
        }
        let v = blobs.pop().unwrap();
        let m = blobs.pop().unwrap();
        let data = blobs.pop().unwrap();
        let expect: usize = header.segments.iter().map(|s| s.len()).sum();
        if data.len() != expect || m.len() != data.len() || v.len() != data.len() {
            return Err(bad("parameter blob size mismatch"));
        }
        Ok(Checkpoint {
            step: header.step,
            config: header.config,
            sdf: header.sdf,
            material: header.material,
            params: FieldParameters { data, segments: header.segments },
            adam: AdamState { m, v, t: header.adam_t },
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub photometric: f64,
    pub eikonal: f64,
    pub pinning: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// `Some` when the run stopped on a non-finite loss; the checkpoint is
    /// then the last good state.
    pub abort: Option<String>,
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<(), TrainError> {
    let mut out = String::from("step,lr,loss,photometric,eikonal,pinning\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.lr, r.loss, r.photometric, r.eikonal, r.pinning
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

fn dataset_kind(dataset: &SceneDataset) -> Result<ImageKind, TrainError> {
    let first = dataset.images.first().ok_or(TrainError::EmptyDataset)?;
    Ok(first.kind)
}

/// Train from a fresh initialization.
pub fn train(
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    run(Checkpoint::init(cfg), dataset, out_dir)
}

/// Continue a run from a saved checkpoint. With a fixed seed this is
/// bit-identical to the uninterrupted run: every iteration reseeds from
/// `(seed, step)` alone.
pub fn resume(
    start: Checkpoint,
    dataset: &SceneDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    start.config.validate()?;
    run(start, dataset, out_dir)
}

fn run(
    mut ckpt: Checkpoint,
    dataset: &SceneDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let cfg = ckpt.config.clone();
    let kind = dataset_kind(dataset)?;
    let expected = match cfg.mode {
        TrainMode::Shadow => ImageKind::Binary,
        TrainMode::Rgb => ImageKind::Rgb,
    };
    if kind != expected {
        return Err(TrainError::ModeMismatch { mode: cfg.mode, found: kind });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let mut levels: Vec<(usize, PyramidLevel)> = Vec::new();
    let mut log = Vec::new();
    let mut last_good = ckpt.clone();

    while ckpt.step < cfg.iterations {
        let step = ckpt.step;
        let factor = pyramid_factor(step, &cfg).min(dataset.camera().width / 8).max(1);
        if !levels.iter().any(|(f, _)| *f == factor) {
            levels.push((factor, build_level(dataset, factor)));
        }
        let level = &levels.iter().find(|(f, _)| *f == factor).unwrap().1;

        let parts = iteration(&ckpt, dataset, level, step)?;
        if !parts.loss.is_finite() || parts.grad.iter().any(|g| !g.is_finite()) {
            let reason = format!("non-finite loss at step {step}: {}", parts.loss);
            if let Some(dir) = out_dir {
                last_good.save(&dir.join("checkpoint_last_good.bin"))?;
                write_log_csv(&dir.join("train_log.csv"), &log)?;
            }
            return Ok(TrainOutcome { checkpoint: last_good, log, abort: Some(reason) });
        }

        let mut grad = parts.grad;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let scale = cfg.grad_clip / norm;
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
        let lr = lr_at(step, &cfg);
        ckpt.adam.step(&mut ckpt.params.data, &grad, lr);
        ckpt.step += 1;

        log.push(LogRow {
            step,
            lr,
            loss: parts.loss,
            photometric: parts.photometric,
            eikonal: parts.eikonal,
            pinning: parts.pinning,
        });
        last_good = ckpt.clone();

        if let Some(dir) = out_dir {
            if ckpt.step % cfg.checkpoint_every == 0 || ckpt.step == cfg.iterations {
                ckpt.save(&dir.join(format!("checkpoint_{:06}.bin", ckpt.step)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("checkpoint_final.bin"))?;
        write_log_csv(&dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, log, abort: None })
}

struct LossParts {
    loss: f64,
    photometric: f64,
    eikonal: f64,
    pinning: f64,
    grad: Vec<f64>,
}

fn iteration(
    ckpt: &Checkpoint,
    dataset: &SceneDataset,
    level: &PyramidLevel,
    step: usize,
) -> Result<LossParts, TrainError> {
    let cfg = &ckpt.config;
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let samples = sample_batch(dataset, level, &mut rng, cfg);

    let ground = match dataset.manifest.ground_mode {
        GroundMode::AnalyticPlane => Some(dataset.ground().clone()),
        _ => None,
    };
    let tape = Tape::new();
    let scene = BoundScene::new(&tape, ckpt.sdf.bind(&tape, &ckpt.params), ground.clone());
    let mut pairs = scene.sdf.param_vars();
    let bound_mat = ckpt.material.as_ref().map(|m| m.bind(&tape, &ckpt.params));
    if let Some(m) = &bound_mat {
        pairs.extend(m.param_vars());
    }
    let radius = dataset.manifest.scene_radius;
    let sample_cfg = SampleConfig {
        n_uniform: cfg.n_uniform,
        n_importance: cfg.n_importance,
        scene_radius: radius,
    };

    let render = cfg.photometric_weight > 0.0;
    // Center camera rays, one batched march.
    let rays: Vec<Ray> = samples
        .iter()
        .map(|s| level.camera.pixel_ray(s.px as f64 + 0.5, s.py as f64 + 0.5, radius))
        .collect();
    let hits = if render {
        ray_march_batch_steps(&scene, &rays, ground.as_ref(), cfg.march_steps)
    } else {
        Vec::new()
    };

    // Boundary detection: a coarse batched corner-ray pass flags candidate
    // pixels, then each candidate gets a full surface walk (budgeted, since
    // walks are serial per-pixel work).
    let mut infos: Vec<Option<BoundaryInfo>> = vec![None; hits.len()];
    if render && cfg.boundary_sampling {
        let candidates = boundary_candidates(&scene, level, &samples, &hits, radius);
        for idx in candidates.into_iter().take(cfg.boundary_budget) {
            let fp = level.camera.footprint(samples[idx].px, samples[idx].py, radius);
            let info = surface_walk(&scene, &fp, &hits[idx], ground.as_ref());
            if info.is_boundary {
                infos[idx] = Some(info);
            }
        }
    }

    // Split pixels: plain (one ray) vs boundary (a near/far pair).
    let mut plain: Vec<usize> = Vec::new();
    let mut boundary: Vec<usize> = Vec::new();
    for (i, hit) in hits.iter().enumerate() {
        if infos[i].is_some() {
            boundary.push(i);
        } else if hit.valid {
            plain.push(i);
        }
    }
    let used = plain.len() + boundary.len();

    let warnings = TangentWarnings::default();
    let mut photo_terms: Vec<Var> = Vec::new();

    if !plain.is_empty() {
        let idx = &plain;
        let c = pixel_radiance(
            &scene,
            &bound_mat,
            cfg,
            &sample_cfg,
            &warnings,
            &idx.iter().map(|&i| (rays[i].dir, hits[i].x, &samples[i].light)).collect::<Vec<_>>(),
        );
        let t = targets_var(&tape, cfg.mode, idx.iter().map(|&i| &samples[i]));
        photo_terms.push((&c - &t).abs().sum());
    }

    for &i in &boundary {
        let info = infos[i].as_ref().unwrap();
        let pair = [
            (rays[i].dir, info.x_near.x, &samples[i].light),
            (rays[i].dir, info.x_far.x, &samples[i].light),
        ];
        let c = pixel_radiance(&scene, &bound_mat, cfg, &sample_cfg, &warnings, &pair);
        let w = if cfg.differentiable_intersection {
            boundary_w_var(&scene, info)
        } else {
            tape.scalar(info.w)
        };
        let cols = c.shape()[1];
        let c_near = c.gather(&[0]);
        let c_far = c.gather(&[1]);
        let wb = w.reshape(&[1, 1]).broadcast(&[1, cols]);
        let agg = &(&c_near * &wb) + &(&c_far * &(&(&wb * -1.0) + 1.0));
        let t = targets_var(&tape, cfg.mode, std::iter::once(&samples[i]));
        photo_terms.push((&agg - &t).abs().sum());
    }

    let photometric = if used > 0 && cfg.photometric_weight > 0.0 {
        let sum = photo_terms
            .into_iter()
            .reduce(|a, b| &a + &b)
            .unwrap_or_else(|| tape.scalar(0.0));
        &sum * (1.0 / used as f64)
    } else {
        tape.scalar(0.0)
    };

    // Eikonal points: half uniform in the bounding sphere, half surface hits
    // perturbed with Gaussian noise.
    let eik_pts = eikonal_points(&mut rng, cfg.eikonal_samples, radius, &hits);
    let eik = eikonal_loss(
        &scene.sdf,
        &tape.input(ArrayD::from_shape_vec(IxDyn(&[eik_pts.len() / 3, 3]), eik_pts).unwrap()),
    );

    let pinning = if dataset.manifest.ground_mode == GroundMode::Pinned {
        let pts = pinning_points(&mut rng, 128, dataset.ground(), radius);
        let n = pts.len() / 3;
        let x = tape.input(ArrayD::from_shape_vec(IxDyn(&[n, 3]), pts).unwrap());
        scene.sdf.f_var(&x).abs().mean()
    } else {
        tape.scalar(0.0)
    };

    let loss = &(&(&photometric * cfg.photometric_weight) + &(&eik * cfg.eikonal_weight))
        + &(&pinning * cfg.pinning_weight);

    let grad = flat_gradient(&ckpt.params, &pairs, &loss)
        .map_err(|e| TrainError::Config(format!("backward failed: {e}")))?;
    Ok(LossParts {
        loss: loss.scalar_value(),
        photometric: photometric.scalar_value(),
        eikonal: eik.scalar_value(),
        pinning: pinning.scalar_value(),
        grad,
    })
}

/// Radiance for a list of (view dir, frozen hit point, light): `C_in` per
/// pixel in shadow mode (`[P,1]`), full outgoing RGB in rgb mode (`[P,3]`).
fn pixel_radiance(
    scene: &BoundScene,
    bound_mat: &Option<crate::fields::BoundMaterial>,
    cfg: &TrainConfig,
    sample_cfg: &SampleConfig,
    warnings: &TangentWarnings,
    items: &[(Vec3, Vec3, &LightSource)],
) -> Var {
    let n = items.len();
    let dirs: Vec<Vec3> = items.iter().map(|i| i.0).collect();
    let points: Vec<Vec3> = items.iter().map(|i| i.1).collect();
    let x_hat = if cfg.differentiable_intersection {
        differentiable_intersection(scene, &dirs, &points, warnings)
    } else {
        let flat: Vec<f64> = points.iter().flat_map(|p| p.as_array()).collect();
        scene.tape().input(ArrayD::from_shape_vec(IxDyn(&[n, 3]), flat).unwrap())
    };
    let lights: Vec<LightSample> = items
        .iter()
        .map(|(_, x, light)| match cfg.mode {
            TrainMode::Shadow => light_at_binary(light, *x),
            TrainMode::Rgb => light_at(light, *x),
        })
        .map(|r| r.expect("light coincides with a surface point"))
        .collect();
    let s = scene.sdf.s();
    let c_in = incoming_radiance_batch(scene, &x_hat, &lights, &s, sample_cfg);
    match cfg.mode {
        TrainMode::Shadow => c_in.reshape(&[n, 1]),
        TrainMode::Rgb => {
            let mat = bound_mat.as_ref().expect("rgb mode carries a material net");
            let normal = field_normal(scene, &x_hat).expect("non-degenerate normals");
            let (_, feat) = scene.sdf.eval(&x_hat);
            let (rho_d, y) = mat.eval(&x_hat, &normal, &feat);
            let h: Vec<Option<Vec3>> = items
                .iter()
                .zip(&lights)
                .map(|((dir, _, _), l)| half_vector(l.l, *dir))
                .collect();
            let rho_s = specular(&y, &SgBasis::default(), &h, &normal);
            render_outgoing(&rho_d, &rho_s, &c_in, &normal, &lights)
        }
    }
}

fn targets_var<'a>(
    tape: &Tape,
    mode: TrainMode,
    samples: impl Iterator<Item = &'a PixelSample>,
) -> Var {
    let mut flat = Vec::new();
    let mut n = 0;
    for s in samples {
        flat.extend_from_slice(&s.target);
        n += 1;
    }
    let cols = match mode {
        TrainMode::Shadow => 1,
        TrainMode::Rgb => 3,
    };
    tape.input(ArrayD::from_shape_vec(IxDyn(&[n, cols]), flat).unwrap())
}

/// Coarse corner-ray pass: march the four pixel-corner rays with few steps
/// and flag pixels whose corners disagree with the center hit (different
/// validity, or a depth gap well past the walk step).
fn boundary_candidates(
    scene: &BoundScene,
    level: &PyramidLevel,
    samples: &[PixelSample],
    hits: &[Intersection],
    radius: f64,
) -> Vec<usize> {
    let mut corner_rays = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        let fp = level.camera.footprint(s.px, s.py, radius);
        for (u, v) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
            corner_rays.push(fp.ray(u, v));
        }
    }
    let corner_hits = ray_march_batch_steps(scene, &corner_rays, scene.ground.as_ref(), 48);
    let mut out = Vec::new();
    for (i, hit) in hits.iter().enumerate() {
        let corners = &corner_hits[4 * i..4 * i + 4];
        let candidate = corners.iter().any(|c| {
            c.valid != hit.valid
                || c.hit_ground != hit.hit_ground
                || (c.valid && hit.valid && (c.t - hit.t).abs() > 6.0 * WALK_STEP)
        });
        if candidate {
            out.push(i);
        }
    }
    out
}

fn eikonal_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    radius: f64,
    hits: &[Intersection],
) -> Vec<f64> {
    let mut pts = Vec::with_capacity(count * 3);
    let normal = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let surface: Vec<Vec3> = hits.iter().filter(|h| h.valid).map(|h| h.x).collect();
    for i in 0..count {
        let p = if i % 2 == 0 || surface.is_empty() {
            // Uniform in the bounding ball.
            let r = radius * rng.gen_range(0.0f64..1.0).cbrt();
            let z = rng.gen_range(-1.0f64..1.0);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            Vec3::new(s * phi.cos(), s * phi.sin(), z) * r
        } else {
            let x = surface[rng.gen_range(0..surface.len())];
            x + Vec3::new(normal(rng), normal(rng), normal(rng)) * 0.05
        };
        pts.extend_from_slice(&p.as_array());
    }
    pts
}

/// Uniform samples on the calibrated ground plane inside the bounding
/// sphere, for the Pinned ground mode.
fn pinning_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    ground: &GroundPlane,
    radius: f64,
) -> Vec<f64> {
    let n = ground.normal;
    let u = n.any_orthonormal();
    let v = n.cross(u);
    let center = n * ground.offset;
    let disk_r = (radius * radius - ground.offset * ground.offset).max(0.0).sqrt();
    let mut pts = Vec::with_capacity(count * 3);
    for _ in 0..count {
        let r = disk_r * rng.gen_range(0.0f64..1.0).sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = center + u * (r * phi.cos()) + v * (r * phi.sin());
        pts.extend_from_slice(&p.as_array());
    }
    pts
}

/// End-to-end finite-difference audit of the full training objective on a
/// tiny frozen batch: two interior camera hits plus one silhouette pixel
/// rendered as a near/far pair, a point light, the specular material,
/// shadow-ray transmittance and the eikonal term; both the radiance L1 and
/// the binary-visibility L1 enter the loss. Returns the worst relative error
/// between the taped gradient and a central-difference probe, over every
/// SDF and material parameter. Drives the `grad-check` command.
pub fn gradient_check(seed: u64) -> f64 {
    use crate::diffengine::central_difference_grad;
    use crate::raycast::PixelFootprint;
    use crate::shading::{rgb_loss, total_loss};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = FieldParameters::new();
    let sdf_cfg = SdfConfig {
        depth: 3,
        width: 16,
        freqs: 2,
        feature_dim: 8,
        init_radius: 0.5,
        init_s: 10.0,
    };
    let net = SdfNetwork::new(sdf_cfg, &mut params, &mut rng);
    let mat_cfg = MaterialConfig { depth: 2, width: 8, feature_dim: 8 };
    let mat = MaterialNetwork::new(mat_cfg, &mut params, &mut rng);

    let basis = SgBasis::default();
    let sample_cfg = SampleConfig { n_uniform: 16, n_importance: 0, scene_radius: 1.6 };
    let light_src = LightSource::Point { position: Vec3::new(0.4, -0.3, 1.2), intensity: 1.5 };
    let ground = GroundPlane::new(Vec3::new(0.0, 0.0, 1.0), -0.4);

    // Frozen geometry, found once with the base parameters: the boundary
    // walk and the marched hit points are constants of the check while the
    // surrogate intersection and area fraction stay differentiable.
    let mut dirs = Vec::new();
    let mut hits = Vec::new();
    // An oblique pixel straddling the silhouette of the blobby initial
    // surface against the ground plane behind it.
    let fp = {
        let origin = Vec3::new(0.0, -1.7, 1.0);
        let dir = (Vec3::new(0.76, 0.0, 0.0) - origin).normalized();
        let right = dir.cross(Vec3::new(0.0, 0.0, 1.0)).normalized();
        let down = dir.cross(right).normalized();
        PixelFootprint { origin, dir, du: right * 0.04, dv: down * 0.04, scene_radius: 1.6 }
    };
    let info = {
        let tape = Tape::new();
        let scene = BoundScene::new(&tape, net.bind(&tape, &params), Some(ground.clone()));
        for off in [-0.1, 0.15] {
            let ray = Ray::new(Vec3::new(off, 0.05, 1.4), Vec3::new(0.0, 0.0, -1.0), 0.0, 3.0);
            let hit = crate::raycast::ray_march(&scene, &ray, Some(&ground));
            assert!(hit.valid, "interior probe ray missed the initial surface");
            dirs.push(ray.dir);
            hits.push(hit.x);
        }
        let center = crate::raycast::ray_march(&scene, &fp.ray(0.0, 0.0), Some(&ground));
        let info = surface_walk(&scene, &fp, &center, Some(&ground));
        assert!(info.is_boundary, "silhouette probe pixel is not a boundary pixel");
        info
    };
    let b_dir = fp.ray(0.0, 0.0).dir;
    // The training-time area fraction is value-pinned to the detected w (only
    // its gradient flows), which a finite-difference probe reads as zero.
    // The check uses the same Newton-displacement expression with the base
    // offset frozen instead, so value and gradient both move with the
    // parameters; at the base point its gradient equals the training one.
    let w_offset = |scene: &BoundScene| -> Var {
        let tape = scene.tape();
        let x = tape.input(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), info.boundary_point.as_array().to_vec())
                .unwrap(),
        );
        let f = scene.f_var(&x).reshape(&[1, 1]);
        let g = crate::fields::field_gradient(scene, &x);
        let norm2 = g.square().sum_to(&[1, 1]).clamp_min(1e-12);
        let dx = &(&g * &f).neg() / &norm2;
        let m = tape.input(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), info.offset_dir.as_array().to_vec()).unwrap(),
        );
        (&dx * &m).sum()
    };
    let offset0 = {
        let tape = Tape::new();
        let scene = BoundScene::new(&tape, net.bind(&tape, &params), Some(ground.clone()));
        w_offset(&scene).scalar_value()
    };
    let targets = [[0.3, 0.2, 0.1], [0.6, 0.6, 0.6]];
    let boundary_target = [0.25, 0.25, 0.25];
    let shadow_targets = [0.9, 0.4];
    let eik_pts: Vec<f64> =
        [[0.2, 0.1, 0.3], [-0.3, 0.4, -0.1], [0.0, -0.5, 0.2]].concat();

    let objective = |tape: &Tape, p: &FieldParameters| -> (Var, Vec<(usize, Var)>) {
        let scene = BoundScene::new(tape, net.bind(tape, p), Some(ground.clone()));
        let bound_mat = mat.bind(tape, p);
        let mut pairs = scene.sdf.param_vars();
        pairs.extend(bound_mat.param_vars());
        let warnings = TangentWarnings::default();
        let s = scene.sdf.s();

        let shade = |dirs: &[Vec3], points: &[Vec3]| {
            let x_hat = differentiable_intersection(&scene, dirs, points, &warnings);
            let n = field_normal(&scene, &x_hat).unwrap();
            let (_, feat) = scene.sdf.eval(&x_hat);
            let (rho_d, y) = bound_mat.eval(&x_hat, &n, &feat);
            let lights: Vec<LightSample> =
                points.iter().map(|&x| light_at(&light_src, x).unwrap()).collect();
            let h: Vec<Option<Vec3>> =
                dirs.iter().zip(&lights).map(|(&v, l)| half_vector(l.l, v)).collect();
            let rho_s = specular(&y, &basis, &h, &n);
            let c_in = incoming_radiance_batch(&scene, &x_hat, &lights, &s, &sample_cfg);
            (render_outgoing(&rho_d, &rho_s, &c_in, &n, &lights), c_in)
        };

        let (c, c_in) = shade(&dirs, &hits);
        let photo_rgb = rgb_loss(&c, &targets);

        // Binary-visibility variant on the same pixels.
        let t_sh = tape.input(ArrayD::from_shape_vec(IxDyn(&[2]), shadow_targets.to_vec()).unwrap());
        let photo_shadow = &(&c_in - &t_sh).abs().sum() * 0.5;

        // Silhouette pixel: near/far pair blended by the area fraction.
        let (cb, _) = shade(&[b_dir, b_dir], &[info.x_near.x, info.x_far.x]);
        let w = &(&w_offset(&scene) * info.chord) + (info.w - offset0 * info.chord);
        let wb = w.reshape(&[1, 1]).broadcast(&[1, 3]);
        let agg = &(&cb.gather(&[0]) * &wb) + &(&cb.gather(&[1]) * &(&(&wb * -1.0) + 1.0));
        let tb = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 3]), boundary_target.to_vec()).unwrap());
        let photo_boundary = (&agg - &tb).abs().sum();

        let photo = &(&photo_rgb + &photo_shadow) + &photo_boundary;
        let eik_var = tape.input(ArrayD::from_shape_vec(IxDyn(&[3, 3]), eik_pts.clone()).unwrap());
        let eik = eikonal_loss(&scene.sdf, &eik_var);
        (total_loss(&photo, &eik, None), pairs)
    };

    let value = |data: &[f64]| {
        let p = FieldParameters { data: data.to_vec(), segments: params.segments.clone() };
        let tape = Tape::new();
        objective(&tape, &p).0.scalar_value()
    };
    let numeric = central_difference_grad(&value, &params.data, 3e-5);
    let tape = Tape::new();
    let (loss, pairs) = objective(&tape, &params);
    let analytic = flat_gradient(&params, &pairs, &loss).unwrap();

    // Relative error with an absolute floor tied to the gradient's overall
    // scale: entries thousands of times smaller than the dominant ones sit
    // at the central-difference truncation level, where a pure ratio only
    // measures probe noise.
    let amax = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = 1e-3 * amax;
    let mut worst = 0.0f64;
    for (a, d) in analytic.iter().zip(&numeric) {
        worst = worst.max((a - d).abs() / (a.abs() + d.abs()).max(floor));
    }
    worst
}

#[cfg(test)]
mod tests;
