//! Synthetic scenes: pinhole camera, brute-force oracle renderer over
//! analytic SDFs, and dataset generation / loading on disk.
//!
//! A dataset is a directory `out/{manifest.json, images/*}` holding one
//! camera, one ground-plane calibration and one raster per light. Binary
//! shadow masks go to 8-bit PNG (lossless for {0,1} data), linear RGB to PFM.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{AnalyticSdf, GroundMode, GroundPlane};
use crate::math::{Ray, Vec3};
use crate::raycast::PixelFootprint;
use crate::shadowrender::{light_at, LightSource};

pub const MANIFEST_VERSION: u32 = 1;
pub const ORACLE_MARCH_STEPS: usize = 4096;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("invalid {field}: {detail}")]
    Validation { field: String, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

/// Pinhole camera. `rotation` maps world to camera coordinates (rows are the
/// camera axes: x right, y down, z forward); `x_cam = R x_world + t`. Pixel
/// `(px, py)` has its center at `(px + 0.5, py + 0.5)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl CameraModel {
    /// Camera at `position` looking at `target`, vertical field of view in
    /// degrees, principal point at the image center.
    pub fn look_at(
        width: usize,
        height: usize,
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y_deg: f64,
    ) -> Self {
        let forward = (target - position).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        let rotation = [right.as_array(), down.as_array(), forward.as_array()];
        let t = -Vec3::new(right.dot(position), down.dot(position), forward.dot(position));
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        CameraModel {
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            rotation,
            translation: t,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::Validation {
                field: "camera.fx/fy".into(),
                detail: format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::Validation {
                field: "camera.resolution".into(),
                detail: "zero-sized image".into(),
            });
        }
        let r = self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if worst >= 1e-6 {
            return Err(SceneError::Validation {
                field: "camera.rotation".into(),
                detail: format!("not orthonormal, max |R'R - I| = {worst:.3e}"),
            });
        }
        Ok(())
    }

    fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.rotation[i])
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        let t = self.translation;
        -(self.row(0) * t.x + self.row(1) * t.y + self.row(2) * t.z)
    }

    fn cam_to_world(&self, d: Vec3) -> Vec3 {
        self.row(0) * d.x + self.row(1) * d.y + self.row(2) * d.z
    }

    /// World ray through image point `(px, py)` in pixel units, clipped to
    /// the scene bounding sphere.
    pub fn pixel_ray(&self, px: f64, py: f64, scene_radius: f64) -> Ray {
        let d = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let dir = self.cam_to_world(d).normalized();
        let probe = Ray::new(self.position(), dir, 0.0, f64::INFINITY);
        let far = probe
            .sphere_exit(Vec3::ZERO, scene_radius)
            .unwrap_or(2.0 * scene_radius + self.position().norm());
        Ray::new(self.position(), dir, 0.0, far)
    }

    /// Footprint of pixel `(px, py)`: sub-pixel coordinates `u, v` in
    /// `[-1, 1]` span the pixel.
    pub fn footprint(&self, px: usize, py: usize, scene_radius: f64) -> PixelFootprint {
        let c = Vec3::new(
            (px as f64 + 0.5 - self.cx) / self.fx,
            (py as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        PixelFootprint {
            origin: self.position(),
            dir: self.cam_to_world(c),
            du: self.cam_to_world(Vec3::new(0.5 / self.fx, 0.0, 0.0)),
            dv: self.cam_to_world(Vec3::new(0.0, 0.5 / self.fy, 0.0)),
            scene_radius,
        }
    }
}

// ---------------------------------------------------------------------------
// Rasters
// ---------------------------------------------------------------------------

/// Row-major float raster, 1 (mask) or 3 (linear RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn get(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set(&mut self, x: usize, y: usize, value: &[f64]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn from_rows(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Raster { width, height, channels, data }
    }

    /// Box-filter downsample by an integer factor (area average). Trailing
    /// rows/columns that do not fill a full box are dropped.
    pub fn downsample(&self, factor: usize) -> Raster {
        assert!(factor >= 1);
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Raster::new(w, h, self.channels);
        let inv = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = vec![0.0; self.channels];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for (a, v) in acc.iter_mut().zip(p) {
                            *a += v;
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a *= inv;
                }
                out.set(x, y, &acc);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Scene description and oracle renderer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Binary,
    Rgb,
}

/// Analytic ground-truth scene: object geometry, ground calibration, a
/// constant Lambertian albedo and the viewing camera.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub object: AnalyticSdf,
    pub ground: GroundPlane,
    pub ground_mode: GroundMode,
    pub albedo: Vec3,
    pub camera: CameraModel,
    pub scene_radius: f64,
}

impl SceneSpec {
    /// Full geometry seen by rays: the object, plus the ground plane when it
    /// is not already part of the object SDF.
    pub fn geometry(&self) -> AnalyticSdf {
        match self.ground_mode {
            GroundMode::AnalyticPlane => AnalyticSdf::Union(vec![
                self.object.clone(),
                AnalyticSdf::plane(self.ground.normal, self.ground.offset),
            ]),
            _ => self.object.clone(),
        }
    }

    /// Built-in scenes, all bounded by the unit sphere. `None` for unknown
    /// names.
    pub fn builtin(name: &str, width: usize, height: usize) -> Option<SceneSpec> {
        let ground = GroundPlane::new(Vec3::new(0.0, 0.0, 1.0), -0.4);
        let camera = CameraModel::look_at(
            width,
            height,
            Vec3::new(0.0, -1.7, 1.0),
            Vec3::new(0.0, 0.0, -0.2),
            Vec3::new(0.0, 0.0, 1.0),
            50.0,
        );
        let (object, ground_mode) = match name {
            "sphere-plane" => (
                AnalyticSdf::sphere(Vec3::new(0.0, 0.0, -0.1), 0.3),
                GroundMode::AnalyticPlane,
            ),
            "two-spheres" => (
                AnalyticSdf::Union(vec![
                    AnalyticSdf::sphere(Vec3::new(-0.3, 0.0, -0.15), 0.25),
                    AnalyticSdf::sphere(Vec3::new(0.3, 0.1, -0.15), 0.25),
                ]),
                GroundMode::AnalyticPlane,
            ),
            "box-plane" => (
                AnalyticSdf::Box {
                    center: Vec3::new(0.0, 0.0, -0.2),
                    half_extents: Vec3::new(0.25, 0.25, 0.2),
                },
                GroundMode::AnalyticPlane,
            ),
            "bumpy-ground" => (
                AnalyticSdf::Union(vec![
                    AnalyticSdf::sphere(Vec3::new(0.0, 0.0, -0.05), 0.3),
                    AnalyticSdf::BumpyPlane {
                        normal: Vec3::new(0.0, 0.0, 1.0),
                        offset: -0.4,
                        amplitude: 0.05,
                        frequency: 8.0,
                    },
                ]),
                GroundMode::Pinned,
            ),
            _ => return None,
        };
        Some(SceneSpec {
            name: name.to_string(),
            object,
            ground,
            ground_mode,
            albedo: Vec3::splat(0.7),
            camera,
            scene_radius: 1.0,
        })
    }
}

/// Exact light visibility at a surface point: the segment (or ray, for
/// directional lights) toward the light is intersected against the full
/// analytic geometry, offset off the surface by `eps`.
fn oracle_visible(geom: &AnalyticSdf, x: Vec3, n: Vec3, light: &LightSource) -> bool {
    let eps = 1e-4;
    let from = x + n * eps;
    let to = match light {
        LightSource::Directional { direction, .. } => from + direction.normalized() * 4.0,
        LightSource::Point { position, .. } => *position,
    };
    !geom.segment_occluded(from, to, eps)
}

/// Brute-force reference render: per pixel, first intersection by dense
/// marching with bisection refinement, then exact shadow-segment visibility.
/// Binary rasters hold 1 where the hit point sees the light (misses render
/// as 1: open sky); RGB rasters hold `albedo * L * max(l.n, 0) * vis` in
/// linear color (misses render black).
pub fn oracle_render(scene: &SceneSpec, light: &LightSource, kind: ImageKind) -> Raster {
    let geom = scene.geometry();
    let cam = &scene.camera;
    let channels = match kind {
        ImageKind::Binary => 1,
        ImageKind::Rgb => 3,
    };
    let rows: Vec<Vec<f64>> = (0..cam.height)
        .into_par_iter()
        .map(|py| {
            let mut row = vec![0.0; cam.width * channels];
            for px in 0..cam.width {
                let ray = cam.pixel_ray(px as f64 + 0.5, py as f64 + 0.5, scene.scene_radius);
                let hit = geom.march_intersect(&ray, ORACLE_MARCH_STEPS);
                let out = &mut row[px * channels..(px + 1) * channels];
                match (hit, kind) {
                    (None, ImageKind::Binary) => out[0] = 1.0,
                    (None, ImageKind::Rgb) => {}
                    (Some(t), kind) => {
                        let x = ray.at(t);
                        let n = geom.gradient(x).normalized();
                        let Ok(sample) = light_at(light, x) else { continue };
                        let vis = oracle_visible(&geom, x, n, light);
                        match kind {
                            ImageKind::Binary => out[0] = if vis { 1.0 } else { 0.0 },
                            ImageKind::Rgb => {
                                let shade = sample.intensity
                                    * sample.l.dot(n).max(0.0)
                                    * if vis { 1.0 } else { 0.0 };
                                let c = scene.albedo * shade;
                                out.copy_from_slice(&c.as_array());
                            }
                        }
                    }
                }
            }
            row
        })
        .collect();
    Raster::from_rows(cam.width, cam.height, channels, rows.concat())
}

// ---------------------------------------------------------------------------
// Dataset generation and I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LightFamily {
    Directional,
    /// Point lights on a hemisphere shell; intensity is set to `radius^2` so
    /// the inverse-square falloff yields L = 1 at the scene center.
    Point { radius: f64 },
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub n_lights: usize,
    pub kind: ImageKind,
    pub light: LightFamily,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestImage {
    pub file: String,
    pub kind: ImageKind,
    pub light: LightSource,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub scene: String,
    pub scene_radius: f64,
    pub albedo: Vec3,
    pub camera: CameraModel,
    pub ground: GroundPlane,
    pub ground_mode: GroundMode,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone)]
pub struct SceneImage {
    pub raster: Raster,
    pub light: LightSource,
    pub kind: ImageKind,
    pub file: String,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub manifest: Manifest,
    pub images: Vec<SceneImage>,
}

impl SceneDataset {
    pub fn camera(&self) -> &CameraModel {
        &self.manifest.camera
    }

    pub fn ground(&self) -> &GroundPlane {
        &self.manifest.ground
    }
}

/// Uniform-area direction on the upper hemisphere, elevation floored at
/// z = 0.05 to keep lights off the horizon.
fn hemisphere_dir(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.gen_range(0.05..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Render `n_lights` oracle images of `scene` and write the dataset to
/// `out_dir` (`manifest.json` + `images/`). Deterministic in `seed`.
pub fn generate_dataset(
    scene: &SceneSpec,
    opts: &GenerateOptions,
    out_dir: &Path,
) -> Result<SceneDataset, SceneError> {
    if opts.n_lights == 0 {
        return Err(SceneError::Validation {
            field: "n_lights".into(),
            detail: "need at least one light".into(),
        });
    }
    scene.camera.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let lights: Vec<LightSource> = (0..opts.n_lights)
        .map(|_| {
            let dir = hemisphere_dir(&mut rng);
            match opts.light {
                LightFamily::Directional => {
                    LightSource::Directional { direction: dir, intensity: 1.0 }
                }
                LightFamily::Point { radius } => LightSource::Point {
                    position: dir * radius,
                    intensity: radius * radius,
                },
            }
        })
        .collect();

    let mut images = Vec::new();
    let mut entries = Vec::new();
    for (i, light) in lights.iter().enumerate() {
        let raster = oracle_render(scene, light, opts.kind);
        let file = match opts.kind {
            ImageKind::Binary => format!("images/img_{i:03}.png"),
            ImageKind::Rgb => format!("images/img_{i:03}.pfm"),
        };
        let path = out_dir.join(&file);
        match opts.kind {
            ImageKind::Binary => write_mask_png(&path, &raster)?,
            ImageKind::Rgb => write_pfm(&path, &raster)?,
        }
        entries.push(ManifestImage { file: file.clone(), kind: opts.kind, light: light.clone() });
        images.push(SceneImage { raster, light: light.clone(), kind: opts.kind, file });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scene: scene.name.clone(),
        scene_radius: scene.scene_radius,
        albedo: scene.albedo,
        camera: scene.camera.clone(),
        ground: scene.ground.clone(),
        ground_mode: scene.ground_mode,
        images: entries,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(SceneDataset { manifest, images })
}

/// Load and validate a dataset directory written by `generate_dataset`.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset, SceneError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| SceneError::Manifest { path: path.clone(), detail: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SceneError::Manifest {
            path,
            detail: format!(
                "unsupported version {} (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        });
    }
    manifest.camera.validate()?;
    let mut images = Vec::new();
    for (i, entry) in manifest.images.iter().enumerate() {
        if let LightSource::Directional { direction, .. } = &entry.light {
            if (direction.norm() - 1.0).abs() > 1e-6 {
                return Err(SceneError::Validation {
                    field: format!("images[{i}].light.direction"),
                    detail: format!("not unit length: |l| = {}", direction.norm()),
                });
            }
        }
        let file = dir.join(&entry.file);
        let raster = match entry.kind {
            ImageKind::Binary => read_mask_png(&file)?,
            ImageKind::Rgb => read_pfm(&file)?,
        };
        if raster.width != manifest.camera.width || raster.height != manifest.camera.height {
            return Err(SceneError::Validation {
                field: format!("images[{i}]"),
                detail: format!(
                    "resolution {}x{} does not match camera {}x{}",
                    raster.width, raster.height, manifest.camera.width, manifest.camera.height
                ),
            });
        }
        if entry.kind == ImageKind::Binary {
            if let Some(bad) = raster.data().iter().find(|v| {
                let v = **v;
                (v - 0.0).abs() > 1e-3 && (v - 1.0).abs() > 1e-3
            }) {
                return Err(SceneError::Validation {
                    field: format!("images[{i}]"),
                    detail: format!("binary mask contains non-binary value {bad}"),
                });
            }
        }
        images.push(SceneImage {
            raster,
            light: entry.light.clone(),
            kind: entry.kind,
            file: entry.file.clone(),
        });
    }
    Ok(SceneDataset { manifest, images })
}

// ---------------------------------------------------------------------------
// Raster file formats
// ---------------------------------------------------------------------------

pub fn write_mask_png(path: &Path, raster: &Raster) -> Result<(), SceneError> {
    assert_eq!(raster.channels, 1);
    let pixels: Vec<u8> = raster
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(raster.width as u32, raster.height as u32, pixels)
        .expect("raster dimensions match buffer");
    img.save(path)
        .map_err(|e| io_err(path, std::io::Error::other(e)))
}

pub fn read_mask_png(path: &Path) -> Result<Raster, SceneError> {
    let img = image::open(path)
        .map_err(|e| io_err(path, std::io::Error::other(e)))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Raster::from_rows(w, h, 1, data))
}

/// PFM, little-endian color variant: `PF\n{w} {h}\n-1.0\n` then f32 RGB rows
/// bottom-to-top. Preserves linear radiometry for RGB supervision.
pub fn write_pfm(path: &Path, raster: &Raster) -> Result<(), SceneError> {
    assert_eq!(raster.channels, 3);
    let mut out = Vec::new();
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", raster.width, raster.height).as_bytes());
    for y in (0..raster.height).rev() {
        for x in 0..raster.width {
            for &v in raster.get(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Raster, SceneError> {
    let invalid = |detail: &str| SceneError::Validation {
        field: format!("pfm {}", path.display()),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    // Header is three newline-terminated ASCII lines.
    let mut lines = Vec::new();
    let mut start = 0;
    for _ in 0..3 {
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| invalid("truncated header"))?
            + start;
        lines.push(
            std::str::from_utf8(&bytes[start..end]).map_err(|_| invalid("non-ascii header"))?,
        );
        start = end + 1;
    }
    if lines[0] != "PF" {
        return Err(invalid("expected color PFM magic 'PF'"));
    }
    let mut dims = lines[1].split_whitespace();
    let w: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| invalid("bad width"))?;
    let h: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| invalid("bad height"))?;
    let scale: f64 = lines[2].trim().parse().map_err(|_| invalid("bad scale"))?;
    if scale >= 0.0 {
        return Err(invalid("big-endian PFM not supported"));
    }
    let need = w * h * 3 * 4;
    if bytes.len() - start != need {
        return Err(invalid("payload size mismatch"));
    }
    let mut raster = Raster::new(w, h, 3);
    let mut off = start;
    for y in (0..h).rev() {
        for x in 0..w {
            let mut px = [0.0; 3];
            for p in px.iter_mut() {
                *p = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
                off += 4;
            }
            raster.set(x, y, &px);
        }
    }
    Ok(raster)
}

#[cfg(test)]
mod tests;
