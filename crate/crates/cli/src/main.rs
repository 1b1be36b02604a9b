//! `umbra`: dataset generation, training, evaluation, mesh export and
//! relighting for shadow-supervised neural SDF reconstruction.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 runtime failure
//! (training abort, I/O during a run).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use umbra_core::diffengine::Tape;
use umbra_core::evaluate::{
    depth_l1, extract_mesh, normal_mae, relight, render_depth_normal, RelightShading,
};
use umbra_core::fields::{AnalyticField, BoundScene, GroundMode};
use umbra_core::scenes::{
    generate_dataset, load_dataset, write_pfm, GenerateOptions, ImageKind, LightFamily,
    SceneDataset, SceneSpec,
};
use umbra_core::shadowrender::{LightSource, SampleConfig};
use umbra_core::trainer::{
    gradient_check, resume, train, write_log_csv, Checkpoint, TrainConfig, TrainMode,
};
use umbra_core::Vec3;

#[derive(Parser)]
#[command(name = "umbra", version, about = "Neural SDF reconstruction from shadows")]
struct Cli {
    /// Single-thread strict mode with fixed seeds; two runs with the same
    /// flags produce byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with the brute-force oracle
    GenData(GenDataArgs),
    /// Optimize an SDF (and material) against a dataset
    Train(TrainArgs),
    /// Depth and normal metrics of a checkpoint against its scene
    Eval(EvalArgs),
    /// Extract the zero level set of a checkpoint as an OBJ mesh
    Mesh(MeshArgs),
    /// Re-render a checkpoint under a novel light
    Relight(RelightArgs),
    /// Finite-difference audit of the full objective gradient
    GradCheck(GradCheckArgs),
}

/// A user or validation error (exit 1) as opposed to a runtime failure
/// (exit 2).
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
    fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, everything else is a
            // usage error.
            use clap::error::ErrorKind::*;
            let code = match e.kind() {
                DisplayHelp | DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.deterministic {
        // Strict mode: one rayon worker so reductions are order-stable.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a, cli.deterministic),
        Command::Eval(a) => cmd_eval(a),
        Command::Mesh(a) => cmd_mesh(a),
        Command::Relight(a) => cmd_relight(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

fn echo_config<T: Serialize>(label: &str, cfg: &T) {
    println!(
        "effective {label} config: {}",
        serde_json::to_string(cfg).expect("config serializes")
    );
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with the same fields as the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scene: sphere-plane, two-spheres, box-plane, bumpy-ground
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    lights: Option<usize>,
    /// Image kind: binary or rgb
    #[arg(long = "type")]
    kind: Option<String>,
    /// Light family: directional or point
    #[arg(long)]
    light: Option<String>,
    /// Shell radius for point lights
    #[arg(long)]
    light_radius: Option<f64>,
    /// Square image resolution in pixels
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    scene: String,
    lights: usize,
    kind: String,
    light: String,
    light_radius: f64,
    res: usize,
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            scene: "sphere-plane".into(),
            lights: 16,
            kind: "binary".into(),
            light: "directional".into(),
            light_radius: 3.0,
            res: 64,
            seed: 7,
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg: GenDataConfig =
        a.config.as_deref().map(read_config).transpose()?.unwrap_or_default();
    if let Some(v) = a.scene {
        cfg.scene = v;
    }
    if let Some(v) = a.lights {
        cfg.lights = v;
    }
    if let Some(v) = a.kind {
        cfg.kind = v;
    }
    if let Some(v) = a.light {
        cfg.light = v;
    }
    if let Some(v) = a.light_radius {
        cfg.light_radius = v;
    }
    if let Some(v) = a.res {
        cfg.res = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    echo_config("gen-data", &cfg);

    let scene = SceneSpec::builtin(&cfg.scene, cfg.res, cfg.res)
        .ok_or_else(|| CliError::usage(format!("unknown scene `{}`", cfg.scene)))?;
    let kind = match cfg.kind.as_str() {
        "binary" => ImageKind::Binary,
        "rgb" => ImageKind::Rgb,
        other => return Err(CliError::usage(format!("unknown image type `{other}`"))),
    };
    let light = match cfg.light.as_str() {
        "directional" => LightFamily::Directional,
        "point" => LightFamily::Point { radius: cfg.light_radius },
        other => return Err(CliError::usage(format!("unknown light family `{other}`"))),
    };
    let opts =
        GenerateOptions { n_lights: cfg.lights, kind, light, seed: cfg.seed };
    let dataset = generate_dataset(&scene, &opts, &a.out).map_err(CliError::runtime)?;
    println!(
        "wrote {} {} images at {}x{} to {}",
        dataset.images.len(),
        cfg.kind,
        cfg.res,
        cfg.res,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from gen-data
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output directory
    #[arg(long)]
    out: PathBuf,
    /// JSON file with trainer config fields; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
    /// shadow or rgb
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_images: Option<usize>,
    #[arg(long)]
    pixels_per_image: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable the coarse-to-fine image pyramid
    #[arg(long)]
    no_coarse_to_fine: bool,
    /// Single-ray silhouette ablation
    #[arg(long)]
    no_boundary_sampling: bool,
    /// Stop-gradient intersection ablation
    #[arg(long)]
    no_differentiable_intersection: bool,
}

fn apply_train_overrides(
    cfg: &mut TrainConfig,
    a: &TrainArgs,
    deterministic: bool,
) -> Result<(), CliError> {
    if let Some(mode) = &a.mode {
        cfg.mode = match mode.as_str() {
            "shadow" => TrainMode::Shadow,
            "rgb" => TrainMode::Rgb,
            other => return Err(CliError::usage(format!("unknown mode `{other}`"))),
        };
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup_iters = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr_peak = v;
    }
    if let Some(v) = a.batch_images {
        cfg.batch_images = v;
    }
    if let Some(v) = a.pixels_per_image {
        cfg.pixels_per_image = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if a.no_coarse_to_fine {
        cfg.coarse_to_fine = false;
    }
    if a.no_boundary_sampling {
        cfg.boundary_sampling = false;
    }
    if a.no_differentiable_intersection {
        cfg.differentiable_intersection = false;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, deterministic: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&a.data).map_err(|e| CliError::usage(e.to_string()))?;

    let outcome = if let Some(ckpt_path) = &a.resume {
        let ckpt = Checkpoint::load(ckpt_path)
            .map_err(|e| CliError::usage(format!("resume: {e}")))?;
        echo_config("train", &ckpt.config);
        println!("resuming from step {}", ckpt.step);
        resume(ckpt, &dataset, Some(&a.out))
    } else {
        let mut cfg: TrainConfig =
            a.config.as_deref().map(read_config).transpose()?.unwrap_or_default();
        apply_train_overrides(&mut cfg, &a, deterministic)?;
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        echo_config("train", &cfg);
        train(&dataset, &cfg, Some(&a.out))
    }
    .map_err(|e| match e {
        umbra_core::trainer::TrainError::Config(_)
        | umbra_core::trainer::TrainError::EmptyDataset
        | umbra_core::trainer::TrainError::ModeMismatch { .. } => {
            CliError::usage(e.to_string())
        }
        other => CliError::runtime(other),
    })?;

    write_log_csv(&a.out.join("train_log.csv"), &outcome.log).map_err(CliError::runtime)?;
    for row in outcome.log.iter().rev().take(1) {
        println!(
            "step {} loss {:.6} photometric {:.6} eikonal {:.6}",
            row.step, row.loss, row.photometric, row.eikonal
        );
    }
    if let Some(reason) = outcome.abort {
        return Err(CliError::runtime(format!(
            "training aborted: {reason}; last good state saved to {}",
            a.out.join("checkpoint_last_good.bin").display()
        )));
    }
    println!("final checkpoint: {}", a.out.join("checkpoint_final.bin").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint plumbing shared by eval / mesh / relight
// ---------------------------------------------------------------------------

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let file = if path.is_dir() { path.join("checkpoint_final.bin") } else { path.to_path_buf() };
    Checkpoint::load(&file).map_err(|e| CliError::usage(e.to_string()))
}

fn scene_ground(dataset: &SceneDataset) -> Option<umbra_core::fields::GroundPlane> {
    match dataset.manifest.ground_mode {
        GroundMode::AnalyticPlane => Some(dataset.ground().clone()),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a training output directory
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory the checkpoint was trained on
    #[arg(long)]
    data: PathBuf,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let dataset = load_dataset(&a.data).map_err(|e| CliError::usage(e.to_string()))?;
    let manifest = &dataset.manifest;
    let spec = SceneSpec::builtin(&manifest.scene, manifest.camera.width, manifest.camera.height)
        .ok_or_else(|| {
            CliError::usage(format!("scene `{}` has no analytic ground truth", manifest.scene))
        })?;
    let camera = dataset.camera();
    let ground = scene_ground(&dataset);
    let radius = manifest.scene_radius;

    let tape = Tape::new();
    let scene = BoundScene::new(&tape, ckpt.sdf.bind(&tape, &ckpt.params), ground.clone());
    let (pred_depth, pred_normals) =
        render_depth_normal(&scene, camera, ground.as_ref(), radius);

    let gt_tape = Tape::new();
    let gt_field = AnalyticField::new(&gt_tape, spec.object.clone());
    let (gt_depth, gt_normals) =
        render_depth_normal(&gt_field, camera, Some(&spec.ground), radius);

    let depth = depth_l1(&pred_depth, &gt_depth).map_err(CliError::runtime)?;
    let mask: Vec<bool> =
        pred_depth.mask.iter().zip(&gt_depth.mask).map(|(a, b)| *a && *b).collect();
    let mae = normal_mae(&pred_normals, &gt_normals, &mask).map_err(CliError::runtime)?;

    println!("metric,value");
    println!("depth_l1_aligned,{}", depth.aligned);
    println!("depth_l1_unaligned,{}", depth.unaligned);
    println!("normal_mae_deg,{mae}");
    println!(
        "foreground_pixels,{}",
        mask.iter().filter(|m| **m).count()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mesh
// ---------------------------------------------------------------------------

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Grid resolution per axis over the bounding cube
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Output OBJ path
    #[arg(long)]
    out: PathBuf,
}

fn cmd_mesh(a: MeshArgs) -> Result<(), CliError> {
    if a.res < 16 {
        return Err(CliError::usage("mesh resolution must be at least 16"));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let tape = Tape::new();
    // The bare network, not the ground-composited field: the artifact of
    // interest is the reconstructed object, not the known plane.
    let sdf = ckpt.sdf.bind(&tape, &ckpt.params);
    let mesh = extract_mesh(&sdf, a.res);
    mesh.write_obj(&a.out).map_err(CliError::runtime)?;
    println!(
        "wrote {} vertices, {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// relight
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RelightArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory providing camera, ground and albedo
    #[arg(long)]
    data: PathBuf,
    /// Directional light as `x,y,z` (toward the light)
    #[arg(long)]
    direction: Option<String>,
    /// Point light position as `x,y,z`
    #[arg(long)]
    position: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    intensity: f64,
    /// Re-render the i-th dataset light instead
    #[arg(long)]
    light_index: Option<usize>,
    /// Output PFM path
    #[arg(long)]
    out: PathBuf,
}

fn parse_vec3(s: &str) -> Result<Vec3, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("expected `x,y,z`, got `{s}`")))?;
    if parts.len() != 3 {
        return Err(CliError::usage(format!("expected three components, got `{s}`")));
    }
    Ok(Vec3::new(parts[0], parts[1], parts[2]))
}

fn cmd_relight(a: RelightArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let dataset = load_dataset(&a.data).map_err(|e| CliError::usage(e.to_string()))?;
    let light = match (&a.direction, &a.position, a.light_index) {
        (Some(d), None, None) => LightSource::Directional {
            direction: parse_vec3(d)?.normalized(),
            intensity: a.intensity,
        },
        (None, Some(p), None) => {
            LightSource::Point { position: parse_vec3(p)?, intensity: a.intensity }
        }
        (None, None, Some(i)) => dataset
            .images
            .get(i)
            .ok_or_else(|| {
                CliError::usage(format!(
                    "light index {i} out of range ({} images)",
                    dataset.images.len()
                ))
            })?
            .light
            .clone(),
        _ => {
            return Err(CliError::usage(
                "specify exactly one of --direction, --position, --light-index",
            ))
        }
    };

    let ground = scene_ground(&dataset);
    let tape = Tape::new();
    let scene = BoundScene::new(&tape, ckpt.sdf.bind(&tape, &ckpt.params), ground.clone());
    let material = ckpt.material.as_ref().map(|m| m.bind(&tape, &ckpt.params));
    let shading = match &material {
        Some(m) => RelightShading::Material(&scene, m),
        None => RelightShading::Lambertian(dataset.manifest.albedo),
    };
    let sharpness = scene.sdf.s().scalar_value();
    let cfg = SampleConfig {
        n_uniform: ckpt.config.n_uniform,
        n_importance: ckpt.config.n_importance,
        scene_radius: dataset.manifest.scene_radius,
    };
    let img = relight(
        &scene,
        &shading,
        dataset.camera(),
        ground.as_ref(),
        &light,
        dataset.manifest.scene_radius,
        sharpness,
        &cfg,
    );
    write_pfm(&a.out, &img).map_err(CliError::runtime)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    let err = gradient_check(a.seed);
    println!("max relative gradient error: {err:.3e}");
    if err < 1e-4 {
        Ok(())
    } else {
        Err(CliError::runtime(format!("gradient check failed: {err:.3e} >= 1e-4")))
    }
}
