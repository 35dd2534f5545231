//! `raysplat`: generate synthetic scenes, pre-train the Gaussian-anchor
//! voxel field on them, and inspect every stage (reconstructions, masks,
//! gradients, metrics).
//!
//! Usage errors exit 2 (clap's default). Runtime failures exit 1 after
//! printing a single JSON line `{"error": "..."}` to standard error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raysplat_core::driver::{
    evaluate, forward_pass, init_state, load_checkpoint, run_training, EncoderMode, TrainConfig,
    TrainState,
};
use raysplat_core::error::{Error, Result};
use raysplat_core::gradcheck::{run_suite, suite_passed};
use raysplat_core::io::{write_pfm, write_ppm, ImageDepth, ImageRgb, PlyFormat};
use raysplat_core::masking::{generate_patch_mask, mask_visualization, validate_mask, MaskConfig};
use raysplat_core::render::RenderMode;
use raysplat_core::rng::{derive_seed, Stream};
use raysplat_core::synth::{generate_scene, render_reference, simulate_lidar, write_scene, SceneConfig};

#[derive(Parser)]
#[command(
    name = "raysplat",
    version,
    about = "Masked multi-view pre-training of a Gaussian-anchor voxel field"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its sensor ground truth.
    Synth(SynthArgs),
    /// Run pre-training; metrics stream as JSONL, checkpoints are binary.
    Pretrain(PretrainArgs),
    /// Write reconstructions beside ground truth for inspection.
    Render(RenderArgs),
    /// Finite-difference check every backward pass.
    Gradcheck(GradcheckArgs),
    /// Print held-out reconstruction metrics as one JSON line.
    Eval(EvalArgs),
    /// Write mask-pipeline visualizations (masked patches, validity).
    MaskDebug(MaskDebugArgs),
}

fn parse_render_mode(s: &str) -> std::result::Result<RenderMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_encoder_mode(s: &str) -> std::result::Result<EncoderMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    /// Scene recipe JSON; defaults to the built-in recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the recipe's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (scene.json, camera images, LiDAR cloud).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training config JSON; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's step budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Reconstruction mode: "ray" or "splat".
    #[arg(long, value_parser = parse_render_mode)]
    mode: Option<RenderMode>,
    /// Grid initialization: "lss" or "grid".
    #[arg(long, value_parser = parse_encoder_mode)]
    encoder: Option<EncoderMode>,
    /// Output directory for metrics.jsonl and checkpoints; metrics go to
    /// standard output when unset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective config JSON and exit without training.
    #[arg(long)]
    dump_config: bool,
    /// Continue from a checkpoint; only --steps and --out may be combined.
    #[arg(long, conflicts_with_all = ["config", "seed", "mode", "encoder"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint to render from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Render an untrained state built from this config instead.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    /// Held-out mask draw index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for side-by-side images.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random cases per operation.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate an untrained state built from this config instead.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    /// Held-out mask draw index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MaskDebugArgs {
    /// Training config JSON (scene and mask settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for per-camera visualizations.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => synth(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Render(args) => render(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Eval(args) => eval(args),
        Command::MaskDebug(args) => mask_debug(args),
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

/// A state for inspection commands: from a checkpoint when given, else
/// freshly initialized from a config.
fn load_state(checkpoint: Option<&Path>, config: Option<&Path>) -> Result<TrainState> {
    match checkpoint {
        Some(p) => load_checkpoint(p),
        None => init_state(load_train_config(config)?),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut config: SceneConfig = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SceneConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let scene = generate_scene(&config)?;
    std::fs::create_dir_all(&args.out)?;
    write_scene(&args.out.join("scene.json"), &scene)?;
    for (k, cam) in scene.rig.cameras.iter().enumerate() {
        let (rgb, depth) = render_reference(&scene, cam);
        write_ppm(&args.out.join(format!("camera-{k:02}.ppm")), &rgb)?;
        write_pfm(&args.out.join(format!("camera-{k:02}.pfm")), &depth)?;
    }
    let cloud = simulate_lidar(&scene)?;
    cloud.write_ply(&args.out.join("lidar.ply"), PlyFormat::BinaryLittleEndian)?;
    println!(
        "{}",
        serde_json::json!({
            "out": args.out,
            "cameras": scene.rig.cameras.len(),
            "primitives": scene.primitives.len(),
            "lidar_points": cloud.points.len(),
        })
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut state = match &args.resume {
        Some(ckpt) => {
            let mut state = load_checkpoint(ckpt)?;
            if let Some(steps) = args.steps {
                state.config.steps = steps;
                state.config.validate()?;
            }
            state
        }
        None => {
            let mut config = load_train_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(steps) = args.steps {
                config.steps = steps;
            }
            if let Some(mode) = args.mode {
                config.render_mode = mode;
            }
            if let Some(encoder) = args.encoder {
                config.encoder = encoder;
            }
            config.validate()?;
            if args.dump_config {
                print!("{}", config.to_json()?);
                return Ok(());
            }
            init_state(config)?
        }
    };
    if args.dump_config {
        print!("{}", state.config.to_json()?);
        return Ok(());
    }
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut metrics = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
            run_training(&mut state, Some(dir), &mut metrics)?;
            metrics.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut metrics = std::io::BufWriter::new(stdout.lock());
            run_training(&mut state, None, &mut metrics)?;
            metrics.flush()?;
        }
    }
    Ok(())
}

/// Paint batch-ray outputs over copies of the reference images and lay
/// each pair side by side (reference left, reconstruction right).
fn render(args: RenderArgs) -> Result<()> {
    let state = load_state(args.checkpoint.as_deref(), args.config.as_deref())?;
    let eval_seed = derive_seed(state.config.seed, Stream::Eval { seed_offset: args.seed });
    let fwd = forward_pass(&state, eval_seed, 0, false)?.ok_or(Error::EmptyBatch)?;
    std::fs::create_dir_all(&args.out)?;
    let mut recon_rgb: Vec<ImageRgb> = state.images.clone();
    let mut recon_depth: Vec<ImageDepth> = state.ref_depths.clone();
    let mut touched = vec![0usize; state.images.len()];
    for (i, ray) in fwd.batch.rays.iter().enumerate() {
        let (x, y) = ray.pixel;
        recon_rgb[ray.camera_index].set(x, y, fwd.output.colors[i]);
        recon_depth[ray.camera_index].set(x, y, fwd.output.depths[i]);
        touched[ray.camera_index] += 1;
    }
    let mut files = Vec::new();
    for (k, count) in touched.iter().enumerate() {
        if *count == 0 {
            continue;
        }
        let rgb = side_by_side_rgb(&state.images[k], &recon_rgb[k]);
        let depth = side_by_side_depth(&state.ref_depths[k], &recon_depth[k]);
        let rgb_path = args.out.join(format!("compare-cam{k:02}.ppm"));
        let depth_path = args.out.join(format!("compare-cam{k:02}.pfm"));
        write_ppm(&rgb_path, &rgb)?;
        write_pfm(&depth_path, &depth)?;
        files.push(rgb_path);
        files.push(depth_path);
    }
    println!(
        "{}",
        serde_json::json!({
            "rays": fwd.batch.rays.len(),
            "files": files,
        })
    );
    Ok(())
}

fn side_by_side_rgb(left: &ImageRgb, right: &ImageRgb) -> ImageRgb {
    let mut out = ImageRgb::new(left.width * 2, left.height);
    for y in 0..left.height {
        for x in 0..left.width {
            out.set(x, y, left.get(x, y));
            out.set(x + left.width, y, right.get(x, y));
        }
    }
    out
}

fn side_by_side_depth(left: &ImageDepth, right: &ImageDepth) -> ImageDepth {
    let mut out = ImageDepth::new_miss(left.width * 2, left.height);
    for y in 0..left.height {
        for x in 0..left.width {
            out.set(x, y, left.get(x, y));
            out.set(x + left.width, y, right.get(x, y));
        }
    }
    out
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = run_suite(args.cases, args.seed)?;
    for r in &reports {
        println!(
            "op={} cases={} checks={} max_rel_err={:.3e} tol={:.1e} status={}",
            r.name,
            r.cases,
            r.checks,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "fail" }
        );
    }
    if suite_passed(&reports) {
        Ok(())
    } else {
        let failed: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name)
            .collect();
        Err(Error::Numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let state = load_state(args.checkpoint.as_deref(), args.config.as_deref())?;
    let metrics = evaluate(&state, args.seed)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn mask_debug(args: MaskDebugArgs) -> Result<()> {
    let mut config = load_train_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let state = init_state(config)?;
    std::fs::create_dir_all(&args.out)?;
    let mut cameras = Vec::new();
    for (k, cam) in state.scene.rig.cameras.iter().enumerate() {
        let cfg = MaskConfig {
            seed: derive_seed(state.config.seed, Stream::Mask { step: 0, camera: k as u64 }),
            ..state.config.mask
        };
        let mask = generate_patch_mask(k, cam.width, cam.height, &cfg)?;
        let valid = validate_mask(&mask, &state.projections[k], &cfg);
        let vis = mask_visualization(&state.images[k], &mask, &valid);
        let path = args.out.join(format!("mask-cam{k:02}.ppm"));
        write_ppm(&path, &vis)?;
        cameras.push(serde_json::json!({
            "camera": k,
            "masked_patches": mask.patches.len(),
            "valid_patches": valid.patches.len(),
            "file": path,
        }));
    }
    println!("{}", serde_json::json!({ "cameras": cameras }));
    Ok(())
}
