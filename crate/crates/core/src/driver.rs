//! Pre-training loop: per-step masking, ray selection, decoding,
//! reconstruction, loss, and optimizer updates, plus evaluation on
//! held-out masks, binary checkpoints, and JSONL metrics.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::decoder::{decode_all, decoder_backward, DecodeStats, DecoderHeads, GaussianParams};
use crate::error::{Error, Result};
use crate::io::{ImageDepth, ImageRgb};
use crate::loss::{
    build_targets, loss_backward, total_loss, LossBreakdown, LossWeights, MetricsRecord,
    ReconTargets,
};
use crate::masking::{
    generate_patch_mask, project_lidar, validate_mask, LidarCloud, MaskConfig, ProjectedPoint,
};
use crate::optim::{AdamW, Moments, OptimConfig, ParamUpdate};
use crate::rays::{sample_anchors, select_rays, AnchorSet, RayBatch};
use crate::render::{render_backward, render_forward, RenderMode, RenderOutput};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::synth::{
    generate_scene, read_scene, render_reference, simulate_lidar, voxelize_occupancy, Scene,
    SceneConfig,
};
use crate::voxel::{
    decode_grid_segment, encode_grid_segment, extract_target_voxels, lift_splat_encode,
    DepthDistribution, FeatureImage, GridGeometry, TargetVoxels, VoxelGrid,
};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the training scene comes from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    /// Scene JSON on disk.
    Path(String),
    /// Generate procedurally at startup.
    Generate(SceneConfig),
}

/// How the voxel grid is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Lift-splat pooling of reference-derived feature images seeds the
    /// grid; training then updates the grid directly.
    Lss,
    /// The grid itself is the trainable parameter set, initialized with
    /// small noise.
    #[default]
    Grid,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lss" => Ok(EncoderMode::Lss),
            "grid" => Ok(EncoderMode::Grid),
            other => Err(Error::Config(format!(
                "unknown encoder mode {other:?} (expected \"lss\" or \"grid\")"
            ))),
        }
    }
}

/// Full experiment description; `Default` echoes the reference
/// hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scene: SceneSource,
    pub grid: GridGeometry,
    /// Voxel feature channels C.
    pub channels: usize,
    /// Decoder hidden layer widths.
    pub hidden: Vec<usize>,
    pub encoder: EncoderMode,
    pub render_mode: RenderMode,
    pub mask: MaskConfig,
    /// Target rays per step.
    pub ray_budget: usize,
    /// Anchors per ray D.
    pub anchors_per_ray: usize,
    /// Anchor placement interval along each ray, meters.
    pub anchor_depth_range: [f64; 2],
    /// Uniform per-bin jitter of anchor depths.
    pub anchor_jitter: bool,
    /// Depth bins of the lift-splat initializer.
    pub lift_bins: usize,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub steps: u64,
    /// Steps between checkpoints; 0 = final checkpoint only.
    pub checkpoint_interval: u64,
    /// Global seed; every random stream derives from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: SceneSource::Generate(SceneConfig::default()),
            grid: desk_grid(),
            channels: 32,
            hidden: vec![64, 64],
            encoder: EncoderMode::Grid,
            render_mode: RenderMode::Ray,
            mask: MaskConfig::default(),
            ray_budget: 1024,
            anchors_per_ray: 100,
            anchor_depth_range: [0.0, 50.0],
            anchor_jitter: false,
            lift_bins: 12,
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            steps: 200,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

/// 32x32x8 voxels of 0.4 m covering the default synthetic scene.
fn desk_grid() -> GridGeometry {
    GridGeometry::new(
        nalgebra::Vector3::new(-6.4, -6.4, -0.4),
        nalgebra::Vector3::new(6.4, 6.4, 2.8),
        [32, 32, 8],
    )
    .expect("static geometry")
}

impl TrainConfig {
    /// The committed reference experiment: default scene and grid, free
    /// grid encoder, 256 rays x 32 anchors, seed 7, 200 steps, and a
    /// learning rate sized for a run this short.
    pub fn fixture() -> Self {
        Self {
            ray_budget: 256,
            anchors_per_ray: 32,
            anchor_depth_range: [0.5, 12.8],
            seed: 7,
            optim: OptimConfig {
                lr: 1e-2,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.mask.validate()?;
        self.optim.validate()?;
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.ray_budget == 0 || self.anchors_per_ray == 0 {
            return Err(Error::Config("ray budget and anchors per ray must be >= 1".into()));
        }
        let [a, b] = self.anchor_depth_range;
        if !(a >= 0.0 && b > a && b.is_finite()) {
            return Err(Error::Config(format!(
                "anchor depth range [{a}, {b}] must satisfy 0 <= a < b"
            )));
        }
        if self.lift_bins == 0 {
            return Err(Error::Config("lift_bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }
}

/// Everything a run owns: the (static) scene and its sensor ground truth,
/// plus the trainable grid, decoder heads, and optimizer state.
pub struct TrainState {
    pub config: TrainConfig,
    pub scene: Scene,
    /// Per-camera reference RGB images.
    pub images: Vec<ImageRgb>,
    /// Per-camera reference view-depth maps.
    pub ref_depths: Vec<ImageDepth>,
    pub cloud: LidarCloud,
    /// Per-camera LiDAR projections, precomputed (the scene is static).
    pub projections: Vec<Vec<ProjectedPoint>>,
    /// Ground-truth occupancy keyed by spatial voxel index.
    pub occupancy: Vec<f64>,
    pub grid: VoxelGrid,
    pub heads: DecoderHeads,
    pub optimizer: AdamW,
    /// Training steps attempted (executed + skipped); indexes the
    /// per-step random streams.
    pub attempted: u64,
    /// Steps skipped because no valid rays existed.
    pub skipped: u64,
}

fn load_scene(source: &SceneSource) -> Result<Scene> {
    match source {
        SceneSource::Path(path) => read_scene(Path::new(path)),
        SceneSource::Generate(config) => generate_scene(config),
    }
}

/// Lift-splat input features for one reference image: RGB in the first
/// three channels, a constant 1 in the fourth, zeros elsewhere.
pub fn reference_feature_image(rgb: &ImageRgb, channels: usize) -> FeatureImage {
    let mut out = FeatureImage::zeros(rgb.width, rgb.height, channels);
    for y in 0..rgb.height {
        for x in 0..rgb.width {
            let color = rgb.get(x, y);
            for c in 0..channels.min(3) {
                out.set(c, x, y, color[c]);
            }
            if channels > 3 {
                out.set(3, x, y, 1.0);
            }
        }
    }
    out
}

/// Depth distribution for lift-splat: a one-hot on the bin nearest the
/// reference depth, or uniform where the reference ray missed.
pub fn reference_depth_distribution(
    depth: &ImageDepth,
    bins: usize,
    range: [f64; 2],
) -> DepthDistribution {
    let [a, b] = range;
    let bin_depths: Vec<f64> = (0..bins)
        .map(|j| a + (j as f64 + 0.5) * (b - a) / bins as f64)
        .collect();
    let mut out = DepthDistribution::uniform(depth.width, depth.height, bin_depths);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = depth.get(x, y);
            if !d.is_finite() {
                continue;
            }
            let j = (((d - a) / (b - a) * bins as f64 - 0.5).round() as i64)
                .clamp(0, bins as i64 - 1) as usize;
            for k in 0..bins {
                out.set(k, x, y, if k == j { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

/// Build a fresh training state from a config: load or generate the
/// scene, precompute sensor ground truth, and initialize parameters.
pub fn init_state(config: TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let scene = load_scene(&config.scene)?;
    let cameras = &scene.rig.cameras;
    let mut images = Vec::with_capacity(cameras.len());
    let mut ref_depths = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let (rgb, depth) = render_reference(&scene, cam);
        images.push(rgb);
        ref_depths.push(depth);
    }
    let cloud = simulate_lidar(&scene)?;
    let projections = cameras.iter().map(|cam| project_lidar(&cloud, cam)).collect();
    let occupancy = voxelize_occupancy(&cloud, &config.grid);
    let mut grid = match config.encoder {
        EncoderMode::Grid => {
            let mut grid = VoxelGrid::zeros(config.grid.clone(), config.channels);
            let mut rng = rng_for(config.seed, Stream::GridInit);
            for v in &mut grid.features {
                *v = rng.gen_range(-0.01..0.01);
            }
            grid
        }
        EncoderMode::Lss => {
            let features: Vec<FeatureImage> = images
                .iter()
                .map(|rgb| reference_feature_image(rgb, config.channels))
                .collect();
            let distributions: Vec<DepthDistribution> = ref_depths
                .iter()
                .map(|d| {
                    reference_depth_distribution(d, config.lift_bins, config.anchor_depth_range)
                })
                .collect();
            lift_splat_encode(&features, &distributions, cameras, &config.grid)?
        }
    };
    grid.snap_to_f32();
    let heads = DecoderHeads::init(
        config.channels,
        &config.hidden,
        derive_seed(config.seed, Stream::Init),
    )?;
    let optimizer = AdamW::new(config.optim)?;
    Ok(TrainState {
        config,
        scene,
        images,
        ref_depths,
        cloud,
        projections,
        occupancy,
        grid,
        heads,
        optimizer,
        attempted: 0,
        skipped: 0,
    })
}

/// One masked forward pass: everything from mask sampling to rendered
/// reconstruction and its targets.
pub struct ForwardPass {
    pub batch: RayBatch,
    pub anchors: AnchorSet,
    pub target_voxels: TargetVoxels,
    pub params: GaussianParams,
    pub decode_stats: DecodeStats,
    pub output: RenderOutput,
    pub targets: ReconTargets,
}

/// Run the forward pipeline with streams derived from (`seed_ctx`,
/// `step`). Returns `None` when no valid masked rays exist.
pub fn forward_pass(
    state: &TrainState,
    seed_ctx: u64,
    step: u64,
    jitter: bool,
) -> Result<Option<ForwardPass>> {
    let cameras = &state.scene.rig.cameras;
    let mut valid_masks = Vec::with_capacity(cameras.len());
    for (k, cam) in cameras.iter().enumerate() {
        let cfg = MaskConfig {
            seed: derive_seed(seed_ctx, Stream::Mask { step, camera: k as u64 }),
            ..state.config.mask
        };
        let mask = generate_patch_mask(k, cam.width, cam.height, &cfg)?;
        valid_masks.push(validate_mask(&mask, &state.projections[k], &cfg));
    }
    let batch = match select_rays(
        &valid_masks,
        cameras,
        state.config.ray_budget,
        derive_seed(seed_ctx, Stream::RaySelect { step }),
    ) {
        Ok(batch) => batch,
        Err(Error::EmptyBatch) => return Ok(None),
        Err(e) => return Err(e),
    };
    let anchors = sample_anchors(
        &batch,
        cameras,
        state.config.anchors_per_ray,
        state.config.anchor_depth_range,
        jitter.then(|| derive_seed(seed_ctx, Stream::AnchorJitter { step })),
    )?;
    let target_voxels = extract_target_voxels(&anchors, &state.grid.geometry);
    let (params, decode_stats) = decode_all(&state.grid, &state.heads, &anchors)?;
    let output = render_forward(
        state.config.render_mode,
        &batch,
        &anchors,
        &params,
        &target_voxels,
        cameras,
        state.config.mask.patch_size,
    )?;
    let geometry = &state.grid.geometry;
    let occupancy = &state.occupancy;
    let targets = build_targets(&batch, &state.images, &target_voxels, |v| {
        occupancy[geometry.spatial_index(v)]
    })?;
    Ok(Some(ForwardPass {
        batch,
        anchors,
        target_voxels,
        params,
        decode_stats,
        output,
        targets,
    }))
}

/// What one attempted training step produced.
pub struct StepOutcome {
    /// Attempt index the step ran as (0-based).
    pub step: u64,
    pub skipped: bool,
    pub loss: Option<LossBreakdown>,
    pub grad_norm: Option<f64>,
    pub decode_stats: Option<DecodeStats>,
}

/// Execute one training step. Steps with no valid rays are counted and
/// leave every parameter bit-untouched (no decay either).
pub fn train_step(state: &mut TrainState) -> Result<StepOutcome> {
    let step = state.attempted;
    let seed = state.config.seed;
    let Some(fwd) = forward_pass(state, seed, step, state.config.anchor_jitter)? else {
        state.attempted += 1;
        state.skipped += 1;
        return Ok(StepOutcome {
            step,
            skipped: true,
            loss: None,
            grad_norm: None,
            decode_stats: None,
        });
    };
    let breakdown = total_loss(
        &fwd.output.colors,
        &fwd.output.depths,
        &fwd.output.occupancy,
        &fwd.targets,
        &state.config.loss,
        step,
    )?;
    let upstream = loss_backward(
        &fwd.output.colors,
        &fwd.output.depths,
        &fwd.output.occupancy,
        &fwd.targets,
        &state.config.loss,
    )?;
    let param_grads = render_backward(
        state.config.render_mode,
        &fwd.batch,
        &fwd.anchors,
        &fwd.params,
        &fwd.target_voxels,
        &state.scene.rig.cameras,
        &fwd.output,
        &upstream,
    )?;
    let back = decoder_backward(&state.grid, &state.heads, &fwd.anchors, &param_grads)?;
    let mut color = state.heads.color.flatten();
    let mut opacity = state.heads.opacity.flatten();
    let mut rotation = state.heads.rotation.flatten();
    let mut scale = state.heads.scale.flatten();
    let stats = state.optimizer.apply(&mut [
        ParamUpdate {
            name: "grid",
            params: &mut state.grid.features,
            grads: &back.grid_features,
        },
        ParamUpdate {
            name: "color",
            params: &mut color,
            grads: &back.heads.color.flatten(),
        },
        ParamUpdate {
            name: "opacity",
            params: &mut opacity,
            grads: &back.heads.opacity.flatten(),
        },
        ParamUpdate {
            name: "rotation",
            params: &mut rotation,
            grads: &back.heads.rotation.flatten(),
        },
        ParamUpdate {
            name: "scale",
            params: &mut scale,
            grads: &back.heads.scale.flatten(),
        },
    ])?;
    state.heads.color.set_from_flat(&color)?;
    state.heads.opacity.set_from_flat(&opacity)?;
    state.heads.rotation.set_from_flat(&rotation)?;
    state.heads.scale.set_from_flat(&scale)?;
    // The grid's disk format is f32; keeping the live values snapped makes
    // checkpoint round trips bit-exact.
    state.grid.snap_to_f32();
    state.attempted += 1;
    Ok(StepOutcome {
        step,
        skipped: false,
        loss: Some(breakdown),
        grad_norm: Some(stats.grad_norm),
        decode_stats: Some(fwd.decode_stats),
    })
}

/// Reconstruction quality on held-out masks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    /// Mean channel-mean |C − Ĉ| over evaluated rays.
    pub rgb_l1: f64,
    /// Mean |D − D̂| in meters over depth-supported rays; `None` if none.
    pub depth_l1: Option<f64>,
    /// Occupancy IoU at threshold 0.5 over the step's target voxels.
    pub occupancy_iou: f64,
    pub rays: usize,
    pub depth_rays: usize,
    pub target_voxels: usize,
}

/// IoU of `pred >= threshold` vs `truth >= threshold`; 1.0 when both sets
/// are empty.
pub fn occupancy_iou(pred: &[f64], truth: &[f64], threshold: f64) -> f64 {
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (*p >= threshold, *t >= threshold);
        intersection += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Evaluate on masks drawn from a held-out stream (`seed_offset`
/// distinguishes evaluation draws; none of them overlaps any training
/// step's stream).
pub fn evaluate(state: &TrainState, seed_offset: u64) -> Result<EvalMetrics> {
    let eval_seed = derive_seed(state.config.seed, Stream::Eval { seed_offset });
    let fwd = forward_pass(state, eval_seed, 0, false)?.ok_or(Error::EmptyBatch)?;
    let rays = fwd.batch.len();
    let mut rgb_sum = 0.0;
    for (got, want) in fwd.output.colors.iter().zip(&fwd.targets.colors) {
        rgb_sum += (0..3).map(|k| (want[k] - got[k]).abs()).sum::<f64>() / 3.0;
    }
    let mut depth_rays = 0usize;
    let mut depth_sum = 0.0;
    for (got, want) in fwd.output.depths.iter().zip(&fwd.targets.depths) {
        if let Some(want) = want {
            depth_rays += 1;
            depth_sum += (want - got).abs();
        }
    }
    Ok(EvalMetrics {
        rgb_l1: rgb_sum / rays as f64,
        depth_l1: (depth_rays > 0).then(|| depth_sum / depth_rays as f64),
        occupancy_iou: occupancy_iou(&fwd.output.occupancy, &fwd.targets.occupancy, 0.5),
        rays,
        depth_rays,
        target_voxels: fwd.target_voxels.len(),
    })
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64_le()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

const MOMENT_GROUPS: [&str; 5] = ["grid", "color", "opacity", "rotation", "scale"];

/// Serialize the full training state: magic, version, config JSON, step
/// counters, seed, grid segment, head parameters, optimizer moments.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_string(&state.config)?;
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&state.attempted.to_le_bytes());
    out.extend_from_slice(&state.skipped.to_le_bytes());
    out.extend_from_slice(&state.config.seed.to_le_bytes());
    out.extend_from_slice(&state.optimizer.step.to_le_bytes());
    out.extend_from_slice(&encode_grid_segment(&state.grid));
    for (_, head) in state.heads.iter() {
        push_f64s(&mut out, &head.flatten());
    }
    for name in MOMENT_GROUPS {
        match state.optimizer.moments.get(name) {
            Some(m) => {
                push_f64s(&mut out, &m.m);
                push_f64s(&mut out, &m.v);
            }
            None => {
                push_f64s(&mut out, &[]);
                push_f64s(&mut out, &[]);
            }
        }
    }
    Ok(out)
}

/// Rebuild a state from checkpoint bytes. The scene and its derived
/// ground truth are regenerated from the embedded config (deterministic),
/// then the trained parameters and optimizer state are restored.
pub fn state_from_checkpoint_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u64_le()? as usize;
    let config_json = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config is not UTF-8: {e}")))?;
    let config: TrainConfig = serde_json::from_str(config_json)
        .map_err(|e| Error::CorruptCheckpoint(format!("config JSON: {e}")))?;
    let attempted = r.u64_le()?;
    let skipped = r.u64_le()?;
    let seed = r.u64_le()?;
    if seed != config.seed {
        return Err(Error::CorruptCheckpoint(format!(
            "stored RNG seed {seed} disagrees with config seed {}",
            config.seed
        )));
    }
    let optimizer_step = r.u64_le()?;
    let (grid, consumed) = decode_grid_segment(&bytes[r.pos..]).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::CorruptCheckpoint(format!("grid segment: {detail}")),
        other => other,
    })?;
    r.pos += consumed;
    let mut state = init_state(config)?;
    if grid.geometry != state.config.grid || grid.channels != state.config.channels {
        return Err(Error::CorruptCheckpoint(
            "grid segment shape disagrees with config".into(),
        ));
    }
    state.grid = grid;
    let heads = [
        &mut state.heads.color,
        &mut state.heads.opacity,
        &mut state.heads.rotation,
        &mut state.heads.scale,
    ];
    for head in heads {
        let flat = r.f64s()?;
        head.set_from_flat(&flat)
            .map_err(|e| Error::CorruptCheckpoint(format!("head parameters: {e}")))?;
    }
    state.optimizer.step = optimizer_step;
    state.optimizer.moments.clear();
    for name in MOMENT_GROUPS {
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != v.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "moment arrays for '{name}' disagree in length"
            )));
        }
        if !m.is_empty() {
            state.optimizer.moments.insert(name.to_string(), Moments { m, v });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    state.attempted = attempted;
    state.skipped = skipped;
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    state_from_checkpoint_bytes(&std::fs::read(path)?)
}

/// Load a checkpoint and require its config to match `expected` exactly.
pub fn load_checkpoint_with_config(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.config != *expected {
        return Err(Error::ConfigMismatch(
            "checkpoint was trained under a different config".into(),
        ));
    }
    Ok(state)
}

/// Run the remaining steps of `state`, appending one metrics line per
/// executed step and checkpointing per the config. Returns the number of
/// executed (non-skipped) steps.
pub fn run_training(
    state: &mut TrainState,
    out_dir: Option<&Path>,
    metrics: &mut impl Write,
) -> Result<u64> {
    let mut executed = 0u64;
    while state.attempted < state.config.steps {
        let outcome = train_step(state)?;
        if let Some(b) = &outcome.loss {
            crate::loss::write_metrics_line(metrics, &MetricsRecord::from_breakdown(outcome.step, b))?;
            executed += 1;
        }
        if let Some(dir) = out_dir {
            let interval = state.config.checkpoint_interval;
            if interval > 0 && state.attempted % interval == 0 && state.attempted < state.config.steps
            {
                save_checkpoint(&dir.join(format!("checkpoint-{:06}.gpck", state.attempted)), state)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint.gpck"), state)?;
    }
    Ok(executed)
}
